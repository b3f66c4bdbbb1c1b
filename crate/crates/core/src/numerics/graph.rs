use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::rng::StreamRng;
use crate::{Error, Result, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatVec { w: Var, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Sum(Var),
    Square(Var),
    Mean(Var),
    Bce { logits: Var, targets: Vec<T> },
    SoftmaxCe { logits: Var, gold: usize },
    Dropout { x: Var, mask: Vec<T> },
    EmbedMean { table: Var, ids: Vec<usize> },
    Select { x: Var, idx: Vec<usize> },
    Concat(Var, Var),
    AddN(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    /// `None` for parameter nodes, whose values live in the store.
    value: Option<Vec<T>>,
    op: Op<T>,
}

/// Append-only tape over a borrowed [`ParamStore`].
///
/// Nodes are recorded in creation order, which is a topological order, so
/// [`Graph::backward`] is a single reverse sweep. Parameter nodes are
/// memoised: asking for the same parameter twice yields the same `Var`, and
/// large tables are never copied onto the tape.
pub struct Graph<'a, T> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::invalid(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            shape,
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.store.get(*id).values(),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn input(&mut self, values: Vec<T>) -> Var {
        let n = values.len();
        self.push(vec![n], values, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            shape: self.store.get(id).shape().to_vec(),
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// `W x` for a 2-D `W` of shape `[rows, cols]` and a length-`cols` `x`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (rows, cols) = match self.shape(w) {
            [r, c] => (*r, *c),
            s => return Err(mismatch("matvec", s, self.shape(x))),
        };
        if self.value(x).len() != cols {
            return Err(mismatch("matvec", self.shape(w), self.shape(x)));
        }
        let wv = self.value(w);
        let xv = self.value(x);
        let out: Vec<T> = (0..rows)
            .map(|r| {
                wv[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(xv)
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        Ok(self.push(vec![rows], out, Op::MatVec { w, x }))
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }

    fn zip_with(&mut self, name: &str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Scalar::sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, T::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let m = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        Ok(self.push(vec![1], vec![m], Op::Mean(a)))
    }

    /// Elementwise binary cross-entropy with logits in the stable form
    /// `softplus(x) - y x`. Returns the per-element losses.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != targets.len() {
            return Err(mismatch("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let out = lv
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.softplus() - y * x)
            .collect();
        let shape = self.shape(logits).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::Bce {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// `-log softmax(logits)[gold]`.
    pub fn softmax_ce(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let lv = self.value(logits);
        if gold >= lv.len() {
            return Err(Error::invalid(format!(
                "gold index {gold} out of range for {} logits",
                lv.len()
            )));
        }
        let loss = log_sum_exp(lv) - lv[gold];
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxCe { logits, gold }))
    }

    /// Inverted dropout: each element is zeroed with probability `p` and
    /// survivors are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, x: Var, p: T, rng: &mut StreamRng) -> Result<Var> {
        if !(p >= T::zero() && p < T::one()) {
            return Err(Error::invalid(format!("dropout probability {p} not in [0, 1)")));
        }
        let keep = T::one() / (T::one() - p);
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if T::lit(rng.unit_f64()) < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&a, &m)| a * m)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }))
    }

    /// Mean of the rows of a `[vocab, d]` table selected by `ids`.
    pub fn embed_mean(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = match self.shape(table) {
            [r, c] => (*r, *c),
            s => return Err(Error::invalid(format!("embedding table must be 2-D, got {s:?}"))),
        };
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup over an empty sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {rows}")));
        }
        let tv = self.value(table);
        let mut out = vec![T::zero(); d];
        for &i in ids {
            for (o, &t) in out.iter_mut().zip(&tv[i * d..(i + 1) * d]) {
                *o = *o + t;
            }
        }
        let inv = T::one() / T::lit(ids.len() as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        Ok(self.push(
            vec![d],
            out,
            Op::EmbedMean {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Gathers `x[idx[k]]` into a new vector.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::invalid(format!("select index {bad} out of range {}", xv.len())));
        }
        let out = idx.iter().map(|&i| xv[i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::Select { x, idx: idx.to_vec() }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).to_vec();
        out.extend_from_slice(self.value(b));
        let n = out.len();
        self.push(vec![n], out, Op::Concat(a, b))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let first = *vars.first().ok_or_else(|| Error::invalid("add_n of nothing"))?;
        let n = self.value(first).len();
        let mut out = vec![T::zero(); n];
        for &v in vars {
            let vv = self.value(v);
            if vv.len() != n {
                return Err(mismatch("add_n", self.shape(first), self.shape(v)));
            }
            for (o, &x) in out.iter_mut().zip(vv) {
                *o = *o + x;
            }
        }
        let shape = self.shape(first).to_vec();
        Ok(self.push(shape, out, Op::AddN(vars.to_vec())))
    }

    /// Reverse sweep from a single-element `loss`. Returns gradients for
    /// every parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::empty(self.store);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.set(*id, Tensor::new(node.shape.clone(), g)?),
                Op::MatVec { w, x } => {
                    let cols = self.value(*x).len();
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    {
                        let gw = slot(&mut grads, *w, wv.len());
                        for (r, &gr) in g.iter().enumerate() {
                            for (dst, &xc) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *dst = *dst + gr * xc;
                            }
                        }
                    }
                    let gx = slot(&mut grads, *x, cols);
                    for (r, &gr) in g.iter().enumerate() {
                        for (dst, &wrc) in gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                            *dst = *dst + gr * wrc;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g, |gi, _| gi);
                    accumulate(&mut grads, *b, &g, |gi, _| gi);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g, |gi, _| gi);
                    accumulate(&mut grads, *b, &g, |gi, _| -gi);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate(&mut grads, *a, &g, |gi, k| gi * bv[k]);
                    accumulate(&mut grads, *b, &g, |gi, k| gi * av[k]);
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g, |gi, _| gi * *c),
                Op::Sigmoid(a) => {
                    let y = node.value.as_deref().unwrap_or_default();
                    accumulate(&mut grads, *a, &g, |gi, k| gi * y[k] * (T::one() - y[k]));
                }
                Op::Exp(a) => {
                    let y = node.value.as_deref().unwrap_or_default();
                    accumulate(&mut grads, *a, &g, |gi, k| gi * y[k]);
                }
                Op::Square(a) => {
                    let av = self.value(*a);
                    let two = T::lit(2.0);
                    accumulate(&mut grads, *a, &g, |gi, k| two * av[k] * gi);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    let buf = slot(&mut grads, *a, n);
                    buf.iter_mut().for_each(|d| *d = *d + g[0]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let share = g[0] / T::lit(n as f64);
                    let buf = slot(&mut grads, *a, n);
                    buf.iter_mut().for_each(|d| *d = *d + share);
                }
                Op::Bce { logits, targets } => {
                    let lv = self.value(*logits);
                    accumulate(&mut grads, *logits, &g, |gi, k| {
                        gi * (lv[k].sigmoid() - targets[k])
                    });
                }
                Op::SoftmaxCe { logits, gold } => {
                    let lv = self.value(*logits);
                    let lse = log_sum_exp(lv);
                    let local: Vec<T> = lv
                        .iter()
                        .enumerate()
                        .map(|(k, &x)| {
                            let onehot = if k == *gold { T::one() } else { T::zero() };
                            g[0] * ((x - lse).exp() - onehot)
                        })
                        .collect();
                    accumulate(&mut grads, *logits, &local, |gi, _| gi);
                }
                Op::Dropout { x, mask } => accumulate(&mut grads, *x, &g, |gi, k| gi * mask[k]),
                Op::EmbedMean { table, ids } => {
                    let d = g.len();
                    let inv = T::one() / T::lit(ids.len() as f64);
                    let rows = self.value(*table).len();
                    let buf = slot(&mut grads, *table, rows);
                    for &i in ids {
                        for (dst, &gi) in buf[i * d..(i + 1) * d].iter_mut().zip(&g) {
                            *dst = *dst + gi * inv;
                        }
                    }
                }
                Op::Select { x, idx } => {
                    let n = self.value(*x).len();
                    let buf = slot(&mut grads, *x, n);
                    for (&i, &gi) in idx.iter().zip(&g) {
                        buf[i] = buf[i] + gi;
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    accumulate(&mut grads, *a, &g[..na], |gi, _| gi);
                    accumulate(&mut grads, *b, &g[na..], |gi, _| gi);
                }
                Op::AddN(vars) => {
                    for v in vars {
                        accumulate(&mut grads, *v, &g, |gi, _| gi);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

/// `grads[v][k] += f(upstream[k], k)`.
fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, upstream: &[T], f: impl Fn(T, usize) -> T) {
    let buf = slot(grads, v, upstream.len());
    for (k, (dst, &gi)) in buf.iter_mut().zip(upstream).enumerate() {
        *dst = *dst + f(gi, k);
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamGroupTag;

    fn store_with(vals: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, shape, v) in vals {
            s.add(n, ParamGroupTag::Encoder, Tensor::new(shape.clone(), v.clone()).unwrap())
                .unwrap();
        }
        s
    }

    #[test]
    fn square_of_three_has_gradient_six() {
        let store = store_with(&[("x", vec![1], vec![3.0])]);
        let mut g = Graph::new(&store);
        let x = g.param(ParamId(0));
        let y = g.square(x);
        let loss = g.sum(y);
        assert_eq!(g.scalar(loss), 9.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().values(), &[6.0]);
    }

    #[test]
    fn param_nodes_are_memoised_and_reuse_accumulates() {
        let store = store_with(&[("x", vec![2], vec![1.0, 2.0])]);
        let mut g = Graph::new(&store);
        let a = g.param(ParamId(0));
        let b = g.param(ParamId(0));
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn matvec_shape_errors() {
        let store = store_with(&[("w", vec![2, 3], vec![0.0; 6])]);
        let mut g = Graph::new(&store);
        let w = g.param(ParamId(0));
        let x = g.input(vec![1.0, 2.0]);
        assert!(g.matvec(w, x).is_err());
    }

    #[test]
    fn softmax_ce_uniform_is_ln_k() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let l = g.input(vec![0.0; 5]);
        let ce = g.softmax_ce(l, 2).unwrap();
        assert!((g.scalar(ce) - 5f64.ln()).abs() < 1e-15);
        assert!(g.softmax_ce(l, 5).is_err());
    }

    #[test]
    fn embed_mean_rejects_out_of_vocab() {
        let store = store_with(&[("e", vec![3, 2], vec![0.0; 6])]);
        let mut g = Graph::new(&store);
        let t = g.param(ParamId(0));
        assert!(g.embed_mean(t, &[0, 3]).is_err());
        let m = g.embed_mean(t, &[0, 2, 2]).unwrap();
        assert_eq!(g.value(m).len(), 2);
    }

    #[test]
    fn dropout_scales_survivors() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(vec![1.0; 1000]);
        let mut rng = StreamRng::new(5);
        let y = g.dropout(x, 0.1, &mut rng).unwrap();
        let vals = g.value(y);
        let dropped = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((50..150).contains(&dropped));
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }
}
