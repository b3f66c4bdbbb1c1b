//! Classification heads.
//!
//! Factor order is fixed everywhere as Responsibility, Condition, Sanction,
//! Definition (indices 0..=3) with No-Conflict at index 4.

use crate::numerics::{
    constant_init, fan_in_uniform_init, xavier_uniform_init, Graph, ParamGroupTag, ParamId, ParamStore, Var,
};
use crate::rng::StreamRng;
use crate::{Error, Result, Scalar};

pub const N_FACTORS: usize = 4;
pub const N_CLASSES: usize = 5;
pub const NC_INDEX: usize = 4;

/// `logit(0.05)`: every factor starts with 5% evidence on a zero input.
pub const FACTOR_PRIOR_LOGIT: f64 = -2.944_438_979_166_440_5;
/// Initial No-Conflict margin, so NC wins on neutral evidence.
pub const NC_BIAS_INIT: f64 = 0.5;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(format!("{what}: expected length {want}, got {got}")));
    }
    Ok(())
}

/// Handles to the typed-head parameter group: the factor projection and the
/// monotone-complement scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct TypedHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub factor_bias: ParamId,
    pub log_weight: ParamId,
    pub nc_bias: ParamId,
    pub log_alpha: ParamId,
    pub dropout: f64,
}

const TYPED_NAMES: [&str; 6] = [
    "typed.factor.weight",
    "typed.factor.bias",
    "typed.complement.factor_bias",
    "typed.complement.log_weight",
    "typed.complement.nc_bias",
    "typed.complement.log_alpha",
];

/// Plain values of the complement parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplementParams<T> {
    pub factor_bias: [T; N_FACTORS],
    pub log_weight: [T; N_FACTORS],
    pub nc_bias: T,
    pub log_alpha: T,
}

impl<T: Scalar> ComplementParams<T> {
    pub fn initial() -> Self {
        Self {
            factor_bias: [T::zero(); N_FACTORS],
            log_weight: [T::zero(); N_FACTORS],
            nc_bias: T::lit(NC_BIAS_INIT),
            log_alpha: T::zero(),
        }
    }
}

impl TypedHead {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, hidden: usize, dropout: f64, seed: u64) -> Result<Self> {
        let g = ParamGroupTag::TypedHead;
        let weight = store.add(TYPED_NAMES[0], g, xavier_uniform_init(N_FACTORS, hidden, 0.5, seed)?)?;
        let bias = store.add(TYPED_NAMES[1], g, constant_init(vec![N_FACTORS], FACTOR_PRIOR_LOGIT))?;
        let factor_bias = store.add(TYPED_NAMES[2], g, constant_init(vec![N_FACTORS], 0.0))?;
        let log_weight = store.add(TYPED_NAMES[3], g, constant_init(vec![N_FACTORS], 0.0))?;
        let nc_bias = store.add(TYPED_NAMES[4], g, constant_init(vec![1], NC_BIAS_INIT))?;
        let log_alpha = store.add(TYPED_NAMES[5], g, constant_init(vec![1], 0.0))?;
        Ok(Self {
            weight,
            bias,
            factor_bias,
            log_weight,
            nc_bias,
            log_alpha,
            dropout,
        })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, hidden: usize, dropout: f64) -> Result<Self> {
        let [a, b, c, d, e, f] = TYPED_NAMES.map(|n| store.require(n));
        let head = Self {
            weight: a?,
            bias: b?,
            factor_bias: c?,
            log_weight: d?,
            nc_bias: e?,
            log_alpha: f?,
            dropout,
        };
        check_len("typed head weight", store.get(head.weight).len(), N_FACTORS * hidden)?;
        Ok(head)
    }

    pub fn complement<T: Scalar>(&self, store: &ParamStore<T>) -> ComplementParams<T> {
        let arr = |id: ParamId| {
            let v = store.get(id).values();
            [v[0], v[1], v[2], v[3]]
        };
        ComplementParams {
            factor_bias: arr(self.factor_bias),
            log_weight: arr(self.log_weight),
            nc_bias: store.get(self.nc_bias).values()[0],
            log_alpha: store.get(self.log_alpha).values()[0],
        }
    }

    /// Raw factor scores `s = W Dropout(h) + b`.
    pub fn factor_scores<T: Scalar>(
        &self,
        graph: &mut Graph<'_, T>,
        h: Var,
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let w = graph.param(self.weight);
        let cols = graph.shape(w)[1];
        check_len("factor_scores input", graph.value(h).len(), cols)?;
        let x = match dropout_rng {
            Some(rng) => graph.dropout(h, T::lit(self.dropout), rng)?,
            None => h,
        };
        let b = graph.param(self.bias);
        graph.affine(w, x, b)
    }

    /// Full factor state for one representation, no dropout.
    pub fn state<T: Scalar>(&self, graph: &mut Graph<'_, T>, h: Var) -> Result<FactorState<T>> {
        let s = self.factor_scores(graph, h, None)?;
        let store = graph.store();
        FactorState::from_scores(graph.value(s), &self.complement(store))
    }
}

/// Five-way logits from factor evidence:
/// `l_t = b_t + exp(log w_t) e_t` and `l_NC = b_NC - exp(log alpha) sum_t e_t`.
pub fn complement_logits<T: Scalar>(evidence: &[T; N_FACTORS], params: &ComplementParams<T>) -> [T; N_CLASSES] {
    let mut out = [T::zero(); N_CLASSES];
    for t in 0..N_FACTORS {
        out[t] = params.factor_bias[t] + params.log_weight[t].exp() * evidence[t];
    }
    let total: T = evidence.iter().copied().sum();
    out[NC_INDEX] = params.nc_bias - params.log_alpha.exp() * total;
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorState<T> {
    pub scores: [T; N_FACTORS],
    pub evidence: [T; N_FACTORS],
    pub logits: [T; N_CLASSES],
}

impl<T: Scalar> FactorState<T> {
    pub fn from_scores(scores: &[T], params: &ComplementParams<T>) -> Result<Self> {
        check_len("factor scores", scores.len(), N_FACTORS)?;
        let scores = [scores[0], scores[1], scores[2], scores[3]];
        let evidence = scores.map(Scalar::sigmoid);
        Ok(Self {
            scores,
            evidence,
            logits: complement_logits(&evidence, params),
        })
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// The fresh five-way classifier used at Stage 2 and at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct FreshHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dropout: f64,
}

impl FreshHead {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, hidden: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut rng = StreamRng::new(seed);
        let g = ParamGroupTag::FreshHead;
        let weight = store.add("fresh.weight", g, fan_in_uniform_init(N_CLASSES, hidden, rng.next_u64())?)?;
        let bias_vals = (0..N_CLASSES).map(|_| T::lit(rand_bias(&mut rng, hidden))).collect();
        let bias = store.add("fresh.bias", g, crate::numerics::Tensor::vector(bias_vals))?;
        Ok(Self { weight, bias, dropout })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, hidden: usize, dropout: f64) -> Result<Self> {
        let head = Self {
            weight: store.require("fresh.weight")?,
            bias: store.require("fresh.bias")?,
            dropout,
        };
        check_len("fresh head weight", store.get(head.weight).len(), N_CLASSES * hidden)?;
        Ok(head)
    }

    /// `W_cls Dropout(h) + b`.
    pub fn logits<T: Scalar>(&self, graph: &mut Graph<'_, T>, h: Var, dropout_rng: Option<&mut StreamRng>) -> Result<Var> {
        let w = graph.param(self.weight);
        let cols = graph.shape(w)[1];
        check_len("fresh head input", graph.value(h).len(), cols)?;
        let x = match dropout_rng {
            Some(rng) => graph.dropout(h, T::lit(self.dropout), rng)?,
            None => h,
        };
        let b = graph.param(self.bias);
        graph.affine(w, x, b)
    }
}

fn rand_bias(rng: &mut StreamRng, fan_in: usize) -> f64 {
    (2.0 * rng.unit_f64() - 1.0) / (fan_in as f64).sqrt()
}

/// Concatenation baseline: two separate single-text representations, one
/// affine map over `[h_A; h_B]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dropout: f64,
}

impl BaselineHead {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, hidden: usize, dropout: f64, seed: u64) -> Result<Self> {
        let mut rng = StreamRng::new(seed);
        let g = ParamGroupTag::BaselineHead;
        let weight = store.add(
            "baseline.weight",
            g,
            fan_in_uniform_init(N_CLASSES, 2 * hidden, rng.next_u64())?,
        )?;
        let bias_vals = (0..N_CLASSES).map(|_| T::lit(rand_bias(&mut rng, 2 * hidden))).collect();
        let bias = store.add("baseline.bias", g, crate::numerics::Tensor::vector(bias_vals))?;
        Ok(Self { weight, bias, dropout })
    }

    pub fn attach<T: Scalar>(store: &ParamStore<T>, hidden: usize, dropout: f64) -> Result<Self> {
        let head = Self {
            weight: store.require("baseline.weight")?,
            bias: store.require("baseline.bias")?,
            dropout,
        };
        check_len("baseline head weight", store.get(head.weight).len(), N_CLASSES * 2 * hidden)?;
        Ok(head)
    }

    pub fn logits<T: Scalar>(
        &self,
        graph: &mut Graph<'_, T>,
        h_a: Var,
        h_b: Var,
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let w = graph.param(self.weight);
        let cols = graph.shape(w)[1];
        let (na, nb) = (graph.value(h_a).len(), graph.value(h_b).len());
        if na != nb || na + nb != cols {
            return Err(Error::invalid(format!(
                "baseline head expects two vectors of length {}, got {na} and {nb}",
                cols / 2
            )));
        }
        let joint = graph.concat(h_a, h_b);
        let x = match dropout_rng {
            Some(rng) => graph.dropout(joint, T::lit(self.dropout), rng)?,
            None => joint,
        };
        let b = graph.param(self.bias);
        graph.affine(w, x, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn typed_store(d: usize) -> (ParamStore<f64>, TypedHead) {
        let mut store = ParamStore::new();
        let head = TypedHead::init(&mut store, d, 0.1, 7).unwrap();
        (store, head)
    }

    #[test]
    fn prior_logit_constant() {
        assert!((FACTOR_PRIOR_LOGIT - (0.05f64 / 0.95).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_input_gives_bias_scores_and_five_percent_evidence() {
        let (store, head) = typed_store(8);
        let mut g = Graph::new(&store);
        let h = g.input(vec![0.0; 8]);
        let state = head.state(&mut g, h).unwrap();
        for t in 0..N_FACTORS {
            assert!((state.scores[t] + 2.9444).abs() < 1e-4);
            assert!((state.evidence[t] - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_gives_bias_for_any_input() {
        let (mut store, head) = typed_store(3);
        store.get_mut(head.weight).values_mut().fill(0.0);
        let mut g = Graph::new(&store);
        let h = g.input(vec![4.0, -1.0, 9.0]);
        let s = head.factor_scores(&mut g, h, None).unwrap();
        assert_eq!(g.value(s), store.get(head.bias).values());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (store, head) = typed_store(3);
        let mut g = Graph::new(&store);
        let h = g.input(vec![0.0; 4]);
        assert!(head.factor_scores(&mut g, h, None).is_err());
    }

    #[test]
    fn complement_at_init() {
        let p = ComplementParams::<f64>::initial();
        assert_eq!(complement_logits(&[0.0; 4], &p), [0.0, 0.0, 0.0, 0.0, 0.5]);

        let l = complement_logits(&[0.05; 4], &p);
        let want = [0.05, 0.05, 0.05, 0.05, 0.30];
        for (a, b) in l.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(argmax(&l), NC_INDEX);

        let l = complement_logits(&[0.9, 0.05, 0.05, 0.05], &p);
        assert!((l[NC_INDEX] + 0.55).abs() < 1e-12);
        assert_eq!(argmax(&l), 0);
    }

    fn random_params(rng: &mut StreamRng) -> ComplementParams<f64> {
        let mut u = || 6.0 * rng.unit_f64() - 3.0;
        ComplementParams {
            factor_bias: [u(), u(), u(), u()],
            log_weight: [u(), u(), u(), u()],
            nc_bias: u(),
            log_alpha: u(),
        }
    }

    #[test]
    fn complement_is_monotone_in_evidence() {
        let mut rng = StreamRng::new(2024);
        let delta = 1e-3;
        for _ in 0..1000 {
            let p = random_params(&mut rng);
            let e: [f64; 4] = std::array::from_fn(|_| rng.unit_f64() * (1.0 - delta));
            let base = complement_logits(&e, &p);
            for t in 0..N_FACTORS {
                let mut bumped = e;
                bumped[t] += delta;
                let l = complement_logits(&bumped, &p);
                assert!(l[NC_INDEX] < base[NC_INDEX]);
                assert!(l[t] > base[t]);
            }
        }
    }

    #[test]
    fn complement_commutes_with_factor_permutation() {
        let mut rng = StreamRng::new(8);
        for _ in 0..200 {
            let p = random_params(&mut rng);
            let e: [f64; 4] = std::array::from_fn(|_| rng.unit_f64());
            let perm = rng.permutation(N_FACTORS);
            let pe: [f64; 4] = std::array::from_fn(|k| e[perm[k]]);
            let pp = ComplementParams {
                factor_bias: std::array::from_fn(|k| p.factor_bias[perm[k]]),
                log_weight: std::array::from_fn(|k| p.log_weight[perm[k]]),
                ..p.clone()
            };
            let l = complement_logits(&e, &p);
            let lp = complement_logits(&pe, &pp);
            for k in 0..N_FACTORS {
                assert_eq!(lp[k], l[perm[k]]);
            }
            assert!((lp[NC_INDEX] - l[NC_INDEX]).abs() < 1e-12);
        }
    }

    #[test]
    fn complement_read_back_from_store() {
        let (store, head) = typed_store(2);
        assert_eq!(head.complement(&store), ComplementParams::initial());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[2.0f64; 5]), 0);
    }

    #[test]
    fn fresh_head_is_affine_and_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let head = FreshHead::init(&mut store, 2, 0.1, 3).unwrap();
        *store.get_mut(head.weight) =
            Tensor::new(vec![5, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0, 2.0, 0.5]).unwrap();
        *store.get_mut(head.bias) = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let mut g = Graph::new(&store);
        let h = g.input(vec![1.0, -1.0]);
        let l1 = head.logits(&mut g, h, None).unwrap();
        let l2 = head.logits(&mut g, h, None).unwrap();
        let want = [1.1, -0.8, 0.3, 2.4, 2.0];
        for (a, b) in g.value(l1).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(g.value(l1), g.value(l2));

        store.get_mut(head.weight).values_mut().fill(0.0);
        let mut g = Graph::new(&store);
        let h = g.input(vec![3.0, 7.0]);
        let l = head.logits(&mut g, h, None).unwrap();
        assert_eq!(g.value(l), store.get(head.bias).values());
    }

    #[test]
    fn fresh_head_bounds() {
        let mut store = ParamStore::<f64>::new();
        let head = FreshHead::init(&mut store, 4, 0.1, 3).unwrap();
        assert!(store.get(head.weight).values().iter().all(|v| v.abs() <= 0.5));
        assert!(store.get(head.bias).values().iter().all(|v| v.abs() <= 0.5));
        assert_eq!(store.group(head.weight), ParamGroupTag::FreshHead);
    }

    #[test]
    fn baseline_head_behaviour() {
        let d = 3;
        let mut store = ParamStore::<f64>::new();
        let head = BaselineHead::init(&mut store, d, 0.1, 5).unwrap();

        let mut g = Graph::new(&store);
        let z = g.input(vec![0.0; d]);
        let l = head.logits(&mut g, z, z, None).unwrap();
        assert_eq!(g.value(l), store.get(head.bias).values());

        // Asymmetric halves: swapping inputs changes logits.
        let a = g.input(vec![1.0, 2.0, 3.0]);
        let b = g.input(vec![-1.0, 0.5, 0.0]);
        let ab = head.logits(&mut g, a, b, None).unwrap();
        let ba = head.logits(&mut g, b, a, None).unwrap();
        assert_ne!(g.value(ab), g.value(ba));
        drop(g);

        // Zeroing the second half makes the output depend on h_A only.
        let w = store.get_mut(head.weight).values_mut();
        for r in 0..N_CLASSES {
            w[r * 2 * d + d..(r + 1) * 2 * d].fill(0.0);
        }
        let mut g = Graph::new(&store);
        let a = g.input(vec![1.0, 2.0, 3.0]);
        let b1 = g.input(vec![9.0, 9.0, 9.0]);
        let b2 = g.input(vec![-4.0, 0.0, 1.0]);
        let l1 = head.logits(&mut g, a, b1, None).unwrap();
        let l2 = head.logits(&mut g, a, b2, None).unwrap();
        assert_eq!(g.value(l1), g.value(l2));

        let short = g.input(vec![0.0; 2]);
        assert!(head.logits(&mut g, a, short, None).is_err());
    }
}
