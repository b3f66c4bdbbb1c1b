//! Training objectives, in two forms: plain-value functions over score
//! slices and graph builders that record the same arithmetic on a tape.

use serde::{Deserialize, Serialize};

use crate::heads::{N_CLASSES, N_FACTORS};
use crate::numerics::{Graph, Var};
use crate::{Error, Result, Scalar};

fn bce<T: Scalar>(x: T, y: T) -> T {
    x.softplus() - y * x
}

fn check_scores<T>(what: &str, s: &[T]) -> Result<()> {
    if s.len() != N_FACTORS {
        return Err(Error::invalid(format!("{what}: expected {N_FACTORS} scores, got {}", s.len())));
    }
    Ok(())
}

fn check_target(t: usize) -> Result<()> {
    if t >= N_FACTORS {
        return Err(Error::invalid(format!("target factor {t} out of range 0..{N_FACTORS}")));
    }
    Ok(())
}

/// Per-record CSIP loss components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CsipRecordLoss<T> {
    Conflict { pos: T, g: T, select: T, total: T },
    NoConflict { nc: T },
}

impl<T: Scalar> CsipRecordLoss<T> {
    pub fn total(&self) -> T {
        match *self {
            Self::Conflict { total, .. } => total,
            Self::NoConflict { nc } => nc,
        }
    }
}

pub fn csip_conflict_loss<T: Scalar>(s_b: &[T], s_g: &[T], target: usize, lambda_select: T) -> Result<CsipRecordLoss<T>> {
    check_scores("s_B", s_b)?;
    check_scores("s_g", s_g)?;
    check_target(target)?;
    let pos = bce(s_b[target], T::one());
    let g = s_g.iter().map(|&x| bce(x, T::zero())).sum::<T>();
    let select = (0..N_FACTORS)
        .filter(|&k| k != target)
        .map(|k| (s_b[k] - s_g[k]) * (s_b[k] - s_g[k]))
        .sum::<T>();
    Ok(CsipRecordLoss::Conflict {
        pos,
        g,
        select,
        total: pos + g + lambda_select * select,
    })
}

pub fn csip_nc_loss<T: Scalar>(s: &[T]) -> Result<T> {
    check_scores("s", s)?;
    Ok(s.iter().map(|&x| bce(x, T::zero())).sum())
}

/// Arithmetic mean of per-record totals.
pub fn csip_batch_loss<T: Scalar>(records: &[CsipRecordLoss<T>]) -> Result<T> {
    if records.is_empty() {
        return Err(Error::invalid("CSIP loss over an empty batch"));
    }
    let sum: T = records.iter().map(CsipRecordLoss::total).sum();
    Ok(sum / T::lit(records.len() as f64))
}

/// Inverse-frequency class weights `N / (K n_c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; N_CLASSES]);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self([1.0; N_CLASSES])
    }

    pub fn get(&self, label: usize) -> f64 {
        self.0[label]
    }
}

pub fn class_weights(counts: &[usize; N_CLASSES]) -> Result<ClassWeights> {
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("class {c} has no training examples")));
    }
    let total: usize = counts.iter().sum();
    let k = N_CLASSES as f64;
    Ok(ClassWeights(counts.map(|n| total as f64 / (k * n as f64))))
}

fn check_gold(gold: usize) -> Result<()> {
    if gold >= N_CLASSES {
        return Err(Error::invalid(format!("label {gold} out of range 0..{N_CLASSES}")));
    }
    Ok(())
}

/// `w_gold * -log softmax(logits)[gold]` for a single example.
pub fn weighted_ce<T: Scalar>(logits: &[T], gold: usize, weights: &ClassWeights) -> Result<T> {
    check_gold(gold)?;
    if logits.len() != N_CLASSES {
        return Err(Error::invalid(format!("expected {N_CLASSES} logits, got {}", logits.len())));
    }
    let lse = crate::numerics::log_sum_exp(logits);
    Ok(T::lit(weights.get(gold)) * (lse - logits[gold]))
}

/// Weight-normalized batch mean: `sum_i w_i ce_i / sum_i w_i`.
pub fn weighted_ce_batch<T: Scalar>(batch: &[(&[T], usize)], weights: &ClassWeights) -> Result<T> {
    if batch.is_empty() {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }
    let mut num = T::zero();
    let mut den = 0.0;
    for &(logits, gold) in batch {
        num = num + weighted_ce(logits, gold, weights)?;
        den += weights.get(gold);
    }
    Ok(num / T::lit(den))
}

pub fn v2_loss<T: Scalar>(ce_term: T, replay_term: T, lambda_remain: T) -> Result<T> {
    if !ce_term.is_finite() || !replay_term.is_finite() {
        return Err(Error::NumericFailure(format!(
            "v2 loss terms must be finite, got {ce_term} and {replay_term}"
        )));
    }
    Ok(ce_term + lambda_remain * replay_term)
}

/// Graph-side CSIP input for one record.
#[derive(Clone, Copy, Debug)]
pub enum CsipScores {
    Conflict { s_b: Var, s_g: Var, target: usize },
    NoConflict { s: Var },
}

const FACTOR_IDX: [usize; N_FACTORS] = [0, 1, 2, 3];

fn factors_except(t: usize) -> Vec<usize> {
    FACTOR_IDX.iter().copied().filter(|&k| k != t).collect()
}

pub fn csip_conflict_graph<T: Scalar>(
    graph: &mut Graph<'_, T>,
    s_b: Var,
    s_g: Var,
    target: usize,
    lambda_select: T,
) -> Result<Var> {
    check_scores("s_B", graph.value(s_b))?;
    check_scores("s_g", graph.value(s_g))?;
    check_target(target)?;
    let st = graph.select(s_b, &[target])?;
    let pos = graph.bce_with_logits(st, &[T::one()])?;
    let pos = graph.sum(pos);
    let g = graph.bce_with_logits(s_g, &[T::zero(); N_FACTORS])?;
    let g = graph.sum(g);
    let off = factors_except(target);
    let b_off = graph.select(s_b, &off)?;
    let g_off = graph.select(s_g, &off)?;
    let diff = graph.sub(b_off, g_off)?;
    let sq = graph.square(diff);
    let select = graph.sum(sq);
    let select = graph.scale(select, lambda_select);
    graph.add_n(&[pos, g, select])
}

pub fn csip_nc_graph<T: Scalar>(graph: &mut Graph<'_, T>, s: Var) -> Result<Var> {
    check_scores("s", graph.value(s))?;
    let l = graph.bce_with_logits(s, &[T::zero(); N_FACTORS])?;
    Ok(graph.sum(l))
}

pub fn csip_batch_graph<T: Scalar>(graph: &mut Graph<'_, T>, records: &[CsipScores], lambda_select: T) -> Result<Var> {
    if records.is_empty() {
        return Err(Error::invalid("CSIP loss over an empty batch"));
    }
    let per_record = records
        .iter()
        .map(|r| match *r {
            CsipScores::Conflict { s_b, s_g, target } => csip_conflict_graph(graph, s_b, s_g, target, lambda_select),
            CsipScores::NoConflict { s } => csip_nc_graph(graph, s),
        })
        .collect::<Result<Vec<_>>>()?;
    let total = graph.add_n(&per_record)?;
    Ok(graph.scale(total, T::one() / T::lit(records.len() as f64)))
}

pub fn weighted_ce_batch_graph<T: Scalar>(
    graph: &mut Graph<'_, T>,
    batch: &[(Var, usize)],
    weights: &ClassWeights,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("cross-entropy over an empty batch"));
    }
    for &(l, gold) in batch {
        check_gold(gold)?;
        if graph.value(l).len() != N_CLASSES {
            return Err(Error::invalid(format!(
                "expected {N_CLASSES} logits, got {}",
                graph.value(l).len()
            )));
        }
    }
    let den: f64 = batch.iter().map(|&(_, y)| weights.get(y)).sum();
    let terms = batch
        .iter()
        .map(|&(l, gold)| {
            let ce = graph.softmax_ce(l, gold)?;
            Ok(graph.scale(ce, T::lit(weights.get(gold) / den)))
        })
        .collect::<Result<Vec<_>>>()?;
    graph.add_n(&terms)
}

pub fn v2_loss_graph<T: Scalar>(graph: &mut Graph<'_, T>, ce: Var, replay: Var, lambda_remain: T) -> Result<Var> {
    let r = graph.scale(replay, lambda_remain);
    graph.add(ce, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, ParamGroupTag, ParamStore, Tensor};
    use crate::rng::StreamRng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn conflict_loss_at_zero() {
        for t in 0..4 {
            let l = csip_conflict_loss(&[0.0; 4], &[0.0; 4], t, 1.0).unwrap();
            let CsipRecordLoss::Conflict { pos, g, select, total } = l else {
                panic!()
            };
            close(pos, LN2, 1e-12);
            close(g, 4.0 * LN2, 1e-12);
            assert_eq!(select, 0.0);
            close(total, 3.4657, 1e-4);
        }
    }

    #[test]
    fn confident_conflict_loss() {
        let l = csip_conflict_loss(&[10.0, -10.0, -10.0, -10.0], &[-10.0; 4], 0, 1.0).unwrap();
        close(l.total(), 5.0 * (-10f64).exp().ln_1p(), 1e-15);
        close(l.total(), 2.27e-4, 1e-6);
        assert!(csip_conflict_loss(&[0.0; 4], &[0.0; 4], 4, 1.0).is_err());
        assert!(csip_conflict_loss(&[0.0; 3], &[0.0; 4], 0, 1.0).is_err());
    }

    #[test]
    fn select_term_ignores_target_coordinate() {
        let s_b = [5.0, 0.3, -1.0, 2.0];
        let s_g = [-7.0, 0.3, -1.0, 2.0];
        let CsipRecordLoss::Conflict { select, .. } = csip_conflict_loss(&s_b, &s_g, 0, 1.0).unwrap() else {
            panic!()
        };
        assert_eq!(select, 0.0);
    }

    #[test]
    fn nc_loss_values() {
        close(csip_nc_loss(&[0.0; 4]).unwrap(), 2.7726, 1e-4);
        close(csip_nc_loss(&[10.0, 0.0, 0.0, 0.0]).unwrap(), 12.0795, 1e-4);
        assert!(csip_nc_loss(&[-800.0; 4]).unwrap() < 1e-300);
    }

    #[test]
    fn batch_loss_is_a_mean() {
        let nc = CsipRecordLoss::NoConflict {
            nc: csip_nc_loss(&[0.0; 4]).unwrap(),
        };
        let c = csip_conflict_loss(&[0.0; 4], &[0.0; 4], 1, 1.0).unwrap();
        close(csip_batch_loss(&[nc]).unwrap(), 2.7726, 1e-4);
        close(csip_batch_loss(&[c, nc]).unwrap(), 3.1192, 1e-4);
        close(
            csip_batch_loss(&[c, nc, c, nc]).unwrap(),
            csip_batch_loss(&[c, nc]).unwrap(),
            1e-15,
        );
        assert!(csip_batch_loss::<f64>(&[]).is_err());
    }

    #[test]
    fn class_weight_values() {
        let w = class_weights(&[1617, 1152, 935, 333, 791]).unwrap();
        close(w.get(3), 4828.0 / (5.0 * 333.0), 1e-12);
        close(w.get(3), 2.900, 1e-3);
        assert_eq!(class_weights(&[7; 5]).unwrap(), ClassWeights::uniform());
        let doubled = class_weights(&[3234, 2304, 1870, 666, 1582]).unwrap();
        for c in 0..5 {
            close(doubled.get(c), w.get(c), 1e-12);
        }
        assert!(class_weights(&[1, 1, 0, 1, 1]).is_err());
    }

    #[test]
    fn weighted_ce_values() {
        let uni = ClassWeights::uniform();
        close(weighted_ce(&[0.0; 5], 2, &uni).unwrap(), 5f64.ln(), 1e-12);
        let mut confident = [0.0; 5];
        confident[1] = 20.0;
        assert!(weighted_ce(&confident, 1, &uni).unwrap() < 1e-8);
        let mut w = uni;
        w.0[3] = 2.9;
        close(weighted_ce(&[0.0; 5], 3, &w).unwrap(), 4.6673, 1e-4);
        assert!(weighted_ce(&[0.0; 5], 5, &w).is_err());

        // Weight-normalized mean.
        let b = weighted_ce_batch(&[(&[0.0; 5][..], 3), (&confident[..], 1)], &w).unwrap();
        close(b, 2.9 * 5f64.ln() / 3.9, 1e-8);
    }

    #[test]
    fn v2_combination() {
        assert_eq!(v2_loss(1.0, 2.0, 0.5).unwrap(), 2.0);
        assert_eq!(v2_loss(1.3, 2.0, 0.0).unwrap(), 1.3);
        close(v2_loss(1.6094, 3.4657, 0.5).unwrap(), 3.3423, 1e-4);
        assert!(v2_loss(f64::NAN, 1.0, 0.5).is_err());
    }

    fn score_store(rng: &mut StreamRng, n: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for i in 0..n {
            let v = (0..4).map(|_| 6.0 * rng.unit_f64() - 3.0).collect();
            s.add(&format!("s{i}"), ParamGroupTag::TypedHead, Tensor::vector(v)).unwrap();
        }
        s
    }

    #[test]
    fn graph_matches_values_and_passes_grad_check() {
        let mut rng = StreamRng::new(99);
        for _ in 0..20 {
            let store = score_store(&mut rng, 3);
            let ids: Vec<_> = store.ids().collect();
            let t = rng.below(4) as usize;
            let build = |g: &mut Graph<'_, f64>| {
                let (a, b, c) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
                csip_batch_graph(
                    g,
                    &[
                        CsipScores::Conflict { s_b: a, s_g: b, target: t },
                        CsipScores::NoConflict { s: c },
                    ],
                    1.0,
                )
            };
            let mut g = Graph::new(&store);
            let v = build(&mut g).unwrap();
            let vals: Vec<&[f64]> = ids.iter().map(|&i| store.get(i).values()).collect();
            let want = csip_batch_loss(&[
                csip_conflict_loss(vals[0], vals[1], t, 1.0).unwrap(),
                CsipRecordLoss::NoConflict {
                    nc: csip_nc_loss(vals[2]).unwrap(),
                },
            ])
            .unwrap();
            close(g.scalar(v), want, 1e-12);
            assert!(grad_check(&store, 1e-3, build).unwrap() <= 1e-4);
        }
    }

    #[test]
    fn weighted_ce_graph_passes_grad_check() {
        let mut rng = StreamRng::new(5);
        let w = class_weights(&[1617, 1152, 935, 333, 791]).unwrap();
        for _ in 0..20 {
            let mut store = ParamStore::new();
            for i in 0..3 {
                let v = (0..5).map(|_| 4.0 * rng.unit_f64() - 2.0).collect();
                store.add(&format!("l{i}"), ParamGroupTag::FreshHead, Tensor::vector(v)).unwrap();
            }
            let ids: Vec<_> = store.ids().collect();
            let golds: Vec<usize> = (0..3).map(|_| rng.below(5) as usize).collect();
            let build = |g: &mut Graph<'_, f64>| {
                let batch: Vec<_> = ids.iter().zip(&golds).map(|(&i, &y)| (g.param(i), y)).collect();
                weighted_ce_batch_graph(g, &batch, &w)
            };
            let mut g = Graph::new(&store);
            let v = build(&mut g).unwrap();
            let batch: Vec<_> = ids.iter().zip(&golds).map(|(&i, &y)| (store.get(i).values(), y)).collect();
            close(g.scalar(v), weighted_ce_batch(&batch, &w).unwrap(), 1e-12);
            assert!(grad_check(&store, 1e-3, build).unwrap() <= 1e-4);
        }
    }
}
