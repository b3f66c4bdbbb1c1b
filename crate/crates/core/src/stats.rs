//! Seed-as-unit inference: seed derivation, per-seed deltas, Student-t and
//! seed-bootstrap intervals, the locked decision rule, the
//! example-conditional bootstrap and matched-seed comparison.
//!
//! Every interval is computed on the deltas sorted ascending, so results do
//! not depend on the order in which seeds are supplied. Bootstrap round `r`
//! draws its indices from `StreamRng::keyed(rng_seed, r)`, which makes the
//! bounds independent of the thread schedule.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::heads::N_CLASSES;
use crate::metrics::{macro_f1, per_class_f1};
use crate::orchestrator::{validate_prediction_file, PredictionFile, Violation};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Primary and backup seed lists plus the generator seed they came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedSeeds {
    pub generator_seed: u64,
    pub primary: Vec<u64>,
    pub backup: Vec<u64>,
}

/// Parses a hexadecimal prefix such as `"8607bca5"` into the generator seed.
pub fn hex_seed(hex_prefix: &str) -> Result<u64> {
    let h = hex_prefix.trim().trim_start_matches("0x");
    if h.is_empty() || h.len() > 16 {
        return Err(Error::invalid(format!("hex prefix {hex_prefix:?} must have 1 to 16 digits")));
    }
    u64::from_str_radix(h, 16).map_err(|e| Error::invalid(format!("hex prefix {hex_prefix:?}: {e}")))
}

/// Draws `n_primary` then `n_backup` distinct seeds from `pool \ banned`
/// with a partial Fisher-Yates shuffle driven by the hex-derived generator.
/// Duplicate pool entries count once.
pub fn derive_seeds(
    hex_prefix: &str,
    n_primary: usize,
    n_backup: usize,
    banned: &[u64],
    pool: &[u64],
) -> Result<DerivedSeeds> {
    let generator_seed = hex_seed(hex_prefix)?;
    let banned: HashSet<u64> = banned.iter().copied().collect();
    let mut seen = HashSet::new();
    let mut cands: Vec<u64> = pool
        .iter()
        .copied()
        .filter(|s| !banned.contains(s) && seen.insert(*s))
        .collect();
    let need = n_primary + n_backup;
    if cands.len() < need {
        return Err(Error::invalid(format!(
            "candidate pool has {} usable seeds but {need} are required",
            cands.len()
        )));
    }
    let mut rng = StreamRng::new(generator_seed);
    for i in 0..need {
        let j = i + rng.below((cands.len() - i) as u64) as usize;
        cands.swap(i, j);
    }
    cands.truncate(need);
    if let Some(s) = cands.iter().find(|s| banned.contains(s)) {
        return Err(Error::invalid(format!("derived seed {s} is banned")));
    }
    let backup = cands.split_off(n_primary);
    Ok(DerivedSeeds {
        generator_seed,
        primary: cands,
        backup,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDeltaRow {
    pub seed: u64,
    pub method_f1: f64,
    pub baseline_f1: f64,
    /// `method_f1 - baseline_f1`, in percentage points.
    pub delta: f64,
}

/// Per-seed method and baseline scores with unique seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDeltaSeries {
    rows: Vec<SeedDeltaRow>,
}

impl SeedDeltaSeries {
    /// Builds a series from `(seed, method, baseline)` triples.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, f64, f64)>) -> Result<Self> {
        let rows = pairs
            .into_iter()
            .map(|(seed, m, b)| SeedDeltaRow {
                seed,
                method_f1: m,
                baseline_f1: b,
                delta: m - b,
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn from_rows(rows: Vec<SeedDeltaRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &rows {
            if !seen.insert(r.seed) {
                return Err(Violation::DuplicateSeed { seed: r.seed }.into());
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[SeedDeltaRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.seed).collect()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.delta).collect()
    }
}

fn index_by_seed(files: &[PredictionFile]) -> Result<HashMap<u64, &PredictionFile>> {
    let mut map = HashMap::with_capacity(files.len());
    for f in files {
        if map.insert(f.header.seed, f).is_some() {
            return Err(Violation::DuplicateSeed { seed: f.header.seed }.into());
        }
    }
    Ok(map)
}

/// Validates method and baseline files and pairs them by seed, in the
/// order of `method`. All files must share one gold vector.
pub fn pair_files<'a>(
    method: &'a [PredictionFile],
    baseline: &'a [PredictionFile],
) -> Result<Vec<(u64, &'a PredictionFile, &'a PredictionFile)>> {
    let m = index_by_seed(method)?;
    let b = index_by_seed(baseline)?;
    if m.len() != b.len() || m.keys().any(|s| !b.contains_key(s)) {
        return Err(Violation::SeedSetMismatch.into());
    }
    let Some(first) = method.first() else {
        return Err(Error::invalid("no prediction files supplied"));
    };
    validate_prediction_file(first, None)?;
    let gold = first.gold();
    for f in method.iter().chain(baseline) {
        validate_prediction_file(f, Some(&gold))?;
    }
    Ok(method
        .iter()
        .map(|f| (f.header.seed, f, b[&f.header.seed]))
        .collect())
}

/// Macro-F1 of each file and their per-seed difference.
pub fn per_seed_deltas(method: &[PredictionFile], baseline: &[PredictionFile]) -> Result<SeedDeltaSeries> {
    let rows = pair_files(method, baseline)?
        .into_iter()
        .map(|(seed, m, b)| {
            let mf = macro_f1(&m.gold(), &m.preds())?;
            let bf = macro_f1(&b.gold(), &b.preds())?;
            Ok(SeedDeltaRow {
                seed,
                method_f1: mf,
                baseline_f1: bf,
                delta: mf - bf,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SeedDeltaSeries::from_rows(rows)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean and sample standard deviation (`N - 1` denominator; 0 for `N = 1`).
pub fn mean_sd(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("mean of an empty sample"));
    }
    let v = sorted(values);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("confidence level must be in (0, 1), got {level}")))
    }
}

/// Two-sided Student-t quantile `t_{(1 + level) / 2, df}`.
pub fn t_quantile(level: f64, df: usize) -> Result<f64> {
    check_level(level)?;
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(dist.inverse_cdf((1.0 + level) / 2.0))
}

/// `mean ± t · sd / sqrt(N)`.
pub fn student_t_ci(deltas: &[f64], level: f64) -> Result<(f64, f64)> {
    if deltas.len() < 2 {
        return Err(Error::invalid("a t interval needs at least two observations"));
    }
    let (mean, sd) = mean_sd(deltas)?;
    let half = t_quantile(level, deltas.len() - 1)? * sd / (deltas.len() as f64).sqrt();
    Ok((mean - half, mean + half))
}

/// Percentile `q ∈ [0, 100]` of ascending `sorted` with linear
/// interpolation between the two closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn percentile_interval(mut stats: Vec<f64>, level: f64) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0 * 100.0;
    (percentile(&stats, tail), percentile(&stats, 100.0 - tail))
}

/// Bootstrap configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapParams {
    pub rounds: usize,
    pub rng_seed: u64,
    pub level: f64,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        Self {
            rounds: 20_000,
            rng_seed: 4242,
            level: 0.95,
        }
    }
}

impl BootstrapParams {
    fn validate(&self) -> Result<()> {
        check_level(self.level)?;
        if self.rounds == 0 {
            return Err(Error::invalid("bootstrap needs at least one round"));
        }
        Ok(())
    }
}

/// Percentile interval of the mean over `rounds` resamples of the seeds.
pub fn seed_bootstrap_ci(deltas: &[f64], params: &BootstrapParams) -> Result<(f64, f64)> {
    params.validate()?;
    if deltas.is_empty() {
        return Err(Error::invalid("bootstrap of an empty sample"));
    }
    let v = sorted(deltas);
    let n = v.len();
    let means: Vec<f64> = (0..params.rounds as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = StreamRng::keyed(params.rng_seed, r);
            (0..n).map(|_| v[rng.below(n as u64) as usize]).sum::<f64>() / n as f64
        })
        .collect();
    Ok(percentile_interval(means, params.level))
}

struct Counts {
    tp: [u32; N_CLASSES],
    n_gold: [u32; N_CLASSES],
    n_pred: [u32; N_CLASSES],
}

fn resampled_macro_f1(gold: &[usize], pred: &[usize], idx: &[usize]) -> f64 {
    let mut c = Counts {
        tp: [0; N_CLASSES],
        n_gold: [0; N_CLASSES],
        n_pred: [0; N_CLASSES],
    };
    for &i in idx {
        let (g, p) = (gold[i], pred[i]);
        c.n_gold[g] += 1;
        c.n_pred[p] += 1;
        if g == p {
            c.tp[g] += 1;
        }
    }
    let f1 = |k: usize| {
        let den = c.n_gold[k] + c.n_pred[k];
        if den == 0 {
            0.0
        } else {
            100.0 * 2.0 * c.tp[k] as f64 / den as f64
        }
    };
    (0..N_CLASSES).map(f1).sum::<f64>() / N_CLASSES as f64
}

/// Example-conditional bootstrap with seeds held fixed: each round
/// resamples test rows once, recomputes every seed's delta on that
/// resample and records the seed mean.
pub fn example_bootstrap_ci(
    method: &[PredictionFile],
    baseline: &[PredictionFile],
    params: &BootstrapParams,
) -> Result<(f64, f64)> {
    params.validate()?;
    let pairs = pair_files(method, baseline)?;
    let mut seeds: Vec<(u64, Vec<usize>, Vec<usize>)> =
        pairs.iter().map(|(s, m, b)| (*s, m.preds(), b.preds())).collect();
    seeds.sort_by_key(|s| s.0);
    let gold = pairs[0].1.gold();
    let n = gold.len();
    if n == 0 {
        return Err(Error::invalid("prediction files have no rows"));
    }
    let stats: Vec<f64> = (0..params.rounds as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = StreamRng::keyed(params.rng_seed, r);
            let idx: Vec<usize> = (0..n).map(|_| rng.below(n as u64) as usize).collect();
            let total: f64 = seeds
                .iter()
                .map(|(_, m, b)| resampled_macro_f1(&gold, m, &idx) - resampled_macro_f1(&gold, b, &idx))
                .sum();
            total / seeds.len() as f64
        })
        .collect();
    Ok(percentile_interval(stats, params.level))
}

/// Thresholds of the locked rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    /// C1 requires `mean >= min_mean`.
    pub min_mean: f64,
    /// C1′ requires `mean >= strong_mean`.
    pub strong_mean: f64,
}

impl Default for DecisionRule {
    fn default() -> Self {
        Self {
            min_mean: 0.8,
            strong_mean: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub c1_pass: bool,
    pub c1_prime_met: bool,
    pub mean: f64,
    pub boot_lo: f64,
    pub t_lo: f64,
}

impl DecisionRule {
    /// Both lower bounds must be strictly positive; means compare with `>=`.
    /// C1′ is reported only on top of a C1 pass.
    pub fn decide(&self, mean: f64, boot_lo: f64, t_lo: f64) -> Verdict {
        let bounds = boot_lo > 0.0 && t_lo > 0.0;
        let c1_pass = mean >= self.min_mean && bounds;
        Verdict {
            c1_pass,
            c1_prime_met: c1_pass && mean >= self.strong_mean,
            mean,
            boot_lo,
            t_lo,
        }
    }
}

/// The locked rule with its default thresholds.
pub fn decide(mean: f64, boot_lo: f64, t_lo: f64) -> Verdict {
    DecisionRule::default().decide(mean, boot_lo, t_lo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub boot_lo: f64,
    pub boot_hi: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub bootstrap: BootstrapParams,
}

pub fn interval_estimate(deltas: &[f64], params: &BootstrapParams) -> Result<IntervalEstimate> {
    let (mean, sd) = mean_sd(deltas)?;
    let (t_lo, t_hi) = student_t_ci(deltas, params.level)?;
    let (boot_lo, boot_hi) = seed_bootstrap_ci(deltas, params)?;
    Ok(IntervalEstimate {
        n: deltas.len(),
        mean,
        sd,
        boot_lo,
        boot_hi,
        t_lo,
        t_hi,
        bootstrap: *params,
    })
}

/// Primary analysis of one method cell against its baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub method: String,
    pub baseline: String,
    pub rule: DecisionRule,
    pub rows: Vec<SeedDeltaRow>,
    pub estimate: IntervalEstimate,
    pub verdict: Verdict,
}

pub fn analyze(
    method: &str,
    baseline: &str,
    series: &SeedDeltaSeries,
    params: &BootstrapParams,
    rule: &DecisionRule,
) -> Result<AnalysisReport> {
    let estimate = interval_estimate(&series.deltas(), params)?;
    let verdict = rule.decide(estimate.mean, estimate.boot_lo, estimate.t_lo);
    Ok(AnalysisReport {
        method: method.into(),
        baseline: baseline.into(),
        rule: *rule,
        rows: series.rows().to_vec(),
        estimate,
        verdict,
    })
}

fn pass(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}

fn write_estimate(out: &mut String, e: &IntervalEstimate) {
    let pct = (e.bootstrap.level * 100.0).round();
    let _ = writeln!(out, "mean delta      {:+.3} pp (sd {:.3}, N = {})", e.mean, e.sd, e.n);
    let _ = writeln!(
        out,
        "seed bootstrap  {pct}% [{:+.3}, {:+.3}] (B = {}, rng seed {})",
        e.boot_lo, e.boot_hi, e.bootstrap.rounds, e.bootstrap.rng_seed
    );
    let _ = writeln!(out, "student t       {pct}% [{:+.3}, {:+.3}] (df = {})", e.t_lo, e.t_hi, e.n - 1);
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} vs {}\n", self.method, self.baseline);
        let _ = writeln!(out, "{:>10} {:>9} {:>9} {:>8}", "seed", "method", "baseline", "delta");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>10} {:>9.2} {:>9.2} {:>+8.2}",
                r.seed, r.method_f1, r.baseline_f1, r.delta
            );
        }
        write_estimate(&mut out, &self.estimate);
        let v = &self.verdict;
        let prime = if v.c1_prime_met { "met" } else { "not met" };
        let _ = writeln!(out, "C1  {}", pass(v.c1_pass));
        let _ = writeln!(out, "C1' {prime}");
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub seed: u64,
    pub a: f64,
    pub b: f64,
    pub diff: f64,
}

/// Seed-matched comparison of two delta series: `a - b` per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSummary {
    pub a: String,
    pub b: String,
    pub rows: Vec<PairedRow>,
    pub estimate: IntervalEstimate,
}

pub fn matched_seed_compare(
    a_name: &str,
    a: &SeedDeltaSeries,
    b_name: &str,
    b: &SeedDeltaSeries,
    params: &BootstrapParams,
) -> Result<PairedSummary> {
    let b_by_seed: HashMap<u64, f64> = b.rows().iter().map(|r| (r.seed, r.delta)).collect();
    if a.len() != b.len() || a.rows().iter().any(|r| !b_by_seed.contains_key(&r.seed)) {
        return Err(Violation::SeedSetMismatch.into());
    }
    let rows: Vec<PairedRow> = a
        .rows()
        .iter()
        .map(|r| {
            let bd = b_by_seed[&r.seed];
            PairedRow {
                seed: r.seed,
                a: r.delta,
                b: bd,
                diff: r.delta - bd,
            }
        })
        .collect();
    let diffs: Vec<f64> = rows.iter().map(|r| r.diff).collect();
    Ok(PairedSummary {
        a: a_name.into(),
        b: b_name.into(),
        estimate: interval_estimate(&diffs, params)?,
        rows,
    })
}

impl PairedSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} minus {} (seed-matched deltas)\n", self.a, self.b);
        for r in &self.rows {
            let _ = writeln!(out, "{:>10} {:>+8.2} {:>+8.2} {:>+8.2}", r.seed, r.a, r.b, r.diff);
        }
        write_estimate(&mut out, &self.estimate);
        out
    }
}

/// Per-class mean deltas over seeds with Student-t intervals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassDelta {
    pub class: usize,
    pub mean: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub lower_bound_positive: bool,
}

pub fn per_class_deltas(
    method: &[PredictionFile],
    baseline: &[PredictionFile],
    level: f64,
) -> Result<Vec<PerClassDelta>> {
    let pairs = pair_files(method, baseline)?;
    let mut by_class: Vec<Vec<_>> = (0..N_CLASSES).map(|_| Vec::with_capacity(pairs.len())).collect();
    for (_, m, b) in &pairs {
        let fm = per_class_f1(&m.gold(), &m.preds())?;
        let fb = per_class_f1(&b.gold(), &b.preds())?;
        for k in 0..N_CLASSES {
            by_class[k].push(fm[k] - fb[k]);
        }
    }
    by_class
        .iter()
        .enumerate()
        .map(|(class, d)| {
            let (mean, _) = mean_sd(d)?;
            let (t_lo, t_hi) = student_t_ci(d, level)?;
            Ok(PerClassDelta {
                class,
                mean,
                t_lo,
                t_hi,
                lower_bound_positive: t_lo > 0.0,
            })
        })
        .collect()
}
