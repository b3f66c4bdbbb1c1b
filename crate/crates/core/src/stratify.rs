//! Hash-keyed test stratification, stratum-restricted delta analysis and the
//! cross-split overlap audit.
//!
//! The superior key is the MD5 of the record's `high_level_laws` joined with
//! a single `\n`; the golden key is the MD5 of the raw revision bytes (the
//! empty string when absent). A test record is Seen-gB when its
//! `(superior, golden)` pair occurs in train, and Super-Seen when its
//! superior key alone does.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;

use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};

use crate::data::{Record, StratumTruth};
use crate::heads::N_CLASSES;
use crate::orchestrator::{PredictionFile, PredictionHeader};
use crate::stats::{analyze, per_class_deltas, per_seed_deltas, AnalysisReport, BootstrapParams, DecisionRule, PerClassDelta};
use crate::{Error, Result};

/// 128-bit MD5 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Md5Key(pub [u8; 16]);

impl Md5Key {
    pub fn of(bytes: &[u8]) -> Self {
        let d = Md5::digest(bytes);
        let mut k = [0u8; 16];
        k.copy_from_slice(&d);
        Self(k)
    }
}

impl fmt::Display for Md5Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|b| write!(f, "{b:02x}"))
    }
}

impl fmt::Debug for Md5Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Md5Key({self})")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TupleKeys {
    pub superior: Md5Key,
    pub golden: Md5Key,
    pub subordinate: Md5Key,
}

impl TupleKeys {
    /// `(A, B)` pair key.
    pub fn ab(&self) -> (Md5Key, Md5Key) {
        (self.superior, self.subordinate)
    }

    /// `(A, g̃B)` tuple key.
    pub fn agb(&self) -> (Md5Key, Md5Key) {
        (self.superior, self.golden)
    }
}

pub const LAW_SEPARATOR: &str = "\n";

pub fn tuple_keys(record: &Record) -> TupleKeys {
    TupleKeys {
        superior: Md5Key::of(record.high_level_laws.join(LAW_SEPARATOR).as_bytes()),
        golden: Md5Key::of(record.revision().as_bytes()),
        subordinate: Md5Key::of(record.subordinate_text.as_bytes()),
    }
}

/// Assignment of each test record to one of a fixed list of strata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stratification {
    pub strata: Vec<String>,
    pub ids: Vec<String>,
    pub assignment: Vec<usize>,
}

pub const SEEN_GB: &str = "Seen-gB";
pub const UNSEEN_GB: &str = "Unseen-gB";
pub const SUPER_SEEN: &str = "Super-Seen";
pub const SUPER_UNSEEN: &str = "Super-Unseen";
pub const ALL_TEST: &str = "All";

impl Stratification {
    fn binary(seen: &str, unseen: &str, test: &[Record], is_seen: impl Fn(&Record) -> bool) -> Self {
        Self {
            strata: vec![seen.into(), unseen.into()],
            ids: test.iter().map(|r| r.id.clone()).collect(),
            assignment: test.iter().map(|r| if is_seen(r) { 0 } else { 1 }).collect(),
        }
    }

    /// Whole test set as one stratum.
    pub fn all(test: &[Record]) -> Self {
        Self {
            strata: vec![ALL_TEST.into()],
            ids: test.iter().map(|r| r.id.clone()).collect(),
            assignment: vec![0; test.len()],
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.strata.len()];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }

    pub fn size(&self, name: &str) -> Option<usize> {
        let k = self.index(name)?;
        Some(self.assignment.iter().filter(|&&a| a == k).count())
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.strata.iter().position(|s| s == name)
    }

    /// Ids assigned to `stratum`.
    pub fn members(&self, stratum: usize) -> HashSet<&str> {
        self.ids
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &a)| a == stratum)
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

pub fn partition_seen_unseen(train: &[Record], test: &[Record]) -> Stratification {
    let seen: HashSet<_> = train.iter().map(|r| tuple_keys(r).agb()).collect();
    Stratification::binary(SEEN_GB, UNSEEN_GB, test, |r| seen.contains(&tuple_keys(r).agb()))
}

pub fn partition_super(train: &[Record], test: &[Record]) -> Stratification {
    let seen: HashSet<_> = train.iter().map(|r| tuple_keys(r).superior).collect();
    Stratification::binary(SUPER_SEEN, SUPER_UNSEEN, test, |r| seen.contains(&tuple_keys(r).superior))
}

/// Distinct superior keys in a split.
pub fn unique_superiors(records: &[Record]) -> usize {
    records.iter().map(|r| tuple_keys(r).superior).collect::<HashSet<_>>().len()
}

/// Per-record `(id, seen_gb, super_seen)` table.
pub fn export_strata(train: &[Record], test: &[Record]) -> Vec<StratumTruth> {
    let gb = partition_seen_unseen(train, test);
    let sup = partition_super(train, test);
    test.iter()
        .zip(gb.assignment.iter().zip(&sup.assignment))
        .map(|(r, (&g, &s))| StratumTruth {
            id: r.id.clone(),
            seen_gb: g == 0,
            super_seen: s == 0,
        })
        .collect()
}

/// Restricts a prediction file to the rows whose id is in `keep`.
pub fn project(file: &PredictionFile, keep: &HashSet<&str>) -> PredictionFile {
    let rows: Vec<_> = file
        .rows
        .iter()
        .filter(|r| keep.contains(r.id.as_str()))
        .cloned()
        .collect();
    PredictionFile {
        header: PredictionHeader {
            n_rows: rows.len(),
            ..file.header.clone()
        },
        rows,
    }
}

fn check_coverage(files: &[PredictionFile], strat: &Stratification) -> Result<()> {
    let ids: HashSet<&str> = strat.ids.iter().map(String::as_str).collect();
    for f in files {
        if let Some(r) = f.rows.iter().find(|r| !ids.contains(r.id.as_str())) {
            return Err(Error::invalid(format!(
                "prediction file for seed {} has id {:?} outside the stratification",
                f.header.seed, r.id
            )));
        }
    }
    Ok(())
}

fn projected(files: &[PredictionFile], keep: &HashSet<&str>) -> Vec<PredictionFile> {
    files.iter().map(|f| project(f, keep)).collect()
}

/// Primary analysis restricted to one stratum; `report` is `None` when the
/// stratum is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StratumAnalysis {
    pub stratum: String,
    pub n: usize,
    pub report: Option<AnalysisReport>,
}

pub fn stratified_deltas(
    method_name: &str,
    baseline_name: &str,
    method: &[PredictionFile],
    baseline: &[PredictionFile],
    strat: &Stratification,
    params: &BootstrapParams,
    rule: &DecisionRule,
) -> Result<Vec<StratumAnalysis>> {
    check_coverage(method, strat)?;
    check_coverage(baseline, strat)?;
    (0..strat.strata.len())
        .map(|k| {
            let keep = strat.members(k);
            let report = if keep.is_empty() {
                None
            } else {
                let series = per_seed_deltas(&projected(method, &keep), &projected(baseline, &keep))?;
                Some(analyze(method_name, baseline_name, &series, params, rule)?)
            };
            Ok(StratumAnalysis {
                stratum: strat.strata[k].clone(),
                n: keep.len(),
                report,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassStratum {
    pub stratum: String,
    pub class_counts: [usize; N_CLASSES],
    pub deltas: Vec<PerClassDelta>,
}

pub fn per_class_stratum_delta(
    method: &[PredictionFile],
    baseline: &[PredictionFile],
    strat: &Stratification,
    stratum: &str,
    level: f64,
) -> Result<PerClassStratum> {
    check_coverage(method, strat)?;
    check_coverage(baseline, strat)?;
    let k = strat
        .index(stratum)
        .ok_or_else(|| Error::invalid(format!("unknown stratum {stratum:?}")))?;
    let keep = strat.members(k);
    if keep.is_empty() {
        return Err(Error::invalid(format!("stratum {stratum:?} is empty; per-class deltas are undefined")));
    }
    let m = projected(method, &keep);
    let b = projected(baseline, &keep);
    let mut class_counts = [0; N_CLASSES];
    if let Some(f) = m.first() {
        for r in &f.rows {
            class_counts[r.gold.min(N_CLASSES - 1)] += 1;
        }
    }
    Ok(PerClassStratum {
        stratum: stratum.into(),
        class_counts,
        deltas: per_class_deltas(&m, &b, level)?,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCount {
    /// Distinct key values present in both splits.
    pub distinct: usize,
    /// Records of the first split whose key occurs in the second.
    pub affected_first: usize,
    /// Records of the second split whose key occurs in the first.
    pub affected_second: usize,
}

fn overlap<K: Eq + Hash>(a: &[Option<K>], b: &[Option<K>]) -> OverlapCount {
    let sa: HashSet<&K> = a.iter().flatten().collect();
    let sb: HashSet<&K> = b.iter().flatten().collect();
    OverlapCount {
        distinct: sa.intersection(&sb).count(),
        affected_first: a.iter().flatten().filter(|k| sb.contains(k)).count(),
        affected_second: b.iter().flatten().filter(|k| sa.contains(k)).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub key: String,
    pub train_val: OverlapCount,
    pub train_test: OverlapCount,
    pub val_test: OverlapCount,
}

fn overlap_row<K: Eq + Hash>(name: &str, splits: [&[Record]; 3], key: impl Fn(&Record) -> Option<K>) -> OverlapRow {
    let [tr, va, te] = splits.map(|s| s.iter().map(&key).collect::<Vec<_>>());
    OverlapRow {
        key: name.into(),
        train_val: overlap(&tr, &va),
        train_test: overlap(&tr, &te),
        val_test: overlap(&va, &te),
    }
}

/// Cross-split overlap for record id, URL, title, `(A, B)` and `(A, g̃B)`.
/// Records without a URL or title do not take part in that key.
pub fn overlap_audit(train: &[Record], val: &[Record], test: &[Record]) -> Vec<OverlapRow> {
    let s = [train, val, test];
    vec![
        overlap_row("id", s, |r| Some(r.id.clone())),
        overlap_row("url", s, |r| r.url.clone()),
        overlap_row("title", s, |r| r.title.clone()),
        overlap_row("(A,B)", s, |r| Some(tuple_keys(r).ab())),
        overlap_row("(A,gB)", s, |r| Some(tuple_keys(r).agb())),
    ]
}

/// Split-pair counts for two arbitrary splits under the named key.
pub fn overlap_between(a: &[Record], b: &[Record], key: &str) -> Result<OverlapCount> {
    let rows = overlap_audit(a, b, &[]);
    rows.into_iter()
        .find(|r| r.key == key)
        .map(|r| r.train_val)
        .ok_or_else(|| Error::invalid(format!("unknown overlap key {key:?}")))
}

/// Label counts of the test records in each stratum.
pub fn stratum_class_counts(test: &[Record], strat: &Stratification) -> Result<HashMap<String, [usize; N_CLASSES]>> {
    if test.len() != strat.assignment.len() {
        return Err(Error::invalid("stratification does not match the test split"));
    }
    let mut out: HashMap<String, [usize; N_CLASSES]> =
        strat.strata.iter().map(|s| (s.clone(), [0; N_CLASSES])).collect();
    for (r, &a) in test.iter().zip(&strat.assignment) {
        out.get_mut(&strat.strata[a]).expect("stratum present")[r.label.index()] += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusConfig, Label};
    use crate::orchestrator::{fingerprint, PredictionRow};
    use proptest::prelude::*;

    fn rec(id: &str, laws: &[&str], rev: Option<&str>, label: Label) -> Record {
        Record {
            id: id.into(),
            superior_text: "A".into(),
            subordinate_text: format!("B{id}"),
            revision_text: rev.map(Into::into),
            label,
            high_level_laws: laws.iter().map(|s| s.to_string()).collect(),
            url: None,
            title: None,
        }
    }

    #[test]
    fn empty_digest() {
        assert_eq!(Md5Key::of(b"").to_string(), "d41d8cd98f00b204e9800998ecf8427e");
    }

    #[test]
    fn superior_key_is_order_sensitive() {
        let a = rec("1", &["x", "y"], None, Label::Definition);
        let b = rec("2", &["x", "y"], Some("r"), Label::Condition);
        let c = rec("3", &["y", "x"], None, Label::Definition);
        assert_eq!(tuple_keys(&a).superior, tuple_keys(&b).superior);
        assert_ne!(tuple_keys(&a).superior, tuple_keys(&c).superior);
        assert_eq!(tuple_keys(&a).golden, Md5Key::of(b""));
    }

    #[test]
    fn definition_cases() {
        let train = [rec("t", &["h1"], Some("g1"), Label::Definition)];
        let test = [
            rec("a", &["h1"], Some("g1"), Label::Definition),
            rec("b", &["h1"], Some("g2"), Label::Definition),
            rec("c", &["h2"], Some("g1"), Label::Definition),
        ];
        let s = partition_seen_unseen(&train, &test);
        assert_eq!(s.assignment, vec![0, 1, 1]);
        let p = partition_super(&train, &test);
        assert_eq!(p.assignment, vec![0, 0, 1]);
        let none = partition_super(&[], &test);
        assert_eq!(none.size(SUPER_UNSEEN), Some(3));
    }

    #[test]
    fn zero_overlap_corpus_is_all_unseen() {
        let mut cfg = CorpusConfig::desk(11);
        cfg.seen_tuple_fraction = 0.0;
        cfg.seen_superior_fraction = 0.0;
        let c = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(partition_seen_unseen(&c.train, &c.test).size(UNSEEN_GB), Some(c.test.len()));
        assert_eq!(partition_super(&c.train, &c.test).size(SUPER_UNSEEN), Some(c.test.len()));
    }

    #[test]
    fn disjoint_splits_have_no_overlap() {
        let a = [rec("1", &["p"], Some("q"), Label::Condition)];
        let b = [rec("2", &["r"], Some("s"), Label::Condition)];
        for row in overlap_audit(&a, &b, &[]) {
            assert_eq!(row.train_val.distinct, 0, "{}", row.key);
        }
    }

    #[test]
    fn distinct_versus_affected() {
        let train = [rec("1", &["h"], Some("g"), Label::Sanction)];
        let test = [
            rec("2", &["h"], Some("g"), Label::Sanction),
            rec("3", &["h"], Some("g"), Label::Sanction),
        ];
        let c = overlap_between(&train, &test, "(A,gB)").unwrap();
        assert_eq!((c.distinct, c.affected_first, c.affected_second), (1, 1, 2));
        let r = overlap_between(&test, &train, "(A,gB)").unwrap();
        assert_eq!((r.distinct, r.affected_first, r.affected_second), (1, 2, 1));
    }

    fn file(seed: u64, gold: &[usize], pred: &[usize]) -> PredictionFile {
        let rows = gold
            .iter()
            .zip(pred)
            .enumerate()
            .map(|(i, (&g, &p))| PredictionRow {
                id: format!("r{i}"),
                gold: g,
                pred: p,
            })
            .collect();
        PredictionFile::new("x", "toy", seed, fingerprint("{}"), rows)
    }

    fn test_records(gold: &[usize]) -> Vec<Record> {
        gold.iter()
            .enumerate()
            .map(|(i, &g)| Record {
                id: format!("r{i}"),
                ..rec("", &[], None, Label::from_index(g).unwrap())
            })
            .collect()
    }

    #[test]
    fn whole_test_stratum_matches_primary_analysis() {
        let gold = [0, 1, 2, 3, 4, 0, 1, 2, 3, 4];
        let m: Vec<_> = (0..4)
            .map(|s| file(s, &gold, &[0, 1, 2, 3, 4, 0, 1, 2, (s as usize) % 5, 4]))
            .collect();
        let b: Vec<_> = (0..4)
            .map(|s| file(s, &gold, &[0, 1, 2, 3, 4, 4, 4, (s as usize) % 5, 3, 4]))
            .collect();
        let p = BootstrapParams {
            rounds: 400,
            ..Default::default()
        };
        let rule = DecisionRule::default();
        let strat = Stratification::all(&test_records(&gold));
        let out = stratified_deltas("m", "b", &m, &b, &strat, &p, &rule).unwrap();
        let primary = analyze("m", "b", &per_seed_deltas(&m, &b).unwrap(), &p, &rule).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].report.as_ref().unwrap().to_json(), primary.to_json());
    }

    #[test]
    fn empty_stratum_is_undefined() {
        let gold = [0, 1, 2];
        let m: Vec<_> = (0..3).map(|s| file(s, &gold, &gold)).collect();
        let recs = test_records(&gold);
        let strat = partition_super(&[], &recs);
        let out = stratified_deltas(
            "m",
            "b",
            &m,
            &m,
            &strat,
            &BootstrapParams {
                rounds: 50,
                ..Default::default()
            },
            &DecisionRule::default(),
        )
        .unwrap();
        assert_eq!(out[0].stratum, SUPER_SEEN);
        assert!(out[0].report.is_none());
        assert!(out[1].report.is_some());
        let pc = per_class_stratum_delta(&m, &m, &strat, SUPER_UNSEEN, 0.95).unwrap();
        assert!(pc.deltas.iter().all(|d| d.mean == 0.0));
        assert_eq!(pc.class_counts, [1, 1, 1, 0, 0]);
        assert!(per_class_stratum_delta(&m, &m, &strat, SUPER_SEEN, 0.95).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn strata_partition_and_nest(seed in any::<u64>(), tuple in 0.0f64..1.0, sup in 0.0f64..1.0) {
            let mut cfg = CorpusConfig::desk(seed);
            cfg.train_counts = [40, 30, 25, 10, 30];
            cfg.val_counts = [5, 5, 5, 5, 5];
            cfg.test_counts = [15, 12, 10, 6, 12];
            cfg.seen_tuple_fraction = tuple * sup;
            cfg.seen_superior_fraction = sup;
            let c = generate_synthetic_corpus(&cfg).unwrap();
            let gb = partition_seen_unseen(&c.train, &c.test);
            let sp = partition_super(&c.train, &c.test);
            prop_assert_eq!(gb.sizes().iter().sum::<usize>(), c.test.len());
            prop_assert_eq!(sp.sizes().iter().sum::<usize>(), c.test.len());
            for (g, s) in gb.assignment.iter().zip(&sp.assignment) {
                // Super-Unseen implies Unseen-gB.
                prop_assert!(!(*s == 1 && *g == 0));
            }
            prop_assert_eq!(export_strata(&c.train, &c.test), c.truth.test.clone());
        }

        #[test]
        fn overlap_is_symmetric(seed in any::<u64>()) {
            let mut cfg = CorpusConfig::desk(seed);
            cfg.train_counts = [20, 15, 10, 5, 15];
            cfg.val_counts = [5, 5, 5, 5, 5];
            cfg.test_counts = [8, 8, 8, 4, 8];
            let c = generate_synthetic_corpus(&cfg).unwrap();
            for key in ["id", "url", "title", "(A,B)", "(A,gB)"] {
                let ab = overlap_between(&c.train, &c.test, key).unwrap();
                let ba = overlap_between(&c.test, &c.train, key).unwrap();
                prop_assert_eq!(ab.distinct, ba.distinct);
                prop_assert_eq!(ab.affected_first, ba.affected_second);
            }
        }
    }
}
