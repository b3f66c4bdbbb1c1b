//! Records, ingest, CSIP triplets and the synthetic corpus generator.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{TokenSequence, Tokenizer};
use crate::heads::N_CLASSES;
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Five-way label. Indices are fixed: factors 0..=3, No-Conflict 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Responsibility,
    Condition,
    Sanction,
    Definition,
    NoConflict,
}

impl Label {
    pub const ALL: [Label; N_CLASSES] = [
        Label::Responsibility,
        Label::Condition,
        Label::Sanction,
        Label::Definition,
        Label::NoConflict,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Responsibility => "Responsibility",
            Label::Condition => "Condition",
            Label::Sanction => "Sanction",
            Label::Definition => "Definition",
            Label::NoConflict => "No-Conflict",
        }
    }

    /// Maps a label string to one of the five canonical labels.
    ///
    /// Matching ignores ASCII case, surrounding whitespace and a trailing
    /// " conflict"; No-Conflict also accepts the spellings "no conflict"
    /// and "noconflict".
    pub fn parse(s: &str) -> Option<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "no-conflict" | "no conflict" | "noconflict" | "no_conflict" => return Some(Label::NoConflict),
            _ => {}
        }
        let stem = lower.strip_suffix(" conflict").unwrap_or(&lower);
        match stem {
            "responsibility" => Some(Label::Responsibility),
            "condition" => Some(Label::Condition),
            "sanction" => Some(Label::Sanction),
            "definition" => Some(Label::Definition),
            _ => None,
        }
    }

    pub fn is_conflict(self) -> bool {
        self != Label::NoConflict
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Label::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown label {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub superior_text: String,
    pub subordinate_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision_text: Option<String>,
    pub label: Label,
    #[serde(default)]
    pub high_level_laws: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

impl Record {
    pub fn revision(&self) -> &str {
        self.revision_text.as_deref().unwrap_or("")
    }
}

/// Per-reason counts of lines dropped by [`ingest_split`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub lines: usize,
    pub kept: usize,
    pub decode: usize,
    pub label: usize,
}

/// Shape of one line before label mapping. Unknown keys are ignored.
#[derive(Deserialize)]
struct RawRecord {
    id: Value,
    superior_text: String,
    subordinate_text: String,
    #[serde(default)]
    revision_text: Option<String>,
    #[serde(default, alias = "conflict_type_en")]
    label: Option<String>,
    #[serde(default)]
    high_level_laws: Vec<String>,
    #[serde(default)]
    url: Option<String>,
    #[serde(default)]
    title: Option<String>,
}

enum LineOutcome {
    Kept(Record),
    Decode,
    Label,
}

fn ingest_line(line: &[u8]) -> LineOutcome {
    let Ok(text) = std::str::from_utf8(line) else {
        return LineOutcome::Decode;
    };
    let Ok(raw) = serde_json::from_str::<RawRecord>(text) else {
        return LineOutcome::Decode;
    };
    let id = match raw.id {
        Value::String(s) => s,
        Value::Number(n) => n.to_string(),
        _ => return LineOutcome::Decode,
    };
    let Some(label) = raw.label.as_deref().and_then(Label::parse) else {
        return LineOutcome::Label;
    };
    LineOutcome::Kept(Record {
        id,
        superior_text: raw.superior_text,
        subordinate_text: raw.subordinate_text,
        revision_text: raw.revision_text,
        label,
        high_level_laws: raw.high_level_laws,
        url: raw.url,
        title: raw.title,
    })
}

/// Parses JSONL bytes: strict decode first, then label mapping. Blank lines
/// are not records and are not counted.
pub fn ingest_bytes(bytes: &[u8]) -> (Vec<Record>, SkipReport) {
    let mut report = SkipReport::default();
    let mut records = Vec::new();
    for line in bytes.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        report.lines += 1;
        match ingest_line(line) {
            LineOutcome::Kept(r) => records.push(r),
            LineOutcome::Decode => report.decode += 1,
            LineOutcome::Label => report.label += 1,
        }
    }
    report.kept = records.len();
    (records, report)
}

pub fn ingest_split(path: &Path) -> Result<(Vec<Record>, SkipReport)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(ingest_bytes(&bytes))
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format("record", e.to_string()))?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn label_counts(records: &[Record]) -> [usize; N_CLASSES] {
    let mut c = [0; N_CLASSES];
    for r in records {
        c[r.label.index()] += 1;
    }
    c
}

/// Stage-1 training unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsipTriplet {
    pub id: String,
    pub pair: TokenSequence,
    pub kind: TripletKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TripletKind {
    /// `(A, B)`, `(A, revision)` and the factor that should fire on `B`.
    Conflict { target: usize, revised: TokenSequence },
    NoConflict,
}

/// Records usable for CSIP: every No-Conflict record, and conflict records
/// whose revision is non-empty and differs from `B` byte for byte.
pub fn csip_eligible(records: &[Record]) -> impl Iterator<Item = &Record> {
    records.iter().filter(|r| {
        !r.label.is_conflict() || {
            let g = r.revision();
            !g.is_empty() && g.as_bytes() != r.subordinate_text.as_bytes()
        }
    })
}

pub fn build_csip_triplets(records: &[Record], tokenizer: &Tokenizer) -> Vec<CsipTriplet> {
    csip_eligible(records)
        .map(|r| {
            let pair = tokenizer.pair(&r.superior_text, &r.subordinate_text);
            let kind = if r.label.is_conflict() {
                TripletKind::Conflict {
                    target: r.label.index(),
                    revised: tokenizer.pair(&r.superior_text, r.revision()),
                }
            } else {
                TripletKind::NoConflict
            };
            CsipTriplet {
                id: r.id.clone(),
                pair,
                kind,
            }
        })
        .collect()
}

/// Parameters of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train_counts: [usize; N_CLASSES],
    pub val_counts: [usize; N_CLASSES],
    pub test_counts: [usize; N_CLASSES],
    /// Share of val/test records whose (superior, revision) tuple occurs in train.
    pub seen_tuple_fraction: f64,
    /// Share of val/test records whose superior occurs in train; includes
    /// the seen-tuple records, so it must be at least `seen_tuple_fraction`.
    pub seen_superior_fraction: f64,
    /// Share of train conflict records that reuse an earlier train tuple.
    pub train_tuple_reuse: f64,
    /// Share of train conflict records with an unusable revision (empty or
    /// equal to `B`), to exercise the triplet filters.
    pub degenerate_revision_fraction: f64,
}

pub const BENCHMARK_TRAIN_COUNTS: [usize; N_CLASSES] = [1617, 1152, 935, 333, 791];
pub const BENCHMARK_VAL_COUNTS: [usize; N_CLASSES] = [464, 330, 268, 96, 246];
pub const BENCHMARK_TEST_COUNTS: [usize; N_CLASSES] = [229, 164, 133, 48, 122];

impl CorpusConfig {
    /// Benchmark-sized corpus with the benchmark's test overlap rates.
    pub fn benchmark_scale(seed: u64) -> Self {
        Self {
            seed,
            train_counts: BENCHMARK_TRAIN_COUNTS,
            val_counts: BENCHMARK_VAL_COUNTS,
            test_counts: BENCHMARK_TEST_COUNTS,
            seen_tuple_fraction: 452.0 / 696.0,
            seen_superior_fraction: 548.0 / 696.0,
            train_tuple_reuse: 0.15,
            degenerate_revision_fraction: 0.01,
        }
    }

    /// About 2000 records with the benchmark's class proportions.
    pub fn desk(seed: u64) -> Self {
        let total: usize = BENCHMARK_TRAIN_COUNTS.iter().chain(&BENCHMARK_VAL_COUNTS).chain(&BENCHMARK_TEST_COUNTS).sum();
        let scale = |c: [usize; N_CLASSES]| c.map(|n| ((n * 2000) as f64 / total as f64).round() as usize);
        Self {
            train_counts: scale(BENCHMARK_TRAIN_COUNTS),
            val_counts: scale(BENCHMARK_VAL_COUNTS),
            test_counts: scale(BENCHMARK_TEST_COUNTS),
            ..Self::benchmark_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("seen_tuple_fraction", self.seen_tuple_fraction),
            ("seen_superior_fraction", self.seen_superior_fraction),
            ("train_tuple_reuse", self.train_tuple_reuse),
            ("degenerate_revision_fraction", self.degenerate_revision_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("{name} = {f} is not in [0, 1]")));
            }
        }
        if self.seen_superior_fraction < self.seen_tuple_fraction {
            return Err(Error::invalid(
                "seen_superior_fraction must be at least seen_tuple_fraction",
            ));
        }
        Ok(())
    }
}

/// Generator-side stratum bookkeeping for one record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumTruth {
    pub id: String,
    pub seen_gb: bool,
    pub super_seen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: CorpusConfig,
    pub test: Vec<StratumTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
    pub truth: GroundTruth,
}

impl SyntheticCorpus {
    /// Writes `train.jsonl`, `val.jsonl`, `test.jsonl` and `ground_truth.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_records(&dir.join("train.jsonl"), &self.train)?;
        write_records(&dir.join("val.jsonl"), &self.val)?;
        write_records(&dir.join("test.jsonl"), &self.test)?;
        let truth =
            serde_json::to_vec_pretty(&self.truth).map_err(|e| Error::format("ground truth", e.to_string()))?;
        write_file(&dir.join("ground_truth.json"), &truth)
    }
}

/// Type-keyed clause that signals each conflict factor in `B`.
const CONFLICT_CLAUSES: [[&str; 2]; 4] = [
    ["不承担法律责任", "免除其法律责任"],
    ["须另行取得许可", "应当另行报经批准"],
    ["处以十万元以上罚款", "并处没收全部财物"],
    ["本办法所称经营者包括", "本办法所称单位是指"],
];
const NEUTRAL_CLAUSES: [&str; 3] = ["依照上位法规定执行", "按照有关法律办理", "遵守相关法律规定"];
const FILLER: [&str; 12] = [
    "县级以上人民政府",
    "有关主管部门",
    "应当加强监督管理",
    "建立健全工作制度",
    "做好信息公开工作",
    "依法保障公民权益",
    "对违法行为进行查处",
    "组织开展宣传教育",
    "制定具体实施方案",
    "定期开展检查评估",
    "接受社会公众监督",
    "落实安全生产责任",
];
const CITIES: [&str; 8] = ["北京", "上海", "广州", "成都", "杭州", "武汉", "西安", "南京"];
const TOPICS: [&str; 6] = ["市场监督", "环境保护", "食品安全", "城市管理", "交通运输", "消防安全"];

fn pick<'a>(rng: &mut StreamRng, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len() as u64) as usize]
}

fn filler(rng: &mut StreamRng, n: usize) -> String {
    (0..n).map(|_| pick(rng, &FILLER)).collect::<Vec<_>>().join("，")
}

#[derive(Clone, Debug)]
struct Superior {
    laws: Vec<String>,
    text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Overlap {
    SeenTuple,
    SuperiorOnly,
    Novel,
}

struct Generator {
    rng: StreamRng,
    superiors: Vec<Superior>,
    /// Distinguishes otherwise identical base texts so every fresh revision is new.
    serial: usize,
}

impl Generator {
    fn new_superior(&mut self) -> usize {
        let idx = self.superiors.len();
        let n_laws = 1 + self.rng.below(2) as usize;
        let laws = (0..n_laws)
            .map(|k| format!("《上位法第{}号》第{}条", idx, k + 1 + self.rng.below(40) as usize))
            .collect();
        let text = format!("{}。第{}条", filler(&mut self.rng, 2), idx);
        self.superiors.push(Superior { laws, text });
        idx
    }

    fn fresh_base(&mut self) -> String {
        self.serial += 1;
        format!("{}第{}款", filler(&mut self.rng, 2), self.serial)
    }

    fn revision_of(&mut self, base: &str) -> String {
        format!("{base}，{}", pick(&mut self.rng, &NEUTRAL_CLAUSES))
    }

    fn subordinate(&mut self, label: Label, base: &str) -> String {
        match label {
            Label::NoConflict => format!("{base}，{}", pick(&mut self.rng, &NEUTRAL_CLAUSES)),
            l => {
                let clause = pick(&mut self.rng, &CONFLICT_CLAUSES[l.index()]);
                format!("{clause}，{base}")
            }
        }
    }

    fn record(&mut self, id: String, label: Label, sup: usize, sub: String, revision: Option<String>) -> Record {
        let city = pick(&mut self.rng, &CITIES);
        let topic = pick(&mut self.rng, &TOPICS);
        Record {
            id,
            superior_text: self.superiors[sup].text.clone(),
            subordinate_text: sub,
            revision_text: revision,
            label,
            high_level_laws: self.superiors[sup].laws.clone(),
            url: Some(format!("https://law.example.cn/{}/{}", city_code(city), self.rng.below(400))),
            title: Some(format!("{city}市{topic}管理办法")),
        }
    }
}

fn city_code(city: &str) -> usize {
    CITIES.iter().position(|&c| c == city).unwrap_or(0)
}

/// Labels in a fixed interleaved order driven by the generator stream.
fn shuffled_labels(counts: &[usize; N_CLASSES], rng: &mut StreamRng) -> Vec<Label> {
    let mut labels: Vec<Label> = Label::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&l, &n)| std::iter::repeat_n(l, n))
        .collect();
    rng.shuffle(&mut labels);
    labels
}

struct TrainPools {
    /// (superior, revision) of conflict records with a usable revision.
    conflict_tuples: Vec<(usize, String)>,
    /// Superiors of No-Conflict records (revision-free tuples).
    nc_superiors: Vec<usize>,
    /// Superiors of conflict records.
    conflict_superiors: Vec<usize>,
}

fn generate_train(g: &mut Generator, cfg: &CorpusConfig) -> (Vec<Record>, TrainPools) {
    let labels = shuffled_labels(&cfg.train_counts, &mut g.rng);
    let mut pools = TrainPools {
        conflict_tuples: Vec::new(),
        nc_superiors: Vec::new(),
        conflict_superiors: Vec::new(),
    };
    let mut records = Vec::with_capacity(labels.len());
    for (i, label) in labels.into_iter().enumerate() {
        let id = format!("train-{i:05}");
        if !label.is_conflict() {
            let sup = g.new_superior();
            let base = g.fresh_base();
            let sub = g.subordinate(label, &base);
            pools.nc_superiors.push(sup);
            records.push(g.record(id, label, sup, sub, None));
            continue;
        }
        if g.rng.unit_f64() < cfg.degenerate_revision_fraction {
            // Unusable revisions get a superior of their own so their
            // tuples never collide with the pools evaluation splits draw on.
            let sup = g.new_superior();
            let base = g.fresh_base();
            let sub = g.subordinate(label, &base);
            let revision = if g.rng.below(2) == 0 { String::new() } else { sub.clone() };
            records.push(g.record(id, label, sup, sub, Some(revision)));
            continue;
        }
        let reuse = !pools.conflict_tuples.is_empty() && g.rng.unit_f64() < cfg.train_tuple_reuse;
        let (sup, base, revision) = if reuse {
            let k = g.rng.below(pools.conflict_tuples.len() as u64) as usize;
            let (sup, rev) = pools.conflict_tuples[k].clone();
            (sup, g.fresh_base(), rev)
        } else {
            let sup = g.new_superior();
            let base = g.fresh_base();
            let rev = g.revision_of(&base);
            (sup, base, rev)
        };
        let sub = g.subordinate(label, &base);
        pools.conflict_tuples.push((sup, revision.clone()));
        pools.conflict_superiors.push(sup);
        records.push(g.record(id, label, sup, sub, Some(revision)));
    }
    (records, pools)
}

fn generate_eval_split(
    g: &mut Generator,
    cfg: &CorpusConfig,
    split: &str,
    counts: &[usize; N_CLASSES],
    pools: &TrainPools,
) -> Result<(Vec<Record>, Vec<StratumTruth>)> {
    let labels = shuffled_labels(counts, &mut g.rng);
    let n = labels.len();
    let n_seen = (cfg.seen_tuple_fraction * n as f64).round() as usize;
    let n_super = ((cfg.seen_superior_fraction * n as f64).round() as usize).max(n_seen).min(n);
    let order = g.rng.permutation(n);
    let mut overlap = vec![Overlap::Novel; n];
    for (rank, &i) in order.iter().enumerate() {
        overlap[i] = if rank < n_seen {
            Overlap::SeenTuple
        } else if rank < n_super {
            Overlap::SuperiorOnly
        } else {
            Overlap::Novel
        };
    }

    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for (i, label) in labels.into_iter().enumerate() {
        let id = format!("{split}-{i:05}");
        let infeasible = |what: &str| {
            Error::invalid(format!(
                "{split} record {i} ({label}) needs a {what} from train, but train has none"
            ))
        };
        let (sup, sub, revision) = match (overlap[i], label.is_conflict()) {
            (Overlap::SeenTuple, true) => {
                if pools.conflict_tuples.is_empty() {
                    return Err(infeasible("conflict tuple"));
                }
                let k = g.rng.below(pools.conflict_tuples.len() as u64) as usize;
                let (sup, rev) = pools.conflict_tuples[k].clone();
                let base = g.fresh_base();
                (sup, g.subordinate(label, &base), Some(rev))
            }
            (Overlap::SeenTuple, false) => {
                if pools.nc_superiors.is_empty() {
                    return Err(infeasible("No-Conflict superior"));
                }
                let sup = pools.nc_superiors[g.rng.below(pools.nc_superiors.len() as u64) as usize];
                let base = g.fresh_base();
                (sup, g.subordinate(label, &base), None)
            }
            (Overlap::SuperiorOnly, conflict) => {
                // Conflict superiors never carry an empty revision in train
                // tuples, so pairing one with a fresh revision (or none)
                // cannot recreate a train tuple.
                if pools.conflict_superiors.is_empty() {
                    return Err(infeasible("conflict superior"));
                }
                let sup = pools.conflict_superiors[g.rng.below(pools.conflict_superiors.len() as u64) as usize];
                let base = g.fresh_base();
                let rev = conflict.then(|| g.revision_of(&base));
                (sup, g.subordinate(label, &base), rev)
            }
            (Overlap::Novel, conflict) => {
                let sup = g.new_superior();
                let base = g.fresh_base();
                let rev = conflict.then(|| g.revision_of(&base));
                (sup, g.subordinate(label, &base), rev)
            }
        };
        truth.push(StratumTruth {
            id: id.clone(),
            seen_gb: overlap[i] == Overlap::SeenTuple,
            super_seen: overlap[i] != Overlap::Novel,
        });
        records.push(g.record(id, label, sup, sub, revision));
    }
    Ok((records, truth))
}

/// Deterministic synthetic corpus with planted conflict clauses and a known
/// overlap structure between train and the evaluation splits.
pub fn generate_synthetic_corpus(cfg: &CorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut g = Generator {
        rng: StreamRng::new(cfg.seed),
        superiors: Vec::new(),
        serial: 0,
    };
    let (train, pools) = generate_train(&mut g, cfg);
    let (val, _) = generate_eval_split(&mut g, cfg, "val", &cfg.val_counts, &pools)?;
    let (test, test_truth) = generate_eval_split(&mut g, cfg, "test", &cfg.test_counts, &pools)?;
    Ok(SyntheticCorpus {
        train,
        val,
        test,
        truth: GroundTruth {
            config: cfg.clone(),
            test: test_truth,
        },
    })
}

/// Ids occurring more than once, in first-seen order.
pub fn duplicate_ids(records: &[Record]) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut dup = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert(r.id.as_str()) {
            dup.entry(r.id.clone()).or_insert(i);
        }
    }
    let mut out: Vec<_> = dup.into_iter().collect();
    out.sort_by_key(|&(_, i)| i);
    out.into_iter().map(|(id, _)| id).collect()
}
