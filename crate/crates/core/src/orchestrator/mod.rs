//! Staged campaign execution.
//!
//! A [`CampaignPlan`] lists stages (backbone, cells, optional gate on an
//! earlier stage), the fixed primary seeds and an ordered backup pool.
//! [`run_campaign`] drives an injected [`Executor`] through the plan:
//!
//! * seeds run slot by slot, every cell of a slot on the same seed;
//! * an infrastructure failure retries the same seed, at most
//!   `max_infra_retries` times, after which the campaign aborts;
//! * a training failure moves the slot's outputs to quarantine and reruns
//!   the whole slot from scratch on the next unused backup seed, so cells
//!   stay seed-matched; an empty pool aborts;
//! * every prediction file is validated against the first one (unique ids,
//!   row count, gold vector, header) and any violation aborts;
//! * a gated stage runs iff the locked rule passes on its gate stage's
//!   primary comparison, and nothing else is analysed before that decision.
//!
//! Each state change is appended to `state.log` as one JSON event;
//! [`RunState::replay`] rebuilds the state from those events. Raw run logs
//! go to `sealed/`; the operator stream only ever sees
//! [`redact_metrics`] output.

mod executor;
mod failure;
mod prediction_file;

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub use executor::{ExecOutcome, Executor, Fault, RunRequest, SimulatedExecutor, TrainingExecutor};
pub use failure::{classify_failure, redact_metrics, FailureKind, INFRA_PATTERNS, REDACTED};
pub use prediction_file::{
    fingerprint, validate_prediction_file, PredictionFile, PredictionHeader, PredictionRow, Violation,
};

use crate::data::write_file;
use crate::stats::{
    analyze, matched_seed_compare, per_seed_deltas, AnalysisReport, BootstrapParams, DecisionRule, PairedSummary,
    Verdict,
};
use crate::training::{Cell, Hyperparameters};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub backbone: String,
    pub hyperparameters: Hyperparameters,
    pub cells: Vec<Cell>,
    pub baseline: Cell,
    /// Method cell whose comparison with `baseline` is this stage's verdict.
    pub primary: Cell,
    /// Earlier stage whose verdict must pass before this one launches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignPlan {
    pub stages: Vec<StageSpec>,
    pub primary_seeds: Vec<u64>,
    pub backup_seeds: Vec<u64>,
    #[serde(default)]
    pub rule: DecisionRule,
    #[serde(default)]
    pub bootstrap: BootstrapParams,
    #[serde(default = "default_retries")]
    pub max_infra_retries: u32,
}

fn default_retries() -> u32 {
    2
}

impl CampaignPlan {
    /// One stage running `cells` with `primary` judged against C2.
    pub fn single_stage(
        name: &str,
        backbone: &str,
        hp: Hyperparameters,
        cells: Vec<Cell>,
        primary: Cell,
        primary_seeds: Vec<u64>,
        backup_seeds: Vec<u64>,
    ) -> Self {
        Self {
            stages: vec![StageSpec {
                name: name.into(),
                backbone: backbone.into(),
                hyperparameters: hp,
                cells,
                baseline: Cell::C2,
                primary,
                gate: None,
            }],
            primary_seeds,
            backup_seeds,
            rule: DecisionRule::default(),
            bootstrap: BootstrapParams::default(),
            max_infra_retries: default_retries(),
        }
    }

    /// Stage A runs C2, v1 and v2 on the first backbone; stage B runs C2
    /// and v2 on the second and launches only if stage A's v2 passes.
    pub fn two_stage(
        hp_a: Hyperparameters,
        hp_b: Hyperparameters,
        primary_seeds: Vec<u64>,
        backup_seeds: Vec<u64>,
    ) -> Self {
        let mut plan = Self::single_stage(
            "A",
            "backbone-a",
            hp_a,
            vec![Cell::C2, Cell::V1, Cell::V2],
            Cell::V2,
            primary_seeds,
            backup_seeds,
        );
        plan.stages.push(StageSpec {
            name: "B".into(),
            backbone: "backbone-b".into(),
            hyperparameters: hp_b,
            cells: vec![Cell::C2, Cell::V2],
            baseline: Cell::C2,
            primary: Cell::V2,
            gate: Some("A".into()),
        });
        plan
    }

    pub fn n(&self) -> usize {
        self.primary_seeds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.primary_seeds.len() < 2 {
            return Err(Error::invalid("a campaign needs at least two primary seeds"));
        }
        let mut seen = HashSet::new();
        for s in self.primary_seeds.iter().chain(&self.backup_seeds) {
            if !seen.insert(s) {
                return Err(Error::invalid(format!("seed {s} is listed twice")));
            }
        }
        if self.stages.is_empty() {
            return Err(Error::invalid("a campaign needs at least one stage"));
        }
        let mut names = HashSet::new();
        for st in &self.stages {
            let ok_name = !st.name.is_empty()
                && st.name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_');
            if !ok_name {
                return Err(Error::invalid(format!("stage name {:?} must be alphanumeric", st.name)));
            }
            if let Some(g) = &st.gate {
                if !names.contains(g.as_str()) {
                    return Err(Error::invalid(format!("stage {} gates on unknown or later stage {g}", st.name)));
                }
            }
            if !names.insert(st.name.as_str()) {
                return Err(Error::invalid(format!("duplicate stage {}", st.name)));
            }
            let cells: BTreeSet<_> = st.cells.iter().collect();
            if cells.len() != st.cells.len() {
                return Err(Error::invalid(format!("stage {} lists a cell twice", st.name)));
            }
            if !cells.contains(&st.baseline) || !cells.contains(&st.primary) || st.baseline == st.primary {
                return Err(Error::invalid(format!(
                    "stage {} must run distinct primary and baseline cells",
                    st.name
                )));
            }
            st.hyperparameters.validate()?;
        }
        if self.bootstrap.rounds == 0 {
            return Err(Error::invalid("bootstrap needs at least one round"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text).map_err(|e| Error::format("campaign plan", e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Event {
    CampaignStarted {
        plan: String,
    },
    RunStarted {
        stage: String,
        cell: Cell,
        slot: usize,
        seed: u64,
        attempt: u32,
    },
    RunSucceeded {
        stage: String,
        cell: Cell,
        slot: usize,
        seed: u64,
    },
    InfraFailure {
        stage: String,
        cell: Cell,
        slot: usize,
        seed: u64,
        attempt: u32,
    },
    TrainingFailure {
        stage: String,
        cell: Cell,
        slot: usize,
        seed: u64,
    },
    Substituted {
        stage: String,
        slot: usize,
        old_seed: u64,
        new_seed: u64,
    },
    AnalysisComputed {
        stage: String,
        method: Cell,
        baseline: Cell,
    },
    GateDecided {
        stage: String,
        c1_pass: bool,
    },
    StageSkipped {
        stage: String,
    },
    Aborted {
        reason: String,
    },
    CampaignCompleted,
}

/// One line of `state.log`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub at_ms: u64,
    #[serde(flatten)]
    pub event: Event,
}

pub fn read_state_log(path: &Path) -> Result<Vec<EventRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::format("state log", e.to_string()))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "value")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    /// Number of infrastructure failures so far on this seed.
    InfraRetrying(u32),
    /// The slot moved to this backup seed and has not restarted yet.
    Substituted(u64),
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed: u64,
    pub status: RunStatus,
    /// Attempts on the current seed.
    pub attempts: u32,
}

/// Campaign state derived purely from the event sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunState {
    pub max_infra_retries: u32,
    pub runs: BTreeMap<(String, usize, Cell), RunEntry>,
    pub used_backups: BTreeSet<u64>,
    pub gates: BTreeMap<String, bool>,
    pub skipped: BTreeSet<String>,
    pub analyses: Vec<(String, Cell, Cell)>,
    pub aborted: Option<String>,
    pub completed: bool,
}

impl RunState {
    pub fn new(plan: &CampaignPlan) -> Self {
        let mut runs = BTreeMap::new();
        for st in &plan.stages {
            for (slot, &seed) in plan.primary_seeds.iter().enumerate() {
                for &cell in &st.cells {
                    runs.insert(
                        (st.name.clone(), slot, cell),
                        RunEntry {
                            seed,
                            status: RunStatus::Pending,
                            attempts: 0,
                        },
                    );
                }
            }
        }
        Self {
            max_infra_retries: plan.max_infra_retries,
            runs,
            used_backups: BTreeSet::new(),
            gates: BTreeMap::new(),
            skipped: BTreeSet::new(),
            analyses: Vec::new(),
            aborted: None,
            completed: false,
        }
    }

    pub fn replay<'a>(plan: &CampaignPlan, events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut s = Self::new(plan);
        for e in events {
            s.apply(e);
        }
        s
    }

    fn entry(&mut self, stage: &str, slot: usize, cell: Cell) -> Option<&mut RunEntry> {
        self.runs.get_mut(&(stage.to_owned(), slot, cell))
    }

    pub fn apply(&mut self, event: &Event) {
        let retries = self.max_infra_retries;
        match event {
            Event::CampaignStarted { .. } => {}
            Event::RunStarted {
                stage,
                cell,
                slot,
                seed,
                ..
            } => {
                if let Some(e) = self.entry(stage, *slot, *cell) {
                    e.seed = *seed;
                    e.status = RunStatus::Running;
                    e.attempts += 1;
                }
            }
            Event::RunSucceeded { stage, cell, slot, .. } => {
                if let Some(e) = self.entry(stage, *slot, *cell) {
                    e.status = RunStatus::Done;
                }
            }
            Event::InfraFailure { stage, cell, slot, .. } => {
                if let Some(e) = self.entry(stage, *slot, *cell) {
                    let k = e.attempts;
                    e.status = if k > retries {
                        RunStatus::Failed
                    } else {
                        RunStatus::InfraRetrying(k)
                    };
                }
            }
            Event::TrainingFailure { stage, cell, slot, .. } => {
                if let Some(e) = self.entry(stage, *slot, *cell) {
                    e.status = RunStatus::Failed;
                }
            }
            Event::Substituted {
                stage, slot, new_seed, ..
            } => {
                for ((st, sl, _), e) in self.runs.iter_mut() {
                    if st == stage && sl == slot {
                        *e = RunEntry {
                            seed: *new_seed,
                            status: RunStatus::Substituted(*new_seed),
                            attempts: 0,
                        };
                    }
                }
                self.used_backups.insert(*new_seed);
            }
            Event::AnalysisComputed {
                stage,
                method,
                baseline,
            } => self.analyses.push((stage.clone(), *method, *baseline)),
            Event::GateDecided { stage, c1_pass } => {
                self.gates.insert(stage.clone(), *c1_pass);
            }
            Event::StageSkipped { stage } => {
                self.skipped.insert(stage.clone());
            }
            Event::Aborted { reason } => self.aborted = Some(reason.clone()),
            Event::CampaignCompleted => self.completed = true,
        }
    }

    /// Completed runs of `cell` in `stage`.
    pub fn done(&self, stage: &str, cell: Cell) -> usize {
        self.runs
            .iter()
            .filter(|((st, _, c), e)| st == stage && *c == cell && e.status == RunStatus::Done)
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    pub stage: String,
    pub slot: usize,
    pub failed_cell: Cell,
    pub old_seed: u64,
    pub new_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CampaignOutcome {
    Completed,
    Aborted { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub backbone: String,
    pub executed: bool,
    /// Verdict of this stage's primary comparison, when computed.
    pub verdict: Option<Verdict>,
    /// Seeds in slot order after substitution.
    pub seeds: Vec<u64>,
    pub valid_runs: BTreeMap<Cell, usize>,
    pub analyses: Vec<AnalysisReport>,
    /// v2 minus v1 on matched seeds, when the stage ran both.
    pub matched_v2_v1: Option<PairedSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub outcome: CampaignOutcome,
    /// A gate failed, closing the method family for later stages.
    pub family_closed: bool,
    pub stages: Vec<StageReport>,
    pub substitutions: Vec<Substitution>,
    pub infra_retries: usize,
}

impl CampaignReport {
    pub fn is_aborted(&self) -> bool {
        matches!(self.outcome, CampaignOutcome::Aborted { .. })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match &self.outcome {
            CampaignOutcome::Completed => out.push_str("campaign completed\n"),
            CampaignOutcome::Aborted { reason } => {
                let _ = writeln!(out, "campaign ABORTED: {reason}");
            }
        }
        let _ = writeln!(out, "family closed: {}", self.family_closed);
        let _ = writeln!(out, "infrastructure retries: {}", self.infra_retries);
        for s in &self.substitutions {
            let _ = writeln!(
                out,
                "substitution: stage {} slot {} seed {} -> {} (training failure in {})",
                s.stage, s.slot, s.old_seed, s.new_seed, s.failed_cell
            );
        }
        for st in &self.stages {
            let _ = writeln!(out, "\n== stage {} ({}) ==", st.name, st.backbone);
            if !st.executed {
                out.push_str("not executed\n");
                continue;
            }
            let runs: Vec<String> = st.valid_runs.iter().map(|(c, n)| format!("{c}={n}")).collect();
            let _ = writeln!(out, "valid runs: {}", runs.join(" "));
            for a in &st.analyses {
                out.push_str(&a.to_text());
            }
            if let Some(m) = &st.matched_v2_v1 {
                out.push_str(&m.to_text());
            }
        }
        out
    }
}

enum Halt {
    Abort(String),
    Fatal(Error),
}

impl From<Error> for Halt {
    fn from(e: Error) -> Self {
        match e {
            Error::Aborted(v) => Halt::Abort(v.to_string()),
            other => Halt::Fatal(other),
        }
    }
}

/// Output directory layout of one campaign.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }
    pub fn state_log(&self) -> PathBuf {
        self.root.join("state.log")
    }
    pub fn operator_log(&self) -> PathBuf {
        self.root.join("operator.log")
    }
    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn predictions(&self, stage: &str, cell: Cell, seed: u64) -> PathBuf {
        self.root
            .join("predictions")
            .join(stage)
            .join(cell.name())
            .join(format!("seed-{seed}.jsonl"))
    }
    pub fn work(&self, stage: &str, cell: Cell, seed: u64, attempt: u32) -> PathBuf {
        self.root
            .join("work")
            .join(stage)
            .join(cell.name())
            .join(format!("seed-{seed}-attempt-{attempt}"))
    }
    pub fn sealed(&self, stage: &str, cell: Cell, seed: u64, attempt: u32) -> PathBuf {
        self.root
            .join("sealed")
            .join(stage)
            .join(cell.name())
            .join(format!("seed-{seed}-attempt-{attempt}.log"))
    }
    pub fn quarantine(&self, stage: &str, slot: usize, seed: u64) -> PathBuf {
        self.root
            .join("quarantine")
            .join(stage)
            .join(format!("slot-{slot}-seed-{seed}"))
    }
    pub fn analysis(&self, stage: &str, name: &str) -> PathBuf {
        self.root.join("analysis").join(stage).join(name)
    }
}

struct Runner<'a, E: ?Sized> {
    plan: &'a CampaignPlan,
    exec: &'a mut E,
    layout: Layout,
    state: RunState,
    state_log: File,
    operator_file: File,
    operator: &'a mut dyn Write,
    seq: u64,
    backups: VecDeque<u64>,
    reference_gold: Option<Vec<usize>>,
    files: BTreeMap<(String, Cell), Vec<PredictionFile>>,
    seeds: BTreeMap<String, Vec<u64>>,
    analyses: BTreeMap<(String, Cell), AnalysisReport>,
    substitutions: Vec<Substitution>,
    infra_retries: usize,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl<E: Executor + ?Sized> Runner<'_, E> {
    fn emit(&mut self, event: Event) -> Result<()> {
        self.seq += 1;
        self.state.apply(&event);
        let rec = EventRecord {
            seq: self.seq,
            at_ms: now_ms(),
            event,
        };
        let line = serde_json::to_string(&rec).expect("event serializes");
        let path = self.layout.state_log();
        writeln!(self.state_log, "{line}").map_err(|e| Error::io(&path, e))?;
        self.state_log.flush().map_err(|e| Error::io(&path, e))
    }

    /// Operator-visible output; always redacted.
    fn say(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let red = redact_metrics(line);
            let path = self.layout.operator_log();
            writeln!(self.operator_file, "{red}").map_err(|e| Error::io(&path, e))?;
            writeln!(self.operator, "{red}").map_err(|e| Error::io("<operator>", e))?;
        }
        Ok(())
    }

    fn check_file(&mut self, stage: &StageSpec, cell: Cell, seed: u64, file: &PredictionFile) -> Result<()> {
        let h = &file.header;
        if h.cell != cell.name() || h.seed != seed || h.backbone != stage.backbone {
            return Err(Violation::HeaderMismatch {
                detail: format!(
                    "expected ({}, {}, {seed}), found ({}, {}, {})",
                    cell, stage.backbone, h.cell, h.backbone, h.seed
                ),
            }
            .into());
        }
        match &self.reference_gold {
            Some(gold) => validate_prediction_file(file, Some(gold))?,
            None => {
                validate_prediction_file(file, None)?;
                self.reference_gold = Some(file.gold());
            }
        }
        Ok(())
    }

    fn quarantine(&mut self, stage: &str, slot: usize, seed: u64, produced: &[(Cell, PathBuf)], work: &[PathBuf]) -> Result<()> {
        let dir = self.layout.quarantine(stage, slot, seed);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (cell, path) in produced {
            let to = dir.join(format!("{}-predictions.jsonl", cell.name()));
            fs::rename(path, &to).map_err(|e| Error::io(path, e))?;
        }
        for w in work {
            if w.exists() {
                let name = w.file_name().map(|n| n.to_owned()).unwrap_or_default();
                let to = dir.join("work").join(name);
                fs::create_dir_all(dir.join("work")).map_err(|e| Error::io(&dir, e))?;
                fs::rename(w, &to).map_err(|e| Error::io(w, e))?;
            }
        }
        Ok(())
    }

    fn run_slot(&mut self, stage: &StageSpec, slot: usize) -> std::result::Result<u64, Halt> {
        let mut seed = self.plan.primary_seeds[slot];
        'seed: loop {
            let mut produced: Vec<(Cell, PathBuf, PredictionFile)> = Vec::new();
            let mut work_dirs = Vec::new();
            for &cell in &stage.cells {
                let mut attempt = 0u32;
                loop {
                    attempt += 1;
                    self.emit(Event::RunStarted {
                        stage: stage.name.clone(),
                        cell,
                        slot,
                        seed,
                        attempt,
                    })?;
                    self.say(&format!("stage {} cell {cell} seed {seed} attempt {attempt} started", stage.name))?;
                    let work = self.layout.work(&stage.name, cell, seed, attempt);
                    fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
                    work_dirs.push(work.clone());
                    let outcome = self.exec.run(&RunRequest {
                        stage: &stage.name,
                        backbone: &stage.backbone,
                        cell,
                        seed,
                        attempt,
                        hyperparameters: &stage.hyperparameters,
                        work_dir: &work,
                    });
                    let raw = match &outcome {
                        ExecOutcome::Success { log, .. } | ExecOutcome::Failure { log } => log.clone(),
                    };
                    write_file(&self.layout.sealed(&stage.name, cell, seed, attempt), raw.as_bytes())?;
                    self.say(&raw)?;
                    match outcome {
                        ExecOutcome::Success { predictions, .. } => {
                            self.check_file(stage, cell, seed, &predictions)?;
                            let path = self.layout.predictions(&stage.name, cell, seed);
                            predictions.write(&path)?;
                            self.emit(Event::RunSucceeded {
                                stage: stage.name.clone(),
                                cell,
                                slot,
                                seed,
                            })?;
                            self.say(&format!("stage {} cell {cell} seed {seed} done", stage.name))?;
                            produced.push((cell, path, predictions));
                            break;
                        }
                        ExecOutcome::Failure { log } => match classify_failure(&log) {
                            FailureKind::Infra => {
                                self.emit(Event::InfraFailure {
                                    stage: stage.name.clone(),
                                    cell,
                                    slot,
                                    seed,
                                    attempt,
                                })?;
                                if attempt > self.plan.max_infra_retries {
                                    return Err(Halt::Abort(format!(
                                        "infrastructure failure persisted after {} retries (stage {}, cell {cell}, seed {seed})",
                                        self.plan.max_infra_retries, stage.name
                                    )));
                                }
                                self.infra_retries += 1;
                                self.say(&format!("infrastructure failure; retrying seed {seed}"))?;
                            }
                            FailureKind::Training => {
                                self.emit(Event::TrainingFailure {
                                    stage: stage.name.clone(),
                                    cell,
                                    slot,
                                    seed,
                                })?;
                                let paths: Vec<(Cell, PathBuf)> =
                                    produced.iter().map(|(c, p, _)| (*c, p.clone())).collect();
                                self.quarantine(&stage.name, slot, seed, &paths, &work_dirs)?;
                                let Some(new_seed) = self.backups.pop_front() else {
                                    return Err(Halt::Abort(format!(
                                        "backup seed pool exhausted (stage {}, slot {slot}, seed {seed})",
                                        stage.name
                                    )));
                                };
                                self.emit(Event::Substituted {
                                    stage: stage.name.clone(),
                                    slot,
                                    old_seed: seed,
                                    new_seed,
                                })?;
                                self.say(&format!("training failure; seed {seed} replaced by backup {new_seed}"))?;
                                self.substitutions.push(Substitution {
                                    stage: stage.name.clone(),
                                    slot,
                                    failed_cell: cell,
                                    old_seed: seed,
                                    new_seed,
                                });
                                seed = new_seed;
                                continue 'seed;
                            }
                        },
                    }
                }
            }
            for (cell, _, file) in produced {
                self.files.entry((stage.name.clone(), cell)).or_default().push(file);
            }
            return Ok(seed);
        }
    }

    /// Computes (once) and caches the comparison of `method` with the
    /// stage baseline.
    fn analysis(&mut self, stage: &StageSpec, method: Cell) -> Result<AnalysisReport> {
        let key = (stage.name.clone(), method);
        if let Some(r) = self.analyses.get(&key) {
            return Ok(r.clone());
        }
        self.emit(Event::AnalysisComputed {
            stage: stage.name.clone(),
            method,
            baseline: stage.baseline,
        })?;
        let m = &self.files[&(stage.name.clone(), method)];
        let b = &self.files[&(stage.name.clone(), stage.baseline)];
        let series = per_seed_deltas(m, b)?;
        let report = analyze(
            &format!("{}-{}", method, stage.backbone),
            &format!("{}-{}", stage.baseline, stage.backbone),
            &series,
            &self.plan.bootstrap,
            &self.plan.rule,
        )?;
        let name = format!("{}-vs-{}", method, stage.baseline);
        write_file(&self.layout.analysis(&stage.name, &format!("{name}.json")), report.to_json().as_bytes())?;
        write_file(&self.layout.analysis(&stage.name, &format!("{name}.txt")), report.to_text().as_bytes())?;
        self.analyses.insert(key, report.clone());
        Ok(report)
    }

    fn run_stages(&mut self) -> std::result::Result<(), Halt> {
        let plan = self.plan;
        for stage in &plan.stages {
            if let Some(g) = &stage.gate {
                if self.state.gates.get(g) != Some(&true) {
                    self.emit(Event::StageSkipped {
                        stage: stage.name.clone(),
                    })?;
                    self.say(&format!("stage {} not launched: gate stage {g} did not pass", stage.name))?;
                    continue;
                }
            }
            let mut seeds = Vec::with_capacity(plan.n());
            for slot in 0..plan.n() {
                seeds.push(self.run_slot(stage, slot)?);
            }
            self.seeds.insert(stage.name.clone(), seeds);
            if plan.stages.iter().any(|s| s.gate.as_deref() == Some(&stage.name)) {
                // Gate: the locked rule on the primary comparison, nothing else.
                let verdict = self.analysis(stage, stage.primary)?.verdict;
                self.emit(Event::GateDecided {
                    stage: stage.name.clone(),
                    c1_pass: verdict.c1_pass,
                })?;
                self.say(&format!(
                    "gate on stage {}: C1 {}",
                    stage.name,
                    if verdict.c1_pass { "PASS" } else { "FAIL" }
                ))?;
            }
        }
        Ok(())
    }

    fn final_report(&mut self, outcome: CampaignOutcome) -> Result<CampaignReport> {
        let plan = self.plan;
        let mut stages = Vec::new();
        let completed = outcome == CampaignOutcome::Completed;
        for st in &plan.stages {
            let executed = self.seeds.contains_key(&st.name);
            let mut analyses = Vec::new();
            let mut matched = None;
            if executed && completed {
                for &cell in &st.cells {
                    if cell != st.baseline {
                        analyses.push(self.analysis(st, cell)?);
                    }
                }
                if st.cells.contains(&Cell::V1) && st.cells.contains(&Cell::V2) && st.baseline != Cell::V1 {
                    let v2 = per_seed_deltas(&self.files[&(st.name.clone(), Cell::V2)], &self.files[&(st.name.clone(), st.baseline)])?;
                    let v1 = per_seed_deltas(&self.files[&(st.name.clone(), Cell::V1)], &self.files[&(st.name.clone(), st.baseline)])?;
                    let m = matched_seed_compare("v2", &v2, "v1", &v1, &plan.bootstrap)?;
                    write_file(&self.layout.analysis(&st.name, "matched-v2-v1.json"), m.to_json().as_bytes())?;
                    matched = Some(m);
                }
            }
            stages.push(StageReport {
                name: st.name.clone(),
                backbone: st.backbone.clone(),
                executed,
                verdict: self.analyses.get(&(st.name.clone(), st.primary)).map(|a| a.verdict),
                seeds: self.seeds.get(&st.name).cloned().unwrap_or_default(),
                valid_runs: st.cells.iter().map(|&c| (c, self.state.done(&st.name, c))).collect(),
                analyses,
                matched_v2_v1: matched,
            });
        }
        let family_closed = self.state.gates.values().any(|&p| !p);
        Ok(CampaignReport {
            outcome,
            family_closed,
            stages,
            substitutions: self.substitutions.clone(),
            infra_retries: self.infra_retries,
        })
    }
}

/// Runs `plan` into `out_dir`, which must not already hold a campaign.
/// Invariant violations and exhausted retries or backups end the campaign
/// with an aborted outcome rather than an error; I/O problems are errors.
pub fn run_campaign<E: Executor + ?Sized>(
    plan: &CampaignPlan,
    executor: &mut E,
    out_dir: &Path,
    operator: &mut dyn Write,
) -> Result<CampaignReport> {
    plan.validate()?;
    let layout = Layout {
        root: out_dir.to_path_buf(),
    };
    if layout.state_log().exists() || layout.plan().exists() {
        return Err(Error::invalid(format!(
            "{} already holds a campaign; plans cannot be resumed or extended",
            out_dir.display()
        )));
    }
    let plan_json = plan.to_json();
    write_file(&layout.plan(), plan_json.as_bytes())?;
    let open = |p: PathBuf| File::create(&p).map_err(|e| Error::io(&p, e));
    let mut runner = Runner {
        plan,
        exec: executor,
        state_log: open(layout.state_log())?,
        operator_file: open(layout.operator_log())?,
        layout,
        state: RunState::new(plan),
        operator,
        seq: 0,
        backups: plan.backup_seeds.iter().copied().collect(),
        reference_gold: None,
        files: BTreeMap::new(),
        seeds: BTreeMap::new(),
        analyses: BTreeMap::new(),
        substitutions: Vec::new(),
        infra_retries: 0,
    };
    runner.emit(Event::CampaignStarted {
        plan: fingerprint(&plan_json),
    })?;
    let report = match runner.run_stages() {
        Ok(()) => {
            let report = runner.final_report(CampaignOutcome::Completed)?;
            runner.emit(Event::CampaignCompleted)?;
            report
        }
        Err(Halt::Abort(reason)) => {
            runner.emit(Event::Aborted { reason: reason.clone() })?;
            runner.say(&format!("campaign aborted: {reason}"))?;
            runner.final_report(CampaignOutcome::Aborted { reason })?
        }
        Err(Halt::Fatal(e)) => return Err(e),
    };
    write_file(&runner.layout.report_json(), report.to_json().as_bytes())?;
    write_file(&runner.layout.report_text(), report.to_text().as_bytes())?;
    runner.say(&format!("report written to {}", runner.layout.report_text().display()))?;
    Ok(report)
}
