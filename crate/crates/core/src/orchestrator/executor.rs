use std::collections::{HashMap, VecDeque};
use std::path::Path;

use crate::data::{build_csip_triplets, Record};
use crate::rng::StreamRng;
use crate::training::{
    prediction_file, stage1_pretrain, stage2_v1, stage2_v2, train_baseline_c2, Cell, Checkpoint, Hyperparameters,
};

use super::{fingerprint, PredictionFile, PredictionRow};

/// One seed of one cell, as handed to an [`Executor`].
#[derive(Clone, Debug)]
pub struct RunRequest<'a> {
    pub stage: &'a str,
    pub backbone: &'a str,
    pub cell: Cell,
    pub seed: u64,
    /// 1-based attempt number for this seed.
    pub attempt: u32,
    pub hyperparameters: &'a Hyperparameters,
    /// Scratch directory owned by this attempt.
    pub work_dir: &'a Path,
}

/// What a run produced. The raw log is never shown to the operator
/// unredacted; on failure it is also what the failure class is read from.
#[derive(Clone, Debug, PartialEq)]
pub enum ExecOutcome {
    Success { predictions: PredictionFile, log: String },
    Failure { log: String },
}

/// Runs one seed of one cell from scratch.
pub trait Executor {
    fn run(&mut self, req: &RunRequest<'_>) -> ExecOutcome;
}

/// Trains the real model family on an in-memory corpus. Stage-1
/// checkpoints are shared between v1 and v2 runs of the same seed and
/// configuration, which is exact because pretraining depends on nothing
/// else.
pub struct TrainingExecutor {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
    stage1_cache: HashMap<(String, u64), Checkpoint>,
}

impl TrainingExecutor {
    pub fn new(train: Vec<Record>, val: Vec<Record>, test: Vec<Record>) -> Self {
        Self {
            train,
            val,
            test,
            stage1_cache: HashMap::new(),
        }
    }

    fn run_inner(&mut self, req: &RunRequest<'_>) -> crate::Result<(PredictionFile, String)> {
        let hp = req.hyperparameters;
        let mut log = format!("{} {} seed {} attempt {}\n", req.stage, req.cell, req.seed, req.attempt);
        let outcome = match req.cell {
            Cell::C2 => train_baseline_c2(&self.train, &self.val, hp, req.seed)?,
            Cell::V1 | Cell::V2 => {
                let triplets = build_csip_triplets(&self.train, &hp.encoder.tokenizer());
                let hp_key = serde_json::to_string(hp).map_err(|e| crate::Error::format("hyperparameters", e.to_string()))?;
                let key = (hp_key, req.seed);
                if !self.stage1_cache.contains_key(&key) {
                    let ck = stage1_pretrain(&triplets, hp, req.seed)?;
                    self.stage1_cache.insert(key.clone(), ck);
                }
                let ck = &self.stage1_cache[&key];
                log.push_str(&format!("stage1 done, {} triplets\n", triplets.len()));
                if req.cell == Cell::V1 {
                    stage2_v1(ck, &self.train, &self.val, hp, req.seed)?
                } else {
                    stage2_v2(ck, &self.train, &triplets, &self.val, hp, req.seed)?
                }
            }
        };
        for (epoch, f1) in outcome.val_macro_f1.iter().enumerate() {
            log.push_str(&format!("epoch {} val macro_f1={f1:.4}\n", epoch + 1));
        }
        log.push_str(&format!("best epoch {}\n", outcome.best_epoch));
        let file = prediction_file(&outcome.model, &self.test, req.cell, req.backbone, req.seed, hp)?;
        Ok((file, log))
    }
}

impl Executor for TrainingExecutor {
    fn run(&mut self, req: &RunRequest<'_>) -> ExecOutcome {
        match self.run_inner(req) {
            Ok((predictions, log)) => ExecOutcome::Success { predictions, log },
            Err(e) => ExecOutcome::Failure { log: e.to_string() },
        }
    }
}

/// Scripted fault for [`SimulatedExecutor`].
#[derive(Clone, Debug, PartialEq)]
pub enum Fault {
    /// Fails with this log text.
    Fail(String),
    /// Succeeds but drops the last prediction row.
    TruncatedFile,
    /// Succeeds but flips the gold label of the first row.
    GoldFlip,
}

/// Fault-injecting stand-in for training. Predictions equal gold except
/// that row `i` of seed `s` is wrong when `keyed(s, i) < error_rate`, with
/// per-(stage, cell) error rates.
#[derive(Clone, Debug)]
pub struct SimulatedExecutor {
    pub gold: Vec<usize>,
    pub error_rates: HashMap<(String, Cell), f64>,
    pub default_error_rate: f64,
    pub faults: HashMap<(String, Cell, u64), VecDeque<Fault>>,
    /// `(stage, cell, seed, attempt)` of every call, in order.
    pub calls: Vec<(String, Cell, u64, u32)>,
}

impl SimulatedExecutor {
    pub fn new(gold: Vec<usize>, default_error_rate: f64) -> Self {
        Self {
            gold,
            error_rates: HashMap::new(),
            default_error_rate,
            faults: HashMap::new(),
            calls: Vec::new(),
        }
    }

    pub fn with_error_rate(mut self, stage: &str, cell: Cell, rate: f64) -> Self {
        self.error_rates.insert((stage.into(), cell), rate);
        self
    }

    /// Queues faults consumed one per attempt of `(stage, cell, seed)`.
    pub fn with_faults(mut self, stage: &str, cell: Cell, seed: u64, faults: impl IntoIterator<Item = Fault>) -> Self {
        self.faults
            .entry((stage.into(), cell, seed))
            .or_default()
            .extend(faults);
        self
    }
}

impl Executor for SimulatedExecutor {
    fn run(&mut self, req: &RunRequest<'_>) -> ExecOutcome {
        self.calls.push((req.stage.into(), req.cell, req.seed, req.attempt));
        let fault = self
            .faults
            .get_mut(&(req.stage.to_owned(), req.cell, req.seed))
            .and_then(VecDeque::pop_front);
        if let Some(Fault::Fail(log)) = &fault {
            return ExecOutcome::Failure { log: log.clone() };
        }
        let rate = *self
            .error_rates
            .get(&(req.stage.to_owned(), req.cell))
            .unwrap_or(&self.default_error_rate);
        let mut rows: Vec<PredictionRow> = self
            .gold
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let wrong = StreamRng::keyed(req.seed ^ ((req.cell as u64) << 56), i as u64).unit_f64() < rate;
                PredictionRow {
                    id: format!("t{i}"),
                    gold: g,
                    pred: if wrong { (g + 1) % 5 } else { g },
                }
            })
            .collect();
        match fault {
            Some(Fault::TruncatedFile) => {
                rows.pop();
            }
            Some(Fault::GoldFlip) => rows[0].gold = (rows[0].gold + 1) % 5,
            _ => {}
        }
        let mut predictions = PredictionFile::new(req.cell.name(), req.backbone, req.seed, fingerprint("simulated"), rows);
        if fault == Some(Fault::TruncatedFile) {
            predictions.header.n_rows += 1;
        }
        ExecOutcome::Success {
            predictions,
            log: format!("simulated run done, val macro_f1={:.2}\n", 100.0 * (1.0 - rate)),
        }
    }
}
