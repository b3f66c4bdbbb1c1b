//! AdamW, the warmup/decay schedule, checkpoints and the training loops:
//! Stage-1 CSIP pretraining, the v1 and v2 transfers and the concatenation
//! baseline.
//!
//! A run seed fans out into independent streams (see [`crate::rng::streams`])
//! for initialization, each loader's shuffling and each dropout site, so
//! `(cell, configuration, seed)` fixes every draw of a run.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{build_csip_triplets, label_counts, CsipTriplet, Record, TripletKind};
use crate::encoder::{Encoder, EncoderConfig, TokenSequence};
use crate::heads::{argmax, BaselineHead, FactorState, FreshHead, TypedHead};
use crate::losses::{class_weights, csip_batch_graph, v2_loss_graph, weighted_ce_batch_graph, ClassWeights, CsipScores};
use crate::metrics::macro_f1;
use crate::numerics::{clip_global_norm, Gradients, Graph, ParamGroupTag, ParamStore, Tensor, Var};
use crate::orchestrator::{PredictionFile, PredictionRow};
use crate::rng::{streams, StreamRng};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_ratio: f64,
    pub clip_norm: f64,
    pub stage1_epochs: usize,
    pub stage1_batch: usize,
    pub stage2_epochs: usize,
    pub ft_batch: usize,
    pub replay_batch: usize,
    pub lambda_select: f64,
    pub lambda_remain: f64,
    /// Encoder sizes; its dropout probability is shared by every head.
    pub encoder: EncoderConfig,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_ratio: 0.1,
            clip_norm: 1.0,
            stage1_epochs: 3,
            stage1_batch: 32,
            stage2_epochs: 5,
            ft_batch: 16,
            replay_batch: 8,
            lambda_select: 1.0,
            lambda_remain: 0.5,
            encoder: EncoderConfig::default(),
        }
    }
}

impl Hyperparameters {
    /// The toy encoder needs a far larger step size than a pretrained one.
    pub fn desk() -> Self {
        Self {
            lr: 1e-2,
            encoder: EncoderConfig::desk(),
            ..Self::default()
        }
    }

    pub fn dropout(&self) -> f64 {
        self.encoder.dropout
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (name, v) in [
            ("lr", self.lr),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("lambda_select", self.lambda_select),
            ("lambda_remain", self.lambda_remain),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("warmup_ratio", self.warmup_ratio)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if self.stage1_batch == 0 || self.ft_batch == 0 || self.replay_batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 over the first `ceil(ratio * total)` steps, then
/// linear decay to 0 at `total`.
pub fn lr_at(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        base_lr * step as f64 / warmup as f64
    } else if total_steps > warmup {
        base_lr * total_steps.saturating_sub(step) as f64 / (total_steps - warmup) as f64
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

/// AdamW with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, decay included, and keep their own step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hp: &Hyperparameters) -> Self {
        Self {
            beta1: hp.beta1,
            beta2: hp.beta2,
            eps: hp.eps,
            weight_decay: hp.weight_decay,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let decay = T::one() - T::lit(lr * self.weight_decay);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id).values_mut();
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![T::zero(); p.len()],
                v: vec![T::zero(); p.len()],
                step: 0,
            });
            st.step += 1;
            let bc1 = one - b1.powi(st.step);
            let bc2_sqrt = (one - b2.powi(st.step)).sqrt();
            let step_size = T::lit(lr) / bc1;
            for (((w, &gk), m), v) in p.iter_mut().zip(g.values()).zip(&mut st.m).zip(&mut st.v) {
                *w = *w * decay;
                *m = b1 * *m + (one - b1) * gk;
                *v = b2 * *v + (one - b2) * gk * gk;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *w = *w - step_size * *m / denom;
            }
        }
    }
}

/// Classifier input: the joint pair sequence, or two single-text sequences
/// for the concatenation baseline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassifierInput {
    Pair(TokenSequence),
    Separate(TokenSequence, TokenSequence),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FtExample {
    pub input: ClassifierInput,
    pub label: usize,
}

/// Encoder plus whichever heads a cell carries, all stored in one
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub typed: Option<TypedHead>,
    pub fresh: Option<FreshHead>,
    pub baseline: Option<BaselineHead>,
}

fn init_seeds(seed: u64, stream: u32) -> (u64, u64) {
    let mut r = StreamRng::stream(seed, stream);
    (r.next_u64(), r.next_u64())
}

impl<T: Scalar> Model<T> {
    /// Encoder and typed head, as used by Stage 1.
    pub fn init_pretraining(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let (enc_seed, typed_seed) = init_seeds(seed, streams::INIT);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, config, enc_seed)?;
        let typed = TypedHead::init(&mut store, config.hidden_size, config.dropout, typed_seed)?;
        Ok(Self {
            store,
            encoder,
            typed: Some(typed),
            fresh: None,
            baseline: None,
        })
    }

    /// Freshly initialized encoder and concatenation head.
    pub fn init_baseline(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let (enc_seed, _) = init_seeds(seed, streams::INIT);
        let (_, head_seed) = init_seeds(seed, streams::HEAD_INIT);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, config, enc_seed)?;
        let baseline = BaselineHead::init(&mut store, config.hidden_size, config.dropout, head_seed)?;
        Ok(Self {
            store,
            encoder,
            typed: None,
            fresh: None,
            baseline: Some(baseline),
        })
    }

    /// Adds a fresh five-way head seeded from the run seed.
    pub fn with_fresh_head(mut self, seed: u64) -> Result<Self> {
        let (head_seed, _) = init_seeds(seed, streams::HEAD_INIT);
        let cfg = &self.encoder.config;
        self.fresh = Some(FreshHead::init(&mut self.store, cfg.hidden_size, cfg.dropout, head_seed)?);
        Ok(self)
    }

    /// Keeps only the encoder group, dropping every head.
    pub fn encoder_only(&self) -> Result<Self> {
        let mut store = ParamStore::new();
        for id in self.store.ids_in_group(ParamGroupTag::Encoder) {
            store.add(self.store.name(id), ParamGroupTag::Encoder, self.store.get(id).clone())?;
        }
        let encoder = Encoder::attach(&store, &self.encoder.config)?;
        Ok(Self {
            store,
            encoder,
            typed: None,
            fresh: None,
            baseline: None,
        })
    }

    /// Re-binds head handles by parameter name after loading a store.
    pub fn from_store(store: ParamStore<T>, config: &EncoderConfig) -> Result<Self> {
        let encoder = Encoder::attach(&store, config)?;
        let (d, p) = (config.hidden_size, config.dropout);
        let typed = store
            .has_group(ParamGroupTag::TypedHead)
            .then(|| TypedHead::attach(&store, d, p))
            .transpose()?;
        let fresh = store
            .has_group(ParamGroupTag::FreshHead)
            .then(|| FreshHead::attach(&store, d, p))
            .transpose()?;
        let baseline = store
            .has_group(ParamGroupTag::BaselineHead)
            .then(|| BaselineHead::attach(&store, d, p))
            .transpose()?;
        Ok(Self {
            store,
            encoder,
            typed,
            fresh,
            baseline,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            typed: self.typed.clone(),
            fresh: self.fresh.clone(),
            baseline: self.baseline.clone(),
        }
    }

    /// Tokenizes a record the way this model's classifier reads it. The
    /// baseline reads `A` and `B` separately; nothing reads the revision.
    pub fn prepare(&self, record: &Record) -> FtExample {
        let tok = self.encoder.config.tokenizer();
        let input = if self.baseline.is_some() {
            ClassifierInput::Separate(tok.single(&record.superior_text), tok.single(&record.subordinate_text))
        } else {
            ClassifierInput::Pair(tok.pair(&record.superior_text, &record.subordinate_text))
        };
        FtExample {
            input,
            label: record.label.index(),
        }
    }

    /// Five-way logits from the inference head. Dropout is active only when
    /// `dropout` is given.
    pub fn logits(
        &self,
        graph: &mut Graph<'_, T>,
        input: &ClassifierInput,
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<Var> {
        match input {
            ClassifierInput::Pair(seq) => {
                let head = self
                    .fresh
                    .as_ref()
                    .ok_or_else(|| Error::invalid("model has no five-way head"))?;
                let h = self.encoder.encode(graph, seq, dropout.as_deref_mut())?;
                head.logits(graph, h, dropout)
            }
            ClassifierInput::Separate(a, b) => {
                let head = self
                    .baseline
                    .as_ref()
                    .ok_or_else(|| Error::invalid("model has no concatenation head"))?;
                let ha = self.encoder.encode(graph, a, dropout.as_deref_mut())?;
                let hb = self.encoder.encode(graph, b, dropout.as_deref_mut())?;
                head.logits(graph, ha, hb, dropout)
            }
        }
    }

    pub fn predict_one(&self, input: &ClassifierInput) -> Result<usize> {
        let mut g = Graph::new(&self.store);
        let l = self.logits(&mut g, input, None)?;
        Ok(argmax(g.value(l)))
    }

    pub fn predict(&self, records: &[Record]) -> Result<Vec<usize>> {
        records.iter().map(|r| self.predict_one(&self.prepare(r).input)).collect()
    }

    /// Typed-head state of the joint `(A, B)` encoding.
    pub fn factor_state(&self, record: &Record) -> Result<FactorState<T>> {
        let typed = self
            .typed
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no typed head"))?;
        let seq = self
            .encoder
            .config
            .tokenizer()
            .pair(&record.superior_text, &record.subordinate_text);
        let mut g = Graph::new(&self.store);
        let h = self.encoder.encode(&mut g, &seq, None)?;
        typed.state(&mut g, h)
    }
}

/// CSIP batch loss of `triplets` through the typed head.
pub fn csip_loss<T: Scalar>(
    graph: &mut Graph<'_, T>,
    model: &Model<T>,
    triplets: &[&CsipTriplet],
    lambda_select: f64,
    mut dropout: Option<&mut StreamRng>,
) -> Result<Var> {
    let typed = model
        .typed
        .as_ref()
        .ok_or_else(|| Error::invalid("CSIP loss needs the typed head"))?;
    let mut scores = Vec::with_capacity(triplets.len());
    for t in triplets {
        let h = model.encoder.encode(graph, &t.pair, dropout.as_deref_mut())?;
        let s_b = typed.factor_scores(graph, h, dropout.as_deref_mut())?;
        scores.push(match &t.kind {
            TripletKind::Conflict { target, revised } => {
                let hg = model.encoder.encode(graph, revised, dropout.as_deref_mut())?;
                let s_g = typed.factor_scores(graph, hg, dropout.as_deref_mut())?;
                CsipScores::Conflict {
                    s_b,
                    s_g,
                    target: *target,
                }
            }
            TripletKind::NoConflict => CsipScores::NoConflict { s: s_b },
        });
    }
    csip_batch_graph(graph, &scores, T::lit(lambda_select))
}

/// Class-weighted cross-entropy of a fine-tuning batch through the
/// inference head.
pub fn ce_loss<T: Scalar>(
    graph: &mut Graph<'_, T>,
    model: &Model<T>,
    batch: &[&FtExample],
    weights: &ClassWeights,
    mut dropout: Option<&mut StreamRng>,
) -> Result<Var> {
    let mut logits = Vec::with_capacity(batch.len());
    for ex in batch {
        logits.push((model.logits(graph, &ex.input, dropout.as_deref_mut())?, ex.label));
    }
    weighted_ce_batch_graph(graph, &logits, weights)
}

/// Full v2 step objective: fine-tuning cross-entropy plus `lambda_remain`
/// times the replayed CSIP loss.
#[allow(clippy::too_many_arguments)]
pub fn v2_step_loss<T: Scalar>(
    graph: &mut Graph<'_, T>,
    model: &Model<T>,
    ft: &[&FtExample],
    replay: &[&CsipTriplet],
    weights: &ClassWeights,
    hp: &Hyperparameters,
    ft_dropout: Option<&mut StreamRng>,
    replay_dropout: Option<&mut StreamRng>,
) -> Result<Var> {
    let ce = ce_loss(graph, model, ft, weights, ft_dropout)?;
    let r = csip_loss(graph, model, replay, hp.lambda_select, replay_dropout)?;
    v2_loss_graph(graph, ce, r, T::lit(hp.lambda_remain))
}

/// Shared optimizer bookkeeping for one training phase.
struct Stepper {
    opt: AdamW<f64>,
    step: usize,
    total: usize,
    lr: f64,
    warmup_ratio: f64,
    clip: f64,
}

impl Stepper {
    fn new(hp: &Hyperparameters, total: usize) -> Self {
        Self {
            opt: AdamW::new(hp),
            step: 0,
            total,
            lr: hp.lr,
            warmup_ratio: hp.warmup_ratio,
            clip: hp.clip_norm,
        }
    }

    fn apply(
        &mut self,
        model: &mut Model<f64>,
        build: impl FnOnce(&mut Graph<'_, f64>, &Model<f64>) -> Result<Var>,
    ) -> Result<f64> {
        let (loss, mut grads) = {
            let mut g = Graph::new(&model.store);
            let l = build(&mut g, model)?;
            let loss = g.scalar(l);
            if !loss.is_finite() {
                return Err(Error::TrainingFailure(format!(
                    "loss became non-finite at step {}",
                    self.step
                )));
            }
            (loss, g.backward(l)?)
        };
        let norm = clip_global_norm(&mut grads, self.clip)?;
        if !norm.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "gradient became non-finite at step {}",
                self.step
            )));
        }
        let lr = lr_at(self.step, self.total, self.warmup_ratio, self.lr);
        self.opt.step(&mut model.store, &grads, lr);
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub seed: u64,
    pub epoch: usize,
}

/// Model weights plus where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub provenance: Provenance,
    pub model: Model<f64>,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TCSIPCK1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroupTag,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    provenance: Provenance,
    encoder: EncoderConfig,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    /// Binary layout: the 8-byte magic `TCSIPCK1`, a little-endian `u64`
    /// header length, a JSON header (provenance, encoder configuration and
    /// the name, group and shape of every tensor in order), then all tensor
    /// values as little-endian `f64` in the same order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let store = &self.model.store;
        let header = CheckpointHeader {
            provenance: self.provenance.clone(),
            encoder: self.model.encoder.config.clone(),
            tensors: store
                .ids()
                .map(|id| TensorEntry {
                    name: store.name(id).to_owned(),
                    group: store.group(id),
                    shape: store.get(id).shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 8 * store.numel());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for id in store.ids() {
            for v in store.get(id).values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d.to_owned());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut values = bytes[16 + len..].chunks_exact(8);
        if values.len() * 8 != bytes.len() - 16 - len {
            return Err(bad("trailing bytes"));
        }
        let mut store = ParamStore::new();
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            if values.len() < n {
                return Err(bad("truncated tensor data"));
            }
            let vals = values
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            store.add(&t.name, t.group, Tensor::new(t.shape, vals)?)?;
        }
        if values.len() != 0 {
            return Err(bad("tensor data longer than declared"));
        }
        Ok(Self {
            provenance: header.provenance,
            model: Model::from_store(store, &header.encoder)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Stage-1 CSIP pretraining of the encoder and typed head.
pub fn stage1_pretrain(triplets: &[CsipTriplet], hp: &Hyperparameters, seed: u64) -> Result<Checkpoint> {
    hp.validate()?;
    if triplets.is_empty() {
        return Err(Error::invalid("Stage 1 needs at least one triplet"));
    }
    let mut model = Model::init_pretraining(&hp.encoder, seed)?;
    let per_epoch = triplets.len().div_ceil(hp.stage1_batch);
    let mut stepper = Stepper::new(hp, per_epoch * hp.stage1_epochs);
    let mut shuffle = StreamRng::stream(seed, streams::STAGE1_SHUFFLE);
    let mut dropout = StreamRng::stream(seed, streams::STAGE1_DROPOUT);
    for _ in 0..hp.stage1_epochs {
        let order = shuffle.permutation(triplets.len());
        for idx in batches(&order, hp.stage1_batch) {
            let batch: Vec<&CsipTriplet> = idx.iter().map(|&i| &triplets[i]).collect();
            stepper.apply(&mut model, |g, m| csip_loss(g, m, &batch, hp.lambda_select, Some(&mut dropout)))?;
        }
    }
    Ok(Checkpoint {
        provenance: Provenance {
            stage: "stage1".into(),
            seed,
            epoch: hp.stage1_epochs,
        },
        model,
    })
}

/// 1-based index of the best score; ties go to the earliest epoch.
pub fn select_best_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best.map(|b| b + 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub model: Model<f64>,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub val_macro_f1: Vec<f64>,
}

fn evaluate(model: &Model<f64>, examples: &[FtExample]) -> Result<f64> {
    let gold: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let pred = examples
        .iter()
        .map(|e| model.predict_one(&e.input))
        .collect::<Result<Vec<_>>>()?;
    macro_f1(&gold, &pred)
}

/// Fine-tuning loop shared by v1, v2 and the baseline. With `replay`, each
/// step also draws a CSIP batch from its own cyclic loader; the schedule
/// counts fine-tuning batches only.
fn finetune(
    mut model: Model<f64>,
    train: &[Record],
    replay: Option<&[CsipTriplet]>,
    val: &[Record],
    hp: &Hyperparameters,
    seed: u64,
) -> Result<FinetuneOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("fine-tuning needs non-empty train and validation splits"));
    }
    let weights = class_weights(&label_counts(train))?;
    let train_ex: Vec<FtExample> = train.iter().map(|r| model.prepare(r)).collect();
    let val_ex: Vec<FtExample> = val.iter().map(|r| model.prepare(r)).collect();
    let replay = replay.filter(|_| hp.lambda_remain != 0.0);
    if replay.is_some_and(<[CsipTriplet]>::is_empty) {
        return Err(Error::invalid("replay needs at least one triplet"));
    }

    let per_epoch = train_ex.len().div_ceil(hp.ft_batch);
    let mut stepper = Stepper::new(hp, per_epoch * hp.stage2_epochs);
    let mut ft_shuffle = StreamRng::stream(seed, streams::FT_SHUFFLE);
    let mut ft_dropout = StreamRng::stream(seed, streams::FT_DROPOUT);
    let mut replay_shuffle = StreamRng::stream(seed, streams::REPLAY_SHUFFLE);
    let mut replay_dropout = StreamRng::stream(seed, streams::REPLAY_DROPOUT);
    let mut replay_order: Vec<usize> = Vec::new();
    let mut replay_pos = 0;

    let mut scores = Vec::with_capacity(hp.stage2_epochs);
    let mut best = model.clone();
    for _ in 0..hp.stage2_epochs {
        let order = ft_shuffle.permutation(train_ex.len());
        for idx in batches(&order, hp.ft_batch) {
            let ft: Vec<&FtExample> = idx.iter().map(|&i| &train_ex[i]).collect();
            match replay {
                None => stepper.apply(&mut model, |g, m| ce_loss(g, m, &ft, &weights, Some(&mut ft_dropout)))?,
                Some(triplets) => {
                    let mut rb = Vec::with_capacity(hp.replay_batch);
                    while rb.len() < hp.replay_batch {
                        if replay_pos == replay_order.len() {
                            replay_order = replay_shuffle.permutation(triplets.len());
                            replay_pos = 0;
                        }
                        rb.push(&triplets[replay_order[replay_pos]]);
                        replay_pos += 1;
                    }
                    stepper.apply(&mut model, |g, m| {
                        v2_step_loss(g, m, &ft, &rb, &weights, hp, Some(&mut ft_dropout), Some(&mut replay_dropout))
                    })?
                }
            };
        }
        let score = evaluate(&model, &val_ex)?;
        if scores.iter().all(|&s| score > s) {
            best = model.clone();
        }
        scores.push(score);
    }
    Ok(FinetuneOutcome {
        model: best,
        best_epoch: select_best_epoch(&scores).unwrap_or(0),
        val_macro_f1: scores,
    })
}

fn check_config(ckpt: &Checkpoint, hp: &Hyperparameters) -> Result<()> {
    if ckpt.model.encoder.config != hp.encoder {
        return Err(Error::invalid("checkpoint encoder configuration differs from the hyperparameters"));
    }
    Ok(())
}

/// Typed-discard transfer: keeps the encoder only and trains a fresh head
/// with weighted cross-entropy.
pub fn stage2_v1(
    ckpt: &Checkpoint,
    train: &[Record],
    val: &[Record],
    hp: &Hyperparameters,
    seed: u64,
) -> Result<FinetuneOutcome> {
    hp.validate()?;
    check_config(ckpt, hp)?;
    let model = ckpt.model.encoder_only()?.with_fresh_head(seed)?;
    finetune(model, train, None, val, hp, seed)
}

/// Anti-forget replay: keeps the typed head live and adds the replayed
/// CSIP loss. Inference uses the fresh head only.
pub fn stage2_v2(
    ckpt: &Checkpoint,
    train: &[Record],
    triplets: &[CsipTriplet],
    val: &[Record],
    hp: &Hyperparameters,
    seed: u64,
) -> Result<FinetuneOutcome> {
    hp.validate()?;
    check_config(ckpt, hp)?;
    if ckpt.model.typed.is_none() {
        return Err(Error::invalid("v2 needs a checkpoint with the typed head"));
    }
    let mut model = ckpt.model.clone();
    model.fresh = None;
    model.baseline = None;
    let model = model.with_fresh_head(seed)?;
    finetune(model, train, Some(triplets), val, hp, seed)
}

/// Concatenation baseline: no pretraining, reads only `A` and `B`.
pub fn train_baseline_c2(train: &[Record], val: &[Record], hp: &Hyperparameters, seed: u64) -> Result<FinetuneOutcome> {
    hp.validate()?;
    let model = Model::init_baseline(&hp.encoder, seed)?;
    finetune(model, train, None, val, hp, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cell {
    C2,
    V1,
    V2,
}

impl Cell {
    pub const ALL: [Cell; 3] = [Cell::C2, Cell::V1, Cell::V2];

    pub fn name(self) -> &'static str {
        match self {
            Cell::C2 => "c2",
            Cell::V1 => "v1",
            Cell::V2 => "v2",
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cell {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Cell::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown cell {s:?}; expected c2, v1 or v2")))
    }
}

/// Trains one cell end to end. Both transfer cells pretrain on the CSIP
/// triplets of `train`, and v2 replays the same triplets.
pub fn run_cell(cell: Cell, train: &[Record], val: &[Record], hp: &Hyperparameters, seed: u64) -> Result<FinetuneOutcome> {
    match cell {
        Cell::C2 => train_baseline_c2(train, val, hp, seed),
        Cell::V1 | Cell::V2 => {
            let triplets = build_csip_triplets(train, &hp.encoder.tokenizer());
            let ckpt = stage1_pretrain(&triplets, hp, seed)?;
            if cell == Cell::V1 {
                stage2_v1(&ckpt, train, val, hp, seed)
            } else {
                stage2_v2(&ckpt, train, &triplets, val, hp, seed)
            }
        }
    }
}

/// Test predictions in file order, dropout off, ties to the lowest class.
pub fn predict_test(model: &Model<f64>, test: &[Record]) -> Result<Vec<PredictionRow>> {
    let preds = model.predict(test)?;
    Ok(test
        .iter()
        .zip(preds)
        .map(|(r, pred)| PredictionRow {
            id: r.id.clone(),
            gold: r.label.index(),
            pred,
        })
        .collect())
}

/// Convenience wrapper producing a full [`PredictionFile`].
pub fn prediction_file(
    model: &Model<f64>,
    test: &[Record],
    cell: Cell,
    backbone: &str,
    seed: u64,
    hp: &Hyperparameters,
) -> Result<PredictionFile> {
    let hp_json = serde_json::to_string(hp).map_err(|e| Error::format("hyperparameters", e.to_string()))?;
    let fp = crate::orchestrator::fingerprint(&format!("{cell}\n{hp_json}"));
    Ok(PredictionFile::new(cell.name(), backbone, seed, fp, predict_test(model, test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusConfig, Label};
    use crate::encoder::EncoderConfig;

    pub(crate) fn tiny_hp() -> Hyperparameters {
        Hyperparameters {
            lr: 1e-2,
            stage1_epochs: 1,
            stage2_epochs: 2,
            stage1_batch: 8,
            encoder: EncoderConfig {
                vocab_size: 512,
                hidden_size: 8,
                max_len: 32,
                dropout: 0.1,
            },
            ..Hyperparameters::default()
        }
    }

    fn tiny_corpus() -> crate::data::SyntheticCorpus {
        let mut cfg = CorpusConfig::desk(5);
        cfg.train_counts = [12, 10, 8, 6, 10];
        cfg.val_counts = [4, 4, 4, 4, 4];
        cfg.test_counts = [3, 3, 3, 3, 3];
        generate_synthetic_corpus(&cfg).unwrap()
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at(0, 1000, 0.1, 1.0), 0.0);
        assert_eq!(lr_at(100, 1000, 0.1, 1.0), 1.0);
        assert!((lr_at(550, 1000, 0.1, 1.0) - 0.5).abs() < 1e-15);
        assert!((lr_at(50, 1000, 0.1, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(1000, 1000, 0.1, 1.0), 0.0);
        assert_eq!(lr_at(0, 0, 0.1, 1.0), 0.0);
    }

    #[test]
    fn adamw_without_decay_matches_textbook_adam() {
        // Quadratic toy problem f(w) = sum (w - c)^2.
        let c = [1.5, -2.0, 0.25];
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", ParamGroupTag::Encoder, Tensor::vector(vec![0.0, 0.0, 0.0]))
            .unwrap();
        let hp = Hyperparameters {
            weight_decay: 0.0,
            ..Hyperparameters::default()
        };
        let mut opt = AdamW::new(&hp);

        let (mut w, mut m, mut v) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
        let lr = 0.05;
        for t in 1..=200 {
            let grad: Vec<f64> = (0..3).map(|k| 2.0 * (store.get(id).values()[k] - c[k])).collect();
            let grads = Gradients::from_tensors(&store, vec![(id, Tensor::vector(grad))]).unwrap();
            opt.step(&mut store, &grads, lr);
            for k in 0..3 {
                let g = 2.0 * (w[k] - c[k]);
                m[k] = 0.9 * m[k] + 0.1 * g;
                v[k] = 0.999 * v[k] + 0.001 * g * g;
                let mh = m[k] / (1.0 - 0.9f64.powi(t));
                let vh = v[k] / (1.0 - 0.999f64.powi(t));
                w[k] -= lr * mh / (vh.sqrt() + 1e-8);
            }
            for k in 0..3 {
                assert!((store.get(id).values()[k] - w[k]).abs() <= 1e-12, "step {t}");
            }
        }
    }

    #[test]
    fn adamw_skips_params_without_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamGroupTag::Encoder, Tensor::vector(vec![1.0])).unwrap();
        let b = store.add("b", ParamGroupTag::TypedHead, Tensor::vector(vec![1.0])).unwrap();
        let mut opt = AdamW::new(&Hyperparameters::default());
        let grads = Gradients::from_tensors(&store, vec![(a, Tensor::vector(vec![1.0]))]).unwrap();
        opt.step(&mut store, &grads, 0.1);
        assert_ne!(store.get(a).values()[0], 1.0);
        assert_eq!(store.get(b).values()[0], 1.0);
    }

    #[test]
    fn best_epoch_ties_go_early() {
        assert_eq!(select_best_epoch(&[70.0, 72.0, 72.0, 71.0, 69.0]), Some(2));
        assert_eq!(select_best_epoch(&[50.0]), Some(1));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let c = tiny_corpus();
        let hp = Hyperparameters {
            stage1_epochs: 0,
            ..tiny_hp()
        };
        let t = build_csip_triplets(&c.train, &hp.encoder.tokenizer());
        let ck = stage1_pretrain(&t, &hp, 9).unwrap();
        assert_eq!(ck.model, Model::init_pretraining(&hp.encoder, 9).unwrap());
    }

    #[test]
    fn stage1_is_deterministic_and_checkpoints_round_trip() {
        let c = tiny_corpus();
        let hp = tiny_hp();
        let t = build_csip_triplets(&c.train, &hp.encoder.tokenizer());
        let a = stage1_pretrain(&t, &hp, 3).unwrap();
        let b = stage1_pretrain(&t, &hp, 3).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.model, Model::init_pretraining(&hp.encoder, 3).unwrap());

        let back = Checkpoint::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        let r = &c.test[0];
        assert_eq!(back.model.factor_state(r).unwrap(), a.model.factor_state(r).unwrap());

        let bytes = a.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn single_triplet_is_memorized() {
        let hp = Hyperparameters {
            lr: 5e-2,
            stage1_epochs: 200,
            stage1_batch: 1,
            warmup_ratio: 0.0,
            weight_decay: 0.0,
            encoder: EncoderConfig {
                dropout: 0.0,
                ..tiny_hp().encoder
            },
            ..tiny_hp()
        };
        let rec = Record {
            id: "x".into(),
            superior_text: "上位法规定".into(),
            subordinate_text: "处以十万元以上罚款，本地规定".into(),
            revision_text: Some("依照上位法规定执行，本地规定".into()),
            label: Label::Sanction,
            high_level_laws: vec![],
            url: None,
            title: None,
        };
        let t = build_csip_triplets(std::slice::from_ref(&rec), &hp.encoder.tokenizer());
        // Constant learning rate: a linear decay would stall before convergence.
        let hp_const = Hyperparameters {
            warmup_ratio: 0.0,
            ..hp.clone()
        };
        let ck = stage1_pretrain(&t, &hp_const, 1).unwrap();
        let m = &ck.model;
        let TripletKind::Conflict { target, revised } = &t[0].kind else {
            panic!()
        };
        let typed = m.typed.as_ref().unwrap();
        let mut g = Graph::new(&m.store);
        let hb = m.encoder.encode(&mut g, &t[0].pair, None).unwrap();
        let sb = typed.factor_scores(&mut g, hb, None).unwrap();
        let hg = m.encoder.encode(&mut g, revised, None).unwrap();
        let sg = typed.factor_scores(&mut g, hg, None).unwrap();
        let l = crate::losses::csip_conflict_loss(g.value(sb), g.value(sg), *target, 1.0).unwrap();
        let crate::losses::CsipRecordLoss::Conflict { pos, g: lg, .. } = l else {
            panic!()
        };
        assert!(pos < 0.05 && lg < 0.05, "pos {pos} g {lg}");
    }

    #[test]
    fn v1_drops_typed_group_and_v2_updates_it() {
        let c = tiny_corpus();
        let hp = tiny_hp();
        let t = build_csip_triplets(&c.train, &hp.encoder.tokenizer());
        let ck = stage1_pretrain(&t, &hp, 4).unwrap();

        let v1 = stage2_v1(&ck, &c.train, &c.val, &hp, 4).unwrap();
        assert!(!v1.model.store.has_group(ParamGroupTag::TypedHead));
        assert!(v1.model.store.has_group(ParamGroupTag::FreshHead));
        assert!((1..=2).contains(&v1.best_epoch));
        assert_eq!(v1.val_macro_f1.len(), 2);

        let v2 = stage2_v2(&ck, &c.train, &t, &c.val, &hp, 4).unwrap();
        let typed: Vec<_> = v2.model.store.ids_in_group(ParamGroupTag::TypedHead).collect();
        assert_eq!(typed.len(), 6);
        let w = v2.model.typed.as_ref().unwrap().weight;
        assert_ne!(v2.model.store.get(w), ck.model.store.get(w));
    }

    #[test]
    fn v2_inference_ignores_typed_head() {
        let c = tiny_corpus();
        let hp = tiny_hp();
        let t = build_csip_triplets(&c.train, &hp.encoder.tokenizer());
        let ck = stage1_pretrain(&t, &hp, 6).unwrap();
        let v2 = stage2_v2(&ck, &c.train, &t, &c.val, &hp, 6).unwrap();
        let before = predict_test(&v2.model, &c.test).unwrap();
        let mut zeroed = v2.model.clone();
        for id in zeroed.store.ids_in_group(ParamGroupTag::TypedHead).collect::<Vec<_>>() {
            zeroed.store.get_mut(id).values_mut().fill(0.0);
        }
        assert_eq!(predict_test(&zeroed, &c.test).unwrap(), before);
    }

    #[test]
    fn v2_without_replay_equals_v1() {
        let c = tiny_corpus();
        let hp = Hyperparameters {
            lambda_remain: 0.0,
            ..tiny_hp()
        };
        let t = build_csip_triplets(&c.train, &hp.encoder.tokenizer());
        let ck = stage1_pretrain(&t, &hp, 8).unwrap();
        let v1 = stage2_v1(&ck, &c.train, &c.val, &hp, 8).unwrap();
        let v2 = stage2_v2(&ck, &c.train, &t, &c.val, &hp, 8).unwrap();
        assert_eq!(v1.val_macro_f1, v2.val_macro_f1);
        for id in v1.model.store.ids() {
            let name = v1.model.store.name(id);
            let other = v2.model.store.require(name).unwrap();
            assert_eq!(v1.model.store.get(id), v2.model.store.get(other), "{name}");
        }
        // The typed head took no step at all.
        for id in ck.model.store.ids_in_group(ParamGroupTag::TypedHead) {
            let name = ck.model.store.name(id);
            let other = v2.model.store.require(name).unwrap();
            assert_eq!(ck.model.store.get(id), v2.model.store.get(other));
        }
    }

    #[test]
    fn replay_order_does_not_touch_fine_tuning_batches() {
        let c = tiny_corpus();
        let hp = tiny_hp();
        let t = build_csip_triplets(&c.train, &hp.encoder.tokenizer());
        let ck = stage1_pretrain(&t, &hp, 2).unwrap();
        let mut reversed = t.clone();
        reversed.reverse();
        let a = stage2_v2(&ck, &c.train, &t, &c.val, &hp, 2).unwrap();
        let b = stage2_v2(&ck, &c.train, &reversed, &c.val, &hp, 2).unwrap();
        // Different replay batches change the weights...
        assert_ne!(a.model.store, b.model.store);
        // ...while the fine-tuning stream is untouched.
        let mut s1 = StreamRng::stream(2, streams::FT_SHUFFLE);
        let mut s2 = StreamRng::stream(2, streams::FT_SHUFFLE);
        assert_eq!(s1.permutation(c.train.len()), s2.permutation(c.train.len()));
    }

    #[test]
    fn baseline_never_reads_revisions() {
        let c = tiny_corpus();
        let hp = tiny_hp();
        let a = train_baseline_c2(&c.train, &c.val, &hp, 1).unwrap();
        let stripped: Vec<Record> = c
            .train
            .iter()
            .map(|r| Record {
                revision_text: None,
                ..r.clone()
            })
            .collect();
        let b = train_baseline_c2(&stripped, &c.val, &hp, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.model.baseline.is_some() && a.model.typed.is_none());
    }

    #[test]
    fn prediction_rows_follow_test_order() {
        let c = tiny_corpus();
        let hp = tiny_hp();
        let out = train_baseline_c2(&c.train, &c.val, &hp, 1).unwrap();
        let rows = predict_test(&out.model, &c.test).unwrap();
        assert_eq!(rows.len(), c.test.len());
        for (row, r) in rows.iter().zip(&c.test) {
            assert_eq!(row.id, r.id);
            assert_eq!(row.gold, r.label.index());
        }
    }

    #[test]
    fn cell_names_parse() {
        for c in Cell::ALL {
            assert_eq!(c.name().parse::<Cell>().unwrap(), c);
        }
        assert!("v3".parse::<Cell>().is_err());
    }
}
