use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use typedcsip::data::{
    build_csip_triplets, duplicate_ids, generate_synthetic_corpus, ingest_split, label_counts, CorpusConfig, Label,
    Record, SkipReport,
};
use typedcsip::orchestrator::{run_campaign, validate_prediction_file, CampaignPlan, PredictionFile, TrainingExecutor};
use typedcsip::stats::{
    analyze, derive_seeds, matched_seed_compare, per_class_deltas, per_seed_deltas, BootstrapParams, DecisionRule,
    SeedDeltaSeries,
};
use typedcsip::stratify::{
    export_strata, overlap_audit, partition_seen_unseen, partition_super, per_class_stratum_delta,
    stratified_deltas, unique_superiors, Stratification, SUPER_UNSEEN, UNSEEN_GB,
};
use typedcsip::training::{
    prediction_file, stage1_pretrain, stage2_v1, stage2_v2, train_baseline_c2, Cell, Checkpoint, FinetuneOutcome,
    Hyperparameters, Provenance,
};
use typedcsip::Error;

use crate::args::*;
use crate::Failure;

type CmdResult = Result<(), Failure>;

pub const OUTPUT_ROOT_VAR: &str = "TYPEDCSIP_OUTPUT_ROOT";

pub fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::IngestAudit(a) => ingest_audit(a),
        Command::DeriveSeeds(a) => derive(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Stratify(a) => stratify(a),
        Command::MatchedCompare(a) => matched_compare(a),
        Command::Orchestrate(a) => orchestrate(a),
        Command::ValidatePreds(a) => validate_preds(a),
    }
}

/// Resolves a relative output path against the output root, if one is set.
fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn domain(msg: impl Into<String>) -> Failure {
    Failure::Domain(msg.into())
}

fn write_out(path: &Path, text: &str) -> CmdResult {
    let path = out_path(path);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| domain(format!("{}: {e}", dir.display())))?;
    }
    fs::write(&path, text).map_err(|e| domain(format!("{}: {e}", path.display())))
}

fn load_split(dir: &Path, name: &str) -> Result<(Vec<Record>, SkipReport), Failure> {
    Ok(ingest_split(&dir.join(format!("{name}.jsonl")))?)
}

fn load_records(dir: &Path, name: &str) -> Result<Vec<Record>, Failure> {
    let (records, skip) = load_split(dir, name)?;
    if skip.decode + skip.label > 0 {
        eprintln!(
            "{name}: skipped {} undecodable and {} unlabeled lines",
            skip.decode, skip.label
        );
    }
    Ok(records)
}

/// Files as given; directories contribute their `*.jsonl` files,
/// recursively, in path order.
fn expand(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| domain(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for e in entries {
                if e.is_dir() {
                    out.extend(expand(std::slice::from_ref(&e))?);
                } else if e.extension().is_some_and(|x| x == "jsonl") {
                    out.push(e);
                }
            }
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn read_predictions(paths: &[PathBuf]) -> Result<Vec<PredictionFile>, Failure> {
    let files = expand(paths)?;
    if files.is_empty() {
        return Err(domain("no prediction files found"));
    }
    files
        .iter()
        .map(|p| {
            let f = PredictionFile::read(p)?;
            validate_prediction_file(&f, None).map_err(|v| Failure::Aborted(format!("{}: {v}", p.display())))?;
            Ok(f)
        })
        .collect()
}

fn stat_params(s: &StatArgs) -> (BootstrapParams, DecisionRule) {
    (
        BootstrapParams {
            rounds: s.rounds,
            rng_seed: s.rng_seed,
            level: s.level,
        },
        DecisionRule {
            min_mean: s.min_mean,
            strong_mean: s.strong_mean,
        },
    )
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = if a.desk {
        CorpusConfig::desk(a.seed)
    } else {
        CorpusConfig::benchmark_scale(a.seed)
    };
    let corpus = generate_synthetic_corpus(&cfg)?;
    let out = out_path(&a.out);
    corpus.write(&out)?;
    println!(
        "wrote {} / {} / {} records to {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn counts_line(records: &[Record]) -> String {
    let c = label_counts(records);
    (0..c.len())
        .map(|i| format!("{}={}", Label::from_index(i).map_or("?", Label::name), c[i]))
        .collect::<Vec<_>>()
        .join(" ")
}

fn ingest_audit(a: IngestAuditArgs) -> CmdResult {
    let mut splits = Vec::new();
    let mut text = String::new();
    let _ = writeln!(text, "{:<6} {:>6} {:>6} {:>7} {:>6}  classes", "split", "lines", "kept", "decode", "label");
    for name in ["train", "val", "test"] {
        let (records, skip) = load_split(&a.data, name)?;
        let _ = writeln!(
            text,
            "{name:<6} {:>6} {:>6} {:>7} {:>6}  {}",
            skip.lines,
            skip.kept,
            skip.decode,
            skip.label,
            counts_line(&records)
        );
        let dups = duplicate_ids(&records);
        if !dups.is_empty() {
            let _ = writeln!(text, "  {} duplicate ids in {name}", dups.len());
        }
        splits.push((name, records, skip, dups));
    }
    let (train, val, test) = (&splits[0].1, &splits[1].1, &splits[2].1);
    let gb = partition_seen_unseen(train, test);
    let sp = partition_super(train, test);
    let superiors = unique_superiors(train);
    let _ = writeln!(text, "unique train superiors {superiors}");
    for s in [&gb, &sp] {
        let sizes: Vec<String> = s.strata.iter().zip(s.sizes()).map(|(n, k)| format!("{n}={k}")).collect();
        let _ = writeln!(text, "strata {}", sizes.join(" "));
    }
    let overlap = overlap_audit(train, val, test);
    let _ = writeln!(
        text,
        "{:<8} {:>17} {:>17} {:>17}",
        "key", "train/val", "train/test", "val/test"
    );
    for r in &overlap {
        let cell = |c: &typedcsip::stratify::OverlapCount| format!("{} ({}/{})", c.distinct, c.affected_first, c.affected_second);
        let _ = writeln!(
            text,
            "{:<8} {:>17} {:>17} {:>17}",
            r.key,
            cell(&r.train_val),
            cell(&r.train_test),
            cell(&r.val_test)
        );
    }
    print!("{text}");
    if let Some(path) = &a.json {
        let splits_json: Vec<_> = splits
            .iter()
            .map(|(name, records, skip, dups)| {
                json!({ "split": name, "skips": skip, "class_counts": label_counts(records), "duplicate_ids": dups })
            })
            .collect();
        let doc = json!({
            "splits": splits_json,
            "unique_train_superiors": superiors,
            "seen_unseen": { "strata": gb.strata, "sizes": gb.sizes() },
            "super": { "strata": sp.strata, "sizes": sp.sizes() },
            "overlap": overlap,
        });
        write_out(path, &to_json(&doc))?;
    }
    Ok(())
}

fn derive(a: DeriveSeedsArgs) -> CmdResult {
    if a.pool_end <= a.pool_start {
        return Err(domain("--pool-end must exceed --pool-start"));
    }
    let pool: Vec<u64> = (a.pool_start..a.pool_end).collect();
    let seeds = derive_seeds(&a.hex, a.primary, a.backup, &a.banned, &pool)?;
    println!("{}", to_json(&seeds));
    Ok(())
}

fn save_finetuned(out: &Path, cell: Cell, seed: u64, outcome: &FinetuneOutcome) -> Result<PathBuf, Failure> {
    let path = out.join(cell.name()).join(format!("seed-{seed}.ckpt"));
    let ckpt = Checkpoint {
        provenance: Provenance {
            stage: format!("stage2-{cell}"),
            seed,
            epoch: outcome.best_epoch,
        },
        model: outcome.model.clone(),
    };
    ckpt.save(&path)?;
    Ok(path)
}

fn train(a: TrainArgs) -> CmdResult {
    let hp = a.hp.resolve();
    hp.validate()?;
    let out = out_path(&a.out);
    let train = load_records(&a.data, "train")?;
    let val = load_records(&a.data, "val")?;
    let stage1_path = out.join("stage1").join(format!("seed-{}.ckpt", a.seed));
    let outcome = match (a.cell, a.stage) {
        (Cell::C2, TrainStage::Pretrain) => return Err(domain("c2 has no pretraining stage")),
        (Cell::C2, _) => {
            if a.checkpoint.is_some() {
                return Err(domain("c2 trains from scratch and takes no checkpoint"));
            }
            train_baseline_c2(&train, &val, &hp, a.seed)?
        }
        (cell, stage) => {
            let triplets = build_csip_triplets(&train, &hp.encoder.tokenizer());
            let ckpt = match (stage, &a.checkpoint) {
                (TrainStage::Finetune, Some(p)) => Checkpoint::load(p)?,
                (TrainStage::Finetune, None) => return Err(domain("--stage finetune needs --checkpoint")),
                (_, Some(_)) => return Err(domain("--checkpoint is only read by --stage finetune")),
                (_, None) => {
                    let ck = stage1_pretrain(&triplets, &hp, a.seed)?;
                    ck.save(&stage1_path)?;
                    println!("stage 1 checkpoint {}", stage1_path.display());
                    ck
                }
            };
            if stage == TrainStage::Pretrain {
                return Ok(());
            }
            if cell == Cell::V1 {
                stage2_v1(&ckpt, &train, &val, &hp, a.seed)?
            } else {
                stage2_v2(&ckpt, &train, &triplets, &val, &hp, a.seed)?
            }
        }
    };
    for (i, f1) in outcome.val_macro_f1.iter().enumerate() {
        println!("epoch {} val macro-F1 {f1:.2}", i + 1);
    }
    println!("best epoch {}", outcome.best_epoch);
    let ckpt_path = save_finetuned(&out, a.cell, a.seed, &outcome)?;
    let test = load_records(&a.data, "test")?;
    let preds = prediction_file(&outcome.model, &test, a.cell, &a.backbone, a.seed, &hp)?;
    let pred_path = out.join(a.cell.name()).join(format!("seed-{}.jsonl", a.seed));
    preds.write(&pred_path)?;
    println!("checkpoint {}", ckpt_path.display());
    println!("predictions {}", pred_path.display());
    Ok(())
}

fn predict(a: PredictArgs) -> CmdResult {
    let hp = a.hp.resolve();
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let test = load_records(&a.data, "test")?;
    let preds = prediction_file(&ckpt.model, &test, a.cell, &a.backbone, ckpt.provenance.seed, &hp)?;
    let out = out_path(&a.out);
    preds.write(&out)?;
    println!("wrote {} predictions to {}", preds.rows.len(), out.display());
    Ok(())
}

fn read_table(path: &Path) -> Result<SeedDeltaSeries, Failure> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| domain(format!("{}: {e}", path.display())))?;
    let mut pairs = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| domain(format!("{}: {e}", path.display())))?;
        let field = |k: usize| row.get(k).unwrap_or("");
        let Ok(seed) = field(0).parse::<u64>() else {
            if i == 0 {
                continue; // header
            }
            return Err(domain(format!("{} line {}: bad seed {:?}", path.display(), i + 1, field(0))));
        };
        let num = |k: usize| {
            field(k)
                .parse::<f64>()
                .map_err(|_| domain(format!("{} line {}: bad number {:?}", path.display(), i + 1, field(k))))
        };
        pairs.push((seed, num(1)?, num(2)?));
    }
    Ok(SeedDeltaSeries::from_pairs(pairs)?)
}

fn analyze_cmd(a: AnalyzeArgs) -> CmdResult {
    let (params, rule) = stat_params(&a.stats);
    let (series, files) = match &a.table {
        Some(t) => (read_table(t)?, None),
        None => {
            let m = read_predictions(&a.method)?;
            let b = read_predictions(&a.baseline)?;
            (per_seed_deltas(&m, &b)?, Some((m, b)))
        }
    };
    let report = analyze(&a.method_name, &a.baseline_name, &series, &params, &rule)?;
    print!("{}", report.to_text());
    let mut doc = serde_json::to_value(&report).expect("report serializes");
    if a.per_class {
        let Some((m, b)) = &files else {
            return Err(domain("--per-class needs prediction files"));
        };
        let per_class = per_class_deltas(m, b, params.level)?;
        println!("{:<16} {:>8} {:>18}", "class", "mean", "t interval");
        for d in &per_class {
            let name = Label::from_index(d.class).map_or("?", Label::name);
            println!("{name:<16} {:>+8.3} [{:>+7.3}, {:>+7.3}]", d.mean, d.t_lo, d.t_hi);
        }
        doc["per_class"] = serde_json::to_value(&per_class).expect("serializes");
    }
    if let Some(path) = &a.json {
        write_out(path, &to_json(&doc))?;
    }
    Ok(())
}

fn stratify(a: StratifyArgs) -> CmdResult {
    let (params, rule) = stat_params(&a.stats);
    let train = load_records(&a.data, "train")?;
    let test = load_records(&a.data, "test")?;
    let m = read_predictions(&a.pair.method)?;
    let b = read_predictions(&a.pair.baseline)?;
    let (mname, bname) = (m[0].header.cell.clone(), b[0].header.cell.clone());
    let partitions: [(&str, Stratification, &str); 2] = [
        ("gB", partition_seen_unseen(&train, &test), UNSEEN_GB),
        ("superior", partition_super(&train, &test), SUPER_UNSEEN),
    ];
    let mut doc = Vec::new();
    for (label, strat, unseen) in &partitions {
        println!("== {label} partition");
        let analyses = stratified_deltas(&mname, &bname, &m, &b, strat, &params, &rule)?;
        for s in &analyses {
            match &s.report {
                Some(r) => print!("-- {} (n = {})\n{}", s.stratum, s.n, r.to_text()),
                None => println!("-- {} (n = {}): too few records for an analysis", s.stratum, s.n),
            }
        }
        let per_class = per_class_stratum_delta(&m, &b, strat, unseen, params.level)?;
        println!("-- per-class deltas in {unseen}");
        for (d, n) in per_class.deltas.iter().zip(per_class.class_counts) {
            let name = Label::from_index(d.class).map_or("?", Label::name);
            println!("{name:<16} n={n:<5} {:>+8.3} [{:>+7.3}, {:>+7.3}]", d.mean, d.t_lo, d.t_hi);
        }
        doc.push(json!({ "partition": label, "strata": analyses, "per_class": per_class }));
    }
    if let Some(path) = &a.export {
        write_out(path, &to_json(&export_strata(&train, &test)))?;
    }
    if let Some(path) = &a.json {
        write_out(path, &to_json(&doc))?;
    }
    Ok(())
}

fn matched_compare(a: MatchedCompareArgs) -> CmdResult {
    let (params, _) = stat_params(&a.stats);
    let sa = per_seed_deltas(&read_predictions(&a.a_method)?, &read_predictions(&a.a_baseline)?)?;
    let sb = per_seed_deltas(&read_predictions(&a.b_method)?, &read_predictions(&a.b_baseline)?)?;
    let summary = matched_seed_compare(&a.a_name, &sa, &a.b_name, &sb, &params)?;
    print!("{}", summary.to_text());
    if let Some(path) = &a.json {
        write_out(path, &summary.to_json())?;
    }
    Ok(())
}

fn default_plan(a: &OrchestrateArgs, hp: Hyperparameters) -> CampaignPlan {
    CampaignPlan::single_stage(
        "main",
        &a.backbone,
        hp,
        Cell::ALL.to_vec(),
        Cell::V2,
        a.seeds.clone(),
        a.backups.clone(),
    )
}

fn orchestrate(a: OrchestrateArgs) -> CmdResult {
    let plan = match &a.plan {
        Some(p) => CampaignPlan::load(p)?,
        None => default_plan(&a, a.hp.resolve()),
    };
    plan.validate()?;
    let mut exec = TrainingExecutor::new(
        load_records(&a.data, "train")?,
        load_records(&a.data, "val")?,
        load_records(&a.data, "test")?,
    );
    let out = out_path(&a.out);
    let stdout = std::io::stdout();
    let mut operator = stdout.lock();
    let report = run_campaign(&plan, &mut exec, &out, &mut operator)?;
    let _ = writeln!(operator, "{}", report.to_text());
    match report.outcome {
        typedcsip::orchestrator::CampaignOutcome::Aborted { reason } => Err(Failure::Aborted(reason)),
        typedcsip::orchestrator::CampaignOutcome::Completed => Ok(()),
    }
}

fn validate_preds(a: ValidatePredsArgs) -> CmdResult {
    let reference = a.reference.as_deref().map(PredictionFile::read).transpose()?;
    let gold = reference.as_ref().map(PredictionFile::gold);
    let files = expand(&a.files)?;
    if files.is_empty() {
        return Err(domain("no prediction files found"));
    }
    let mut failures = 0;
    for p in &files {
        let checked = PredictionFile::read(p).and_then(|f| {
            validate_prediction_file(&f, gold.as_deref())?;
            Ok(f)
        });
        match checked {
            Ok(f) => println!("ok {} ({} rows, seed {})", p.display(), f.rows.len(), f.header.seed),
            Err(Error::Aborted(v)) => {
                failures += 1;
                println!("invalid {}: {v}", p.display());
            }
            Err(e) => return Err(e.into()),
        }
    }
    if failures > 0 {
        return Err(Failure::Aborted(format!("{failures} of {} files failed validation", files.len())));
    }
    Ok(())
}
