mod common;

use std::fs;
use std::path::Path;

use typedcsip::orchestrator::{
    read_state_log, redact_metrics, run_campaign, CampaignOutcome, CampaignPlan, CampaignReport, Event, Fault,
    RunState, RunStatus, SimulatedExecutor,
};
use typedcsip::stats::BootstrapParams;
use typedcsip::training::{Cell, Hyperparameters};

const PRIMARY: [u64; 6] = [11, 22, 33, 44, 55, 66];
const BACKUP: [u64; 3] = [901, 902, 903];

fn plan() -> CampaignPlan {
    let mut p = CampaignPlan::two_stage(
        Hyperparameters::desk(),
        Hyperparameters::desk(),
        PRIMARY.to_vec(),
        BACKUP.to_vec(),
    );
    p.bootstrap = BootstrapParams {
        rounds: 2000,
        ..Default::default()
    };
    p
}

fn gold() -> Vec<usize> {
    (0..200).map(|i| i % 5).collect()
}

/// v2 clearly better than C2 on stage A, so the gate passes.
fn passing() -> SimulatedExecutor {
    SimulatedExecutor::new(gold(), 0.30)
        .with_error_rate("A", Cell::V1, 0.20)
        .with_error_rate("A", Cell::V2, 0.12)
        .with_error_rate("B", Cell::V2, 0.15)
}

/// v2 no better than C2, so the gate fails.
fn failing() -> SimulatedExecutor {
    SimulatedExecutor::new(gold(), 0.30)
}

fn run(exec: &mut SimulatedExecutor, dir: &Path) -> CampaignReport {
    let mut sink = Vec::new();
    run_campaign(&plan(), exec, dir, &mut sink).unwrap()
}

fn events(dir: &Path) -> Vec<Event> {
    read_state_log(&dir.join("state.log"))
        .unwrap()
        .into_iter()
        .map(|r| r.event)
        .collect()
}

#[test]
fn clean_campaign_runs_every_seed_and_launches_stage_b() {
    let dir = tempfile::tempdir().unwrap();
    let mut exec = passing();
    let r = run(&mut exec, dir.path());
    assert_eq!(r.outcome, CampaignOutcome::Completed);
    assert!(!r.family_closed);
    assert_eq!(exec.calls.len(), PRIMARY.len() * 5);
    for st in &r.stages {
        assert!(st.executed);
        assert!(st.valid_runs.values().all(|&n| n == PRIMARY.len()));
        assert_eq!(st.seeds, PRIMARY.to_vec());
    }
    assert!(r.stages[0].verdict.unwrap().c1_pass);
    assert!(r.stages[0].matched_v2_v1.is_some());
    for cell in ["c2", "v1", "v2"] {
        let n = fs::read_dir(dir.path().join("predictions/A").join(cell)).unwrap().count();
        assert_eq!(n, PRIMARY.len());
    }
}

#[test]
fn failing_gate_closes_the_family() {
    let dir = tempfile::tempdir().unwrap();
    let mut exec = failing();
    let r = run(&mut exec, dir.path());
    assert_eq!(r.outcome, CampaignOutcome::Completed);
    assert!(r.family_closed);
    assert!(!r.stages[0].verdict.unwrap().c1_pass);
    assert!(!r.stages[1].executed);
    assert!(exec.calls.iter().all(|c| c.0 == "A"));
    assert!(events(dir.path()).contains(&Event::StageSkipped { stage: "B".into() }));
}

#[test]
fn gate_reads_only_the_primary_verdict() {
    for mut exec in [passing(), failing()] {
        let dir = tempfile::tempdir().unwrap();
        run(&mut exec, dir.path());
        let ev = events(dir.path());
        let gate = ev
            .iter()
            .position(|e| matches!(e, Event::GateDecided { .. }))
            .unwrap();
        let before: Vec<_> = ev[..gate]
            .iter()
            .filter(|e| matches!(e, Event::AnalysisComputed { .. }))
            .collect();
        assert_eq!(
            before,
            vec![&Event::AnalysisComputed {
                stage: "A".into(),
                method: Cell::V2,
                baseline: Cell::C2
            }]
        );
        // The primary comparison is evaluated exactly once.
        let primary = ev
            .iter()
            .filter(|e| {
                matches!(e, Event::AnalysisComputed { stage, method: Cell::V2, .. } if stage == "A")
            })
            .count();
        assert_eq!(primary, 1);
    }
}

#[test]
fn training_failure_substitutes_the_next_backup_for_the_whole_slot() {
    let dir = tempfile::tempdir().unwrap();
    let mut exec = passing().with_faults("A", Cell::V1, 33, [Fault::Fail("loss became NaN at step 412".into())]);
    let r = run(&mut exec, dir.path());
    assert_eq!(r.outcome, CampaignOutcome::Completed);
    assert_eq!(r.substitutions.len(), 1);
    let s = &r.substitutions[0];
    assert_eq!((s.slot, s.old_seed, s.new_seed, s.failed_cell), (2, 33, 901, Cell::V1));
    assert_eq!(r.stages[0].seeds, vec![11, 22, 901, 44, 55, 66]);
    assert!(r.stages[0].valid_runs.values().all(|&n| n == PRIMARY.len()));
    // The slot reran from scratch on the backup, C2 included.
    let slot: Vec<_> = exec
        .calls
        .iter()
        .filter(|c| c.0 == "A" && (c.2 == 33 || c.2 == 901))
        .map(|c| (c.1, c.2))
        .collect();
    assert_eq!(
        slot,
        vec![(Cell::C2, 33), (Cell::V1, 33), (Cell::C2, 901), (Cell::V1, 901), (Cell::V2, 901)]
    );
    // The failed seed's outputs are quarantined, not mixed into the analysis.
    assert!(!dir.path().join("predictions/A/c2/seed-33.jsonl").exists());
    assert!(dir.path().join("quarantine/A/slot-2-seed-33/c2-predictions.jsonl").exists());
    let a = &r.stages[0].analyses[0];
    assert!(a.rows.iter().any(|row| row.seed == 901));
    assert!(a.rows.iter().all(|row| row.seed != 33));
}

#[test]
fn backups_are_never_reused() {
    let dir = tempfile::tempdir().unwrap();
    let nan = || Fault::Fail("loss became non-finite at step 3".into());
    let mut exec = passing()
        .with_faults("A", Cell::C2, 11, [nan()])
        .with_faults("A", Cell::V2, 901, [nan()])
        .with_faults("A", Cell::V1, 55, [nan()]);
    let r = run(&mut exec, dir.path());
    assert_eq!(r.outcome, CampaignOutcome::Completed);
    let used: Vec<_> = r.substitutions.iter().map(|s| s.new_seed).collect();
    assert_eq!(used, vec![901, 902, 903]);
    assert_eq!(r.stages[0].seeds, vec![902, 22, 33, 44, 903, 66]);
}

#[test]
fn exhausted_backup_pool_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let nan = || Fault::Fail("loss became non-finite".into());
    let mut exec = passing()
        .with_faults("A", Cell::C2, 11, [nan()])
        .with_faults("A", Cell::C2, 901, [nan()])
        .with_faults("A", Cell::C2, 902, [nan()])
        .with_faults("A", Cell::C2, 903, [nan()]);
    let r = run(&mut exec, dir.path());
    assert!(matches!(r.outcome, CampaignOutcome::Aborted { ref reason } if reason.contains("backup")));
}

#[test]
fn three_infra_failures_abort_after_two_retries() {
    let dir = tempfile::tempdir().unwrap();
    let oom = || Fault::Fail("RuntimeError: CUDA out of memory".into());
    let mut exec = passing().with_faults("A", Cell::V2, 44, [oom(), oom(), oom()]);
    let r = run(&mut exec, dir.path());
    assert!(matches!(r.outcome, CampaignOutcome::Aborted { .. }));
    let attempts: Vec<_> = exec
        .calls
        .iter()
        .filter(|c| c.1 == Cell::V2 && c.2 == 44)
        .map(|c| c.3)
        .collect();
    assert_eq!(attempts, vec![1, 2, 3]);
    assert!(r.substitutions.is_empty());
    assert_eq!(exec.calls.last().unwrap().2, 44);
    let state = RunState::replay(&plan(), &events(dir.path()));
    assert_eq!(state.runs[&("A".to_owned(), 3, Cell::V2)].status, RunStatus::Failed);
    assert!(state.aborted.is_some());
}

#[test]
fn two_infra_failures_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let lost = || Fault::Fail("ssh: connect to host gpu: No route to host".into());
    let mut exec = passing().with_faults("A", Cell::C2, 22, [lost(), lost()]);
    let r = run(&mut exec, dir.path());
    assert_eq!(r.outcome, CampaignOutcome::Completed);
    assert_eq!(r.infra_retries, 2);
    assert!(r.substitutions.is_empty());
    assert_eq!(r.stages[0].seeds, PRIMARY.to_vec());
}

#[test]
fn invalid_prediction_files_abort() {
    for (fault, needle) in [(Fault::TruncatedFile, "rows"), (Fault::GoldFlip, "gold")] {
        let dir = tempfile::tempdir().unwrap();
        let mut exec = passing().with_faults("A", Cell::V1, 22, [fault]);
        let r = run(&mut exec, dir.path());
        match r.outcome {
            CampaignOutcome::Aborted { reason } => assert!(reason.contains(needle), "{reason}"),
            other => panic!("expected abort, got {other:?}"),
        }
    }
}

#[test]
fn replaying_the_log_rebuilds_the_state() {
    let dir = tempfile::tempdir().unwrap();
    let mut exec = passing()
        .with_faults("A", Cell::V1, 33, [Fault::Fail("loss became NaN".into())])
        .with_faults("B", Cell::V2, 11, [Fault::Fail("NCCL error".into())]);
    let r = run(&mut exec, dir.path());
    let ev = events(dir.path());
    let state = RunState::replay(&plan(), &ev);
    assert!(state.completed);
    assert_eq!(state.used_backups.iter().copied().collect::<Vec<_>>(), vec![901]);
    for st in &r.stages {
        for (slot, &seed) in st.seeds.iter().enumerate() {
            for cell in plan().stage(&st.name).unwrap().cells.clone() {
                let e = &state.runs[&(st.name.clone(), slot, cell)];
                assert_eq!((e.seed, e.status), (seed, RunStatus::Done));
            }
        }
    }
    // Replaying any prefix and then the suffix gives the same state.
    let mid = ev.len() / 2;
    let mut s = RunState::replay(&plan(), &ev[..mid]);
    for e in &ev[mid..] {
        s.apply(e);
    }
    assert_eq!(s, state);
    // Sequence numbers are contiguous.
    let recs = read_state_log(&dir.path().join("state.log")).unwrap();
    assert!(recs.iter().enumerate().all(|(i, r)| r.seq == i as u64 + 1));
}

#[test]
fn operator_stream_carries_no_metric_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut exec = passing();
    let mut sink = Vec::new();
    run_campaign(&plan(), &mut exec, dir.path(), &mut sink).unwrap();
    let op = String::from_utf8(sink).unwrap();
    assert_eq!(op, fs::read_to_string(dir.path().join("operator.log")).unwrap());
    assert!(op.contains("macro_f1=[REDACTED]"));
    let decimal = regex::Regex::new(r"\d\.\d").unwrap();
    assert!(!decimal.is_match(&op));
    let sealed = fs::read_to_string(dir.path().join("sealed/A/v2/seed-11-attempt-1.log")).unwrap();
    assert!(decimal.is_match(&sealed));
}

#[test]
fn output_directory_cannot_be_reused() {
    let dir = tempfile::tempdir().unwrap();
    run(&mut passing(), dir.path());
    let mut sink = Vec::new();
    assert!(run_campaign(&plan(), &mut passing(), dir.path(), &mut sink).is_err());
}

#[test]
fn plan_round_trips_and_validates() {
    let p = plan();
    assert_eq!(CampaignPlan::from_json(&p.to_json()).unwrap(), p);
    let mut bad = p.clone();
    bad.backup_seeds.push(11);
    assert!(bad.validate().is_err());
    let mut bad = p.clone();
    bad.stages[1].gate = Some("Z".into());
    assert!(bad.validate().is_err());
}

#[test]
fn redaction_fuzz_leaks_nothing() {
    let lines = common::planted_metric_lines(10_000, 77);
    let mut leaks = 0;
    for l in &lines {
        let out = redact_metrics(&l.line);
        assert_eq!(out, l.expected, "input {:?}", l.line);
        if out.contains('.') && l.values.iter().any(|v| out.contains(v.as_str())) {
            leaks += 1;
        }
    }
    assert_eq!(leaks, 0);
}
