//! Campaigns end to end: built-in worker determinism, external engine
//! adapter, and hit rates on a hand-labeled queue.

mod common;

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use dgf_core::campaign::{
    compute_hit_rate, run_campaign, Ablation, CampaignConfig, CampaignError, CampaignResult, EngineKind,
    ExternalEngine, QueueEntry,
};
use dgf_core::engine::StopReason;
use dgf_core::harness::HarnessArtifact;
use dgf_core::trace::{ExecLimits, SymbolMap};

fn config(h: &HarnessArtifact, out: &Path, rng_seed: u64) -> CampaignConfig {
    CampaignConfig {
        traced_binary: h.binary.clone(),
        fast_binary: h.fast_binary.clone(),
        target: "handle_record".into(),
        seed: None,
        mutator: None,
        budget_secs: 60.0,
        engine: EngineKind::Builtin(common::worker()),
        rng_seed,
        ablation: Ablation::HARNESS_ONLY,
        stop_on_exploit: false,
        max_execs: Some(400),
        exec_limits: ExecLimits::default(),
        out_dir: out.to_path_buf(),
    }
}

fn queue_bytes(r: &CampaignResult, dir: &Path) -> Vec<Vec<u8>> {
    r.queue.iter().map(|e| std::fs::read(dir.join("queue").join(&e.file)).unwrap()).collect()
}

#[test]
fn builtin_campaign_is_deterministic_per_rng_seed() {
    let dir = tempfile::tempdir().unwrap();
    let h = common::magic_gate(&dir.path().join("h"));
    let a_dir = dir.path().join("a");
    let b_dir = dir.path().join("b");
    let a = run_campaign(&config(&h, &a_dir, 11), 0.0).unwrap();
    let b = run_campaign(&config(&h, &b_dir, 11), 0.0).unwrap();
    assert_eq!(a.stop_reason, StopReason::MaxExecs);
    assert_eq!(a.execs, 400);
    assert_eq!(a.execs, b.execs);
    assert_eq!(queue_bytes(&a, &a_dir), queue_bytes(&b, &b_dir));
    assert_eq!(a.queue.iter().map(|e| e.hits_target).collect::<Vec<_>>(), b.queue.iter().map(|e| e.hits_target).collect::<Vec<_>>());
    a.check_invariants().unwrap();
    // The engine-default seed cannot pass the magic check.
    assert!(a.ttr.is_none() && a.tte.is_none());
}

#[test]
fn reachable_seed_gives_immediate_ttr() {
    let dir = tempfile::tempdir().unwrap();
    let h = common::magic_gate(&dir.path().join("h"));
    let mut cfg = config(&h, &dir.path().join("c"), 1);
    cfg.ablation = Ablation::WITHOUT_MUTATOR;
    cfg.seed = Some(common::gate_record(4, 4));
    cfg.max_execs = Some(50);
    let r = run_campaign(&cfg, 0.25).unwrap();
    assert_eq!(r.queue[0].hits_target, Some(true));
    assert!(r.ttr.unwrap() < 5.0);
    assert_eq!(r.ts, 0.25);
    r.check_invariants().unwrap();
}

#[test]
fn zero_budget_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let h = common::magic_gate(&dir.path().join("h"));
    let mut cfg = config(&h, &dir.path().join("c"), 1);
    cfg.budget_secs = 0.0;
    assert!(matches!(run_campaign(&cfg, 0.0), Err(CampaignError::BudgetZero)));
}

/// Fake engine: copies the seed into `default/queue`, drops the trigger into
/// `default/crashes` a moment later, then idles until it is stopped.
const FAKE_ENGINE: &str = r#"
import os, shutil, sys, time
inp, out = sys.argv[1], sys.argv[2]
q = os.path.join(out, "default", "queue"); c = os.path.join(out, "default", "crashes")
os.makedirs(q); os.makedirs(c)
seed = sorted(os.listdir(inp))[0]
shutil.copy(os.path.join(inp, seed), os.path.join(q, "id:000000,orig:seed"))
time.sleep(0.3)
with open(os.path.join(c, "id:000000,sig:11"), "wb") as f:
    f.write(b"MGK1" + (128).to_bytes(4, "little") + b"A" * 128)
time.sleep(60)
"#;

#[test]
fn external_engine_output_is_polled_and_replayed() {
    let dir = tempfile::tempdir().unwrap();
    let h = common::magic_gate(&dir.path().join("h"));
    let mut cfg = config(&h, &dir.path().join("c"), 1);
    cfg.ablation = Ablation::FULL;
    cfg.seed = Some(common::gate_record(4, 4));
    cfg.stop_on_exploit = true;
    cfg.budget_secs = 20.0;
    cfg.engine = EngineKind::External(ExternalEngine {
        command: ["python3", "-c", FAKE_ENGINE, "{input_dir}", "{output_dir}"].map(String::from).to_vec(),
        env: BTreeMap::new(),
        poll_interval_ms: 100,
    });
    let r = run_campaign(&cfg, 0.0).unwrap();
    assert_eq!(r.stop_reason, StopReason::Exploit);
    assert_eq!(r.queue.len(), 1);
    assert_eq!(r.queue[0].hits_target, Some(true));
    assert_eq!(r.crashes.len(), 1);
    assert!(r.crashes[0].on_target);
    assert!(r.crashes[0].signature.starts_with("SIGSEGV@"));
    assert!(r.tte.is_some() && r.elapsed < 15.0);
    assert!(dir.path().join("c/crashes").join(&r.crashes[0].file).is_file());
    r.check_invariants().unwrap();
}

#[derive(Deserialize)]
struct Label {
    file: String,
    hits: bool,
}

#[derive(Deserialize)]
struct Labels {
    entry: Vec<Label>,
}

#[test]
fn hit_rate_matches_the_hand_labels() {
    let dir = tempfile::tempdir().unwrap();
    let h = common::magic_gate(&dir.path().join("h"));
    let fixture = common::fixture("hitrate/magic_gate");
    let labels: Labels = toml::from_str(&std::fs::read_to_string(fixture.join("labels.toml")).unwrap()).unwrap();
    let mut queue: Vec<QueueEntry> = labels
        .entry
        .iter()
        .enumerate()
        .map(|(i, l)| QueueEntry { id: i as u64, file: l.file.clone(), discovered_at: i as f64, hits_target: None })
        .collect();
    let symbols = SymbolMap::from_binary(&h.binary).unwrap();
    let rate = compute_hit_rate(&mut queue, &fixture.join("queue"), &h.binary, &symbols, "handle_record", ExecLimits::default()).unwrap();
    let hand = labels.entry.iter().filter(|l| l.hits).count();
    assert_eq!((rate.hits, rate.total), (hand, 48));
    assert_eq!(hand, 38);
    assert_eq!(rate.to_string(), "79.16%(38/48)");
    for (e, l) in queue.iter().zip(&labels.entry) {
        assert_eq!(e.hits_target, Some(l.hits), "{}", l.file);
    }
    assert!(matches!(
        compute_hit_rate(&mut [], &fixture, &h.binary, &symbols, "handle_record", ExecLimits::default()),
        Err(CampaignError::EmptyQueue)
    ));
}
