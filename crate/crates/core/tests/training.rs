mod common;

use common::{stage, synthetic_data, toy_config};
use microdiff::checkpoint::Checkpoint;
use microdiff::train::{LogRecord, TrainState, Trainer};

fn run_all(cfg: &microdiff::train::TrainConfig, data: &microdiff::train::TrainData) -> (TrainState, Vec<LogRecord>) {
    let mut state = TrainState::init(cfg).unwrap();
    let mut logs = Vec::new();
    Trainer::new(cfg, data, None)
        .unwrap()
        .run(&mut state, &mut |r| logs.push(r.clone()))
        .unwrap();
    (state, logs)
}

#[test]
fn zero_step_stage_passes_weights_through() {
    let cfg = toy_config(1, vec![stage("empty", 0, 8)]);
    let data = synthetic_data(8, 0);
    let before = TrainState::init(&cfg).unwrap();
    let (after, logs) = run_all(&cfg, &data);
    assert!(logs.is_empty());
    let (a, b) = (before.to_checkpoint(&cfg, None).unwrap(), after.to_checkpoint(&cfg, None).unwrap());
    assert_eq!(a.tensors, b.tensors);
}

#[test]
fn same_seed_is_bit_identical_and_resume_matches() {
    let cfg = toy_config(3, vec![stage("a", 6, 8), stage("b", 5, 16)]);
    let data = synthetic_data(12, 1);
    let (full, full_logs) = run_all(&cfg, &data);
    let (again, _) = run_all(&cfg, &data);
    let bytes = full.to_checkpoint(&cfg, None).unwrap().to_bytes();
    assert_eq!(bytes, again.to_checkpoint(&cfg, None).unwrap().to_bytes());
    assert_eq!(full_logs.len(), 11);

    // stop mid-stage, round-trip through bytes, continue
    let mut state = TrainState::init(&cfg).unwrap();
    let mut logs = Vec::new();
    let mut trainer = Trainer::new(&cfg, &data, None).unwrap();
    trainer.run_stage_until(&mut state, usize::MAX, &mut |r| logs.push(r.clone())).unwrap();
    trainer.run_stage_until(&mut state, 2, &mut |r| logs.push(r.clone())).unwrap();
    let ck = Checkpoint::read_from(state.to_checkpoint(&cfg, None).unwrap().to_bytes().as_slice()).unwrap();
    let (cfg2, mut resumed, _) = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(cfg2, cfg);
    assert_eq!((resumed.stage, resumed.stage_step, resumed.global_step), (1, 2, 8));
    Trainer::new(&cfg2, &data, None)
        .unwrap()
        .run(&mut resumed, &mut |r| logs.push(r.clone()))
        .unwrap();
    assert_eq!(logs, full_logs);
    assert_eq!(resumed.to_checkpoint(&cfg, None).unwrap().to_bytes(), bytes);
}

#[test]
fn ema_is_not_the_trained_weights() {
    let cfg = toy_config(4, vec![stage("a", 3, 8)]);
    let (state, _) = run_all(&cfg, &synthetic_data(8, 2));
    assert!(state.ema.same_layout(state.model.params()));
    assert_ne!(state.ema.fingerprint(), state.model.params().fingerprint());
}

#[test]
fn loss_halves_on_synthetic_set() {
    let mut cfg = toy_config(0, vec![stage("smoke", 2000, 16)]);
    cfg.stages[0].batch_size = 8;
    let data = synthetic_data(200, 0);
    let t = std::time::Instant::now();
    let (_, logs) = run_all(&cfg, &data);
    let mean = |r: &[LogRecord]| r.iter().map(|l| l.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&logs[..100]), mean(&logs[logs.len() - 200..]));
    eprintln!("loss {first:.4} -> {last:.4} in {:?}", t.elapsed());
    assert!(last <= 0.5 * first, "{first} -> {last}");
}
