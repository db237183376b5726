use sluprobe_core::model::Split;
use sluprobe_core::mtl::{
    evaluate_transfer, train_mtl, Activation, MtlConfig, MtlTrainer, Sampling, TransferMode,
};
use sluprobe_core::probes::{evaluate_probe, train_probe, FeatureSource, TrainConfig};
use sluprobe_core::synth::{gen_shared_subspace, SharedSubspace, SharedSubspaceSpec};
use sluprobe_core::taskgen::{LabelSet, ProbeDataset};

fn subspace(n_items: usize, seed: u64) -> SharedSubspace {
    let dim = 8;
    let axis = |k: usize| (0..dim).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    gen_shared_subspace(&SharedSubspaceSpec {
        dim,
        n_items,
        directions: vec![axis(0), axis(1)],
        separation: 4.0,
        noise_sigma: 1.0,
        seed,
    })
    .unwrap()
}

fn task(s: &SharedSubspace, t: usize, name: &str, train: usize, valid: usize) -> ProbeDataset {
    ProbeDataset {
        task: name.into(),
        label_set: LabelSet::classes(&["neg", "pos"]),
        instances: s.instances(t, train, valid),
        seed: 0,
    }
}

fn small_config() -> MtlConfig {
    MtlConfig {
        width: 16,
        epochs: 5,
        seed: 9,
        ..MtlConfig::default()
    }
}

#[test]
fn mtl_matches_single_task_probes() {
    let s = subspace(3000, 1);
    let a = task(&s, 0, "a", 2000, 500);
    let b = task(&s, 1, "b", 2000, 500);
    let source = FeatureSource::Store { store: &s.store, layer: 0 };
    let run = train_mtl(&[&a, &b], source, &MtlConfig { seed: 9, ..MtlConfig::default() }).unwrap();
    for ds in [&a, &b] {
        let probe = train_probe(ds, source, &TrainConfig::default()).unwrap();
        let single = evaluate_probe(&probe, ds, Split::Test, source).unwrap().macro_f1.unwrap();
        let multi = evaluate_transfer(&run.model, ds, source, TransferMode::FrozenEverything, &TrainConfig::default())
            .unwrap()
            .macro_f1
            .unwrap();
        assert!((single - multi).abs() <= 0.02, "{}: single {single} mtl {multi}", ds.task);
    }
}

#[test]
fn step_leaves_other_heads_alone() {
    let s = subspace(400, 2);
    let a = task(&s, 0, "a", 300, 50);
    let b = task(&s, 1, "b", 300, 50);
    let mut trainer =
        MtlTrainer::new(&[&a, &b], FeatureSource::Store { store: &s.store, layer: 0 }, &small_config()).unwrap();
    for _ in 0..5 {
        let before = trainer.model();
        let (t, _) = trainer.step().unwrap();
        let after = trainer.model();
        let other = if t == 0 { "b" } else { "a" };
        let mine = if t == 0 { "a" } else { "b" };
        assert_eq!(before.heads[other], after.heads[other]);
        assert_ne!(before.heads[mine], after.heads[mine]);
        assert_ne!(before.trunk, after.trunk);
    }
}

#[test]
fn round_robin_alternates_tasks() {
    let s = subspace(200, 3);
    let a = task(&s, 0, "a", 150, 25);
    let b = task(&s, 1, "b", 150, 25);
    let mut trainer =
        MtlTrainer::new(&[&a, &b], FeatureSource::Store { store: &s.store, layer: 0 }, &small_config()).unwrap();
    let order: Vec<usize> = (0..6).map(|_| trainer.step().unwrap().0).collect();
    assert_eq!(order, [0, 1, 0, 1, 0, 1]);
    assert_eq!(trainer.steps_per_epoch(), 2 * 150usize.div_ceil(32));
}

#[test]
fn training_is_deterministic() {
    let s = subspace(300, 4);
    let a = task(&s, 0, "a", 200, 50);
    let b = task(&s, 1, "b", 200, 50);
    let source = FeatureSource::Store { store: &s.store, layer: 0 };
    let config = MtlConfig {
        sampling: Sampling::Proportional,
        activation: Activation::Relu,
        ..small_config()
    };
    let x = train_mtl(&[&a, &b], source, &config).unwrap();
    let y = train_mtl(&[&a, &b], source, &config).unwrap();
    assert_eq!(x, y);
}

#[test]
fn new_head_transfer_on_frozen_trunk() {
    let s = subspace(1200, 5);
    let a = task(&s, 0, "a", 800, 200);
    let b = task(&s, 1, "b", 800, 200);
    let source = FeatureSource::Store { store: &s.store, layer: 0 };
    let run = train_mtl(&[&a, &b], source, &MtlConfig { seed: 9, ..MtlConfig::default() }).unwrap();
    let m = evaluate_transfer(&run.model, &b, source, TransferMode::FrozenTrunkNewHead, &TrainConfig::default())
        .unwrap();
    assert!(m.macro_f1.unwrap() >= 0.9);
}

#[test]
fn duplicate_tasks_rejected() {
    let s = subspace(100, 6);
    let a = task(&s, 0, "a", 60, 20);
    let r = MtlTrainer::new(&[&a, &a], FeatureSource::Store { store: &s.store, layer: 0 }, &small_config());
    assert!(r.is_err());
}
