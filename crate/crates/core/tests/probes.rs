use proptest::prelude::*;
use sluprobe_core::linalg::FeatureRow;
use sluprobe_core::model::{Label, ProbeInstance, Split};
use sluprobe_core::probes::{
    featurize, fit, loss_and_grad, metrics_on, FeatureSource, Metrics, ProbeModel, Target, TrainConfig,
};
use sluprobe_core::rng::Stream;
use sluprobe_core::synth::{plant_dataset, plant_datasets, FeatureSpec};
use sluprobe_core::taskgen::{LabelSet, ProbeDataset};

fn random_model(label_set: LabelSet, dim: usize, rng: &mut Stream) -> ProbeModel {
    let mut m = ProbeModel::new(label_set, dim);
    let p: Vec<f64> = m.params().iter().map(|_| rng.normal()).collect();
    m.set_params(&p).unwrap();
    m
}

fn max_rel_error(model: &ProbeModel, rows: &[FeatureRow], targets: &[Target], l2: f64) -> f64 {
    let (_, grad) = loss_and_grad(model, rows, targets, l2);
    let p0 = model.params();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..p0.len() {
        let mut m = model.clone();
        let mut p = p0.clone();
        p[k] += h;
        m.set_params(&p).unwrap();
        let up = loss_and_grad(&m, rows, targets, l2).0;
        p[k] -= 2.0 * h;
        m.set_params(&p).unwrap();
        let down = loss_and_grad(&m, rows, targets, l2).0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (grad[k] - numeric).abs() / grad[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_gradient_matches_finite_differences(seed in any::<u64>(), k in 2usize..5, dim in 1usize..6) {
        let mut rng = Stream::new(seed, 99, 0);
        let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let model = random_model(LabelSet::classes(&labels), dim, &mut rng);
        let rows: Vec<FeatureRow> = (0..8).map(|_| FeatureRow::Dense((0..dim).map(|_| rng.normal()).collect())).collect();
        let targets: Vec<Target> = (0..8).map(|_| Target::Class(rng.index(k))).collect();
        prop_assert!(max_rel_error(&model, &rows, &targets, 0.01) <= 1e-4);
    }

    #[test]
    fn regression_gradient_matches_finite_differences(seed in any::<u64>(), dim in 1usize..6) {
        let mut rng = Stream::new(seed, 99, 1);
        let model = random_model(LabelSet::Regression, dim, &mut rng);
        let rows: Vec<FeatureRow> = (0..8).map(|_| FeatureRow::Dense((0..dim).map(|_| rng.normal()).collect())).collect();
        let targets: Vec<Target> = (0..8).map(|_| Target::Value(3.0 * rng.normal())).collect();
        prop_assert!(max_rel_error(&model, &rows, &targets, 0.01) <= 1e-4);
    }

    #[test]
    fn probabilities_are_a_distribution(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = Stream::new(seed, 99, 2);
        let labels: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let model = random_model(LabelSet::classes(&labels), 3, &mut rng);
        let x = FeatureRow::Dense((0..3).map(|_| 10.0 * rng.normal()).collect());
        let p = model.probabilities(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn sparse_and_dense_rows_agree() {
    let mut rng = Stream::new(5, 99, 3);
    let model = random_model(LabelSet::classes(&["a", "b", "c"]), 6, &mut rng);
    let dense = FeatureRow::Dense(vec![0.0, 2.0, 0.0, -1.0, 0.0, 0.5]);
    let sparse = FeatureRow::Sparse(vec![(1, 2.0), (3, -1.0), (5, 0.5)]);
    assert_eq!(model.outputs(&dense), model.outputs(&sparse));
    let t = [Target::Class(2)];
    assert_eq!(
        loss_and_grad(&model, &[dense], &t, 0.1),
        loss_and_grad(&model, &[sparse], &t, 0.1)
    );
}

fn instance(id: &str, label: &str, split: Split) -> ProbeInstance {
    ProbeInstance {
        id: id.into(),
        conv_id: id.into(),
        text: String::new(),
        label: Label::Class(label.into()),
        split,
        position: None,
    }
}

fn binary_dataset(task: &str, n: usize, seed: u64) -> ProbeDataset {
    let mut rng = Stream::new(seed, 42, 0);
    let instances = (0..n)
        .map(|i| {
            let split = match i % 10 {
                0 => Split::Valid,
                1 => Split::Test,
                _ => Split::Train,
            };
            instance(&format!("x{i:05}"), if rng.bernoulli(0.5) { "pos" } else { "neg" }, split)
        })
        .collect();
    ProbeDataset {
        task: task.into(),
        label_set: LabelSet::classes(&["neg", "pos"]),
        instances,
        seed,
    }
}

fn spec(dim: usize) -> FeatureSpec {
    FeatureSpec {
        classes: Vec::new(),
        dim,
        separation: 4.0,
        noise_sigma: 1.0,
        n_per_class: 0,
        layers: 2,
        informative_layer: 1,
        seed: 3,
    }
}

fn test_f1(ds: &ProbeDataset, store: &sluprobe_core::store::TensorStore, layer: u32) -> f64 {
    let f = featurize(ds, FeatureSource::Store { store, layer }).unwrap();
    let (model, _) = fit(
        &ds.label_set,
        f.dim,
        f.get(Split::Train),
        f.get(Split::Valid),
        &TrainConfig::default(),
    )
    .unwrap();
    let m: Metrics = metrics_on(&model, f.get(Split::Test));
    m.macro_f1.unwrap()
}

#[test]
fn one_dataset_plants_like_plant_dataset() {
    let ds = binary_dataset("a", 200, 1);
    let a = plant_dataset(&ds, &spec(4)).unwrap();
    let b = plant_datasets(&[&ds], &spec(4)).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn shared_store_carries_every_task() {
    let a = binary_dataset("a", 1000, 1);
    let b = binary_dataset("b", 1000, 2);
    let store = plant_datasets(&[&a, &b], &spec(4)).unwrap();
    assert_eq!(store.len(), 1000 * 3);
    assert!(test_f1(&a, &store, 1) >= 0.9);
    assert!(test_f1(&b, &store, 1) >= 0.9);
    assert!(test_f1(&a, &store, 0) <= 0.7);
}

#[test]
fn shared_store_needs_enough_axes() {
    let a = binary_dataset("a", 10, 1);
    let b = binary_dataset("b", 10, 2);
    assert!(plant_datasets(&[&a, &b], &spec(1)).is_err());
}
