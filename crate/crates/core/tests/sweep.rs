use spx::recognisability::{sweep, sweep_with, SweepConfig, Task};
use spx::sensing::NoiseModel;
use spx::synthdata::{SynthSpec, build_dataset};
use spx::patterns::{gen_speckle, select, SelectionPolicy};
use spx::recognisability::{accuracy, train_softmax, Standardizer, DEFAULT_EPOCHS, DEFAULT_L2, DEFAULT_LR};

#[test]
fn permuted_labels_give_chance_accuracy() {
    for task in [Task::Privacy, Task::Behavior] {
        let mut cfg = SweepConfig::new(task, vec![8, 32, 128], SynthSpec::default(), 10, 3);
        cfg.permute_labels = true;
        let curve = sweep_with(&cfg).unwrap();
        let chance = 1.0 / curve.k as f64;
        for p in &curve.points {
            println!("{task} M={} acc {:.4} se {:.4} chance {chance:.4}", p.m, p.mean_accuracy, p.std_error);
            assert!((p.mean_accuracy - chance).abs() <= 3.0 * p.std_error, "{task} M={}", p.m);
        }
    }
}

#[test]
fn sweep_is_deterministic_and_independent_of_jobs() {
    let spec = SynthSpec {
        samples_per_class: 10,
        ..SynthSpec::default()
    };
    let a = sweep(Task::Behavior, &[8, 16], &spec, 1, 9).unwrap();
    let b = sweep(Task::Behavior, &[8, 16], &spec, 1, 9).unwrap();
    assert_eq!(a, b);
    let mut cfg = SweepConfig::new(Task::Privacy, vec![8, 16], spec.clone(), 3, 9);
    let serial = sweep_with(&cfg).unwrap();
    cfg.jobs = 3;
    assert_eq!(sweep_with(&cfg).unwrap(), serial);
}

#[test]
fn sweep_rejects_rates_beyond_library() {
    let spec = SynthSpec::default();
    let mut cfg = SweepConfig::new(Task::Behavior, vec![8, 64], spec, 1, 0);
    cfg.library = Some(gen_speckle(32, 32, 32, 0).unwrap());
    assert!(sweep_with(&cfg).is_err());
    assert!(sweep(Task::Behavior, &[16, 8], &SynthSpec::default(), 1, 0).is_err());
}

#[test]
fn behaviour_accuracy_rises_with_rate() {
    let curve = sweep(Task::Behavior, &[8, 16, 32, 64, 128], &SynthSpec::default(), 10, 0).unwrap();
    let acc = curve.accuracies();
    println!("behaviour accuracy {acc:?}");
    assert!(acc[4] - acc[0] > 0.2);
}

#[test]
fn behaviour_is_linearly_separable_at_full_sampling() {
    let spec = SynthSpec {
        noise: NoiseModel::None,
        ..SynthSpec::default()
    };
    let lib = gen_speckle(1024, 32, 32, 5).unwrap();
    let op = select(&lib, 1024, SelectionPolicy::Prefix).unwrap();
    let (train, _, test) = build_dataset(&spec, &op, Task::Behavior).unwrap();
    let scaler = Standardizer::fit(&train.features);
    let model = train_softmax(&scaler.apply(&train), DEFAULT_EPOCHS, DEFAULT_LR, DEFAULT_L2, 0).unwrap();
    let acc = accuracy(&scaler.fold_into(&model), &test).unwrap();
    println!("full-sampling behaviour accuracy {acc}");
    assert!(acc > 0.9);
}
