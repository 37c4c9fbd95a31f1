mod common;

use routecast_core::train::{load_model, mean_pearson, Checkpoint, Trainer};
use routecast_core::{Config, Error, Precision, TrainConfig};
use routecast_tensor::Tensor;

fn verification(mut c: Config) -> Config {
    let seed = c.train.seed;
    c.train = TrainConfig {
        epochs: c.train.epochs,
        warmup_epochs: c.train.warmup_epochs,
        batch_size: c.train.batch_size,
        lds_config: c.train.lds_config.clone(),
        seed,
        ..TrainConfig::verification()
    };
    c
}

fn bits<T: routecast_tensor::Real>(tensors: &[Tensor<T>]) -> Vec<u64> {
    tensors
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.f64().to_bits()))
        .collect()
}

#[test]
fn overfits_a_handful_of_samples() {
    let data = common::tiny_data(1, 4);
    let mut c = common::tiny_config();
    c.train.val_fraction = 0.0;
    c.train.batch_size = 4;
    c.train.epochs = 150;
    c.train.warmup_epochs = 5;
    c.train.base_lr = 3e-3;
    let mut t = Trainer::<f32>::new(&c, &data).unwrap();
    let all: Vec<usize> = (0..4).collect();
    let (initial, _) = t.evaluate(&data, &all).unwrap();
    t.run(&data, usize::MAX, |_, _| Ok(())).unwrap();
    let (last, _) = t.evaluate(&data, &all).unwrap();
    assert!(last <= 0.1 * initial, "{initial} -> {last}");
}

#[test]
fn resume_is_bit_exact_in_f64() {
    let data = common::tiny_data(2, 10);
    let c = verification(common::tiny_config());
    assert_eq!(c.train.precision, Precision::F64);

    let mut straight = Trainer::<f64>::new(&c, &data).unwrap();
    straight.run(&data, 4, |_, _| Ok(())).unwrap();

    let mut first = Trainer::<f64>::new(&c, &data).unwrap();
    first.run(&data, 2, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("last.cfck");
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::<f64>::resume(&Checkpoint::load(&path).unwrap(), &data).unwrap();
    assert_eq!(resumed.epoch(), 2);
    resumed.run(&data, 4, |_, _| Ok(())).unwrap();

    assert_eq!(
        bits(straight.model().params().tensors()),
        bits(resumed.model().params().tensors())
    );
    let untimed = |t: &Trainer<f64>| {
        let mut h = t.history().to_vec();
        h.iter_mut().for_each(|r| r.seconds = 0.0);
        h
    };
    assert_eq!(untimed(&straight), untimed(&resumed));
    assert_eq!(straight.step(), resumed.step());
}

#[test]
fn threaded_batches_match_serial_batches() {
    let data = common::tiny_data(3, 8);
    let c = verification(common::tiny_config());
    let mut threaded = c.clone();
    threaded.train.threads = 3;
    let mut a = Trainer::<f64>::new(&c, &data).unwrap();
    let mut b = Trainer::<f64>::new(&threaded, &data).unwrap();
    a.run(&data, 2, |_, _| Ok(())).unwrap();
    b.run(&data, 2, |_, _| Ok(())).unwrap();
    assert_eq!(bits(a.model().params().tensors()), bits(b.model().params().tensors()));
}

#[test]
fn lds_reweighting_changes_gradients() {
    let data = common::tiny_data(4, 6);
    let c = verification(common::tiny_config());
    let mut plain = c.clone();
    plain.train.lds = false;
    let with = Trainer::<f64>::new(&c, &data).unwrap();
    let without = Trainer::<f64>::new(&plain, &data).unwrap();
    assert!(with.lds().is_some() && without.lds().is_none());
    let (_, ga) = with.batch_gradients(&data, &[0, 1]).unwrap();
    let (_, gb) = without.batch_gradients(&data, &[0, 1]).unwrap();
    assert_ne!(bits(&ga), bits(&gb));
}

#[test]
fn checkpoints_restore_the_model_exactly() {
    let data = common::tiny_data(5, 6);
    let c = verification(common::tiny_config());
    let mut t = Trainer::<f64>::new(&c, &data).unwrap();
    t.run(&data, 2, |_, _| Ok(())).unwrap();
    t.restore_best();
    let bytes = t.best_checkpoint().encode();
    let model = load_model::<f64>(&Checkpoint::decode(&bytes).unwrap()).unwrap();
    let a = t.model().predict(&data[0].nodes).unwrap();
    let b = model.predict(&data[0].nodes).unwrap();
    assert_eq!(a, b);
    let refs: Vec<_> = data.iter().collect();
    assert_eq!(
        mean_pearson(t.model(), &refs).unwrap(),
        mean_pearson(&model, &refs).unwrap()
    );
}

#[test]
fn resume_rejects_a_different_dataset_or_precision() {
    let data = common::tiny_data(6, 6);
    let c = verification(common::tiny_config());
    let t = Trainer::<f64>::new(&c, &data).unwrap();
    let ckpt = t.checkpoint();
    assert!(matches!(
        Trainer::<f64>::resume(&ckpt, &data[..5]),
        Err(Error::Compat(_))
    ));
    assert!(matches!(Trainer::<f32>::resume(&ckpt, &data), Err(Error::Compat(_))));
}

#[test]
fn mismatched_labels_are_a_data_error() {
    let mut data = common::tiny_data(7, 3);
    data[1].label = routecast_core::io::LabelGrid::zeros(8, 8);
    let c = common::tiny_config();
    assert!(matches!(Trainer::<f32>::new(&c, &data), Err(Error::Data(_))));
    assert!(matches!(Trainer::<f32>::new(&c, &[]), Err(Error::Data(_))));
}
