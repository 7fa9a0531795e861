use cltta::netcore::{accuracy, train_source, MlpModel, TrainConfig};
use cltta::scenarios::{
    corrupt, default_suite, make_source, shuffled, Corruption, CorruptionKind, Dataset, DEFAULT_CLASSES, DEFAULT_DIM,
    DEFAULT_PER_CLASS, DEFAULT_SPREAD, SHUFFLE_SEEDS,
};

fn source_model(seed: u64) -> (MlpModel, Dataset) {
    let (train, test) = make_source(DEFAULT_CLASSES, DEFAULT_DIM, DEFAULT_PER_CLASS, DEFAULT_SPREAD, seed).unwrap();
    let mut model = MlpModel::new(&[DEFAULT_DIM, 64, DEFAULT_CLASSES], seed).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        lr: 1e-3,
        batch_size: 64,
        seed,
    };
    train_source(&mut model, &train, None, &cfg).unwrap();
    (model, test)
}

#[test]
fn default_source_is_imperfect_but_strong() {
    for seed in 1..=3 {
        let (model, test) = source_model(seed);
        let acc = accuracy(&model, &test).unwrap();
        assert!((0.80..=0.99).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn severity_five_drops_every_kind() {
    let (model, test) = source_model(1);
    let clean = accuracy(&model, &test).unwrap();
    for kind in CorruptionKind::SHIFTS {
        let c = Corruption::new(kind, 5).unwrap();
        let shifted = accuracy(&model, &corrupt(&test, c, 7).unwrap()).unwrap();
        println!("{c}: {clean:.4} -> {shifted:.4}");
        assert!(clean - shifted >= 0.05, "{c}: {clean} -> {shifted}");
    }
}

#[test]
fn gauss_noise_is_monotone_on_average() {
    let mut mean = [0.0; 5];
    for seed in 1..=3 {
        let (model, test) = source_model(seed);
        for (s, m) in mean.iter_mut().enumerate() {
            let c = Corruption::new(CorruptionKind::GaussNoise, s as u8 + 1).unwrap();
            *m += accuracy(&model, &corrupt(&test, c, seed).unwrap()).unwrap() / 3.0;
        }
    }
    for w in mean.windows(2) {
        assert!(w[1] <= w[0] + 0.01, "{mean:?}");
    }
    assert!(mean[4] < mean[0], "{mean:?}");
}

#[test]
fn shipped_shuffle_seeds_give_distinct_orders() {
    let orders: Vec<Vec<Corruption>> = SHUFFLE_SEEDS.iter().map(|&s| shuffled(&default_suite(), s)).collect();
    for (i, a) in orders.iter().enumerate() {
        let mut sorted = a.clone();
        sorted.sort();
        let mut base = default_suite();
        base.sort();
        assert_eq!(sorted, base);
        for b in &orders[i + 1..] {
            assert_ne!(a, b);
        }
    }
}
