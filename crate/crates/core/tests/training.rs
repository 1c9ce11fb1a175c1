//! Training behaviour on the synthetic three-cluster benchmark.

use osr_core::data::{encode, make_splits, synth_generate, LabeledData, SynthConfig};
use osr_core::gmvae::{pretrain_phi_z, train_gmvae, GmvaeConfig, GmvaeModel};
use osr_core::iiloss::{ii_loss, train_iiloss, IiLossConfig};
use osr_core::training::StoppingConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Bench {
    train: LabeledData,
    validation: LabeledData,
    classes: Vec<usize>,
    width: usize,
}

fn bench() -> Bench {
    let config = SynthConfig {
        class_names: ["a", "b", "c", "d"].map(String::from).to_vec(),
        samples_per_class: 300,
        dim: 12,
        separation: 10.0,
        sigma: 1.0,
        means: None,
        covariances: None,
        categorical: Vec::new(),
        missing_rate: 0.0,
        encounters_per_patient: None,
    };
    let table = synth_generate(&config, 5).unwrap().table;
    let splits = make_splits(table.labels(), &[0, 1, 2], &[3], 2, 5).unwrap();
    let data = encode(&table, &splits.train).unwrap();
    Bench {
        train: data.subset(&splits.train),
        validation: data.subset(&splits.validation),
        classes: vec![0, 1, 2],
        width: data.features.ncols(),
    }
}

fn gmvae_config(b: &Bench, max_epochs: usize) -> GmvaeConfig {
    let mut c = GmvaeConfig::with_defaults(3, b.width);
    c.stopping = StoppingConfig {
        patience: 10,
        max_epochs,
    };
    c
}

fn pretrained(b: &Bench, max_epochs: usize) -> (GmvaeModel, osr_core::gmvae::PretrainLog) {
    let mut model =
        GmvaeModel::new(gmvae_config(b, max_epochs), b.classes.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let log = pretrain_phi_z(&mut model, &b.train, 9).unwrap();
    (model, log)
}

#[test]
fn pretraining_halves_its_objective_and_freezes_the_encoder() {
    let b = bench();
    let (model, log) = pretrained(&b, 3);
    let last = *log.epoch_losses.last().unwrap();
    assert!(last <= 0.5 * log.initial_loss, "{} -> {last}", log.initial_loss);
    assert!(model.phi_z_frozen);

    let checksum = model.phi_z.checksum();
    let trained = train_gmvae(model, &b.train, &b.validation, 9).unwrap();
    assert_eq!(trained.model.phi_z.checksum(), checksum);
}

#[test]
fn pretraining_is_deterministic() {
    let b = bench();
    let (a, _) = pretrained(&b, 1);
    let (c, _) = pretrained(&b, 1);
    assert_eq!(a.phi_z, c.phi_z);
}

#[test]
fn negative_elbo_does_not_rise_over_the_first_epochs() {
    let b = bench();
    let (model, _) = pretrained(&b, 5);
    let run = train_gmvae(model.clone(), &b.train, &b.validation, 9).unwrap();
    assert_eq!(run.log.len(), 5);
    let neg: Vec<f64> = run.log.iter().map(|e| -e.train.total).collect();
    for w in neg.windows(2) {
        assert!(w[1] <= w[0] + 0.01 * w[0].abs(), "{neg:?}");
    }
    let again = train_gmvae(model, &b.train, &b.validation, 9).unwrap();
    assert_eq!(run.log, again.log);
}

#[test]
fn iiloss_training_separates_classes() {
    let b = bench();
    let config = IiLossConfig {
        stopping: StoppingConfig {
            patience: 5,
            max_epochs: 40,
        },
        ..IiLossConfig::default()
    };
    let run = train_iiloss(&config, &b.train, &b.validation, &b.classes, 4).unwrap();
    let emb = run.model.embed(&b.train.features).unwrap();
    let v = ii_loss(&emb, &b.train.labels).unwrap();
    assert!(v.intra < v.inter, "intra {} inter {}", v.intra, v.inter);

    let again = train_iiloss(&config, &b.train, &b.validation, &b.classes, 4).unwrap();
    assert_eq!(run.log, again.log);
    assert_eq!(run.model.network, again.model.network);
}
