//! Training loop contracts: updates, resumption, phase hand-off, aborts.

mod common;

use asrgan::fixtures::synthetic_pairs;
use asrgan::imaging::ImagePair;
use asrgan::layers::ParamKind;
use asrgan::train::{Checkpoint, Phase, TrainConfig, Trainer, UpdateKind};
use asrgan::Error;
use common::tiny_config;

fn data() -> Vec<ImagePair> {
    synthetic_pairs(3, 8, 21).unwrap()
}

fn learnables(t: &Trainer) -> Vec<f64> {
    t.g_store
        .iter()
        .filter(|(_, _, kind, _)| *kind == ParamKind::Learnable)
        .flat_map(|(_, _, _, v)| v.data().to_vec())
        .collect()
}

fn round_trip(ckpt: &Checkpoint) -> Checkpoint {
    Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()
}

/// Everything but the embedded config text, which records `steps`.
fn state(ckpt: &Checkpoint) -> Vec<u8> {
    Checkpoint {
        config: String::new(),
        ..ckpt.clone()
    }
    .to_bytes()
}

#[test]
fn zero_learning_rate_leaves_learnables_unchanged() {
    let mut config = tiny_config();
    config.learning_rate = 0.0;
    let mut t = Trainer::new(config).unwrap();
    let before = learnables(&t);
    t.step_once(&data()).unwrap();
    assert_eq!(learnables(&t), before);
}

#[test]
fn one_step_reduces_the_loss_on_its_batch() {
    let pairs = synthetic_pairs(1, 4, 22).unwrap();
    let mut config = tiny_config();
    config.batch_size = 2;
    config.learning_rate = 1e-3;
    config.batch_norm = asrgan::layers::BnMode::Eval;
    let mut t = Trainer::new(config).unwrap();
    let first = t.step_once(&pairs).unwrap().content;
    let second = t.step_once(&pairs).unwrap().content;
    assert!(second < first, "{second} !< {first}");
}

#[test]
fn smoothed_loss_on_a_fixed_batch_does_not_increase() {
    // One image with a full-size crop makes every batch identical.
    let pairs = synthetic_pairs(1, 4, 23).unwrap();
    let mut config = tiny_config();
    config.batch_size = 2;
    config.learning_rate = 1e-3;
    config.steps = 200;
    let mut t = Trainer::new(config).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.step_once(&pairs).unwrap().content).collect();
    let smoothed: Vec<f64> = losses.chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in smoothed.windows(2) {
        assert!(w[1] <= w[0], "{smoothed:?}");
    }
    assert!(smoothed[9] < 0.5 * smoothed[0]);
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    for phase in [Phase::Resnet, Phase::Gan] {
        let mut config = tiny_config();
        config.phase = phase;
        config.steps = 6;
        let whole = Trainer::new(config.clone()).unwrap().run(&data(), &mut |_| Ok(())).unwrap();

        config.steps = 3;
        let half = Trainer::new(config.clone()).unwrap().run(&data(), &mut |_| Ok(())).unwrap();
        let mut resumed = Trainer::resume(config, &round_trip(&half)).unwrap();
        let rest = resumed.run(&data(), &mut |_| Ok(())).unwrap();
        assert_eq!(resumed.step, 6);
        assert_eq!(state(&rest), state(&whole), "{phase:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let mut config = tiny_config();
    config.phase = Phase::Gan;
    let ckpt = Trainer::new(config).unwrap().run(&data(), &mut |_| Ok(())).unwrap();
    let back = round_trip(&ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    for (a, b) in ckpt.model.iter().zip(&back.model) {
        assert_eq!(a.name, b.name);
        assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn gan_step_is_one_discriminator_then_one_generator_update() {
    let mut config = tiny_config();
    config.phase = Phase::Gan;
    config.steps = 4;
    let mut t = Trainer::new(config).unwrap();
    t.run(&data(), &mut |_| Ok(())).unwrap();
    assert_eq!((t.audit.d_updates, t.audit.g_updates), (4, 4));
    let expected: Vec<(u64, UpdateKind)> = (1..=4)
        .flat_map(|s| [(s, UpdateKind::Discriminator), (s, UpdateKind::Generator)])
        .collect();
    assert_eq!(t.audit.sequence, expected);

    let mut resnet = Trainer::new(tiny_config()).unwrap();
    resnet.run(&data(), &mut |_| Ok(())).unwrap();
    assert_eq!((resnet.audit.d_updates, resnet.audit.g_updates), (0, 3));
}

#[test]
fn zero_adversarial_weight_reproduces_content_training() {
    let pre = Trainer::new(tiny_config()).unwrap().run(&data(), &mut |_| Ok(())).unwrap();

    let mut cont = tiny_config();
    cont.steps = 5;
    let mut resnet = Trainer::resume(cont.clone(), &pre).unwrap();
    resnet.run(&data(), &mut |_| Ok(())).unwrap();

    cont.phase = Phase::Gan;
    cont.lambda_adv = 0.0;
    let mut gan = Trainer::resume(cont, &pre).unwrap();
    gan.run(&data(), &mut |_| Ok(())).unwrap();

    assert_eq!(gan.audit.d_updates, 5);
    let (a, b) = (learnables(&resnet), learnables(&gan));
    assert!(a.iter().zip(&b).all(|(x, y)| x == y));
    let all = |t: &Trainer| -> Vec<f64> { t.g_store.iter().flat_map(|(_, _, _, v)| v.data().to_vec()).collect() };
    assert_eq!(all(&resnet), all(&gan));
    for (x, y) in resnet.logs.iter().zip(&gan.logs) {
        assert_eq!(x.content, y.content);
    }
}

#[test]
fn mismatched_architecture_names_the_tensor() {
    let ckpt = Trainer::new(tiny_config()).unwrap().checkpoint();
    let mut other = tiny_config();
    other.generator.features = 16;
    match Trainer::resume(other, &ckpt) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("g."), "{msg}"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
    let mut deeper = tiny_config();
    deeper.generator.residual_blocks = 2;
    match Trainer::resume(deeper, &ckpt) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("block"), "{msg}"),
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn adversarial_checkpoint_cannot_continue_content_training() {
    let mut config = tiny_config();
    config.phase = Phase::Gan;
    let ckpt = Trainer::new(config).unwrap().checkpoint();
    assert!(matches!(Trainer::resume(tiny_config(), &ckpt), Err(Error::Config(_))));
}

#[test]
fn exploding_learning_rate_aborts_with_last_good_checkpoint() {
    let mut config = tiny_config();
    config.learning_rate = 1e300;
    config.steps = 10;
    let mut t = Trainer::new(config).unwrap();
    match t.run(&data(), &mut |_| Ok(())) {
        Err(Error::NumericAbort { step, last_good: Some(ckpt), .. }) => {
            assert!(step >= 1);
            assert_eq!(asrgan::train::checkpoint::read_u64(&ckpt.rng, "global.step").unwrap(), step - 1);
        }
        other => panic!("unexpected {:?}", other.map(|_| ())),
    }
}

#[test]
fn empty_dataset_is_a_data_error() {
    let mut t = Trainer::new(tiny_config()).unwrap();
    assert!(matches!(t.run(&[], &mut |_| Ok(())), Err(Error::Data(_))));
}

#[test]
fn periodic_checkpoints_are_delivered() {
    let mut config = tiny_config();
    config.steps = 4;
    config.checkpoint_interval = 2;
    let mut seen = Vec::new();
    Trainer::new(config)
        .unwrap()
        .run(&data(), &mut |c| {
            seen.push(asrgan::train::checkpoint::read_u64(&c.rng, "global.step")?);
            Ok(())
        })
        .unwrap();
    assert_eq!(seen, vec![2, 4]);
}

#[test]
fn config_text_round_trips() {
    let mut config = tiny_config();
    config.phase = Phase::Gan;
    config.pool_size = 2;
    config.lambda_adv = 0.25;
    assert_eq!(TrainConfig::parse(&config.to_text()).unwrap(), config);
    assert!(matches!(TrainConfig::parse("nonsense = 3"), Err(Error::Config(_))));
}
