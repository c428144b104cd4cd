//! Sharded data parallelism against single-process full-batch training.

mod common;

use std::time::Duration;

use asrgan::attention::FsaConfig;
use asrgan::autodiff::Tape;
use asrgan::fixtures::synthetic_pairs;
use asrgan::layers::{BnMode, GradMap, Net, ParamStore};
use asrgan::losses;
use asrgan::models::{build_discriminator, build_generator, Discriminator, Generator};
use asrgan::train::parallel::{average_gradients, run_workers, shard_batch};
use asrgan::train::{Phase, Trainer};
use asrgan::{Error, Tensor};
use common::{rng, tiny_config};

fn generator_grads(g: &Generator, store: &ParamStore, lr: &Tensor, hr: &Tensor) -> GradMap {
    let mut tape = Tape::new();
    let mut net = Net::new(store, true, BnMode::Eval);
    let x = tape.constant(lr.clone());
    let y = tape.constant(hr.clone());
    let sr = g.forward(&mut tape, &mut net, x, FsaConfig::PLAIN).unwrap();
    let loss = losses::content_loss(&mut tape, sr, y).unwrap();
    net.gradients(&tape.backward(loss).unwrap())
}

fn discriminator_grads(d: &Discriminator, store: &ParamStore, real: &Tensor, fake: &Tensor) -> GradMap {
    let mut tape = Tape::new();
    let mut net = Net::new(store, true, BnMode::Eval);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let dr = d.forward(&mut tape, &mut net, r, FsaConfig::PLAIN).unwrap();
    let df = d.forward(&mut tape, &mut net, f, FsaConfig::PLAIN).unwrap();
    let loss = losses::discriminator_loss(&mut tape, dr, df).unwrap();
    net.gradients(&tape.backward(loss).unwrap())
}

fn relative_difference(a: &GradMap, b: &GradMap) -> f64 {
    let (fa, fb) = (a.flatten(), b.flatten());
    let diff: f64 = fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm
}

fn batch(n: usize, seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (
        Tensor::uniform(&[n, 3, 4, 4], 0.0, 1.0, &mut r),
        Tensor::uniform(&[n, 3, 16, 16], -1.0, 1.0, &mut r),
    )
}

fn sharded<F: Fn(&Tensor, &Tensor) -> GradMap + Sync>(lr: &Tensor, hr: &Tensor, workers: usize, f: F) -> GradMap {
    let lr_s = shard_batch(lr, workers).unwrap();
    let hr_s = shard_batch(hr, workers).unwrap();
    let maps = run_workers(workers, Duration::from_secs(60), |w| Ok(f(&lr_s[w], &hr_s[w]))).unwrap();
    average_gradients(&maps).unwrap()
}

#[test]
fn generator_shard_average_equals_full_batch() {
    let (g, store) = build_generator(&tiny_config().generator, 3).unwrap();
    let (lr, hr) = batch(8, 4);
    let full = generator_grads(&g, &store, &lr, &hr);
    for w in [1, 2, 4, 8] {
        let avg = sharded(&lr, &hr, w, |l, h| generator_grads(&g, &store, l, h));
        let rel = relative_difference(&avg, &full);
        assert!(rel < 1e-10, "W={w}: {rel:e}");
    }
}

#[test]
fn discriminator_shard_average_equals_full_batch() {
    let (d, store) = build_discriminator(&tiny_config().discriminator(), 5).unwrap();
    let mut r = rng(6);
    let real = Tensor::uniform(&[8, 3, 16, 16], -1.0, 1.0, &mut r);
    let fake = Tensor::uniform(&[8, 3, 16, 16], -1.0, 1.0, &mut r);
    let full = discriminator_grads(&d, &store, &real, &fake);
    for w in [2, 4, 8] {
        let avg = sharded(&real, &fake, w, |a, b| discriminator_grads(&d, &store, a, b));
        assert!(relative_difference(&avg, &full) < 1e-10, "W={w}");
    }
}

#[test]
fn per_sample_gradients_average_to_the_batch_gradient() {
    let (g, store) = build_generator(&tiny_config().generator, 7).unwrap();
    let (lr, hr) = batch(4, 8);
    let full = generator_grads(&g, &store, &lr, &hr);
    let singles: Vec<GradMap> = (0..4)
        .map(|i| {
            generator_grads(
                &g,
                &store,
                &lr.slice_batch(i, i + 1).unwrap(),
                &hr.slice_batch(i, i + 1).unwrap(),
            )
        })
        .collect();
    let mean = average_gradients(&singles).unwrap();
    assert!(relative_difference(&mean, &full) < 1e-10);
}

fn trajectory(phase: Phase, workers: usize) -> Vec<f64> {
    let data = synthetic_pairs(4, 8, 9).unwrap();
    let mut config = tiny_config();
    config.phase = phase;
    config.steps = 10;
    config.batch_size = 8;
    config.workers = workers;
    config.batch_norm = BnMode::Eval;
    let mut t = Trainer::new(config).unwrap();
    for _ in 0..10 {
        t.step_once(&data).unwrap();
    }
    let mut out: Vec<f64> = t.g_store.iter().flat_map(|(_, _, _, v)| v.data().to_vec()).collect();
    if let Some(gan) = &t.gan {
        out.extend(gan.store.iter().flat_map(|(_, _, _, v)| v.data().to_vec()));
    }
    out
}

#[test]
fn ten_step_trajectories_agree_across_worker_counts() {
    for phase in [Phase::Resnet, Phase::Gan] {
        let reference = trajectory(phase, 1);
        for w in [2, 4, 8] {
            let other = trajectory(phase, w);
            let worst = reference
                .iter()
                .zip(&other)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(worst < 1e-8, "{phase:?} W={w}: {worst:e}");
        }
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let a = trajectory(Phase::Gan, 4);
    let b = trajectory(Phase::Gan, 4);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn indivisible_batch_is_a_config_error() {
    let (lr, _) = batch(6, 1);
    assert!(matches!(shard_batch(&lr, 4), Err(Error::Config(_))));
}

#[test]
fn slow_worker_hits_the_barrier_timeout() {
    let r = run_workers(2, Duration::from_millis(50), |w| {
        if w == 1 {
            std::thread::sleep(Duration::from_millis(300));
        }
        Ok(w)
    });
    assert!(matches!(r, Err(Error::BarrierTimeout { expected: 2, received: 1 })));
}

#[test]
fn failing_worker_is_named() {
    let r: asrgan::Result<Vec<()>> = run_workers(4, Duration::from_secs(5), |w| {
        if w == 2 {
            Err(Error::NonFinite { op: "test" })
        } else {
            Ok(())
        }
    });
    match r {
        Err(Error::Worker { worker: 2, shard: 2, source }) => assert_eq!(source.exit_code(), 4),
        other => panic!("unexpected {other:?}"),
    }
}
