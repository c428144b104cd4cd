//! Two-phase training: content-loss pre-training, then adversarial
//! fine-tuning with one discriminator update followed by one generator
//! update per global step. Both phases run every update through the
//! sharded worker protocol in [`super::parallel`].

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{self, Checkpoint, NamedTensor};
use super::config::{Phase, TrainConfig};
use super::optim::Adam;
use super::parallel::{average_bn_updates, average_gradients, run_workers, shard_batch};
use crate::attention::FsaConfig;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imaging::{normalize_hr, normalize_lr, random_crop_pair, ImagePair};
use crate::layers::{apply_bn_updates, BnUpdate, GradMap, Net, ParamStore};
use crate::losses;
use crate::models::{build_discriminator, build_generator, Discriminator, Generator};
use crate::tensor::Tensor;

/// Consecutive steps of perfect discriminator accuracy before warning.
pub const COLLAPSE_WINDOW: u64 = 500;

const SAMPLER_SALT: u64 = 0x5eed_c409;
const DISC_SALT: u64 = 0xd15c_0001;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Discriminator,
    Generator,
}

/// Counts of parameter updates, with their order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateAudit {
    pub d_updates: u64,
    pub g_updates: u64,
    /// `(global step, update)` in the order updates were applied.
    pub sequence: Vec<(u64, UpdateKind)>,
}

impl UpdateAudit {
    fn record(&mut self, step: u64, kind: UpdateKind) {
        match kind {
            UpdateKind::Discriminator => self.d_updates += 1,
            UpdateKind::Generator => self.g_updates += 1,
        }
        self.sequence.push((step, kind));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub phase: Phase,
    pub content: f64,
    pub d_loss: Option<f64>,
    pub g_adv: Option<f64>,
    pub d_accuracy: Option<f64>,
    pub wall_ms: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} phase={} content={:.6e}", self.step, self.phase.as_str(), self.content)?;
        if let (Some(d), Some(g), Some(a)) = (self.d_loss, self.g_adv, self.d_accuracy) {
            write!(f, " d_loss={d:.6e} g_adv={g:.6e} d_acc={a:.3}")?;
        }
        write!(f, " wall_ms={:.1}", self.wall_ms)
    }
}

/// Discriminator, its parameters and optimizer.
#[derive(Clone, Debug)]
pub struct GanState {
    pub disc: Discriminator,
    pub store: ParamStore,
    pub opt: Adam,
}

#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub g_store: ParamStore,
    pub g_opt: Adam,
    pub gan: Option<GanState>,
    sampler: ChaCha8Rng,
    /// Global steps completed, across resumptions.
    pub step: u64,
    pub audit: UpdateAudit,
    pub logs: Vec<StepLog>,
    perfect_d_steps: u64,
    collapse_warned: bool,
}

struct ShardResult {
    grads: GradMap,
    bn: Vec<BnUpdate>,
    losses: [f64; 2],
    correct: usize,
}

impl Trainer {
    /// Fresh networks from the configured seed.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (generator, g_store) = build_generator(&config.generator, config.seed)?;
        let g_opt = Adam::new(config.learning_rate, &g_store);
        let gan = match config.phase {
            Phase::Gan => Some(fresh_gan(&config)?),
            Phase::Resnet => None,
        };
        Ok(Trainer {
            sampler: ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLER_SALT),
            config,
            generator,
            g_store,
            g_opt,
            gan,
            step: 0,
            audit: UpdateAudit::default(),
            logs: Vec::new(),
            perfect_d_steps: 0,
            collapse_warned: false,
        })
    }

    /// Continues from a checkpoint. Generator parameters, optimizer state,
    /// sampler state and the global step carry over; a GAN-phase config
    /// resuming a content-loss checkpoint starts a fresh discriminator.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        checkpoint::import_store(&mut t.g_store, &ckpt.model, "g.")?;
        import_adam(&mut t.g_opt, &t.g_store, &ckpt.optimizer, "g.adam.")?;
        let has_disc = ckpt.has_model_prefix("d.");
        match (&mut t.gan, has_disc) {
            (Some(gan), true) => {
                checkpoint::import_store(&mut gan.store, &ckpt.model, "d.")?;
                import_adam(&mut gan.opt, &gan.store, &ckpt.optimizer, "d.adam.")?;
            }
            (Some(_), false) => log::info!("starting a fresh discriminator"),
            (None, true) => {
                return Err(Error::Config(
                    "cannot continue content-loss training from an adversarial checkpoint".into(),
                ))
            }
            (None, false) => {}
        }
        t.sampler = checkpoint::import_rng(&ckpt.rng, "sampler.")?;
        t.step = checkpoint::read_u64(&ckpt.rng, "global.step")?;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut model = checkpoint::export_store(&self.g_store, "g.");
        let mut optimizer = export_adam(&self.g_opt, &self.g_store, "g.adam.");
        if let Some(gan) = &self.gan {
            model.extend(checkpoint::export_store(&gan.store, "d."));
            optimizer.extend(export_adam(&gan.opt, &gan.store, "d.adam."));
        }
        let mut rng = checkpoint::export_rng(&self.sampler, "sampler.");
        rng.push(NamedTensor::new("global.step", checkpoint::scalar_u64(self.step)));
        Checkpoint {
            config: self.config.to_text(),
            model,
            optimizer,
            rng,
        }
    }

    fn attention(&self) -> FsaConfig {
        FsaConfig {
            pool_size: self.config.pool_size,
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.config.barrier_timeout_ms)
    }

    /// Draws one batch of aligned crops with the sampler stream.
    pub fn sample_batch(&mut self, data: &[ImagePair]) -> Result<(Tensor, Tensor)> {
        if data.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        let mut lrs = Vec::with_capacity(self.config.batch_size);
        let mut hrs = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let pair = &data[self.sampler.random_range(0..data.len())];
            let crop = random_crop_pair(pair, self.config.crop_size, &mut self.sampler)
                .map_err(|e| Error::Data(format!("{}: {e}", pair.id)))?;
            lrs.push(normalize_lr(&crop.lr));
            hrs.push(normalize_hr(&crop.hr));
        }
        Ok((Tensor::concat_batch(&lrs)?, Tensor::concat_batch(&hrs)?))
    }

    /// Runs `config.steps` global steps, calling `on_checkpoint` every
    /// `checkpoint_interval` steps, and returns the final checkpoint.
    pub fn run(
        &mut self,
        data: &[ImagePair],
        on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    ) -> Result<Checkpoint> {
        if data.is_empty() {
            return Err(Error::Data("training dataset is empty".into()));
        }
        for _ in 0..self.config.steps {
            let log = self.step_once(data)?;
            log::info!("{log}");
            self.logs.push(log);
            let interval = self.config.checkpoint_interval;
            if interval > 0 && self.step.is_multiple_of(interval) {
                on_checkpoint(&self.checkpoint())?;
            }
        }
        Ok(self.checkpoint())
    }

    /// One global step of the configured phase.
    pub fn step_once(&mut self, data: &[ImagePair]) -> Result<StepLog> {
        let start = Instant::now();
        let (lr, hr) = self.sample_batch(data)?;
        let step = self.step + 1;
        self.g_store.refresh_spectral(1);
        let log = match self.config.phase {
            Phase::Resnet => {
                let content = self.generator_update(&lr, &hr)?.0;
                StepLog {
                    step,
                    phase: Phase::Resnet,
                    content,
                    d_loss: None,
                    g_adv: None,
                    d_accuracy: None,
                    wall_ms: 0.0,
                }
            }
            Phase::Gan => {
                if let Some(gan) = &mut self.gan {
                    gan.store.refresh_spectral(1);
                }
                let (d_loss, acc) = self.discriminator_update(&lr, &hr)?;
                let (content, g_adv) = self.generator_update(&lr, &hr)?;
                self.track_collapse(acc);
                StepLog {
                    step,
                    phase: Phase::Gan,
                    content,
                    d_loss: Some(d_loss),
                    g_adv: Some(g_adv),
                    d_accuracy: Some(acc),
                    wall_ms: 0.0,
                }
            }
        };
        self.step = step;
        Ok(StepLog {
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            ..log
        })
    }

    fn track_collapse(&mut self, accuracy: f64) {
        if accuracy >= 1.0 {
            self.perfect_d_steps += 1;
        } else {
            self.perfect_d_steps = 0;
        }
        if self.perfect_d_steps >= COLLAPSE_WINDOW && !self.collapse_warned {
            log::warn!(
                "discriminator accuracy has been 1.0 for {} steps; the generator may have collapsed",
                self.perfect_d_steps
            );
            self.collapse_warned = true;
        }
    }

    pub fn collapse_warned(&self) -> bool {
        self.collapse_warned
    }

    fn abort(&self, step: u64, err: Error) -> Error {
        if err.exit_code() == 4 {
            Error::NumericAbort {
                step,
                reason: err.to_string(),
                last_good: Some(Box::new(self.checkpoint())),
            }
        } else {
            err
        }
    }

    /// Sharded generator update; returns mean `(content, adversarial)` losses.
    fn generator_update(&mut self, lr: &Tensor, hr: &Tensor) -> Result<(f64, f64)> {
        let step = self.step + 1;
        let workers = self.config.workers;
        let lr_shards = shard_batch(lr, workers)?;
        let hr_shards = shard_batch(hr, workers)?;
        let (generator, g_store) = (&self.generator, &self.g_store);
        let gan = self.gan.as_ref().map(|g| (&g.disc, &g.store));
        let (fsa, bn_mode, weights) = (self.attention(), self.config.batch_norm, self.config.loss_weights());

        let results = run_workers(workers, self.timeout(), |w| {
            let mut tape = Tape::new();
            let mut net = Net::new(g_store, true, bn_mode);
            let x = tape.constant(lr_shards[w].clone());
            let y = tape.constant(hr_shards[w].clone());
            let sr = generator.forward(&mut tape, &mut net, x, fsa)?;
            let content = losses::content_loss(&mut tape, sr, y)?;
            let (loss, adv) = match gan {
                Some((disc, d_store)) => {
                    let mut d_net = Net::new(d_store, false, bn_mode);
                    let d_fake = disc.forward(&mut tape, &mut d_net, sr, fsa)?;
                    let adv = losses::generator_adversarial_loss(&mut tape, d_fake)?;
                    (losses::perceptual(&mut tape, content, adv, &weights)?, Some(adv))
                }
                None => (tape.scale(content, weights.content_weight)?, None),
            };
            let grads = net.gradients(&tape.backward(loss)?);
            if !grads.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            Ok(ShardResult {
                grads,
                bn: std::mem::take(&mut net.bn_updates),
                losses: [
                    tape.value(content).item()?,
                    adv.map_or(Ok(0.0), |a| tape.value(a).item())?,
                ],
                correct: 0,
            })
        })
        .map_err(|e| self.abort(step, e))?;

        let (grads, bn, losses) = reduce(&results)?;
        self.g_opt.step(&mut self.g_store, &grads)?;
        apply_bn_updates(&mut self.g_store, &bn);
        self.audit.record(step, UpdateKind::Generator);
        Ok((losses[0], losses[1]))
    }

    /// Sharded discriminator update; returns mean loss and batch accuracy.
    fn discriminator_update(&mut self, lr: &Tensor, hr: &Tensor) -> Result<(f64, f64)> {
        let step = self.step + 1;
        let workers = self.config.workers;
        let lr_shards = shard_batch(lr, workers)?;
        let hr_shards = shard_batch(hr, workers)?;
        let Some(gan) = &self.gan else {
            return Err(Error::Contract("discriminator update outside the adversarial phase".into()));
        };
        let (generator, g_store) = (&self.generator, &self.g_store);
        let (disc, d_store) = (&gan.disc, &gan.store);
        let (fsa, bn_mode) = (self.attention(), self.config.batch_norm);

        let results = run_workers(workers, self.timeout(), |w| {
            // Generated images are constants here; the generator's batch
            // statistics from this pass are not folded into its running stats.
            let mut g_tape = Tape::inference();
            let mut g_net = Net::new(g_store, false, bn_mode);
            let x = g_tape.constant(lr_shards[w].clone());
            let sr = generator.forward(&mut g_tape, &mut g_net, x, fsa)?;
            let fake = g_tape.value(sr).clone();

            let mut tape = Tape::new();
            let mut net = Net::new(d_store, true, bn_mode);
            let real = tape.constant(hr_shards[w].clone());
            let fake = tape.constant(fake);
            let d_real = disc.forward(&mut tape, &mut net, real, fsa)?;
            let d_fake = disc.forward(&mut tape, &mut net, fake, fsa)?;
            let loss = losses::discriminator_loss(&mut tape, d_real, d_fake)?;
            let grads = net.gradients(&tape.backward(loss)?);
            if !grads.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            let correct = tape.value(d_real).data().iter().filter(|&&p| p > 0.5).count()
                + tape.value(d_fake).data().iter().filter(|&&p| p < 0.5).count();
            Ok(ShardResult {
                grads,
                bn: std::mem::take(&mut net.bn_updates),
                losses: [tape.value(loss).item()?, 0.0],
                correct,
            })
        })
        .map_err(|e| self.abort(step, e))?;

        let (grads, bn, losses) = reduce(&results)?;
        let correct: usize = results.iter().map(|r| r.correct).sum();
        let gan = self.gan.as_mut().expect("checked above");
        gan.opt.step(&mut gan.store, &grads)?;
        apply_bn_updates(&mut gan.store, &bn);
        self.audit.record(step, UpdateKind::Discriminator);
        Ok((losses[0], correct as f64 / (2 * self.config.batch_size) as f64))
    }
}

/// Averages worker results in worker order.
fn reduce(results: &[ShardResult]) -> Result<(GradMap, Vec<BnUpdate>, [f64; 2])> {
    let maps: Vec<GradMap> = results.iter().map(|r| r.grads.clone()).collect();
    let grads = average_gradients(&maps)?;
    let bn: Vec<Vec<BnUpdate>> = results.iter().map(|r| r.bn.clone()).collect();
    let bn = average_bn_updates(&bn)?;
    let n = results.len() as f64;
    let mut losses = [0.0; 2];
    for r in results {
        losses[0] += r.losses[0];
        losses[1] += r.losses[1];
    }
    Ok((grads, bn, [losses[0] / n, losses[1] / n]))
}

fn fresh_gan(config: &TrainConfig) -> Result<GanState> {
    let (disc, store) = build_discriminator(&config.discriminator(), config.seed ^ DISC_SALT)?;
    let opt = Adam::new(config.learning_rate, &store);
    Ok(GanState { disc, store, opt })
}

fn export_adam(opt: &Adam, store: &ParamStore, prefix: &str) -> Vec<NamedTensor> {
    let mut out = vec![NamedTensor::new(format!("{prefix}step"), checkpoint::scalar_u64(opt.step))];
    for (k, id) in store.learnable_ids().into_iter().enumerate() {
        let name = store.name(id);
        out.push(NamedTensor::new(format!("{prefix}m.{name}"), opt.m[k].clone()));
        out.push(NamedTensor::new(format!("{prefix}v.{name}"), opt.v[k].clone()));
    }
    out
}

fn import_adam(opt: &mut Adam, store: &ParamStore, group: &[NamedTensor], prefix: &str) -> Result<()> {
    opt.step = checkpoint::read_u64(group, &format!("{prefix}step"))?;
    for (k, id) in store.learnable_ids().into_iter().enumerate() {
        let name = store.name(id);
        for (moment, slot) in [("m", &mut opt.m[k]), ("v", &mut opt.v[k])] {
            let full = format!("{prefix}{moment}.{name}");
            let t = group
                .iter()
                .find(|t| t.name == full)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor `{full}`")))?;
            if t.tensor.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{full}` has shape {:?}, expected {:?}",
                    t.tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = t.tensor.clone();
        }
    }
    Ok(())
}

/// Content-loss training from scratch.
pub fn train_resnet(config: TrainConfig, data: &[ImagePair]) -> Result<Checkpoint> {
    if config.phase != Phase::Resnet {
        return Err(Error::Config("train_resnet needs phase = resnet".into()));
    }
    Trainer::new(config)?.run(data, &mut |_| Ok(()))
}

/// Adversarial fine-tuning starting from `init`.
pub fn train_gan(config: TrainConfig, data: &[ImagePair], init: &Checkpoint) -> Result<Checkpoint> {
    if config.phase != Phase::Gan {
        return Err(Error::Config("train_gan needs phase = gan".into()));
    }
    Trainer::resume(config, init)?.run(data, &mut |_| Ok(()))
}

/// Generator and parameters stored in a checkpoint.
pub fn load_generator(ckpt: &Checkpoint) -> Result<(Generator, ParamStore)> {
    let config = TrainConfig::parse(&ckpt.config).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let (g, mut store) = build_generator(&config.generator, config.seed)?;
    checkpoint::import_store(&mut store, &ckpt.model, "g.")?;
    Ok((g, store))
}
