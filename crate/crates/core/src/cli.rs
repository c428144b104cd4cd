//! Command-line front end: `train`, `sr`, `eval`, `bench-fsa` and `summary`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! abort, 1 anything else.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, attention_map_elements, FsaConfig, SelfAttention};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::imaging::{self, Image};
use crate::layers::{BnMode, Net, ParamStore};
use crate::metrics::{self, Bicubic, GeneratorResolver, SuperResolver};
use crate::models::{build_discriminator, build_generator};
use crate::tensor::Tensor;
use crate::train::{self, Checkpoint, Phase, TrainConfig, Trainer};

/// Default cap on attention-map elements (2^27 `f64`s, 1 GiB).
pub const DEFAULT_MAX_ATTENTION_ELEMENTS: u128 = 1 << 27;

#[derive(Debug, Parser)]
#[command(name = "asrgan", version, about = "Attentional super-resolution GAN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Resnet,
    Gan,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the generator (resnet) or fine-tune adversarially (gan).
    Train {
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// `key = value` training config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset manifest (`hr_path<TAB>lr_path` per line).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from; required for the gan phase.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Super-resolve one PNG image 4×.
    Sr {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Attention pooling factor at inference.
        #[arg(long, default_value_t = 4)]
        pool_size: usize,
        /// Write the attention map as a grayscale PNG.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_ATTENTION_ELEMENTS)]
        max_attention_elements: u128,
    },
    /// PSNR/SSIM of a model (or `bicubic`) on a manifest, with a bicubic baseline.
    Eval {
        /// Checkpoint path, or `bicubic`.
        #[arg(long)]
        model: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Report path (TSV); a `key=value` summary is written alongside.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        pool_size: usize,
    },
    /// Attention-map size, peak allocation and time per (size, pool).
    BenchFsa {
        /// Comma-separated square input sides.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Comma-separated pool sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        pools: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_ATTENTION_ELEMENTS)]
        max_attention_elements: u128,
    },
    /// Print generator and discriminator layer tables for a config.
    Summary {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train {
            phase,
            config,
            data,
            init,
            out,
        } => cmd_train(phase, config.as_deref(), &data, init.as_deref(), &out),
        Command::Sr {
            model,
            input,
            out,
            pool_size,
            dump_attention,
            max_attention_elements,
        } => cmd_sr(
            &model,
            &input,
            &out,
            pool_size,
            dump_attention.as_deref(),
            max_attention_elements,
        ),
        Command::Eval {
            model,
            manifest,
            out,
            pool_size,
        } => cmd_eval(&model, &manifest, &out, pool_size),
        Command::BenchFsa {
            sizes,
            pools,
            out,
            channels,
            max_attention_elements,
        } => cmd_bench_fsa(&sizes, &pools, &out, channels, max_attention_elements),
        Command::Summary { config } => {
            let config = match config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            print!("{}", summary_text(&config)?);
            Ok(())
        }
    }
}

/// Record of one command invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub resolved_config: String,
    pub output: PathBuf,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    fn start(command: &str, config_path: Option<&Path>, resolved_config: String, output: &Path) -> Self {
        RunManifest {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            resolved_config,
            output: output.to_path_buf(),
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(
            s,
            "config_path = {}",
            self.config_path.as_ref().map_or("-".into(), |p| p.display().to_string())
        );
        let _ = writeln!(s, "output = {}", self.output.display());
        let _ = writeln!(s, "started_unix_ms = {}", self.started_unix_ms);
        let _ = writeln!(s, "finished_unix_ms = {}", self.finished_unix_ms);
        s.push_str("[resolved_config]\n");
        s.push_str(&self.resolved_config);
        s
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.finished_unix_ms = unix_ms();
        write_file(path, self.to_text())
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn cmd_train(
    phase: PhaseArg,
    config_path: Option<&Path>,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut config = match config_path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    config.phase = match phase {
        PhaseArg::Resnet => Phase::Resnet,
        PhaseArg::Gan => Phase::Gan,
    };
    config.validate()?;
    if config.phase == Phase::Gan && init.is_none() {
        return Err(Error::Config("the gan phase requires --init with a generator checkpoint".into()));
    }
    let dataset = imaging::load_dataset(data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = config.to_text();
    write_file(&out.join("config.resolved"), &resolved)?;
    let manifest = RunManifest::start("train", config_path, resolved, out);

    let mut trainer = match init {
        Some(p) => Trainer::resume(config, &Checkpoint::load(p)?)?,
        None => Trainer::new(config)?,
    };
    let mut on_checkpoint = |c: &Checkpoint| -> Result<()> {
        let step = train::checkpoint::read_u64(&c.rng, "global.step")?;
        c.save(out.join(format!("step_{step:06}.ckpt")))
    };
    let result = trainer.run(&dataset, &mut on_checkpoint);
    let log: String = trainer.logs.iter().map(|l| format!("{l}\n")).collect();
    write_file(&out.join("train.log"), log)?;
    match result {
        Ok(final_ckpt) => {
            final_ckpt.save(out.join("final.ckpt"))?;
            manifest.finish(&out.join("run_manifest.txt"))
        }
        Err(Error::NumericAbort {
            step,
            reason,
            last_good,
        }) => {
            if let Some(c) = &last_good {
                c.save(out.join("last_good.ckpt"))?;
            }
            Err(Error::NumericAbort {
                step,
                reason,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

fn load_model(path: &Path) -> Result<(crate::models::Generator, ParamStore, String)> {
    let ckpt = Checkpoint::load(path)?;
    let (g, store) = train::load_generator(&ckpt)?;
    Ok((g, store, ckpt.config))
}

/// Grayscale rendering of an attention map, scaled to its maximum.
pub fn attention_image(beta: &Tensor) -> Result<Image> {
    let n = beta.shape()[0];
    let max = beta.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    Image::from_fn(n, n, |x, y| {
        let v = (beta.data()[y * n + x] * scale).round().clamp(0.0, 255.0) as u8;
        [v, v, v]
    })
}

fn cmd_sr(
    model: &Path,
    input: &Path,
    out: &Path,
    pool_size: usize,
    dump_attention: Option<&Path>,
    cap: u128,
) -> Result<()> {
    let fsa = FsaConfig::new(pool_size)?;
    let (generator, store, config) = load_model(model)?;
    let manifest = RunManifest::start("sr", Some(model), config, out);
    let lr = imaging::load_image(input)?;
    if generator.attention().is_some() {
        let elements = attention_map_elements(lr.height(), lr.width(), pool_size);
        if elements > cap {
            return Err(Error::AttentionTooLarge {
                elements,
                cap,
                pool_size,
            });
        }
    }
    let mut tape = Tape::inference();
    let mut net = Net::new(&store, false, BnMode::Eval);
    let x = tape.constant(imaging::normalize_lr(&lr));
    let (y, beta) = generator.forward_with_attention(&mut tape, &mut net, x, fsa)?;
    imaging::save_image(&imaging::denormalize_sr(tape.value(y))?, out)?;
    if let Some(path) = dump_attention {
        let beta = beta.ok_or_else(|| Error::Config("model has no attention layer to dump".into()))?;
        let b = tape.value(beta);
        let np = b.shape()[1];
        imaging::save_image(&attention_image(&b.slice_batch(0, 1)?.reshape(&[np, np])?)?, path)?;
    }
    manifest.finish(&sidecar(out, ".manifest.txt"))
}

fn cmd_eval(model: &str, manifest_path: &Path, out: &Path, pool_size: usize) -> Result<()> {
    let fsa = FsaConfig::new(pool_size)?;
    let baseline = metrics::evaluate_set(&Bicubic, manifest_path)?;
    let loaded = match model {
        "bicubic" => None,
        path => Some(load_model(Path::new(path))?),
    };
    let config_text = loaded.as_ref().map_or(String::new(), |l| l.2.clone());
    let run = RunManifest::start("eval", None, config_text, out);
    let eval = match &loaded {
        Some((generator, store, _)) => {
            let resolver = GeneratorResolver {
                generator,
                store,
                attention: fsa,
            };
            metrics::evaluate_set(&resolver as &dyn SuperResolver, manifest_path)?
        }
        None => baseline.clone(),
    };
    let mut baseline_summary = baseline.summary.clone();
    baseline_summary.name = "baseline_bicubic".into();
    write_file(out, metrics::tsv_report(&eval, &[&baseline_summary]))?;
    write_file(
        &sidecar(out, ".summary"),
        metrics::summary_kv(&eval.summary, Some(&baseline_summary)),
    )?;
    let (p, s) = eval.summary.meets_targets();
    println!(
        "mean psnr {:.4} dB (target met: {p}), mean ssim {:.4} (target met: {s})",
        eval.summary.mean_psnr, eval.summary.mean_ssim
    );
    run.finish(&sidecar(out, ".manifest.txt"))
}

/// One benchmark row.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub pool: usize,
    pub map_side: u128,
    pub map_elements: u128,
    pub peak_elements: Option<usize>,
    pub forward_ms: Option<f64>,
    pub status: &'static str,
}

/// Runs flexible attention on a random `channels × size × size` input per
/// `(size, pool)`; configurations over `cap` map elements are skipped.
pub fn bench_fsa(sizes: &[usize], pools: &[usize], channels: usize, cap: u128) -> Result<Vec<BenchRow>> {
    if sizes.contains(&0) || pools.contains(&0) {
        return Err(Error::Config("sizes and pools must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let layer = SelfAttention::new(&mut store, "bench", channels, false, &mut rng)?;
    let mut rows = Vec::new();
    for &size in sizes {
        let x = Tensor::randn(&[1, channels, size, size], 1.0, &mut rng);
        for &pool in pools {
            let side = (size.div_ceil(pool) * size.div_ceil(pool)) as u128;
            let elements = attention_map_elements(size, size, pool);
            if elements > cap {
                rows.push(BenchRow {
                    size,
                    pool,
                    map_side: side,
                    map_elements: elements,
                    peak_elements: None,
                    forward_ms: None,
                    status: "skipped(oom-guard)",
                });
                continue;
            }
            attention::reset_peak_map_elements();
            let start = Instant::now();
            attention::fsa(&store, &layer, &x, FsaConfig::new(pool)?)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            rows.push(BenchRow {
                size,
                pool,
                map_side: side,
                map_elements: elements,
                peak_elements: Some(attention::peak_map_elements()),
                forward_ms: Some(ms),
                status: "ok",
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("size,pool,map_side,map_elements,peak_elements,forward_ms,status\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.size,
            r.pool,
            r.map_side,
            r.map_elements,
            r.peak_elements.map_or(String::new(), |p| p.to_string()),
            r.forward_ms.map_or(String::new(), |t| format!("{t:.3}")),
            r.status
        );
    }
    s
}

fn cmd_bench_fsa(sizes: &[usize], pools: &[usize], out: &Path, channels: usize, cap: u128) -> Result<()> {
    let rows = bench_fsa(sizes, pools, channels, cap)?;
    let csv = bench_csv(&rows);
    print!("{csv}");
    write_file(out, csv)
}

/// Layer tables of the networks a config describes.
pub fn summary_text(config: &TrainConfig) -> Result<String> {
    let (g, store) = build_generator(&config.generator, config.seed)?;
    let mut s = format!("generator ({} learnable parameters)\n{}\n", store.learnable_count(), g.summary());
    let dcfg = config.discriminator();
    match build_discriminator(&dcfg, config.seed) {
        Ok((d, store)) => {
            let _ = write!(
                s,
                "\ndiscriminator for {0}×{0} crops ({1} learnable parameters)\n{2}\n",
                dcfg.input_size,
                store.learnable_count(),
                d.summary()
            );
        }
        Err(e) => {
            let _ = writeln!(s, "\ndiscriminator unavailable: {e}");
        }
    }
    Ok(s)
}
