//! Generator and discriminator networks.
//!
//! The generator is an SRResNet: a k9 head, `B` residual blocks, an optional
//! attention layer, a post-trunk conv/BN with a long skip, two ×2
//! pixel-shuffle upsampling stages and a k9 output conv with `tanh`. The
//! discriminator is the SRGAN stack of strided conv/BN/LeakyReLU blocks
//! followed by two dense layers and a sigmoid.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{FsaConfig, SelfAttention};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, BnMode, Conv2d, Dense, Net, PRelu, ParamStore};
use crate::tensor::Tensor;

/// Upscaling factor of the generator (two ×2 pixel-shuffle stages).
pub const SCALE: usize = 4;

/// LeakyReLU slope in the discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub residual_blocks: usize,
    pub features: usize,
    pub use_attention: bool,
    /// Number of residual blocks preceding the attention layer; `None`
    /// places it after the last block.
    pub attention_position: Option<usize>,
    pub use_spectral_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            residual_blocks: 16,
            features: 64,
            use_attention: true,
            attention_position: None,
            use_spectral_norm: true,
        }
    }
}

impl GeneratorConfig {
    pub fn attention_index(&self) -> usize {
        self.attention_position.unwrap_or(self.residual_blocks)
    }

    pub fn validate(&self) -> Result<()> {
        if self.residual_blocks == 0 {
            return Err(Error::Config("generator needs at least one residual block".into()));
        }
        if self.features == 0 {
            return Err(Error::Config("generator feature count must be positive".into()));
        }
        if self.attention_index() > self.residual_blocks {
            return Err(Error::Config(format!(
                "attention position {} exceeds the {} residual blocks",
                self.attention_index(),
                self.residual_blocks
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub features: usize,
    pub dense_features: usize,
    /// Spatial side of the (square) HR crops the discriminator scores.
    pub input_size: usize,
    pub use_attention: bool,
    pub use_spectral_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            features: 64,
            dense_features: 1024,
            input_size: 96,
            use_attention: true,
            use_spectral_norm: true,
        }
    }
}

/// Channel multipliers and strides of the seven discriminator blocks.
const DISC_BLOCKS: [(usize, usize); 7] = [(1, 2), (2, 1), (2, 2), (4, 1), (4, 2), (8, 1), (8, 2)];
/// Attention follows the second 4× block.
const DISC_ATTENTION_AFTER: usize = 4;
/// Smallest input side the stride stack accepts.
pub const DISC_MIN_INPUT: usize = 16;

impl DiscriminatorConfig {
    fn final_side(&self) -> usize {
        DISC_BLOCKS
            .iter()
            .fold(self.input_size, |side, &(_, s)| side.div_ceil(s))
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.dense_features == 0 {
            return Err(Error::Config("discriminator feature counts must be positive".into()));
        }
        if self.input_size < DISC_MIN_INPUT {
            return Err(Error::shape(format!(
                "discriminator input {} is smaller than the stride stack minimum {DISC_MIN_INPUT}",
                self.input_size
            )));
        }
        Ok(())
    }
}

/// One row of a printable architecture summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub layer: String,
    pub kind: &'static str,
    pub kernel: Option<usize>,
    pub features: usize,
    pub stride: Option<usize>,
    pub params: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelSummary {
    pub rows: Vec<SummaryRow>,
}

impl ModelSummary {
    fn conv(&mut self, layer: impl Into<String>, c: &Conv2d) {
        self.rows.push(SummaryRow {
            layer: layer.into(),
            kind: "conv",
            kernel: Some(c.kernel),
            features: c.out_channels,
            stride: Some(c.stride),
            params: c.param_count(),
        });
    }

    fn push(&mut self, layer: impl Into<String>, kind: &'static str, features: usize, params: usize) {
        self.rows.push(SummaryRow {
            layer: layer.into(),
            kind,
            kernel: None,
            features,
            stride: None,
            params,
        });
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }
}

impl fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:<10} {:>4} {:>6} {:>3} {:>12}", "layer", "kind", "k", "n", "s", "params")?;
        for r in &self.rows {
            let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
            writeln!(
                f,
                "{:<24} {:<10} {:>4} {:>6} {:>3} {:>12}",
                r.layer,
                r.kind,
                opt(r.kernel),
                r.features,
                opt(r.stride),
                r.params
            )?;
        }
        write!(f, "{:<24} {:<10} {:>4} {:>6} {:>3} {:>12}", "total", "", "", "", "", self.total_params())
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act: PRelu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

#[derive(Clone, Debug)]
struct Upsample {
    conv: Conv2d,
    act: PRelu,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    head: Conv2d,
    head_act: PRelu,
    blocks: Vec<ResidualBlock>,
    attention: Option<SelfAttention>,
    post: Conv2d,
    post_bn: BatchNorm2d,
    upsample: Vec<Upsample>,
    out: Conv2d,
}

/// Builds a generator and its freshly initialized parameters.
pub fn build_generator(config: &GeneratorConfig, seed: u64) -> Result<(Generator, ParamStore)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (n, sn) = (config.features, config.use_spectral_norm);
    let s = &mut store;
    let r = &mut rng;

    let head = Conv2d::new(s, "head.conv", 3, n, 9, 1, true, sn, r)?;
    let head_act = PRelu::new(s, "head.prelu", n)?;
    let mut blocks = Vec::with_capacity(config.residual_blocks);
    let mut attention = None;
    for i in 0..config.residual_blocks {
        if config.use_attention && config.attention_index() == i {
            attention = Some(SelfAttention::new(s, "attention", n, sn, r)?);
        }
        blocks.push(ResidualBlock {
            conv1: Conv2d::new(s, &format!("block{i}.conv1"), n, n, 3, 1, true, sn, r)?,
            bn1: BatchNorm2d::new(s, &format!("block{i}.bn1"), n)?,
            act: PRelu::new(s, &format!("block{i}.prelu"), n)?,
            conv2: Conv2d::new(s, &format!("block{i}.conv2"), n, n, 3, 1, true, sn, r)?,
            bn2: BatchNorm2d::new(s, &format!("block{i}.bn2"), n)?,
        });
    }
    if config.use_attention && config.attention_index() == config.residual_blocks {
        attention = Some(SelfAttention::new(s, "attention", n, sn, r)?);
    }
    let post = Conv2d::new(s, "post.conv", n, n, 3, 1, true, sn, r)?;
    let post_bn = BatchNorm2d::new(s, "post.bn", n)?;
    let upsample = (0..2)
        .map(|i| {
            Ok(Upsample {
                conv: Conv2d::new(s, &format!("up{i}.conv"), n, 4 * n, 3, 1, true, sn, r)?,
                act: PRelu::new(s, &format!("up{i}.prelu"), n)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = Conv2d::new(s, "out.conv", n, 3, 9, 1, true, sn, r)?;

    Ok((
        Generator {
            config: config.clone(),
            head,
            head_act,
            blocks,
            attention,
            post,
            post_bn,
            upsample,
            out,
        },
        store,
    ))
}

impl Generator {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn attention(&self) -> Option<&SelfAttention> {
        self.attention.as_ref()
    }

    /// Maps an LR batch `[N, 3, h, w]` in `[0, 1]` to SR `[N, 3, 4h, 4w]` in `[-1, 1]`.
    pub fn forward(&self, tape: &mut Tape, net: &mut Net, lr: Var, attention: FsaConfig) -> Result<Var> {
        self.forward_with_attention(tape, net, lr, attention).map(|(y, _)| y)
    }

    /// Like [`forward`](Self::forward), also returning the attention map
    /// variable when the generator has an attention layer.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        net: &mut Net,
        lr: Var,
        attention: FsaConfig,
    ) -> Result<(Var, Option<Var>)> {
        let (_, c, _, _) = tape.value(lr).dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("generator expects 3 input channels, got {c}")));
        }
        let x = self.head.forward(tape, net, lr)?;
        let head = self.head_act.forward(tape, net, x)?;
        let mut x = head;
        let mut beta = None;
        let attention_at = self.config.attention_index();
        for i in 0..=self.blocks.len() {
            if i == attention_at {
                if let Some(a) = &self.attention {
                    let (y, b) = a.forward_with_map(tape, net, x, attention)?;
                    x = y;
                    beta = Some(b);
                }
            }
            let Some(block) = self.blocks.get(i) else { break };
            let y = block.conv1.forward(tape, net, x)?;
            let y = block.bn1.forward(tape, net, y)?;
            let y = block.act.forward(tape, net, y)?;
            let y = block.conv2.forward(tape, net, y)?;
            let y = block.bn2.forward(tape, net, y)?;
            x = tape.add(x, y)?;
        }
        let y = self.post.forward(tape, net, x)?;
        let y = self.post_bn.forward(tape, net, y)?;
        let mut x = tape.add(y, head)?;
        for up in &self.upsample {
            let y = up.conv.forward(tape, net, x)?;
            let y = tape.pixel_shuffle(y, 2)?;
            x = up.act.forward(tape, net, y)?;
        }
        let y = self.out.forward(tape, net, x)?;
        Ok((tape.tanh(y)?, beta))
    }

    /// Inference with running batch-norm statistics.
    pub fn super_resolve(&self, store: &ParamStore, lr: &Tensor, attention: FsaConfig) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let mut net = Net::new(store, false, BnMode::Eval);
        let x = tape.constant(lr.clone());
        let y = self.forward(&mut tape, &mut net, x, attention)?;
        Ok(tape.value(y).clone())
    }

    pub fn summary(&self) -> ModelSummary {
        let mut s = ModelSummary::default();
        let n = self.config.features;
        s.conv("head.conv", &self.head);
        s.push("head.prelu", "prelu", n, n);
        let attention_row = |s: &mut ModelSummary, a: &SelfAttention| {
            s.push("attention", "attention", a.channels, a.param_count());
        };
        for (i, b) in self.blocks.iter().enumerate() {
            if i == self.config.attention_index() {
                if let Some(a) = &self.attention {
                    attention_row(&mut s, a);
                }
            }
            s.conv(format!("block{i}.conv1"), &b.conv1);
            s.push(format!("block{i}.bn1"), "batchnorm", n, b.bn1.param_count());
            s.push(format!("block{i}.prelu"), "prelu", n, n);
            s.conv(format!("block{i}.conv2"), &b.conv2);
            s.push(format!("block{i}.bn2"), "batchnorm", n, b.bn2.param_count());
        }
        if self.config.attention_index() == self.blocks.len() {
            if let Some(a) = &self.attention {
                attention_row(&mut s, a);
            }
        }
        s.conv("post.conv", &self.post);
        s.push("post.bn", "batchnorm", n, self.post_bn.param_count());
        for (i, up) in self.upsample.iter().enumerate() {
            s.conv(format!("up{i}.conv"), &up.conv);
            s.push(format!("up{i}.shuffle"), "shuffle×2", n, 0);
            s.push(format!("up{i}.prelu"), "prelu", n, n);
        }
        s.conv("out.conv", &self.out);
        s.push("out.tanh", "tanh", 3, 0);
        s
    }
}

#[derive(Clone, Debug)]
struct DiscBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    head: Conv2d,
    blocks: Vec<DiscBlock>,
    attention: Option<SelfAttention>,
    dense: Dense,
    logit: Dense,
}

pub fn build_discriminator(config: &DiscriminatorConfig, seed: u64) -> Result<(Discriminator, ParamStore)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (n, sn) = (config.features, config.use_spectral_norm);
    let s = &mut store;
    let r = &mut rng;

    let head = Conv2d::new(s, "head.conv", 3, n, 3, 1, true, sn, r)?;
    let mut blocks = Vec::new();
    let mut attention = None;
    let mut channels = n;
    for (i, &(mult, stride)) in DISC_BLOCKS.iter().enumerate() {
        let out = mult * n;
        blocks.push(DiscBlock {
            conv: Conv2d::new(s, &format!("block{i}.conv"), channels, out, 3, stride, true, sn, r)?,
            bn: BatchNorm2d::new(s, &format!("block{i}.bn"), out)?,
        });
        channels = out;
        if config.use_attention && i == DISC_ATTENTION_AFTER {
            attention = Some(SelfAttention::new(s, "attention", channels, sn, r)?);
        }
    }
    let side = config.final_side();
    let flat = channels * side * side;
    let dense = Dense::new(s, "dense", flat, config.dense_features, sn, r)?;
    let logit = Dense::new(s, "logit", config.dense_features, 1, sn, r)?;
    Ok((
        Discriminator {
            config: config.clone(),
            head,
            blocks,
            attention,
            dense,
            logit,
        },
        store,
    ))
}

impl Discriminator {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// Probability `[N, 1]` that each HR-range image is real.
    pub fn forward(&self, tape: &mut Tape, net: &mut Net, x: Var, attention: FsaConfig) -> Result<Var> {
        let (n, c, h, w) = tape.value(x).dims4()?;
        let size = self.config.input_size;
        if c != 3 || h != size || w != size {
            return Err(Error::shape(format!(
                "discriminator expects [N, 3, {size}, {size}], got [{n}, {c}, {h}, {w}]"
            )));
        }
        let y = self.head.forward(tape, net, x)?;
        let mut x = tape.leaky_relu(y, LEAKY_SLOPE)?;
        for (i, b) in self.blocks.iter().enumerate() {
            let y = b.conv.forward(tape, net, x)?;
            let y = b.bn.forward(tape, net, y)?;
            x = tape.leaky_relu(y, LEAKY_SLOPE)?;
            if i == DISC_ATTENTION_AFTER {
                if let Some(a) = &self.attention {
                    x = a.forward(tape, net, x, attention)?;
                }
            }
        }
        let flat = tape.value(x).len() / n;
        let x = tape.reshape(x, &[n, flat])?;
        let y = self.dense.forward(tape, net, x)?;
        let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
        let y = self.logit.forward(tape, net, y)?;
        tape.sigmoid(y)
    }

    pub fn summary(&self) -> ModelSummary {
        let mut s = ModelSummary::default();
        s.conv("head.conv", &self.head);
        s.push("head.lrelu", "lrelu", self.head.out_channels, 0);
        for (i, b) in self.blocks.iter().enumerate() {
            s.conv(format!("block{i}.conv"), &b.conv);
            s.push(format!("block{i}.bn"), "batchnorm", b.bn.channels, b.bn.param_count());
            s.push(format!("block{i}.lrelu"), "lrelu", b.bn.channels, 0);
            if i == DISC_ATTENTION_AFTER {
                if let Some(a) = &self.attention {
                    s.push("attention", "attention", a.channels, a.param_count());
                }
            }
        }
        s.push("dense", "dense", self.dense.out_features, self.dense.param_count());
        s.push("dense.lrelu", "lrelu", self.dense.out_features, 0);
        s.push("logit", "dense", 1, self.logit.param_count());
        s.push("logit.sigmoid", "sigmoid", 1, 0);
        s
    }
}
