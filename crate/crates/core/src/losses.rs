//! Content, adversarial and perceptual losses.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance probabilities are kept from 0 and 1.
pub const PROB_CLAMP: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub content_weight: f64,
    pub adversarial_weight: f64,
    /// Feature-space content loss factor, recorded for configurations that
    /// add a pretrained feature network; unused here.
    pub vgg_factor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content_weight: 1.0,
            adversarial_weight: 1e-3,
            vgg_factor: 0.0061,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.content_weight < 0.0 || self.adversarial_weight < 0.0 || self.vgg_factor < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pixel-wise MSE between an SR output and its HR reference.
pub fn content_loss_mse(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape(format!(
            "content loss: SR {:?} vs HR {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    let sum: f64 = sr.data().iter().zip(hr.data()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(sum / sr.len() as f64)
}

/// `(d_loss, g_adv_loss)` for scalar discriminator outputs:
/// `d_loss = −ln d_real − ln(1 − d_fake)`, `g_adv = −ln d_fake`.
pub fn gan_losses(d_real: f64, d_fake: f64) -> (f64, f64) {
    let r = d_real.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let f = d_fake.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (-r.ln() - (1.0 - f).ln(), -f.ln())
}

/// `content_weight · content + adversarial_weight · g_adv`.
pub fn perceptual_loss(content: f64, g_adv: f64, weights: &LossWeights) -> f64 {
    weights.content_weight * content + weights.adversarial_weight * g_adv
}

/// Differentiable content loss.
pub fn content_loss(tape: &mut Tape, sr: Var, hr: Var) -> Result<Var> {
    if tape.shape(sr) != tape.shape(hr) {
        return Err(Error::shape(format!(
            "content loss: SR {:?} vs HR {:?}",
            tape.shape(sr),
            tape.shape(hr)
        )));
    }
    tape.mse(sr, hr)
}

fn mean_neg_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let p = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let l = tape.log(p)?;
    let m = tape.mean(l)?;
    tape.scale(m, -1.0)
}

/// Batch-mean discriminator loss from per-sample probabilities.
pub fn discriminator_loss(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = mean_neg_log(tape, d_real)?;
    let not_fake = tape.one_minus(d_fake)?;
    let fake = mean_neg_log(tape, not_fake)?;
    tape.add(real, fake)
}

/// Batch-mean non-saturating generator adversarial loss.
pub fn generator_adversarial_loss(tape: &mut Tape, d_fake: Var) -> Result<Var> {
    mean_neg_log(tape, d_fake)
}

/// Differentiable weighted sum of content and adversarial losses.
pub fn perceptual(tape: &mut Tape, content: Var, g_adv: Var, weights: &LossWeights) -> Result<Var> {
    let c = tape.scale(content, weights.content_weight)?;
    let a = tape.scale(g_adv, weights.adversarial_weight)?;
    tape.add(c, a)
}
