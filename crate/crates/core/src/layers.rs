//! Learnable layers and the parameter store they live in.
//!
//! Layers are descriptors holding [`ParamId`]s; the values live in a
//! [`ParamStore`]. A forward pass binds store entries onto a [`Tape`]
//! through a [`Net`], which also records batch-norm statistics so that the
//! owner of the store can apply running-stat updates after a step.

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{BatchStats, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer.
    Learnable,
    /// Persistent state that is not trained (running stats, power-iteration vectors).
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry {
    kind: ParamKind,
    value: Tensor,
}

/// Named, ordered collection of parameters and buffers for one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
    spectral: Vec<(ParamId, ParamId)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let (idx, _) = self.entries.insert_full(name, Entry { kind, value });
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id.0).map(|(k, _)| k.as_str()).expect("valid id")
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamKind, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (k, e))| (ParamId(i), k.as_str(), e.kind, &e.value))
    }

    pub fn learnable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, _, kind, _)| *kind == ParamKind::Learnable)
            .map(|(id, ..)| id)
            .collect()
    }

    /// Total number of learnable scalars.
    pub fn learnable_count(&self) -> usize {
        self.iter()
            .filter(|(_, _, kind, _)| *kind == ParamKind::Learnable)
            .map(|(.., t)| t.len())
            .sum()
    }

    /// Declares `u` as the power-iteration vector of `weight`.
    pub fn register_spectral(&mut self, weight: ParamId, u: ParamId) {
        self.spectral.push((weight, u));
    }

    pub fn spectral_pairs(&self) -> &[(ParamId, ParamId)] {
        &self.spectral
    }

    /// Advances every registered power-iteration vector by `iterations`
    /// rounds against its current weight.
    pub fn refresh_spectral(&mut self, iterations: usize) {
        for i in 0..self.spectral.len() {
            let (w, u) = self.spectral[i];
            let weight = self.get(w).clone();
            let (rows, cols) = matrix_dims(&weight);
            power_iteration(weight.data(), rows, cols, self.get_mut(u).data_mut(), iterations);
        }
    }

    /// Replaces the value of `name`, checking that the shape is unchanged.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                value.shape(),
                entry.value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }
}

/// Gradients for every learnable entry of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    pub ids: Vec<ParamId>,
    pub grads: Vec<Tensor>,
}

impl GradMap {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let ids = store.learnable_ids();
        let grads = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        GradMap { ids, grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.ids.iter().position(|&i| i == id).map(|k| &self.grads[k])
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    /// Flattened view of all gradients, for comparisons.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics recorded for the owner to apply.
    Train,
    /// Running statistics.
    Eval,
}

/// A batch-norm statistics observation to fold into running stats.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub tracked: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// Binding of one network's store onto a tape.
pub struct Net<'p> {
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
    pub bn_mode: BnMode,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'p> Net<'p> {
    /// `trainable` decides whether learnable entries become gradient leaves.
    pub fn new(store: &'p ParamStore, trainable: bool, bn_mode: BnMode) -> Self {
        Net {
            store,
            bound: vec![None; store.len()],
            trainable,
            bn_mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Leaf for a store entry, created once per tape.
    pub fn bind(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let learnable = self.trainable && self.store.kind(id) == ParamKind::Learnable;
        let v = tape.leaf(self.store.get(id).clone(), learnable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Collects gradients for all learnable entries; unused entries get zeros.
    pub fn gradients(&self, grads: &Gradients) -> GradMap {
        let ids = self.store.learnable_ids();
        let grads = ids
            .iter()
            .map(|&id| {
                self.bound[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()))
            })
            .collect();
        GradMap { ids, grads }
    }
}

/// Folds batch statistics into running statistics:
/// `running = momentum · running + (1 − momentum) · batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        let m = u.momentum;
        for (r, b) in store
            .get_mut(u.running_mean)
            .data_mut()
            .iter_mut()
            .zip(u.stats.mean.data())
        {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in store
            .get_mut(u.running_var)
            .data_mut()
            .iter_mut()
            .zip(u.stats.var.data())
        {
            *r = m * *r + (1.0 - m) * b;
        }
        store.get_mut(u.tracked).data_mut()[0] += 1.0;
    }
}

// ---------------------------------------------------------------------------
// Spectral normalization
// ---------------------------------------------------------------------------

/// Norm below which a weight matrix is treated as degenerate (zero).
const SIGMA_FLOOR: f64 = 1e-12;

/// A weight viewed as a matrix: leading axis × everything else.
fn matrix_dims(w: &Tensor) -> (usize, usize) {
    let rows = w.shape().first().copied().unwrap_or(1);
    (rows, w.len() / rows)
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < SIGMA_FLOOR {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// `Wᵀu` for row-major `W` (`rows × cols`).
fn wt_u(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        for (o, x) in out.iter_mut().zip(row) {
            *o += u[r] * x;
        }
    }
    out
}

fn w_v(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Power iteration on the left singular vector estimate `u`. `u` keeps its
/// previous value when the iteration collapses to zero.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &mut [f64], iterations: usize) {
    for _ in 0..iterations {
        let mut v = wt_u(w, rows, cols, u);
        if !normalize(&mut v) {
            return;
        }
        let mut next = w_v(w, rows, cols, &v);
        if !normalize(&mut next) {
            return;
        }
        u.copy_from_slice(&next);
    }
}

/// `(σ̂, v)` with `v = Wᵀu / ‖Wᵀu‖` and `σ̂ = uᵀWv = ‖Wᵀu‖`; `None` if degenerate.
fn sigma_and_v(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Option<(f64, Vec<f64>)> {
    let mut v = wt_u(w, rows, cols, u);
    if !normalize(&mut v) {
        return None;
    }
    let sigma: f64 = w_v(w, rows, cols, &v).iter().zip(u).map(|(a, b)| a * b).sum();
    (sigma.abs() >= SIGMA_FLOOR).then_some((sigma, v))
}

/// Random unit vector for initializing power iteration.
pub fn random_unit_vector<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Tensor {
    loop {
        let mut t = Tensor::randn(&[len], 1.0, rng);
        if normalize(t.data_mut()) {
            return t;
        }
    }
}

/// Standalone layer parameters: weight, optional bias, optional
/// spectral-normalization state.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub sn_u: Option<Tensor>,
}

impl LayerParams {
    pub fn with_spectral_state<R: Rng + ?Sized>(weight: Tensor, rng: &mut R) -> Self {
        let rows = matrix_dims(&weight).0;
        LayerParams {
            sn_u: Some(random_unit_vector(rows, rng)),
            weight,
            bias: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SpectralNormOutput {
    /// `W / σ̂`, or `W` itself when degenerate.
    pub weight: Tensor,
    pub sigma: f64,
    pub degenerate: bool,
}

/// Runs `iterations` power-iteration rounds on the persistent `u`, then
/// returns the weight divided by `σ̂ = uᵀWv`.
pub fn spectral_normalize(params: &mut LayerParams, iterations: usize) -> Result<SpectralNormOutput> {
    let (rows, cols) = matrix_dims(&params.weight);
    let u = params
        .sn_u
        .as_mut()
        .ok_or_else(|| Error::Param("spectral_normalize: layer has no spectral state".into()))?;
    if u.len() != rows {
        return Err(Error::shape(format!(
            "spectral state of length {} for a weight with {rows} rows",
            u.len()
        )));
    }
    power_iteration(params.weight.data(), rows, cols, u.data_mut(), iterations);
    Ok(match sigma_and_v(params.weight.data(), rows, cols, u.data()) {
        Some((sigma, _)) => SpectralNormOutput {
            weight: params.weight.map(|x| x / sigma),
            sigma,
            degenerate: false,
        },
        None => SpectralNormOutput {
            weight: params.weight.clone(),
            sigma: 0.0,
            degenerate: true,
        },
    })
}

/// Differentiable `W / σ̂(W)` with `u` held fixed. Since `σ̂ = ‖Wᵀu‖`, its
/// gradient with respect to `W` is exactly `u vᵀ`.
pub fn spectral_weight(tape: &mut Tape, weight: Var, u: &Tensor) -> Result<Var> {
    let w = tape.value(weight);
    let (rows, cols) = matrix_dims(w);
    let Some((_, v)) = sigma_and_v(w.data(), rows, cols, u.data()) else {
        log::debug!("spectral normalization skipped for a degenerate weight");
        return Ok(weight);
    };
    let ud = u.data();
    let outer = Tensor::from_fn(w.shape(), |i| ud[i / cols] * v[i % cols]);
    let outer = tape.constant(outer);
    let weighted = tape.mul(weight, outer)?;
    let sigma = tape.sum(weighted)?;
    tape.div_by(weight, sigma)
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Square-kernel convolution with "same" padding (`k / 2`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spectral_u: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
        spectral: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("{name}: kernel size {kernel} must be odd")));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Learnable,
            he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = with_bias
            .then(|| store.add(format!("{name}.bias"), ParamKind::Learnable, Tensor::zeros(&[out_channels])))
            .transpose()?;
        let spectral_u = if spectral {
            let u = store.add(
                format!("{name}.sn_u"),
                ParamKind::Buffer,
                random_unit_vector(out_channels, rng),
            )?;
            store.register_spectral(weight, u);
            Some(u)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            spectral_u,
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn forward(&self, tape: &mut Tape, net: &mut Net, x: Var) -> Result<Var> {
        let w = effective_weight(tape, net, self.weight, self.spectral_u)?;
        let b = self.bias.map(|b| net.bind(tape, b));
        tape.conv2d(x, w, b, self.stride, self.padding())
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

fn effective_weight(tape: &mut Tape, net: &mut Net, weight: ParamId, u: Option<ParamId>) -> Result<Var> {
    let w = net.bind(tape, weight);
    match u {
        Some(u) => spectral_weight(tape, w, net.store().get(u)),
        None => Ok(w),
    }
}

/// Fully connected layer, `y = x Wᵀ + b` with `W` of shape `[out, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spectral_u: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        spectral: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Learnable,
            he_normal(&[out_features, in_features], in_features, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), ParamKind::Learnable, Tensor::zeros(&[out_features]))?;
        let spectral_u = if spectral {
            let u = store.add(
                format!("{name}.sn_u"),
                ParamKind::Buffer,
                random_unit_vector(out_features, rng),
            )?;
            store.register_spectral(weight, u);
            Some(u)
        } else {
            None
        };
        Ok(Dense {
            weight,
            bias,
            spectral_u,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, tape: &mut Tape, net: &mut Net, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features {
            return Err(Error::shape(format!(
                "dense: input {shape:?}, expected [N, {}]",
                self.in_features
            )));
        }
        let w = effective_weight(tape, net, self.weight, self.spectral_u)?;
        let b = net.bind(tape, self.bias);
        let y = tape.matmul_t(x, w, false, true)?;
        tape.add_bias(y, b)
    }

    pub fn param_count(&self) -> usize {
        self.out_features * self.in_features + self.out_features
    }
}

/// Default initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug)]
pub struct PRelu {
    pub slope: ParamId,
    pub channels: usize,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let slope = store.add(
            format!("{name}.slope"),
            ParamKind::Learnable,
            Tensor::full(&[channels], PRELU_INIT),
        )?;
        Ok(PRelu { slope, channels })
    }

    pub fn forward(&self, tape: &mut Tape, net: &mut Net, x: Var) -> Result<Var> {
        let a = net.bind(tape, self.slope);
        tape.prelu(x, a)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Number of training batches folded into the running statistics.
    pub tracked: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), ParamKind::Learnable, Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), ParamKind::Learnable, Tensor::zeros(&[channels]))?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[channels]),
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::ones(&[channels]),
            )?,
            tracked: store.add(format!("{name}.tracked"), ParamKind::Buffer, Tensor::zeros(&[1]))?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn forward(&self, tape: &mut Tape, net: &mut Net, x: Var) -> Result<Var> {
        let gamma = net.bind(tape, self.gamma);
        let beta = net.bind(tape, self.beta);
        match net.bn_mode {
            BnMode::Train => {
                let (y, stats) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                net.bn_updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    tracked: self.tracked,
                    momentum: self.momentum,
                    stats,
                });
                Ok(y)
            }
            BnMode::Eval => {
                let store = net.store();
                if store.get(self.tracked).data()[0] == 0.0 {
                    log::debug!(
                        "batch norm {} evaluated before any training batch; using initial statistics",
                        store.name(self.gamma)
                    );
                }
                tape.batch_norm_eval(
                    x,
                    gamma,
                    beta,
                    store.get(self.running_mean),
                    store.get(self.running_var),
                    self.eps,
                )
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_has_unit_spectral_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut p = LayerParams::with_spectral_state(eye.clone(), &mut rng);
        let out = spectral_normalize(&mut p, 1).unwrap();
        assert!((out.sigma - 1.0).abs() < 1e-12);
        assert!(out.weight.max_abs_diff(&eye) < 1e-12);
    }

    #[test]
    fn diagonal_matrix_normalizes_by_largest_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let mut p = LayerParams::with_spectral_state(w, &mut rng);
        let out = spectral_normalize(&mut p, 10).unwrap();
        assert!((out.sigma - 3.0).abs() < 1e-6);
        let expected = [1.0, 0.0, 0.0, 1.0 / 3.0];
        for (a, b) in out.weight.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_weight_is_flagged_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LayerParams::with_spectral_state(Tensor::zeros(&[4, 5]), &mut rng);
        let before = p.sn_u.clone().unwrap();
        let out = spectral_normalize(&mut p, 5).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.weight, Tensor::zeros(&[4, 5]));
        assert_eq!(p.sn_u.unwrap(), before);
    }

    #[test]
    fn missing_spectral_state_is_an_error() {
        let mut p = LayerParams {
            weight: Tensor::ones(&[2, 2]),
            bias: None,
            sn_u: None,
        };
        assert!(spectral_normalize(&mut p, 1).is_err());
    }

    #[test]
    fn u_stays_unit_norm_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::randn(&[6, 10], 1.0, &mut rng);
        let mut p = LayerParams::with_spectral_state(w, &mut rng);
        for _ in 0..200 {
            spectral_normalize(&mut p, 1).unwrap();
            let n = p.sn_u.as_ref().unwrap().norm();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", ParamKind::Learnable, Tensor::zeros(&[1])).unwrap();
        assert!(store.add("a", ParamKind::Buffer, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn dense_identity_and_zero_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let dense = Dense::new(&mut store, "fc", 3, 3, false, &mut rng).unwrap();
        *store.get_mut(dense.weight) = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);

        let mut tape = Tape::new();
        let mut net = Net::new(&store, false, BnMode::Eval);
        let xv = tape.constant(x.clone());
        let y = dense.forward(&mut tape, &mut net, xv).unwrap();
        assert_eq!(tape.value(y), &x);

        *store.get_mut(dense.weight) = Tensor::zeros(&[3, 3]);
        *store.get_mut(dense.bias) = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut tape = Tape::new();
        let mut net = Net::new(&store, false, BnMode::Eval);
        let xv = tape.constant(x);
        let y = dense.forward(&mut tape, &mut net, xv).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn batch_norm_train_standardizes_and_updates_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 3).unwrap();
        // std ≈ 10 keeps the epsilon effect on the variance below 1e-6.
        let x = Tensor::randn(&[4, 3, 5, 5], 10.0, &mut rng).map(|v| v + 7.0);

        let mut tape = Tape::new();
        let mut net = Net::new(&store, true, BnMode::Train);
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, &mut net, xv).unwrap();
        let yv = tape.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..25).map(move |j| (n, j)))
                .map(|(n, j)| yv.at4(n, c, j / 5, j % 5))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }

        let updates = std::mem::take(&mut net.bn_updates);
        apply_bn_updates(&mut store, &updates);
        let rm = store.get(bn.running_mean).data()[0];
        assert!((rm - 0.1 * updates[0].stats.mean.data()[0]).abs() < 1e-12);
        assert_eq!(store.get(bn.tracked).data()[0], 1.0);
    }

    #[test]
    fn batch_norm_eval_on_standardized_input_is_near_identity() {
        let mut store = ParamStore::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 * 0.1 - 0.4);
        let mut tape = Tape::new();
        let mut net = Net::new(&store, false, BnMode::Eval);
        let xv = tape.constant(x.clone());
        let y = bn.forward(&mut tape, &mut net, xv).unwrap();
        assert!(tape.value(y).max_abs_diff(&x) < 1e-5);
    }
}
