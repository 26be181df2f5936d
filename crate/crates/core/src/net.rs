//! A frozen toy network hosting adapters.
//!
//! Layer `l` sees `u_l = LN(h_l)` (or `h_l` when normalization is off or
//! `l = 0`) and produces `z_l = W_l u_l + b_l + γ B_l A_l u_l`. Between layers
//! `h_{l+1} = φ(z_l)`, plus `h_l` when the layer is square and residual
//! connections are on. The last `z` is the output. Probes read `z_l` of
//! adapted layers, which is post-adapter and before the next normalization.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::adapter::{init_adapter, AdapterConfig, FrozenLinear};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_fill, Matrix, RngStream};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Nonlinearity {
    #[default]
    Identity,
    Relu,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, z: &Matrix) -> Matrix {
        match self {
            Nonlinearity::Identity => z.clone(),
            Nonlinearity::Relu => z.map(|v| v.max(0.0)),
            Nonlinearity::Tanh => z.map(f64::tanh),
        }
    }

    /// `dz = dh ⊙ φ'(z)`, using the cached activation where cheaper.
    fn backward(self, z: &Matrix, act: &Matrix, dh: &Matrix) -> Matrix {
        let mut out = dh.clone();
        match self {
            Nonlinearity::Identity => {}
            Nonlinearity::Relu => {
                for (o, &zi) in out.data_mut().iter_mut().zip(z.data()) {
                    if zi <= 0.0 {
                        *o = 0.0;
                    }
                }
            }
            Nonlinearity::Tanh => {
                for (o, &a) in out.data_mut().iter_mut().zip(act.data()) {
                    *o *= 1.0 - a * a;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    #[default]
    All,
    Subset(Vec<usize>),
}

impl Placement {
    pub fn includes(&self, layer: usize) -> bool {
        match self {
            Placement::All => true,
            Placement::Subset(ix) => ix.contains(&layer),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    layers: Vec<FrozenLinear>,
    nonlinearity: Nonlinearity,
    layernorm: bool,
    residual: bool,
    placement: Placement,
    version: u64,
}

impl ToyModel {
    pub fn new(layers: Vec<FrozenLinear>, nonlinearity: Nonlinearity, layernorm: bool, residual: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::domain("a model needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out() != pair[1].d_in() {
                return Err(Error::dims(
                    "model layer chain",
                    pair[0].w().shape(),
                    pair[1].w().shape(),
                ));
            }
        }
        Ok(Self {
            layers,
            nonlinearity,
            layernorm,
            residual,
            placement: Placement::All,
            version: 0,
        })
    }

    /// Layers with `W ~ N(0, 1/fan_in)` and zero bias; `dims` lists widths from input to output.
    pub fn random(
        dims: &[usize],
        nonlinearity: Nonlinearity,
        layernorm: bool,
        residual: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::domain("need at least input and output widths"));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let weight = gaussian_fill(w[1], w[0], 0.0, 1.0 / w[0] as f64, rng)?;
                FrozenLinear::new(weight, Matrix::zeros(w[1], 1))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, nonlinearity, layernorm, residual)
    }

    /// Attaches fresh adapters to the placed layers. Layer `l` draws from
    /// `rng.derive(&[l])`, so its `A` does not depend on the other layers or on the rank.
    pub fn attach_adapters(&mut self, config: &AdapterConfig, placement: Placement, rng: &RngStream) -> Result<()> {
        if let Placement::Subset(ix) = &placement {
            if let Some(&bad) = ix.iter().find(|&&i| i >= self.layers.len()) {
                return Err(Error::domain(format!(
                    "placement index {bad} out of range for {} layers",
                    self.layers.len()
                )));
            }
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            if placement.includes(l) {
                let mut stream = rng.derive(&[l as u64]);
                let ad = init_adapter(config.clone(), layer.d_in(), layer.d_out(), &mut stream)?;
                layer.set_adapter(ad)?;
            }
        }
        self.placement = placement;
        self.version += 1;
        Ok(())
    }

    pub fn layers(&self) -> &[FrozenLinear] {
        &self.layers
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn layernorm(&self) -> bool {
        self.layernorm
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out()
    }

    pub fn adapted_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&l| self.layers[l].adapter().is_some())
            .collect()
    }

    /// The same model with every adapter removed.
    pub fn base(&self) -> ToyModel {
        let layers = self
            .layers
            .iter()
            .map(|l| FrozenLinear::new(l.w().clone(), l.bias().clone()).expect("shapes already validated"))
            .collect();
        ToyModel {
            layers,
            placement: Placement::Subset(Vec::new()),
            version: 0,
            ..self.clone()
        }
    }

    /// Mutable `[A_l, B_l]` for each adapted layer in layer order. Invalidates existing caches.
    pub fn adapter_params_mut(&mut self) -> Vec<&mut Matrix> {
        self.version += 1;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Some(ad) = layer.adapter_mut() {
                let (a, b) = ad.params_mut();
                out.push(a);
                out.push(b);
            }
        }
        out
    }

    /// Hash of every frozen weight and bias bit pattern.
    pub fn frozen_fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for layer in &self.layers {
            for m in [layer.w(), layer.bias()] {
                m.shape().hash(&mut h);
                for v in m.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    fn normalized(&self, l: usize) -> bool {
        self.layernorm && l > 0
    }

    fn residual_at(&self, l: usize) -> bool {
        self.residual && l + 1 < self.layers.len() && self.layers[l].d_in() == self.layers[l].d_out()
    }

    pub fn forward(&self, x: &Matrix) -> Result<(ForwardCache, Matrix)> {
        if x.rows() != self.d_in() {
            return Err(Error::dims("model_forward", self.layers[0].w().shape(), x.shape()));
        }
        let n = self.layers.len();
        let mut steps = Vec::with_capacity(n);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let (u, ln_inv_std) = if self.normalized(l) {
                let (u, s) = layer_norm(&h);
                (u, Some(s))
            } else {
                (h.clone(), None)
            };
            let mut z = layer.base_forward(&u)?;
            let hidden = match layer.adapter() {
                Some(ad) => {
                    let (delta, hid) = ad.forward_with_hidden(&u)?;
                    z.axpy(1.0, &delta)?;
                    Some(hid)
                }
                None => None,
            };
            let act = if l + 1 < n {
                let mut a = self.nonlinearity.apply(&z);
                if self.residual_at(l) {
                    a.axpy(1.0, &h)?;
                }
                Some(a)
            } else {
                None
            };
            let next_h = act.clone();
            steps.push(LayerCache {
                u,
                ln_inv_std,
                hidden,
                z,
                act,
            });
            if let Some(a) = next_h {
                h = a;
            }
        }
        let out = steps[n - 1].z.clone();
        Ok((
            ForwardCache {
                version: self.version,
                batch: x.cols(),
                layers: steps,
            },
            out,
        ))
    }

    /// Reverse-mode gradients for every adapter; frozen parameters get none.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: &Matrix) -> Result<ModelGrads> {
        if cache.version != self.version || cache.layers.len() != self.layers.len() {
            return Err(Error::InvalidState(
                "forward cache does not match the current model parameters".into(),
            ));
        }
        if loss_grad.shape() != (self.d_out(), cache.batch) {
            return Err(Error::dims(
                "model_backward",
                (self.d_out(), cache.batch),
                loss_grad.shape(),
            ));
        }
        let n = self.layers.len();
        let mut per_layer: Vec<Option<LayerGrads>> = vec![None; n];
        let mut dz = loss_grad.clone();
        let mut carry: Option<Matrix> = None;
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let c = &cache.layers[l];
            let mut du = layer.w().t_matmul(&dz)?;
            if let (Some(ad), Some(hid)) = (layer.adapter(), &c.hidden) {
                let g = ad.backward_with_hidden(&c.u, hid, &dz)?;
                du.axpy(1.0, &g.grad_x)?;
                per_layer[l] = Some(LayerGrads {
                    layer: l,
                    grad_a: g.grad_a,
                    grad_b: g.grad_b,
                });
            }
            if l == 0 {
                break;
            }
            let mut dh = match &c.ln_inv_std {
                Some(s) => layer_norm_backward(&c.u, s, &du),
                None => du,
            };
            if let Some(extra) = carry.take() {
                dh.axpy(1.0, &extra)?;
            }
            let prev = &cache.layers[l - 1];
            let prev_act = prev.act.as_ref().expect("non-final layers cache their activation");
            // With a residual, act = φ(z) + h, so φ(z) = act − h_prev is not stored; tanh needs φ(z).
            let phi = if self.residual_at(l - 1) {
                self.nonlinearity.apply(&prev.z)
            } else {
                prev_act.clone()
            };
            dz = self.nonlinearity.backward(&prev.z, &phi, &dh);
            if self.residual_at(l - 1) {
                carry = Some(dh);
            }
        }
        Ok(ModelGrads {
            layers: per_layer.into_iter().flatten().collect(),
        })
    }
}

/// Column-wise normalization without affine parameters. Returns `(y, 1/σ per column)`.
fn layer_norm(h: &Matrix) -> (Matrix, Vec<f64>) {
    let (d, n) = h.shape();
    let mut y = h.clone();
    let mut inv = Vec::with_capacity(n);
    for j in 0..n {
        let mean = (0..d).map(|i| h[(i, j)]).sum::<f64>() / d as f64;
        let var = (0..d).map(|i| (h[(i, j)] - mean).powi(2)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..d {
            y.data_mut()[i * n + j] = (h[(i, j)] - mean) * s;
        }
        inv.push(s);
    }
    (y, inv)
}

fn layer_norm_backward(y: &Matrix, inv_std: &[f64], dy: &Matrix) -> Matrix {
    let (d, n) = y.shape();
    let mut dh = dy.clone();
    for (j, &s) in inv_std.iter().enumerate() {
        let mean_dy = (0..d).map(|i| dy[(i, j)]).sum::<f64>() / d as f64;
        let mean_dyy = (0..d).map(|i| dy[(i, j)] * y[(i, j)]).sum::<f64>() / d as f64;
        for i in 0..d {
            dh.data_mut()[i * n + j] = s * (dy[(i, j)] - mean_dy - y[(i, j)] * mean_dyy);
        }
    }
    dh
}

#[derive(Debug, Clone)]
struct LayerCache {
    u: Matrix,
    ln_inv_std: Option<Vec<f64>>,
    hidden: Option<Matrix>,
    z: Matrix,
    act: Option<Matrix>,
}

/// Activations retained by a forward pass, tied to the parameter version that produced them.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    /// Post-adapter, pre-normalization activations `z_l` of adapted layers.
    pub fn probes(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .filter(|c| c.hidden.is_some())
            .map(|c| &c.z)
            .collect()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `z_l` of every layer, adapted or not.
    pub fn layer_outputs(&self) -> Vec<&Matrix> {
        self.layers.iter().map(|c| &c.z).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub layer: usize,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
}

impl ModelGrads {
    /// `[gA_l, gB_l, ...]` in the order of [`ToyModel::adapter_params_mut`].
    pub fn flatten(self) -> Vec<Matrix> {
        self.layers.into_iter().flat_map(|g| [g.grad_a, g.grad_b]).collect()
    }

    /// Mean over adapters of `√(‖gA‖² + ‖gB‖²)`.
    pub fn mean_norm(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .layers
            .iter()
            .map(|g| (g.grad_a.frobenius_norm().powi(2) + g.grad_b.frobenius_norm().powi(2)).sqrt())
            .sum();
        total / self.layers.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Matrix),
    Classes(Vec<usize>),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Targets) -> Result<Self> {
        let n = inputs.cols();
        let ok = match &targets {
            Targets::Values(t) => t.cols() == n,
            Targets::Classes(c) => c.len() == n,
            Targets::None => true,
        };
        if !ok {
            return Err(Error::domain("targets do not match the batch size"));
        }
        if !inputs.is_finite() {
            return Err(Error::domain("batch inputs must be finite"));
        }
        Ok(Self { inputs, targets })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    /// `½‖y − t‖²`, averaged over the batch.
    Mse,
    CrossEntropy,
    /// `uᵀ y`, averaged over the batch; a single example has gradient exactly `u`.
    LinearProbe(Matrix),
}

/// Batch-mean loss and its gradient with respect to the outputs.
pub fn compute_loss(spec: &LossSpec, outputs: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    let (d, n) = outputs.shape();
    let inv_n = 1.0 / n as f64;
    match (spec, targets) {
        (LossSpec::Mse, Targets::Values(t)) => {
            let diff = outputs.sub(t)?;
            let value = 0.5 * diff.data().iter().map(|v| v * v).sum::<f64>() * inv_n;
            Ok((value, diff.scale(inv_n)))
        }
        (LossSpec::CrossEntropy, Targets::Classes(classes)) => {
            if classes.len() != n {
                return Err(Error::dims("cross_entropy", (d, n), (1, classes.len())));
            }
            let mut grad = Matrix::zeros(d, n);
            let mut total = 0.0;
            for (j, &c) in classes.iter().enumerate() {
                if c >= d {
                    return Err(Error::domain(format!("class index {c} out of range for {d} classes")));
                }
                let max = (0..d).map(|i| outputs[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..d).map(|i| (outputs[(i, j)] - max).exp()).sum();
                total += max + sum.ln() - outputs[(c, j)];
                for i in 0..d {
                    let p = (outputs[(i, j)] - max).exp() / sum;
                    grad.data_mut()[i * n + j] = (p - if i == c { 1.0 } else { 0.0 }) * inv_n;
                }
            }
            Ok((total * inv_n, grad))
        }
        (LossSpec::LinearProbe(u), _) => {
            if u.shape() != (d, 1) {
                return Err(Error::dims("linear_probe", (d, 1), u.shape()));
            }
            let value = u.t_matmul(outputs)?.sum() * inv_n;
            let mut grad = Matrix::zeros(d, n);
            for i in 0..d {
                for j in 0..n {
                    grad.data_mut()[i * n + j] = u.data()[i] * inv_n;
                }
            }
            Ok((value, grad))
        }
        (LossSpec::Mse, _) => Err(Error::domain("mse loss needs value targets")),
        (LossSpec::CrossEntropy, _) => Err(Error::domain("cross-entropy loss needs class targets")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMoments {
    pub per_probe: Vec<f64>,
    pub mean: f64,
}

/// Mean of `z^m` over entries at each probe point, and the average across probes.
pub fn activation_moments(cache: &ForwardCache, m: u32) -> Result<ActivationMoments> {
    if m == 0 {
        return Err(Error::domain("moment order must be >= 1"));
    }
    let per_probe: Vec<f64> = cache.probes().iter().map(|z| moment(z.data(), m)).collect();
    let mean = if per_probe.is_empty() {
        0.0
    } else {
        per_probe.iter().sum::<f64>() / per_probe.len() as f64
    };
    Ok(ActivationMoments { per_probe, mean })
}

pub(crate) fn moment(values: &[f64], m: u32) -> f64 {
    values.iter().map(|v| v.powi(m as i32)).sum::<f64>() / values.len() as f64
}

pub fn model_forward(model: &ToyModel, batch: &Batch) -> Result<(ForwardCache, Matrix)> {
    model.forward(&batch.inputs)
}

pub fn model_backward(model: &ToyModel, cache: &ForwardCache, loss_grad: &Matrix) -> Result<ModelGrads> {
    model.backward(cache, loss_grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{augmented_forward, Adapter};
    use crate::scaling::ScalingRule;
    use proptest::prelude::*;

    fn rng(s: u64) -> RngStream {
        RngStream::new(s, 99)
    }

    /// Replaces every adapter's `B` (and `A`) with random values so gradients are nontrivial.
    fn randomize_adapters(model: &mut ToyModel, seed: u64) {
        let mut g = rng(seed);
        for p in model.adapter_params_mut() {
            *p = gaussian_fill(p.rows(), p.cols(), 0.0, 0.3, &mut g).unwrap();
        }
    }

    fn model_with_adapters(dims: &[usize], nl: Nonlinearity, ln: bool, res: bool, r: usize, seed: u64) -> ToyModel {
        let mut m = ToyModel::random(dims, nl, ln, res, &mut rng(seed)).unwrap();
        let cfg = AdapterConfig::new(r, ScalingRule::rslora(2.0).unwrap(), 0.5).unwrap();
        m.attach_adapters(&cfg, Placement::All, &rng(seed + 1)).unwrap();
        m
    }

    /// Straight-line re-implementation used as an oracle for forward.
    fn naive_forward(model: &ToyModel, x: &Matrix) -> Matrix {
        let n = model.layers().len();
        let mut h = x.clone();
        let mut out = None;
        for (l, layer) in model.layers().iter().enumerate() {
            let u = if model.layernorm() && l > 0 {
                let mut u = h.clone();
                for j in 0..h.cols() {
                    let col: Vec<f64> = (0..h.rows()).map(|i| h[(i, j)]).collect();
                    let mu = col.iter().sum::<f64>() / col.len() as f64;
                    let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / col.len() as f64;
                    for i in 0..h.rows() {
                        u.data_mut()[i * h.cols() + j] = (col[i] - mu) / (var + 1e-5).sqrt();
                    }
                }
                u
            } else {
                h.clone()
            };
            let mut w = layer.w().clone();
            if let Some(ad) = layer.adapter() {
                w = w.add(&ad.delta()).unwrap();
            }
            let mut z = w.matmul(&u).unwrap();
            z.add_column_broadcast(layer.bias()).unwrap();
            if l + 1 == n {
                out = Some(z);
                break;
            }
            let phi = match model.nonlinearity() {
                Nonlinearity::Identity => z.clone(),
                Nonlinearity::Relu => z.map(|v| if v > 0.0 { v } else { 0.0 }),
                Nonlinearity::Tanh => z.map(|v| v.tanh()),
            };
            h = if model.residual() && layer.d_in() == layer.d_out() {
                phi.add(&h).unwrap()
            } else {
                phi
            };
        }
        out.unwrap()
    }

    fn fd_error(model: &ToyModel, x: &Matrix, seed: u64) -> f64 {
        let u = gaussian_fill(model.d_out(), x.cols(), 0.0, 1.0, &mut rng(seed + 5)).unwrap();
        crate::theory::model_fd_error(model, x, &u, &crate::theory::GRADCHECK_STEPS).unwrap()
    }

    #[test]
    fn single_identity_layer_matches_augmented_forward() {
        let m = model_with_adapters(&[4, 3], Nonlinearity::Tanh, true, true, 2, 1);
        let mut m = m;
        randomize_adapters(&mut m, 3);
        let x = gaussian_fill(4, 5, 0.0, 1.0, &mut rng(2)).unwrap();
        let (_, out) = m.forward(&x).unwrap();
        assert_eq!(out, augmented_forward(&m.layers()[0], &x).unwrap());
    }

    #[test]
    fn fresh_adapters_match_base() {
        let m = model_with_adapters(&[5, 6, 6, 3], Nonlinearity::Tanh, true, true, 4, 2);
        let x = gaussian_fill(5, 7, 0.0, 1.0, &mut rng(3)).unwrap();
        assert_eq!(m.forward(&x).unwrap().1, m.base().forward(&x).unwrap().1);
    }

    #[test]
    fn three_layer_forward_matches_naive() {
        for (nl, ln, res) in [
            (Nonlinearity::Tanh, true, true),
            (Nonlinearity::Relu, false, true),
            (Nonlinearity::Identity, true, false),
        ] {
            let mut m = model_with_adapters(&[6, 8, 8, 4], nl, ln, res, 3, 4);
            randomize_adapters(&mut m, 5);
            let x = gaussian_fill(6, 5, 0.0, 1.0, &mut rng(6)).unwrap();
            let (_, out) = m.forward(&x).unwrap();
            assert!(out.relative_error(&naive_forward(&m, &x)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn fresh_identity_gradients_follow_closed_form() {
        let m = model_with_adapters(&[4, 5, 3], Nonlinearity::Identity, false, false, 2, 7);
        let x = gaussian_fill(4, 1, 0.0, 1.0, &mut rng(8)).unwrap();
        let v = gaussian_fill(3, 1, 0.0, 1.0, &mut rng(9)).unwrap();
        let (cache, _) = m.forward(&x).unwrap();
        let grads = m.backward(&cache, &v).unwrap();
        for g in &grads.layers {
            assert_eq!(g.grad_a, Matrix::zeros(g.grad_a.rows(), g.grad_a.cols()));
        }
        let last = &m.layers()[1];
        let ad = last.adapter().unwrap();
        let x_last = m.layers()[0].forward(&x).unwrap();
        let expected = v.matmul_t(&x_last).unwrap().matmul_t(ad.a()).unwrap().scale(ad.gamma());
        assert!(grads.layers[1].grad_b.relative_error(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn single_layer_probe_gradient_is_exact_closed_form() {
        let mut m = model_with_adapters(&[5, 4], Nonlinearity::Identity, false, false, 3, 11);
        randomize_adapters(&mut m, 12);
        let x = gaussian_fill(5, 1, 0.0, 1.0, &mut rng(13)).unwrap();
        let u = gaussian_fill(4, 1, 0.0, 1.0, &mut rng(14)).unwrap();
        let (cache, out) = m.forward(&x).unwrap();
        let (_, v) = compute_loss(&LossSpec::LinearProbe(u.clone()), &out, &Targets::None).unwrap();
        assert_eq!(v, u);
        let grads = m.backward(&cache, &v).unwrap();
        let ad: &Adapter = m.layers()[0].adapter().unwrap();
        let g = ad.backward(&x, &u).unwrap();
        assert!(grads.layers[0].grad_a.relative_error(&g.grad_a).unwrap() <= 1e-13);
        assert!(grads.layers[0].grad_b.relative_error(&g.grad_b).unwrap() <= 1e-13);
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let mut m = model_with_adapters(&[4, 4, 2], Nonlinearity::Tanh, true, true, 2, 15);
        randomize_adapters(&mut m, 16);
        let x = gaussian_fill(4, 3, 0.0, 1.0, &mut rng(17)).unwrap();
        let (cache, _) = m.forward(&x).unwrap();
        for g in m.backward(&cache, &Matrix::zeros(2, 3)).unwrap().flatten() {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn two_layer_tanh_matches_finite_differences() {
        let mut m = model_with_adapters(&[5, 6, 3], Nonlinearity::Tanh, false, false, 3, 18);
        randomize_adapters(&mut m, 19);
        let x = gaussian_fill(5, 2, 0.0, 1.0, &mut rng(20)).unwrap();
        let err = fd_error(&m, &x, 21);
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = model_with_adapters(&[3, 3, 2], Nonlinearity::Tanh, false, true, 2, 22);
        let x = gaussian_fill(3, 2, 0.0, 1.0, &mut rng(23)).unwrap();
        let (cache, _) = m.forward(&x).unwrap();
        m.adapter_params_mut();
        assert!(matches!(
            m.backward(&cache, &Matrix::zeros(2, 2)),
            Err(Error::InvalidState(_))
        ));
        let (cache, _) = m.forward(&x).unwrap();
        assert!(matches!(
            m.backward(&cache, &Matrix::zeros(2, 3)),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(m.forward(&Matrix::zeros(4, 1)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn subset_placement_only_adapts_listed_layers() {
        let mut m = ToyModel::random(&[3, 4, 4, 2], Nonlinearity::Relu, false, true, &mut rng(1)).unwrap();
        let cfg = AdapterConfig::new(2, ScalingRule::lora(1.0).unwrap(), 0.3).unwrap();
        m.attach_adapters(&cfg, Placement::Subset(vec![1]), &rng(2)).unwrap();
        assert_eq!(m.adapted_layers(), vec![1]);
        assert!(m.attach_adapters(&cfg, Placement::Subset(vec![7]), &rng(2)).is_err());
    }

    #[test]
    fn loss_examples() {
        let t = gaussian_fill(3, 4, 0.0, 1.0, &mut rng(1)).unwrap();
        let (v, g) = compute_loss(&LossSpec::Mse, &t, &Targets::Values(t.clone())).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g, Matrix::zeros(3, 4));

        let k = 7;
        let (v, _) = compute_loss(
            &LossSpec::CrossEntropy,
            &Matrix::filled(k, 2, 0.3),
            &Targets::Classes(vec![0, 6]),
        )
        .unwrap();
        assert!((v - (k as f64).ln()).abs() < 1e-14);
        assert!(matches!(
            compute_loss(
                &LossSpec::CrossEntropy,
                &Matrix::zeros(3, 1),
                &Targets::Classes(vec![3])
            ),
            Err(Error::Domain(_))
        ));

        let u = Matrix::column(&[1.0, -2.0, 0.5]).unwrap();
        for y in [Matrix::zeros(3, 1), t.col_vec(2).scale(1e6)] {
            let (_, g) = compute_loss(&LossSpec::LinearProbe(u.clone()), &y, &Targets::None).unwrap();
            assert_eq!(g, u);
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let z = gaussian_fill(5, 3, 0.0, 1.0, &mut rng(4)).unwrap();
        let cls = Targets::Classes(vec![1, 4, 0]);
        let (_, g) = compute_loss(&LossSpec::CrossEntropy, &z, &cls).unwrap();
        let h = 1e-6;
        for k in 0..z.data().len() {
            let mut p = z.clone();
            p.data_mut()[k] += h;
            let mut q = z.clone();
            q.data_mut()[k] -= h;
            let fd = (compute_loss(&LossSpec::CrossEntropy, &p, &cls).unwrap().0
                - compute_loss(&LossSpec::CrossEntropy, &q, &cls).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn moment_examples() {
        let mut m = model_with_adapters(&[3, 2], Nonlinearity::Identity, false, false, 1, 1);
        // W = 0, b = c makes z constant.
        m.layers[0] = FrozenLinear::new(Matrix::zeros(2, 3), Matrix::filled(2, 1, 1.5))
            .unwrap()
            .with_adapter(m.layers[0].adapter().unwrap().clone())
            .unwrap();
        let (cache, _) = m.forward(&Matrix::filled(3, 4, 1.0)).unwrap();
        assert_eq!(activation_moments(&cache, 1).unwrap().mean, 1.5);
        assert_eq!(activation_moments(&cache, 2).unwrap().mean, 2.25);
        let zero = FrozenLinear::new(Matrix::zeros(2, 3), Matrix::zeros(2, 1)).unwrap();
        m.layers[0] = zero.with_adapter(m.layers[0].adapter().unwrap().clone()).unwrap();
        let (cache, _) = m.forward(&Matrix::filled(3, 4, 1.0)).unwrap();
        for order in 1..5 {
            assert_eq!(activation_moments(&cache, order).unwrap().mean, 0.0);
        }
        assert!(activation_moments(&cache, 0).is_err());
    }

    #[test]
    fn normal_second_moment() {
        let z = gaussian_fill(100_000, 1, 0.0, 1.0, &mut rng(8)).unwrap();
        assert!((moment(z.data(), 2) - 1.0).abs() < 0.05);
    }

    #[test]
    fn training_never_touches_frozen_weights() {
        let mut m = model_with_adapters(&[4, 5, 5, 3], Nonlinearity::Tanh, true, true, 3, 30);
        let before = m.frozen_fingerprint();
        let snapshot: Vec<_> = m.layers().iter().map(|l| (l.w().clone(), l.bias().clone())).collect();
        let mut opt = crate::optim::OptimizerSpec::adamw(0.01).build().unwrap();
        let x = gaussian_fill(4, 8, 0.0, 1.0, &mut rng(31)).unwrap();
        let t = gaussian_fill(3, 8, 0.0, 1.0, &mut rng(32)).unwrap();
        for _ in 0..20 {
            let (cache, out) = m.forward(&x).unwrap();
            let (_, g) = compute_loss(&LossSpec::Mse, &out, &Targets::Values(t.clone())).unwrap();
            let grads = m.backward(&cache, &g).unwrap().flatten();
            opt.step(&mut m.adapter_params_mut(), &grads).unwrap();
        }
        assert_eq!(m.frozen_fingerprint(), before);
        for (l, (w, b)) in m.layers().iter().zip(snapshot) {
            assert_eq!(l.w(), &w);
            assert_eq!(l.bias(), &b);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradients_match_finite_differences(
            depth in 1usize..=3,
            width in 2usize..=12,
            r in 1usize..=6,
            nl in prop_oneof![Just(Nonlinearity::Identity), Just(Nonlinearity::Relu), Just(Nonlinearity::Tanh)],
            ln in any::<bool>(),
            res in any::<bool>(),
            seed in 0u64..10_000,
        ) {
            let mut dims = vec![width + 1];
            dims.extend(std::iter::repeat_n(width, depth - 1));
            dims.push(3);
            let mut m = model_with_adapters(&dims, nl, ln, res, r, seed);
            randomize_adapters(&mut m, seed + 1);
            let x = gaussian_fill(dims[0], 2, 0.0, 1.0, &mut rng(seed + 2)).unwrap();
            // Differences straddling a ReLU kink are not derivatives.
            prop_assume!(nl != Nonlinearity::Relu || crate::theory::relu_margin(&m, &x).unwrap() > 1e-3);
            let err = fd_error(&m, &x, seed + 3);
            prop_assert!(err <= 1e-5, "err {}", err);
        }
    }
}
