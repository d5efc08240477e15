//! Feedforward and residual networks in the `1/√m` parameterization, with
//! hand-written reverse-mode gradients and the spectral-norm ball around
//! initialization.
//!
//! FFN:    `α⁽ˡ⁾ = φ(W⁽ˡ⁾ α⁽ˡ⁻¹⁾ / √m_l)`
//! ResNet: `α⁽ˡ⁾ = α⁽ˡ⁻¹⁾ + φ(W⁽ˡ⁾ α⁽ˡ⁻¹⁾ / (L √m_l))`
//!
//! and `f = vᵀ α⁽ᴸ⁾` in both cases. ResNets need equal widths `m ≥ d`; the
//! first skip connection zero-pads the input to width `m` while `W⁽¹⁾` stays
//! `m × d`, which is the padded formulation with the always-zero columns
//! dropped.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, invalid, Error, Result};
use crate::numerics::{dot, norm2, spectral_norm_default, svd, DenseMatrix, RngStream};

/// Tolerance on `‖x‖₂ = 1` for network inputs.
pub const UNIT_INPUT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Ffn,
    Resnet,
}

/// 1-Lipschitz activations with `φ(0) = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative; relu uses the subgradient 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub arch: Architecture,
    /// Hidden widths `m_1..m_L`; the depth is `widths.len()`.
    pub widths: Vec<usize>,
    pub input_dim: usize,
    pub sigma1: f64,
    pub activation: Activation,
}

impl NetworkConfig {
    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated config has a layer")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(invalid("network needs at least one layer"));
        }
        if self.input_dim == 0 || self.widths.contains(&0) {
            return Err(invalid("network widths and input_dim must be >= 1"));
        }
        if !(self.sigma1.is_finite() && self.sigma1 >= 0.0) {
            return Err(invalid(format!("sigma1 must be finite and >= 0, got {}", self.sigma1)));
        }
        if self.arch == Architecture::Resnet {
            let m = self.widths[0];
            if self.widths.iter().any(|&w| w != m) {
                return Err(invalid("resnet layers must share one width"));
            }
            if self.input_dim > m {
                return Err(invalid("resnet width must be >= input_dim for the skip connection"));
            }
        }
        Ok(())
    }

    /// Shape of `W⁽ˡ⁾` for zero-based layer index `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        let cols = if l == 0 { self.input_dim } else { self.widths[l - 1] };
        (self.widths[l], cols)
    }

    /// Multiplier on `W⁽ˡ⁾ α⁽ˡ⁻¹⁾` inside the activation.
    pub fn layer_scale(&self, l: usize) -> f64 {
        let m = self.widths[l] as f64;
        match self.arch {
            Architecture::Ffn => 1.0 / m.sqrt(),
            Architecture::Resnet => 1.0 / (self.depth() as f64 * m.sqrt()),
        }
    }

    /// `p = Σ m_l m_{l-1} + m_L`.
    pub fn num_params(&self) -> usize {
        (0..self.depth())
            .map(|l| {
                let (r, c) = self.layer_shape(l);
                r * c
            })
            .sum::<usize>()
            + self.output_width()
    }

    /// Initialization standard deviations `σ₀⁽ˡ⁾`.
    pub fn init_stds(&self) -> Vec<f64> {
        (0..self.depth())
            .map(|l| {
                let m = self.widths[l] as f64;
                if l == 0 {
                    self.sigma1 / (2.0 * (1.0 + (m.ln() / (2.0 * m)).sqrt()))
                } else {
                    let prev = self.widths[l - 1] as f64;
                    self.sigma1 / (1.0 + (prev / m).sqrt() + (2.0 * m.ln() / m).sqrt())
                }
            })
            .collect()
    }

    /// `β_l = σ₁ + ρ / √m_l`.
    pub fn betas(&self, rho: f64) -> Vec<f64> {
        self.widths
            .iter()
            .map(|&m| self.sigma1 + rho / (m as f64).sqrt())
            .collect()
    }
}

/// Weights `W⁽¹⁾..W⁽ᴸ⁾` and last-layer vector `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub weights: Vec<DenseMatrix>,
    pub last: Vec<f64>,
}

impl NetworkParams {
    pub fn check_shapes(&self, cfg: &NetworkConfig) -> Result<()> {
        if self.weights.len() != cfg.depth() {
            return Err(dim_err(format!(
                "{} weight matrices for depth {}",
                self.weights.len(),
                cfg.depth()
            )));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.shape() != cfg.layer_shape(l) {
                return Err(dim_err(format!(
                    "layer {} has shape {:?}, expected {:?}",
                    l + 1,
                    w.shape(),
                    cfg.layer_shape(l)
                )));
            }
        }
        if self.last.len() != cfg.output_width() {
            return Err(dim_err("last-layer vector length differs from m_L"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.as_slice().len()).sum::<usize>() + self.last.len()
    }

    /// `θ = (vec W⁽¹⁾, …, vec W⁽ᴸ⁾, v)`, each matrix flattened row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in &self.weights {
            out.extend_from_slice(w.as_slice());
        }
        out.extend_from_slice(&self.last);
        out
    }

    pub fn from_flat(cfg: &NetworkConfig, theta: &[f64]) -> Result<Self> {
        if theta.len() != cfg.num_params() {
            return Err(dim_err(format!(
                "flat parameter vector of length {} for p = {}",
                theta.len(),
                cfg.num_params()
            )));
        }
        let mut offset = 0;
        let mut weights = Vec::with_capacity(cfg.depth());
        for l in 0..cfg.depth() {
            let (r, c) = cfg.layer_shape(l);
            weights.push(DenseMatrix::from_row_major(
                r,
                c,
                theta[offset..offset + r * c].to_vec(),
            )?);
            offset += r * c;
        }
        Ok(Self {
            weights,
            last: theta[offset..].to_vec(),
        })
    }

    pub fn dump(&self) -> WeightDump {
        WeightDump {
            shapes: self.weights.iter().map(|w| [w.rows(), w.cols()]).collect(),
            last_len: self.last.len(),
            entries: self.to_flat(),
        }
    }
}

/// Flat weight dump: shape header plus row-major entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightDump {
    pub shapes: Vec<[usize; 2]>,
    pub last_len: usize,
    pub entries: Vec<f64>,
}

const DUMP_MAGIC: &[u8; 4] = b"GGW1";

impl WeightDump {
    pub fn into_params(self) -> Result<NetworkParams> {
        let expected: usize =
            self.shapes.iter().map(|[r, c]| r * c).sum::<usize>() + self.last_len;
        if expected != self.entries.len() {
            return Err(dim_err("weight dump header does not match its payload"));
        }
        let mut offset = 0;
        let mut weights = Vec::with_capacity(self.shapes.len());
        for [r, c] in &self.shapes {
            weights.push(DenseMatrix::from_row_major(
                *r,
                *c,
                self.entries[offset..offset + r * c].to_vec(),
            )?);
            offset += r * c;
        }
        Ok(NetworkParams {
            weights,
            last: self.entries[offset..].to_vec(),
        })
    }

    /// Binary layout (little endian): magic `GGW1`, `u64` layer count, per
    /// layer `u64` rows and cols, `u64` last length, then `f64` entries.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&(self.shapes.len() as u64).to_le_bytes())?;
        for [r, c] in &self.shapes {
            out.write_all(&(*r as u64).to_le_bytes())?;
            out.write_all(&(*c as u64).to_le_bytes())?;
        }
        out.write_all(&(self.last_len as u64).to_le_bytes())?;
        for v in &self.entries {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let io = |e: std::io::Error| invalid(format!("weight dump: {e}"));
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != DUMP_MAGIC {
            return Err(invalid("weight dump: bad magic"));
        }
        let mut word = [0u8; 8];
        let mut next_u64 = |input: &mut R| -> Result<u64> {
            input.read_exact(&mut word).map_err(io)?;
            Ok(u64::from_le_bytes(word))
        };
        let layers = next_u64(&mut input)? as usize;
        let mut shapes = Vec::with_capacity(layers.min(1024));
        for _ in 0..layers {
            let r = next_u64(&mut input)? as usize;
            let c = next_u64(&mut input)? as usize;
            shapes.push([r, c]);
        }
        let last_len = next_u64(&mut input)? as usize;
        let total: usize = shapes.iter().map(|[r, c]| r * c).sum::<usize>() + last_len;
        let mut entries = Vec::with_capacity(total);
        for _ in 0..total {
            entries.push(f64::from_bits(next_u64(&mut input)?));
        }
        Ok(Self {
            shapes,
            last_len,
            entries,
        })
    }
}

/// Spectral-norm ball `{θ : ‖W⁽ˡ⁾ − W₀⁽ˡ⁾‖₂ ≤ ρ ∀l, ‖v − v₀‖₂ ≤ ρ₁}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralBall {
    pub center: NetworkParams,
    pub rho: f64,
    pub rho1: f64,
}

/// Relative slack used for membership after floating-point projection.
const MEMBERSHIP_RTOL: f64 = 1e-8;

impl SpectralBall {
    pub fn new(center: NetworkParams, rho: f64, rho1: f64) -> Result<Self> {
        if !(rho.is_finite() && rho >= 0.0) {
            return Err(invalid(format!("rho must be >= 0, got {rho}")));
        }
        if !(rho1.is_finite() && rho1 >= 0.0) {
            return Err(invalid(format!("rho1 must be >= 0, got {rho1}")));
        }
        Ok(Self { center, rho, rho1 })
    }

    fn check_compatible(&self, params: &NetworkParams) -> Result<()> {
        if params.weights.len() != self.center.weights.len()
            || params
                .weights
                .iter()
                .zip(&self.center.weights)
                .any(|(a, b)| a.shape() != b.shape())
            || params.last.len() != self.center.last.len()
        {
            return Err(dim_err("parameters and ball center differ in shape"));
        }
        Ok(())
    }

    /// Largest layer deviation `maxₗ ‖W⁽ˡ⁾ − W₀⁽ˡ⁾‖₂` and `‖v − v₀‖₂`.
    pub fn deviations(&self, params: &NetworkParams) -> Result<(f64, f64)> {
        self.check_compatible(params)?;
        let mut worst: f64 = 0.0;
        for (w, w0) in params.weights.iter().zip(&self.center.weights) {
            worst = worst.max(spectral_norm_default(&w.sub(w0)?)?);
        }
        let dv = norm2(&crate::numerics::sub_vec(&params.last, &self.center.last));
        Ok((worst, dv))
    }

    pub fn contains(&self, params: &NetworkParams) -> Result<bool> {
        let (dw, dv) = self.deviations(params)?;
        Ok(dw <= self.rho * (1.0 + MEMBERSHIP_RTOL) + 1e-12
            && dv <= self.rho1 * (1.0 + MEMBERSHIP_RTOL) + 1e-12)
    }

    pub fn ensure_contains(&self, params: &NetworkParams) -> Result<()> {
        let (dw, dv) = self.deviations(params)?;
        if dw <= self.rho * (1.0 + MEMBERSHIP_RTOL) + 1e-12
            && dv <= self.rho1 * (1.0 + MEMBERSHIP_RTOL) + 1e-12
        {
            Ok(())
        } else {
            Err(Error::OutsideBall(format!(
                "layer deviation {dw:.6e} (rho {}) / last-layer deviation {dv:.6e} (rho1 {})",
                self.rho, self.rho1
            )))
        }
    }

    /// Uniformly scaled random point: each layer deviation is a Gaussian
    /// direction rescaled to spectral norm `ρ·U`, `v` uniform in its ball.
    pub fn random_point(&self, rng: &mut RngStream) -> Result<NetworkParams> {
        let mut weights = Vec::with_capacity(self.center.weights.len());
        for w0 in &self.center.weights {
            if self.rho == 0.0 {
                weights.push(w0.clone());
                continue;
            }
            let g = DenseMatrix::gaussian(w0.rows(), w0.cols(), 1.0, rng);
            let s = spectral_norm_default(&g)?;
            let radius = self.rho * rng.uniform();
            weights.push(w0.add(&g.scaled(if s > 0.0 { radius / s } else { 0.0 }))?);
        }
        let m = self.center.last.len();
        let dir = rng.unit_sphere(m);
        let r = self.rho1 * rng.uniform().powf(1.0 / m as f64);
        let last = self
            .center
            .last
            .iter()
            .zip(&dir)
            .map(|(c, d)| c + r * d)
            .collect();
        Ok(NetworkParams { weights, last })
    }

    /// Point on the boundary: every layer deviation is a random rank-one
    /// matrix `ρ a bᵀ` (unit `a`, `b`), so its spectral norm is exactly `ρ`.
    pub fn boundary_point(&self, rng: &mut RngStream) -> NetworkParams {
        let weights = self
            .center
            .weights
            .iter()
            .map(|w0| {
                let a = rng.unit_sphere(w0.rows());
                let b = rng.unit_sphere(w0.cols());
                let mut w = w0.clone();
                for i in 0..w.rows() {
                    for j in 0..w.cols() {
                        w.set(i, j, w.get(i, j) + self.rho * a[i] * b[j]);
                    }
                }
                w
            })
            .collect();
        let dir = rng.unit_sphere(self.center.last.len());
        let last = self
            .center
            .last
            .iter()
            .zip(&dir)
            .map(|(c, d)| c + self.rho1 * d)
            .collect();
        NetworkParams { weights, last }
    }
}

/// Projects `params` onto `ball`: layer deviations have their singular values
/// clipped at `ρ`, the last-layer deviation is shrunk radially to `ρ₁`.
pub fn project_to_ball(params: &NetworkParams, ball: &SpectralBall) -> Result<NetworkParams> {
    ball.check_compatible(params)?;
    let mut weights = Vec::with_capacity(params.weights.len());
    for (w, w0) in params.weights.iter().zip(&ball.center.weights) {
        let dev = w.sub(w0)?;
        if ball.rho == 0.0 {
            weights.push(w0.clone());
            continue;
        }
        if spectral_norm_default(&dev)? <= ball.rho {
            weights.push(w.clone());
            continue;
        }
        let mut dec = svd(&dev)?;
        for s in dec.singular_values.iter_mut() {
            *s = s.min(ball.rho);
        }
        weights.push(w0.add(&dec.reconstruct())?);
    }
    let dv = crate::numerics::sub_vec(&params.last, &ball.center.last);
    let norm = norm2(&dv);
    let last = if norm > ball.rho1 {
        let scale = if norm > 0.0 { ball.rho1 / norm } else { 0.0 };
        ball.center
            .last
            .iter()
            .zip(&dv)
            .map(|(c, d)| c + scale * d)
            .collect()
    } else {
        params.last.clone()
    };
    Ok(NetworkParams { weights, last })
}

/// Draws `θ₀`: `W₀⁽ˡ⁾` entries `N(0, σ₀⁽ˡ⁾²)` and `v₀` uniform on the unit sphere.
pub fn init_network(cfg: &NetworkConfig, rng: &mut RngStream) -> Result<NetworkParams> {
    cfg.validate()?;
    let stds = cfg.init_stds();
    let weights = (0..cfg.depth())
        .map(|l| {
            let (r, c) = cfg.layer_shape(l);
            DenseMatrix::gaussian(r, c, stds[l], rng)
        })
        .collect();
    let last = rng.unit_sphere(cfg.output_width());
    Ok(NetworkParams { weights, last })
}

/// Layer outputs `α⁽⁰⁾..α⁽ᴸ⁾`, pre-activations `α̃⁽¹⁾..α̃⁽ᴸ⁾` and output `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub outputs: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub output: f64,
}

impl ForwardCache {
    /// The featurizer `h⁽ᴸ⁾ = α⁽ᴸ⁾`.
    pub fn featurizer(&self) -> &[f64] {
        self.outputs.last().expect("cache holds the input")
    }
}

pub fn featurizer(cache: &ForwardCache) -> &[f64] {
    cache.featurizer()
}

fn check_unit(x: &[f64]) -> Result<()> {
    let n = norm2(x);
    if (n - 1.0).abs() > UNIT_INPUT_TOL {
        return Err(invalid(format!("network input must have unit norm, got {n}")));
    }
    Ok(())
}

/// Forward pass on a unit-norm input.
pub fn forward(cfg: &NetworkConfig, params: &NetworkParams, x: &[f64]) -> Result<ForwardCache> {
    check_unit(x)?;
    forward_unchecked(cfg, params, x)
}

/// Forward pass without the unit-norm requirement on `x` (shapes still checked).
pub fn forward_unchecked(
    cfg: &NetworkConfig,
    params: &NetworkParams,
    x: &[f64],
) -> Result<ForwardCache> {
    params.check_shapes(cfg)?;
    if x.len() != cfg.input_dim {
        return Err(dim_err(format!(
            "input of length {} for input_dim {}",
            x.len(),
            cfg.input_dim
        )));
    }
    let act = cfg.activation;
    let mut outputs = Vec::with_capacity(cfg.depth() + 1);
    let mut pre_activations = Vec::with_capacity(cfg.depth());
    outputs.push(x.to_vec());
    for (l, w) in params.weights.iter().enumerate() {
        let scale = cfg.layer_scale(l);
        let prev = &outputs[l];
        let pre: Vec<f64> = w.matvec(prev).into_iter().map(|v| v * scale).collect();
        let next: Vec<f64> = match cfg.arch {
            Architecture::Ffn => pre.iter().map(|&v| act.apply(v)).collect(),
            Architecture::Resnet => pre
                .iter()
                .enumerate()
                .map(|(i, &v)| prev.get(i).copied().unwrap_or(0.0) + act.apply(v))
                .collect(),
        };
        pre_activations.push(pre);
        outputs.push(next);
    }
    let output = dot(&params.last, outputs.last().unwrap());
    Ok(ForwardCache {
        outputs,
        pre_activations,
        output,
    })
}

/// Reverse pass of `⟨α⁽ᴸ⁾, c⟩` with respect to every `W⁽ˡ⁾`.
///
/// Uses the layer Jacobians `[∂α⁽ˡ⁾/∂α⁽ˡ⁻¹⁾]_ij = s_l φ′(α̃ᵢ⁽ˡ⁾) W_ij⁽ˡ⁾`
/// (plus the identity for ResNets) and `[∂α⁽ˡ⁾/∂W⁽ˡ⁾]_{i,ij'} = s_l φ′(α̃ᵢ⁽ˡ⁾) α_{j'}⁽ˡ⁻¹⁾`,
/// where `s_l` is [`NetworkConfig::layer_scale`].
pub fn featurizer_vjp(
    cfg: &NetworkConfig,
    params: &NetworkParams,
    cache: &ForwardCache,
    cotangent: &[f64],
) -> Vec<DenseMatrix> {
    let depth = cfg.depth();
    let act = cfg.activation;
    let mut grads: Vec<DenseMatrix> = Vec::with_capacity(depth);
    let mut delta = cotangent.to_vec();
    for l in (0..depth).rev() {
        let scale = cfg.layer_scale(l);
        let u: Vec<f64> = delta
            .iter()
            .zip(&cache.pre_activations[l])
            .map(|(d, &z)| d * act.derivative(z) * scale)
            .collect();
        grads.push(DenseMatrix::outer(&u, &cache.outputs[l]));
        if l > 0 {
            let back = params.weights[l].matvec_t(&u);
            delta = match cfg.arch {
                Architecture::Ffn => back,
                Architecture::Resnet => back.iter().zip(&delta).map(|(b, d)| b + d).collect(),
            };
        }
    }
    grads.reverse();
    grads
}

fn stack_gradient(weight_grads: Vec<DenseMatrix>, last_grad: Vec<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(
        weight_grads.iter().map(|g| g.as_slice().len()).sum::<usize>() + last_grad.len(),
    );
    for g in weight_grads {
        out.extend_from_slice(g.as_slice());
    }
    out.extend_from_slice(&last_grad);
    out
}

/// Squared loss `½(y − f)²` and its gradient over `θ`, flattened like
/// [`NetworkParams::to_flat`].
pub fn loss_and_gradient(
    cfg: &NetworkConfig,
    params: &NetworkParams,
    x: &[f64],
    y: f64,
) -> Result<(f64, Vec<f64>)> {
    check_unit(x)?;
    loss_and_gradient_unchecked(cfg, params, x, y)
}

pub fn loss_and_gradient_unchecked(
    cfg: &NetworkConfig,
    params: &NetworkParams,
    x: &[f64],
    y: f64,
) -> Result<(f64, Vec<f64>)> {
    let cache = forward_unchecked(cfg, params, x)?;
    let residual = cache.output - y;
    let cot: Vec<f64> = params.last.iter().map(|v| residual * v).collect();
    let wg = featurizer_vjp(cfg, params, &cache, &cot);
    let vg = cache.featurizer().iter().map(|a| residual * a).collect();
    Ok((0.5 * residual * residual, stack_gradient(wg, vg)))
}

/// Squared loss alone.
pub fn loss(cfg: &NetworkConfig, params: &NetworkParams, x: &[f64], y: f64) -> Result<f64> {
    let f = forward_unchecked(cfg, params, x)?.output;
    Ok(0.5 * (y - f) * (y - f))
}

/// Gradient of `⟨h⁽ᴸ⁾(W, x), g⟩` over the weight matrices, flattened.
pub fn featurizer_direction_gradient(
    cfg: &NetworkConfig,
    params: &NetworkParams,
    x: &[f64],
    g: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let cache = forward_unchecked(cfg, params, x)?;
    let value = dot(cache.featurizer(), g);
    let wg = featurizer_vjp(cfg, params, &cache, g);
    Ok((value, stack_gradient(wg, Vec::new())))
}

/// Per-layer norms entering the layerwise bounds, at one input.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorms {
    /// `‖α⁽ˡ⁾‖₂`, `l = 1..L`.
    pub output_norms: Vec<f64>,
    /// `‖∂α⁽ˡ⁾/∂α⁽ˡ⁻¹⁾‖₂`, `l = 1..L`.
    pub jacobian_norms: Vec<f64>,
    /// `‖∂α⁽ˡ⁾/∂ vec W⁽ˡ⁾‖₂`, `l = 1..L`.
    pub param_jacobian_norms: Vec<f64>,
}

/// Computes [`LayerNorms`]. The parameter Jacobian has orthogonal rows
/// `s_l φ′(α̃ᵢ) (eᵢ ⊗ α⁽ˡ⁻¹⁾)`, so its spectral norm is
/// `s_l maxᵢ|φ′(α̃ᵢ)| ‖α⁽ˡ⁻¹⁾‖₂`; the layer Jacobian is formed explicitly.
pub fn layer_norms(cfg: &NetworkConfig, params: &NetworkParams, x: &[f64]) -> Result<LayerNorms> {
    let cache = forward(cfg, params, x)?;
    let act = cfg.activation;
    let mut output_norms = Vec::with_capacity(cfg.depth());
    let mut jacobian_norms = Vec::with_capacity(cfg.depth());
    let mut param_jacobian_norms = Vec::with_capacity(cfg.depth());
    for l in 0..cfg.depth() {
        let scale = cfg.layer_scale(l);
        let deriv: Vec<f64> = cache.pre_activations[l]
            .iter()
            .map(|&z| act.derivative(z))
            .collect();
        output_norms.push(norm2(&cache.outputs[l + 1]));
        let max_deriv = deriv.iter().fold(0.0_f64, |a, d| a.max(d.abs()));
        param_jacobian_norms.push(scale * max_deriv * norm2(&cache.outputs[l]));
        let scaled: Vec<f64> = deriv.iter().map(|d| d * scale).collect();
        let mut jac = params.weights[l].scale_rows(&scaled);
        if cfg.arch == Architecture::Resnet {
            for i in 0..jac.rows().min(jac.cols()) {
                jac.set(i, i, jac.get(i, i) + 1.0);
            }
        }
        jacobian_norms.push(spectral_norm_default(&jac)?);
    }
    Ok(LayerNorms {
        output_norms,
        jacobian_norms,
        param_jacobian_norms,
    })
}

/// One lemma's per-layer empirical frequency and the probability it must reach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFrequency {
    pub layer: usize,
    pub frequency: f64,
    pub required: f64,
    pub std_error: f64,
}

impl LayerFrequency {
    fn new(layer: usize, hits: usize, trials: usize, required: f64) -> Self {
        let p = required.clamp(0.0, 1.0);
        Self {
            layer,
            frequency: hits as f64 / trials as f64,
            required,
            std_error: (p * (1.0 - p) / trials as f64).sqrt(),
        }
    }

    /// `frequency ≥ required − 3·se`.
    pub fn holds(&self) -> bool {
        self.frequency >= self.required - 3.0 * self.std_error
    }
}

/// Frequencies of the four layerwise bounds over random initializations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub arch: Architecture,
    pub trials: usize,
    pub init_spectral: Vec<LayerFrequency>,
    pub layer_output: Vec<LayerFrequency>,
    pub jacobian: Vec<LayerFrequency>,
    pub param_gradient: Vec<LayerFrequency>,
}

impl LemmaReport {
    pub fn all_hold(&self) -> bool {
        self.rows().iter().all(|(_, f)| f.holds())
    }

    /// `(check name, layer frequency)` pairs in a fixed order.
    pub fn rows(&self) -> Vec<(&'static str, &LayerFrequency)> {
        [
            ("init_spectral", &self.init_spectral),
            ("layer_output", &self.layer_output),
            ("jacobian", &self.jacobian),
            ("param_gradient", &self.param_gradient),
        ]
        .into_iter()
        .flat_map(|(name, v)| v.iter().map(move |f| (name, f)))
        .collect()
    }
}

/// Per-layer frequency that `‖W₀⁽ˡ⁾‖₂ + ρ ≤ β_l √m_l`, i.e. that the spectral
/// bound survives the worst aligned perturbation of norm `ρ`.
pub fn init_spectral_check(
    cfg: &NetworkConfig,
    rho: f64,
    trials: usize,
    rng: &RngStream,
) -> Result<Vec<LayerFrequency>> {
    Ok(lemma_check(cfg, rho, trials, rng)?.init_spectral)
}

/// Runs every layerwise check on `trials` independent initializations.
///
/// Each trial draws `θ₀`, moves every layer to the ball boundary along a
/// random rank-one direction of spectral norm `ρ` and evaluates the layer
/// output, layer Jacobian and parameter-Jacobian norms at a random unit input.
/// The thresholds are `β_l √m_l` for the weights and, for FFNs, `∏_{k≤l} β_k`,
/// `β_l`, `∏_{k<l} β_k / √m_l`; for ResNets `∏_{k≤l}(1 + β_k/L)`,
/// `1 + β_l/L`, `∏_{k<l}(1 + β_k/L) / (L√m_l)`.
pub fn lemma_check(
    cfg: &NetworkConfig,
    rho: f64,
    trials: usize,
    rng: &RngStream,
) -> Result<LemmaReport> {
    cfg.validate()?;
    if trials < 100 {
        return Err(invalid("lemma checks need at least 100 trials"));
    }
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(invalid(format!("rho must be >= 0, got {rho}")));
    }
    let depth = cfg.depth();
    let betas = cfg.betas(rho);
    let widths: Vec<f64> = cfg.widths.iter().map(|&m| m as f64).collect();
    let big_l = depth as f64;
    // A few ulps of slack so that exact equality cases (σ₁ = ρ = 0) count as hits.
    let within = |value: f64, bound: f64| value <= bound * (1.0 + 1e-12) + 1e-300;

    let outcomes = crate::exec::map_indexed(trials, |t| -> Result<Vec<[bool; 4]>> {
        let mut local = rng.substream(t as u64);
        let center = init_network(cfg, &mut local)?;
        let ball = SpectralBall::new(center, rho, 0.0)?;
        let theta = ball.boundary_point(&mut local);
        let x = local.unit_sphere(cfg.input_dim);
        let norms = layer_norms(cfg, &theta, &x)?;
        let mut out = Vec::with_capacity(depth);
        let mut prod_before = 1.0;
        for l in 0..depth {
            let w0 = spectral_norm_default(&ball.center.weights[l])?;
            let spectral = within(w0 + rho, betas[l] * widths[l].sqrt());
            let (out_bound, jac_bound, grad_bound, factor) = match cfg.arch {
                Architecture::Ffn => (
                    prod_before * betas[l],
                    betas[l],
                    prod_before / widths[l].sqrt(),
                    betas[l],
                ),
                Architecture::Resnet => {
                    let f = 1.0 + betas[l] / big_l;
                    (prod_before * f, f, prod_before / (big_l * widths[l].sqrt()), f)
                }
            };
            out.push([
                spectral,
                within(norms.output_norms[l], out_bound),
                within(norms.jacobian_norms[l], jac_bound),
                within(norms.param_jacobian_norms[l], grad_bound),
            ]);
            prod_before *= factor;
        }
        Ok(out)
    });

    let mut hits = vec![[0usize; 4]; depth];
    for trial in outcomes {
        for (l, flags) in trial?.into_iter().enumerate() {
            for (k, &ok) in flags.iter().enumerate() {
                hits[l][k] += ok as usize;
            }
        }
    }
    let fail = |l: usize| 2.0 / widths[l];
    let cumulative = |upto: usize| (0..upto).map(fail).sum::<f64>();
    let collect = |k: usize, required: &dyn Fn(usize) -> f64| {
        (0..depth)
            .map(|l| LayerFrequency::new(l + 1, hits[l][k], trials, required(l)))
            .collect::<Vec<_>>()
    };
    Ok(LemmaReport {
        arch: cfg.arch,
        trials,
        init_spectral: collect(0, &|l| 1.0 - fail(l)),
        layer_output: collect(1, &|l| 1.0 - cumulative(l + 1)),
        jacobian: collect(2, &|l| 1.0 - fail(l)),
        param_gradient: collect(3, &|l| match cfg.arch {
            Architecture::Ffn => 1.0 - cumulative(l),
            Architecture::Resnet => 1.0 - cumulative(l + 1),
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::central_difference_gradient;
    use approx::assert_relative_eq;

    pub(crate) fn cfg(arch: Architecture, widths: Vec<usize>, d: usize, act: Activation) -> NetworkConfig {
        NetworkConfig {
            arch,
            widths,
            input_dim: d,
            sigma1: 1.0,
            activation: act,
        }
    }

    #[test]
    fn init_stds_follow_the_width_formulas() {
        let c = NetworkConfig {
            arch: Architecture::Ffn,
            widths: vec![1],
            input_dim: 1,
            sigma1: 2.0,
            activation: Activation::Relu,
        };
        assert_eq!(c.init_stds(), vec![1.0]);
        let c = cfg(Architecture::Ffn, vec![16, 4], 3, Activation::Tanh);
        let s = c.init_stds();
        assert_relative_eq!(s[0], 1.0 / (2.0 * (1.0 + (16f64.ln() / 32.0).sqrt())));
        assert_relative_eq!(s[1], 1.0 / (1.0 + 2.0 + (2.0 * 4f64.ln() / 4.0).sqrt()));
    }

    #[test]
    fn init_last_layer_has_unit_norm_and_weight_std_matches() {
        let c = NetworkConfig {
            arch: Architecture::Ffn,
            widths: vec![1000, 1000],
            input_dim: 1000,
            sigma1: 0.7,
            activation: Activation::Relu,
        };
        let p = init_network(&c, &mut RngStream::new(4, 4)).unwrap();
        assert_relative_eq!(norm2(&p.last), 1.0, max_relative = 1e-14);
        for (w, s) in p.weights.iter().zip(c.init_stds()) {
            let n = w.as_slice().len() as f64;
            let var = w.as_slice().iter().map(|v| v * v).sum::<f64>() / n;
            assert!((var.sqrt() / s - 1.0).abs() < 0.005, "{} vs {s}", var.sqrt());
        }
    }

    #[test]
    fn zero_input_propagates_zero() {
        let c = cfg(Architecture::Ffn, vec![5, 4], 3, Activation::Tanh);
        let p = init_network(&c, &mut RngStream::new(1, 1)).unwrap();
        let cache = forward_unchecked(&c, &p, &[0.0; 3]).unwrap();
        assert!(cache.outputs.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(cache.output, 0.0);
        let (l, g) = loss_and_gradient_unchecked(&c, &p, &[0.0; 3], 0.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(forward(&c, &p, &[0.0; 3]).is_err());
    }

    #[test]
    fn resnet_with_zero_weights_is_the_padded_identity() {
        let c = cfg(Architecture::Resnet, vec![5, 5, 5], 3, Activation::Relu);
        let mut p = init_network(&c, &mut RngStream::new(2, 2)).unwrap();
        p.weights.iter_mut().for_each(|w| *w = DenseMatrix::zeros(w.rows(), w.cols()));
        let x = [0.6, 0.0, 0.8];
        let cache = forward(&c, &p, &x).unwrap();
        assert_eq!(cache.featurizer(), &[0.6, 0.0, 0.8, 0.0, 0.0]);
        assert_relative_eq!(cache.output, 0.6 * p.last[0] + 0.8 * p.last[2]);
    }

    #[test]
    fn relu_featurizer_is_nonnegative() {
        let c = cfg(Architecture::Ffn, vec![8, 8], 4, Activation::Relu);
        let p = init_network(&c, &mut RngStream::new(3, 3)).unwrap();
        let x = RngStream::new(3, 4).unit_sphere(4);
        let cache = forward(&c, &p, &x).unwrap();
        assert!(featurizer(&cache).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn one_by_one_ffn_closed_form() {
        // f = v tanh(w x), ℓ = ½(f − y)²
        let c = cfg(Architecture::Ffn, vec![1], 1, Activation::Tanh);
        let (w, v, x, y) = (0.7, -1.3, 1.0, 0.4);
        let p = NetworkParams {
            weights: vec![DenseMatrix::from_row_major(1, 1, vec![w]).unwrap()],
            last: vec![v],
        };
        let (l, g) = loss_and_gradient(&c, &p, &[x], y).unwrap();
        let f = v * (w * x).tanh();
        let r = f - y;
        assert_relative_eq!(l, 0.5 * r * r, max_relative = 1e-15);
        assert_relative_eq!(g[0], r * v * (1.0 - (w * x).tanh().powi(2)) * x, max_relative = 1e-14);
        assert_relative_eq!(g[1], r * (w * x).tanh(), max_relative = 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(10, 10);
        for arch in [Architecture::Ffn, Architecture::Resnet] {
            for act in [Activation::Tanh, Activation::Relu] {
                let c = match arch {
                    Architecture::Ffn => cfg(arch, vec![6, 5, 4], 3, act),
                    Architecture::Resnet => cfg(arch, vec![5, 5, 5], 3, act),
                };
                let p = init_network(&c, &mut rng).unwrap();
                let x = rng.unit_sphere(3);
                let y = rng.standard_normal();
                let (_, g) = loss_and_gradient(&c, &p, &x, y).unwrap();
                let theta = p.to_flat();
                let fd = central_difference_gradient(
                    |t| loss(&c, &NetworkParams::from_flat(&c, t).unwrap(), &x, y).unwrap(),
                    &theta,
                    1e-5,
                );
                for (a, b) in g.iter().zip(&fd) {
                    if a.abs() > 1e-8 {
                        assert!(((a - b) / a).abs() <= 1e-5, "{arch:?}/{act:?}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn projection_examples() {
        let c = cfg(Architecture::Ffn, vec![4, 3], 2, Activation::Tanh);
        let center = init_network(&c, &mut RngStream::new(6, 6)).unwrap();
        let ball = SpectralBall::new(center.clone(), 0.5, 0.25).unwrap();

        let inside = ball.random_point(&mut RngStream::new(6, 7)).unwrap();
        assert!(ball.contains(&inside).unwrap());
        assert_eq!(project_to_ball(&inside, &ball).unwrap(), inside);

        let mut far_v = center.clone();
        let dir = RngStream::new(6, 8).unit_sphere(3);
        for (v, d) in far_v.last.iter_mut().zip(&dir) {
            *v += 2.0 * 0.25 * d;
        }
        let projected = project_to_ball(&far_v, &ball).unwrap();
        let dv = norm2(&crate::numerics::sub_vec(&projected.last, &center.last));
        assert_relative_eq!(dv, 0.25, max_relative = 1e-12);

        // σ u vᵀ with σ = 3ρ is clipped to ρ u vᵀ.
        let u = [0.6, 0.8, 0.0];
        let v = [0.0, 1.0, 0.0, 0.0];
        let mut rank_one = center.clone();
        rank_one.weights[1] = center.weights[1]
            .add(&DenseMatrix::outer(&u, &v[..4]).scaled(3.0 * 0.5))
            .unwrap();
        let projected = project_to_ball(&rank_one, &ball).unwrap();
        let expected = center.weights[1].add(&DenseMatrix::outer(&u, &v).scaled(0.5)).unwrap();
        for (a, b) in projected.weights[1].as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(projected.weights[0], center.weights[0]);
        assert!(ball.contains(&projected).unwrap());
    }

    #[test]
    fn projection_output_is_always_a_member() {
        let c = cfg(Architecture::Ffn, vec![6, 4], 3, Activation::Relu);
        let mut rng = RngStream::new(12, 0);
        let center = init_network(&c, &mut rng).unwrap();
        let ball = SpectralBall::new(center.clone(), 0.3, 0.1).unwrap();
        for _ in 0..50 {
            let wild: Vec<f64> = center.to_flat().iter().map(|v| v + rng.standard_normal()).collect();
            let p = project_to_ball(&NetworkParams::from_flat(&c, &wild).unwrap(), &ball).unwrap();
            assert!(ball.contains(&p).unwrap());
        }
    }

    #[test]
    fn boundary_point_sits_on_the_boundary() {
        let c = cfg(Architecture::Ffn, vec![7, 5], 3, Activation::Relu);
        let center = init_network(&c, &mut RngStream::new(1, 2)).unwrap();
        let ball = SpectralBall::new(center, 0.4, 0.2).unwrap();
        let b = ball.boundary_point(&mut RngStream::new(1, 3));
        let (dw, dv) = ball.deviations(&b).unwrap();
        assert_relative_eq!(dw, 0.4, max_relative = 1e-8);
        assert_relative_eq!(dv, 0.2, max_relative = 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(Architecture::Resnet, vec![4, 5], 3, Activation::Relu);
        assert!(c.validate().is_err());
        c.widths = vec![2, 2];
        assert!(c.validate().is_err());
        c.widths = vec![3, 3];
        assert!(c.validate().is_ok());
        assert!(cfg(Architecture::Ffn, vec![], 3, Activation::Relu).validate().is_err());
        assert!(SpectralBall::new(init_network(&c, &mut RngStream::new(0, 0)).unwrap(), -1.0, 0.0).is_err());
    }

    #[test]
    fn lemma_check_degenerate_and_small_width() {
        let mut c = cfg(Architecture::Ffn, vec![8, 8], 4, Activation::Relu);
        c.sigma1 = 0.0;
        let r = init_spectral_check(&c, 0.0, 100, &RngStream::new(3, 0)).unwrap();
        assert!(r.iter().all(|f| f.frequency == 1.0));
        let c = cfg(Architecture::Ffn, vec![4, 4], 2, Activation::Tanh);
        let r = lemma_check(&c, 0.5, 200, &RngStream::new(3, 1)).unwrap();
        assert_eq!(r.init_spectral[0].required, 0.5);
        assert!(r.all_hold(), "{r:?}");
        assert!(lemma_check(&c, 0.5, 10, &RngStream::new(3, 1)).is_err());
    }

    #[test]
    fn lemma_frequencies_for_moderate_width() {
        for arch in [Architecture::Ffn, Architecture::Resnet] {
            let c = cfg(arch, vec![32, 32, 32], 8, Activation::Relu);
            let r = lemma_check(&c, 0.5, 200, &RngStream::new(5, 0)).unwrap();
            assert!(r.all_hold(), "{r:?}");
        }
    }

    #[test]
    fn forward_is_lipschitz_in_the_pre_activation() {
        let mut rng = RngStream::new(8, 8);
        for act in [Activation::Relu, Activation::Tanh] {
            for _ in 0..1000 {
                let (a, b) = (3.0 * rng.standard_normal(), 3.0 * rng.standard_normal());
                assert!((act.apply(a) - act.apply(b)).abs() <= (a - b).abs() + 1e-15);
                assert!(act.derivative(a).abs() <= 1.0);
            }
            assert_eq!(act.apply(0.0), 0.0);
        }
    }

    #[test]
    fn weight_dump_round_trips() {
        let c = cfg(Architecture::Ffn, vec![3, 2], 2, Activation::Tanh);
        let p = init_network(&c, &mut RngStream::new(9, 9)).unwrap();
        let mut buf = Vec::new();
        p.dump().write_binary(&mut buf).unwrap();
        let back = WeightDump::read_binary(&buf[..]).unwrap().into_params().unwrap();
        assert_eq!(back, p);
        let json = serde_json::to_string(&p.dump()).unwrap();
        let back: WeightDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back.into_params().unwrap(), p);
        assert!(WeightDump::read_binary(&b"XXXX"[..]).is_err());
    }
}
