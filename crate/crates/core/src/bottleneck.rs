//! Variational bottleneck on a tapped hidden layer.
//!
//! A Gaussian encoder maps each tapped hidden state `h` to a mean and a
//! log-variance over a `d_z`-dimensional code, samples `z` with the
//! reparameterization `z = mean + exp(log_var / 2) ⊙ ε`, and reports the
//! closed-form KL divergence to a standard normal prior. An affine injection
//! maps `z` back to model width so the upper layers can predict from it.

use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::{self, tag};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 8.0;

/// Source of the reparameterization noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    /// ε drawn from a stream keyed by this seed, row-major over `[positions, d_z]`.
    Seeded(u64),
    /// ε = 0, so `z` equals the mean.
    Off,
}

impl Noise {
    fn draw(self, rows: usize, cols: usize) -> Tensor {
        match self {
            Noise::Seeded(seed) => {
                let mut rng = rng::stream(seed, &[tag::NOISE]);
                let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
                Tensor::from_parts(vec![rows, cols], data)
            }
            Noise::Off => Tensor::zeros(&[rows, cols]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckEncoder {
    d_model: usize,
    d_z: usize,
    params: Params,
}

fn layout(d_model: usize, d_z: usize) -> [(&'static str, Vec<usize>); 6] {
    [
        ("mean.w", vec![d_model, d_z]),
        ("mean.b", vec![d_z]),
        ("log_var.w", vec![d_model, d_z]),
        ("log_var.b", vec![d_z]),
        ("inject.w", vec![d_z, d_model]),
        ("inject.b", vec![d_model]),
    ]
}

/// Encoder outputs for one set of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckOutput {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub z: Tensor,
    pub kl_per_position: Tensor,
}

impl BottleneckEncoder {
    /// Heads drawn from N(0, 1/d_model), injection from N(0, 1/d_z), biases zero.
    pub fn init(d_model: usize, d_z: usize, seed: u64) -> Result<Self> {
        if d_model == 0 || d_z == 0 {
            return Err(Error::config("d_z", "bottleneck and model widths must be positive"));
        }
        let mut rng = rng::stream(seed, &[tag::ENCODER_INIT]);
        let head = Normal::new(0.0, 1.0 / (d_model as f64).sqrt()).expect("valid std");
        let back = Normal::new(0.0, 1.0 / (d_z as f64).sqrt()).expect("valid std");
        let mut params = Params::new();
        for (name, shape) in layout(d_model, d_z) {
            let n: usize = shape.iter().product();
            let data = match name {
                "mean.w" | "log_var.w" => (0..n).map(|_| head.sample(&mut rng)).collect(),
                "inject.w" => (0..n).map(|_| back.sample(&mut rng)).collect(),
                _ => vec![0.0; n],
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(Self { d_model, d_z, params })
    }

    pub fn from_params(d_model: usize, d_z: usize, params: Params) -> Result<Self> {
        let expected = layout(d_model, d_z);
        if params.len() != expected.len()
            || expected.iter().zip(params.iter()).any(|((n, s), (pn, pt))| *n != pn || s.as_slice() != pt.shape())
        {
            return Err(Error::Checkpoint(format!("encoder parameters do not match widths {d_model} -> {d_z}")));
        }
        Ok(Self { d_model, d_z, params })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let vars = self.params.bind(tape, trainable);
        EncoderVars { d_model: self.d_model, d_z: self.d_z, vars }
    }

    pub fn attach(&self, vars: &[Var]) -> Result<EncoderVars> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!("expected {} encoder handles, got {}", self.params.len(), vars.len())));
        }
        Ok(EncoderVars { d_model: self.d_model, d_z: self.d_z, vars: vars.to_vec() })
    }

    /// Encodes hidden states `h` (`[positions, d_model]`).
    pub fn encode(&self, h: &Tensor, noise: Noise) -> Result<BottleneckOutput> {
        let mut tape = Tape::new();
        let ev = self.bind(&mut tape, false);
        let hv = tape.constant(h.clone());
        let out = ev.encode(&mut tape, hv, noise)?;
        Ok(BottleneckOutput {
            mean: tape.value(out.mean).clone(),
            log_var: tape.value(out.log_var).clone(),
            z: tape.value(out.z).clone(),
            kl_per_position: tape.value(out.kl).clone(),
        })
    }

    /// Maps codes `z` (`[positions, d_z]`) back to model width.
    pub fn inject(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ev = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = ev.inject(&mut tape, zv)?;
        Ok(tape.value(out).clone())
    }
}

/// Encoder parameters recorded on a tape.
pub struct EncoderVars {
    d_model: usize,
    d_z: usize,
    vars: Vec<Var>,
}

/// Tape handles for an encoding.
pub struct TapeCode {
    pub mean: Var,
    pub log_var: Var,
    pub z: Var,
    /// `[positions]`
    pub kl: Var,
}

impl EncoderVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn encode(&self, tape: &mut Tape, h: Var, noise: Noise) -> Result<TapeCode> {
        let (rows, width) = tape.value(h).dims2("encode")?;
        if width != self.d_model {
            return Err(Error::invalid(format!("encoder expects width {}, got {width}", self.d_model)));
        }
        let v = &self.vars;
        let mean = tape.matmul(h, v[0])?;
        let mean = tape.add(mean, v[1])?;
        let raw = tape.matmul(h, v[2])?;
        let raw = tape.add(raw, v[3])?;
        let log_var = tape.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        let half = tape.scale(log_var, 0.5)?;
        let std = tape.exp(half)?;
        let z = match noise {
            Noise::Off => mean,
            Noise::Seeded(_) => {
                let eps = tape.constant(noise.draw(rows, self.d_z));
                let spread = tape.mul(std, eps)?;
                tape.add(mean, spread)?
            }
        };
        // ½ Σ_j (exp(lv) + μ² − 1 − lv)
        let var = tape.exp(log_var)?;
        let sq = tape.mul(mean, mean)?;
        let s = tape.add(var, sq)?;
        let s = tape.sub(s, log_var)?;
        let s = tape.add_scalar(s, -1.0)?;
        let s = tape.sum_last_axis(s)?;
        let kl = tape.scale(s, 0.5)?;
        Ok(TapeCode { mean, log_var, z, kl })
    }

    pub fn inject(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let (_, width) = tape.value(z).dims2("inject")?;
        if width != self.d_z {
            return Err(Error::invalid(format!("injection expects width {}, got {width}", self.d_z)));
        }
        let out = tape.matmul(z, self.vars[4])?;
        Ok(tape.add(out, self.vars[5])?)
    }
}

/// Closed-form `KL(N(mean, diag(exp(log_var))) ‖ N(0, I))`.
pub fn kl_closed_form(mean: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mean.iter().zip(log_var).map(|(m, lv)| lv.exp() + m * m - 1.0 - lv).sum::<f64>()
}

/// Monte-Carlo estimate of a KL divergence with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// `(1/S) Σ_s [log q(z_s) − log p(z_s)]` with `z_s ~ q`, for a diagonal Gaussian `q`
/// and a standard normal `p`.
pub fn kl_monte_carlo_check(mean: &[f64], log_var: &[f64], samples: usize, seed: u64) -> Result<McEstimate> {
    if samples == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    if mean.len() != log_var.len() {
        return Err(Error::invalid("mean and log_var lengths differ"));
    }
    let mut rng = rng::stream(seed, &[tag::NOISE]);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..samples {
        let mut term = 0.0;
        for (m, lv) in mean.iter().zip(log_var) {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let z = m + (0.5 * lv).exp() * eps;
            // log q − log p; the 2π terms cancel
            term += -0.5 * lv - 0.5 * eps * eps + 0.5 * z * z;
        }
        sum += term;
        sum_sq += term * term;
    }
    let n = samples as f64;
    let estimate = sum / n;
    let var = if samples > 1 { (sum_sq - n * estimate * estimate) / (n - 1.0) } else { 0.0 };
    Ok(McEstimate { estimate, std_error: (var.max(0.0) / n).sqrt() })
}
