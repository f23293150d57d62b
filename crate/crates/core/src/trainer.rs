//! Optimizer, learning-rate schedule and the two training stages.
//!
//! Pretraining builds the base model from scratch on a background corpus
//! into which a fraction of the fine-tuning set has been planted, so the
//! base model has already memorized part of what it will later be tuned on.
//! Fine-tuning then runs either the plain objective or the bottleneck one.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bottleneck::BottleneckEncoder;
use crate::error::{Error, Result};
use crate::objectives::{self, LossBreakdown, Objective};
use crate::params::Params;
use crate::rng::{self, tag};
use crate::stackcalc::Example;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::{Sequence, TransformerConfig, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "ib-ft")]
    IbFt,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(Method::Ft),
            "ib-ft" => Ok(Method::IbFt),
            other => Err(Error::config("method", format!("unknown method {other:?} (expected ft or ib-ft)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Ft => "ft",
            Method::IbFt => "ib-ft",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    /// Fraction of the fine-tuning set planted into the pretraining corpus.
    pub contamination_ratio: f64,
    pub weight_decay: f64,
    /// Bottleneck width; `None` means `d_model / 4`.
    pub d_z: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Ft,
            epochs: 3,
            batch_size: 4,
            base_lr: 1e-3,
            warmup_ratio: 0.03,
            alpha: 0.1,
            beta: 0.02,
            seed: 0,
            contamination_ratio: 0.5,
            weight_decay: 0.01,
            d_z: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(0.0..=0.5).contains(&self.warmup_ratio) {
            return Err(Error::config("warmup_ratio", "must lie in [0, 0.5]"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be finite and >= 0"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.contamination_ratio) {
            return Err(Error::config("contamination_ratio", "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if self.d_z == Some(0) {
            return Err(Error::config("d_z", "must be positive"));
        }
        Ok(())
    }

    pub fn bottleneck_width(&self, model: &TransformerConfig) -> usize {
        self.d_z.unwrap_or((model.d_model / 4).max(1))
    }
}

fn warmup_steps(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).ceil() as usize
}

/// Linear warm-up from 0 to `base_lr`, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, config: &TrainConfig) -> Result<f64> {
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond total {total}")));
    }
    let warm = warmup_steps(total, config.warmup_ratio);
    let base = config.base_lr;
    if step < warm {
        return Ok(base * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(base);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(base * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Adam with bias correction and decoupled weight decay on matrix-shaped parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.iter().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape()) {
            return Err(Error::invalid("gradient shapes do not match parameters"));
        }
        if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + decay * *w);
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "step,ft,compress,predict,ib,total,lr";

impl LogRow {
    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!("{},{:e},{:e},{:e},{:e},{:e},{:e}", self.step, l.ft, l.compress, l.predict, l.ib, l.total, self.lr)
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Trained parameters plus the per-step log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TransformerModel,
    pub encoder: Option<BottleneckEncoder>,
    pub log: Vec<LogRow>,
}

/// Computes the loss and gradients of one batch.
pub struct StepResult {
    pub loss: LossBreakdown,
    pub model_grads: Vec<Tensor>,
    pub encoder_grads: Option<Vec<Tensor>>,
}

pub fn compute_step(
    model: &TransformerModel,
    encoder: Option<&BottleneckEncoder>,
    batch: &[Sequence],
    objective: Objective,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let mv = model.bind(&mut tape, true);
    let ev = encoder.map(|e| e.bind(&mut tape, true));
    let losses = objectives::record(&mut tape, &mv, ev.as_ref(), batch, objective)?;
    let grads = tape.backward(losses.total)?;
    let model_grads = mv.vars().iter().map(|&v| grads.wrt(&tape, v)).collect::<Result<Vec<_>, _>>()?;
    let encoder_grads = match &ev {
        Some(ev) => Some(ev.vars().iter().map(|&v| grads.wrt(&tape, v)).collect::<Result<Vec<_>, _>>()?),
        None => None,
    };
    Ok(StepResult { loss: losses.breakdown(&tape, objective), model_grads, encoder_grads })
}

/// Runs `config.epochs` epochs over `data` with the configured objective.
/// `encoder` must be present exactly when the method is IB-FT.
pub fn train(
    mut model: TransformerModel,
    mut encoder: Option<BottleneckEncoder>,
    data: &[Sequence],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if (config.method == Method::IbFt) != encoder.is_some() {
        return Err(Error::invalid("an encoder is required for ib-ft and only for ib-ft"));
    }
    let per_epoch = data.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut opt = AdamW::new(model.params(), config.weight_decay);
    let mut enc_opt = encoder.as_ref().map(|e| AdamW::new(e.params(), config.weight_decay));
    let mut log = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sequence> = chunk.iter().map(|&i| data[i].clone()).collect();
            let objective = match config.method {
                Method::Ft => Objective::Ft,
                Method::IbFt => Objective::IbFt {
                    alpha: config.alpha,
                    beta: config.beta,
                    noise_seed: rng::derive_seed(config.seed, &[tag::NOISE, step as u64]),
                },
            };
            let lr = lr_at(step, total, config)?;
            let res = compute_step(&model, encoder.as_ref(), &batch, objective)?;
            opt.step(model.params_mut(), &res.model_grads, lr)?;
            if let (Some(enc), Some(eo), Some(g)) = (encoder.as_mut(), enc_opt.as_mut(), res.encoder_grads.as_ref()) {
                eo.step(enc.params_mut(), g, lr)?;
            }
            log.push(LogRow { step, epoch, lr, loss: res.loss });
            step += 1;
        }
    }
    Ok(TrainOutcome { model, encoder, log })
}

/// Which fine-tuning examples were planted into the pretraining corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationManifest {
    pub planted: BTreeSet<u64>,
    pub code_ids: Vec<u64>,
}

impl ContaminationManifest {
    pub fn is_contaminated(&self, id: u64) -> bool {
        self.planted.contains(&id)
    }
}

/// Number of items selected by a ratio; the small guard absorbs
/// representation error such as `0.1 * 1000 = 99.999…`.
pub(crate) fn ratio_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

/// Picks `⌊ρ·N⌋` fine-tuning examples to plant, reproducibly from the seed.
pub fn plan_contamination(code: &[Example], ratio: f64, seed: u64) -> Result<ContaminationManifest> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config("contamination_ratio", "must lie in [0, 1]"));
    }
    let mut ids: Vec<u64> = code.iter().map(Example::id).collect();
    let code_ids = ids.clone();
    ids.shuffle(&mut rng::stream(seed, &[tag::CONTAMINATION]));
    let planted = ids.into_iter().take(ratio_count(ratio, code.len())).collect();
    Ok(ContaminationManifest { planted, code_ids })
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: TransformerModel,
    pub manifest: ContaminationManifest,
    pub log: Vec<LogRow>,
}

/// Trains the base model from scratch on `background` plus the planted part of `code`.
pub fn pretrain(
    model_config: &TransformerConfig,
    config: &TrainConfig,
    background: &[Example],
    code: &[Example],
) -> Result<PretrainOutcome> {
    config.validate()?;
    let manifest = plan_contamination(code, config.contamination_ratio, config.seed)?;
    let corpus: Vec<Sequence> =
        background.iter().chain(code.iter().filter(|e| manifest.is_contaminated(e.id()))).map(Example::sequence).collect::<Result<_>>()?;
    if corpus.is_empty() {
        return Err(Error::invalid("empty pretraining corpus"));
    }
    let model = TransformerModel::init(model_config.clone(), config.seed)?;
    let cfg = TrainConfig { method: Method::Ft, ..config.clone() };
    let out = train(model, None, &corpus, &cfg)?;
    Ok(PretrainOutcome { model: out.model, manifest, log: out.log })
}

/// Fine-tunes a copy of the base model on `data`. For IB-FT a fresh encoder
/// is initialized from the seed.
pub fn finetune(config: &TrainConfig, base: &TransformerModel, data: &[Example]) -> Result<TrainOutcome> {
    config.validate()?;
    let seqs: Vec<Sequence> = data.iter().map(Example::sequence).collect::<Result<_>>()?;
    let encoder = match config.method {
        Method::Ft => None,
        Method::IbFt => {
            let d = base.config().d_model;
            Some(BottleneckEncoder::init(d, config.bottleneck_width(base.config()), config.seed)?)
        }
    };
    train(base.clone(), encoder, &seqs, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stackcalc;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { base_lr: 0.5, warmup_ratio: 0.03, ..Default::default() };
        let total = 1000;
        assert_eq!(lr_at(0, total, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(30, total, &cfg).unwrap(), 0.5);
        assert!(lr_at(total, total, &cfg).unwrap().abs() < 1e-15);
        assert!((lr_at(15, total, &cfg).unwrap() - 0.25).abs() < 1e-15);
        assert!((lr_at(515, total, &cfg).unwrap() - 0.25).abs() < 1e-12);
        assert!(lr_at(total + 1, total, &cfg).is_err());
        let mut prev = f64::INFINITY;
        for s in 30..=total {
            let lr = lr_at(s, total, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn scalar_params(w: f64) -> Params {
        let mut p = Params::new();
        p.push("w", Tensor::new(vec![1], vec![w]).unwrap());
        p
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = scalar_params(0.0);
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..200 {
            let w = p.tensors()[0].data()[0];
            let g = Tensor::new(vec![1], vec![2.0 * (w - 3.0)]).unwrap();
            opt.step(&mut p, &[g], 0.1).unwrap();
        }
        let w = p.tensors()[0].data()[0];
        assert!((w - 3.0).abs() < 0.01, "{w}");
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Params::new();
        p.push("m", Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let before = p.clone();
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[Tensor::zeros(&[2, 2])], 0.1).unwrap();
        assert_eq!(p, before);
        assert!(opt.step(&mut p, &[Tensor::zeros(&[4])], 0.1).is_err());
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = [
            (TrainConfig { warmup_ratio: 0.6, ..Default::default() }, "warmup_ratio"),
            (TrainConfig { batch_size: 0, ..Default::default() }, "batch_size"),
            (TrainConfig { contamination_ratio: 1.5, ..Default::default() }, "contamination_ratio"),
            (TrainConfig { alpha: -1.0, ..Default::default() }, "alpha"),
        ];
        for (cfg, name) in bad {
            match cfg.validate() {
                Err(Error::Config { field, .. }) => assert_eq!(field, name),
                other => panic!("{other:?}"),
            }
        }
        assert_eq!("ib-ft".parse::<Method>().unwrap(), Method::IbFt);
        assert!("sgd".parse::<Method>().is_err());
    }

    #[test]
    fn contamination_extremes_and_exactness() {
        let code = stackcalc::generate_dataset(40, 2);
        let none = plan_contamination(&code, 0.0, 1).unwrap();
        assert!(none.planted.is_empty());
        let all = plan_contamination(&code, 1.0, 1).unwrap();
        assert_eq!(all.planted.len(), 40);
        let half = plan_contamination(&code, 0.5, 1).unwrap();
        assert_eq!(half.planted.len(), 20);
        assert_eq!(half, plan_contamination(&code, 0.5, 1).unwrap());
        assert!(half.planted.iter().all(|id| half.code_ids.contains(id)));
    }

    fn tiny() -> TransformerConfig {
        TransformerConfig { vocab_size: 40, d_model: 16, n_layers: 3, n_heads: 2, d_ff: 32, max_seq_len: 40, tap_layer: 1 }
    }

    #[test]
    fn ft_training_reduces_loss() {
        let data = stackcalc::generate_with(&[48], &stackcalc::TaskConfig { min_ops: 1, max_ops: 2 }, 3).remove(0);
        let base = TransformerModel::init(tiny(), 1).unwrap();
        let cfg = TrainConfig { epochs: 3, base_lr: 3e-3, ..Default::default() };
        let out = finetune(&cfg, &base, &data).unwrap();
        let per = out.log.len() / 3;
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.loss.ft).sum::<f64>() / rows.len() as f64;
        assert!(mean(&out.log[2 * per..]) < mean(&out.log[..per]));
        assert!(out.encoder.is_none());
        assert_eq!(log_csv(&out.log).lines().next().unwrap(), LOG_HEADER);
    }

    #[test]
    fn zero_alpha_bottleneck_run_matches_plain_run_bitwise() {
        let data = stackcalc::generate_with(&[20], &stackcalc::TaskConfig { min_ops: 1, max_ops: 2 }, 4).remove(0);
        let base = TransformerModel::init(tiny(), 2).unwrap();
        let ft = TrainConfig { epochs: 1, base_lr: 3e-3, seed: 5, ..Default::default() };
        let ib = TrainConfig { method: Method::IbFt, alpha: 0.0, d_z: Some(4), ..ft.clone() };
        let a = finetune(&ft, &base, &data).unwrap();
        let b = finetune(&ib, &base, &data).unwrap();
        assert_eq!(a.model, b.model);
        assert!(b.encoder.is_some());
    }
}
