//! Training objectives.
//!
//! * `ft`: mean negative log-likelihood of response tokens given the prompt.
//! * `compress`: mean KL of the bottleneck code to the prior, over response positions.
//! * `predict`: mean log-likelihood of response tokens when the tapped hidden
//!   states at response positions are replaced by the injected code.
//! * `ib = compress − β·predict` and `total = ft + α·ib`.
//!
//! All means pool every response token in the batch. Prompt positions never
//! contribute.

use serde::{Deserialize, Serialize};

use crate::bottleneck::{BottleneckEncoder, EncoderVars, Noise};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::transformer::{ModelVars, Sequence, TransformerModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ft: f64,
    pub compress: f64,
    pub predict: f64,
    pub ib: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Which terms to record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Ft,
    IbFt { alpha: f64, beta: f64, noise_seed: u64 },
}

/// Tape handles for a recorded objective.
pub struct TapeLosses {
    pub ft: Var,
    pub compress: Option<Var>,
    pub predict: Option<Var>,
    pub ib: Option<Var>,
    pub total: Var,
}

impl TapeLosses {
    pub fn breakdown(&self, tape: &Tape, objective: Objective) -> LossBreakdown {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        let (alpha, beta) = match objective {
            Objective::Ft => (0.0, 0.0),
            Objective::IbFt { alpha, beta, .. } => (alpha, beta),
        };
        LossBreakdown {
            ft: get(Some(self.ft)),
            compress: get(self.compress),
            predict: get(self.predict),
            ib: get(self.ib),
            total: get(Some(self.total)),
            alpha,
            beta,
        }
    }
}

fn check_weights(alpha: f64, beta: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config("alpha", format!("must be finite and >= 0, got {alpha}")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::config("beta", format!("must be finite and >= 0, got {beta}")));
    }
    Ok(())
}

fn sum_all(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    let mut acc = tape.sum(parts[0])?;
    for &p in &parts[1..] {
        let s = tape.sum(p)?;
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Records the objective for `batch` on `tape`.
pub fn record(tape: &mut Tape, mv: &ModelVars, ev: Option<&EncoderVars>, batch: &[Sequence], objective: Objective) -> Result<TapeLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = mv.config().clone();
    let tap = cfg.tap_layer;
    let ib = match objective {
        Objective::Ft => None,
        Objective::IbFt { alpha, beta, noise_seed } => {
            check_weights(alpha, beta)?;
            let ev = ev.ok_or_else(|| Error::invalid("IB objective needs an encoder"))?;
            Some((alpha, beta, noise_seed, ev))
        }
    };
    let tokens: usize = batch.iter().map(Sequence::response_len).sum();
    let mut nll = Vec::with_capacity(batch.len());
    let mut kl = Vec::new();
    let mut nll_z = Vec::new();
    for (i, seq) in batch.iter().enumerate() {
        let rows = seq.scored_rows();
        let x = mv.embed(tape, seq.inputs())?;
        let mut hidden = Vec::new();
        let h = mv.blocks(tape, x, 0..tap, &mut hidden)?;
        let top = mv.blocks(tape, h, tap..cfg.n_layers, &mut hidden)?;
        let logits = mv.head(tape, top)?;
        let vocab = cfg.vocab_size;
        let scored = tape.slice(logits, rows.clone(), 0..vocab)?;
        nll.push(tape.cross_entropy(scored, seq.targets())?);

        if let Some((_, _, noise_seed, ev)) = ib {
            let width = cfg.d_model;
            let hr = tape.slice(h, rows.clone(), 0..width)?;
            let noise = Noise::Seeded(rng::derive_seed(noise_seed, &[i as u64]));
            let code = ev.encode(tape, hr, noise)?;
            kl.push(code.kl);
            let injected = ev.inject(tape, code.z)?;
            let h_z = if rows.start == 0 {
                injected
            } else {
                let prefix = tape.slice(h, 0..rows.start, 0..width)?;
                tape.concat(&[prefix, injected], 0)?
            };
            let mut unused = Vec::new();
            let top_z = mv.blocks(tape, h_z, tap..cfg.n_layers, &mut unused)?;
            let logits_z = mv.head(tape, top_z)?;
            let scored_z = tape.slice(logits_z, rows, 0..vocab)?;
            nll_z.push(tape.cross_entropy(scored_z, seq.targets())?);
        }
    }
    let inv = 1.0 / tokens as f64;
    let ft_sum = sum_all(tape, &nll)?;
    let ft = tape.scale(ft_sum, inv)?;
    let Some((alpha, beta, _, _)) = ib else {
        return Ok(TapeLosses { ft, compress: None, predict: None, ib: None, total: ft });
    };
    let kl_sum = sum_all(tape, &kl)?;
    let compress = tape.scale(kl_sum, inv)?;
    let nll_z_sum = sum_all(tape, &nll_z)?;
    let predict = tape.scale(nll_z_sum, -inv)?;
    let weighted_predict = tape.scale(predict, -beta)?;
    let ib_var = tape.add(compress, weighted_predict)?;
    let weighted_ib = tape.scale(ib_var, alpha)?;
    let total = tape.add(ft, weighted_ib)?;
    Ok(TapeLosses { ft, compress: Some(compress), predict: Some(predict), ib: Some(ib_var), total })
}

fn evaluate(
    model: &TransformerModel,
    encoder: Option<&BottleneckEncoder>,
    batch: &[Sequence],
    objective: Objective,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mv = model.bind(&mut tape, false);
    let ev = encoder.map(|e| e.bind(&mut tape, false));
    let losses = record(&mut tape, &mv, ev.as_ref(), batch, objective)?;
    Ok(losses.breakdown(&tape, objective))
}

pub fn ft_loss(model: &TransformerModel, batch: &[Sequence]) -> Result<f64> {
    Ok(evaluate(model, None, batch, Objective::Ft)?.ft)
}

pub fn compression_loss(model: &TransformerModel, encoder: &BottleneckEncoder, batch: &[Sequence], noise_seed: u64) -> Result<f64> {
    Ok(evaluate(model, Some(encoder), batch, Objective::IbFt { alpha: 0.0, beta: 0.0, noise_seed })?.compress)
}

/// Mean response log-likelihood through the bottleneck; to be maximized.
pub fn prediction_loss(model: &TransformerModel, encoder: &BottleneckEncoder, batch: &[Sequence], noise_seed: u64) -> Result<f64> {
    Ok(evaluate(model, Some(encoder), batch, Objective::IbFt { alpha: 0.0, beta: 0.0, noise_seed })?.predict)
}

pub fn ibft_total(
    model: &TransformerModel,
    encoder: &BottleneckEncoder,
    batch: &[Sequence],
    alpha: f64,
    beta: f64,
    noise_seed: u64,
) -> Result<LossBreakdown> {
    check_weights(alpha, beta)?;
    evaluate(model, Some(encoder), batch, Objective::IbFt { alpha, beta, noise_seed })
}
