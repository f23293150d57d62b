//! Tiny decoder-only causal language model.
//!
//! Pre-norm blocks (layer norm → multi-head causal attention → residual,
//! layer norm → GELU MLP → residual) over learned token and position
//! embeddings. Training runs through [`ModelVars`] on a [`Tape`]; inference
//! uses [`Decoder`], an incremental tape-free path with a key/value cache.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::{self, tag};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use crate::vocab;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Block whose output feeds the bottleneck, counted from 1. Must leave at
    /// least one block above it.
    pub tap_layer: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { vocab_size: 64, d_model: 128, n_layers: 4, n_heads: 4, d_ff: 256, max_seq_len: 256, tap_layer: 2 }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < vocab::USED {
            return Err(Error::config("vocab_size", format!("must be at least {}", vocab::USED)));
        }
        for (field, v) in [("d_model", self.d_model), ("n_heads", self.n_heads), ("d_ff", self.d_ff), ("max_seq_len", self.max_seq_len)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n_layers < 2 {
            return Err(Error::config("n_layers", "need at least 2 layers for an interior tap"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("n_heads", format!("{} does not divide d_model {}", self.n_heads, self.d_model)));
        }
        if self.tap_layer < 1 || self.tap_layer >= self.n_layers {
            return Err(Error::config("tap_layer", format!("must lie in [1, {}]", self.n_layers - 1)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let per_layer = 4 * d * d + 9 * d + 2 * d * f + f;
        v * d + self.max_seq_len * d + self.n_layers * per_layer + 2 * d + d * v + v
    }
}

const LAYER_PARAMS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.gain", "ln2.bias",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

/// Parameter names and shapes in storage order.
fn layout(c: &TransformerConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f) = (c.vocab_size, c.d_model, c.d_ff);
    let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![c.max_seq_len, d])];
    for l in 0..c.n_layers {
        for name in LAYER_PARAMS {
            let shape = match name {
                "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![d, d],
                "mlp.w1" => vec![d, f],
                "mlp.b1" => vec![f],
                "mlp.w2" => vec![f, d],
                _ => vec![d],
            };
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("ln_f.gain".into(), vec![d]));
    out.push(("ln_f.bias".into(), vec![d]));
    out.push(("head.w".into(), vec![d, v]));
    out.push(("head.b".into(), vec![v]));
    out
}

/// Sequence laid out as `prompt SEP response`, with the response non-empty.
///
/// The model reads `tokens[..len-1]` and is scored on predicting the response
/// tokens, i.e. on rows `response_start-1 .. len-1` of its output. Those rows
/// are the "response positions" used by every loss and analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    tokens: Vec<usize>,
    response_start: usize,
}

impl Sequence {
    /// `context` is the conditioning prefix (prompt and separator).
    pub fn new(context: &[usize], response: &[usize]) -> Result<Self> {
        if context.is_empty() {
            return Err(Error::invalid("empty context"));
        }
        if response.is_empty() {
            return Err(Error::invalid("empty response"));
        }
        let mut tokens = context.to_vec();
        tokens.extend_from_slice(response);
        Ok(Self { tokens, response_start: context.len() })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Model input: every token but the last.
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[self.response_start..]
    }

    pub fn scored_rows(&self) -> Range<usize> {
        self.response_start - 1..self.tokens.len() - 1
    }

    pub fn response_len(&self) -> usize {
        self.tokens.len() - self.response_start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: TransformerConfig,
    params: Params,
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `[seq, vocab]`
    pub logits: Tensor,
    /// Output of each block, `[seq, d_model]`; entry `i` is block `i + 1`.
    pub hidden_states: Vec<Tensor>,
}

impl TransformerModel {
    /// Scaled-normal initialization: weights ~ N(0, 0.02²), with the two
    /// residual output projections further scaled by `1/sqrt(2·n_layers)`;
    /// normalization gains 1, biases 0.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[tag::INIT]);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let resid = Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut params = Params::new();
        for (name, shape) in layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("gain") {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                (0..n).map(|_| resid.sample(&mut rng)).collect()
            } else {
                (0..n).map(|_| base.sample(&mut rng)).collect()
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: TransformerConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), params.len())));
        }
        for ((name, shape), (pn, pt)) in expected.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(Error::Checkpoint(format!("parameter {pn} {:?} does not match {name} {shape:?}", pt.shape())));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars::new(&self.config, &self.params, self.params.bind(tape, trainable))
    }

    /// Uses already-recorded handles, one per parameter in order, as this model's weights.
    pub fn attach(&self, vars: &[Var]) -> Result<ModelVars> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!("expected {} parameter handles, got {}", self.params.len(), vars.len())));
        }
        Ok(ModelVars::new(&self.config, &self.params, vars.to_vec()))
    }

    /// Full forward pass returning logits and every block's output.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardResult> {
        let mut tape = Tape::new();
        let mv = self.bind(&mut tape, false);
        let out = mv.forward(&mut tape, tokens)?;
        Ok(ForwardResult {
            logits: tape.value(out.logits).clone(),
            hidden_states: out.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
        })
    }
}

struct LayerVars {
    ln1: (Var, Var),
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2: (Var, Var),
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Model parameters recorded on a tape.
pub struct ModelVars {
    config: TransformerConfig,
    vars: Vec<Var>,
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<LayerVars>,
    ln_f: (Var, Var),
    head_w: Var,
    head_b: Var,
}

/// Tape handles produced by [`ModelVars::forward`].
pub struct TapeForward {
    pub logits: Var,
    pub hidden: Vec<Var>,
}

impl ModelVars {
    fn new(config: &TransformerConfig, params: &Params, vars: Vec<Var>) -> Self {
        let get = |name: &str| vars[params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"))];
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = |n: &str| get(&format!("layers.{l}.{n}"));
                LayerVars {
                    ln1: (p("ln1.gain"), p("ln1.bias")),
                    wq: p("attn.wq"),
                    bq: p("attn.bq"),
                    wk: p("attn.wk"),
                    bk: p("attn.bk"),
                    wv: p("attn.wv"),
                    bv: p("attn.bv"),
                    wo: p("attn.wo"),
                    bo: p("attn.bo"),
                    ln2: (p("ln2.gain"), p("ln2.bias")),
                    w1: p("mlp.w1"),
                    b1: p("mlp.b1"),
                    w2: p("mlp.w2"),
                    b2: p("mlp.b2"),
                }
            })
            .collect();
        Self {
            config: config.clone(),
            tok_emb: get("tok_emb"),
            pos_emb: get("pos_emb"),
            layers,
            ln_f: (get("ln_f.gain"), get("ln_f.bias")),
            head_w: get("head.w"),
            head_b: get("head.b"),
            vars,
        }
    }

    /// Leaves in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn embed(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        check_tokens(&self.config, tokens)?;
        let e = tape.embedding(self.tok_emb, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = tape.embedding(self.pos_emb, &positions)?;
        Ok(tape.add(e, p)?)
    }

    /// Runs block `layer` (0-based) on the residual stream `x`.
    pub fn block(&self, tape: &mut Tape, layer: usize, x: Var) -> Result<Var> {
        let lv = &self.layers[layer];
        let (seq, _) = tape.value(x).dims2("block")?;
        let dh = self.config.head_dim();
        let a = tape.layer_norm(x, lv.ln1.0, lv.ln1.1)?;
        let q = tape.matmul(a, lv.wq)?;
        let q = tape.add(q, lv.bq)?;
        let k = tape.matmul(a, lv.wk)?;
        let k = tape.add(k, lv.bk)?;
        let v = tape.matmul(a, lv.wv)?;
        let v = tape.add(v, lv.bv)?;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = tape.slice(q, 0..seq, cols.clone())?;
            let kh = tape.slice(k, 0..seq, cols.clone())?;
            let vh = tape.slice(v, 0..seq, cols)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, inv)?;
            let p = tape.softmax(s, true)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let o = tape.matmul(o, lv.wo)?;
        let o = tape.add(o, lv.bo)?;
        let x = tape.add(x, o)?;
        let m = tape.layer_norm(x, lv.ln2.0, lv.ln2.1)?;
        let f = tape.matmul(m, lv.w1)?;
        let f = tape.add(f, lv.b1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, lv.w2)?;
        let f = tape.add(f, lv.b2)?;
        Ok(tape.add(x, f)?)
    }

    /// Runs blocks in `layers` (0-based), pushing each output onto `hidden`.
    pub fn blocks(&self, tape: &mut Tape, mut x: Var, layers: Range<usize>, hidden: &mut Vec<Var>) -> Result<Var> {
        for l in layers {
            x = self.block(tape, l, x)?;
            hidden.push(x);
        }
        Ok(x)
    }

    pub fn head(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, self.ln_f.0, self.ln_f.1)?;
        let logits = tape.matmul(h, self.head_w)?;
        Ok(tape.add(logits, self.head_b)?)
    }

    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<TapeForward> {
        let x = self.embed(tape, tokens)?;
        let mut hidden = Vec::with_capacity(self.config.n_layers);
        let x = self.blocks(tape, x, 0..self.config.n_layers, &mut hidden)?;
        Ok(TapeForward { logits: self.head(tape, x)?, hidden })
    }
}

fn check_tokens(config: &TransformerConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::invalid("empty token sequence"));
    }
    if tokens.len() > config.max_seq_len {
        return Err(Error::invalid(format!("sequence of {} tokens exceeds max_seq_len {}", tokens.len(), config.max_seq_len)));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::invalid(format!("token {t} outside vocabulary of {}", config.vocab_size)));
    }
    Ok(())
}

/// Parameter indices used by [`Decoder`].
struct LayerIdx([usize; 16]);

/// Incremental inference over a model, one token at a time, with cached
/// keys and values. Produces the same logits as the tape forward up to
/// floating-point summation order.
pub struct Decoder<'m> {
    model: &'m TransformerModel,
    layers: Vec<LayerIdx>,
    tail: [usize; 6],
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    len: usize,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m TransformerModel) -> Self {
        let p = &model.params;
        let idx = |n: &str| p.index_of(n).unwrap_or_else(|| panic!("missing parameter {n}"));
        let layers = (0..model.config.n_layers).map(|l| LayerIdx(LAYER_PARAMS.map(|n| idx(&format!("layers.{l}.{n}"))))).collect();
        let tail = ["tok_emb", "pos_emb", "ln_f.gain", "ln_f.bias", "head.w", "head.b"].map(idx);
        let n = model.config.n_layers;
        Self { model, layers, tail, keys: vec![Vec::new(); n], values: vec![Vec::new(); n], hidden: vec![Vec::new(); n], len: 0 }
    }

    /// Number of tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Output of block `layer` (0-based) at the most recent position.
    pub fn hidden(&self, layer: usize) -> &[f64] {
        &self.hidden[layer]
    }

    /// Consumes `token` and returns next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let c = &self.model.config;
        if token >= c.vocab_size {
            return Err(Error::invalid(format!("token {token} outside vocabulary of {}", c.vocab_size)));
        }
        if self.len >= c.max_seq_len {
            return Err(Error::invalid(format!("sequence exceeds max_seq_len {}", c.max_seq_len)));
        }
        let t = |i: usize| self.model.params.tensors()[i].data();
        let d = c.d_model;
        let dh = c.head_dim();
        let mut x: Vec<f64> = t(self.tail[0])[token * d..(token + 1) * d]
            .iter()
            .zip(&t(self.tail[1])[self.len * d..(self.len + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let pos = self.len;
        for (l, li) in self.layers.iter().enumerate() {
            let w = |j: usize| t(li.0[j]);
            let a = layer_norm_row(&x, w(0), w(1));
            let q = affine(&a, w(2), w(3));
            let k = affine(&a, w(4), w(5));
            let v = affine(&a, w(6), w(7));
            self.keys[l].extend_from_slice(&k);
            self.values[l].extend_from_slice(&v);
            let (keys, values) = (&self.keys[l], &self.values[l]);
            let inv = 1.0 / (dh as f64).sqrt();
            let mut o = vec![0.0; d];
            let mut scores = vec![0.0; pos + 1];
            for h in 0..c.n_heads {
                let cols = h * dh..(h + 1) * dh;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kr = &keys[j * d..(j + 1) * d][cols.clone()];
                    *s = q[cols.clone()].iter().zip(kr).map(|(x, y)| x * y).sum::<f64>() * inv;
                }
                let p = tensor::softmax_rows(&scores, 1, pos + 1, false);
                for (j, pj) in p.iter().enumerate() {
                    let vr = &values[j * d..(j + 1) * d][cols.clone()];
                    for (oc, vc) in o[cols.clone()].iter_mut().zip(vr) {
                        *oc += pj * vc;
                    }
                }
            }
            let o = affine(&o, w(8), w(9));
            for (xi, oi) in x.iter_mut().zip(&o) {
                *xi += oi;
            }
            let m = layer_norm_row(&x, w(10), w(11));
            let mut f = affine(&m, w(12), w(13));
            for fi in f.iter_mut() {
                *fi = tensor::gelu(*fi);
            }
            let f = affine(&f, w(14), w(15));
            for (xi, fi) in x.iter_mut().zip(&f) {
                *xi += fi;
            }
            self.hidden[l].clone_from(&x);
        }
        let h = layer_norm_row(&x, t(self.tail[2]), t(self.tail[3]));
        self.len += 1;
        Ok(affine(&h, t(self.tail[4]), t(self.tail[5])))
    }
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rs = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(gain).zip(bias).map(|((v, g), b)| (v - mean) * rs * g + b).collect()
}

/// `x · w + b` for a row vector `x` and row-major `w`.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut out = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        for (o, wij) in out.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *o += xi * wij;
        }
    }
    out
}

/// Next-token probabilities at temperature `t > 0`.
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    tensor::softmax_rows(&scaled, 1, scaled.len(), false)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws one token: argmax at `temperature == 0`, otherwise a sample from the tempered softmax.
pub fn choose_token(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    if temperature == 0.0 {
        return argmax(logits);
    }
    let probs = tempered_softmax(logits, temperature);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// Continues `context` for at most `max_new` tokens, stopping after `END` or
/// once context plus output reach the model's maximum length. Deterministic in `seed`.
pub fn sample_sequence(model: &TransformerModel, context: &[usize], temperature: f64, max_new: usize, seed: u64) -> Result<Vec<usize>> {
    if temperature.is_nan() || temperature < 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be a finite value >= 0, got {temperature}")));
    }
    if context.is_empty() {
        return Err(Error::invalid("empty context"));
    }
    let mut dec = Decoder::new(model);
    let mut logits = Vec::new();
    for &tok in context {
        logits = dec.step(tok)?;
    }
    let mut rng = rng::stream(seed, &[tag::SAMPLE]);
    let mut out = Vec::new();
    let room = model.config.max_seq_len.saturating_sub(context.len());
    let limit = max_new.min(room);
    while out.len() < limit {
        let tok = choose_token(&logits, temperature, &mut rng);
        out.push(tok);
        if tok == vocab::END || out.len() == limit {
            break;
        }
        logits = dec.step(tok)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerConfig {
        TransformerConfig { vocab_size: 40, d_model: 16, n_layers: 3, n_heads: 2, d_ff: 32, max_seq_len: 24, tap_layer: 1 }
    }

    #[test]
    fn config_validation() {
        assert!(TransformerConfig::default().validate().is_ok());
        let bad = [
            TransformerConfig { n_heads: 3, ..small() },
            TransformerConfig { tap_layer: 0, ..small() },
            TransformerConfig { tap_layer: 3, ..small() },
            TransformerConfig { vocab_size: 10, ..small() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config { .. })), "{c:?}");
        }
    }

    #[test]
    fn default_parameter_count_matches_hand_count() {
        // embeddings 64·128 + 256·128 = 40960
        // per layer: ln 2·256, attention 4·(128·128 + 128) = 66048, mlp 128·256 + 256 + 256·128 + 128 = 65920 → 132480
        // final norm 256, head 128·64 + 64 = 8256
        let hand = 40_960 + 4 * 132_480 + 256 + 8_256;
        let cfg = TransformerConfig::default();
        assert_eq!(cfg.param_count(), hand);
        let model = TransformerModel::init(cfg, 0).unwrap();
        assert_eq!(model.params().scalar_count(), hand);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = TransformerModel::init(small(), 3).unwrap();
        let b = TransformerModel::init(small(), 3).unwrap();
        let c = TransformerModel::init(small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        assert!(a.params().get("layers.0.ln1.gain").unwrap().data().iter().all(|&g| g == 1.0));
        assert!(a.params().get("layers.0.attn.bq").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn forward_shapes_and_errors() {
        let m = TransformerModel::init(small(), 1).unwrap();
        let out = m.forward(&[3, 4, 5]).unwrap();
        assert_eq!(out.logits.shape(), &[3, 40]);
        assert_eq!(out.hidden_states.len(), 3);
        assert_eq!(out.hidden_states[1].shape(), &[3, 16]);
        assert!(m.forward(&[]).is_err());
        assert!(m.forward(&[40]).is_err());
        assert!(m.forward(&[1; 25]).is_err());
    }

    #[test]
    fn causality_is_exact() {
        let m = TransformerModel::init(small(), 2).unwrap();
        let base = [5usize, 9, 2, 17, 30, 8, 1];
        let ref_logits = m.forward(&base).unwrap().logits;
        for t in 0..base.len() {
            let mut changed = base;
            changed[t] = (changed[t] + 7) % 40;
            let l = m.forward(&changed).unwrap().logits;
            for pos in 0..base.len() {
                if pos < t {
                    assert_eq!(l.row(pos), ref_logits.row(pos), "position {pos} saw token {t}");
                } else if pos == t {
                    assert_ne!(l.row(pos), ref_logits.row(pos));
                }
            }
        }
    }

    #[test]
    fn decoder_matches_tape_forward() {
        let m = TransformerModel::init(small(), 5).unwrap();
        let tokens = [0usize, 12, 16, 3, 1, 33, 20];
        let full = m.forward(&tokens).unwrap();
        let mut dec = Decoder::new(&m);
        for (i, &t) in tokens.iter().enumerate() {
            let logits = dec.step(t).unwrap();
            for (a, b) in logits.iter().zip(full.logits.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
            for l in 0..3 {
                for (a, b) in dec.hidden(l).iter().zip(full.hidden_states[l].row(i)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = TransformerModel::init(small(), 9).unwrap();
        let out = m.forward(&[1, 2, 3, 4]).unwrap();
        for r in 0..4 {
            let s: f64 = tempered_softmax(out.logits.row(r), 1.0).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn greedy_is_deterministic_and_is_the_low_temperature_limit() {
        let m = TransformerModel::init(small(), 6).unwrap();
        let ctx = [13, 14, 16, 0];
        let a = sample_sequence(&m, &ctx, 0.0, 8, 1).unwrap();
        let b = sample_sequence(&m, &ctx, 0.0, 8, 99).unwrap();
        assert_eq!(a, b);
        let logits = Decoder::new(&m).step(13).unwrap();
        let top = argmax(&logits);
        let p = tempered_softmax(&logits, 1e-4);
        assert!(p[top] > 0.999_999);
    }

    #[test]
    fn sampling_respects_limits_and_rejects_negative_temperature() {
        let m = TransformerModel::init(small(), 6).unwrap();
        let out = sample_sequence(&m, &[13, 0], 1.0, 5, 3).unwrap();
        assert!(out.len() <= 5);
        assert!(sample_sequence(&m, &[13, 0], -0.1, 5, 3).is_err());
        let long = sample_sequence(&m, &[13; 20], 1.0, 50, 3).unwrap();
        assert!(long.len() <= 4);
    }

    #[test]
    fn first_token_frequencies_match_softmax() {
        let m = TransformerModel::init(small(), 11).unwrap();
        // Sharpen the head so the distribution is far from uniform.
        let mut m = m;
        for v in m.params_mut().get_mut("head.w").unwrap().data_mut() {
            *v *= 40.0;
        }
        let ctx = [12usize, 16, 13, 0];
        let mut dec = Decoder::new(&m);
        let mut logits = Vec::new();
        for &t in &ctx {
            logits = dec.step(t).unwrap();
        }
        let p = tempered_softmax(&logits, 1.0);
        let draws = 1000;
        let mut counts = vec![0usize; 40];
        for s in 0..draws {
            let out = sample_sequence(&m, &ctx, 1.0, 1, s).unwrap();
            counts[out[0]] += 1;
        }
        for (c, pi) in counts.iter().zip(&p) {
            let expected = pi * draws as f64;
            let sd = (draws as f64 * pi * (1.0 - pi)).sqrt();
            assert!((*c as f64 - expected).abs() <= 3.0 * sd + 1.0, "count {c} vs {expected:.1}");
        }
    }

    #[test]
    fn fresh_model_nll_is_near_ln_vocab() {
        use rand::Rng;
        let cfg = TransformerConfig::default();
        let m = TransformerModel::init(cfg.clone(), 21).unwrap();
        let mut rng = rng::stream(5, &[]);
        let mut total = 0.0;
        let mut count = 0.0;
        for _ in 0..100 {
            let len = rng.random_range(4..16);
            let toks: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
            let mut dec = Decoder::new(&m);
            for w in toks.windows(2) {
                let logits = dec.step(w[0]).unwrap();
                total += tensor::log_sum_exp(&logits) - logits[w[1]];
                count += 1.0;
            }
        }
        let mean = total / count;
        let ln_v = (cfg.vocab_size as f64).ln();
        assert!((mean - ln_v).abs() < 0.1 * ln_v, "{mean} vs {ln_v}");
    }
}
