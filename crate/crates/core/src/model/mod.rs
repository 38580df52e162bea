//! Transformer sequence classifier over encoded functions.
//!
//! Post-norm encoder blocks (self-attention, feed-forward, residuals and
//! layer normalization), fixed sinusoidal positions, a linear two-class head
//! on the pooled token, and hand-written backpropagation. All parameters live
//! in one flat buffer described by a named tensor layout.

mod backward;
pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};
use crate::scalar::Scalar;
use crate::tokenizer::TokenSequence;
use crate::trace::Label;

pub use backward::{loss_and_grad, Gradient};
pub use train::{train, EpochReport, TrainSettings, TrainingReport};

use ops::{gelu, layer_norm, matmul, sinusoidal_positions, softmax_in_place, LayerNormCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    FirstToken,
    LastToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ffn: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub attention: Attention,
    pub pooling: Pooling,
    pub dropout: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Encoder-style defaults at desk scale.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            ffn: 256,
            max_len: 128,
            vocab_size,
            attention: Attention::Bidirectional,
            pooling: Pooling::FirstToken,
            dropout: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PulseError::Config(m));
        if self.hidden == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn == 0 {
            return bad("hidden, n_heads, n_layers and ffn must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return bad(format!(
                "hidden {} is not divisible by n_heads {}",
                self.hidden, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match (self.attention, self.pooling) {
            (Attention::Causal, Pooling::LastToken) | (Attention::Bidirectional, Pooling::FirstToken) => Ok(()),
            (a, p) => bad(format!("pooling {p:?} is incompatible with {a:?} attention")),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Offsets {
    pub embed: usize,
    pub emb_ln_g: usize,
    pub emb_ln_b: usize,
    pub layers: Vec<LayerOffsets>,
    pub head_w: usize,
    pub head_b: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Vec<TensorSpec>, Offsets) {
    let mut specs: Vec<TensorSpec> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| -> usize {
        let offset = specs.last().map(|s| s.offset + s.len()).unwrap_or(0);
        specs.push(TensorSpec { name, shape, offset });
        offset
    };
    let (d, f) = (cfg.hidden, cfg.ffn);
    let embed = push("embed.token".into(), vec![cfg.vocab_size, d]);
    let emb_ln_g = push("embed.ln.gamma".into(), vec![d]);
    let emb_ln_b = push("embed.ln.beta".into(), vec![d]);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerOffsets {
            wq: push(p("attn.q.weight"), vec![d, d]),
            bq: push(p("attn.q.bias"), vec![d]),
            wk: push(p("attn.k.weight"), vec![d, d]),
            bk: push(p("attn.k.bias"), vec![d]),
            wv: push(p("attn.v.weight"), vec![d, d]),
            bv: push(p("attn.v.bias"), vec![d]),
            wo: push(p("attn.o.weight"), vec![d, d]),
            bo: push(p("attn.o.bias"), vec![d]),
            ln1_g: push(p("ln1.gamma"), vec![d]),
            ln1_b: push(p("ln1.beta"), vec![d]),
            w1: push(p("ffn.in.weight"), vec![d, f]),
            b1: push(p("ffn.in.bias"), vec![f]),
            w2: push(p("ffn.out.weight"), vec![f, d]),
            b2: push(p("ffn.out.bias"), vec![d]),
            ln2_g: push(p("ln2.gamma"), vec![d]),
            ln2_b: push(p("ln2.beta"), vec![d]),
        });
    }
    let head_w = push("head.weight".into(), vec![d, 2]);
    let head_b = push("head.bias".into(), vec![2]);
    (
        specs,
        Offsets {
            embed,
            emb_ln_g,
            emb_ln_b,
            layers,
            head_w,
            head_b,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel<T> {
    config: ModelConfig,
    layout: Vec<TensorSpec>,
    pub(crate) offsets: Offsets,
    pub(crate) params: Vec<T>,
    positions: Vec<T>,
}

/// Logits and class probabilities (index 0 benign, 1 malicious).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Output<T> {
    pub logits: [T; 2],
    pub probs: [T; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionVerdict {
    pub label: Label,
    /// Probability of the predicted class.
    pub probability: f64,
    pub logits: [f64; 2],
}

/// How many sequence positions to materialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Span {
    /// Only `[0, n_real)`. Pad positions are masked out of every attention
    /// row, so they cannot influence the pooled token.
    Real,
    /// All `max_len` positions with an explicit key mask.
    Full,
}

/// Per-example dropout stream.
pub(crate) struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

pub(crate) struct LayerCache<T> {
    pub x_in: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub mask1: Option<Vec<T>>,
    pub ln1: LayerNormCache<T>,
    pub y1: Vec<T>,
    pub h_pre: Vec<T>,
    pub h_act: Vec<T>,
    pub mask2: Option<Vec<T>>,
    pub ln2: LayerNormCache<T>,
}

pub(crate) struct Trace<T> {
    pub len: usize,
    pub ids: Vec<u32>,
    pub emb_ln: LayerNormCache<T>,
    pub layers: Vec<LayerCache<T>>,
    pub final_x: Vec<T>,
    pub pooled: usize,
    pub logits: [T; 2],
}

enum Init {
    Const(f64),
    Uniform(f64),
}

impl Init {
    fn for_tensor(spec: &TensorSpec) -> Init {
        if spec.name.ends_with("gamma") {
            Init::Const(1.0)
        } else if spec.name.ends_with("bias") || spec.name.ends_with("beta") {
            Init::Const(0.0)
        } else if spec.name == "embed.token" {
            Init::Uniform(1.0)
        } else if spec.name == "head.weight" {
            // small head so the untrained model starts near chance
            Init::Uniform(1.0 / spec.shape[0] as f64)
        } else {
            Init::Uniform((6.0 / (spec.shape[0] + spec.shape[1]) as f64).sqrt())
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Init::Const(c) => c,
            Init::Uniform(b) => rng.gen_range(-b..b),
        }
    }
}

fn dropout_mask<T: Scalar>(n: usize, drop: &mut Option<Dropout>) -> Option<Vec<T>> {
    let d = drop.as_mut()?;
    if d.p <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - d.p));
    Some(
        (0..n)
            .map(|_| if d.rng.gen::<f64>() < d.p { T::zero() } else { keep })
            .collect(),
    )
}

impl<T: Scalar> ClassifierModel<T> {
    /// Scaled-uniform initialization, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, offsets) = build_layout(&config);
        let total = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::with_capacity(total);
        for spec in &layout {
            let init = Init::for_tensor(spec);
            params.extend((0..spec.len()).map(|_| T::of(init.sample(&mut rng))));
        }
        let positions = sinusoidal_positions(config.max_len, config.hidden);
        Ok(ClassifierModel {
            config,
            layout,
            offsets,
            params,
            positions,
        })
    }

    pub(crate) fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        let mut m = Self::new(config)?;
        if params.len() != m.params.len() {
            return Err(PulseError::Data(format!(
                "parameter count {} does not match config ({})",
                params.len(),
                m.params.len()
            )));
        }
        m.params = params;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn positions(&self) -> &[T] {
        &self.positions
    }

    /// Convert every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ClassifierModel<U> {
        ClassifierModel {
            config: self.config.clone(),
            layout: self.layout.clone(),
            offsets: self.offsets.clone(),
            params: self.params.iter().map(|p| U::of(p.to_f64_lossy())).collect(),
            positions: sinusoidal_positions(self.config.max_len, self.config.hidden),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    #[inline]
    fn slice(&self, offset: usize, len: usize) -> &[T] {
        &self.params[offset..offset + len]
    }

    fn check(&self, seq: &TokenSequence) -> Result<()> {
        if seq.ids.len() != self.config.max_len {
            return Err(PulseError::Contract(format!(
                "sequence length {} != max_len {}",
                seq.ids.len(),
                self.config.max_len
            )));
        }
        if seq.n_real < 1 || seq.n_real > seq.ids.len() {
            return Err(PulseError::Contract(format!("n_real {} out of range", seq.n_real)));
        }
        let prefix = seq.attention_mask.len() == seq.ids.len()
            && seq.attention_mask.iter().enumerate().all(|(i, &m)| m == u8::from(i < seq.n_real));
        if !prefix {
            return Err(PulseError::Contract(
                "attention_mask must be n_real ones followed by zeros".into(),
            ));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(PulseError::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub(crate) fn run(&self, seq: &TokenSequence, span: Span, mut drop: Option<Dropout>) -> Trace<T> {
        let cfg = &self.config;
        let (d, f, heads, dh) = (cfg.hidden, cfg.ffn, cfg.n_heads, cfg.head_dim());
        let n_real = seq.n_real;
        let len = match span {
            Span::Real => n_real,
            Span::Full => seq.ids.len(),
        };
        let ids: Vec<u32> = seq.ids[..len].to_vec();
        let o = &self.offsets;

        let mut x = vec![T::zero(); len * d];
        for (i, &id) in ids.iter().enumerate() {
            let e = self.slice(o.embed + id as usize * d, d);
            let p = &self.positions[i * d..(i + 1) * d];
            for j in 0..d {
                x[i * d + j] = e[j] + p[j];
            }
        }
        let mut normed = vec![T::zero(); len * d];
        let emb_ln = layer_norm(&x, d, self.slice(o.emb_ln_g, d), self.slice(o.emb_ln_b, d), &mut normed);
        x = normed;

        let scale = T::one() / T::of(dh as f64).sqrt();
        let causal = cfg.attention == Attention::Causal;
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for lo in &o.layers {
            let mut q = vec![T::zero(); len * d];
            let mut k = vec![T::zero(); len * d];
            let mut v = vec![T::zero(); len * d];
            matmul(&x, len, d, self.slice(lo.wq, d * d), d, Some(self.slice(lo.bq, d)), &mut q);
            matmul(&x, len, d, self.slice(lo.wk, d * d), d, Some(self.slice(lo.bk, d)), &mut k);
            matmul(&x, len, d, self.slice(lo.wv, d * d), d, Some(self.slice(lo.bv, d)), &mut v);

            let mut probs = vec![T::zero(); heads * len * len];
            let mut ctx = vec![T::zero(); len * d];
            for h in 0..heads {
                let hoff = h * dh;
                for i in 0..len {
                    let row = &mut probs[(h * len + i) * len..(h * len + i + 1) * len];
                    let limit = if causal { (i + 1).min(n_real) } else { n_real };
                    let qi = &q[i * d + hoff..i * d + hoff + dh];
                    for (j, slot) in row.iter_mut().enumerate().take(limit) {
                        let kj = &k[j * d + hoff..j * d + hoff + dh];
                        *slot = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    }
                    softmax_in_place(&mut row[..limit]);
                    let c = &mut ctx[i * d + hoff..i * d + hoff + dh];
                    for (j, &p) in row[..limit].iter().enumerate() {
                        let vj = &v[j * d + hoff..j * d + hoff + dh];
                        for (cv, &vv) in c.iter_mut().zip(vj) {
                            *cv += p * vv;
                        }
                    }
                }
            }
            let mut attn = vec![T::zero(); len * d];
            matmul(&ctx, len, d, self.slice(lo.wo, d * d), d, Some(self.slice(lo.bo, d)), &mut attn);
            let mask1 = dropout_mask::<T>(len * d, &mut drop);
            let mut r1 = x.clone();
            for (idx, r) in r1.iter_mut().enumerate() {
                let a = match &mask1 {
                    Some(m) => attn[idx] * m[idx],
                    None => attn[idx],
                };
                *r += a;
            }
            let mut y1 = vec![T::zero(); len * d];
            let ln1 = layer_norm(&r1, d, self.slice(lo.ln1_g, d), self.slice(lo.ln1_b, d), &mut y1);

            let mut h_pre = vec![T::zero(); len * f];
            matmul(&y1, len, d, self.slice(lo.w1, d * f), f, Some(self.slice(lo.b1, f)), &mut h_pre);
            let h_act: Vec<T> = h_pre.iter().map(|&z| gelu(z)).collect();
            let mut ff = vec![T::zero(); len * d];
            matmul(&h_act, len, f, self.slice(lo.w2, f * d), d, Some(self.slice(lo.b2, d)), &mut ff);
            let mask2 = dropout_mask::<T>(len * d, &mut drop);
            let mut r2 = y1.clone();
            for (idx, r) in r2.iter_mut().enumerate() {
                let a = match &mask2 {
                    Some(m) => ff[idx] * m[idx],
                    None => ff[idx],
                };
                *r += a;
            }
            let mut y2 = vec![T::zero(); len * d];
            let ln2 = layer_norm(&r2, d, self.slice(lo.ln2_g, d), self.slice(lo.ln2_b, d), &mut y2);

            caches.push(LayerCache {
                x_in: std::mem::replace(&mut x, y2),
                q,
                k,
                v,
                probs,
                ctx,
                mask1,
                ln1,
                y1,
                h_pre,
                h_act,
                mask2,
                ln2,
            });
        }

        let pooled = match cfg.pooling {
            Pooling::FirstToken => 0,
            Pooling::LastToken => n_real - 1,
        };
        let logits = self.head(&x[pooled * d..(pooled + 1) * d]);
        Trace {
            len,
            ids,
            emb_ln,
            layers: caches,
            final_x: x,
            pooled,
            logits,
        }
    }

    fn head(&self, row: &[T]) -> [T; 2] {
        let o = &self.offsets;
        let hw = self.slice(o.head_w, row.len() * 2);
        let hb = self.slice(o.head_b, 2);
        let mut logits = [hb[0], hb[1]];
        for (j, &xv) in row.iter().enumerate() {
            logits[0] += xv * hw[j * 2];
            logits[1] += xv * hw[j * 2 + 1];
        }
        logits
    }

    /// Apply the head to the final hidden state at `position` instead of the
    /// pooled one. Used to probe what each position can see.
    pub fn readout_at(&self, seq: &TokenSequence, position: usize) -> Result<Output<T>> {
        self.check(seq)?;
        if position >= seq.n_real {
            return Err(PulseError::Contract(format!(
                "position {position} is not a real token (n_real {})",
                seq.n_real
            )));
        }
        let d = self.config.hidden;
        let tr = self.run(seq, Span::Real, None);
        Ok(Self::output(self.head(&tr.final_x[position * d..(position + 1) * d])))
    }

    fn output(logits: [T; 2]) -> Output<T> {
        let mut probs = logits;
        softmax_in_place(&mut probs);
        Output { logits, probs }
    }

    /// Inference over a batch (dropout off). Examples are independent.
    pub fn forward(&self, batch: &[TokenSequence]) -> Result<Vec<Output<T>>> {
        self.forward_span(batch, Span::Real)
    }

    pub fn forward_span(&self, batch: &[TokenSequence], span: Span) -> Result<Vec<Output<T>>> {
        for s in batch {
            self.check(s)?;
        }
        Ok(batch
            .par_iter()
            .map(|s| Self::output(self.run(s, span, None).logits))
            .collect())
    }

    /// Argmax verdict; exact ties go to benign.
    pub fn classify_function(&self, seq: &TokenSequence) -> Result<FunctionVerdict> {
        self.check(seq)?;
        Ok(verdict(Self::output(self.run(seq, Span::Real, None).logits)))
    }

    pub fn classify_batch(&self, batch: &[TokenSequence]) -> Result<Vec<FunctionVerdict>> {
        Ok(self.forward(batch)?.into_iter().map(verdict).collect())
    }
}

pub fn verdict<T: Scalar>(out: Output<T>) -> FunctionVerdict {
    let p = [out.probs[0].to_f64_lossy(), out.probs[1].to_f64_lossy()];
    let label = if p[1] > p[0] { Label::Malicious } else { Label::Benign };
    FunctionVerdict {
        label,
        probability: p[label.index()],
        logits: [out.logits[0].to_f64_lossy(), out.logits[1].to_f64_lossy()],
    }
}

/// Wide and narrow instantiations share one implementation.
pub type Model = ClassifierModel<f32>;
pub type WideModel = ClassifierModel<f64>;

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
        let mut v = vec![2u32];
        v.extend_from_slice(ids);
        v.push(3);
        v.truncate(max_len);
        let n_real = v.len();
        v.resize(max_len, 0);
        TokenSequence {
            attention_mask: (0..max_len).map(|i| u8::from(i < n_real)).collect(),
            ids: v,
            n_real,
        }
    }

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            hidden: 64,
            n_heads: 4,
            ffn: 128,
            max_len: 16,
            vocab_size: 40,
            attention: Attention::Bidirectional,
            pooling: Pooling::FirstToken,
            dropout: 0.1,
            seed: 5,
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = Model::new(cfg()).unwrap();
        let b = Model::new(cfg()).unwrap();
        assert_eq!(a.params(), b.params());
        let d = 64;
        let per_layer = 4 * (d * d + d) + 2 * d + (d * 128 + 128) + (128 * d + d) + 2 * d;
        assert_eq!(a.n_params(), 40 * d + 2 * d + 2 * per_layer + 2 * d + 2);
        assert!(a.all_finite());
        let mut c = cfg();
        c.seed = 6;
        assert_ne!(Model::new(c).unwrap().params(), a.params());
    }

    #[test]
    fn config_errors() {
        let mut c = cfg();
        c.hidden = 10;
        assert!(Model::new(c).unwrap_err().to_string().contains("divisible"));
        let mut c = cfg();
        c.attention = Attention::Causal;
        assert!(Model::new(c.clone()).is_err());
        c.pooling = Pooling::LastToken;
        assert!(Model::new(c).is_ok());
    }

    #[test]
    fn length_mismatch_is_a_contract_violation() {
        let m = Model::new(cfg()).unwrap();
        let err = m.forward(&[seq(&[5], 8)]).unwrap_err();
        assert!(matches!(err, PulseError::Contract(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn probabilities_and_duplicates() {
        let m = Model::new(cfg()).unwrap();
        let a = seq(&[5, 6, 7], 16);
        let outs = m.forward(&[a.clone(), seq(&[9], 16), a]).unwrap();
        for o in &outs {
            assert!((o.probs[0] + o.probs[1] - 1.0).abs() < 1e-6);
        }
        assert_eq!(outs[0], outs[2]);
    }

    #[test]
    fn full_span_matches_real_span() {
        for (att, pool) in [
            (Attention::Bidirectional, Pooling::FirstToken),
            (Attention::Causal, Pooling::LastToken),
        ] {
            let mut c = cfg();
            c.attention = att;
            c.pooling = pool;
            let m = WideModel::new(c).unwrap();
            let s = seq(&[5, 6, 7, 8], 16);
            let a = m.forward_span(std::slice::from_ref(&s), Span::Real).unwrap()[0];
            let b = m.forward_span(&[s], Span::Full).unwrap()[0];
            assert!((a.logits[0] - b.logits[0]).abs() < 1e-12);
            assert!((a.logits[1] - b.logits[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_go_to_benign() {
        let v = verdict(Output {
            logits: [0.0f64, 0.0],
            probs: [0.5, 0.5],
        });
        assert_eq!(v.label, Label::Benign);
        assert_eq!(v.probability, 0.5);
    }
}
