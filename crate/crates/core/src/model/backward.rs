//! Cross-entropy loss and its gradient with respect to every parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{gelu_grad, layer_norm_backward, matmul_backward, softmax_in_place};
use super::{ClassifierModel, Dropout, Span, Trace};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tokenizer::TokenSequence;
use crate::trace::Label;

/// Dense gradient buffer. Only embedding rows listed in `touched` are
/// non-zero within the embedding table.
#[derive(Debug, Clone)]
pub struct Gradient<T> {
    pub data: Vec<T>,
    pub touched: Vec<u32>,
}

impl<T: Scalar> Gradient<T> {
    fn zeros(n: usize) -> Self {
        Gradient {
            data: vec![T::zero(); n],
            touched: Vec::new(),
        }
    }

    /// `self += other`, visiting only rows the other gradient touched.
    fn accumulate(&mut self, other: &Gradient<T>, embed_end: usize, hidden: usize) {
        for &row in &other.touched {
            let r = row as usize * hidden;
            for j in r..r + hidden {
                self.data[j] += other.data[j];
            }
        }
        for (a, &b) in self.data[embed_end..].iter_mut().zip(&other.data[embed_end..]) {
            *a += b;
        }
        self.touched.extend_from_slice(&other.touched);
    }

    fn finish(&mut self) {
        self.touched.sort_unstable();
        self.touched.dedup();
    }

    pub fn scale(&mut self, s: T) {
        for g in self.data.iter_mut() {
            *g *= s;
        }
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&g| g * g).sum::<T>().sqrt()
    }
}

/// Seed material for per-example dropout streams.
#[derive(Debug, Clone, Copy)]
pub(crate) struct DropoutSeed {
    pub p: f64,
    pub seed: u64,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl<T: Scalar> ClassifierModel<T> {
    fn backward_example(&self, tr: &Trace<T>, target: Label) -> (T, Gradient<T>) {
        let cfg = self.config();
        let (d, f, heads, dh) = (cfg.hidden, cfg.ffn, cfg.n_heads, cfg.head_dim());
        let len = tr.len;
        let o = &self.offsets;
        let p = &self.params;
        let mut g = Gradient::zeros(p.len());

        let mut probs = tr.logits;
        softmax_in_place(&mut probs);
        let t = target.index();
        let loss = -(probs[t].max(T::min_positive_value())).ln();
        let mut dlogits = probs;
        dlogits[t] -= T::one();

        // head
        let mut dx = vec![T::zero(); len * d];
        for j in 0..d {
            let xv = tr.final_x[tr.pooled * d + j];
            g.data[o.head_w + j * 2] += xv * dlogits[0];
            g.data[o.head_w + j * 2 + 1] += xv * dlogits[1];
            dx[tr.pooled * d + j] = p[o.head_w + j * 2] * dlogits[0] + p[o.head_w + j * 2 + 1] * dlogits[1];
        }
        g.data[o.head_b] += dlogits[0];
        g.data[o.head_b + 1] += dlogits[1];

        let scale = T::one() / T::of(dh as f64).sqrt();
        for (lo, c) in o.layers.iter().zip(&tr.layers).rev() {
            // LN2
            let mut dr2 = vec![T::zero(); len * d];
            {
                let (head, tail) = g.data.split_at_mut(lo.ln2_b);
                layer_norm_backward(
                    &c.ln2,
                    d,
                    &p[lo.ln2_g..lo.ln2_g + d],
                    &dx,
                    &mut dr2,
                    &mut head[lo.ln2_g..lo.ln2_g + d],
                    &mut tail[..d],
                );
            }
            let mut dy1 = dr2.clone();
            let mut dff = dr2;
            if let Some(m) = &c.mask2 {
                for (a, &b) in dff.iter_mut().zip(m) {
                    *a *= b;
                }
            }
            // FFN out
            let mut dh_act = vec![T::zero(); len * f];
            {
                let (head, tail) = g.data.split_at_mut(lo.b2);
                matmul_backward(
                    &c.h_act,
                    len,
                    f,
                    &p[lo.w2..lo.w2 + f * d],
                    d,
                    &dff,
                    Some(&mut dh_act),
                    &mut head[lo.w2..lo.w2 + f * d],
                    Some(&mut tail[..d]),
                );
            }
            for (a, &z) in dh_act.iter_mut().zip(&c.h_pre) {
                *a *= gelu_grad(z);
            }
            {
                let (head, tail) = g.data.split_at_mut(lo.b1);
                matmul_backward(
                    &c.y1,
                    len,
                    d,
                    &p[lo.w1..lo.w1 + d * f],
                    f,
                    &dh_act,
                    Some(&mut dy1),
                    &mut head[lo.w1..lo.w1 + d * f],
                    Some(&mut tail[..f]),
                );
            }
            // LN1
            let mut dr1 = vec![T::zero(); len * d];
            {
                let (head, tail) = g.data.split_at_mut(lo.ln1_b);
                layer_norm_backward(
                    &c.ln1,
                    d,
                    &p[lo.ln1_g..lo.ln1_g + d],
                    &dy1,
                    &mut dr1,
                    &mut head[lo.ln1_g..lo.ln1_g + d],
                    &mut tail[..d],
                );
            }
            let mut dx_in = dr1.clone();
            let mut dattn = dr1;
            if let Some(m) = &c.mask1 {
                for (a, &b) in dattn.iter_mut().zip(m) {
                    *a *= b;
                }
            }
            let mut dctx = vec![T::zero(); len * d];
            {
                let (head, tail) = g.data.split_at_mut(lo.bo);
                matmul_backward(
                    &c.ctx,
                    len,
                    d,
                    &p[lo.wo..lo.wo + d * d],
                    d,
                    &dattn,
                    Some(&mut dctx),
                    &mut head[lo.wo..lo.wo + d * d],
                    Some(&mut tail[..d]),
                );
            }
            // attention
            let mut dq = vec![T::zero(); len * d];
            let mut dk = vec![T::zero(); len * d];
            let mut dv = vec![T::zero(); len * d];
            let mut dp = vec![T::zero(); len];
            for h in 0..heads {
                let hoff = h * dh;
                for i in 0..len {
                    let row = &c.probs[(h * len + i) * len..(h * len + i + 1) * len];
                    let dci = &dctx[i * d + hoff..i * d + hoff + dh];
                    let mut dot = T::zero();
                    for j in 0..len {
                        let pij = row[j];
                        if pij == T::zero() {
                            dp[j] = T::zero();
                            continue;
                        }
                        let vj = &c.v[j * d + hoff..j * d + hoff + dh];
                        dp[j] = dci.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                        dot += dp[j] * pij;
                        for (dvv, &dc) in dv[j * d + hoff..j * d + hoff + dh].iter_mut().zip(dci) {
                            *dvv += pij * dc;
                        }
                    }
                    for j in 0..len {
                        let pij = row[j];
                        if pij == T::zero() {
                            continue;
                        }
                        let ds = pij * (dp[j] - dot) * scale;
                        for e in 0..dh {
                            dq[i * d + hoff + e] += ds * c.k[j * d + hoff + e];
                            dk[j * d + hoff + e] += ds * c.q[i * d + hoff + e];
                        }
                    }
                }
            }
            for (w, b, dout) in [(lo.wq, lo.bq, &dq), (lo.wk, lo.bk, &dk), (lo.wv, lo.bv, &dv)] {
                let (head, tail) = g.data.split_at_mut(b);
                matmul_backward(
                    &c.x_in,
                    len,
                    d,
                    &p[w..w + d * d],
                    d,
                    dout,
                    Some(&mut dx_in),
                    &mut head[w..w + d * d],
                    Some(&mut tail[..d]),
                );
            }
            dx = dx_in;
        }

        // embedding layer norm, then the token table
        let mut de = vec![T::zero(); len * d];
        {
            let (head, tail) = g.data.split_at_mut(o.emb_ln_b);
            layer_norm_backward(
                &tr.emb_ln,
                d,
                &p[o.emb_ln_g..o.emb_ln_g + d],
                &dx,
                &mut de,
                &mut head[o.emb_ln_g..o.emb_ln_g + d],
                &mut tail[..d],
            );
        }
        for (i, &id) in tr.ids.iter().enumerate() {
            let r = o.embed + id as usize * d;
            for j in 0..d {
                g.data[r + j] += de[i * d + j];
            }
            g.touched.push(id);
        }
        g.finish();
        (loss, g)
    }

    pub(crate) fn batch_loss_and_grad(
        &self,
        batch: &[(&TokenSequence, Label)],
        dropout: Option<DropoutSeed>,
    ) -> Result<(T, Gradient<T>)> {
        for (s, _) in batch {
            self.check(s)?;
        }
        let per: Vec<(T, Gradient<T>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, (s, y))| {
                let drop = dropout.filter(|d| d.p > 0.0).map(|d| Dropout {
                    p: d.p,
                    rng: ChaCha8Rng::seed_from_u64(mix(d.seed, i as u64)),
                });
                let tr = self.run(s, Span::Real, drop);
                self.backward_example(&tr, *y)
            })
            .collect();
        let n = T::of(batch.len().max(1) as f64);
        let embed_end = self.offsets.embed + self.config().vocab_size * self.config().hidden;
        let mut total = Gradient::zeros(self.params.len());
        let mut loss = T::zero();
        // fixed summation order keeps training bit-reproducible
        for (l, g) in &per {
            loss += *l;
            total.accumulate(g, embed_end, self.config().hidden);
        }
        total.finish();
        total.scale(T::one() / n);
        Ok((loss / n, total))
    }

    pub(crate) fn batch_loss(&self, batch: &[(&TokenSequence, Label)]) -> T {
        let n = T::of(batch.len().max(1) as f64);
        let losses: Vec<T> = batch
            .par_iter()
            .map(|(s, y)| {
                let mut probs = self.run(s, Span::Real, None).logits;
                softmax_in_place(&mut probs);
                -(probs[y.index()].max(T::min_positive_value())).ln()
            })
            .collect();
        losses.into_iter().sum::<T>() / n
    }
}

pub(crate) fn dropout_seed(p: f64, seed: u64, epoch: u64, step: u64) -> DropoutSeed {
    DropoutSeed {
        p,
        seed: mix(mix(seed, epoch), step),
    }
}

/// Mean cross-entropy over `batch` and its gradient, dropout off.
pub fn loss_and_grad<T: Scalar>(
    model: &ClassifierModel<T>,
    batch: &[(TokenSequence, Label)],
) -> Result<(T, Gradient<T>)> {
    let refs: Vec<(&TokenSequence, Label)> = batch.iter().map(|(s, y)| (s, *y)).collect();
    model.batch_loss_and_grad(&refs, None)
}

/// Mean cross-entropy over `batch`, dropout off.
pub fn loss<T: Scalar>(model: &ClassifierModel<T>, batch: &[(TokenSequence, Label)]) -> T {
    let refs: Vec<(&TokenSequence, Label)> = batch.iter().map(|(s, y)| (s, *y)).collect();
    model.batch_loss(&refs)
}
