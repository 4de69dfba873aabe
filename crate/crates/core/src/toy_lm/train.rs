// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training: packed-batch forward with caches, hand-written
//! backward pass, Adam.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{causal_attention, col_sums, layer_norm, mat, row, ModelConfig, Slot, ToyModel, Vocab};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 3e-3,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainHistory {
    /// Mean training loss (nats/token) per epoch.
    pub epoch_loss: Vec<f64>,
    pub initial_perplexity: f64,
    pub final_perplexity: f64,
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    n1: Array2<f64>,
    qkv: Array2<f64>,
    /// Per segment, per head.
    probs: Vec<Vec<Array2<f64>>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    n2: Array2<f64>,
    u: Array2<f64>,
    hdn: Array2<f64>,
}

fn ln_backward(dy: &Array2<f64>, c: &LnCache, g: ndarray::ArrayView1<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dg = (dy * &c.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    let dxhat = dy * &g;
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dxh = dxhat.row(i);
        let xh = c.xhat.row(i);
        let m1 = dxh.sum() / n;
        let m2 = dxh.dot(&xh) / n;
        let r = c.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(&dxh)
            .and(&xh)
            .for_each(|o, &a, &b| *o = r * (a - m1 - b * m2));
    }
    (dx, dg, db)
}

fn acc(grad: &mut [f64], s: Slot, m: ArrayView2<f64>) {
    let mut g = ArrayViewMut2::from_shape((s.rows, s.cols), &mut grad[s.range()]).expect("slot shape");
    g += &m;
}

fn acc_row(grad: &mut [f64], s: Slot, v: &Array1<f64>) {
    for (g, x) in grad[s.range()].iter_mut().zip(v) {
        *g += x;
    }
}

impl ToyModel {
    /// Mean next-token cross-entropy over every predicted position of every
    /// sequence in `batch`, and its gradient w.r.t. the flat parameters.
    pub fn loss_and_gradient(&self, batch: &[Vec<usize>]) -> Result<(f64, Vec<f64>)> {
        self.loss_impl(batch, true)
    }

    pub fn batch_loss(&self, batch: &[Vec<usize>]) -> Result<f64> {
        Ok(self.loss_impl(batch, false)?.0)
    }

    fn loss_impl(&self, batch: &[Vec<usize>], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let mut bounds = Vec::with_capacity(batch.len());
        let mut start = 0;
        for seq in batch {
            self.check_tokens(seq)?;
            if seq.len() < 2 {
                return Err(Error::InvalidArgument("training sequences need at least 2 tokens".into()));
            }
            bounds.push((start, start + seq.len()));
            start += seq.len();
        }
        let n_rows = start;
        let cfg = *self.config();
        let (d, nh) = (cfg.embed_dim, cfg.n_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let lay = self.layout().clone();
        let p = self.params();

        // Forward.
        let tok_e = mat(p, lay.tok);
        let pos_e = mat(p, lay.pos);
        let mut x = Array2::zeros((n_rows, d));
        for (seq, &(s0, _)) in batch.iter().zip(&bounds) {
            for (i, &t) in seq.iter().enumerate() {
                let mut r = x.row_mut(s0 + i);
                r.assign(&tok_e.row(t));
                r += &pos_e.row(i);
            }
        }
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for ls in &lay.layers {
            let (n1, xhat1, rstd1) = layer_norm(&x, row(p, ls.ln1_g), row(p, ls.ln1_b));
            let qkv = n1.dot(&mat(p, ls.w_qkv)) + row(p, ls.b_qkv);
            let mut ctx = Array2::zeros((n_rows, d));
            let mut probs = Vec::with_capacity(bounds.len());
            for &(s0, s1) in &bounds {
                let (c, pr) = causal_attention(qkv.slice(s![s0..s1, ..]), nh, want_grad);
                ctx.slice_mut(s![s0..s1, ..]).assign(&c);
                probs.push(pr);
            }
            let a = ctx.dot(&mat(p, ls.w_o)) + row(p, ls.b_o);
            x += &a;
            let (n2, xhat2, rstd2) = layer_norm(&x, row(p, ls.ln2_g), row(p, ls.ln2_b));
            let u = n2.dot(&mat(p, ls.w_1)) + row(p, ls.b_1);
            let hdn = u.mapv(|v| v.max(0.0));
            let m = hdn.dot(&mat(p, ls.w_2)) + row(p, ls.b_2);
            x += &m;
            caches.push(LayerCache {
                ln1: LnCache { xhat: xhat1, rstd: rstd1 },
                n1,
                qkv,
                probs,
                ctx,
                ln2: LnCache { xhat: xhat2, rstd: rstd2 },
                n2,
                u,
                hdn,
            });
        }
        let (nf, xhatf, rstdf) = layer_norm(&x, row(p, lay.lnf_g), row(p, lay.lnf_b));
        let logits = nf.dot(&mat(p, lay.w_out)) + row(p, lay.b_out);

        let count: usize = batch.iter().map(|s| s.len() - 1).sum();
        let inv = 1.0 / count as f64;
        let mut loss = 0.0;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (seq, &(s0, _)) in batch.iter().zip(&bounds) {
            for i in 0..seq.len() - 1 {
                let r = logits.row(s0 + i);
                let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = r.iter().map(|l| (l - max).exp()).sum();
                let target = seq[i + 1];
                loss += max + sum.ln() - r[target];
                if want_grad {
                    let mut dr = dlogits.row_mut(s0 + i);
                    for (o, l) in dr.iter_mut().zip(r) {
                        *o = (l - max).exp() / sum * inv;
                    }
                    dr[target] -= inv;
                }
            }
        }
        loss *= inv;
        if !loss.is_finite() {
            return Err(Error::NonFinite("language-model loss"));
        }
        if !want_grad {
            return Ok((loss, Vec::new()));
        }

        // Backward.
        let mut grad = vec![0.0; p.len()];
        acc(&mut grad, lay.w_out, nf.t().dot(&dlogits).view());
        acc_row(&mut grad, lay.b_out, &col_sums(&dlogits));
        let dnf = dlogits.dot(&mat(p, lay.w_out).t());
        let (mut dx, dg, db) = ln_backward(&dnf, &LnCache { xhat: xhatf, rstd: rstdf }, row(p, lay.lnf_g));
        acc_row(&mut grad, lay.lnf_g, &dg);
        acc_row(&mut grad, lay.lnf_b, &db);

        for (ls, c) in lay.layers.iter().zip(&caches).rev() {
            // Feed-forward branch.
            acc(&mut grad, ls.w_2, c.hdn.t().dot(&dx).view());
            acc_row(&mut grad, ls.b_2, &col_sums(&dx));
            let mut du = dx.dot(&mat(p, ls.w_2).t());
            Zip::from(&mut du).and(&c.u).for_each(|g, &u| {
                if u <= 0.0 {
                    *g = 0.0;
                }
            });
            acc(&mut grad, ls.w_1, c.n2.t().dot(&du).view());
            acc_row(&mut grad, ls.b_1, &col_sums(&du));
            let dn2 = du.dot(&mat(p, ls.w_1).t());
            let (dx2, dg2, db2) = ln_backward(&dn2, &c.ln2, row(p, ls.ln2_g));
            acc_row(&mut grad, ls.ln2_g, &dg2);
            acc_row(&mut grad, ls.ln2_b, &db2);
            dx += &dx2;

            // Attention branch.
            acc(&mut grad, ls.w_o, c.ctx.t().dot(&dx).view());
            acc_row(&mut grad, ls.b_o, &col_sums(&dx));
            let dctx = dx.dot(&mat(p, ls.w_o).t());
            let mut dqkv = Array2::zeros((n_rows, 3 * d));
            for (&(s0, s1), probs) in bounds.iter().zip(&c.probs) {
                let qkv = c.qkv.slice(s![s0..s1, ..]);
                for (h, pm) in probs.iter().enumerate() {
                    let (lo, hi) = (h * dh, (h + 1) * dh);
                    let q = qkv.slice(s![.., lo..hi]);
                    let k = qkv.slice(s![.., d + lo..d + hi]);
                    let v = qkv.slice(s![.., 2 * d + lo..2 * d + hi]);
                    let dc = dctx.slice(s![s0..s1, lo..hi]);
                    let dp = dc.dot(&v.t());
                    let dv = pm.t().dot(&dc);
                    let mut ds = pm * &dp;
                    for i in 0..ds.nrows() {
                        let rs: f64 = ds.row(i).sum();
                        Zip::from(ds.row_mut(i)).and(pm.row(i)).for_each(|o, &pp| *o -= pp * rs);
                    }
                    ds *= scale;
                    dqkv.slice_mut(s![s0..s1, lo..hi]).assign(&ds.dot(&k));
                    dqkv.slice_mut(s![s0..s1, d + lo..d + hi]).assign(&ds.t().dot(&q));
                    dqkv.slice_mut(s![s0..s1, 2 * d + lo..2 * d + hi]).assign(&dv);
                }
            }
            acc(&mut grad, ls.w_qkv, c.n1.t().dot(&dqkv).view());
            acc_row(&mut grad, ls.b_qkv, &col_sums(&dqkv));
            let dn1 = dqkv.dot(&mat(p, ls.w_qkv).t());
            let (dx1, dg1, db1) = ln_backward(&dn1, &c.ln1, row(p, ls.ln1_g));
            acc_row(&mut grad, ls.ln1_g, &dg1);
            acc_row(&mut grad, ls.ln1_b, &db1);
            dx += &dx1;
        }

        for (seq, &(s0, _)) in batch.iter().zip(&bounds) {
            for (i, &t) in seq.iter().enumerate() {
                let r = dx.row(s0 + i);
                let to = lay.tok.off + t * d;
                let po = lay.pos.off + i * d;
                for (j, g) in r.iter().enumerate() {
                    grad[to + j] += g;
                    grad[po + j] += g;
                }
            }
        }
        Ok((loss, grad))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn corpus_loss(model: &ToyModel, corpus: &[Vec<usize>], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for part in corpus.chunks(chunk.max(1)) {
        let n: usize = part.iter().map(|s| s.len() - 1).sum();
        total += model.batch_loss(part)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Trains a fresh model on `corpus` by minibatch Adam on next-token
/// cross-entropy. Deterministic in `cfg.seed`.
pub fn train_toy_lm(
    corpus: &[Vec<usize>],
    vocab: Vocab,
    model_cfg: ModelConfig,
    cfg: &LmTrainConfig,
) -> Result<(ToyModel, LmTrainHistory)> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let lr_ok = cfg.learning_rate > 0.0; // false for NaN too
    if cfg.epochs == 0 || cfg.batch_size == 0 || !lr_ok {
        return Err(Error::InvalidArgument("epochs, batch_size and learning_rate must be positive".into()));
    }
    let mut model = ToyModel::init(model_cfg, vocab, cfg.seed)?;
    for seq in corpus {
        model.check_tokens(seq)?;
        if seq.len() < 2 {
            return Err(Error::InvalidArgument("training sequences need at least 2 tokens".into()));
        }
    }
    let initial_perplexity = corpus_loss(&model, corpus, 64)?.exp();
    let mut rng = RngStream::new(cfg.seed).fork(1);
    let mut adam = Adam::new(model.n_params());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for ids in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(ids.iter().map(|&i| corpus[i].clone()));
            let (loss, mut grad) = model.loss_and_gradient(&batch)?;
            let n: usize = batch.iter().map(|s| s.len() - 1).sum();
            total += loss * n as f64;
            tokens += n;
            if cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let k = cfg.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= k);
                }
            }
            adam.step(model.params_mut(), &grad, cfg.learning_rate);
        }
        epoch_loss.push(total / tokens as f64);
    }
    model.quantize();
    let final_perplexity = corpus_loss(&model, corpus, 64)?.exp();
    Ok((
        model,
        LmTrainHistory {
            epoch_loss,
            initial_perplexity,
            final_perplexity,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            embed_dim: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            context_len: 16,
        }
    }

    fn vocab(n: usize) -> Vocab {
        Vocab::new((0..n).map(|i| format!("w{i}"))).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut m = ToyModel::init(tiny_cfg(), vocab(5), 11).unwrap();
        // Break symmetry in the zero-initialized biases and gains.
        let mut rng = RngStream::new(5);
        for p in m.params_mut() {
            *p += 0.05 * rng.standard_normal();
        }
        let batch = vec![vec![0, 1, 2, 3, 4, 0], vec![4, 3, 1], vec![2, 2, 0, 1]];
        let (_, grad) = m.loss_and_gradient(&batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..m.n_params()).step_by(7) {
            let orig = m.params()[i];
            m.params_mut()[i] = orig + h;
            let lp = m.batch_loss(&batch).unwrap();
            m.params_mut()[i] = orig - h;
            let lm = m.batch_loss(&batch).unwrap();
            m.params_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn memorizes_cycle() {
        let v = vocab(5);
        // Two phases of the cycle for training, the third held out, so the
        // model must predict from content rather than position.
        let window = |phase: usize| (0..12).map(|i| (i + phase) % 3).collect::<Vec<usize>>();
        let corpus: Vec<Vec<usize>> = (0..8).map(|i| window(i % 2)).collect();
        let cfg = LmTrainConfig {
            epochs: 60,
            batch_size: 4,
            learning_rate: 1e-2,
            ..LmTrainConfig::default()
        };
        let (m, hist) = train_toy_lm(&corpus, v, tiny_cfg(), &cfg).unwrap();
        assert!(hist.final_perplexity < hist.initial_perplexity);
        let held_out = window(2);
        let ppl = m.perplexity(&held_out).unwrap();
        assert!(ppl < 1.2, "{ppl} {hist:?}");
    }

    #[test]
    fn training_is_deterministic_and_validates() {
        let corpus = vec![vec![0, 1, 2], vec![3, 4, 0, 1]];
        let cfg = LmTrainConfig {
            epochs: 2,
            ..LmTrainConfig::default()
        };
        let (a, _) = train_toy_lm(&corpus, vocab(5), tiny_cfg(), &cfg).unwrap();
        let (b, _) = train_toy_lm(&corpus, vocab(5), tiny_cfg(), &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(matches!(train_toy_lm(&[], vocab(5), tiny_cfg(), &cfg), Err(Error::Empty(_))));
        assert!(matches!(
            train_toy_lm(&[vec![0, 9]], vocab(5), tiny_cfg(), &cfg),
            Err(Error::OutOfVocab(_))
        ));
    }
}
