//! Forward and backward passes.
//!
//! Pre-norm encoder-decoder: every sublayer reads a layer-normed copy of its
//! input and adds its output back onto the residual stream, with one final
//! norm on each side. Attention masks use a large negative additive constant
//! so masked weights underflow to exactly zero in the softmax.
//!
//! Samples are processed one at a time at their true lengths; padding exists
//! only in the [`Batch`] container. That keeps every per-sample result
//! independent of batch composition, which the determinism and permutation
//! tests rely on.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::model::params::{AttentionParams, FfnParams, LayerNormParams, Parameters};
use crate::model::{EncodedExample, Variant};

const LN_EPS: f64 = 1e-5;
const MASK_NEG: f64 = -1e30;

/// A padded rectangular batch. `src_lens`/`tgt_lens` give each sample's
/// real length; positions beyond them hold the pad token and the special
/// complexity id and are ignored by the passes and the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src_ids: Vec<Vec<u32>>,
    pub src_cids: Vec<Vec<u16>>,
    pub tgt_ids: Vec<Vec<u32>>,
    pub tgt_cids: Vec<Vec<u16>>,
    pub labels: Vec<Vec<u32>>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    /// Pads a group of samples into one batch.
    pub fn from_samples(samples: &[EncodedExample], pad_id: u32, special_cid: u16) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::ShapeMismatch {
                reason: "batch of zero samples".to_string(),
            });
        }
        for s in samples {
            if s.src_ids.len() != s.src_cids.len()
                || s.tgt_ids.len() != s.tgt_cids.len()
                || s.tgt_ids.len() != s.labels.len()
            {
                return Err(Error::ShapeMismatch {
                    reason: "sample id and complexity-id sequences differ in length".to_string(),
                });
            }
            if s.src_ids.is_empty() || s.tgt_ids.is_empty() {
                return Err(Error::ShapeMismatch {
                    reason: "sample with an empty side".to_string(),
                });
            }
        }
        let src_max = samples.iter().map(|s| s.src_ids.len()).max().unwrap();
        let tgt_max = samples.iter().map(|s| s.tgt_ids.len()).max().unwrap();
        let pad_to = |v: &[u32], n: usize| {
            let mut out = v.to_vec();
            out.resize(n, pad_id);
            out
        };
        let pad_cids = |v: &[u16], n: usize| {
            let mut out = v.to_vec();
            out.resize(n, special_cid);
            out
        };
        Ok(Batch {
            src_ids: samples.iter().map(|s| pad_to(&s.src_ids, src_max)).collect(),
            src_cids: samples.iter().map(|s| pad_cids(&s.src_cids, src_max)).collect(),
            tgt_ids: samples.iter().map(|s| pad_to(&s.tgt_ids, tgt_max)).collect(),
            tgt_cids: samples.iter().map(|s| pad_cids(&s.tgt_cids, tgt_max)).collect(),
            labels: samples.iter().map(|s| pad_to(&s.labels, tgt_max)).collect(),
            src_lens: samples.iter().map(|s| s.src_ids.len()).collect(),
            tgt_lens: samples.iter().map(|s| s.tgt_ids.len()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.src_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_ids.is_empty()
    }

    /// True at unpadded source positions.
    pub fn src_mask(&self) -> Vec<Vec<bool>> {
        self.src_ids
            .iter()
            .zip(&self.src_lens)
            .map(|(row, &len)| (0..row.len()).map(|t| t < len).collect())
            .collect()
    }

    /// True at unpadded target positions.
    pub fn tgt_mask(&self) -> Vec<Vec<bool>> {
        self.tgt_ids
            .iter()
            .zip(&self.tgt_lens)
            .map(|(row, &len)| (0..row.len()).map(|t| t < len).collect())
            .collect()
    }

    pub fn num_label_tokens(&self) -> usize {
        self.tgt_lens.iter().sum()
    }
}

// ----------------------------------------------------------------------
// Primitives
// ----------------------------------------------------------------------

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct LnCache {
    xhat: Array2<f64>,
    invstd: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, LnCache) {
    let (rows, d) = x.dim();
    let mut xhat = Array2::zeros((rows, d));
    let mut invstd = Array1::zeros(rows);
    let mut y = Array2::zeros((rows, d));
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        invstd[i] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[[i, j]] = h;
            y[[i, j]] = p.gain[j] * h + p.bias[j];
        }
    }
    (y, LnCache { xhat, invstd })
}

fn ln_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    p: &LayerNormParams,
    grads: &mut LayerNormParams,
) -> Array2<f64> {
    let (rows, d) = dy.dim();
    let mut dx = Array2::zeros((rows, d));
    for i in 0..rows {
        let mut dxhat = Array1::zeros(d);
        for j in 0..d {
            grads.gain[j] += dy[[i, j]] * cache.xhat[[i, j]];
            grads.bias[j] += dy[[i, j]];
            dxhat[j] = dy[[i, j]] * p.gain[j];
        }
        let mean_dxhat = dxhat.sum() / d as f64;
        let mean_dxhat_xhat = (0..d).map(|j| dxhat[j] * cache.xhat[[i, j]]).sum::<f64>() / d as f64;
        for j in 0..d {
            dx[[i, j]] =
                cache.invstd[i] * (dxhat[j] - mean_dxhat - cache.xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

struct AttnCache {
    x_q: Array2<f64>,
    x_kv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

/// Multi-head scaled dot-product attention. `x_q` supplies queries, `x_kv`
/// keys and values; self-attention passes the same matrix twice. A causal
/// mask hides positions j > i (only meaningful when both sides have equal
/// length).
fn attn_forward(
    x_q: &Array2<f64>,
    x_kv: &Array2<f64>,
    p: &AttentionParams,
    n_heads: usize,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let (t_q, d) = x_q.dim();
    let t_k = x_kv.dim().0;
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = x_q.dot(&p.w_q) + &p.b_q;
    let k = x_kv.dot(&p.w_k) + &p.b_k;
    let v = x_kv.dot(&p.w_v) + &p.b_v;

    let mut concat = Array2::zeros((t_q, d));
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * d_head..(h + 1) * d_head;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t()) * scale;
        if causal {
            for i in 0..t_q {
                for j in (i + 1)..t_k {
                    scores[[i, j]] += MASK_NEG;
                }
            }
        }
        softmax_rows(&mut scores);
        let out_h = scores.dot(&vh);
        concat.slice_mut(s![.., cols]).assign(&out_h);
        weights.push(scores);
    }
    let out = concat.dot(&p.w_o) + &p.b_o;
    let cache = AttnCache {
        x_q: x_q.clone(),
        x_kv: x_kv.clone(),
        q,
        k,
        v,
        weights,
        concat,
    };
    (out, cache)
}

/// Returns (d_x_q, d_x_kv); the caller adds them when both are the same
/// tensor.
fn attn_backward(
    dout: &Array2<f64>,
    cache: &AttnCache,
    p: &AttentionParams,
    n_heads: usize,
    grads: &mut AttentionParams,
) -> (Array2<f64>, Array2<f64>) {
    let (t_q, d) = cache.x_q.dim();
    let t_k = cache.x_kv.dim().0;
    let d_head = d / n_heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    grads.w_o += &cache.concat.t().dot(dout);
    grads.b_o += &dout.sum_axis(Axis(0));
    let d_concat = dout.dot(&p.w_o.t());

    let mut dq = Array2::zeros((t_q, d));
    let mut dk = Array2::zeros((t_k, d));
    let mut dv = Array2::zeros((t_k, d));
    for h in 0..n_heads {
        let cols = h * d_head..(h + 1) * d_head;
        let qh = cache.q.slice(s![.., cols.clone()]);
        let kh = cache.k.slice(s![.., cols.clone()]);
        let vh = cache.v.slice(s![.., cols.clone()]);
        let a = &cache.weights[h];
        let d_out_h = d_concat.slice(s![.., cols.clone()]);

        let da = d_out_h.dot(&vh.t());
        dv.slice_mut(s![.., cols.clone()])
            .assign(&a.t().dot(&d_out_h));

        // Softmax backward per row: a ⊙ (da − Σ_j a_j·da_j).
        let mut ds = Array2::zeros((t_q, t_k));
        for i in 0..t_q {
            let dot = (0..t_k).map(|j| a[[i, j]] * da[[i, j]]).sum::<f64>();
            for j in 0..t_k {
                ds[[i, j]] = a[[i, j]] * (da[[i, j]] - dot);
            }
        }
        dq.slice_mut(s![.., cols.clone()])
            .assign(&(ds.dot(&kh) * scale));
        dk.slice_mut(s![.., cols]).assign(&(ds.t().dot(&qh) * scale));
    }

    grads.w_q += &cache.x_q.t().dot(&dq);
    grads.b_q += &dq.sum_axis(Axis(0));
    grads.w_k += &cache.x_kv.t().dot(&dk);
    grads.b_k += &dk.sum_axis(Axis(0));
    grads.w_v += &cache.x_kv.t().dot(&dv);
    grads.b_v += &dv.sum_axis(Axis(0));

    let d_x_q = dq.dot(&p.w_q.t());
    let d_x_kv = dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t());
    (d_x_q, d_x_kv)
}

struct FfnCache {
    x: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
}

fn ffn_forward(x: &Array2<f64>, p: &FfnParams) -> (Array2<f64>, FfnCache) {
    let h_pre = x.dot(&p.w1) + &p.b1;
    let h_act = h_pre.mapv(gelu);
    let y = h_act.dot(&p.w2) + &p.b2;
    (
        y,
        FfnCache {
            x: x.clone(),
            h_pre,
            h_act,
        },
    )
}

fn ffn_backward(
    dy: &Array2<f64>,
    cache: &FfnCache,
    p: &FfnParams,
    grads: &mut FfnParams,
) -> Array2<f64> {
    grads.w2 += &cache.h_act.t().dot(dy);
    grads.b2 += &dy.sum_axis(Axis(0));
    let da = dy.dot(&p.w2.t());
    let dh = &da * &cache.h_pre.mapv(gelu_prime);
    grads.w1 += &cache.x.t().dot(&dh);
    grads.b1 += &dh.sum_axis(Axis(0));
    dh.dot(&p.w1.t())
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

// ----------------------------------------------------------------------
// Embedding
// ----------------------------------------------------------------------

/// Sums token, position and (for the CE variant) complexity embeddings for
/// one sequence. Position t is the index within the sequence.
pub fn embed(params: &Parameters, ids: &[u32], cids: &[u16]) -> Result<Array2<f64>> {
    let c = &params.config;
    if ids.len() != cids.len() {
        return Err(Error::ShapeMismatch {
            reason: format!("{} token ids but {} complexity ids", ids.len(), cids.len()),
        });
    }
    if ids.len() > c.max_positions {
        return Err(Error::PositionOverflow {
            len: ids.len(),
            max: c.max_positions,
        });
    }
    let mut x = Array2::zeros((ids.len(), c.d_model));
    for (t, (&id, &cid)) in ids.iter().zip(cids).enumerate() {
        if id as usize >= c.vocab_size {
            return Err(Error::TokenIdOutOfRange {
                id,
                size: c.vocab_size,
            });
        }
        if cid as usize >= c.num_complexity_ids {
            return Err(Error::TokenIdOutOfRange {
                id: cid as u32,
                size: c.num_complexity_ids,
            });
        }
        let mut row = x.row_mut(t);
        row.assign(&params.token_embeddings.row(id as usize));
        row += &params.position_embeddings.row(t);
        if c.variant == Variant::Ce {
            if let Some(m) = &params.complexity_embeddings {
                row += &m.row(cid as usize);
            }
        }
    }
    Ok(x)
}

// ----------------------------------------------------------------------
// Whole-model forward
// ----------------------------------------------------------------------

struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ffn: FfnCache,
}

struct DecLayerCache {
    ln1: LnCache,
    self_attn: AttnCache,
    ln2: LnCache,
    cross_attn: AttnCache,
    ln3: LnCache,
    ffn: FfnCache,
}

struct SampleCache {
    enc_layers: Vec<EncLayerCache>,
    enc_norm: LnCache,
    enc_out: Array2<f64>,
    dec_layers: Vec<DecLayerCache>,
    dec_norm: LnCache,
    dec_out: Array2<f64>,
}

fn sample_forward(
    params: &Parameters,
    src_ids: &[u32],
    src_cids: &[u16],
    tgt_ids: &[u32],
    tgt_cids: &[u16],
) -> Result<(Array2<f64>, SampleCache)> {
    let n_heads = params.config.n_heads;

    let mut x = embed(params, src_ids, src_cids)?;
    let mut enc_layers = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (a_in, ln1) = ln_forward(&x, &layer.ln1);
        let (a_out, attn) = attn_forward(&a_in, &a_in, &layer.attn, n_heads, false);
        x += &a_out;
        let (f_in, ln2) = ln_forward(&x, &layer.ln2);
        let (f_out, ffn) = ffn_forward(&f_in, &layer.ffn);
        x += &f_out;
        enc_layers.push(EncLayerCache { ln1, attn, ln2, ffn });
    }
    let (enc_out, enc_norm) = ln_forward(&x, &params.encoder_norm);

    let mut y = embed(params, tgt_ids, tgt_cids)?;
    let mut dec_layers = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (s_in, ln1) = ln_forward(&y, &layer.ln1);
        let (s_out, self_attn) = attn_forward(&s_in, &s_in, &layer.self_attn, n_heads, true);
        y += &s_out;
        let (c_in, ln2) = ln_forward(&y, &layer.ln2);
        let (c_out, cross_attn) = attn_forward(&c_in, &enc_out, &layer.cross_attn, n_heads, false);
        y += &c_out;
        let (f_in, ln3) = ln_forward(&y, &layer.ln3);
        let (f_out, ffn) = ffn_forward(&f_in, &layer.ffn);
        y += &f_out;
        dec_layers.push(DecLayerCache {
            ln1,
            self_attn,
            ln2,
            cross_attn,
            ln3,
            ffn,
        });
    }
    let (dec_out, dec_norm) = ln_forward(&y, &params.decoder_norm);
    let logits = dec_out.dot(&params.output_weight) + &params.output_bias;

    Ok((
        logits,
        SampleCache {
            enc_layers,
            enc_norm,
            enc_out,
            dec_layers,
            dec_norm,
            dec_out,
        },
    ))
}

/// Logits for every sample in the batch, shape `[padded tgt_len × vocab]`
/// per sample. Rows at padded positions are zero.
pub fn forward(params: &Parameters, batch: &Batch) -> Result<Vec<Array2<f64>>> {
    let vocab = params.config.vocab_size;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        let s_len = batch.src_lens[i];
        let t_len = batch.tgt_lens[i];
        let (logits, _) = sample_forward(
            params,
            &batch.src_ids[i][..s_len],
            &batch.src_cids[i][..s_len],
            &batch.tgt_ids[i][..t_len],
            &batch.tgt_cids[i][..t_len],
        )?;
        let padded_len = batch.tgt_ids[i].len();
        let mut padded = Array2::zeros((padded_len, vocab));
        padded.slice_mut(s![..t_len, ..]).assign(&logits);
        out.push(padded);
    }
    Ok(out)
}

/// Next-token logits for one (source, target prefix) pair: the last row of
/// the decoder output. This is the decoding entry point.
pub fn next_token_logits(
    params: &Parameters,
    src_ids: &[u32],
    src_cids: &[u16],
    tgt_ids: &[u32],
    tgt_cids: &[u16],
) -> Result<Vec<f64>> {
    let (logits, _) = sample_forward(params, src_ids, src_cids, tgt_ids, tgt_cids)?;
    let last = logits.row(logits.dim().0 - 1);
    Ok(last.to_vec())
}

// ----------------------------------------------------------------------
// Loss and gradients
// ----------------------------------------------------------------------

/// Mean token-level negative log-likelihood over unpadded positions.
/// `lens[i]` is the number of real target positions of sample i.
pub fn loss(logits: &[Array2<f64>], labels: &[Vec<u32>], lens: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.len() != lens.len() {
        return Err(Error::ShapeMismatch {
            reason: format!(
                "{} logit blocks, {} label rows, {} lengths",
                logits.len(),
                labels.len(),
                lens.len()
            ),
        });
    }
    let total: usize = lens.iter().sum();
    if total == 0 {
        return Err(Error::AllPositionsPadded);
    }
    let mut sum = 0.0;
    for ((block, row), &len) in logits.iter().zip(labels).zip(lens) {
        if block.dim().0 < len || row.len() < len {
            return Err(Error::ShapeMismatch {
                reason: format!("length {len} exceeds logits/labels for a sample"),
            });
        }
        for t in 0..len {
            sum += nll_row(block.row(t).as_slice().unwrap(), row[t])?;
        }
    }
    Ok(sum / total as f64)
}

fn nll_row(row: &[f64], label: u32) -> Result<f64> {
    if label as usize >= row.len() {
        return Err(Error::TokenIdOutOfRange {
            id: label,
            size: row.len(),
        });
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - row[label as usize])
}

/// Forward and loss in one call, without keeping logits around.
pub fn batch_loss(params: &Parameters, batch: &Batch) -> Result<f64> {
    let logits = forward(params, batch)?;
    loss(&logits, &batch.labels, &batch.tgt_lens)
}

/// Exact analytic gradients of the mean NLL for every parameter group,
/// plus the loss value itself.
pub fn gradients(params: &Parameters, batch: &Batch) -> Result<(Parameters, f64)> {
    let total: usize = batch.tgt_lens.iter().sum();
    if total == 0 {
        return Err(Error::AllPositionsPadded);
    }
    let scale = 1.0 / total as f64;
    let mut grads = params.zeros_like();
    let mut loss_sum = 0.0;

    for i in 0..batch.len() {
        let s_len = batch.src_lens[i];
        let t_len = batch.tgt_lens[i];
        let src_ids = &batch.src_ids[i][..s_len];
        let src_cids = &batch.src_cids[i][..s_len];
        let tgt_ids = &batch.tgt_ids[i][..t_len];
        let tgt_cids = &batch.tgt_cids[i][..t_len];
        let labels = &batch.labels[i][..t_len];

        let (logits, cache) = sample_forward(params, src_ids, src_cids, tgt_ids, tgt_cids)?;

        // Softmax cross-entropy backward: (p − onehot) / total.
        let vocab = params.config.vocab_size;
        let mut dlogits = Array2::zeros((t_len, vocab));
        for t in 0..t_len {
            let row = logits.row(t);
            let label = labels[t] as usize;
            if label >= vocab {
                return Err(Error::TokenIdOutOfRange {
                    id: labels[t],
                    size: vocab,
                });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss_sum += (max + sum.ln() - row[label]) * scale;
            for j in 0..vocab {
                let p = (row[j] - max).exp() / sum;
                dlogits[[t, j]] = (p - if j == label { 1.0 } else { 0.0 }) * scale;
            }
        }

        sample_backward(params, &cache, tgt_ids, tgt_cids, src_ids, src_cids, &dlogits, &mut grads);
    }
    Ok((grads, loss_sum))
}

#[allow(clippy::too_many_arguments)]
fn sample_backward(
    params: &Parameters,
    cache: &SampleCache,
    tgt_ids: &[u32],
    tgt_cids: &[u16],
    src_ids: &[u32],
    src_cids: &[u16],
    dlogits: &Array2<f64>,
    grads: &mut Parameters,
) {
    let n_heads = params.config.n_heads;
    let s_len = src_ids.len();

    // Output projection.
    grads.output_weight += &cache.dec_out.t().dot(dlogits);
    grads.output_bias += &dlogits.sum_axis(Axis(0));
    let d_dec = dlogits.dot(&params.output_weight.t());

    let mut dy = ln_backward(&d_dec, &cache.dec_norm, &params.decoder_norm, &mut grads.decoder_norm);
    let mut d_enc_out = Array2::zeros((s_len, params.config.d_model));

    for (li, layer) in params.decoder.iter().enumerate().rev() {
        let lc = &cache.dec_layers[li];
        let lg = &mut grads.decoder[li];

        let df_in = ffn_backward(&dy, &lc.ffn, &layer.ffn, &mut lg.ffn);
        dy += &ln_backward(&df_in, &lc.ln3, &layer.ln3, &mut lg.ln3);

        let (d_c_in, d_kv) =
            attn_backward(&dy, &lc.cross_attn, &layer.cross_attn, n_heads, &mut lg.cross_attn);
        d_enc_out += &d_kv;
        dy += &ln_backward(&d_c_in, &lc.ln2, &layer.ln2, &mut lg.ln2);

        let (d_s_q, d_s_kv) =
            attn_backward(&dy, &lc.self_attn, &layer.self_attn, n_heads, &mut lg.self_attn);
        let d_s_in = d_s_q + d_s_kv;
        dy += &ln_backward(&d_s_in, &lc.ln1, &layer.ln1, &mut lg.ln1);
    }
    embed_backward(params, grads, tgt_ids, tgt_cids, &dy);

    // Encoder side, seeded by the cross-attention gradients.
    let mut dx = ln_backward(&d_enc_out, &cache.enc_norm, &params.encoder_norm, &mut grads.encoder_norm);
    for (li, layer) in params.encoder.iter().enumerate().rev() {
        let lc = &cache.enc_layers[li];
        let lg = &mut grads.encoder[li];

        let df_in = ffn_backward(&dx, &lc.ffn, &layer.ffn, &mut lg.ffn);
        dx += &ln_backward(&df_in, &lc.ln2, &layer.ln2, &mut lg.ln2);

        let (d_a_q, d_a_kv) = attn_backward(&dx, &lc.attn, &layer.attn, n_heads, &mut lg.attn);
        let d_a_in = d_a_q + d_a_kv;
        dx += &ln_backward(&d_a_in, &lc.ln1, &layer.ln1, &mut lg.ln1);
    }
    embed_backward(params, grads, src_ids, src_cids, &dx);
}

fn embed_backward(
    params: &Parameters,
    grads: &mut Parameters,
    ids: &[u32],
    cids: &[u16],
    dx: &Array2<f64>,
) {
    for (t, (&id, &cid)) in ids.iter().zip(cids).enumerate() {
        let row = dx.row(t);
        let mut tok = grads.token_embeddings.row_mut(id as usize);
        tok += &row;
        let mut pos = grads.position_embeddings.row_mut(t);
        pos += &row;
        if params.config.variant == Variant::Ce {
            if let Some(m) = &mut grads.complexity_embeddings {
                let mut com = m.row_mut(cid as usize);
                com += &row;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 16,
            vocab_size: 12,
            num_complexity_ids: 5,
            max_positions: 10,
            variant,
        }
    }

    fn sample(rng: &mut ChaCha8Rng, src_len: usize, tgt_len: usize) -> EncodedExample {
        EncodedExample {
            src_ids: (0..src_len).map(|_| rng.random_range(0..12)).collect(),
            src_cids: (0..src_len).map(|_| rng.random_range(0..5)).collect(),
            tgt_ids: (0..tgt_len).map(|_| rng.random_range(0..12)).collect(),
            tgt_cids: (0..tgt_len).map(|_| rng.random_range(0..5)).collect(),
            labels: (0..tgt_len).map(|_| rng.random_range(0..12)).collect(),
        }
    }

    fn batch_of(samples: &[EncodedExample]) -> Batch {
        Batch::from_samples(samples, 0, 4).unwrap()
    }

    // Oracle: recompute the embedding of each position by explicit scalar
    // summation over the three tables.
    #[test]
    fn embedding_matches_explicit_summation() {
        let params = Parameters::init(&tiny_config(Variant::Ce), 3).unwrap();
        let ids = [4u32, 7, 1];
        let cids = [2u16, 0, 4];
        let x = embed(&params, &ids, &cids).unwrap();
        let m = params.complexity_embeddings.as_ref().unwrap();
        for t in 0..3 {
            for j in 0..8 {
                let want = params.token_embeddings[[ids[t] as usize, j]]
                    + params.position_embeddings[[t, j]]
                    + m[[cids[t] as usize, j]];
                assert_eq!(x[[t, j]], want);
            }
        }
        // Prompt variant: no complexity term.
        let prompt = Parameters::init(&tiny_config(Variant::Prompt), 3).unwrap();
        let x = embed(&prompt, &ids, &cids).unwrap();
        for t in 0..3 {
            for j in 0..8 {
                let want = prompt.token_embeddings[[ids[t] as usize, j]]
                    + prompt.position_embeddings[[t, j]];
                assert_eq!(x[[t, j]], want);
            }
        }
    }

    #[test]
    fn embedding_rejects_bad_inputs() {
        let params = Parameters::init(&tiny_config(Variant::Ce), 3).unwrap();
        assert!(matches!(
            embed(&params, &[1, 2], &[0]),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            embed(&params, &[99], &[0]),
            Err(Error::TokenIdOutOfRange { .. })
        ));
        assert!(matches!(
            embed(&params, &[1], &[9]),
            Err(Error::TokenIdOutOfRange { .. })
        ));
        let long_ids: Vec<u32> = vec![0; 11];
        let long_cids: Vec<u16> = vec![0; 11];
        assert!(matches!(
            embed(&params, &long_ids, &long_cids),
            Err(Error::PositionOverflow { len: 11, max: 10 })
        ));
    }

    // Oracle: one attention head on a 2-token input, every intermediate
    // value recomputed with standalone scalar arithmetic.
    #[test]
    fn attention_matches_hand_computation_on_two_tokens() {
        let p = AttentionParams {
            w_q: arr2(&[[0.1, 0.2], [0.3, 0.4]]),
            b_q: ndarray::arr1(&[0.01, 0.02]),
            w_k: arr2(&[[0.5, 0.6], [0.7, 0.8]]),
            b_k: ndarray::arr1(&[0.0, 0.0]),
            w_v: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            b_v: ndarray::arr1(&[0.1, -0.1]),
            w_o: arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            b_o: ndarray::arr1(&[0.0, 0.0]),
        };
        let x = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let (out, _) = attn_forward(&x, &x, &p, 1, false);

        // Projections, row by row.
        let q = [[0.1 + 0.01, 0.2 + 0.02], [0.3 + 0.01, 0.4 + 0.02]];
        let k = [[0.5, 0.6], [0.7, 0.8]];
        let v = [[1.0 + 0.1, 0.0 - 0.1], [0.0 + 0.1, 1.0 - 0.1]];
        let scale = 1.0 / 2.0f64.sqrt();
        for i in 0..2 {
            let s0 = (q[i][0] * k[0][0] + q[i][1] * k[0][1]) * scale;
            let s1 = (q[i][0] * k[1][0] + q[i][1] * k[1][1]) * scale;
            let m = s0.max(s1);
            let e0 = (s0 - m).exp();
            let e1 = (s1 - m).exp();
            let a0 = e0 / (e0 + e1);
            let a1 = e1 / (e0 + e1);
            let want0 = a0 * v[0][0] + a1 * v[1][0];
            let want1 = a0 * v[0][1] + a1 * v[1][1];
            assert!((out[[i, 0]] - want0).abs() < 1e-12, "row {i}");
            assert!((out[[i, 1]] - want1).abs() < 1e-12, "row {i}");
        }

        // With the causal mask, position 0 attends only to itself.
        let (causal_out, cache) = attn_forward(&x, &x, &p, 1, true);
        assert_eq!(cache.weights[0][[0, 1]], 0.0);
        assert!((causal_out[[0, 0]] - v[0][0]).abs() < 1e-12);
        assert!((causal_out[[0, 1]] - v[0][1]).abs() < 1e-12);
    }

    #[test]
    fn logits_have_batch_by_len_by_vocab_shape() {
        let params = Parameters::init(&tiny_config(Variant::Ce), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let batch = batch_of(&[sample(&mut rng, 3, 5), sample(&mut rng, 4, 2)]);
        let logits = forward(&params, &batch).unwrap();
        assert_eq!(logits.len(), 2);
        for block in &logits {
            assert_eq!(block.dim(), (5, 12));
        }
        // Padded rows stay zero.
        assert!(logits[1].row(3).iter().all(|&v| v == 0.0));
        assert!(logits[1].row(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_the_batch_permutes_logits_identically() {
        let params = Parameters::init(&tiny_config(Variant::Ce), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let a = sample(&mut rng, 3, 4);
        let b = sample(&mut rng, 5, 4);
        let ab = forward(&params, &batch_of(&[a.clone(), b.clone()])).unwrap();
        let ba = forward(&params, &batch_of(&[b, a])).unwrap();
        assert_eq!(ab[0], ba[1]);
        assert_eq!(ab[1], ba[0]);
    }

    #[test]
    fn uniform_logits_score_ln_vocab() {
        let logits = vec![Array2::from_elem((4, 12), 3.5)];
        let labels = vec![vec![0u32, 5, 11, 3]];
        let value = loss(&logits, &labels, &[4]).unwrap();
        assert!((value - 12.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_score_near_zero() {
        let mut block = Array2::zeros((3, 12));
        let labels = vec![vec![2u32, 7, 0]];
        for (t, &l) in labels[0].iter().enumerate() {
            block[[t, l as usize]] = 100.0;
        }
        let value = loss(&[block], &labels, &[3]).unwrap();
        assert!(value < 1e-30);
    }

    // Oracle: naive softmax followed by -ln p, a different arithmetic path
    // from the log-sum-exp in `loss`.
    #[test]
    fn loss_matches_naive_softmax_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let blocks: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((5, 12), |_| rng.random_range(-4.0..4.0)))
            .collect();
        let labels: Vec<Vec<u32>> = (0..3)
            .map(|_| (0..5).map(|_| rng.random_range(0..12)).collect())
            .collect();
        let lens = [5usize, 3, 4];
        let got = loss(&blocks, &labels, &lens).unwrap();
        let mut sum = 0.0;
        let mut count = 0;
        for (b, (block, row)) in blocks.iter().zip(&labels).enumerate() {
            for t in 0..lens[b] {
                let exps: Vec<f64> = block.row(t).iter().map(|v| v.exp()).collect();
                let z: f64 = exps.iter().sum();
                sum += -(exps[row[t] as usize] / z).ln();
                count += 1;
            }
        }
        assert!((got - sum / count as f64).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_empty_and_padded_out_batches() {
        assert!(matches!(
            loss(&[], &[], &[]),
            Err(Error::AllPositionsPadded)
        ));
        let logits = vec![Array2::zeros((2, 12))];
        assert!(matches!(
            loss(&logits, &[vec![0, 1]], &[0]),
            Err(Error::AllPositionsPadded)
        ));
        assert!(loss(&logits, &[vec![99, 1]], &[2]).is_err());
    }

    #[test]
    fn ce_with_zero_matrix_equals_prompt_logits() {
        let prompt = Parameters::init(&tiny_config(Variant::Prompt), 9).unwrap();
        let ce = prompt.to_variant(Variant::Ce);
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        for _ in 0..10 {
            let batch = batch_of(&[sample(&mut rng, 4, 6), sample(&mut rng, 2, 3)]);
            let a = forward(&prompt, &batch).unwrap();
            let b = forward(&ce, &batch).unwrap();
            for (x, y) in a.iter().zip(&b) {
                let diff = (x - y).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert!(diff <= 1e-12, "max diff {diff}");
            }
        }
    }

    #[test]
    fn changing_a_target_token_never_affects_earlier_logits() {
        let params = Parameters::init(&tiny_config(Variant::Ce), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let base = sample(&mut rng, 3, 6);
        let logits_a = forward(&params, &batch_of(&[base.clone()])).unwrap();
        for j in 1..6 {
            let mut changed = base.clone();
            changed.tgt_ids[j] = (changed.tgt_ids[j] + 1) % 12;
            changed.tgt_cids[j] = (changed.tgt_cids[j] + 1) % 5;
            let logits_b = forward(&params, &batch_of(&[changed])).unwrap();
            for t in 0..j {
                assert_eq!(
                    logits_a[0].row(t),
                    logits_b[0].row(t),
                    "position {t} saw a change at {j}"
                );
            }
        }
    }

    #[test]
    fn unused_complexity_rows_get_zero_gradient() {
        let params = Parameters::init(&tiny_config(Variant::Ce), 3).unwrap();
        // Complexity ids 2 and 3 never appear.
        let ex = EncodedExample {
            src_ids: vec![1, 2, 3],
            src_cids: vec![0, 1, 1],
            tgt_ids: vec![4, 5, 6],
            tgt_cids: vec![4, 0, 1],
            labels: vec![5, 6, 7],
        };
        let (grads, _) = gradients(&params, &batch_of(&[ex])).unwrap();
        let m = grads.complexity_embeddings.as_ref().unwrap();
        assert!(m.row(2).iter().all(|&v| v == 0.0));
        assert!(m.row(3).iter().all(|&v| v == 0.0));
        assert!(m.row(0).iter().any(|&v| v != 0.0));
        // Unused vocabulary rows too.
        assert!(grads.token_embeddings.row(11).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicating_the_batch_leaves_gradients_unchanged() {
        let params = Parameters::init(&tiny_config(Variant::Ce), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let ex = sample(&mut rng, 3, 5);
        let (g1, l1) = gradients(&params, &batch_of(&[ex.clone()])).unwrap();
        let (g2, l2) = gradients(&params, &batch_of(&[ex.clone(), ex])).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1.checksums(), g2.checksums());
    }

    #[test]
    fn gradients_and_forward_agree_on_loss() {
        let params = Parameters::init(&tiny_config(Variant::Ce), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let batch = batch_of(&[sample(&mut rng, 3, 5), sample(&mut rng, 2, 4)]);
        let (_, loss_from_gradients) = gradients(&params, &batch).unwrap();
        let direct = batch_loss(&params, &batch).unwrap();
        assert!((loss_from_gradients - direct).abs() < 1e-12);
    }

    // A small finite-difference check so gradient bugs surface here and not
    // only in the slower full sweep the acceptance suite runs.
    #[test]
    fn spot_finite_difference_check() {
        let config = ModelConfig {
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            ffn_width: 8,
            vocab_size: 9,
            num_complexity_ids: 5,
            max_positions: 8,
            variant: Variant::Ce,
        };
        let params = Parameters::init(&config, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let ex = EncodedExample {
            src_ids: (0..3).map(|_| rng.random_range(0..9)).collect(),
            src_cids: (0..3).map(|_| rng.random_range(0..5)).collect(),
            tgt_ids: (0..4).map(|_| rng.random_range(0..9)).collect(),
            tgt_cids: (0..4).map(|_| rng.random_range(0..5)).collect(),
            labels: (0..4).map(|_| rng.random_range(0..9)).collect(),
        };
        let batch = batch_of(&[ex]);
        let (grads, _) = gradients(&params, &batch).unwrap();
        let grad_groups: Vec<(String, Vec<f64>)> = grads
            .groups()
            .into_iter()
            .map(|(n, s)| (n, s.to_vec()))
            .collect();

        let num_groups = grad_groups.len();
        for gi in 0..num_groups {
            let (name, analytic) = &grad_groups[gi];
            // Two or three positions per group keep this test quick.
            let picks: Vec<usize> = (0..analytic.len().min(3)).collect();
            for &pi in &picks {
                let mut plus = params.clone();
                plus.groups_mut()[gi].1[pi] += 1e-5;
                let mut minus = params.clone();
                minus.groups_mut()[gi].1[pi] -= 1e-5;
                let numeric = (batch_loss(&plus, &batch).unwrap()
                    - batch_loss(&minus, &batch).unwrap())
                    / 2e-5;
                let a = analytic[pi];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-3 || (a - numeric).abs() < 1e-8,
                    "group {name}[{pi}]: analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn batch_construction_pads_with_special_ids() {
        let a = EncodedExample {
            src_ids: vec![1, 2],
            src_cids: vec![1, 1],
            tgt_ids: vec![3],
            tgt_cids: vec![4],
            labels: vec![4],
        };
        let b = EncodedExample {
            src_ids: vec![5],
            src_cids: vec![2],
            tgt_ids: vec![6, 7, 8],
            tgt_cids: vec![4, 0, 1],
            labels: vec![7, 8, 2],
        };
        let batch = Batch::from_samples(&[a, b], 0, 4).unwrap();
        assert_eq!(batch.src_ids[1], vec![5, 0]);
        assert_eq!(batch.src_cids[1], vec![2, 4]);
        assert_eq!(batch.tgt_ids[0], vec![3, 0, 0]);
        assert_eq!(batch.tgt_cids[0], vec![4, 4, 4]);
        assert_eq!(batch.src_mask()[1], vec![true, false]);
        assert_eq!(batch.tgt_mask()[0], vec![true, false, false]);
        assert_eq!(batch.num_label_tokens(), 4);
        // Misaligned sample is rejected.
        let bad = EncodedExample {
            src_ids: vec![1],
            src_cids: vec![1, 2],
            tgt_ids: vec![3],
            tgt_cids: vec![4],
            labels: vec![4],
        };
        assert!(Batch::from_samples(&[bad], 0, 4).is_err());
    }
}
