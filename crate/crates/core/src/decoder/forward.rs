//! Pre-norm causal transformer forward pass and its hand-derived backward.

use rand::Rng as _;

use super::params::{DecoderParams, LayerNorm, LoraAdapters, LoraPair};
use super::sequence::{MultimodalSequence, Slot};
use crate::error::{Error, Result};
use crate::linalg::{gelu, gelu_grad, matmul_nn, matmul_nt, matmul_tn, softmax_in_place, Mat};
use crate::rng;

const LN_EPS: f64 = 1e-5;

/// Which gradients the backward pass must produce. Frozen groups are skipped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradNeeds {
    pub embeddings: bool,
    pub weights: bool,
    pub layer_norms: bool,
    pub lora: bool,
}

impl GradNeeds {
    pub const ALL: GradNeeds = GradNeeds {
        embeddings: true,
        weights: true,
        layer_norms: true,
        lora: true,
    };
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub decoder: DecoderParams,
    pub lora: Option<LoraAdapters>,
}

impl Gradients {
    pub fn zeros(params: &DecoderParams, lora: Option<&LoraAdapters>) -> Self {
        Self {
            decoder: params.zeros_like(),
            lora: lora.map(LoraAdapters::zeros_like),
        }
    }
}

struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

struct LoraCache {
    /// Dropout-scaled adapter input (T×D) and the multiplier applied per entry.
    input: Mat,
    mask: Option<Vec<f64>>,
    /// input·Aᵀ (T×r)
    hidden: Mat,
}

struct LayerCache {
    ln1: LnCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    lora_q: Option<LoraCache>,
    lora_v: Option<LoraCache>,
    /// per head T×T row-major
    probs: Vec<Vec<f64>>,
    ctx: Mat,
    ln2: LnCache,
    b: Mat,
    u: Mat,
    g: Mat,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    ln_f: LnCache,
    y: Mat,
}

fn layer_norm(x: &Mat, ln: &LayerNorm) -> (Mat, LnCache) {
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let row = x.row(t);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(t);
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
        }
        let o = out.row_mut(t);
        for j in 0..d {
            o[j] = xh[j] * ln.gain[j] + ln.bias[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns dx; accumulates gain/bias grads when `grads` is given.
fn layer_norm_backward(dy: &Mat, cache: &LnCache, ln: &LayerNorm, grads: Option<&mut LayerNorm>) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut grads = grads;
    let mut dxhat = vec![0.0; d];
    for t in 0..dy.rows {
        let g = dy.row(t);
        let xh = cache.xhat.row(t);
        if let Some(gr) = grads.as_deref_mut() {
            for j in 0..d {
                gr.gain[j] += g[j] * xh[j];
                gr.bias[j] += g[j];
            }
        }
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            dxhat[j] = g[j] * ln.gain[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let rs = cache.rstd[t] / d as f64;
        let o = dx.row_mut(t);
        for j in 0..d {
            o[j] = rs * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
        }
    }
    dx
}

fn linear(x: &Mat, w: &Mat) -> Mat {
    let mut out = Mat::zeros(x.rows, w.rows);
    matmul_nt(&x.data, &w.data, x.rows, x.cols, w.rows, &mut out.data, false);
    out
}

fn dropout_mask(rate: f64, seed: u64, layer: usize, which: u64, len: usize) -> Vec<f64> {
    let mut r = rng::substream(seed, "dropout", &[layer as u64, which]);
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if r.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Adds `scale·(drop(a)·Aᵀ)·Bᵀ` to `out`.
fn lora_forward(
    a: &Mat,
    pair: &LoraPair,
    scale: f64,
    mask: Option<Vec<f64>>,
    out: &mut Mat,
) -> LoraCache {
    let input = match &mask {
        Some(m) => Mat::from_vec(a.rows, a.cols, a.data.iter().zip(m).map(|(x, k)| x * k).collect()),
        None => a.clone(),
    };
    let hidden = linear(&input, &pair.a);
    let mut delta = linear(&hidden, &pair.b);
    delta.scale(scale);
    out.add_assign(&delta);
    LoraCache { input, mask, hidden }
}

/// Adds `da` contributions and accumulates A/B grads.
fn lora_backward(
    dout: &Mat,
    pair: &LoraPair,
    scale: f64,
    cache: &LoraCache,
    grads: Option<&mut LoraPair>,
    da: &mut Mat,
) {
    let t = dout.rows;
    let d = dout.cols;
    let r = pair.a.rows;
    // dhidden = scale·dout·B  (T×r)
    let mut dhidden = Mat::zeros(t, r);
    matmul_nn(&dout.data, &pair.b.data, t, d, r, &mut dhidden.data, false);
    dhidden.scale(scale);
    if let Some(g) = grads {
        // dB += scale·doutᵀ·hidden  (D×r)
        let mut db = Mat::zeros(d, r);
        matmul_tn(&dout.data, &cache.hidden.data, d, t, r, &mut db.data, false);
        db.scale(scale);
        g.b.add_assign(&db);
        // dA += dhiddenᵀ·input (r×D)
        matmul_tn(&dhidden.data, &cache.input.data, r, t, d, &mut g.a.data, true);
    }
    let mut dinput = Mat::zeros(t, d);
    matmul_nn(&dhidden.data, &pair.a.data, t, r, d, &mut dinput.data, false);
    if let Some(m) = &cache.mask {
        for (x, k) in dinput.data.iter_mut().zip(m) {
            *x *= k;
        }
    }
    da.add_assign(&dinput);
}

/// Input embeddings plus learned positions.
pub fn embed_inputs(params: &DecoderParams, seq: &MultimodalSequence) -> Result<Mat> {
    let cfg = &params.config;
    let d = cfg.d_model;
    if seq.len() > cfg.max_seq_len {
        return Err(Error::SequenceOverflow {
            length: seq.len(),
            max: cfg.max_seq_len,
        });
    }
    if seq.loss_mask.len() != seq.len() {
        return Err(Error::Shape("loss_mask length differs from sequence".into()));
    }
    let mut x = Mat::zeros(seq.len(), d);
    for (t, slot) in seq.slots.iter().enumerate() {
        let row = x.row_mut(t);
        match *slot {
            Slot::Text(id) => {
                if id as usize >= cfg.vocab_size {
                    return Err(Error::Shape(format!("token id {id} >= vocab {}", cfg.vocab_size)));
                }
                row.copy_from_slice(params.tok_emb.row(id as usize));
            }
            Slot::Brain(i) => {
                let tok = seq
                    .brain_tokens
                    .get(i)
                    .ok_or_else(|| Error::Shape(format!("brain slot {i} has no token")))?;
                if tok.len() != d {
                    return Err(Error::Shape(format!("brain token width {} != d_model {d}", tok.len())));
                }
                row.copy_from_slice(tok);
            }
            Slot::Empty => {}
        }
        for (v, p) in row.iter_mut().zip(params.pos_emb.row(t)) {
            *v += p;
        }
    }
    Ok(x)
}

/// Logits for every position (T×vocab).
pub fn forward(
    params: &DecoderParams,
    adapters: Option<&LoraAdapters>,
    seq: &MultimodalSequence,
    dropout_on: bool,
    seed: u64,
) -> Result<Mat> {
    forward_cached(params, adapters, seq, dropout_on, seed).map(|(l, _)| l)
}

pub fn forward_cached(
    params: &DecoderParams,
    adapters: Option<&LoraAdapters>,
    seq: &MultimodalSequence,
    dropout_on: bool,
    seed: u64,
) -> Result<(Mat, ForwardCache)> {
    let cfg = &params.config;
    if let Some(ad) = adapters {
        if ad.layers.len() != cfg.n_layers
            || ad.layers.iter().any(|l| l.q.a.cols != cfg.d_model || l.v.b.rows != cfg.d_model)
        {
            return Err(Error::Shape("LoRA adapters do not match decoder shape".into()));
        }
    }
    let mut x = embed_inputs(params, seq)?;
    let t_len = x.rows;
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);

    for (l, block) in params.blocks.iter().enumerate() {
        let (a, ln1) = layer_norm(&x, &block.ln1);
        let mut q = linear(&a, &block.wq);
        let k = linear(&a, &block.wk);
        let mut v = linear(&a, &block.wv);
        let (mut lora_q, mut lora_v) = (None, None);
        if let Some(ad) = adapters {
            let rate = ad.config.dropout;
            let use_drop = dropout_on && rate > 0.0;
            let mq = use_drop.then(|| dropout_mask(rate, seed, l, 0, t_len * d));
            let mv = use_drop.then(|| dropout_mask(rate, seed, l, 1, t_len * d));
            lora_q = Some(lora_forward(&a, &ad.layers[l].q, ad.scale(), mq, &mut q));
            lora_v = Some(lora_forward(&a, &ad.layers[l].v, ad.scale(), mv, &mut v));
        }

        let mut ctx = Mat::zeros(t_len, d);
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let off = h * dh;
            let mut p = vec![0.0; t_len * t_len];
            for i in 0..t_len {
                let qi = &q.row(i)[off..off + dh];
                let row = &mut p[i * t_len..(i + 1) * t_len];
                for j in 0..=i {
                    let kj = &k.row(j)[off..off + dh];
                    row[j] = att_scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(&mut row[..=i]);
                let c = &mut ctx.row_mut(i)[off..off + dh];
                for j in 0..=i {
                    let w = row[j];
                    let vj = &v.row(j)[off..off + dh];
                    for (cc, vv) in c.iter_mut().zip(vj) {
                        *cc += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        let att_out = linear(&ctx, &block.wo);
        x.add_assign(&att_out);

        let (b, ln2) = layer_norm(&x, &block.ln2);
        let u = linear(&b, &block.w_in);
        let g = Mat::from_vec(u.rows, u.cols, u.data.iter().map(|&z| gelu(z)).collect());
        let m = linear(&g, &block.w_out);
        x.add_assign(&m);

        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            lora_q,
            lora_v,
            probs,
            ctx,
            ln2,
            b,
            u,
            g,
        });
    }
    let (y, ln_f) = layer_norm(&x, &params.ln_f);
    let logits = linear(&y, &params.tok_emb);
    Ok((logits, ForwardCache { layers, ln_f, y }))
}

/// Back-propagates `dlogits`, accumulating into `grads` for the requested
/// groups. Returns the gradient with respect to each brain token.
pub fn backward(
    params: &DecoderParams,
    adapters: Option<&LoraAdapters>,
    seq: &MultimodalSequence,
    cache: &ForwardCache,
    dlogits: &Mat,
    needs: GradNeeds,
    grads: &mut Gradients,
) -> Vec<Vec<f64>> {
    let cfg = &params.config;
    let d = cfg.d_model;
    let t_len = dlogits.rows;
    let v_size = cfg.vocab_size;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();

    let mut dy = Mat::zeros(t_len, d);
    matmul_nn(&dlogits.data, &params.tok_emb.data, t_len, v_size, d, &mut dy.data, false);
    if needs.embeddings {
        matmul_tn(&dlogits.data, &cache.y.data, v_size, t_len, d, &mut grads.decoder.tok_emb.data, true);
    }
    let mut dx = layer_norm_backward(
        &dy,
        &cache.ln_f,
        &params.ln_f,
        needs.layer_norms.then_some(&mut grads.decoder.ln_f),
    );

    for l in (0..cfg.n_layers).rev() {
        let block = &params.blocks[l];
        let lc = &cache.layers[l];
        let gb = &mut grads.decoder.blocks[l];

        // MLP: x2 = x1 + GeLU(b·W_inᵀ)·W_outᵀ
        let ff = cfg.d_ff;
        let mut dg = Mat::zeros(t_len, ff);
        matmul_nn(&dx.data, &block.w_out.data, t_len, d, ff, &mut dg.data, false);
        if needs.weights {
            matmul_tn(&dx.data, &lc.g.data, d, t_len, ff, &mut gb.w_out.data, true);
        }
        for (gv, u) in dg.data.iter_mut().zip(&lc.u.data) {
            *gv *= gelu_grad(*u);
        }
        let du = dg;
        if needs.weights {
            matmul_tn(&du.data, &lc.b.data, ff, t_len, d, &mut gb.w_in.data, true);
        }
        let mut db = Mat::zeros(t_len, d);
        matmul_nn(&du.data, &block.w_in.data, t_len, ff, d, &mut db.data, false);
        let dres = layer_norm_backward(&db, &lc.ln2, &block.ln2, needs.layer_norms.then_some(&mut gb.ln2));
        dx.add_assign(&dres);

        // attention: x1 = x + ctx·Woᵀ
        let mut dctx = Mat::zeros(t_len, d);
        matmul_nn(&dx.data, &block.wo.data, t_len, d, d, &mut dctx.data, false);
        if needs.weights {
            matmul_tn(&dx.data, &lc.ctx.data, d, t_len, d, &mut gb.wo.data, true);
        }
        let mut dq = Mat::zeros(t_len, d);
        let mut dk = Mat::zeros(t_len, d);
        let mut dv = Mat::zeros(t_len, d);
        let mut dp = vec![0.0; t_len];
        for h in 0..n_heads {
            let off = h * dh;
            let p = &lc.probs[h];
            for i in 0..t_len {
                let dci = &dctx.row(i)[off..off + dh];
                let prow = &p[i * t_len..(i + 1) * t_len];
                let mut dot_pd = 0.0;
                for j in 0..=i {
                    let vj = &lc.v.row(j)[off..off + dh];
                    dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                    dot_pd += dp[j] * prow[j];
                    let dvj = &mut dv.row_mut(j)[off..off + dh];
                    for (o, c) in dvj.iter_mut().zip(dci) {
                        *o += prow[j] * c;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot_pd) * att_scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj: Vec<f64> = lc.k.row(j)[off..off + dh].to_vec();
                    let qi: Vec<f64> = lc.q.row(i)[off..off + dh].to_vec();
                    for (o, kk) in dq.row_mut(i)[off..off + dh].iter_mut().zip(&kj) {
                        *o += ds * kk;
                    }
                    for (o, qq) in dk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                        *o += ds * qq;
                    }
                }
            }
        }

        let mut da = Mat::zeros(t_len, d);
        matmul_nn(&dq.data, &block.wq.data, t_len, d, d, &mut da.data, true);
        matmul_nn(&dk.data, &block.wk.data, t_len, d, d, &mut da.data, true);
        matmul_nn(&dv.data, &block.wv.data, t_len, d, d, &mut da.data, true);
        if needs.weights {
            matmul_tn(&dq.data, &lc.a.data, d, t_len, d, &mut gb.wq.data, true);
            matmul_tn(&dk.data, &lc.a.data, d, t_len, d, &mut gb.wk.data, true);
            matmul_tn(&dv.data, &lc.a.data, d, t_len, d, &mut gb.wv.data, true);
        }
        if let Some(ad) = adapters {
            let s = ad.scale();
            let mut lg = grads.lora.as_mut().filter(|_| needs.lora).map(|g| &mut g.layers[l]);
            if let Some(c) = &lc.lora_q {
                lora_backward(&dq, &ad.layers[l].q, s, c, lg.as_deref_mut().map(|x| &mut x.q), &mut da);
            }
            if let Some(c) = &lc.lora_v {
                lora_backward(&dv, &ad.layers[l].v, s, c, lg.map(|x| &mut x.v), &mut da);
            }
        }
        let dres = layer_norm_backward(&da, &lc.ln1, &block.ln1, needs.layer_norms.then_some(&mut gb.ln1));
        dx.add_assign(&dres);
    }

    let mut brain_grads = vec![vec![0.0; d]; seq.brain_tokens.len()];
    for (t, slot) in seq.slots.iter().enumerate() {
        let row = dx.row(t);
        if needs.embeddings {
            for (g, v) in grads.decoder.pos_emb.row_mut(t).iter_mut().zip(row) {
                *g += v;
            }
        }
        match *slot {
            Slot::Text(id) if needs.embeddings => {
                for (g, v) in grads.decoder.tok_emb.row_mut(id as usize).iter_mut().zip(row) {
                    *g += v;
                }
            }
            Slot::Brain(i) => {
                for (g, v) in brain_grads[i].iter_mut().zip(row) {
                    *g += v;
                }
            }
            _ => {}
        }
    }
    brain_grads
}

fn masked_targets(seq: &MultimodalSequence) -> Result<Vec<(usize, u32)>> {
    let mut out = Vec::new();
    for t in 1..seq.len() {
        if seq.loss_mask[t] {
            match seq.slots[t] {
                Slot::Text(id) => out.push((t - 1, id)),
                _ => return Err(Error::Shape(format!("loss position {t} is not a text token"))),
            }
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("loss mask selects no positions".into()));
    }
    Ok(out)
}

/// Mean next-token cross-entropy over masked positions.
pub fn loss(logits: &Mat, seq: &MultimodalSequence) -> Result<f64> {
    let targets = masked_targets(seq)?;
    let mut total = 0.0;
    for &(row, id) in &targets {
        let lp = crate::linalg::log_softmax(logits.row(row));
        total -= lp[id as usize];
    }
    Ok(total / targets.len() as f64)
}

pub fn loss_and_grad(logits: &Mat, seq: &MultimodalSequence) -> Result<(f64, Mat)> {
    let targets = masked_targets(seq)?;
    let n = targets.len() as f64;
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for &(row, id) in &targets {
        let lp = crate::linalg::log_softmax(logits.row(row));
        total -= lp[id as usize];
        let g = dlogits.row_mut(row);
        for (gv, l) in g.iter_mut().zip(&lp) {
            *gv = l.exp() / n;
        }
        g[id as usize] -= 1.0 / n;
    }
    Ok((total / n, dlogits))
}
