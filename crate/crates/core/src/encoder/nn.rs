//! Forward and backward passes of the encoder for a single sequence.

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use super::params::{Block, Params};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xhat), &inv) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xhat) / d;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|v, &xh| *v = inv * (*v - mean_d - xh * mean_dx));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
    ln2: LnCache,
    c: Array2<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    ids: Vec<u32>,
    mask_position: usize,
    blocks: Vec<BlockCache>,
    lnf: LnCache,
}

fn block_forward(blk: &Block, heads: usize, x: Array2<f64>) -> (Array2<f64>, BlockCache) {
    let dim = x.ncols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let (a, ln1) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b);
    let q = a.dot(&blk.wq) + &blk.bq;
    let k = a.dot(&blk.wk) + &blk.bk;
    let v = a.dot(&blk.wv) + &blk.bv;
    let mut concat = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut p);
        concat.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        probs.push(p);
    }
    let hidden = x + concat.dot(&blk.wo) + &blk.bo;

    let (c, ln2) = layer_norm(&hidden, &blk.ln2_g, &blk.ln2_b);
    let u = c.dot(&blk.w1) + &blk.b1;
    let act = u.mapv(gelu);
    let out = hidden + act.dot(&blk.w2) + &blk.b2;
    (
        out,
        BlockCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            concat,
            ln2,
            c,
            u,
            act,
        },
    )
}

fn block_backward(
    blk: &Block,
    grad: &mut Block,
    heads: usize,
    cache: &BlockCache,
    dout: Array2<f64>,
) -> Array2<f64> {
    let dim = dout.ncols();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // out = hidden + ffn(ln2(hidden))
    let df = &dout;
    grad.w2 += &cache.act.t().dot(df);
    grad.b2 += &df.sum_axis(Axis(0));
    let mut du = df.dot(&blk.w2.t());
    Zip::from(&mut du)
        .and(&cache.u)
        .for_each(|d, &u| *d *= gelu_grad(u));
    grad.w1 += &cache.c.t().dot(&du);
    grad.b1 += &du.sum_axis(Axis(0));
    let dc = du.dot(&blk.w1.t());
    let dhidden = dout.clone()
        + layer_norm_backward(&dc, &cache.ln2, &blk.ln2_g, &mut grad.ln2_g, &mut grad.ln2_b);

    // hidden = x + attn(ln1(x))
    let dattn = &dhidden;
    grad.wo += &cache.concat.t().dot(dattn);
    grad.bo += &dattn.sum_axis(Axis(0));
    let dconcat = dattn.dot(&blk.wo.t());
    let mut dq = Array2::zeros(dconcat.raw_dim());
    let mut dk = Array2::zeros(dconcat.raw_dim());
    let mut dv = Array2::zeros(dconcat.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let d_o = dconcat.slice(cols);
        let dp = d_o.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&d_o));
        let mut ds = &dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let inner = row.sum();
            Zip::from(&mut row)
                .and(&prow)
                .for_each(|d, &pv| *d -= pv * inner);
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    grad.wq += &cache.a.t().dot(&dq);
    grad.bq += &dq.sum_axis(Axis(0));
    grad.wk += &cache.a.t().dot(&dk);
    grad.bk += &dk.sum_axis(Axis(0));
    grad.wv += &cache.a.t().dot(&dv);
    grad.bv += &dv.sum_axis(Axis(0));
    let da = dq.dot(&blk.wq.t()) + dk.dot(&blk.wk.t()) + dv.dot(&blk.wv.t());
    dhidden + layer_norm_backward(&da, &cache.ln1, &blk.ln1_g, &mut grad.ln1_g, &mut grad.ln1_b)
}

/// Returns the final hidden state at the mask position and the cache needed
/// for [`backward`].
pub(crate) fn forward(
    params: &Params,
    heads: usize,
    ids: &[u32],
    mask_position: usize,
) -> (Array1<f64>, ForwardCache) {
    let t = ids.len();
    let dim = params.tok.ncols();
    let mut x = Array2::zeros((t, dim));
    for (i, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&params.tok.row(id as usize));
        row += &params.pos.row(i);
    }
    let mut caches = Vec::with_capacity(params.blocks.len());
    for blk in &params.blocks {
        let (out, cache) = block_forward(blk, heads, x);
        x = out;
        caches.push(cache);
    }
    let (y, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let anchor = y.row(mask_position).to_owned();
    (
        anchor,
        ForwardCache {
            ids: ids.to_vec(),
            mask_position,
            blocks: caches,
            lnf,
        },
    )
}

/// Inference-only forward pass.
pub(crate) fn anchor(params: &Params, heads: usize, ids: &[u32], mask_position: usize) -> Array1<f64> {
    forward(params, heads, ids, mask_position).0
}

/// Accumulates into `grad` the gradient of a scalar loss whose derivative
/// with respect to the anchor is `d_anchor`.
pub(crate) fn backward(
    params: &Params,
    grad: &mut Params,
    heads: usize,
    cache: &ForwardCache,
    d_anchor: ArrayView1<f64>,
) {
    let t = cache.ids.len();
    let dim = params.tok.ncols();
    let mut dy = Array2::zeros((t, dim));
    dy.row_mut(cache.mask_position).assign(&d_anchor);
    let mut dx = layer_norm_backward(
        &dy,
        &cache.lnf,
        &params.lnf_g,
        &mut grad.lnf_g,
        &mut grad.lnf_b,
    );
    for (i, blk) in params.blocks.iter().enumerate().rev() {
        dx = block_backward(blk, &mut grad.blocks[i], heads, &cache.blocks[i], dx);
    }
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(i);
        let mut g = grad.tok.row_mut(id as usize);
        g += &row;
        let mut p = grad.pos.row_mut(i);
        p += &row;
    }
}

/// Logits of every entity row against `anchor`; `None` for entities outside
/// the MEM head.
pub(crate) fn entity_logits(
    params: &Params,
    entity_offset: usize,
    mask: &[bool],
    anchor: ArrayView1<f64>,
) -> Vec<Option<f64>> {
    let rows = params
        .tok
        .slice(s![entity_offset..entity_offset + mask.len(), ..]);
    let logits = rows.dot(&anchor);
    logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| m.then_some(l))
        .collect()
}

/// Max-shifted softmax over the active logits; inactive entries get 0.
pub(crate) fn masked_softmax(logits: &[Option<f64>]) -> Vec<f64> {
    let max = logits
        .iter()
        .flatten()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out: Vec<f64> = logits
        .iter()
        .map(|l| l.map_or(0.0, |v| (v - max).exp()))
        .collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}
