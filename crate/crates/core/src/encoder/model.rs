use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::attention::attention_weights;
use super::{DropoutMask, EncoderParams, LayerParams};
use crate::error::{Error, Result};
use crate::preprocess::TokenSequence;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Model output for one pair; `p` is the probability of the duplicate class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pair_id: String,
    pub p: f64,
    pub logits: [f64; 2],
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

struct Norm {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layer_norm(x: ArrayView2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, Norm) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv_std.push(is);
    }
    let y = &xhat * gain + bias;
    (y, Norm { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    norm: &Norm,
    gain: &Array2<f64>,
    dgain: &mut Array2<f64>,
    dbias: &mut Array2<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &norm.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = norm.xhat.row(i);
        let sum_g = g.sum();
        let sum_gx = g.dot(&xh);
        let is = norm.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = is / d * (d * g[j] - sum_g - xh[j] * sum_gx);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn add_row(m: &mut Array2<f64>, row: &Array2<f64>) {
    *m += row;
}

struct LayerCache {
    a: Array2<f64>,
    norm1: Norm,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Vec<Array2<f64>>,
    concat: Array2<f64>,
    norm2: Norm,
    c: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    seq_len: usize,
    ids: Vec<usize>,
    segments: Vec<usize>,
    matches: Vec<usize>,
    mask: Option<DropoutMask>,
    layers: Vec<LayerCache>,
    final_norm: Norm,
    r_drop: Array2<f64>,
    pub logits: [f64; 2],
    pub probs: [f64; 2],
}

impl ForwardCache {
    pub fn prediction(&self, pair_id: &str) -> Prediction {
        Prediction { pair_id: pair_id.to_string(), p: self.probs[1], logits: self.logits }
    }
}

fn layer_forward(
    p: &LayerParams,
    x: &Array2<f64>,
    rows: usize,
    heads: usize,
    mask: Option<&(Array2<f64>, Array2<f64>)>,
) -> (Array2<f64>, LayerCache) {
    let dk = x.ncols() / heads;
    let (a, norm1) = layer_norm(x.view(), &p.ln1_gain, &p.ln1_bias);
    let mut q = a.slice(s![..rows, ..]).dot(&p.w_query);
    add_row(&mut q, &p.b_query);
    let mut k = a.dot(&p.w_key);
    add_row(&mut k, &p.b_key);
    let mut v = a.dot(&p.w_value);
    add_row(&mut v, &p.b_value);

    let mut concat = Array2::zeros((rows, x.ncols()));
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let w = attention_weights(q.slice(cols), k.slice(cols), None);
        concat.slice_mut(cols).assign(&w.dot(&v.slice(cols)));
        weights.push(w);
    }
    let mut attn = concat.dot(&p.w_out);
    add_row(&mut attn, &p.b_out);
    if let Some((m_attn, _)) = mask {
        attn *= m_attn;
    }
    let hres = &x.slice(s![..rows, ..]) + &attn;
    let (c, norm2) = layer_norm(hres.view(), &p.ln2_gain, &p.ln2_bias);
    let mut f1 = c.dot(&p.w_ff1);
    add_row(&mut f1, &p.b_ff1);
    let g = f1.mapv(gelu);
    let mut f2 = g.dot(&p.w_ff2);
    add_row(&mut f2, &p.b_ff2);
    if let Some((_, m_ff)) = mask {
        f2 *= m_ff;
    }
    let y = hres + f2;
    (y, LayerCache { a, norm1, q, k, v, weights, concat, norm2, c, f1, g })
}

fn layer_backward(
    p: &LayerParams,
    grad: &mut LayerParams,
    cache: &LayerCache,
    dy: &Array2<f64>,
    heads: usize,
    mask: Option<&(Array2<f64>, Array2<f64>)>,
) -> Array2<f64> {
    let rows = dy.nrows();
    let d = dy.ncols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let df2 = match mask {
        Some((_, m_ff)) => dy * m_ff,
        None => dy.clone(),
    };
    grad.w_ff2 += &cache.g.t().dot(&df2);
    grad.b_ff2 += &df2.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut df1 = df2.dot(&p.w_ff2.t());
    df1.zip_mut_with(&cache.f1, |g, &x| *g *= gelu_grad(x));
    grad.w_ff1 += &cache.c.t().dot(&df1);
    grad.b_ff1 += &df1.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dc = df1.dot(&p.w_ff1.t());
    let dh = dy + &layer_norm_backward(&dc, &cache.norm2, &p.ln2_gain, &mut grad.ln2_gain, &mut grad.ln2_bias);

    let dattn = match mask {
        Some((m_attn, _)) => &dh * m_attn,
        None => dh.clone(),
    };
    grad.w_out += &cache.concat.t().dot(&dattn);
    grad.b_out += &dattn.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dconcat = dattn.dot(&p.w_out.t());

    let n = cache.k.nrows();
    let mut dq = Array2::zeros((rows, d));
    let mut dk_all = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let w = &cache.weights[h];
        let d_out = dconcat.slice(cols);
        let dw = d_out.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&w.t().dot(&d_out));
        let mut ds = dw;
        for i in 0..rows {
            let row_dot: f64 = ds.row(i).dot(&w.row(i));
            for j in 0..n {
                ds[[i, j]] = w[[i, j]] * (ds[[i, j]] - row_dot) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk_all.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    let a_rows = cache.a.slice(s![..rows, ..]);
    grad.w_query += &a_rows.t().dot(&dq);
    grad.b_query += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
    grad.w_key += &cache.a.t().dot(&dk_all);
    grad.b_key += &dk_all.sum_axis(Axis(0)).insert_axis(Axis(0));
    grad.w_value += &cache.a.t().dot(&dv);
    grad.b_value += &dv.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut da = dk_all.dot(&p.w_key.t()) + dv.dot(&p.w_value.t());
    {
        let mut top = da.slice_mut(s![..rows, ..]);
        top += &dq.dot(&p.w_query.t());
    }
    let mut dx = layer_norm_backward(&da, &cache.norm1, &p.ln1_gain, &mut grad.ln1_gain, &mut grad.ln1_bias);
    {
        let mut top = dx.slice_mut(s![..rows, ..]);
        top += &dh;
    }
    dx
}

fn check_input(params: &EncoderParams, seq: &TokenSequence, mask: Option<&DropoutMask>) -> Result<usize> {
    let c = &params.config;
    let n = seq.len();
    if n == 0 {
        return Err(Error::Shape(format!("pair `{}` has no tokens", seq.pair_id)));
    }
    if seq.ids.len() != seq.mask.len() || seq.segments.len() != seq.ids.len() || seq.matches.len() != seq.ids.len() {
        return Err(Error::Shape(format!("pair `{}` has ragged token arrays", seq.pair_id)));
    }
    if seq.mask[..n].iter().any(|m| !m) {
        return Err(Error::Shape(format!("pair `{}` has padding before real tokens", seq.pair_id)));
    }
    if n > c.max_len {
        return Err(Error::Shape(format!("{n} tokens exceed encoder max_len {}", c.max_len)));
    }
    if let Some(bad) = seq.ids[..n].iter().find(|&&id| id as usize >= c.vocab_size) {
        return Err(Error::Shape(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
    }
    if let Some(m) = mask {
        if m.embedding.dim() != (n, c.d_model) || m.layers.len() != c.n_layers {
            return Err(Error::Shape(format!(
                "dropout mask {:?} does not fit a {n}-token sequence",
                m.embedding.dim()
            )));
        }
    }
    Ok(n)
}

/// Forward pass keeping the intermediates needed by [`backward_logits`].
/// `mask = None` disables dropout.
pub fn forward_with_cache(params: &EncoderParams, seq: &TokenSequence, mask: Option<&DropoutMask>) -> Result<ForwardCache> {
    let n = check_input(params, seq, mask)?;
    let c = &params.config;
    let ids: Vec<usize> = seq.ids[..n].iter().map(|&i| i as usize).collect();
    let segments: Vec<usize> = seq.segments[..n].iter().map(|&s| usize::from(s.min(1))).collect();
    let matches: Vec<usize> = seq.matches[..n].iter().map(|&m| usize::from(m.min(1))).collect();

    let mut x = Array2::zeros((n, c.d_model));
    for t in 0..n {
        let mut row = x.row_mut(t);
        row += &params.token_embedding.row(ids[t]);
        row += &params.position_embedding.row(t);
        row += &params.segment_embedding.row(segments[t]);
        if c.match_features {
            row += &params.match_embedding.row(matches[t]);
        }
    }
    if let Some(m) = mask {
        x *= &m.embedding;
    }
    let mut layers = Vec::with_capacity(c.n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let rows = if l + 1 == c.n_layers { 1 } else { n };
        let (y, cache) = layer_forward(layer, &x, rows, c.n_heads, mask.map(|m| &m.layers[l]));
        layers.push(cache);
        x = y;
    }
    let (r, final_norm) = layer_norm(x.slice(s![0..1, ..]), &params.final_gain, &params.final_bias);
    let r_drop = match mask {
        Some(m) => r * &m.head,
        None => r,
    };
    let z = r_drop.dot(&params.head_weight) + &params.head_bias;
    let logits = [z[[0, 0]], z[[0, 1]]];
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("logits of pair `{}`", seq.pair_id)));
    }
    Ok(ForwardCache {
        seq_len: n,
        ids,
        segments,
        matches,
        mask: mask.cloned(),
        layers,
        final_norm,
        r_drop,
        logits,
        probs: softmax2(logits),
    })
}

pub fn forward(params: &EncoderParams, seq: &TokenSequence, mask: Option<&DropoutMask>) -> Result<Prediction> {
    Ok(forward_with_cache(params, seq, mask)?.prediction(&seq.pair_id))
}

/// Accumulates into `grads` the gradient of a loss whose derivative with
/// respect to the two logits is `dlogits`.
pub fn backward_logits(params: &EncoderParams, cache: &ForwardCache, dlogits: [f64; 2], grads: &mut EncoderParams) {
    let c = &params.config;
    let dz = Array2::from_shape_vec((1, 2), dlogits.to_vec()).expect("1x2");
    grads.head_weight += &cache.r_drop.t().dot(&dz);
    grads.head_bias += &dz;
    let mut dr = dz.dot(&params.head_weight.t());
    if let Some(m) = &cache.mask {
        dr *= &m.head;
    }
    let mut dy = layer_norm_backward(&dr, &cache.final_norm, &params.final_gain, &mut grads.final_gain, &mut grads.final_bias);
    for l in (0..c.n_layers).rev() {
        dy = layer_backward(
            &params.layers[l],
            &mut grads.layers[l],
            &cache.layers[l],
            &dy,
            c.n_heads,
            cache.mask.as_ref().map(|m| &m.layers[l]),
        );
    }
    if let Some(m) = &cache.mask {
        dy *= &m.embedding;
    }
    for t in 0..cache.seq_len {
        let row = dy.row(t);
        let mut tok = grads.token_embedding.row_mut(cache.ids[t]);
        tok += &row;
        let mut pos = grads.position_embedding.row_mut(t);
        pos += &row;
        let mut seg = grads.segment_embedding.row_mut(cache.segments[t]);
        seg += &row;
        if c.match_features {
            let mut mt = grads.match_embedding.row_mut(cache.matches[t]);
            mt += &row;
        }
    }
}

/// Gradient of the single-pass negative log-likelihood `-ln p[label]`.
pub fn backward(params: &EncoderParams, seq: &TokenSequence, label: u8, mask: Option<&DropoutMask>) -> Result<EncoderParams> {
    let cache = forward_with_cache(params, seq, mask)?;
    let y = usize::from(label.min(1));
    let mut dlogits = cache.probs;
    dlogits[y] -= 1.0;
    let mut grads = params.zeros_like();
    backward_logits(params, &cache, dlogits, &mut grads);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok(grads)
}
