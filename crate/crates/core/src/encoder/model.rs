//! Forward and backward passes of the pre-layer-norm transformer encoder.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::params::{EncoderParameters, LayerParams};
use super::vocab::{self, Vocabulary};
use crate::data_model::Instance;
use crate::error::{Error, Result};

/// Token ids with entity markers, and the positions of the two begin markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkedSequence {
    pub ids: Vec<u32>,
    pub h_index: usize,
    pub t_index: usize,
}

impl MarkedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[CLS] … [H_CLS] head [H_SEP] … [T_CLS] tail [T_SEP] … [SEP]`, with the
/// markers at the span boundaries in textual order.
pub fn mark_instance(inst: &Instance, vocab: &Vocabulary, max_len: usize) -> Result<MarkedSequence> {
    let n = inst.tokens.len();
    let marked_len = n + 6;
    if marked_len > max_len {
        return Err(Error::Data(format!(
            "sequence too long: {marked_len} marked tokens exceeds max length {max_len}"
        )));
    }
    let (head, tail) = (inst.head, inst.tail);
    let mut ids = Vec::with_capacity(marked_len);
    let (mut h_index, mut t_index) = (0, 0);
    ids.push(vocab::CLS);
    for b in 0..=n {
        // Close spans ending here (innermost first), then open spans starting here.
        let tail_inner = tail.start >= head.start;
        let closes: [(bool, u32); 2] = if tail_inner {
            [(tail.end == b, vocab::T_SEP), (head.end == b, vocab::H_SEP)]
        } else {
            [(head.end == b, vocab::H_SEP), (tail.end == b, vocab::T_SEP)]
        };
        for (hit, id) in closes {
            if hit {
                ids.push(id);
            }
        }
        if head.start == b {
            h_index = ids.len();
            ids.push(vocab::H_CLS);
        }
        if tail.start == b {
            t_index = ids.len();
            ids.push(vocab::T_CLS);
        }
        if b < n {
            ids.push(vocab.id(&inst.tokens[b]));
        }
    }
    ids.push(vocab::SEP);
    Ok(MarkedSequence { ids, h_index, t_index })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>, eps: f64) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + eps).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * g + b;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns dx; accumulates dg, db.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let mean_dh = dh.sum() / d;
        let mean_dhx = dh.dot(&xh) / d;
        let inv = cache.inv_std[r];
        let mut out = dx.row_mut(r);
        for c in 0..dh.len() {
            out[c] = inv * (dh[c] - mean_dh - xh[c] * mean_dhx);
        }
    }
    dx
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct LayerCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LayerNormCache,
    b: Array2<f64>,
    u: Array2<f64>,
    gact: Array2<f64>,
}

/// Activations retained for the backward pass of one sequence.
pub struct ForwardCache {
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    lnf: LayerNormCache,
    hidden: Array2<f64>,
}

impl ForwardCache {
    /// Final hidden states, one row per position.
    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }

    pub fn into_hidden(self) -> Array2<f64> {
        self.hidden
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

fn layer_forward(p: &LayerParams, x: Array2<f64>, heads: usize, eps: f64) -> (Array2<f64>, LayerCache) {
    let (a, ln1) = layer_norm(&x, &p.ln1_g, &p.ln1_b, eps);
    let q = a.dot(&p.wq) + &p.bq;
    let k = a.dot(&p.wk) + &p.bk;
    let v = a.dot(&p.wv) + &p.bv;
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut scores);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let h_mid = x + &ctx.dot(&p.wo) + &p.bo;
    let (b, ln2) = layer_norm(&h_mid, &p.ln2_g, &p.ln2_b, eps);
    let u = b.dot(&p.w1) + &p.b1;
    let gact = u.mapv(gelu);
    let out = &h_mid + &gact.dot(&p.w2) + &p.b2;
    let cache = LayerCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        b,
        u,
        gact,
    };
    (out, cache)
}

fn layer_backward(p: &LayerParams, c: &LayerCache, dout: Array2<f64>, heads: usize, g: &mut LayerParams) -> Array2<f64> {
    // Feed-forward residual branch.
    g.w2 += &c.gact.t().dot(&dout);
    g.b2 += &dout.sum_axis(Axis(0)).insert_axis(Axis(0));
    let mut du = dout.dot(&p.w2.t());
    du.zip_mut_with(&c.u, |d, &u| *d *= gelu_grad(u));
    g.w1 += &c.b.t().dot(&du);
    g.b1 += &du.sum_axis(Axis(0)).insert_axis(Axis(0));
    let db = du.dot(&p.w1.t());
    let dh_mid = dout + layer_norm_backward(&db, &c.ln2, &p.ln2_g, &mut g.ln2_g, &mut g.ln2_b);

    // Attention residual branch.
    g.wo += &c.ctx.t().dot(&dh_mid);
    g.bo += &dh_mid.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dctx = dh_mid.dot(&p.wo.t());
    let d = dctx.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(dctx.raw_dim());
    let mut dk = Array2::zeros(dctx.raw_dim());
    let mut dv = Array2::zeros(dctx.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs = &c.probs[h];
        let dctx_h = dctx.slice(cols);
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let dprobs = dctx_h.dot(&c.v.slice(cols).t());
        let mut dscores = dprobs;
        for (mut row, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
            let dot = row.dot(&prow);
            row.zip_mut_with(&prow, |ds, &pr| *ds = pr * (*ds - dot));
        }
        dscores.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&dscores.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&dscores.t().dot(&c.q.slice(cols)));
    }
    g.wq += &c.a.t().dot(&dq);
    g.bq += &dq.sum_axis(Axis(0)).insert_axis(Axis(0));
    g.wk += &c.a.t().dot(&dk);
    g.bk += &dk.sum_axis(Axis(0)).insert_axis(Axis(0));
    g.wv += &c.a.t().dot(&dv);
    g.bv += &dv.sum_axis(Axis(0)).insert_axis(Axis(0));
    let da = dq.dot(&p.wq.t()) + dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    dh_mid + layer_norm_backward(&da, &c.ln1, &p.ln1_g, &mut g.ln1_g, &mut g.ln1_b)
}

fn check_ids(params: &EncoderParameters, ids: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(Error::Data("empty sequence".into()));
    }
    if ids.len() > cfg.max_len {
        return Err(Error::Data(format!(
            "sequence too long: {} exceeds max length {}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Forward pass retaining activations.
pub fn forward(params: &EncoderParameters, ids: &[u32]) -> Result<ForwardCache> {
    check_ids(params, ids)?;
    let cfg = &params.config;
    let mut x = Array2::zeros((ids.len(), cfg.d_model));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = x.row_mut(t);
        row += &params.tok_emb.row(id as usize);
        row += &params.pos_emb.row(t);
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let (out, cache) = layer_forward(lp, x, cfg.heads, cfg.ln_eps);
        layers.push(cache);
        x = out;
    }
    let (hidden, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b, cfg.ln_eps);
    Ok(ForwardCache {
        ids: ids.to_vec(),
        layers,
        lnf,
        hidden,
    })
}

/// Hidden states (length x d).
pub fn encode(params: &EncoderParameters, seq: &MarkedSequence) -> Result<Array2<f64>> {
    Ok(forward(params, &seq.ids)?.into_hidden())
}

/// Accumulates into `grads` the parameter gradient given dL/d(hidden).
pub fn backward(params: &EncoderParameters, cache: &ForwardCache, d_hidden: &Array2<f64>, grads: &mut EncoderParameters) {
    let heads = params.config.heads;
    let mut dx = layer_norm_backward(d_hidden, &cache.lnf, &params.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);
    for (l, lc) in cache.layers.iter().enumerate().rev() {
        dx = layer_backward(&params.layers[l], lc, dx, heads, &mut grads.layers[l]);
    }
    for (t, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(t);
        let mut tok = grads.tok_emb.row_mut(id as usize);
        tok += &row;
        let mut pos = grads.pos_emb.row_mut(t);
        pos += &row;
    }
}

/// `h[h_index] ⊕ h[t_index]`.
pub fn representation_from_hidden(hidden: &Array2<f64>, seq: &MarkedSequence) -> Array1<f64> {
    let d = hidden.ncols();
    let mut x = Array1::zeros(2 * d);
    x.slice_mut(s![..d]).assign(&hidden.row(seq.h_index));
    x.slice_mut(s![d..]).assign(&hidden.row(seq.t_index));
    x
}

pub fn instance_representation(params: &EncoderParameters, seq: &MarkedSequence) -> Result<Array1<f64>> {
    Ok(representation_from_hidden(&encode(params, seq)?, seq))
}

/// Scatters a representation gradient onto the two marker rows.
pub fn representation_grad_to_hidden(d_rep: ArrayView1<f64>, seq: &MarkedSequence, len: usize, d: usize) -> Array2<f64> {
    let mut dh = Array2::zeros((len, d));
    {
        let mut row = dh.row_mut(seq.h_index);
        row += &d_rep.slice(s![..d]);
    }
    let mut row = dh.row_mut(seq.t_index);
    row += &d_rep.slice(s![d..]);
    dh
}

pub fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.mapv(|z| z - lse)
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|z| (z - max).exp());
    let sum = e.sum();
    e / sum
}

/// Classifier logits over the label set for one marked sequence.
pub fn classifier_logits(params: &EncoderParameters, seq: &MarkedSequence) -> Result<Array1<f64>> {
    let x = instance_representation(params, seq)?;
    Ok(x.dot(&params.cls_w) + params.cls_b.row(0))
}

/// Cross-entropy of one labeled sequence; accumulates `weight`-scaled
/// gradients into `grads`.
pub fn classifier_loss_and_grad(
    params: &EncoderParameters,
    seq: &MarkedSequence,
    label: usize,
    weight: f64,
    grads: &mut EncoderParameters,
) -> Result<f64> {
    if label >= params.config.num_labels {
        return Err(Error::Data(format!("label index {label} out of range")));
    }
    let cache = forward(params, &seq.ids)?;
    let x = representation_from_hidden(cache.hidden(), seq);
    let logits = x.dot(&params.cls_w) + params.cls_b.row(0);
    let logp = log_softmax(logits.view());
    let loss = -logp[label];
    let mut dlogits = logp.mapv(f64::exp);
    dlogits[label] -= 1.0;
    dlogits.mapv_inplace(|v| v * weight);
    grads.cls_w += &x
        .view()
        .insert_axis(Axis(1))
        .dot(&dlogits.view().insert_axis(Axis(0)));
    grads.cls_b += &dlogits.view().insert_axis(Axis(0));
    let dx = params.cls_w.dot(&dlogits);
    let d = params.config.d_model;
    let dh = representation_grad_to_hidden(dx.view(), seq, seq.len(), d);
    backward(params, &cache, &dh, grads);
    Ok(loss)
}

/// A masked input with its prediction targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub ids: Vec<u32>,
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

fn mlm_check(params: &EncoderParameters, ex: &MaskedExample) -> Result<()> {
    if ex.positions.len() != ex.targets.len() {
        return Err(Error::Data("mask positions and targets differ in length".into()));
    }
    if ex.positions.iter().any(|&p| p >= ex.ids.len()) {
        return Err(Error::Data("mask position out of range".into()));
    }
    if ex.targets.iter().any(|&t| t as usize >= params.config.vocab_size) {
        return Err(Error::Data("mask target out of range".into()));
    }
    Ok(())
}

/// Summed cross-entropy over the targets of one example; accumulates
/// `weight`-scaled gradients. Returns `(sum, count)`.
pub fn mlm_loss_and_grad(
    params: &EncoderParameters,
    ex: &MaskedExample,
    weight: f64,
    grads: Option<&mut EncoderParameters>,
) -> Result<(f64, usize)> {
    mlm_check(params, ex)?;
    if ex.positions.is_empty() {
        return Ok((0.0, 0));
    }
    let cache = forward(params, &ex.ids)?;
    let hidden = cache.hidden();
    let d = params.config.d_model;
    let mut total = 0.0;
    let mut dhidden = Array2::zeros(hidden.raw_dim());
    let mut grads = grads;
    for (&pos, &target) in ex.positions.iter().zip(&ex.targets) {
        let h = hidden.row(pos);
        let logits = h.dot(&params.mlm_w) + params.mlm_b.row(0);
        let logp = log_softmax(logits.view());
        total -= logp[target as usize];
        if let Some(g) = grads.as_deref_mut() {
            let mut dlogits = logp.mapv(f64::exp);
            dlogits[target as usize] -= 1.0;
            dlogits.mapv_inplace(|v| v * weight);
            g.mlm_w += &h.insert_axis(Axis(1)).dot(&dlogits.view().insert_axis(Axis(0)));
            g.mlm_b += &dlogits.view().insert_axis(Axis(0));
            let mut row = dhidden.row_mut(pos);
            row += &params.mlm_w.dot(&dlogits);
        }
    }
    if let Some(g) = grads {
        debug_assert_eq!(dhidden.ncols(), d);
        backward(params, &cache, &dhidden, g);
    }
    Ok((total, ex.positions.len()))
}

/// Mean cross-entropy over the target positions; 0 when there are none.
pub fn mlm_forward(params: &EncoderParameters, ex: &MaskedExample) -> Result<f64> {
    let (sum, n) = mlm_loss_and_grad(params, ex, 1.0, None)?;
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
