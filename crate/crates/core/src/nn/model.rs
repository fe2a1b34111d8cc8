//! Denoiser forward pass and its hand-derived reverse pass.
//!
//! Activations are kept as `(records * tokens) x width` matrices so the
//! position-wise maps run as one GEMM per batch. Per block:
//!
//! ```text
//! z'  = z + E_pos + E_time(t)
//! z'' = z' + Wo · LinAttn(LN1(z'))
//! z   = z'' + FFN(LN2(z''))
//! ```
//!
//! followed by a final layer norm (the guidance latent) and a `D -> K` head.
//! Attention projects keys and values along the token axis from `N` down to
//! `P` before the softmax, so each head scores an `N x P` matrix.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::config::{DenoiserConfig, HeadKind, TimeInjection};
use super::ops::{
    affine, affine_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, sigmoid, softmax_in_place,
    softmax_backward_row, softplus, LnCache,
};
use super::params::{DenoiserParams, LayerSlots, PosSlots};
use crate::diffusion::{CategoricalField, Tokens};
use crate::error::{Error, Result};

/// Sinusoidal embedding: component `2i` is `sin(t ω_i)`, `2i+1` is
/// `cos(t ω_i)`, with `ω_i = 10000^(-2i/D)`.
pub(crate) fn sinusoid(t: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|c| {
            let i = c / 2;
            let omega = 10000f64.powf(-2.0 * i as f64 / width as f64);
            if c % 2 == 0 {
                (t * omega).sin()
            } else {
                (t * omega).cos()
            }
        })
        .collect()
}

/// Sinusoidal time embedding for step `1 <= t <= steps`.
pub fn time_embedding(t: usize, width: usize, steps: usize) -> Result<Vec<f64>> {
    if t < 1 || t > steps {
        return Err(Error::StepOutOfRange { t, lo: 1, hi: steps });
    }
    Ok(sinusoid(t as f64, width))
}

/// View of the output head, usable on any latent with the model's layout.
pub struct Head<'a> {
    w: ArrayView2<'a, f64>,
    b: ArrayView2<'a, f64>,
    per_token: bool,
    width: usize,
    categories: usize,
}

impl<'a> Head<'a> {
    pub fn new(params: &'a DenoiserParams) -> Self {
        let cfg = params.config();
        let slots = params.slots();
        Head {
            w: params.mat(slots.head_w),
            b: params.mat(slots.head_b),
            per_token: cfg.head == HeadKind::PerToken,
            width: cfg.width,
            categories: cfg.categories,
        }
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    fn weights(&self, token: usize) -> (ArrayView2<'_, f64>, ndarray::ArrayView1<'_, f64>) {
        if self.per_token {
            let d = self.width;
            (self.w.slice(s![token * d..(token + 1) * d, ..]), self.b.row(token))
        } else {
            (self.w.view(), self.b.row(0))
        }
    }

    /// Logits for one record's latent (`tokens x width`).
    pub fn logits(&self, latent: ArrayView2<f64>) -> Array2<f64> {
        if self.per_token {
            let mut out = Array2::zeros((latent.nrows(), self.categories));
            for (i, (mut o, z)) in out.rows_mut().into_iter().zip(latent.rows()).enumerate() {
                let (w, b) = self.weights(i);
                o.assign(&(z.dot(&w) + b));
            }
            out
        } else {
            affine(latent, self.w, self.b.row(0))
        }
    }

    /// Row-wise softmax of [`Head::logits`].
    pub fn probs(&self, latent: ArrayView2<f64>) -> Array2<f64> {
        let mut p = self.logits(latent);
        for mut row in p.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous"));
        }
        p
    }

    /// Pull a logit gradient back to the latent of one record.
    pub fn latent_grad(&self, dlogits: ArrayView2<f64>) -> Array2<f64> {
        if self.per_token {
            let mut out = Array2::zeros((dlogits.nrows(), self.width));
            for (i, (mut o, g)) in out.rows_mut().into_iter().zip(dlogits.rows()).enumerate() {
                let (w, _) = self.weights(i);
                o.assign(&w.dot(&g));
            }
            out
        } else {
            dlogits.dot(&self.w.t())
        }
    }
}

struct TimeCache {
    s: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Length-projected keys and values, one `P x D` matrix per record.
    kt: Vec<Array2<f64>>,
    vt: Vec<Array2<f64>>,
    /// Attention weights, one `N x P` matrix per (record, head).
    attn: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    f_pre: Array2<f64>,
    f: Array2<f64>,
}

struct Cache {
    x: Tokens,
    time: Vec<TimeCache>,
    layers: Vec<LayerCache>,
    lnf: LnCache,
}

/// Output of [`forward`].
pub struct ForwardTrace {
    /// `p(x̂_0 | x_t)` per record and token.
    pub probs: CategoricalField,
    /// Final-layer latent fed to the head, `(records * tokens) x width`.
    pub latent: Array2<f64>,
    /// Multiply-adds spent in attention along the token axis.
    pub attention_macs: u64,
    /// Shape of one head's score matrix (`tokens x proj_dim`).
    pub score_shape: (usize, usize),
    cache: Option<Cache>,
}

impl ForwardTrace {
    /// Latent of one record, `tokens x width`.
    pub fn record_latent(&self, r: usize) -> ArrayView2<'_, f64> {
        let n = self.probs.n_tokens();
        self.latent.slice(s![r * n..(r + 1) * n, ..])
    }
}

fn check_input(cfg: &DenoiserConfig, x: &Tokens, ts: &[usize]) -> Result<()> {
    if x.n_tokens() != cfg.n_tokens || x.categories() != cfg.categories {
        return Err(Error::ShapeMismatch(format!(
            "tokens {}x{} vs model {}x{}",
            x.n_tokens(),
            x.categories(),
            cfg.n_tokens,
            cfg.categories
        )));
    }
    if ts.len() != x.n_records() {
        return Err(Error::ShapeMismatch(format!(
            "{} steps for {} records",
            ts.len(),
            x.n_records()
        )));
    }
    Ok(())
}

/// Per-position additive embedding. `Category` tables are indexed by token
/// value, so they come back as a full `(records * tokens) x width` matrix.
enum PosAdd {
    PerPosition(Array2<f64>),
    PerToken(Array2<f64>),
}

fn positional(params: &DenoiserParams, x: &Tokens) -> PosAdd {
    let cfg = params.config();
    let (n, d) = (cfg.n_tokens, cfg.width);
    match &params.slots().pos {
        PosSlots::Full(slot) => PosAdd::PerPosition(params.mat(*slot).to_owned()),
        PosSlots::Axial { rows, cols, n_cols } => {
            let (rt, ct) = (params.mat(*rows), params.mat(*cols));
            let mut table = Array2::zeros((n, d));
            for (i, mut row) in table.rows_mut().into_iter().enumerate() {
                row.assign(&(&rt.row(i / n_cols) + &ct.row(i % n_cols)));
            }
            PosAdd::PerPosition(table)
        }
        PosSlots::Category(slot) => {
            let table = params.mat(*slot);
            let mut out = Array2::zeros((x.cats().len(), d));
            for (mut row, &c) in out.rows_mut().into_iter().zip(x.cats()) {
                row.assign(&table.row(c));
            }
            PosAdd::PerToken(out)
        }
    }
}

fn injects_at(cfg: &DenoiserConfig, layer: usize) -> Option<usize> {
    match cfg.time_injection {
        TimeInjection::PerLayer => Some(layer),
        TimeInjection::InputOnly => (layer == 0).then_some(0),
    }
}

/// Run the denoiser on `x_t` with every record at step `t`.
pub fn forward(params: &DenoiserParams, x_t: &Tokens, t: usize) -> Result<ForwardTrace> {
    forward_steps(params, x_t, &vec![t; x_t.n_records()])
}

/// Run the denoiser with a step per record, keeping what backward needs.
pub fn forward_steps(params: &DenoiserParams, x_t: &Tokens, ts: &[usize]) -> Result<ForwardTrace> {
    forward_impl(params, x_t, ts, true)
}

/// Inference-only forward pass: no backward cache is retained.
pub fn predict(params: &DenoiserParams, x_t: &Tokens, t: usize) -> Result<ForwardTrace> {
    forward_impl(params, x_t, &vec![t; x_t.n_records()], false)
}

/// [`predict`] with a step per record.
pub fn predict_steps(params: &DenoiserParams, x_t: &Tokens, ts: &[usize]) -> Result<ForwardTrace> {
    forward_impl(params, x_t, ts, false)
}

fn forward_impl(params: &DenoiserParams, x: &Tokens, ts: &[usize], keep: bool) -> Result<ForwardTrace> {
    let cfg = params.config();
    check_input(cfg, x, ts)?;
    let slots = params.slots();
    let (bsz, n, d, p, h) = (x.n_records(), cfg.n_tokens, cfg.width, cfg.proj_dim, cfg.heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // token embedding
    let emb = params.mat(slots.token_emb);
    let mut z = Array2::zeros((bsz * n, d));
    for (mut row, &c) in z.rows_mut().into_iter().zip(x.cats()) {
        row.assign(&emb.row(c));
    }
    let pos = positional(params, x);

    // time embeddings through their MLPs
    let mut s = Array2::zeros((bsz, d));
    for (mut row, &t) in s.rows_mut().into_iter().zip(ts) {
        row.assign(&ndarray::Array1::from(sinusoid(t as f64, d)));
    }
    let mut time_caches = Vec::new();
    let mut time_out = Vec::new();
    for ts_slots in &slots.time {
        let h_pre = affine(s.view(), params.mat(ts_slots.w1), params.vec(ts_slots.b1));
        let hidden = h_pre.mapv(softplus);
        let e = affine(hidden.view(), params.mat(ts_slots.w2), params.vec(ts_slots.b2));
        time_out.push(e);
        if keep {
            time_caches.push(TimeCache {
                s: s.clone(),
                h_pre,
                h: hidden,
            });
        }
    }

    let mut macs = 0u64;
    let mut layer_caches = Vec::new();
    for (l, ls) in slots.layers.iter().enumerate() {
        if let Some(m) = injects_at(cfg, l) {
            add_embeddings(&mut z, &pos, &time_out[m], n);
        }
        let (a, ln1) = layer_norm(z.view(), params.vec(ls.ln1_g), params.vec(ls.ln1_b), cfg.ln_eps);
        let q = affine(a.view(), params.mat(ls.wq), params.vec(ls.bq));
        let k = affine(a.view(), params.mat(ls.wk), params.vec(ls.bk));
        let v = affine(a.view(), params.mat(ls.wv), params.vec(ls.bv));
        let (ek, ev) = (params.mat(ls.proj_k), params.mat(ls.proj_v));

        let mut o = Array2::zeros((bsz * n, d));
        let mut kts = Vec::new();
        let mut vts = Vec::new();
        let mut attns = Vec::new();
        for r in 0..bsz {
            let rows = s![r * n..(r + 1) * n, ..];
            let kt = ek.t().dot(&k.slice(rows));
            let vt = ev.t().dot(&v.slice(rows));
            macs += 2 * (p * n * d) as u64;
            let q_r = q.slice(rows);
            for head in 0..h {
                let hs = s![.., head * dh..(head + 1) * dh];
                let mut scores = q_r.slice(hs).dot(&kt.slice(hs).t());
                scores *= scale;
                for mut row in scores.rows_mut() {
                    softmax_in_place(row.as_slice_mut().expect("contiguous"));
                }
                let out = scores.dot(&vt.slice(hs));
                macs += 2 * (n * p * dh) as u64;
                o.slice_mut(s![r * n..(r + 1) * n, head * dh..(head + 1) * dh]).assign(&out);
                if keep {
                    attns.push(scores);
                }
            }
            if keep {
                kts.push(kt);
                vts.push(vt);
            }
        }
        let attn_out = affine(o.view(), params.mat(ls.wo), params.vec(ls.bo));
        z += &attn_out;

        let (b, ln2) = layer_norm(z.view(), params.vec(ls.ln2_g), params.vec(ls.ln2_b), cfg.ln_eps);
        let f_pre = affine(b.view(), params.mat(ls.ff_w1), params.vec(ls.ff_b1));
        let f = f_pre.mapv(gelu);
        let g = affine(f.view(), params.mat(ls.ff_w2), params.vec(ls.ff_b2));
        z += &g;

        if keep {
            layer_caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                kt: kts,
                vt: vts,
                attn: attns,
                o,
                ln2,
                b,
                f_pre,
                f,
            });
        }
    }

    let (latent, lnf) = layer_norm(z.view(), params.vec(slots.lnf_g), params.vec(slots.lnf_b), cfg.ln_eps);
    if latent.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("denoiser latent"));
    }
    let head = Head::new(params);
    let mut probs: Vec<f64> = Vec::with_capacity(bsz * n * cfg.categories);
    for r in 0..bsz {
        let pr = head.probs(latent.slice(s![r * n..(r + 1) * n, ..]));
        probs.extend(pr.iter());
    }
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation("denoiser output"));
    }
    let probs = CategoricalField::new(bsz, n, cfg.categories, probs)?;

    let cache = keep.then(|| Cache {
        x: x.clone(),
        time: time_caches,
        layers: layer_caches,
        lnf,
    });
    Ok(ForwardTrace {
        probs,
        latent,
        attention_macs: macs,
        score_shape: (n, p),
        cache,
    })
}

fn add_embeddings(z: &mut Array2<f64>, pos: &PosAdd, time: &Array2<f64>, n: usize) {
    let bsz = time.nrows();
    for r in 0..bsz {
        let mut block = z.slice_mut(s![r * n..(r + 1) * n, ..]);
        match pos {
            PosAdd::PerPosition(table) => block += table,
            PosAdd::PerToken(all) => block += &all.slice(s![r * n..(r + 1) * n, ..]),
        }
        block += &time.row(r);
    }
}

/// Reverse pass: given `∂loss/∂logits` (`(records * tokens) x K`), return
/// the gradient of the loss with respect to every parameter.
pub fn backward(params: &DenoiserParams, trace: &ForwardTrace, dlogits: ArrayView2<f64>) -> Result<DenoiserParams> {
    let cache = trace
        .cache
        .as_ref()
        .ok_or_else(|| Error::ShapeMismatch("trace was produced without a backward cache".into()))?;
    let cfg = params.config();
    let slots = params.slots().clone();
    let x = &cache.x;
    let (bsz, n, d, h) = (x.n_records(), cfg.n_tokens, cfg.width, cfg.heads);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    if dlogits.dim() != (bsz * n, cfg.categories) {
        return Err(Error::ShapeMismatch(format!(
            "logit gradient {:?}, expected {:?}",
            dlogits.dim(),
            (bsz * n, cfg.categories)
        )));
    }
    let mut grad = params.zeros_like();

    // head
    let mut dlatent = Array2::zeros((bsz * n, d));
    match cfg.head {
        HeadKind::Shared => {
            let hw = params.mat(slots.head_w);
            let dx = {
                let dw_slot = slots.head_w;
                let mut dw = grad.mat_mut(dw_slot).to_owned();
                let mut db = grad.vec_mut(slots.head_b).to_owned();
                let dx = affine_backward(trace.latent.view(), hw, dlogits, dw.view_mut(), db.view_mut());
                grad.mat_mut(dw_slot).assign(&dw);
                grad.vec_mut(slots.head_b).assign(&db);
                dx
            };
            dlatent.assign(&dx);
        }
        HeadKind::PerToken => {
            let hw = params.mat(slots.head_w);
            let mut dw = Array2::<f64>::zeros(hw.raw_dim());
            let mut db = Array2::<f64>::zeros((n, cfg.categories));
            for r in 0..bsz {
                for i in 0..n {
                    let row = r * n + i;
                    let g = dlogits.row(row);
                    let z = trace.latent.row(row);
                    let w_i = hw.slice(s![i * d..(i + 1) * d, ..]);
                    dlatent.row_mut(row).assign(&w_i.dot(&g));
                    let mut dw_i = dw.slice_mut(s![i * d..(i + 1) * d, ..]);
                    for (a, &zv) in z.iter().enumerate() {
                        dw_i.row_mut(a).scaled_add(zv, &g);
                    }
                    db.row_mut(i).scaled_add(1.0, &g);
                }
            }
            grad.mat_mut(slots.head_w).assign(&dw);
            grad.mat_mut(slots.head_b).assign(&db);
        }
    }

    let mut dz = ln_back(&mut grad, params, &cache.lnf, slots.lnf_g, slots.lnf_b, dlatent.view());

    let mut dtime: Vec<Array2<f64>> = (0..slots.time.len()).map(|_| Array2::zeros((bsz, d))).collect();
    let mut dpos_position = Array2::<f64>::zeros((n, d));
    let mut dpos_token = Array2::<f64>::zeros((0, d));
    if matches!(slots.pos, PosSlots::Category(_)) {
        dpos_token = Array2::zeros((bsz * n, d));
    }

    for (l, ls) in slots.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        // feed-forward
        let df = lin_back(&mut grad, params, &lc.f, ls.ff_w2, ls.ff_b2, dz.view());
        let mut dfpre = df;
        ndarray::Zip::from(&mut dfpre).and(&lc.f_pre).for_each(|g, &xv| *g *= gelu_grad(xv));
        let db = lin_back(&mut grad, params, &lc.b, ls.ff_w1, ls.ff_b1, dfpre.view());
        dz += &ln_back(&mut grad, params, &lc.ln2, ls.ln2_g, ls.ln2_b, db.view());

        // attention
        let d_o = lin_back(&mut grad, params, &lc.o, ls.wo, ls.bo, dz.view());
        let (dq, dk, dv) = attention_backward(params, &mut grad, ls, lc, d_o.view(), bsz, n, h, dh, scale);
        let mut da = lin_back(&mut grad, params, &lc.a, ls.wq, ls.bq, dq.view());
        da += &lin_back(&mut grad, params, &lc.a, ls.wk, ls.bk, dk.view());
        da += &lin_back(&mut grad, params, &lc.a, ls.wv, ls.bv, dv.view());
        dz += &ln_back(&mut grad, params, &lc.ln1, ls.ln1_g, ls.ln1_b, da.view());

        if let Some(m) = injects_at(cfg, l) {
            for r in 0..bsz {
                let block = dz.slice(s![r * n..(r + 1) * n, ..]);
                let summed = block.sum_axis(Axis(0));
                dtime[m].row_mut(r).scaled_add(1.0, &summed);
                if dpos_token.nrows() > 0 {
                    dpos_token.slice_mut(s![r * n..(r + 1) * n, ..]).scaled_add(1.0, &block);
                } else {
                    dpos_position += &block;
                }
            }
        }
    }

    // positional tables
    match &slots.pos {
        PosSlots::Full(slot) => grad.mat_mut(*slot).assign(&dpos_position),
        PosSlots::Axial { rows, cols, n_cols } => {
            for i in 0..n {
                let g = dpos_position.row(i);
                grad.mat_mut(*rows).row_mut(i / n_cols).scaled_add(1.0, &g);
                grad.mat_mut(*cols).row_mut(i % n_cols).scaled_add(1.0, &g);
            }
        }
        PosSlots::Category(slot) => {
            for (row, &c) in dpos_token.rows().into_iter().zip(x.cats()) {
                grad.mat_mut(*slot).row_mut(c).scaled_add(1.0, &row);
            }
        }
    }

    // time MLPs
    for (m, tslots) in slots.time.iter().enumerate() {
        let tc = &cache.time[m];
        let dhid = lin_back(&mut grad, params, &tc.h, tslots.w2, tslots.b2, dtime[m].view());
        let mut dhpre = dhid;
        ndarray::Zip::from(&mut dhpre).and(&tc.h_pre).for_each(|g, &xv| *g *= sigmoid(xv));
        // the sinusoid input is not learned; its gradient is dropped
        let _ = lin_back(&mut grad, params, &tc.s, tslots.w1, tslots.b1, dhpre.view());
    }

    // token embedding
    for (row, &c) in dz.rows().into_iter().zip(x.cats()) {
        grad.mat_mut(slots.token_emb).row_mut(c).scaled_add(1.0, &row);
    }

    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    Ok(grad)
}

fn lin_back(
    grad: &mut DenoiserParams,
    params: &DenoiserParams,
    x: &Array2<f64>,
    w: usize,
    b: usize,
    dy: ArrayView2<f64>,
) -> Array2<f64> {
    let mut dw = grad.mat_mut(w).to_owned();
    let mut db = grad.vec_mut(b).to_owned();
    let dx = affine_backward(x.view(), params.mat(w), dy, dw.view_mut(), db.view_mut());
    grad.mat_mut(w).assign(&dw);
    grad.vec_mut(b).assign(&db);
    dx
}

fn ln_back(
    grad: &mut DenoiserParams,
    params: &DenoiserParams,
    cache: &LnCache,
    g: usize,
    b: usize,
    dy: ArrayView2<f64>,
) -> Array2<f64> {
    let mut dg = grad.vec_mut(g).to_owned();
    let mut db = grad.vec_mut(b).to_owned();
    let dx = layer_norm_backward(cache, params.vec(g), dy, dg.view_mut(), db.view_mut());
    grad.vec_mut(g).assign(&dg);
    grad.vec_mut(b).assign(&db);
    dx
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    params: &DenoiserParams,
    grad: &mut DenoiserParams,
    ls: &LayerSlots,
    lc: &LayerCache,
    d_o: ArrayView2<f64>,
    bsz: usize,
    n: usize,
    h: usize,
    dh: usize,
    scale: f64,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = d_o.ncols();
    let (ek, ev) = (params.mat(ls.proj_k), params.mat(ls.proj_v));
    let mut dek = Array2::<f64>::zeros(ek.raw_dim());
    let mut dev = Array2::<f64>::zeros(ev.raw_dim());
    let mut dq = Array2::zeros((bsz * n, d));
    let mut dk = Array2::zeros((bsz * n, d));
    let mut dv = Array2::zeros((bsz * n, d));
    let p = ek.ncols();
    let mut ds_row = vec![0.0; p];
    for r in 0..bsz {
        let rows = s![r * n..(r + 1) * n, ..];
        let (kt, vt) = (&lc.kt[r], &lc.vt[r]);
        let q_r = lc.q.slice(rows);
        let do_r = d_o.slice(rows);
        let mut dkt = Array2::<f64>::zeros((p, d));
        let mut dvt = Array2::<f64>::zeros((p, d));
        for head in 0..h {
            let hs = s![.., head * dh..(head + 1) * dh];
            let attn = &lc.attn[r * h + head];
            let do_h = do_r.slice(hs);
            let da = do_h.dot(&vt.slice(hs).t());
            dvt.slice_mut(hs).assign(&attn.t().dot(&do_h));
            let mut dscores = Array2::<f64>::zeros((n, p));
            for i in 0..n {
                softmax_backward_row(
                    attn.row(i).as_slice().expect("contiguous"),
                    da.row(i).as_slice().expect("contiguous"),
                    &mut ds_row,
                );
                for (o, v) in dscores.row_mut(i).iter_mut().zip(&ds_row) {
                    *o = v * scale;
                }
            }
            dq.slice_mut(s![r * n..(r + 1) * n, head * dh..(head + 1) * dh])
                .assign(&dscores.dot(&kt.slice(hs)));
            dkt.slice_mut(hs).assign(&dscores.t().dot(&q_r.slice(hs)));
        }
        dk.slice_mut(rows).assign(&ek.dot(&dkt));
        dv.slice_mut(rows).assign(&ev.dot(&dvt));
        ndarray::linalg::general_mat_mul(1.0, &lc.k.slice(rows), &dkt.t(), 1.0, &mut dek);
        ndarray::linalg::general_mat_mul(1.0, &lc.v.slice(rows), &dvt.t(), 1.0, &mut dev);
    }
    grad.mat_mut(ls.proj_k).assign(&dek);
    grad.mat_mut(ls.proj_v).assign(&dev);
    (dq, dk, dv)
}
