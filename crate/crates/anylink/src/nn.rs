//! A small BERT-style transformer encoder with hand-written backprop, plus
//! the Adam optimizer and the warmup/decay learning-rate schedule. f64
//! throughout so finite-difference checks are meaningful.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-12;

fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let mut a = Array2::zeros((rows, cols));
    for v in a.iter_mut() {
        // Box-Muller; two uniforms per sample keeps the stream simple.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    a
}

pub fn standard_normal_rows(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Array2<f64> {
    randn(rows, cols, 1.0, rng)
}

/// Parameters of one transformer layer (post-layernorm, GELU feed-forward).
/// Biases and layernorm parameters are stored as 1 x H so the whole model is
/// a uniform collection of rank-2 tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
}

impl LayerParams {
    fn new(hidden: usize, ff: usize, rng: &mut ChaCha20Rng) -> Self {
        let init = 0.02;
        Self {
            wq: randn(hidden, hidden, init, rng),
            bq: Array2::zeros((1, hidden)),
            wk: randn(hidden, hidden, init, rng),
            bk: Array2::zeros((1, hidden)),
            wv: randn(hidden, hidden, init, rng),
            bv: Array2::zeros((1, hidden)),
            wo: randn(hidden, hidden, init, rng),
            bo: Array2::zeros((1, hidden)),
            ln1_g: Array2::ones((1, hidden)),
            ln1_b: Array2::zeros((1, hidden)),
            w1: randn(hidden, ff, init, rng),
            b1: Array2::zeros((1, ff)),
            w2: randn(ff, hidden, init, rng),
            b2: Array2::zeros((1, hidden)),
            ln2_g: Array2::ones((1, hidden)),
            ln2_b: Array2::zeros((1, hidden)),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            wq: z(&self.wq),
            bq: z(&self.bq),
            wk: z(&self.wk),
            bk: z(&self.bk),
            wv: z(&self.wv),
            bv: z(&self.bv),
            wo: z(&self.wo),
            bo: z(&self.bo),
            ln1_g: z(&self.ln1_g),
            ln1_b: z(&self.ln1_b),
            w1: z(&self.w1),
            b1: z(&self.b1),
            w2: z(&self.w2),
            b2: z(&self.b2),
            ln2_g: z(&self.ln2_g),
            ln2_b: z(&self.ln2_b),
        }
    }
}

/// Full encoder parameter set: embedding tables plus the layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    /// Mention-indicator embedding, added to token embeddings inside the
    /// mention span. 1 x H.
    pub indicator: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn new(
        vocab_size: usize,
        max_positions: usize,
        hidden: usize,
        layers: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let init = 0.02;
        Self {
            token_emb: randn(vocab_size, hidden, init, rng),
            pos_emb: randn(max_positions, hidden, init, rng),
            seg_emb: randn(2, hidden, init, rng),
            indicator: randn(1, hidden, init, rng),
            layers: (0..layers).map(|_| LayerParams::new(hidden, 4 * hidden, rng)).collect(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.token_emb.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            token_emb: Array2::zeros(self.token_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            seg_emb: Array2::zeros(self.seg_emb.raw_dim()),
            indicator: Array2::zeros(self.indicator.raw_dim()),
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
        }
    }

    /// Visits every tensor in a fixed, deterministic order.
    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(&mut Array2<f64>)) {
        f(&mut self.token_emb);
        f(&mut self.pos_emb);
        f(&mut self.seg_emb);
        f(&mut self.indicator);
        for l in &mut self.layers {
            f(&mut l.wq);
            f(&mut l.bq);
            f(&mut l.wk);
            f(&mut l.bk);
            f(&mut l.wv);
            f(&mut l.bv);
            f(&mut l.wo);
            f(&mut l.bo);
            f(&mut l.ln1_g);
            f(&mut l.ln1_b);
            f(&mut l.w1);
            f(&mut l.b1);
            f(&mut l.w2);
            f(&mut l.b2);
            f(&mut l.ln2_g);
            f(&mut l.ln2_b);
        }
    }
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// dy -> (dx, dw, db)
fn linear_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dw, db)
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layernorm(x: &Array2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
    let h = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).unwrap();
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / h;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * g + b;
    (y, LayerNormCache { xhat, inv_std })
}

fn layernorm_backward(
    cache: &LayerNormCache,
    g: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let h = dy.ncols() as f64;
    let dg = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * g;
    let sum_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
    let dx = (&dxhat - &(sum_dxhat / h) - &(&cache.xhat * &(sum_dxhat_xhat / h)))
        * &cache.inv_std.view().insert_axis(Axis(1));
    (dx, dg, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}

fn softmax_rows_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let dot = (y * dy).sum_axis(Axis(1)).insert_axis(Axis(1));
    y * &(dy - &dot)
}

struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>, // per head, T x T
    ctx: Array2<f64>,
}

struct LayerCache {
    x: Array2<f64>,
    attn: AttentionCache,
    ln1: LayerNormCache,
    x1: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    ln2: LayerNormCache,
}

pub struct ForwardCache {
    token_ids: Vec<usize>,
    segment_ids: Vec<usize>,
    indicator_span: Option<(usize, usize)>,
    layers: Vec<LayerCache>,
    pub output: Array2<f64>,
}

impl ForwardCache {
    /// Final hidden state of the first ([CLS]) position.
    pub fn cls(&self) -> Array1<f64> {
        self.output.row(0).to_owned()
    }
}

fn attention_forward(x: &Array2<f64>, p: &LayerParams, heads: usize) -> (Array2<f64>, AttentionCache) {
    let hidden = x.ncols();
    let d = hidden / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let q = linear(x, &p.wq, &p.bq);
    let k = linear(x, &p.wk, &p.bk);
    let v = linear(x, &p.wv, &p.bv);
    let t = x.nrows();
    let mut ctx = Array2::zeros((t, hidden));
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * d..(h + 1) * d];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()) * scale;
        let a = softmax_rows(&scores);
        let c = a.dot(&vh);
        ctx.slice_mut(cols).assign(&c);
        attn.push(a);
    }
    let out = linear(&ctx, &p.wo, &p.bo);
    (out, AttentionCache { q, k, v, attn, ctx })
}

fn attention_backward(
    x: &Array2<f64>,
    p: &LayerParams,
    g: &mut LayerParams,
    cache: &AttentionCache,
    heads: usize,
    dout: &Array2<f64>,
) -> Array2<f64> {
    let hidden = x.ncols();
    let d = hidden / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (dctx, dwo, dbo) = linear_backward(&cache.ctx, &p.wo, dout);
    g.wo += &dwo;
    g.bo += &dbo;
    let t = x.nrows();
    let mut dq = Array2::zeros((t, hidden));
    let mut dk = Array2::zeros((t, hidden));
    let mut dv = Array2::zeros((t, hidden));
    for h in 0..heads {
        let cols = s![.., h * d..(h + 1) * d];
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let a = &cache.attn[h];
        let dc = dctx.slice(cols);
        let da = dc.dot(&vh.t());
        let dvh = a.t().dot(&dc);
        let dscores = softmax_rows_backward(a, &da) * scale;
        let dqh = dscores.dot(&kh);
        let dkh = dscores.t().dot(&qh);
        dq.slice_mut(cols).assign(&dqh);
        dk.slice_mut(cols).assign(&dkh);
        dv.slice_mut(cols).assign(&dvh);
    }
    let (dx_q, dwq, dbq) = linear_backward(x, &p.wq, &dq);
    let (dx_k, dwk, dbk) = linear_backward(x, &p.wk, &dk);
    let (dx_v, dwv, dbv) = linear_backward(x, &p.wv, &dv);
    g.wq += &dwq;
    g.bq += &dbq;
    g.wk += &dwk;
    g.bk += &dbk;
    g.wv += &dwv;
    g.bv += &dbv;
    dx_q + dx_k + dx_v
}

fn layer_forward(x: Array2<f64>, p: &LayerParams, heads: usize) -> (Array2<f64>, LayerCache) {
    let (attn_out, attn_cache) = attention_forward(&x, p, heads);
    let (x1, ln1) = layernorm(&(&x + &attn_out), &p.ln1_g, &p.ln1_b);
    let ff_pre = linear(&x1, &p.w1, &p.b1);
    let ff_act = ff_pre.mapv(gelu);
    let ff_out = linear(&ff_act, &p.w2, &p.b2);
    let (out, ln2) = layernorm(&(&x1 + &ff_out), &p.ln2_g, &p.ln2_b);
    let cache = LayerCache {
        x,
        attn: attn_cache,
        ln1,
        x1,
        ff_pre,
        ff_act,
        ln2,
    };
    (out, cache)
}

fn layer_backward(
    p: &LayerParams,
    g: &mut LayerParams,
    cache: &LayerCache,
    heads: usize,
    dout: &Array2<f64>,
) -> Array2<f64> {
    let (dsum2, dg2, db2) = layernorm_backward(&cache.ln2, &p.ln2_g, dout);
    g.ln2_g += &dg2;
    g.ln2_b += &db2;
    // dsum2 flows into both x1 (residual) and the ffn output.
    let (dff_act, dw2, db_2) = linear_backward(&cache.ff_act, &p.w2, &dsum2);
    g.w2 += &dw2;
    g.b2 += &db_2;
    let dff_pre = &dff_act * &cache.ff_pre.mapv(gelu_grad);
    let (dx1_ff, dw1, db_1) = linear_backward(&cache.x1, &p.w1, &dff_pre);
    g.w1 += &dw1;
    g.b1 += &db_1;
    let dx1 = &dsum2 + &dx1_ff;
    let (dsum1, dg1, db1) = layernorm_backward(&cache.ln1, &p.ln1_g, &dx1);
    g.ln1_g += &dg1;
    g.ln1_b += &db1;
    let dx_attn = attention_backward(&cache.x, p, g, &cache.attn, heads, &dsum1);
    dsum1 + dx_attn
}

/// Runs the encoder over token ids. The caller supplies segment ids (0/1) and
/// an optional half-open token range where the mention-indicator embedding is
/// added.
pub fn encoder_forward(
    params: &EncoderParams,
    heads: usize,
    token_ids: &[usize],
    segment_ids: &[usize],
    indicator_span: Option<(usize, usize)>,
) -> ForwardCache {
    assert_eq!(token_ids.len(), segment_ids.len());
    assert!(
        token_ids.len() <= params.pos_emb.nrows(),
        "sequence of {} tokens exceeds {} positions",
        token_ids.len(),
        params.pos_emb.nrows()
    );
    let t = token_ids.len();
    let hidden = params.hidden();
    let mut x = Array2::zeros((t, hidden));
    for (i, (&tok, &seg)) in token_ids.iter().zip(segment_ids).enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&params.token_emb.row(tok));
        row += &params.pos_emb.row(i);
        row += &params.seg_emb.row(seg);
    }
    if let Some((lo, hi)) = indicator_span {
        assert!(lo <= hi && hi <= t, "indicator span out of bounds");
        for i in lo..hi {
            let mut row = x.row_mut(i);
            row += &params.indicator.row(0);
        }
    }
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut cur = x;
    for p in &params.layers {
        let (out, cache) = layer_forward(cur, p, heads);
        layers.push(cache);
        cur = out;
    }
    ForwardCache {
        token_ids: token_ids.to_vec(),
        segment_ids: segment_ids.to_vec(),
        indicator_span,
        layers,
        output: cur,
    }
}

/// Backpropagates a gradient on the final hidden states, accumulating into
/// `grads`. `d_output` rows not involved in the loss should be zero; for a
/// [CLS]-only loss use `d_cls_only`.
pub fn encoder_backward(
    params: &EncoderParams,
    grads: &mut EncoderParams,
    cache: &ForwardCache,
    heads: usize,
    d_output: &Array2<f64>,
) {
    let mut d = d_output.clone();
    for (p, (g, c)) in params
        .layers
        .iter()
        .zip(grads.layers.iter_mut().zip(cache.layers.iter()))
        .rev()
    {
        d = layer_backward(p, g, c, heads, &d);
    }
    for (i, (&tok, &seg)) in cache.token_ids.iter().zip(&cache.segment_ids).enumerate() {
        let row = d.row(i);
        let mut t = grads.token_emb.row_mut(tok);
        t += &row;
        let mut pe = grads.pos_emb.row_mut(i);
        pe += &row;
        let mut se = grads.seg_emb.row_mut(seg);
        se += &row;
    }
    if let Some((lo, hi)) = cache.indicator_span {
        for i in lo..hi {
            let mut ind = grads.indicator.row_mut(0);
            ind += &d.row(i);
        }
    }
}

/// Convenience: gradient arriving only at the [CLS] position.
pub fn d_cls_only(cache: &ForwardCache, d_cls: &Array1<f64>) -> Array2<f64> {
    let mut d = Array2::zeros(cache.output.raw_dim());
    d.row_mut(0).assign(d_cls);
    d
}

/// Linear warmup to `peak_lr` over the first `warmup_steps`, then linear
/// decay to zero at `total_steps`. `Constant` holds `peak_lr` throughout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    WarmupLinearDecay,
    Constant,
}

pub fn learning_rate(
    schedule: LrSchedule,
    peak_lr: f64,
    warmup_steps: usize,
    total_steps: usize,
    step: usize,
) -> f64 {
    match schedule {
        LrSchedule::Constant => peak_lr,
        LrSchedule::WarmupLinearDecay => {
            if warmup_steps > 0 && step < warmup_steps {
                peak_lr * step as f64 / warmup_steps as f64
            } else if total_steps <= warmup_steps {
                peak_lr
            } else {
                let rest = (total_steps - step) as f64 / (total_steps - warmup_steps) as f64;
                peak_lr * rest.max(0.0)
            }
        }
    }
}

/// Adam with state tensors aligned to the model's deterministic visit order.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &mut EncoderParams, extra: usize) -> Self {
        let mut m = Vec::new();
        params.visit_mut(&mut |a: &mut Array2<f64>| m.push(Array2::zeros(a.raw_dim())));
        for _ in 0..extra {
            m.push(Array2::zeros((0, 0)));
        }
        let v = m.clone();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update_one(&mut self, idx: usize, p: &mut Array2<f64>, g: &Array2<f64>, lr: f64) {
        if self.m[idx].raw_dim() != p.raw_dim() {
            self.m[idx] = Array2::zeros(p.raw_dim());
            self.v[idx] = Array2::zeros(p.raw_dim());
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
    }

    /// Applies one step over model params plus any extra tensors (e.g. the
    /// rerank weight vector), in the same order every call.
    pub fn step(
        &mut self,
        params: &mut EncoderParams,
        grads: &EncoderParams,
        extra: &mut [(&mut Array2<f64>, &Array2<f64>)],
        lr: f64,
    ) {
        self.begin_step();
        let mut grad_list: Vec<Array2<f64>> = Vec::new();
        let mut g = grads.clone();
        g.visit_mut(&mut |a: &mut Array2<f64>| grad_list.push(a.clone()));
        let mut idx = 0;
        params.visit_mut(&mut |p: &mut Array2<f64>| {
            let g = &grad_list[idx];
            self.update_one(idx, p, g, lr);
            idx += 1;
        });
        for (p, g) in extra.iter_mut() {
            self.update_one(idx, p, g, lr);
            idx += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_params(vocab: usize) -> EncoderParams {
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        EncoderParams::new(vocab, 32, 8, 2, &mut rng)
    }

    #[test]
    fn forward_shapes() {
        let p = tiny_params(10);
        let cache = encoder_forward(&p, 2, &[2, 5, 6, 3], &[0, 0, 1, 1], Some((1, 2)));
        assert_eq!(cache.output.shape(), &[4, 8]);
        assert_eq!(cache.cls().len(), 8);
    }

    #[test]
    fn zero_indicator_equals_no_indicator() {
        let mut p = tiny_params(10);
        p.indicator.fill(0.0);
        let a = encoder_forward(&p, 2, &[2, 5, 6], &[0, 0, 0], Some((1, 2)));
        let b = encoder_forward(&p, 2, &[2, 5, 6], &[0, 0, 0], None);
        assert_eq!(a.output, b.output);
    }

    #[test]
    fn perturbing_a_token_changes_cls() {
        let p = tiny_params(10);
        let a = encoder_forward(&p, 2, &[2, 5, 6, 3], &[0; 4], None);
        let b = encoder_forward(&p, 2, &[2, 5, 7, 3], &[0; 4], None);
        let diff: f64 = (&a.cls() - &b.cls()).mapv(f64::abs).sum();
        assert!(diff > 1e-8);
    }

    /// Central-difference check of the full backward pass through a scalar
    /// loss on the [CLS] state.
    #[test]
    fn finite_difference_gradients_match() {
        let heads = 2;
        let ids = [2usize, 5, 6, 3, 7];
        let segs = [0usize, 0, 0, 1, 1];
        let span = Some((1, 3));
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let w = standard_normal_rows(1, 8, &mut rng).row(0).to_owned();
        let loss = |p: &EncoderParams| -> f64 {
            let c = encoder_forward(p, heads, &ids, &segs, span);
            c.cls().dot(&w)
        };

        let mut p = tiny_params(10);
        let mut grads = p.zeros_like();
        let cache = encoder_forward(&p, heads, &ids, &segs, span);
        let d = d_cls_only(&cache, &w);
        encoder_backward(&p, &mut grads, &cache, heads, &d);

        let mut analytic: Vec<Array2<f64>> = Vec::new();
        grads.visit_mut(&mut |a: &mut Array2<f64>| analytic.push(a.clone()));

        // Spot-check a handful of coordinates in every tensor.
        let mut tensor_idx = 0;
        let mut max_rel = 0.0f64;
        let h = 1e-4;
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            let dims = analytic[ti].raw_dim();
            let total = dims[0] * dims[1];
            if total == 0 {
                continue;
            }
            for probe in 0..3.min(total) {
                let r = (probe * 7919) % dims[0];
                let c = (probe * 104729) % dims[1];
                let mut idx2 = 0;
                p.visit_mut(&mut |a: &mut Array2<f64>| {
                    if idx2 == ti {
                        a[[r, c]] += h;
                    }
                    idx2 += 1;
                });
                let up = loss(&p);
                idx2 = 0;
                p.visit_mut(&mut |a: &mut Array2<f64>| {
                    if idx2 == ti {
                        a[[r, c]] -= 2.0 * h;
                    }
                    idx2 += 1;
                });
                let down = loss(&p);
                idx2 = 0;
                p.visit_mut(&mut |a: &mut Array2<f64>| {
                    if idx2 == ti {
                        a[[r, c]] += h;
                    }
                    idx2 += 1;
                });
                let numeric = (up - down) / (2.0 * h);
                let exact = analytic[ti][[r, c]];
                // Floor the denominator: tiny gradients (~1e-8) sit below
                // central-difference noise at h=1e-5.
                let denom = exact.abs().max(numeric.abs()).max(1e-6);
                max_rel = max_rel.max((numeric - exact).abs() / denom);
            }
            tensor_idx += 1;
        }
        assert!(tensor_idx > 10);
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn lr_schedule_shape() {
        let peak = 2e-5;
        let (warmup, total) = (10, 100);
        assert_eq!(
            learning_rate(LrSchedule::WarmupLinearDecay, peak, warmup, total, 0),
            0.0
        );
        assert_eq!(
            learning_rate(LrSchedule::WarmupLinearDecay, peak, warmup, total, 10),
            peak
        );
        let last = learning_rate(LrSchedule::WarmupLinearDecay, peak, warmup, total, 99);
        assert!(last <= peak / 10.0);
        assert!(last > 0.0);
        assert_eq!(
            learning_rate(LrSchedule::Constant, peak, warmup, total, 50),
            peak
        );
    }

    #[test]
    fn adam_moves_parameters_toward_lower_loss() {
        let mut p = tiny_params(6);
        let mut opt = Adam::new(&mut p, 0);
        let ids = [2usize, 4, 5];
        let segs = [0usize; 3];
        let mut losses = Vec::new();
        for _ in 0..30 {
            let cache = encoder_forward(&p, 2, &ids, &segs, None);
            // Drive the first CLS coordinate to 3.0.
            let target = 3.0;
            let diff = cache.cls()[0] - target;
            losses.push(diff * diff);
            let mut d_cls = Array1::zeros(8);
            d_cls[0] = 2.0 * diff;
            let d = d_cls_only(&cache, &d_cls);
            let mut grads = p.zeros_like();
            encoder_backward(&p, &mut grads, &cache, 2, &d);
            opt.step(&mut p, &grads, &mut [], 0.01);
        }
        assert!(losses.last().unwrap() < &(losses[0] * 0.1));
    }
}
