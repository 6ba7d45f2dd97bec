use serde::{Deserialize, Serialize};

use super::{Linear, ModelWeights, Norm};
use crate::adapter::{MaterializedAdapters, SiteWeights};
use crate::error::{Error, Result};
use crate::linalg::{add_col_sums, gelu, gelu_grad, matmul, softmax_in_place};
use crate::text::TextEmbedding;
use crate::tokenizer::TokenGrid;

const LN_EPS: f64 = 1e-5;

/// `positions × K` logits, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitGrid {
    pub positions: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl LogitGrid {
    pub fn zeros(positions: usize, vocab: usize) -> Self {
        Self {
            positions,
            vocab,
            data: vec![0.0; positions * vocab],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

struct NormCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn norm_forward(x: &[f64], n: &Norm, d: usize) -> (Vec<f64>, NormCache) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for i in 0..d {
            let h = (row[i] - mean) * s;
            xhat[r * d + i] = h;
            y[r * d + i] = h * n.gain[i] + n.bias[i];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Returns dx; accumulates parameter gradients when `grad` is given.
fn norm_backward(
    dy: &[f64],
    cache: &NormCache,
    n: &Norm,
    grad: Option<&mut Norm>,
    d: usize,
) -> Vec<f64> {
    let rows = dy.len() / d;
    if let Some(g) = grad {
        for r in 0..rows {
            for i in 0..d {
                g.gain[i] += dy[r * d + i] * cache.xhat[r * d + i];
                g.bias[i] += dy[r * d + i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        for i in 0..d {
            dxhat[i] = dy[r * d + i] * n.gain[i];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for i in 0..d {
            dx[r * d + i] = cache.rstd[r] * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

/// Gradient of `y = x·w + b`: returns dx and accumulates dw, db.
fn linear_backward(
    dy: &[f64],
    x: &[f64],
    l: &Linear,
    grad: Option<&mut Linear>,
    rows: usize,
) -> Vec<f64> {
    if let Some(g) = grad {
        matmul(
            x, true, dy, false, &mut g.w, l.fan_in, rows, l.fan_out, true,
        );
        add_col_sums(dy, &mut g.b);
    }
    let mut dx = vec![0.0; rows * l.fan_in];
    matmul(
        dy, false, &l.w, true, &mut dx, rows, l.fan_out, l.fan_in, false,
    );
    dx
}

fn split_heads(x: &[f64], rows: usize, d: usize, heads: usize) -> Vec<Vec<f64>> {
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(rows * dh);
            for r in 0..rows {
                out.extend_from_slice(&x[r * d + h * dh..r * d + (h + 1) * dh]);
            }
            out
        })
        .collect()
}

fn merge_heads(hs: &[Vec<f64>], rows: usize, d: usize) -> Vec<f64> {
    let dh = d / hs.len();
    let mut out = vec![0.0; rows * d];
    for (h, x) in hs.iter().enumerate() {
        for r in 0..rows {
            out[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&x[r * dh..(r + 1) * dh]);
        }
    }
    out
}

/// One head of scaled dot-product attention: `n` queries over `m` keys.
fn attend(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, dh: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; n * m];
    matmul(q, false, k, true, &mut probs, n, dh, m, false);
    let scale = 1.0 / (dh as f64).sqrt();
    for row in probs.chunks_exact_mut(m) {
        row.iter_mut().for_each(|s| *s *= scale);
        softmax_in_place(row);
    }
    let mut out = vec![0.0; n * dh];
    matmul(&probs, false, v, false, &mut out, n, m, dh, false);
    (probs, out)
}

#[allow(clippy::too_many_arguments)]
fn attend_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    n: usize,
    m: usize,
    dh: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dp = vec![0.0; n * m];
    matmul(dout, false, v, true, &mut dp, n, dh, m, false);
    let mut dv = vec![0.0; m * dh];
    matmul(probs, true, dout, false, &mut dv, m, n, dh, false);
    let scale = 1.0 / (dh as f64).sqrt();
    for i in 0..n {
        let p = &probs[i * m..(i + 1) * m];
        let row = &mut dp[i * m..(i + 1) * m];
        let s: f64 = row.iter().zip(p).map(|(a, b)| a * b).sum();
        for (r, pv) in row.iter_mut().zip(p) {
            *r = pv * (*r - s) * scale;
        }
    }
    let mut dq = vec![0.0; n * dh];
    matmul(&dp, false, k, false, &mut dq, n, m, dh, false);
    let mut dk = vec![0.0; m * dh];
    matmul(&dp, true, q, false, &mut dk, m, n, dh, false);
    (dq, dk, dv)
}

struct AdapterCache {
    x: Vec<f64>,
    z: Vec<f64>,
    act: Vec<f64>,
}

fn adapter_forward(
    x: &mut [f64],
    site: &SiteWeights,
    rows: usize,
    d: usize,
    h: usize,
) -> AdapterCache {
    let mut z = vec![0.0; rows * h];
    matmul(x, false, &site.wd, false, &mut z, rows, d, h, false);
    let act: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
    let input = x.to_vec();
    matmul(&act, false, &site.wu, false, x, rows, h, d, true);
    AdapterCache { x: input, z, act }
}

/// Turns `dx` (gradient w.r.t. the adapter output) into the gradient w.r.t.
/// its input, accumulating weight gradients.
fn adapter_backward(
    dx: &mut [f64],
    c: &AdapterCache,
    site: &SiteWeights,
    grad: Option<&mut SiteWeights>,
    rows: usize,
    d: usize,
    h: usize,
) {
    let mut dact = vec![0.0; rows * h];
    matmul(dx, false, &site.wu, true, &mut dact, rows, d, h, false);
    for (g, z) in dact.iter_mut().zip(&c.z) {
        *g *= gelu_grad(*z);
    }
    if let Some(g) = grad {
        matmul(&c.act, true, dx, false, &mut g.wu, h, rows, d, true);
        matmul(&c.x, true, &dact, false, &mut g.wd, d, rows, h, true);
    }
    matmul(&dact, false, &site.wd, true, dx, rows, h, d, true);
}

struct BlockCache {
    norm_self: NormCache,
    a_self: Vec<f64>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    att: Vec<f64>,
    norm_cross: NormCache,
    a_cross: Vec<f64>,
    cq: Vec<Vec<f64>>,
    ck: Vec<Vec<f64>>,
    cv: Vec<Vec<f64>>,
    cprobs: Vec<Vec<f64>>,
    catt: Vec<f64>,
    adapter_cross: Option<AdapterCache>,
    norm_mlp: NormCache,
    a_mlp: Vec<f64>,
    pre_act: Vec<f64>,
    hidden: Vec<f64>,
    adapter_mlp: Option<AdapterCache>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    tokens: Vec<usize>,
    text: Vec<f64>,
    text_rows: usize,
    blocks: Vec<BlockCache>,
    norm_out: NormCache,
    final_hidden: Vec<f64>,
}

fn check_inputs(
    v: &TokenGrid,
    e: &TextEmbedding,
    w: &ModelWeights,
    adapters: Option<&MaterializedAdapters>,
) -> Result<()> {
    let cfg = &w.cfg;
    if v.side != cfg.grid_side || v.vocab != cfg.codebook_size {
        return Err(Error::Shape(format!(
            "grid {}x{} over {} tokens vs model grid {} over {}",
            v.side, v.side, v.vocab, cfg.grid_side, cfg.codebook_size
        )));
    }
    if e.width != cfg.text_width || e.rows() == 0 || e.data.len() != e.rows() * e.width {
        return Err(Error::Shape(format!(
            "text embedding {}x{} vs model text width {}",
            e.rows(),
            e.width,
            cfg.text_width
        )));
    }
    if let Some(a) = adapters {
        if a.cfg.d_emb != cfg.d_model
            || a.cfg.n_layer != cfg.n_layer
            || a.layers.len() != cfg.n_layer
        {
            return Err(Error::Shape(format!(
                "adapter (D={}, L={}) vs model (D={}, L={})",
                a.cfg.d_emb, a.cfg.n_layer, cfg.d_model, cfg.n_layer
            )));
        }
    }
    Ok(())
}

/// Logits for every position of `v` given text `e`; with `adapters` the
/// residual adapters run after each cross-attention and MLP block.
pub fn forward(
    v: &TokenGrid,
    e: &TextEmbedding,
    w: &ModelWeights,
    adapters: Option<&MaterializedAdapters>,
) -> Result<LogitGrid> {
    forward_with_cache(v, e, w, adapters).map(|(l, _)| l)
}

pub fn forward_with_cache(
    v: &TokenGrid,
    e: &TextEmbedding,
    w: &ModelWeights,
    adapters: Option<&MaterializedAdapters>,
) -> Result<(LogitGrid, ForwardCache)> {
    check_inputs(v, e, w, adapters)?;
    let cfg = &w.cfg;
    let (n, d, heads) = (cfg.positions(), cfg.d_model, cfg.heads);
    let dh = d / heads;
    let s = e.rows();

    let mut x = vec![0.0; n * d];
    for (i, &t) in v.tokens.iter().enumerate() {
        let row = &mut x[i * d..(i + 1) * d];
        let te = &w.token_emb[t * d..(t + 1) * d];
        let pe = &w.pos_emb[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = te[j] + pe[j];
        }
    }

    let mut caches = Vec::with_capacity(cfg.n_layer);
    for (l, b) in w.blocks.iter().enumerate() {
        let (a_self, norm_self) = norm_forward(&x, &b.norm_self, d);
        let q = split_heads(&b.q.apply(&a_self, n), n, d, heads);
        let k = split_heads(&b.k.apply(&a_self, n), n, d, heads);
        let vv = split_heads(&b.v.apply(&a_self, n), n, d, heads);
        let mut probs = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (p, o) = attend(&q[h], &k[h], &vv[h], n, n, dh);
            probs.push(p);
            outs.push(o);
        }
        let att = merge_heads(&outs, n, d);
        let proj = b.o.apply(&att, n);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

        let (a_cross, norm_cross) = norm_forward(&x, &b.norm_cross, d);
        let cq = split_heads(&b.cross_q.apply(&a_cross, n), n, d, heads);
        let ck = split_heads(&b.cross_k.apply(&e.data, s), s, d, heads);
        let cv = split_heads(&b.cross_v.apply(&e.data, s), s, d, heads);
        let mut cprobs = Vec::with_capacity(heads);
        let mut couts = Vec::with_capacity(heads);
        for h in 0..heads {
            let (p, o) = attend(&cq[h], &ck[h], &cv[h], n, s, dh);
            cprobs.push(p);
            couts.push(o);
        }
        let catt = merge_heads(&couts, n, d);
        let proj = b.cross_o.apply(&catt, n);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

        let adapter_cross =
            adapters.map(|a| adapter_forward(&mut x, &a.layers[l][0], n, d, a.cfg.d_prj));

        let (a_mlp, norm_mlp) = norm_forward(&x, &b.norm_mlp, d);
        let pre_act = b.fc1.apply(&a_mlp, n);
        let hidden: Vec<f64> = pre_act.iter().map(|&z| gelu(z)).collect();
        let proj = b.fc2.apply(&hidden, n);
        x.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);

        let adapter_mlp =
            adapters.map(|a| adapter_forward(&mut x, &a.layers[l][1], n, d, a.cfg.d_prj));

        caches.push(BlockCache {
            norm_self,
            a_self,
            q,
            k,
            v: vv,
            probs,
            att,
            norm_cross,
            a_cross,
            cq,
            ck,
            cv,
            cprobs,
            catt,
            adapter_cross,
            norm_mlp,
            a_mlp,
            pre_act,
            hidden,
            adapter_mlp,
        });
    }

    let (final_hidden, norm_out) = norm_forward(&x, &w.norm_out, d);
    let logits = w.head.apply(&final_hidden, n);
    Ok((
        LogitGrid {
            positions: n,
            vocab: cfg.codebook_size,
            data: logits,
        },
        ForwardCache {
            tokens: v.tokens.clone(),
            text: e.data.clone(),
            text_rows: s,
            blocks: caches,
            norm_out,
            final_hidden,
        },
    ))
}

/// Back-propagates `dlogits` through the cached forward pass.
///
/// Base-weight gradients (including the embedding rows of the text input,
/// returned as a `rows × E` matrix) are only computed when `grad` is given;
/// adapter gradients only when `adapter_grad` is given.
pub(crate) fn backward(
    cache: &ForwardCache,
    dlogits: &[f64],
    w: &ModelWeights,
    adapters: Option<&MaterializedAdapters>,
    mut grad: Option<&mut ModelWeights>,
    mut adapter_grad: Option<&mut MaterializedAdapters>,
) -> Option<Vec<f64>> {
    let cfg = &w.cfg;
    let (n, d, heads) = (cfg.positions(), cfg.d_model, cfg.heads);
    let dh = d / heads;
    let s = cache.text_rows;
    let e_w = cfg.text_width;

    let dfinal = linear_backward(
        dlogits,
        &cache.final_hidden,
        &w.head,
        grad.as_deref_mut().map(|g| &mut g.head),
        n,
    );
    let mut dx = norm_backward(
        &dfinal,
        &cache.norm_out,
        &w.norm_out,
        grad.as_deref_mut().map(|g| &mut g.norm_out),
        d,
    );
    let mut dtext = grad.as_ref().map(|_| vec![0.0; s * e_w]);

    for l in (0..cfg.n_layer).rev() {
        let b = &w.blocks[l];
        let c = &cache.blocks[l];
        let mut gb = grad.as_deref_mut().map(|g| &mut g.blocks[l]);

        if let (Some(a), Some(ac)) = (adapters, &c.adapter_mlp) {
            let g = adapter_grad.as_deref_mut().map(|g| &mut g.layers[l][1]);
            adapter_backward(&mut dx, ac, &a.layers[l][1], g, n, d, a.cfg.d_prj);
        }

        // MLP block.
        let dhidden = linear_backward(
            &dx,
            &c.hidden,
            &b.fc2,
            gb.as_deref_mut().map(|g| &mut g.fc2),
            n,
        );
        let dpre: Vec<f64> = dhidden
            .iter()
            .zip(&c.pre_act)
            .map(|(g, z)| g * gelu_grad(*z))
            .collect();
        let da = linear_backward(
            &dpre,
            &c.a_mlp,
            &b.fc1,
            gb.as_deref_mut().map(|g| &mut g.fc1),
            n,
        );
        let dres = norm_backward(
            &da,
            &c.norm_mlp,
            &b.norm_mlp,
            gb.as_deref_mut().map(|g| &mut g.norm_mlp),
            d,
        );
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);

        if let (Some(a), Some(ac)) = (adapters, &c.adapter_cross) {
            let g = adapter_grad.as_deref_mut().map(|g| &mut g.layers[l][0]);
            adapter_backward(&mut dx, ac, &a.layers[l][0], g, n, d, a.cfg.d_prj);
        }

        // Cross-attention block.
        let dcatt = linear_backward(
            &dx,
            &c.catt,
            &b.cross_o,
            gb.as_deref_mut().map(|g| &mut g.cross_o),
            n,
        );
        let dcatt_h = split_heads(&dcatt, n, d, heads);
        let mut dcq = Vec::with_capacity(heads);
        let mut dck = Vec::with_capacity(heads);
        let mut dcv = Vec::with_capacity(heads);
        for h in 0..heads {
            let (q, k, v) = attend_backward(
                &dcatt_h[h],
                &c.cq[h],
                &c.ck[h],
                &c.cv[h],
                &c.cprobs[h],
                n,
                s,
                dh,
            );
            dcq.push(q);
            dck.push(k);
            dcv.push(v);
        }
        let da = linear_backward(
            &merge_heads(&dcq, n, d),
            &c.a_cross,
            &b.cross_q,
            gb.as_deref_mut().map(|g| &mut g.cross_q),
            n,
        );
        if let Some(dt) = dtext.as_mut() {
            let g = gb.as_deref_mut().expect("base grads requested");
            let dk = linear_backward(
                &merge_heads(&dck, s, d),
                &cache.text,
                &b.cross_k,
                Some(&mut g.cross_k),
                s,
            );
            let dv = linear_backward(
                &merge_heads(&dcv, s, d),
                &cache.text,
                &b.cross_v,
                Some(&mut g.cross_v),
                s,
            );
            for ((t, a), b) in dt.iter_mut().zip(&dk).zip(&dv) {
                *t += a + b;
            }
        }
        let dres = norm_backward(
            &da,
            &c.norm_cross,
            &b.norm_cross,
            gb.as_deref_mut().map(|g| &mut g.norm_cross),
            d,
        );
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);

        // Self-attention block.
        let datt = linear_backward(&dx, &c.att, &b.o, gb.as_deref_mut().map(|g| &mut g.o), n);
        let datt_h = split_heads(&datt, n, d, heads);
        let mut dq = Vec::with_capacity(heads);
        let mut dk = Vec::with_capacity(heads);
        let mut dv = Vec::with_capacity(heads);
        for h in 0..heads {
            let (q, k, v) =
                attend_backward(&datt_h[h], &c.q[h], &c.k[h], &c.v[h], &c.probs[h], n, n, dh);
            dq.push(q);
            dk.push(k);
            dv.push(v);
        }
        let mut da = linear_backward(
            &merge_heads(&dq, n, d),
            &c.a_self,
            &b.q,
            gb.as_deref_mut().map(|g| &mut g.q),
            n,
        );
        let dak = linear_backward(
            &merge_heads(&dk, n, d),
            &c.a_self,
            &b.k,
            gb.as_deref_mut().map(|g| &mut g.k),
            n,
        );
        let dav = linear_backward(
            &merge_heads(&dv, n, d),
            &c.a_self,
            &b.v,
            gb.as_deref_mut().map(|g| &mut g.v),
            n,
        );
        for ((a, k), v) in da.iter_mut().zip(&dak).zip(&dav) {
            *a += k + v;
        }
        let dres = norm_backward(
            &da,
            &c.norm_self,
            &b.norm_self,
            gb.map(|g| &mut g.norm_self),
            d,
        );
        dx.iter_mut().zip(&dres).for_each(|(a, b)| *a += b);
    }

    if let Some(g) = grad {
        for (i, &t) in cache.tokens.iter().enumerate() {
            for j in 0..d {
                g.token_emb[t * d + j] += dx[i * d + j];
                g.pos_emb[i * d + j] += dx[i * d + j];
            }
        }
    }
    dtext
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init_adapter, materialize, AdapterConfig};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            d_model: 16,
            heads: 2,
            d_mlp: 24,
            codebook_size: 8,
            text_vocab: 6,
            text_width: 5,
            grid_side: 3,
        }
    }

    fn random_inputs(cfg: &ModelConfig, w: &ModelWeights, seed: u64) -> (TokenGrid, TextEmbedding) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..cfg.positions())
            .map(|_| rng.gen_range(0..=cfg.codebook_size))
            .collect();
        let v = TokenGrid::new(cfg.grid_side, cfg.codebook_size, tokens).unwrap();
        let ids = (0..rng.gen_range(1..5))
            .map(|_| rng.gen_range(0..cfg.text_vocab))
            .collect();
        let e = TextEmbedding::from_ids(ids, &w.text_emb, cfg.text_width).unwrap();
        (v, e)
    }

    #[test]
    fn zero_up_weights_leave_logits_bit_identical() {
        let cfg = tiny();
        let w = ModelWeights::init(cfg, 1).unwrap();
        for shared in [false, true] {
            let acfg = AdapterConfig {
                d_emb: 16,
                d_prj: 3,
                n_layer: 2,
                is_shared: shared,
            };
            let m = materialize(&init_adapter(acfg, 4).unwrap()).unwrap();
            for seed in 0..5 {
                let (v, e) = random_inputs(&cfg, &w, seed);
                assert_eq!(
                    forward(&v, &e, &w, None).unwrap(),
                    forward(&v, &e, &w, Some(&m)).unwrap()
                );
            }
        }
    }

    #[test]
    fn text_row_order_does_not_matter() {
        let cfg = tiny();
        let w = ModelWeights::init(cfg, 2).unwrap();
        let v = TokenGrid::new(3, 8, vec![0, 8, 3, 8, 8, 1, 2, 8, 7]).unwrap();
        let a = TextEmbedding::from_ids(vec![1, 2, 3, 4], &w.text_emb, 5).unwrap();
        let b = TextEmbedding::from_ids(vec![4, 2, 1, 3], &w.text_emb, 5).unwrap();
        let la = forward(&v, &a, &w, None).unwrap();
        let lb = forward(&v, &b, &w, None).unwrap();
        for (x, y) in la.data.iter().zip(&lb.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let cfg = tiny();
        let w = ModelWeights::init(cfg, 0).unwrap();
        let (v, e) = random_inputs(&cfg, &w, 0);
        let bad_grid = TokenGrid::all_masked(4, 8);
        assert!(forward(&bad_grid, &e, &w, None).is_err());
        let acfg = AdapterConfig {
            d_emb: 8,
            d_prj: 2,
            n_layer: 2,
            is_shared: false,
        };
        let m = materialize(&init_adapter(acfg, 0).unwrap()).unwrap();
        assert!(forward(&v, &e, &w, Some(&m)).is_err());
    }

    /// Finite-difference check of every base parameter group and of the
    /// adapter weights, through a random linear functional of the logits.
    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny();
        let mut w = ModelWeights::init(cfg, 3).unwrap();
        // Move norms and biases away from their trivial init.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in w.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
        let acfg = AdapterConfig {
            d_emb: 16,
            d_prj: 3,
            n_layer: 2,
            is_shared: false,
        };
        let mut ad = materialize(&init_adapter(acfg, 5).unwrap()).unwrap();
        for sites in ad.layers.iter_mut() {
            for s in sites.iter_mut() {
                s.wu.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
                s.wd.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
            }
        }
        let (v, e) = random_inputs(&cfg, &w, 11);
        let coef: Vec<f64> = (0..cfg.positions() * cfg.codebook_size)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let objective = |w: &ModelWeights, ad: &MaterializedAdapters| {
            let e = TextEmbedding::from_ids(e.ids.clone(), &w.text_emb, cfg.text_width).unwrap();
            let l = forward(&v, &e, w, Some(ad)).unwrap();
            l.data.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>()
        };

        let (_, cache) = forward_with_cache(&v, &e, &w, Some(&ad)).unwrap();
        let mut g = w.zeros_like();
        let mut ga = MaterializedAdapters::zeros(acfg);
        let dtext = backward(&cache, &coef, &w, Some(&ad), Some(&mut g), Some(&mut ga)).unwrap();
        for (r, &id) in e.ids.iter().enumerate() {
            for j in 0..cfg.text_width {
                g.text_emb[id * cfg.text_width + j] += dtext[r * cfg.text_width + j];
            }
        }

        let eps = 1e-5;
        let analytic: Vec<Vec<f64>> = g.tensors().iter().map(|(_, _, t)| t.to_vec()).collect();
        let names: Vec<String> = w.tensors().iter().map(|(n, _, _)| n.clone()).collect();
        for (ti, name) in names.iter().enumerate() {
            let len = analytic[ti].len();
            for j in [0, len / 2, len - 1] {
                let mut wp = w.clone();
                wp.tensors_mut()[ti][j] += eps;
                let mut wm = w.clone();
                wm.tensors_mut()[ti][j] -= eps;
                let fd = (objective(&wp, &ad) - objective(&wm, &ad)) / (2.0 * eps);
                let a = analytic[ti][j];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{name}[{j}]: fd {fd} vs {a}"
                );
            }
        }
        for l in 0..2 {
            for s in 0..2 {
                for (which, len) in [(0, 16 * 3), (1, 3 * 16)] {
                    for j in [0, len / 3, len - 1] {
                        let bump = |delta: f64| {
                            let mut a = ad.clone();
                            let t = if which == 0 {
                                &mut a.layers[l][s].wd
                            } else {
                                &mut a.layers[l][s].wu
                            };
                            t[j] += delta;
                            objective(&w, &a)
                        };
                        let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                        let a = if which == 0 {
                            ga.layers[l][s].wd[j]
                        } else {
                            ga.layers[l][s].wu[j]
                        };
                        assert!(
                            (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                            "adapter l{l} s{s} w{which}[{j}]"
                        );
                    }
                }
            }
        }
    }
}
