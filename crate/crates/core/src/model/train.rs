use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward, forward_with_cache, LogitGrid, ModelConfig, ModelWeights};
use crate::adapter::{
    init_adapter, materialize, materialize_backward, AdapterConfig, AdapterParams,
    MaterializedAdapters,
};
use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::text::TextEmbedding;
use crate::tokenizer::TokenGrid;

/// Text id of the null prompt.
pub const NULL_TEXT_ID: usize = 0;

/// One training pair in token space: the complete target grid and the
/// vocabulary ids of its prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: TokenGrid,
    pub text_ids: Vec<usize>,
}

/// Which positions of a grid were replaced by MASK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub masked: Vec<bool>,
}

impl MaskSpec {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Cosine masking schedule `cos(πu/2)`.
pub fn mask_ratio_schedule(u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!(
            "schedule input {u} outside [0, 1]"
        )));
    }
    Ok((std::f64::consts::FRAC_PI_2 * u).cos())
}

/// Replaces `ceil(ratio·g²)` uniformly chosen positions with MASK.
pub fn mask_tokens(v: &TokenGrid, ratio: f64, rng: &mut impl Rng) -> Result<(TokenGrid, MaskSpec)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio {ratio} outside (0, 1]"
        )));
    }
    if !v.is_complete() {
        return Err(Error::InvalidArgument(
            "cannot mask an incomplete grid".into(),
        ));
    }
    let n = v.len();
    let count = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let mut masked = vec![false; n];
    let mut out = v.clone();
    for i in sample(rng, n, count) {
        masked[i] = true;
        out.tokens[i] = v.mask_id();
    }
    Ok((out, MaskSpec { masked }))
}

fn check_loss_inputs(l: &LogitGrid, target: &TokenGrid, m: &MaskSpec) -> Result<usize> {
    if l.positions != target.len() || m.masked.len() != target.len() || l.vocab != target.vocab {
        return Err(Error::Shape(format!(
            "logits {}x{}, target {} over {}, mask {}",
            l.positions,
            l.vocab,
            target.len(),
            target.vocab,
            m.masked.len()
        )));
    }
    if !target.is_complete() {
        return Err(Error::InvalidArgument(
            "loss target must be complete".into(),
        ));
    }
    match m.count() {
        0 => Err(Error::InvalidArgument(
            "loss needs at least one masked position".into(),
        )),
        c => Ok(c),
    }
}

/// Mean cross-entropy over masked positions.
pub fn mvtm_loss(l: &LogitGrid, target: &TokenGrid, m: &MaskSpec) -> Result<f64> {
    let count = check_loss_inputs(l, target, m)?;
    let mut total = 0.0;
    for (i, _) in m.masked.iter().enumerate().filter(|(_, &b)| b) {
        let row = l.row(i);
        total += log_sum_exp(row) - row[target.tokens[i]];
    }
    Ok(total / count as f64)
}

/// Loss and its gradient with respect to every logit (zero at unmasked rows).
pub fn mvtm_loss_grad(l: &LogitGrid, target: &TokenGrid, m: &MaskSpec) -> Result<(f64, Vec<f64>)> {
    let count = check_loss_inputs(l, target, m)?;
    let k = l.vocab;
    let mut grad = vec![0.0; l.data.len()];
    let mut total = 0.0;
    for (i, _) in m.masked.iter().enumerate().filter(|(_, &b)| b) {
        let row = l.row(i);
        let lse = log_sum_exp(row);
        total += lse - row[target.tokens[i]];
        let g = &mut grad[i * k..(i + 1) * k];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - lse).exp() / count as f64;
        }
        g[target.tokens[i]] -= 1.0 / count as f64;
    }
    Ok((total / count as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(cfg: AdamConfig, shapes: impl Iterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes.map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { cfg, t: 0, m, v }
    }

    fn step(&mut self, params: Vec<&mut Vec<f64>>, grads: &[&[f64]]) {
        self.t += 1;
        let c = self.cfg;
        let lr = c.lr * (1.0 - c.beta2.powi(self.t)).sqrt() / (1.0 - c.beta1.powi(self.t));
        for (i, p) in params.into_iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                p[j] -= lr * m[j] / (v[j].sqrt() + c.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Probability of replacing an example's prompt with the null prompt
    /// (text id 0), so the model also learns the unconditional distribution
    /// used as the guidance baseline.
    #[serde(default)]
    pub text_dropout: f64,
}

impl TrainConfig {
    /// Base-model pretraining defaults.
    pub fn pretrain(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch: 8,
            adam: AdamConfig::with_lr(1e-3),
            seed,
            text_dropout: 0.1,
        }
    }

    /// Adapter tuning defaults: lr 3e-5, batch 8, 1000 steps.
    pub fn adapter(seed: u64) -> Self {
        Self {
            steps: 1000,
            batch: 8,
            adam: AdamConfig::with_lr(3e-5),
            seed,
            text_dropout: 0.0,
        }
    }

    /// Adapter tuning for the small desk model: as [`TrainConfig::adapter`]
    /// with lr 1e-3.
    pub fn adapter_desk(seed: u64) -> Self {
        Self {
            adam: AdamConfig::with_lr(1e-3),
            ..Self::adapter(seed)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch-mean loss at every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over steps `range`, clamped to the recorded length.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let end = range.end.min(self.losses.len());
        let start = range.start.min(end);
        let s = &self.losses[start..end];
        s.iter().sum::<f64>() / s.len().max(1) as f64
    }
}

fn check_examples(examples: &[Example], cfg: &ModelConfig, tc: &TrainConfig) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if tc.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    for ex in examples {
        if ex.tokens.side != cfg.grid_side
            || ex.tokens.vocab != cfg.codebook_size
            || !ex.tokens.is_complete()
        {
            return Err(Error::Shape(
                "training grid does not match the model".into(),
            ));
        }
        if ex.text_ids.is_empty() || ex.text_ids.iter().any(|&id| id >= cfg.text_vocab) {
            return Err(Error::Shape(format!(
                "text ids {:?} outside vocabulary",
                ex.text_ids
            )));
        }
    }
    Ok(())
}

/// Draws an example and a schedule-sampled mask. At `u = 1` the schedule is
/// zero, so the ratio is floored at one position.
fn sample_masked(
    examples: &[Example],
    rng: &mut ChaCha8Rng,
) -> Result<(usize, TokenGrid, MaskSpec)> {
    let i = rng.gen_range(0..examples.len());
    let u: f64 = rng.gen();
    let n = examples[i].tokens.len() as f64;
    let ratio = mask_ratio_schedule(u)?.max(1.0 / n);
    let (masked, spec) = mask_tokens(&examples[i].tokens, ratio, rng)?;
    Ok((i, masked, spec))
}

fn finite_or_diverged(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { step, loss })
    }
}

/// Trains a freshly initialized model on masked-token prediction.
pub fn pretrain_base(
    examples: &[Example],
    cfg: ModelConfig,
    tc: &TrainConfig,
) -> Result<(ModelWeights, TrainReport)> {
    cfg.validate()?;
    check_examples(examples, &cfg, tc)?;
    let mut w = ModelWeights::init(cfg, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(tc.adam, w.tensors().iter().map(|t| t.2.len()));
    let mut report = TrainReport::default();
    let e_w = cfg.text_width;

    for step in 0..tc.steps {
        let mut grad = w.zeros_like();
        let mut batch_loss = 0.0;
        for _ in 0..tc.batch {
            let (i, input, spec) = sample_masked(examples, &mut rng)?;
            let ex = &examples[i];
            let ids = if rng.gen::<f64>() < tc.text_dropout {
                vec![NULL_TEXT_ID]
            } else {
                ex.text_ids.clone()
            };
            let e = TextEmbedding::from_ids(ids, &w.text_emb, e_w)?;
            let (logits, cache) = forward_with_cache(&input, &e, &w, None)?;
            let (loss, mut dl) = mvtm_loss_grad(&logits, &ex.tokens, &spec)?;
            finite_or_diverged(step, loss)?;
            batch_loss += loss / tc.batch as f64;
            dl.iter_mut().for_each(|g| *g /= tc.batch as f64);
            let dtext = backward(&cache, &dl, &w, None, Some(&mut grad), None)
                .expect("base grads requested");
            for (r, &id) in e.ids.iter().enumerate() {
                for j in 0..e_w {
                    grad.text_emb[id * e_w + j] += dtext[r * e_w + j];
                }
            }
        }
        report.losses.push(batch_loss);
        let grads: Vec<&[f64]> = grad.tensors().iter().map(|t| t.2.as_slice()).collect();
        adam.step(w.tensors_mut(), &grads);
    }
    if !w.is_finite() {
        return Err(Error::Diverged {
            step: tc.steps,
            loss: f64::NAN,
        });
    }
    Ok((w, report))
}

/// Loss and adapter-parameter gradient for one masked example.
fn adapter_loss_grad(
    base: &ModelWeights,
    params: &AdapterParams,
    ex: &Example,
    input: &TokenGrid,
    spec: &MaskSpec,
) -> Result<(f64, AdapterParams)> {
    let mat = materialize(params)?;
    let e = TextEmbedding::from_ids(ex.text_ids.clone(), &base.text_emb, base.cfg.text_width)?;
    let (logits, cache) = forward_with_cache(input, &e, base, Some(&mat))?;
    let (loss, dl) = mvtm_loss_grad(&logits, &ex.tokens, spec)?;
    let mut gm = MaterializedAdapters::zeros(params.cfg);
    backward(&cache, &dl, base, Some(&mat), None, Some(&mut gm));
    let mut g = params.zeros_like();
    materialize_backward(&gm, &mut g);
    Ok((loss, g))
}

/// Trains fresh adapters against a frozen base model.
pub fn tune_adapter(
    base: &ModelWeights,
    examples: &[Example],
    acfg: AdapterConfig,
    tc: &TrainConfig,
) -> Result<(AdapterParams, TrainReport)> {
    check_examples(examples, &base.cfg, tc)?;
    if acfg.d_emb != base.cfg.d_model || acfg.n_layer != base.cfg.n_layer {
        return Err(Error::Shape(format!(
            "adapter (D={}, L={}) vs model (D={}, L={})",
            acfg.d_emb, acfg.n_layer, base.cfg.d_model, base.cfg.n_layer
        )));
    }
    let mut params = init_adapter(acfg, tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut adam = Adam::new(tc.adam, params.tensors().iter().map(|t| t.2.len()));
    let mut report = TrainReport::default();

    for step in 0..tc.steps {
        let mat = materialize(&params)?;
        let mut gm = MaterializedAdapters::zeros(acfg);
        let mut batch_loss = 0.0;
        for _ in 0..tc.batch {
            let (i, input, spec) = sample_masked(examples, &mut rng)?;
            let ex = &examples[i];
            let e =
                TextEmbedding::from_ids(ex.text_ids.clone(), &base.text_emb, base.cfg.text_width)?;
            let (logits, cache) = forward_with_cache(&input, &e, base, Some(&mat))?;
            let (loss, mut dl) = mvtm_loss_grad(&logits, &ex.tokens, &spec)?;
            finite_or_diverged(step, loss)?;
            batch_loss += loss / tc.batch as f64;
            dl.iter_mut().for_each(|g| *g /= tc.batch as f64);
            backward(&cache, &dl, base, Some(&mat), None, Some(&mut gm));
        }
        report.losses.push(batch_loss);
        let mut g = params.zeros_like();
        materialize_backward(&gm, &mut g);
        let grads: Vec<&[f64]> = g.tensors().iter().map(|t| t.2).collect();
        adam.step(params.tensors_mut(), &grads);
    }
    Ok((params, report))
}

/// Largest relative error between `grad` (the analytic gradient of `f` at
/// `params`) and central differences, over `coords` randomly chosen
/// coordinates (all of them when `coords >= params.len()`).
pub fn grad_check(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    grad: &[f64],
    eps: f64,
    coords: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if coords >= params.len() {
        (0..params.len()).collect()
    } else {
        sample(&mut rng, params.len(), coords).into_vec()
    };
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in picks {
        x[i] = params[i] + eps;
        let fp = f(&x);
        x[i] = params[i] - eps;
        let fm = f(&x);
        x[i] = params[i];
        let numeric = (fp - fm) / (2.0 * eps);
        let scale = grad[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad[i] - numeric).abs() / scale);
    }
    worst
}

/// Flattens adapter parameters in tensor order.
pub fn flatten_adapter(p: &AdapterParams) -> Vec<f64> {
    p.tensors()
        .iter()
        .flat_map(|t| t.2.iter().copied())
        .collect()
}

/// Inverse of [`flatten_adapter`].
pub fn unflatten_adapter(template: &AdapterParams, flat: &[f64]) -> AdapterParams {
    let mut out = template.clone();
    let mut off = 0;
    for t in out.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    out
}

/// Masked-token loss of the adapted model on one fixed masked example, and
/// its gradient with respect to the flattened adapter parameters.
pub fn adapter_objective(
    base: &ModelWeights,
    params: &AdapterParams,
    ex: &Example,
    input: &TokenGrid,
    spec: &MaskSpec,
) -> Result<(f64, Vec<f64>)> {
    let (loss, g) = adapter_loss_grad(base, params, ex, input, spec)?;
    Ok((loss, flatten_adapter(&g)))
}
