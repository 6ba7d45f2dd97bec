//! Guided iterative parallel decoding.
//!
//! Three logit composers are provided, all affine in the model outputs:
//!
//! * base: `G(t) + λ·(G(t) − G(n))`
//! * adapter: `Ĝ(t) + λ_A·(Ĝ(t) − G(t)) + λ_B·(G(t) − G(n))`
//! * dual: `(1 − γ)·l_s + γ·l_c`, where `l_s` is the adapter composition with
//!   the style adapter on the full prompt and `l_c` the same with the content
//!   adapter on the style-stripped prompt.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::adapter::MaterializedAdapters;
use crate::error::{Error, Result};
use crate::model::{forward, LogitGrid, ModelWeights};
use crate::raster::Image;
use crate::text::{encode_text, strip_style, PromptSpec, TextEmbedding, Vocabulary};
use crate::tokenizer::{Codebook, TokenGrid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Scale of the plain text guidance term.
    pub lambda: f64,
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            lambda_a: 2.0,
            lambda_b: 5.0,
            gamma: 0.6,
            temperature: 4.5,
            steps: 36,
        }
    }
}

impl GuidanceConfig {
    /// Settings for the small desk model: 12 decoding steps and unit
    /// guidance scales.
    pub fn desk() -> Self {
        Self {
            lambda: 1.0,
            lambda_a: 1.0,
            lambda_b: 1.0,
            steps: 12,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument(
                "decoding needs at least one step".into(),
            ));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!(
                "gamma {} outside [0, 1]",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Evaluates logits for a (partially masked) grid.
pub trait LogitProvider {
    fn logits(&self, v: &TokenGrid) -> Result<LogitGrid>;
}

impl<F: Fn(&TokenGrid) -> Result<LogitGrid>> LogitProvider for F {
    fn logits(&self, v: &TokenGrid) -> Result<LogitGrid> {
        self(v)
    }
}

/// The model conditioned on one text embedding, optionally with adapters.
pub struct Conditioned<'a> {
    pub weights: &'a ModelWeights,
    pub adapters: Option<&'a MaterializedAdapters>,
    pub text: TextEmbedding,
}

impl LogitProvider for Conditioned<'_> {
    fn logits(&self, v: &TokenGrid) -> Result<LogitGrid> {
        forward(v, &self.text, self.weights, self.adapters)
    }
}

fn check_same_shape(a: &LogitGrid, b: &LogitGrid) -> Result<()> {
    if a.positions != b.positions || a.vocab != b.vocab {
        return Err(Error::Shape(format!(
            "logits {}x{} vs {}x{}",
            a.positions, a.vocab, b.positions, b.vocab
        )));
    }
    Ok(())
}

/// `gt + λ·(gt − gn)`.
pub fn combine_base(gt: &LogitGrid, gn: &LogitGrid, lambda: f64) -> Result<LogitGrid> {
    check_same_shape(gt, gn)?;
    let data = gt
        .data
        .iter()
        .zip(&gn.data)
        .map(|(t, n)| t + lambda * (t - n))
        .collect();
    Ok(LogitGrid { data, ..gt.clone() })
}

/// `gh + λ_A·(gh − gt) + λ_B·(gt − gn)`.
pub fn combine_adapter(
    gh: &LogitGrid,
    gt: &LogitGrid,
    gn: &LogitGrid,
    lambda_a: f64,
    lambda_b: f64,
) -> Result<LogitGrid> {
    check_same_shape(gh, gt)?;
    check_same_shape(gt, gn)?;
    let data = gh
        .data
        .iter()
        .zip(&gt.data)
        .zip(&gn.data)
        .map(|((h, t), n)| h + lambda_a * (h - t) + lambda_b * (t - n))
        .collect();
    Ok(LogitGrid { data, ..gh.clone() })
}

/// `(1 − γ)·ls + γ·lc`.
pub fn combine_dual(ls: &LogitGrid, lc: &LogitGrid, gamma: f64) -> Result<LogitGrid> {
    check_same_shape(ls, lc)?;
    let data = ls
        .data
        .iter()
        .zip(&lc.data)
        .map(|(s, c)| (1.0 - gamma) * s + gamma * c)
        .collect();
    Ok(LogitGrid { data, ..ls.clone() })
}

/// Base-model guidance. `n = None` means the negative prompt equals the
/// positive one, so the guidance term vanishes and is not evaluated.
pub fn guided_logits_base(
    v: &TokenGrid,
    t: &dyn LogitProvider,
    n: Option<&dyn LogitProvider>,
    lambda: f64,
) -> Result<LogitGrid> {
    let gt = t.logits(v)?;
    match n {
        Some(n) => combine_base(&gt, &n.logits(v)?, lambda),
        None => Ok(gt),
    }
}

/// Adapter-plus-text guidance; `n = None` as in [`guided_logits_base`].
pub fn guided_logits_adapter(
    v: &TokenGrid,
    adapted: &dyn LogitProvider,
    t: &dyn LogitProvider,
    n: Option<&dyn LogitProvider>,
    lambda_a: f64,
    lambda_b: f64,
) -> Result<LogitGrid> {
    let gh = adapted.logits(v)?;
    let gt = t.logits(v)?;
    match n {
        Some(n) => combine_adapter(&gh, &gt, &n.logits(v)?, lambda_a, lambda_b),
        None => combine_adapter(&gh, &gt, &gt, lambda_a, 0.0),
    }
}

/// The three model terms of one adapter composition.
pub struct AdapterTerms<'a> {
    pub adapted: &'a dyn LogitProvider,
    pub plain: &'a dyn LogitProvider,
    pub negative: Option<&'a dyn LogitProvider>,
}

impl AdapterTerms<'_> {
    fn logits(&self, v: &TokenGrid, lambda_a: f64, lambda_b: f64) -> Result<LogitGrid> {
        guided_logits_adapter(
            v,
            self.adapted,
            self.plain,
            self.negative,
            lambda_a,
            lambda_b,
        )
    }
}

/// Style/content mixture. At `γ = 0` only the style terms and at `γ = 1`
/// only the content terms are evaluated.
pub fn guided_logits_dual(
    v: &TokenGrid,
    style: &AdapterTerms,
    content: &AdapterTerms,
    lambda_a: f64,
    lambda_b: f64,
    gamma: f64,
) -> Result<LogitGrid> {
    if gamma == 0.0 {
        return style.logits(v, lambda_a, lambda_b);
    }
    if gamma == 1.0 {
        return content.logits(v, lambda_a, lambda_b);
    }
    let ls = style.logits(v, lambda_a, lambda_b)?;
    let lc = content.logits(v, lambda_a, lambda_b)?;
    combine_dual(&ls, &lc, gamma)
}

/// Number of positions still masked after step `k` of `steps`:
/// `ceil(n·cos(π/2·k/steps))`, and exactly zero at the last step.
pub fn masked_after_step(n: usize, k: usize, steps: usize) -> usize {
    if k >= steps {
        return 0;
    }
    let r = (std::f64::consts::FRAC_PI_2 * k as f64 / steps as f64).cos();
    ((n as f64 * r).ceil() as usize).min(n)
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the cumulative total: take the last
    // non-zero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Iterative parallel decoding from an all-MASK grid. Each step samples a
/// candidate for every masked position, scores it by its log-probability
/// plus annealed Gumbel noise, and commits the most confident candidates.
pub fn decode_iterative(
    provider: &dyn LogitProvider,
    side: usize,
    vocab: usize,
    cfg: &GuidanceConfig,
    rng: &mut impl Rng,
) -> Result<TokenGrid> {
    decode_with_trace(provider, side, vocab, cfg, rng, |_| {})
}

/// [`decode_iterative`], calling `observe` with the grid after every step.
pub fn decode_with_trace(
    provider: &dyn LogitProvider,
    side: usize,
    vocab: usize,
    cfg: &GuidanceConfig,
    rng: &mut impl Rng,
    mut observe: impl FnMut(&TokenGrid),
) -> Result<TokenGrid> {
    cfg.validate()?;
    let n = side * side;
    let mut grid = TokenGrid::all_masked(side, vocab);
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid gumbel");
    let steps = cfg.steps;
    for k in 1..=steps {
        let logits = provider.logits(&grid)?;
        if logits.positions != n || logits.vocab != vocab {
            return Err(Error::Shape(format!(
                "provider returned {}x{} logits for a {n}x{vocab} grid",
                logits.positions, logits.vocab
            )));
        }
        let anneal = cfg.temperature * (1.0 - k as f64 / steps as f64);
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for i in (0..n).filter(|&i| grid.is_masked(i)) {
            let mut p = logits.row(i).to_vec();
            crate::linalg::softmax_in_place(&mut p);
            let tok = sample_categorical(&p, rng);
            let noise: f64 = gumbel.sample(rng);
            candidates.push((p[tok].ln() + anneal * noise, i, tok));
        }
        let target = masked_after_step(n, k, steps);
        let commit = candidates.len().saturating_sub(target);
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i, tok) in candidates.iter().take(commit) {
            grid.tokens[i] = tok;
        }
        observe(&grid);
    }
    Ok(grid)
}

/// Which adapters and composition to sample with.
pub enum Guidance<'a> {
    Base,
    Adapter(&'a MaterializedAdapters),
    Dual {
        style: &'a MaterializedAdapters,
        content: &'a MaterializedAdapters,
    },
}

/// Everything needed to turn a prompt into sampled images.
pub struct SamplerContext<'a> {
    pub weights: &'a ModelWeights,
    pub vocab: &'a Vocabulary,
    pub codebook: &'a Codebook,
}

impl<'a> SamplerContext<'a> {
    fn conditioned(
        &self,
        p: &PromptSpec,
        adapters: Option<&'a MaterializedAdapters>,
    ) -> Result<Conditioned<'a>> {
        let w = self.weights;
        Ok(Conditioned {
            weights: w,
            adapters,
            text: encode_text(p, self.vocab, &w.text_emb, w.cfg.text_width)?,
        })
    }

    /// Token grid for `prompt` against `negative`.
    pub fn sample_tokens(
        &self,
        guidance: &Guidance<'a>,
        prompt: &PromptSpec,
        negative: &PromptSpec,
        cfg: &GuidanceConfig,
        rng: &mut impl Rng,
    ) -> Result<TokenGrid> {
        let cfg_m = &self.weights.cfg;
        let (side, vocab) = (cfg_m.grid_side, cfg_m.codebook_size);
        let same = |a: &PromptSpec, b: &PromptSpec| self.vocab.ids(a) == self.vocab.ids(b);
        let neg = self.conditioned(negative, None)?;
        match guidance {
            Guidance::Base => {
                let t = self.conditioned(prompt, None)?;
                let n = (!same(prompt, negative)).then_some(&neg as &dyn LogitProvider);
                let provider = |v: &TokenGrid| guided_logits_base(v, &t, n, cfg.lambda);
                decode_iterative(&provider, side, vocab, cfg, rng)
            }
            Guidance::Adapter(theta) => {
                let ta = self.conditioned(prompt, Some(theta))?;
                let t = self.conditioned(prompt, None)?;
                let n = (!same(prompt, negative)).then_some(&neg as &dyn LogitProvider);
                let provider = |v: &TokenGrid| {
                    guided_logits_adapter(v, &ta, &t, n, cfg.lambda_a, cfg.lambda_b)
                };
                decode_iterative(&provider, side, vocab, cfg, rng)
            }
            Guidance::Dual { style, content } => {
                let c = strip_style(prompt);
                let ts = self.conditioned(prompt, Some(style))?;
                let t = self.conditioned(prompt, None)?;
                let tc = self.conditioned(&c, Some(content))?;
                let tcp = self.conditioned(&c, None)?;
                let style_terms = AdapterTerms {
                    adapted: &ts,
                    plain: &t,
                    negative: (!same(prompt, negative)).then_some(&neg as &dyn LogitProvider),
                };
                let content_terms = AdapterTerms {
                    adapted: &tc,
                    plain: &tcp,
                    negative: (!same(&c, negative)).then_some(&neg as &dyn LogitProvider),
                };
                let provider = |v: &TokenGrid| {
                    guided_logits_dual(
                        v,
                        &style_terms,
                        &content_terms,
                        cfg.lambda_a,
                        cfg.lambda_b,
                        cfg.gamma,
                    )
                };
                decode_iterative(&provider, side, vocab, cfg, rng)
            }
        }
    }

    /// Samples a token grid and decodes it through the codebook.
    pub fn sample_image(
        &self,
        guidance: &Guidance<'a>,
        prompt: &PromptSpec,
        negative: &PromptSpec,
        cfg: &GuidanceConfig,
        rng: &mut impl Rng,
    ) -> Result<(TokenGrid, Image)> {
        let grid = self.sample_tokens(guidance, prompt, negative, cfg, rng)?;
        let img = self.codebook.decode(&grid)?;
        Ok((grid, img))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_of(values: Vec<f64>, vocab: usize) -> LogitGrid {
        LogitGrid {
            positions: values.len() / vocab,
            vocab,
            data: values,
        }
    }

    fn scalar(v: f64) -> LogitGrid {
        grid_of(vec![v], 1)
    }

    #[test]
    fn scalar_toys() {
        assert_eq!(
            combine_base(&scalar(1.0), &scalar(0.0), 5.0).unwrap().data,
            [6.0]
        );
        assert_eq!(
            combine_base(&scalar(1.5), &scalar(-3.0), 0.0).unwrap().data,
            [1.5]
        );
        assert_eq!(
            combine_base(&scalar(1.5), &scalar(1.5), 7.0).unwrap().data,
            [1.5]
        );
        assert_eq!(
            combine_adapter(&scalar(2.0), &scalar(1.0), &scalar(0.0), 2.0, 5.0)
                .unwrap()
                .data,
            [9.0]
        );
        assert_eq!(
            combine_adapter(&scalar(2.5), &scalar(1.0), &scalar(0.0), 0.0, 0.0)
                .unwrap()
                .data,
            [2.5]
        );
        assert_eq!(
            combine_dual(&scalar(4.0), &scalar(2.0), 0.5).unwrap().data,
            [3.0]
        );
        assert_eq!(
            combine_dual(&scalar(4.0), &scalar(2.0), 0.0).unwrap().data,
            [4.0]
        );
        assert_eq!(
            combine_dual(&scalar(4.0), &scalar(2.0), 1.0).unwrap().data,
            [2.0]
        );
    }

    #[test]
    fn schedule_after_each_step() {
        let oracle: Vec<usize> = (1..=4)
            .map(|k| {
                let c = 64.0 * (std::f64::consts::PI * k as f64 / 8.0).cos();
                if k == 4 {
                    0
                } else {
                    c.ceil() as usize
                }
            })
            .collect();
        let got: Vec<usize> = (1..=4).map(|k| masked_after_step(64, k, 4)).collect();
        assert_eq!(got, oracle);
        assert_eq!(got, [60, 46, 25, 0]);
    }

    fn random_provider(seed: u64, n: usize, k: usize) -> impl Fn(&TokenGrid) -> Result<LogitGrid> {
        move |v: &TokenGrid| {
            // Logits depend on the grid so that commitment order matters.
            let h = v
                .tokens
                .iter()
                .fold(seed, |h, &t| h.wrapping_mul(31).wrapping_add(t as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(h);
            Ok(grid_of(
                (0..n * k).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                k,
            ))
        }
    }

    #[test]
    fn decoding_trajectory_and_commitment() {
        for seed in 0..20 {
            let provider = random_provider(seed, 64, 10);
            let cfg = GuidanceConfig {
                steps: 4,
                ..GuidanceConfig::default()
            };
            let mut counts = Vec::new();
            let mut prev = TokenGrid::all_masked(8, 10);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = decode_with_trace(&provider, 8, 10, &cfg, &mut rng, |g| {
                for i in 0..64 {
                    if !prev.is_masked(i) {
                        assert_eq!(g.tokens[i], prev.tokens[i]);
                    }
                }
                counts.push(g.masked_count());
                prev = g.clone();
            })
            .unwrap();
            assert_eq!(counts, [60, 46, 25, 0]);
            assert!(out.is_complete());
            let again =
                decode_iterative(&provider, 8, 10, &cfg, &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap();
            assert_eq!(out, again);
        }
    }

    #[test]
    fn single_step_decodes_everything() {
        let provider = random_provider(3, 9, 4);
        let cfg = GuidanceConfig {
            steps: 1,
            ..GuidanceConfig::default()
        };
        let g = decode_iterative(&provider, 3, 4, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(g.is_complete());
        let bad = GuidanceConfig {
            steps: 0,
            ..GuidanceConfig::default()
        };
        assert!(
            decode_iterative(&provider, 3, 4, &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err()
        );
    }

    proptest! {
        #[test]
        fn composers_match_elementwise_oracle(
            a in prop::collection::vec(-10.0f64..10.0, 12),
            b in prop::collection::vec(-10.0f64..10.0, 12),
            c in prop::collection::vec(-10.0f64..10.0, 12),
            la in -3.0f64..3.0,
            lb in -3.0f64..8.0,
            gamma in 0.0f64..=1.0,
        ) {
            let (ga, gb, gc) = (grid_of(a.clone(), 4), grid_of(b.clone(), 4), grid_of(c.clone(), 4));
            let base = combine_base(&ga, &gb, lb).unwrap();
            let adapter = combine_adapter(&ga, &gb, &gc, la, lb).unwrap();
            let dual = combine_dual(&ga, &gb, gamma).unwrap();
            for i in 0..12 {
                let (x, y, z) = (a[i], b[i], c[i]);
                prop_assert!((base.data[i] - ((1.0 + lb) * x - lb * y)).abs() < 1e-12);
                let want = (1.0 + la) * x + (lb - la) * y - lb * z;
                prop_assert!((adapter.data[i] - want).abs() < 1e-12);
                prop_assert!((dual.data[i] - (x + gamma * (y - x))).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_is_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 6), shift in -100.0f64..100.0) {
            let mut p = row.clone();
            crate::linalg::softmax_in_place(&mut p);
            let mut q: Vec<f64> = row.iter().map(|x| x + shift).collect();
            crate::linalg::softmax_in_place(&mut q);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dual_endpoints_skip_the_other_side() {
        let s = random_provider(1, 4, 3);
        let c = random_provider(2, 4, 3);
        let fail = |_: &TokenGrid| -> Result<LogitGrid> {
            Err(Error::InvalidArgument("not evaluated".into()))
        };
        let v = TokenGrid::all_masked(2, 3);
        let style = AdapterTerms {
            adapted: &s,
            plain: &c,
            negative: None,
        };
        let broken = AdapterTerms {
            adapted: &fail,
            plain: &fail,
            negative: None,
        };
        let l0 = guided_logits_dual(&v, &style, &broken, 2.0, 5.0, 0.0).unwrap();
        assert_eq!(
            l0,
            guided_logits_adapter(&v, &s, &c, None, 2.0, 5.0).unwrap()
        );
        let l1 = guided_logits_dual(&v, &broken, &style, 2.0, 5.0, 1.0).unwrap();
        assert_eq!(l1, l0);
    }
}
