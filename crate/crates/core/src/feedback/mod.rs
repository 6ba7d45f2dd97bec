//! Iterative training: sample a pool from a round-one adapter, pick the good
//! samples (proxy score, random or a person), and retrain on them.

pub mod proxy;
pub mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{materialize, AdapterConfig, AdapterParams};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::model::{tune_adapter, Example, TrainConfig};
use crate::raster::Image;
use crate::sampler::{Guidance, GuidanceConfig, SamplerContext};
use crate::text::PromptSpec;
use crate::tokenizer::{Codebook, TokenGrid};

pub use proxy::{style_score, text_score, train_proxy, ProxyEmbedder};
pub use templates::{
    default_templates, example_prompt, fill_template, shape_templates, PHOTO_TEMPLATES,
};

pub const TEXT_SCORE: &str = "text";
pub const STYLE_SCORE: &str = "style";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub item_id: String,
    pub prompt_id: usize,
    /// Rendered prompt text.
    pub prompt: String,
    pub spec: PromptSpec,
    pub tokens: TokenGrid,
    /// Image file name relative to the pool directory.
    pub file: String,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePool {
    pub pool_id: String,
    pub items: Vec<PoolItem>,
}

pub fn item_id(pool_id: &str, prompt_id: usize, index: usize) -> String {
    format!("{pool_id}_{prompt_id:03}_{index:03}")
}

/// Seed of the `index`-th item. Item 0 uses `seed` itself.
pub fn item_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

impl SamplePool {
    pub fn item(&self, id: &str) -> Option<&PoolItem> {
        self.items.iter().find(|i| i.item_id == id)
    }

    pub fn decode(&self, cb: &Codebook) -> Result<Vec<Image>> {
        self.items.iter().map(|i| cb.decode(&i.tokens)).collect()
    }

    /// Writes `manifest.json` and one PNG per item under `dir`.
    pub fn write(&self, dir: &Path, cb: &Codebook) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for item in &self.items {
            write_atomic(
                &dir.join(&item.file),
                &cb.decode(&item.tokens)?.png_bytes()?,
            )?;
        }
        write_atomic(
            &dir.join("manifest.json"),
            &serde_json::to_vec_pretty(self)?,
        )
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(
            dir.join("manifest.json"),
        )?)?)
    }
}

/// Samples `n_per_prompt` images for every prompt with one adapter.
pub fn generate_pool(
    ctx: &SamplerContext<'_>,
    adapter: &AdapterParams,
    prompts: &[PromptSpec],
    n_per_prompt: usize,
    cfg: &GuidanceConfig,
    pool_id: &str,
    seed: u64,
) -> Result<SamplePool> {
    let mat = materialize(adapter)?;
    let guidance = Guidance::Adapter(&mat);
    let negative = PromptSpec::negative();
    let mut items = Vec::with_capacity(prompts.len() * n_per_prompt);
    for (prompt_id, p) in prompts.iter().enumerate() {
        for idx in 0..n_per_prompt {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, items.len()));
            let tokens = ctx.sample_tokens(&guidance, p, &negative, cfg, &mut rng)?;
            let id = item_id(pool_id, prompt_id, idx);
            items.push(PoolItem {
                file: format!("{id}.png"),
                item_id: id,
                prompt_id,
                prompt: p.text(),
                spec: p.clone(),
                tokens,
                scores: BTreeMap::new(),
            });
        }
    }
    Ok(SamplePool {
        pool_id: pool_id.into(),
        items,
    })
}

/// Fills the `text` and `style` scores of every item.
pub fn score_pool(
    pool: &mut SamplePool,
    cb: &Codebook,
    emb: &ProxyEmbedder,
    style_ref: &Image,
) -> Result<()> {
    for item in &mut pool.items {
        let img = cb.decode(&item.tokens)?;
        let t = text_score(
            std::slice::from_ref(&img),
            std::slice::from_ref(&item.spec),
            emb,
        )?;
        let s = style_score(std::slice::from_ref(&img), style_ref, emb)?;
        item.scores.insert(TEXT_SCORE.into(), t);
        item.scores.insert(STYLE_SCORE.into(), s);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Clip,
    Human,
    Random,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Clip => "clip",
            Strategy::Human => "human",
            Strategy::Random => "random",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Strategy::Clip),
            "human" => Ok(Strategy::Human),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::InvalidArgument(format!(
                "unknown strategy {s:?}, expected clip, human or random"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub pool_id: String,
    pub strategy: Strategy,
    pub chosen: Vec<String>,
    /// Unix seconds. Automated selections use 0 so reruns are byte-identical.
    pub timestamp: u64,
    #[serde(default)]
    pub annotator: Option<String>,
}

fn by_prompt(pool: &SamplePool) -> BTreeMap<usize, Vec<&PoolItem>> {
    let mut groups: BTreeMap<usize, Vec<&PoolItem>> = BTreeMap::new();
    for item in &pool.items {
        groups.entry(item.prompt_id).or_default().push(item);
    }
    groups
}

/// Checks a selection against its pool: known, distinct, non-empty ids.
pub fn validate_selection(pool: &SamplePool, sel: &SelectionRecord) -> Result<()> {
    if sel.pool_id != pool.pool_id {
        return Err(Error::InvalidArgument(format!(
            "selection is for pool {}, not {}",
            sel.pool_id, pool.pool_id
        )));
    }
    if sel.chosen.is_empty() {
        return Err(Error::InvalidArgument("selection is empty".into()));
    }
    let known: BTreeSet<&str> = pool.items.iter().map(|i| i.item_id.as_str()).collect();
    let unknown: Vec<String> = sel
        .chosen
        .iter()
        .filter(|id| !known.contains(id.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownIds(unknown));
    }
    let distinct: BTreeSet<&String> = sel.chosen.iter().collect();
    if distinct.len() != sel.chosen.len() {
        return Err(Error::InvalidArgument("selection repeats an item".into()));
    }
    Ok(())
}

/// `clip` keeps the `k` best text-scored items of every prompt (ties go to
/// the lower item id), `random` keeps `k` uniform items per prompt and
/// `human` validates and passes through `human_input`.
pub fn select(
    pool: &SamplePool,
    strategy: Strategy,
    k: usize,
    human_input: Option<&SelectionRecord>,
    rng: &mut impl Rng,
) -> Result<SelectionRecord> {
    if strategy != Strategy::Human && k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let chosen = match strategy {
        Strategy::Human => {
            let rec = human_input.ok_or_else(|| {
                Error::InvalidArgument("human selection needs a selection record".into())
            })?;
            let rec = SelectionRecord {
                strategy: Strategy::Human,
                ..rec.clone()
            };
            validate_selection(pool, &rec)?;
            return Ok(rec);
        }
        Strategy::Clip => {
            let mut chosen = Vec::new();
            for (_, mut items) in by_prompt(pool) {
                for item in &items {
                    if !item.scores.contains_key(TEXT_SCORE) {
                        return Err(Error::InvalidArgument(format!(
                            "item {} has no text score",
                            item.item_id
                        )));
                    }
                }
                items.sort_by(|a, b| {
                    b.scores[TEXT_SCORE]
                        .total_cmp(&a.scores[TEXT_SCORE])
                        .then_with(|| a.item_id.cmp(&b.item_id))
                });
                chosen.extend(items.iter().take(k).map(|i| i.item_id.clone()));
            }
            chosen
        }
        Strategy::Random => {
            let mut chosen = Vec::new();
            for (_, items) in by_prompt(pool) {
                let mut picks = sample(rng, items.len(), k.min(items.len())).into_vec();
                picks.sort_unstable();
                chosen.extend(picks.into_iter().map(|i| items[i].item_id.clone()));
            }
            chosen
        }
    };
    Ok(SelectionRecord {
        pool_id: pool.pool_id.clone(),
        strategy,
        chosen,
        timestamp: 0,
        annotator: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub item_id: String,
    pub image: Image,
    pub tokens: TokenGrid,
    pub prompt: PromptSpec,
}

/// The chosen items, decoded, with their original prompts.
pub fn build_round2(
    pool: &SamplePool,
    sel: &SelectionRecord,
    cb: &Codebook,
) -> Result<Vec<TrainingPair>> {
    validate_selection(pool, sel)?;
    sel.chosen
        .iter()
        .map(|id| {
            let item = pool.item(id).expect("validated");
            Ok(TrainingPair {
                item_id: id.clone(),
                image: cb.decode(&item.tokens)?,
                tokens: item.tokens.clone(),
                prompt: item.spec.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub strategy: Strategy,
    /// Templates with one `{}` for the style phrase.
    pub templates: Vec<String>,
    pub n_per_prompt: usize,
    /// Items kept per prompt by the clip and random strategies.
    pub k: usize,
    pub round1: AdapterConfig,
    pub round2: AdapterConfig,
    pub train: TrainConfig,
    pub guidance: GuidanceConfig,
    /// Samples per template when measuring each round.
    pub eval_per_prompt: usize,
    /// Also train round two on the original reference pair.
    pub keep_reference: bool,
    pub pool_id: String,
    pub seed: u64,
}

impl IterationConfig {
    pub fn desk(
        strategy: Strategy,
        templates: Vec<String>,
        d_model: usize,
        n_layer: usize,
        seed: u64,
    ) -> Self {
        Self {
            strategy,
            templates,
            n_per_prompt: 8,
            k: 1,
            round1: AdapterConfig::round1(d_model, n_layer),
            round2: AdapterConfig::round2(d_model, n_layer),
            train: TrainConfig::adapter_desk(seed),
            guidance: GuidanceConfig::desk(),
            eval_per_prompt: 4,
            keep_reference: false,
            pool_id: format!("{strategy}-s{seed}"),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: u32,
    pub text_score: f64,
    pub style_score: f64,
    pub seed: u64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("round,text_score,style_score,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.round, r.text_score, r.style_score, r.seed
        ));
    }
    out
}

pub struct IterationOutcome {
    pub round1: AdapterParams,
    pub pool: SamplePool,
    pub selection: SelectionRecord,
    pub round2: AdapterParams,
    pub metrics: Vec<MetricsRow>,
}

/// The reference image and prompt the first round is tuned on.
pub struct StyleReference<'a> {
    pub image: &'a Image,
    pub prompt: &'a PromptSpec,
    /// Descriptor substituted into the templates.
    pub descriptor: &'a str,
}

/// Samples every template `eval_per_prompt` times with fixed seeds and
/// scores the result.
pub fn evaluate_adapter(
    ctx: &SamplerContext<'_>,
    adapter: &AdapterParams,
    prompts: &[PromptSpec],
    style_ref: &Image,
    emb: &ProxyEmbedder,
    per_prompt: usize,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let pool = generate_pool(ctx, adapter, prompts, per_prompt, guidance, "eval", seed)?;
    let images = pool.decode(ctx.codebook)?;
    let specs: Vec<PromptSpec> = pool.items.iter().map(|i| i.spec.clone()).collect();
    Ok((
        text_score(&images, &specs, emb)?,
        style_score(&images, style_ref, emb)?,
    ))
}

fn examples_for(ctx: &SamplerContext<'_>, pairs: &[(TokenGrid, PromptSpec)]) -> Vec<Example> {
    pairs
        .iter()
        .map(|(tokens, p)| Example {
            tokens: tokens.clone(),
            text_ids: ctx.vocab.ids(p),
        })
        .collect()
}

/// Round one on the reference, a scored pool, a selection and round two on
/// the selection. `on_pool` sees the scored pool before selection; it must
/// return the record for the human strategy and is otherwise free to
/// return `None`.
pub fn run_iteration(
    ctx: &SamplerContext<'_>,
    reference: &StyleReference<'_>,
    emb: &ProxyEmbedder,
    cfg: &IterationConfig,
    on_pool: &mut dyn FnMut(&SamplePool) -> Result<Option<SelectionRecord>>,
) -> Result<IterationOutcome> {
    let prompts: Vec<PromptSpec> = cfg
        .templates
        .iter()
        .map(|t| fill_template(t, reference.descriptor))
        .collect::<Result<_>>()?;
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompt templates".into()));
    }
    let ref_tokens = ctx.codebook.encode(reference.image)?;
    let ref_pair = (ref_tokens, reference.prompt.clone());

    let tc1 = TrainConfig {
        seed: cfg.seed,
        ..cfg.train
    };
    let (round1, _) = tune_adapter(
        ctx.weights,
        &examples_for(ctx, std::slice::from_ref(&ref_pair)),
        cfg.round1,
        &tc1,
    )?;

    let mut pool = generate_pool(
        ctx,
        &round1,
        &prompts,
        cfg.n_per_prompt,
        &cfg.guidance,
        &cfg.pool_id,
        cfg.seed.wrapping_add(1),
    )?;
    score_pool(&mut pool, ctx.codebook, emb, reference.image)?;
    let human = on_pool(&pool)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let selection = select(&pool, cfg.strategy, cfg.k, human.as_ref(), &mut rng)?;

    let chosen = build_round2(&pool, &selection, ctx.codebook)?;
    let mut pairs: Vec<(TokenGrid, PromptSpec)> =
        chosen.into_iter().map(|c| (c.tokens, c.prompt)).collect();
    if cfg.keep_reference {
        pairs.push(ref_pair);
    }
    let tc2 = TrainConfig {
        seed: cfg.seed.wrapping_add(3),
        ..cfg.train
    };
    let (round2, _) = tune_adapter(ctx.weights, &examples_for(ctx, &pairs), cfg.round2, &tc2)?;

    let mut metrics = Vec::with_capacity(2);
    for (round, adapter) in [(1, &round1), (2, &round2)] {
        let (text_score, style_score) = evaluate_adapter(
            ctx,
            adapter,
            &prompts,
            reference.image,
            emb,
            cfg.eval_per_prompt,
            &cfg.guidance,
            cfg.seed.wrapping_add(4),
        )?;
        metrics.push(MetricsRow {
            round,
            text_score,
            style_score,
            seed: cfg.seed,
        });
    }
    Ok(IterationOutcome {
        round1,
        pool,
        selection,
        round2,
        metrics,
    })
}
