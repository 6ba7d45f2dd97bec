//! End-to-end setup shared by the command line and the acceptance suite:
//! corpus, tokenizer, scorers and the pretrained base model.

use serde::{Deserialize, Serialize};

use crate::data::{split_train_test, train_oracles, Catalog, LabeledExample, Oracles};
use crate::error::Result;
use crate::feedback::{example_prompt, train_proxy, ProxyEmbedder};
use crate::model::{pretrain_base, Example, ModelConfig, ModelWeights, TrainConfig, TrainReport};
use crate::text::Vocabulary;
use crate::tokenizer::{fit_codebook, Codebook};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seeds_per_pair: u64,
    pub codebook_size: usize,
    pub patch_size: usize,
    pub pretrain_steps: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seeds_per_pair: 20,
            codebook_size: 128,
            patch_size: 4,
            pretrain_steps: 12000,
            seed: 0,
        }
    }
}

/// Training split plus the codebook reconstruction of every training image,
/// so scorers see the artifacts sampled images carry.
pub fn with_reconstructions(
    examples: &[LabeledExample],
    cb: &Codebook,
) -> Result<Vec<LabeledExample>> {
    let mut out = examples.to_vec();
    for e in examples {
        out.push(LabeledExample {
            image: cb.decode(&cb.encode(&e.image)?)?,
            ..e.clone()
        });
    }
    Ok(out)
}

/// Token grids and prompts for every pretraining pair. The prompt phrasing
/// cycles with the render seed.
pub fn pretraining_examples(
    cat: &Catalog,
    data: &[LabeledExample],
    cb: &Codebook,
    vocab: &Vocabulary,
) -> Result<Vec<Example>> {
    data.iter()
        .filter(|e| cat.is_pretraining_pair(e.style_id, e.content_id))
        .map(|e| {
            let p = example_prompt(cat, e.style_id, e.content_id, e.seed)?;
            Ok(Example {
                tokens: cb.encode(&e.image)?,
                text_ids: vocab.ids(&p),
            })
        })
        .collect()
}

pub fn fit_scorers(
    cat: &Catalog,
    vocab: &Vocabulary,
    data: &[LabeledExample],
    cb: &Codebook,
    seed: u64,
) -> Result<(Oracles, ProxyEmbedder)> {
    let (train, test) = split_train_test(data);
    let train: Vec<LabeledExample> = train.into_iter().cloned().collect();
    let test: Vec<LabeledExample> = test.into_iter().cloned().collect();
    let augmented = with_reconstructions(&train, cb)?;
    let oracles = train_oracles(&augmented)?;
    let proxy = train_proxy(cat, vocab, &augmented, &test, seed)?;
    Ok((oracles, proxy))
}

/// Everything downstream stages need.
pub struct Pipeline {
    pub catalog: Catalog,
    pub data: Vec<LabeledExample>,
    pub codebook: Codebook,
    pub vocab: Vocabulary,
    pub oracles: Oracles,
    pub proxy: ProxyEmbedder,
    pub weights: ModelWeights,
    pub pretrain_report: TrainReport,
}

impl Pipeline {
    pub fn build(cfg: &PipelineConfig) -> Result<Self> {
        let catalog = Catalog::default();
        let data = catalog.generate(cfg.seeds_per_pair);
        let images: Vec<_> = data.iter().map(|e| e.image.clone()).collect();
        let codebook = fit_codebook(&images, cfg.codebook_size, cfg.patch_size, cfg.seed)?;
        let vocab = Vocabulary::from_catalog(&catalog);
        let (oracles, proxy) = fit_scorers(&catalog, &vocab, &data, &codebook, cfg.seed)?;
        let examples = pretraining_examples(&catalog, &data, &codebook, &vocab)?;
        let mcfg = ModelConfig::desk(cfg.codebook_size, vocab.len());
        let (weights, pretrain_report) = pretrain_base(
            &examples,
            mcfg,
            &TrainConfig::pretrain(cfg.pretrain_steps, cfg.seed),
        )?;
        Ok(Self {
            catalog,
            data,
            codebook,
            vocab,
            oracles,
            proxy,
            weights,
            pretrain_report,
        })
    }
}
