//! The token transformer: self-attention over visual tokens, cross-attention
//! to text embeddings, and optional residual adapters after every
//! cross-attention and MLP block.

mod forward;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use forward::{forward, forward_with_cache, ForwardCache, LogitGrid};
pub use train::{
    adapter_objective, flatten_adapter, grad_check, mask_ratio_schedule, mask_tokens, mvtm_loss,
    mvtm_loss_grad, pretrain_base, tune_adapter, unflatten_adapter, AdamConfig, Example, MaskSpec,
    TrainConfig, TrainReport, NULL_TEXT_ID,
};

pub(crate) use forward::backward;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_mlp: usize,
    /// Codebook size K; the token embedding has K + 1 rows (the last is MASK).
    pub codebook_size: usize,
    pub text_vocab: usize,
    pub text_width: usize,
    pub grid_side: usize,
}

impl ModelConfig {
    /// Reference architecture: 4 layers, width 128, 4 heads, MLP 256.
    pub fn reference(codebook_size: usize, text_vocab: usize) -> Self {
        Self {
            n_layer: 4,
            d_model: 128,
            heads: 4,
            d_mlp: 256,
            codebook_size,
            text_vocab,
            text_width: 32,
            grid_side: 8,
        }
    }

    /// A smaller model that trains in a few minutes on one CPU core.
    pub fn desk(codebook_size: usize, text_vocab: usize) -> Self {
        Self {
            n_layer: 2,
            d_model: 64,
            heads: 4,
            d_mlp: 128,
            codebook_size,
            text_vocab,
            text_width: 32,
            grid_side: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layer,
            self.d_model,
            self.heads,
            self.d_mlp,
            self.codebook_size,
            self.text_vocab,
            self.text_width,
            self.grid_side,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "model dims must be >= 1: {self:?}"
            )));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn mask_id(&self) -> usize {
        self.codebook_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    /// `fan_in × fan_out`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fan_in,
            fan_out,
            w: normal_vec(fan_in * fan_out, INIT_STD, rng),
            b: vec![0.0; fan_out],
        }
    }

    /// `x·w + b` for `rows` rows.
    pub(crate) fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.fan_out];
        crate::linalg::matmul(
            x,
            false,
            &self.w,
            false,
            &mut y,
            rows,
            self.fan_in,
            self.fan_out,
            false,
        );
        crate::linalg::add_row_bias(&mut y, &self.b);
        y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Norm {
    fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub norm_self: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub norm_cross: Norm,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_o: Linear,
    pub norm_mlp: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub cfg: ModelConfig,
    /// `(K + 1) × D`; row K embeds MASK.
    pub token_emb: Vec<f64>,
    /// `g² × D`.
    pub pos_emb: Vec<f64>,
    /// Text embedding table, `|V| × E`.
    pub text_emb: Vec<f64>,
    pub blocks: Vec<Block>,
    pub norm_out: Norm,
    /// `D × K`: MASK is never predicted.
    pub head: Linear,
}

const INIT_STD: f64 = 0.02;
const TEXT_INIT_STD: f64 = 0.5;

fn normal_vec(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

type TensorRef<'a> = (String, Vec<usize>, &'a Vec<f64>);

fn push_linear<'a>(out: &mut Vec<TensorRef<'a>>, prefix: &str, name: &str, l: &'a Linear) {
    out.push((
        format!("{prefix}.{name}.w"),
        vec![l.fan_in, l.fan_out],
        &l.w,
    ));
    out.push((format!("{prefix}.{name}.b"), vec![l.fan_out], &l.b));
}

fn push_norm<'a>(out: &mut Vec<TensorRef<'a>>, prefix: &str, name: &str, n: &'a Norm) {
    out.push((format!("{prefix}.{name}.gain"), vec![n.gain.len()], &n.gain));
    out.push((format!("{prefix}.{name}.bias"), vec![n.bias.len()], &n.bias));
}

impl ModelWeights {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, e) = (cfg.d_model, cfg.d_mlp, cfg.text_width);
        let token_emb = normal_vec((cfg.codebook_size + 1) * d, INIT_STD, &mut rng);
        let pos_emb = normal_vec(cfg.positions() * d, INIT_STD, &mut rng);
        let text_emb = normal_vec(cfg.text_vocab * e, TEXT_INIT_STD, &mut rng);
        let blocks = (0..cfg.n_layer)
            .map(|_| Block {
                norm_self: Norm::new(d),
                q: Linear::new(d, d, &mut rng),
                k: Linear::new(d, d, &mut rng),
                v: Linear::new(d, d, &mut rng),
                o: Linear::new(d, d, &mut rng),
                norm_cross: Norm::new(d),
                cross_q: Linear::new(d, d, &mut rng),
                cross_k: Linear::new(e, d, &mut rng),
                cross_v: Linear::new(e, d, &mut rng),
                cross_o: Linear::new(d, d, &mut rng),
                norm_mlp: Norm::new(d),
                fc1: Linear::new(d, f, &mut rng),
                fc2: Linear::new(f, d, &mut rng),
            })
            .collect();
        Ok(Self {
            cfg,
            token_emb,
            pos_emb,
            text_emb,
            blocks,
            norm_out: Norm::new(d),
            head: Linear::new(d, cfg.codebook_size, &mut rng),
        })
    }

    /// Every tensor as `(name, shape, values)` in a fixed order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let c = &self.cfg;
        let mut out = vec![
            (
                "token_emb".to_string(),
                vec![c.codebook_size + 1, c.d_model],
                &self.token_emb,
            ),
            (
                "pos_emb".to_string(),
                vec![c.positions(), c.d_model],
                &self.pos_emb,
            ),
            (
                "text_emb".to_string(),
                vec![c.text_vocab, c.text_width],
                &self.text_emb,
            ),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            for (name, l) in [
                ("q", &b.q),
                ("k", &b.k),
                ("v", &b.v),
                ("o", &b.o),
                ("cross_q", &b.cross_q),
                ("cross_k", &b.cross_k),
                ("cross_v", &b.cross_v),
                ("cross_o", &b.cross_o),
                ("fc1", &b.fc1),
                ("fc2", &b.fc2),
            ] {
                push_linear(&mut out, &p, name, l);
            }
            for (name, n) in [
                ("norm_self", &b.norm_self),
                ("norm_cross", &b.norm_cross),
                ("norm_mlp", &b.norm_mlp),
            ] {
                push_norm(&mut out, &p, name, n);
            }
        }
        push_norm(&mut out, "model", "norm_out", &self.norm_out);
        push_linear(&mut out, "model", "head", &self.head);
        out
    }

    /// Mutable tensors in the same order as [`ModelWeights::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> =
            vec![&mut self.token_emb, &mut self.pos_emb, &mut self.text_emb];
        for b in self.blocks.iter_mut() {
            for lin in [
                &mut b.q,
                &mut b.k,
                &mut b.v,
                &mut b.o,
                &mut b.cross_q,
                &mut b.cross_k,
                &mut b.cross_v,
                &mut b.cross_o,
                &mut b.fc1,
                &mut b.fc2,
            ] {
                out.push(&mut lin.w);
                out.push(&mut lin.b);
            }
            for norm in [&mut b.norm_self, &mut b.norm_cross, &mut b.norm_mlp] {
                out.push(&mut norm.gain);
                out.push(&mut norm.bias);
            }
        }
        out.push(&mut self.norm_out.gain);
        out.push(&mut self.norm_out.bias);
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Rebuilds weights from named tensors, checking every shape.
    pub fn from_tensors(
        cfg: ModelConfig,
        mut get: impl FnMut(&str) -> Option<Vec<f64>>,
    ) -> Result<Self> {
        let mut w = Self::init(cfg, 0)?;
        let names: Vec<(String, Vec<usize>)> =
            w.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        for ((name, shape), slot) in names.into_iter().zip(w.tensors_mut()) {
            let t = get(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "{name}: {} values, expected {shape:?}",
                    t.len()
                )));
            }
            *slot = t;
        }
        Ok(w)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_order_is_consistent() {
        let cfg = ModelConfig::desk(16, 10);
        let mut w = ModelWeights::init(cfg, 0).unwrap();
        let lens: Vec<usize> = w.tensors().iter().map(|(_, _, t)| t.len()).collect();
        let shapes: Vec<usize> = w
            .tensors()
            .iter()
            .map(|(_, s, _)| s.iter().product())
            .collect();
        assert_eq!(lens, shapes);
        let lens_mut: Vec<usize> = w.tensors_mut().iter().map(|t| t.len()).collect();
        assert_eq!(lens, lens_mut);
        let rebuilt = ModelWeights::from_tensors(cfg, |name| {
            w.tensors()
                .into_iter()
                .find(|(n, _, _)| n == name)
                .map(|(_, _, t)| t.clone())
        })
        .unwrap();
        assert_eq!(rebuilt, w);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = ModelConfig::desk(16, 10);
        cfg.heads = 5;
        assert!(ModelWeights::init(cfg, 0).is_err());
    }
}
