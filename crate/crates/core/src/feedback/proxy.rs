//! Two-tower linear image/text embedder trained contrastively on the labeled
//! corpus. Stands in for a pretrained image-text model when scoring samples.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::templates::example_prompt;
use crate::data::{extract_features, Catalog, LabeledExample};
use crate::error::{Error, Result};
use crate::linalg::{dot, matmul};
use crate::raster::Image;
use crate::text::{PromptSpec, Vocabulary};

const EMBED_DIM: usize = 32;
const TEMPERATURE: f64 = 0.1;
const ITERATIONS: usize = 300;
const LEARNING_RATE: f64 = 0.01;
const VARIANCE_FLOOR: f64 = 1e-4;
/// Fraction of held-out (matched, mismatched) comparisons the matched prompt
/// must win.
pub const GATE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyEmbedder {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `features × dim`.
    pub image_proj: Vec<f64>,
    /// `|V| × dim`.
    pub text_proj: Vec<f64>,
    pub vocab_words: Vec<String>,
    /// Held-out gate score measured at fit time.
    pub held_out_agreement: f64,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Per-word frequencies of a prompt over the vocabulary.
fn bag_of_words(p: &PromptSpec, vocab: &Vocabulary) -> Vec<f64> {
    let ids = vocab.ids(p);
    let mut bag = vec![0.0; vocab.len()];
    for &id in &ids {
        bag[id] += 1.0 / ids.len() as f64;
    }
    bag
}

impl ProxyEmbedder {
    fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_words(self.vocab_words.clone()).expect("stored vocabulary is valid")
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    /// Unit-norm embedding of an already extracted feature vector.
    pub fn embed_features(&self, features: &[f64]) -> Vec<f64> {
        let x = self.standardize(features);
        let mut z = vec![0.0; self.dim];
        matmul(
            &x,
            false,
            &self.image_proj,
            false,
            &mut z,
            1,
            x.len(),
            self.dim,
            false,
        );
        normalize(&mut z);
        z
    }

    pub fn embed_image(&self, img: &Image) -> Vec<f64> {
        self.embed_features(&extract_features(img))
    }

    /// Unit-norm embedding of a word-frequency vector over the vocabulary.
    pub fn embed_bag(&self, bag: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        matmul(
            bag,
            false,
            &self.text_proj,
            false,
            &mut y,
            1,
            bag.len(),
            self.dim,
            false,
        );
        normalize(&mut y);
        y
    }

    pub fn embed_text(&self, p: &PromptSpec) -> Vec<f64> {
        self.embed_bag(&bag_of_words(p, &self.vocabulary()))
    }
}

/// Image-prompt cosine, averaged over pairs.
pub fn text_score(images: &[Image], prompts: &[PromptSpec], emb: &ProxyEmbedder) -> Result<f64> {
    if images.is_empty() || images.len() != prompts.len() {
        return Err(Error::InvalidArgument(format!(
            "text score needs equal non-empty lists, got {} images and {} prompts",
            images.len(),
            prompts.len()
        )));
    }
    let vocab = emb.vocabulary();
    let total: f64 = images
        .iter()
        .zip(prompts)
        .map(|(img, p)| {
            dot(
                &emb.embed_image(img),
                &emb.embed_bag(&bag_of_words(p, &vocab)),
            )
        })
        .sum();
    Ok(total / images.len() as f64)
}

/// Image-image cosine against the style reference, averaged over images.
pub fn style_score(images: &[Image], style_ref: &Image, emb: &ProxyEmbedder) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument(
            "style score needs at least one image".into(),
        ));
    }
    let r = emb.embed_image(style_ref);
    let total: f64 = images
        .iter()
        .map(|img| dot(&emb.embed_image(img), &r))
        .sum();
    Ok(total / images.len() as f64)
}

/// One training image with the label of the (style, content) pair it shows.
struct Sample {
    features: Vec<f64>,
    label: usize,
}

/// Fits the embedder on `train` (typically renders plus their codebook
/// reconstructions) and gates it on `held_out`.
pub fn train_proxy(
    cat: &Catalog,
    vocab: &Vocabulary,
    train: &[LabeledExample],
    held_out: &[LabeledExample],
    seed: u64,
) -> Result<ProxyEmbedder> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::InvalidArgument(
            "proxy needs train and held-out examples".into(),
        ));
    }
    let n_contents = cat.contents.len();
    let label = |s: usize, c: usize| s * n_contents + c;
    let samples: Vec<Sample> = train
        .iter()
        .map(|e| Sample {
            features: extract_features(&e.image),
            label: label(e.style_id, e.content_id),
        })
        .collect();

    // Every phrasing of every (style, content) pair is a text.
    let mut texts: Vec<(usize, Vec<f64>)> = Vec::new();
    for s in 0..cat.styles.len() {
        for c in 0..n_contents {
            for phrasing in 0..super::templates::SHAPE_PHRASINGS.len() {
                let p = example_prompt(cat, s, c, phrasing as u64)?;
                texts.push((label(s, c), bag_of_words(&p, vocab)));
            }
        }
    }

    let nf = samples[0].features.len();
    let n = samples.len() as f64;
    let mut mean = vec![0.0; nf];
    for s in &samples {
        mean.iter_mut()
            .zip(&s.features)
            .for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; nf];
    for s in &samples {
        for ((acc, v), m) in var.iter_mut().zip(&s.features).zip(&mean) {
            *acc += (v - m) * (v - m) / n;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v + VARIANCE_FLOOR).sqrt())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 0.1).expect("valid std");
    let d = EMBED_DIM;
    let nv = vocab.len();
    let mut emb = ProxyEmbedder {
        dim: d,
        mean,
        scale,
        image_proj: (0..nf * d).map(|_| init.sample(&mut rng)).collect(),
        text_proj: (0..nv * d).map(|_| init.sample(&mut rng)).collect(),
        vocab_words: vocab.words().to_vec(),
        held_out_agreement: 0.0,
    };

    let ni = samples.len();
    let nt = texts.len();
    let x: Vec<f64> = samples
        .iter()
        .flat_map(|s| emb.standardize(&s.features))
        .collect();
    let b: Vec<f64> = texts.iter().flat_map(|t| t.1.iter().copied()).collect();
    let img_labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let txt_labels: Vec<usize> = texts.iter().map(|t| t.0).collect();

    let np = emb.image_proj.len() + emb.text_proj.len();
    let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
    for t in 1..=ITERATIONS {
        let (gi, gt) = contrastive_grad(&emb, &x, &b, &img_labels, &txt_labels, ni, nt, nf, nv);
        let (b1, b2) = (0.9f64, 0.999f64);
        let lr = LEARNING_RATE * (1.0 - b2.powi(t as i32)).sqrt() / (1.0 - b1.powi(t as i32));
        let params = emb.image_proj.iter_mut().chain(emb.text_proj.iter_mut());
        for (k, (p, g)) in params.zip(gi.iter().chain(&gt)).enumerate() {
            m1[k] = b1 * m1[k] + (1.0 - b1) * g;
            m2[k] = b2 * m2[k] + (1.0 - b2) * g * g;
            *p -= lr * m1[k] / (m2[k].sqrt() + 1e-8);
        }
    }

    emb.held_out_agreement = held_out_agreement(&emb, cat, vocab, held_out)?;
    if emb.held_out_agreement < GATE {
        return Err(Error::Gate(format!(
            "proxy embedder agrees with held-out labels on {:.1}% of comparisons, need {:.0}%",
            100.0 * emb.held_out_agreement,
            100.0 * GATE
        )));
    }
    Ok(emb)
}

fn unit_rows(u: &[f64], rows: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut z = u.to_vec();
    let mut norms = vec![0.0; rows];
    for (r, row) in z.chunks_exact_mut(d).enumerate() {
        norms[r] = normalize(row);
    }
    (z, norms)
}

fn unit_rows_backward(dz: &mut [f64], z: &[f64], norms: &[f64], d: usize) {
    for (r, (g, zr)) in dz.chunks_exact_mut(d).zip(z.chunks_exact(d)).enumerate() {
        let proj = dot(g, zr);
        for (gi, zi) in g.iter_mut().zip(zr) {
            *gi = (*gi - zi * proj) / norms[r].max(1e-12);
        }
    }
}

/// Gradient of the symmetric supervised contrastive loss, where every text
/// and image sharing a label counts as a positive.
#[allow(clippy::too_many_arguments)]
fn contrastive_grad(
    emb: &ProxyEmbedder,
    x: &[f64],
    b: &[f64],
    img_labels: &[usize],
    txt_labels: &[usize],
    ni: usize,
    nt: usize,
    nf: usize,
    nv: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = emb.dim;
    let mut u = vec![0.0; ni * d];
    matmul(x, false, &emb.image_proj, false, &mut u, ni, nf, d, false);
    let mut v = vec![0.0; nt * d];
    matmul(b, false, &emb.text_proj, false, &mut v, nt, nv, d, false);
    let (z, zn) = unit_rows(&u, ni, d);
    let (y, yn) = unit_rows(&v, nt, d);
    let mut s = vec![0.0; ni * nt];
    matmul(&z, false, &y, true, &mut s, ni, d, nt, false);
    s.iter_mut().for_each(|v| *v /= TEMPERATURE);

    let mut ds = vec![0.0; ni * nt];
    // Image to text.
    for i in 0..ni {
        let row = &s[i * nt..(i + 1) * nt];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let all: f64 = e.iter().sum();
        let pos: f64 = (0..nt)
            .filter(|&j| txt_labels[j] == img_labels[i])
            .map(|j| e[j])
            .sum();
        for j in 0..nt {
            let p_pos = if txt_labels[j] == img_labels[i] {
                e[j] / pos
            } else {
                0.0
            };
            ds[i * nt + j] += (e[j] / all - p_pos) / (2.0 * ni as f64);
        }
    }
    // Text to image.
    for j in 0..nt {
        let mx = (0..ni)
            .map(|i| s[i * nt + j])
            .fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = (0..ni).map(|i| (s[i * nt + j] - mx).exp()).collect();
        let all: f64 = e.iter().sum();
        let pos: f64 = (0..ni)
            .filter(|&i| img_labels[i] == txt_labels[j])
            .map(|i| e[i])
            .sum();
        if pos == 0.0 {
            continue;
        }
        for i in 0..ni {
            let p_pos = if img_labels[i] == txt_labels[j] {
                e[i] / pos
            } else {
                0.0
            };
            ds[i * nt + j] += (e[i] / all - p_pos) / (2.0 * nt as f64);
        }
    }
    ds.iter_mut().for_each(|v| *v /= TEMPERATURE);

    let mut dz = vec![0.0; ni * d];
    matmul(&ds, false, &y, false, &mut dz, ni, nt, d, false);
    let mut dy = vec![0.0; nt * d];
    matmul(&ds, true, &z, false, &mut dy, nt, ni, d, false);
    unit_rows_backward(&mut dz, &z, &zn, d);
    unit_rows_backward(&mut dy, &y, &yn, d);
    let mut gi = vec![0.0; nf * d];
    matmul(x, true, &dz, false, &mut gi, nf, ni, d, false);
    let mut gt = vec![0.0; nv * d];
    matmul(b, true, &dy, false, &mut gt, nv, nt, d, false);
    (gi, gt)
}

/// For each held-out image, compares its own prompt against a prompt with
/// the style swapped and one with the content swapped. Returns the fraction
/// of comparisons the matching prompt wins.
fn held_out_agreement(
    emb: &ProxyEmbedder,
    cat: &Catalog,
    vocab: &Vocabulary,
    held_out: &[LabeledExample],
) -> Result<f64> {
    let (ns, nc) = (cat.styles.len(), cat.contents.len());
    let mut cache: BTreeMap<(usize, usize, u64), Vec<f64>> = BTreeMap::new();
    let mut text = |s: usize, c: usize, ph: u64| -> Result<Vec<f64>> {
        let key = (s, c, ph % 5);
        if let Some(v) = cache.get(&key) {
            return Ok(v.clone());
        }
        let v = emb.embed_bag(&bag_of_words(&example_prompt(cat, s, c, ph)?, vocab));
        cache.insert(key, v.clone());
        Ok(v)
    };
    let (mut wins, mut total) = (0usize, 0usize);
    for e in held_out {
        let z = emb.embed_image(&e.image);
        let own = dot(&z, &text(e.style_id, e.content_id, e.seed)?);
        for (s, c) in [
            ((e.style_id + 1) % ns, e.content_id),
            (e.style_id, (e.content_id + 1) % nc),
        ] {
            total += 1;
            wins += usize::from(own > dot(&z, &text(s, c, e.seed)?));
        }
    }
    Ok(wins as f64 / total as f64)
}
