use serde::{Deserialize, Serialize};

use super::{extract_features, LabeledExample};
use crate::error::{Error, Result};
use crate::linalg::softmax_in_place;
use crate::raster::Image;

const ITERATIONS: usize = 400;
const LEARNING_RATE: f64 = 0.05;
const L2: f64 = 1e-4;
const VARIANCE_FLOOR: f64 = 1e-4;

/// Multinomial logistic regression over standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub n_classes: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `n_classes × n_features`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Oracle {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[usize],
        n_classes: usize,
        what: &'static str,
    ) -> Result<Self> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{what}: empty or mismatched training set"
            )));
        }
        let mut counts = vec![0usize; n_classes];
        for &l in labels {
            if l >= n_classes {
                return Err(Error::InvalidArgument(format!(
                    "{what}: label {l} >= {n_classes}"
                )));
            }
            counts[l] += 1;
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::MissingClass { what, class });
        }

        let nf = features[0].len();
        let n = features.len() as f64;
        let mut mean = vec![0.0; nf];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; nf];
        for f in features {
            for ((s, v), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // The variance floor keeps near-constant features (a colour bin hit by
        // a handful of pixels) from dominating after standardization.
        for s in scale.iter_mut() {
            *s = 1.0 / (*s + VARIANCE_FLOOR).sqrt();
        }
        let xs: Vec<Vec<f64>> = features
            .iter()
            .map(|f| {
                f.iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (v - m) * s)
                    .collect()
            })
            .collect();

        let mut oracle = Self {
            n_classes,
            mean,
            scale,
            weights: vec![0.0; n_classes * nf],
            bias: vec![0.0; n_classes],
        };

        // Full-batch Adam on the mean cross-entropy plus an L2 penalty.
        let np = oracle.weights.len() + n_classes;
        let (mut m1, mut m2) = (vec![0.0; np], vec![0.0; np]);
        let mut probs = vec![0.0; n_classes];
        for t in 1..=ITERATIONS {
            let mut grad = vec![0.0; np];
            for (x, &y) in xs.iter().zip(labels) {
                oracle.logits_std(x, &mut probs);
                softmax_in_place(&mut probs);
                probs[y] -= 1.0;
                for (c, &p) in probs.iter().enumerate() {
                    let row = &mut grad[c * nf..(c + 1) * nf];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += p * xi / n;
                    }
                    grad[n_classes * nf + c] += p / n;
                }
            }
            for (g, w) in grad.iter_mut().zip(&oracle.weights) {
                *g += L2 * w;
            }
            let (b1, b2) = (0.9f64, 0.999f64);
            let lr = LEARNING_RATE * (1.0 - b2.powi(t as i32)).sqrt() / (1.0 - b1.powi(t as i32));
            for i in 0..np {
                m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
                m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
                let step = lr * m1[i] / (m2[i].sqrt() + 1e-8);
                if i < oracle.weights.len() {
                    oracle.weights[i] -= step;
                } else {
                    oracle.bias[i - oracle.weights.len()] -= step;
                }
            }
        }
        Ok(oracle)
    }

    fn logits_std(&self, x: &[f64], out: &mut [f64]) {
        let nf = self.mean.len();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.bias[c] + crate::linalg::dot(&self.weights[c * nf..(c + 1) * nf], x);
        }
    }

    pub fn predict_proba_features(&self, features: &[f64]) -> Vec<f64> {
        let x: Vec<f64> = features
            .iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect();
        let mut p = vec![0.0; self.n_classes];
        self.logits_std(&x, &mut p);
        softmax_in_place(&mut p);
        p
    }

    pub fn predict_proba(&self, img: &Image) -> Vec<f64> {
        self.predict_proba_features(&extract_features(img))
    }

    pub fn predict(&self, img: &Image) -> usize {
        argmax(&self.predict_proba(img))
    }

    /// Fraction of `(image, label)` pairs classified correctly.
    pub fn accuracy<'a>(&self, pairs: impl IntoIterator<Item = (&'a Image, usize)>) -> f64 {
        let (mut hit, mut n) = (0usize, 0usize);
        for (img, label) in pairs {
            n += 1;
            hit += usize::from(self.predict(img) == label);
        }
        if n == 0 {
            0.0
        } else {
            hit as f64 / n as f64
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracles {
    pub style: Oracle,
    pub content: Oracle,
}

/// Fits the style and content classifiers. Class counts are taken from the
/// largest label present; a gap in the label range is an error.
pub fn train_oracles(dataset: &[LabeledExample]) -> Result<Oracles> {
    let feats: Vec<Vec<f64>> = dataset.iter().map(|e| extract_features(&e.image)).collect();
    let styles: Vec<usize> = dataset.iter().map(|e| e.style_id).collect();
    let contents: Vec<usize> = dataset.iter().map(|e| e.content_id).collect();
    let ns = styles.iter().max().map_or(0, |m| m + 1);
    let nc = contents.iter().max().map_or(0, |m| m + 1);
    Ok(Oracles {
        style: Oracle::fit(&feats, &styles, ns, "style oracle")?,
        content: Oracle::fit(&feats, &contents, nc, "content oracle")?,
    })
}
