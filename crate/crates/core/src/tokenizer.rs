//! Patch k-means tokenizer: images to discrete token grids and back.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;

/// Square grid of token ids. Ids are in `[0, vocab)`; `vocab` itself is the
/// MASK sentinel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub side: usize,
    pub vocab: usize,
    pub tokens: Vec<usize>,
}

impl TokenGrid {
    pub fn new(side: usize, vocab: usize, tokens: Vec<usize>) -> Result<Self> {
        if tokens.len() != side * side {
            return Err(Error::Shape(format!(
                "{} tokens for a {side}x{side} grid",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t > vocab) {
            return Err(Error::InvalidArgument(format!(
                "token {t} outside [0, {vocab}]"
            )));
        }
        Ok(Self {
            side,
            vocab,
            tokens,
        })
    }

    pub fn all_masked(side: usize, vocab: usize) -> Self {
        Self {
            side,
            vocab,
            tokens: vec![vocab; side * side],
        }
    }

    pub fn mask_id(&self) -> usize {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.vocab
    }

    pub fn masked_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.vocab).count()
    }

    pub fn is_complete(&self) -> bool {
        self.masked_count() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub patch_size: usize,
    pub k: usize,
    /// `k × patch_len`, row-major; a patch is flattened as (row, col, channel).
    pub centroids: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    #[serde(rename = "K")]
    k: usize,
    patch_size: usize,
    version: u32,
}

const CODEBOOK_VERSION: u32 = 1;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Extracts the non-overlapping `patch_size` patches of `img` in raster order.
pub fn patches(img: &Image, patch_size: usize) -> Result<Vec<Vec<f64>>> {
    if patch_size == 0
        || !img.height.is_multiple_of(patch_size)
        || !img.width.is_multiple_of(patch_size)
    {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {patch_size}-pixel patches",
            img.height, img.width
        )));
    }
    let (gh, gw) = (img.height / patch_size, img.width / patch_size);
    let mut out = Vec::with_capacity(gh * gw);
    for py in 0..gh {
        for px in 0..gw {
            let mut p = Vec::with_capacity(patch_size * patch_size * 3);
            for y in 0..patch_size {
                let row = (py * patch_size + y) * img.width + px * patch_size;
                p.extend_from_slice(&img.pixels[row * 3..(row + patch_size) * 3]);
            }
            out.push(p);
        }
    }
    Ok(out)
}

impl Codebook {
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn centroid(&self, i: usize) -> &[f64] {
        let p = self.patch_len();
        &self.centroids[i * p..(i + 1) * p]
    }

    /// Index of the nearest centroid and its squared distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, patch: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for i in 0..self.k {
            let d = sq_dist(patch, self.centroid(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn encode(&self, img: &Image) -> Result<TokenGrid> {
        if img.height != img.width {
            return Err(Error::Shape("only square images are supported".into()));
        }
        let ps = patches(img, self.patch_size)?;
        let side = img.height / self.patch_size;
        Ok(TokenGrid {
            side,
            vocab: self.k,
            tokens: ps.iter().map(|p| self.nearest(p).0).collect(),
        })
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Image> {
        if grid.vocab != self.k {
            return Err(Error::Shape(format!(
                "grid vocab {} vs codebook K {}",
                grid.vocab, self.k
            )));
        }
        let masked = grid.masked_count();
        if masked > 0 {
            return Err(Error::IncompleteGrid(masked));
        }
        let ps = self.patch_size;
        let side = grid.side * ps;
        let mut img = Image::new(side, side);
        for (i, &t) in grid.tokens.iter().enumerate() {
            let (py, px) = (i / grid.side, i % grid.side);
            let c = self.centroid(t);
            for y in 0..ps {
                let row = (py * ps + y) * side + px * ps;
                img.pixels[row * 3..(row + ps) * 3]
                    .copy_from_slice(&c[y * ps * 3..(y + 1) * ps * 3]);
            }
        }
        Ok(img)
    }

    /// Writes `[u32 LE header length][JSON header][K·P little-endian f32]`.
    /// Centroids are narrowed to `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&CodebookHeader {
            k: self.k,
            patch_size: self.patch_size,
            version: CODEBOOK_VERSION,
        })?;
        let mut out = Vec::with_capacity(4 + header.len() + self.centroids.len() * 4);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for &c in &self.centroids {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("codebook: {m}"));
        if bytes.len() < 4 {
            return Err(bad("truncated header length"));
        }
        let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let header: CodebookHeader = serde_json::from_slice(
            bytes
                .get(4..4 + hlen)
                .ok_or_else(|| bad("truncated header"))?,
        )?;
        if header.version != CODEBOOK_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let n = header.k * header.patch_size * header.patch_size * 3;
        let payload = &bytes[4 + hlen..];
        if payload.len() != n * 4 {
            return Err(bad(&format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                n * 4
            )));
        }
        let centroids = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            patch_size: header.patch_size,
            k: header.k,
            centroids,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const MAX_ITERS: usize = 100;

/// Weighted Lloyd k-means over the distinct patches of `images`, seeded with
/// k-means++ from `seed`.
pub fn fit_codebook(images: &[Image], k: usize, patch_size: usize, seed: u64) -> Result<Codebook> {
    if k < 2 {
        return Err(Error::InvalidArgument("codebook needs K >= 2".into()));
    }
    // Distinct patches in a canonical (bitwise sorted) order with counts.
    let mut distinct: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    for img in images {
        for p in patches(img, patch_size)? {
            *distinct
                .entry(p.iter().map(|v| v.to_bits()).collect())
                .or_insert(0.0) += 1.0;
        }
    }
    if distinct.len() < k {
        return Err(Error::NotEnoughPatches {
            found: distinct.len(),
            needed: k,
        });
    }
    let (points, weights): (Vec<Vec<f64>>, Vec<f64>) = distinct
        .into_iter()
        .map(|(bits, w)| (bits.into_iter().map(f64::from_bits).collect(), w))
        .unzip();
    let plen = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ initialization.
    let mut centers: Vec<usize> = vec![rng.gen_range(0..points.len())];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &points[centers[0]]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().zip(&weights).map(|(d, w)| d * w).sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, (d, w)) in d2.iter().zip(&weights).enumerate() {
            if *d == 0.0 {
                continue;
            }
            target -= d * w;
            if target <= 0.0 {
                pick = Some(i);
                break;
            }
        }
        // Rounding can leave `target` slightly positive; fall back to the
        // farthest point.
        let pick = pick.unwrap_or_else(|| farthest(&d2));
        centers.push(pick);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
    }
    let mut cb = Codebook {
        patch_size,
        k,
        centroids: centers
            .iter()
            .flat_map(|&i| points[i].iter().copied())
            .collect(),
    };

    let mut assign = vec![usize::MAX; points.len()];
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        let mut dist = vec![0.0; points.len()];
        for (i, p) in points.iter().enumerate() {
            let (c, d) = cb.nearest(p);
            dist[i] = d;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        // Mean as `first + Σ w (x − first) / Σ w` so a cluster of identical
        // patches reproduces the patch exactly.
        let mut first = vec![usize::MAX; k];
        let mut acc = vec![0.0; k * plen];
        let mut wsum = vec![0.0; k];
        for (i, &c) in assign.iter().enumerate() {
            if first[c] == usize::MAX {
                first[c] = i;
            }
            let r = &points[first[c]];
            for (j, (x, x0)) in points[i].iter().zip(r).enumerate() {
                acc[c * plen + j] += weights[i] * (x - x0);
            }
            wsum[c] += weights[i];
        }
        for c in 0..k {
            if first[c] == usize::MAX {
                // Empty cluster: re-seed from the patch farthest from its centroid.
                let far = farthest(&dist);
                cb.centroids[c * plen..(c + 1) * plen].copy_from_slice(&points[far]);
                dist[far] = 0.0;
                assign.iter_mut().for_each(|a| {
                    if *a == c {
                        *a = usize::MAX;
                    }
                });
                continue;
            }
            let r = &points[first[c]];
            for j in 0..plen {
                cb.centroids[c * plen + j] = (r[j] + acc[c * plen + j] / wsum[c]).clamp(0.0, 1.0);
            }
        }
    }
    Ok(cb)
}

fn farthest(d: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in d.iter().enumerate() {
        if v > d[best] {
            best = i;
        }
    }
    best
}
