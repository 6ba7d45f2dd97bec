//! Residual bottleneck adapters and their (optionally layer-shared) weight
//! generator.
//!
//! Each transformer layer carries two adapter sites: one after the
//! cross-attention block and one after the MLP block. A site at layer `l`
//! maps a row `x` of width `D` to `x + GELU(x·wd[l])·wu[l]` with
//! `wd[l]: D×H` and `wu[l]: H×D`.
//!
//! In shared mode the per-layer weights are generated from one base table
//! plus a per-layer correction broadcast over the other axis:
//! `wd[l][d][h] = base_d[d][h] + depth_d[l][h]` and
//! `wu[l][h][d] = base_u[h][d] + depth_u[l][d]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gelu, matmul};

pub const SITES_PER_LAYER: usize = 2;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d_emb: usize,
    pub d_prj: usize,
    pub n_layer: usize,
    pub is_shared: bool,
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.d_prj == 0 || self.n_layer == 0 {
            return Err(Error::InvalidArgument(format!(
                "adapter dims must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    /// Round-one default: small shared adapters.
    pub fn round1(d_emb: usize, n_layer: usize) -> Self {
        Self {
            d_emb,
            d_prj: 4,
            n_layer,
            is_shared: true,
        }
    }

    /// Round-two default: wider, unshared adapters.
    pub fn round2(d_emb: usize, n_layer: usize) -> Self {
        Self {
            d_emb,
            d_prj: 32,
            n_layer,
            is_shared: false,
        }
    }
}

/// Trainable parameters of one adapter site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SiteParams {
    /// `wd: L×D×H`, `wu: L×H×D`.
    Unshared { wd: Vec<f64>, wu: Vec<f64> },
    /// `base_d: D×H`, `base_u: H×D`, `depth_d: L×H`, `depth_u: L×D`.
    Shared {
        base_d: Vec<f64>,
        base_u: Vec<f64>,
        depth_d: Vec<f64>,
        depth_u: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub cfg: AdapterConfig,
    pub sites: [SiteParams; SITES_PER_LAYER],
}

/// Per-layer, per-site weights ready to apply.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterializedAdapters {
    pub cfg: AdapterConfig,
    /// Indexed `[layer][site]`.
    pub layers: Vec<[SiteWeights; SITES_PER_LAYER]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteWeights {
    /// `D×H`.
    pub wd: Vec<f64>,
    /// `H×D`.
    pub wu: Vec<f64>,
}

fn truncated_normal(n: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Up-projection tables start at zero (so every site is the identity map);
/// down-projection tables are drawn from a normal with σ = 0.02 truncated at
/// ±2σ. In shared mode the depth corrections start at zero.
pub fn init_adapter(cfg: AdapterConfig, seed: u64) -> Result<AdapterParams> {
    cfg.validate()?;
    let (d, h, l) = (cfg.d_emb, cfg.d_prj, cfg.n_layer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut site = || {
        if cfg.is_shared {
            SiteParams::Shared {
                base_d: truncated_normal(d * h, INIT_STD, &mut rng),
                base_u: vec![0.0; h * d],
                depth_d: vec![0.0; l * h],
                depth_u: vec![0.0; l * d],
            }
        } else {
            SiteParams::Unshared {
                wd: truncated_normal(l * d * h, INIT_STD, &mut rng),
                wu: vec![0.0; l * h * d],
            }
        }
    };
    let s0 = site();
    let s1 = site();
    Ok(AdapterParams {
        cfg,
        sites: [s0, s1],
    })
}

impl SiteParams {
    fn expected_shapes(&self, cfg: &AdapterConfig) -> Vec<(&'static str, Vec<usize>)> {
        let (d, h, l) = (cfg.d_emb, cfg.d_prj, cfg.n_layer);
        match self {
            SiteParams::Unshared { .. } => vec![("wd", vec![l, d, h]), ("wu", vec![l, h, d])],
            SiteParams::Shared { .. } => vec![
                ("base_d", vec![1, d, h]),
                ("base_u", vec![1, h, d]),
                ("depth_d", vec![l, h]),
                ("depth_u", vec![l, d]),
            ],
        }
    }

    fn tables(&self) -> Vec<&Vec<f64>> {
        match self {
            SiteParams::Unshared { wd, wu } => vec![wd, wu],
            SiteParams::Shared {
                base_d,
                base_u,
                depth_d,
                depth_u,
            } => vec![base_d, base_u, depth_d, depth_u],
        }
    }

    fn tables_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            SiteParams::Unshared { wd, wu } => vec![wd, wu],
            SiteParams::Shared {
                base_d,
                base_u,
                depth_d,
                depth_u,
            } => vec![base_d, base_u, depth_d, depth_u],
        }
    }
}

impl AdapterParams {
    /// `(name, shape, values)` for every table, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (s, site) in self.sites.iter().enumerate() {
            for ((name, shape), t) in site
                .expected_shapes(&self.cfg)
                .into_iter()
                .zip(site.tables())
            {
                out.push((format!("site{s}.{name}"), shape, t.as_slice()));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let [a, b] = &mut self.sites;
        let mut out = a.tables_mut();
        out.extend(b.tables_mut());
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Zeroed parameters of the same layout, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        for (name, shape, t) in self.tensors() {
            let n: usize = shape.iter().product();
            if t.len() != n {
                return Err(Error::Shape(format!(
                    "{name}: {} values, expected {shape:?}",
                    t.len()
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds parameters from named tables (as produced by [`tensors`]).
    ///
    /// [`tensors`]: AdapterParams::tensors
    pub fn from_tensors(
        cfg: AdapterConfig,
        mut get: impl FnMut(&str) -> Option<Vec<f64>>,
    ) -> Result<Self> {
        let mut take = |name: String| {
            get(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        let mut site = |s: usize| -> Result<SiteParams> {
            Ok(if cfg.is_shared {
                SiteParams::Shared {
                    base_d: take(format!("site{s}.base_d"))?,
                    base_u: take(format!("site{s}.base_u"))?,
                    depth_d: take(format!("site{s}.depth_d"))?,
                    depth_u: take(format!("site{s}.depth_u"))?,
                }
            } else {
                SiteParams::Unshared {
                    wd: take(format!("site{s}.wd"))?,
                    wu: take(format!("site{s}.wu"))?,
                }
            })
        };
        let p = AdapterParams {
            cfg,
            sites: [site(0)?, site(1)?],
        };
        p.validate()?;
        Ok(p)
    }
}

/// Expands parameters into per-layer `(wd, wu)` pairs.
pub fn materialize(p: &AdapterParams) -> Result<MaterializedAdapters> {
    p.validate()?;
    let AdapterConfig {
        d_emb: d,
        d_prj: h,
        n_layer: l,
        ..
    } = p.cfg;
    let mut layers: Vec<[SiteWeights; SITES_PER_LAYER]> = Vec::with_capacity(l);
    for layer in 0..l {
        let site = |s: &SiteParams| match s {
            SiteParams::Unshared { wd, wu } => SiteWeights {
                wd: wd[layer * d * h..(layer + 1) * d * h].to_vec(),
                wu: wu[layer * h * d..(layer + 1) * h * d].to_vec(),
            },
            SiteParams::Shared {
                base_d,
                base_u,
                depth_d,
                depth_u,
            } => {
                let dd = &depth_d[layer * h..(layer + 1) * h];
                let du = &depth_u[layer * d..(layer + 1) * d];
                let mut wd = vec![0.0; d * h];
                for i in 0..d {
                    for j in 0..h {
                        wd[i * h + j] = base_d[i * h + j] + dd[j];
                    }
                }
                let mut wu = vec![0.0; h * d];
                for j in 0..h {
                    for i in 0..d {
                        wu[j * d + i] = base_u[j * d + i] + du[i];
                    }
                }
                SiteWeights { wd, wu }
            }
        };
        layers.push([site(&p.sites[0]), site(&p.sites[1])]);
    }
    Ok(MaterializedAdapters { cfg: p.cfg, layers })
}

/// Back-propagates gradients of materialized weights onto the parameter
/// tables, accumulating into `grad`.
pub fn materialize_backward(grad_mat: &MaterializedAdapters, grad: &mut AdapterParams) {
    let AdapterConfig {
        d_emb: d, d_prj: h, ..
    } = grad.cfg;
    for (layer, sites) in grad_mat.layers.iter().enumerate() {
        for (s, g) in sites.iter().enumerate() {
            match &mut grad.sites[s] {
                SiteParams::Unshared { wd, wu } => {
                    for (a, b) in wd[layer * d * h..(layer + 1) * d * h].iter_mut().zip(&g.wd) {
                        *a += b;
                    }
                    for (a, b) in wu[layer * h * d..(layer + 1) * h * d].iter_mut().zip(&g.wu) {
                        *a += b;
                    }
                }
                SiteParams::Shared {
                    base_d,
                    base_u,
                    depth_d,
                    depth_u,
                } => {
                    for i in 0..d {
                        for j in 0..h {
                            let v = g.wd[i * h + j];
                            base_d[i * h + j] += v;
                            depth_d[layer * h + j] += v;
                        }
                    }
                    for j in 0..h {
                        for i in 0..d {
                            let v = g.wu[j * d + i];
                            base_u[j * d + i] += v;
                            depth_u[layer * d + i] += v;
                        }
                    }
                }
            }
        }
    }
}

impl MaterializedAdapters {
    pub fn zeros(cfg: AdapterConfig) -> Self {
        let (d, h) = (cfg.d_emb, cfg.d_prj);
        let z = || SiteWeights {
            wd: vec![0.0; d * h],
            wu: vec![0.0; h * d],
        };
        Self {
            cfg,
            layers: (0..cfg.n_layer).map(|_| [z(), z()]).collect(),
        }
    }
}

/// Total trainable scalars for `cfg`:
/// unshared `2·(2·L·D·H)`, shared `2·(2·D·H + L·(D + H))`.
pub fn count_params(cfg: &AdapterConfig) -> usize {
    SITES_PER_LAYER * count_site_params(cfg)
}

/// Trainable scalars of a single site: `2·L·D·H` unshared, `2·D·H + L·(D + H)`
/// shared.
pub fn count_site_params(cfg: &AdapterConfig) -> usize {
    let (d, h, l) = (cfg.d_emb, cfg.d_prj, cfg.n_layer);
    if cfg.is_shared {
        2 * d * h + l * (d + h)
    } else {
        2 * l * d * h
    }
}

/// `emb + GELU(emb·wd)·wu` for `rows` rows of width `D`.
pub fn apply_adapter(emb: &[f64], wd: &[f64], wu: &[f64], d: usize, h: usize) -> Result<Vec<f64>> {
    if d == 0 || !emb.len().is_multiple_of(d) || wd.len() != d * h || wu.len() != h * d {
        return Err(Error::Shape(format!(
            "adapter: emb {} values, wd {}, wu {} for D={d}, H={h}",
            emb.len(),
            wd.len(),
            wu.len()
        )));
    }
    let rows = emb.len() / d;
    let mut z = vec![0.0; rows * h];
    matmul(emb, false, wd, false, &mut z, rows, d, h, false);
    z.iter_mut().for_each(|v| *v = gelu(*v));
    let mut out = emb.to_vec();
    matmul(&z, false, wu, false, &mut out, rows, h, d, true);
    Ok(out)
}
