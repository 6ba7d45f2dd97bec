use crate::raster::Image;

/// Bins per channel of the joint RGB histogram.
const COLOR_BINS: usize = 4;
const ORIENT_BINS: usize = 8;
/// Side of the pooled variance map.
const VAR_GRID: usize = 8;

pub const COLOR_HIST_LEN: usize = COLOR_BINS * COLOR_BINS * COLOR_BINS;
const ORIENT_LEN: usize = ORIENT_BINS * 5;
const VAR_LEN: usize = VAR_GRID * VAR_GRID + 3;

/// Length of the vector returned by [`extract_features`].
pub const FEATURE_LEN: usize = COLOR_HIST_LEN + ORIENT_LEN + VAR_LEN;

fn color_bin(v: f64) -> usize {
    ((v * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1)
}

/// Handcrafted image descriptor: joint RGB histogram, gradient-orientation
/// histograms (whole image plus quadrants), and a pooled map of local color
/// variance with global summary statistics.
pub fn extract_features(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    let npix = (h * w) as f64;
    let mut out = Vec::with_capacity(FEATURE_LEN);

    let mut hist = [0.0; COLOR_HIST_LEN];
    for px in img.pixels.chunks_exact(3) {
        let b = color_bin(px[0]) * COLOR_BINS * COLOR_BINS
            + color_bin(px[1]) * COLOR_BINS
            + color_bin(px[2]);
        hist[b] += 1.0 / npix;
    }
    out.extend_from_slice(&hist);

    // Per pixel, the channel with the strongest central-difference gradient
    // decides magnitude and (unsigned) orientation.
    let mut orient = [0.0; ORIENT_LEN];
    let at = |y: usize, x: usize, c: usize| img.pixels[(y * w + x) * 3 + c];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let mut best = (0.0, 0.0, 0.0);
            for c in 0..3 {
                let gx = at(y, xr, c) - at(y, xl, c);
                let gy = at(yd, x, c) - at(yu, x, c);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag > best.0 {
                    best = (mag, gx, gy);
                }
            }
            let (mag, gx, gy) = best;
            if mag == 0.0 {
                continue;
            }
            let mut theta = gy.atan2(gx);
            if theta < 0.0 {
                theta += std::f64::consts::PI;
            }
            let bin =
                ((theta / std::f64::consts::PI * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
            let quadrant = (y * 2 / h) * 2 + x * 2 / w;
            orient[bin] += mag / npix;
            orient[ORIENT_BINS * (1 + quadrant) + bin] += 4.0 * mag / npix;
        }
    }
    out.extend_from_slice(&orient);

    // Mean per-channel variance of each grid cell.
    let (ch, cw) = (h / VAR_GRID, w / VAR_GRID);
    let mut vars = Vec::with_capacity(VAR_GRID * VAR_GRID);
    for gy in 0..VAR_GRID {
        for gx in 0..VAR_GRID {
            let mut v = 0.0;
            for c in 0..3 {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for y in gy * ch..(gy + 1) * ch {
                    for x in gx * cw..(gx + 1) * cw {
                        let p = at(y, x, c);
                        sum += p;
                        sq += p * p;
                    }
                }
                let n = (ch * cw) as f64;
                let mean = sum / n;
                v += (sq / n - mean * mean).max(0.0);
            }
            vars.push(v / 3.0);
        }
    }
    let mean = vars.iter().sum::<f64>() / vars.len() as f64;
    let std =
        (vars.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vars.len() as f64).sqrt();
    let max = vars.iter().copied().fold(0.0, f64::max);
    out.extend_from_slice(&vars);
    out.extend_from_slice(&[mean, std, max]);
    debug_assert_eq!(out.len(), FEATURE_LEN);
    out
}
