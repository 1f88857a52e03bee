//! HOG feature extraction, multi-scale feature pyramids and template
//! correlation.
//!
//! The descriptor is the reduced HOG used throughout the deformable
//! part-model lineage: per-cell orientation histograms with hard
//! orientation snapping and bilinear spatial voting, normalized against
//! the four surrounding 2x2 cell blocks and clipped, plus contrast
//! insensitive sums and four occupancy features. Directional and
//! occupancy entries are averaged over the four normalizations so every
//! entry stays within `[0, clip]`.

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct HogConfig {
    /// Cell side in pixels.
    pub cell_size: usize,
    /// Number of contrast-sensitive orientation bins over the full
    /// circle. Must be even; the insensitive bins are the folded half.
    pub signed_orientations: usize,
    /// Normalization clip value.
    pub clip: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig {
            cell_size: 4,
            signed_orientations: 18,
            clip: 0.2,
        }
    }
}

impl HogConfig {
    pub fn feature_dim(&self) -> usize {
        self.signed_orientations + self.signed_orientations / 2 + 4
    }
}

/// Grid of per-cell descriptors for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    /// Resample factor of the level relative to the original image
    /// (1.0 at the finest level).
    pub scale: f64,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(rows: usize, cols: usize, dim: usize, scale: f64) -> Self {
        FeatureMap {
            rows,
            cols,
            dim,
            scale,
            data: vec![0.0; rows * cols * dim],
        }
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.cols + col) * self.dim;
        &self.data[base..base + self.dim]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.cols + col) * self.dim + ch]
    }
}

/// Compute the HOG feature grid of an image.
///
/// The image is converted to grayscale first; gradients use centered
/// differences on the interior, so a one-pixel border contributes no
/// votes.
pub fn compute_hog(image: &Image, cfg: &HogConfig) -> Result<FeatureMap> {
    compute_hog_scaled(image, cfg, 1.0)
}

fn compute_hog_scaled(image: &Image, cfg: &HogConfig, scale: f64) -> Result<FeatureMap> {
    let cell = cfg.cell_size;
    if image.width < cell || image.height < cell {
        return Err(Error::ImageTooSmall {
            width: image.width,
            height: image.height,
            cell_size: cell,
        });
    }
    let gray = image.to_gray();
    let n_signed = cfg.signed_orientations;
    assert!(n_signed >= 2 && n_signed % 2 == 0, "signed bin count must be even");
    let n_half = n_signed / 2;
    let dim = cfg.feature_dim();

    let rows = gray.height / cell;
    let cols = gray.width / cell;

    // Orientation snapping table.
    let dirs: Vec<(f64, f64)> = (0..n_signed)
        .map(|k| {
            let theta = 2.0 * std::f64::consts::PI * k as f64 / n_signed as f64;
            (theta.cos(), theta.sin())
        })
        .collect();

    // Per-cell signed orientation histograms via bilinear spatial voting.
    let mut hist = vec![0.0f64; rows * cols * n_signed];
    for y in 1..gray.height - 1 {
        for x in 1..gray.width - 1 {
            let gx = gray.get(x + 1, y, 0) - gray.get(x - 1, y, 0);
            let gy = gray.get(x, y + 1, 0) - gray.get(x, y - 1, 0);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut best = 0usize;
            let mut best_dot = f64::NEG_INFINITY;
            for (k, (c, s)) in dirs.iter().enumerate() {
                let dot = gx * c + gy * s;
                if dot > best_dot {
                    best_dot = dot;
                    best = k;
                }
            }
            // Bilinear vote into the four surrounding cells.
            let xp = (x as f64 + 0.5) / cell as f64 - 0.5;
            let yp = (y as f64 + 0.5) / cell as f64 - 0.5;
            let ix = xp.floor() as i64;
            let iy = yp.floor() as i64;
            let vx0 = xp - ix as f64;
            let vy0 = yp - iy as f64;
            for (dr, dc, w) in [
                (0i64, 0i64, (1.0 - vx0) * (1.0 - vy0)),
                (0, 1, vx0 * (1.0 - vy0)),
                (1, 0, (1.0 - vx0) * vy0),
                (1, 1, vx0 * vy0),
            ] {
                let r = iy + dr;
                let c = ix + dc;
                if r >= 0 && (r as usize) < rows && c >= 0 && (c as usize) < cols {
                    hist[(r as usize * cols + c as usize) * n_signed + best] += w * mag;
                }
            }
        }
    }

    // Per-cell gradient energy from the folded histogram.
    let energy = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r as usize >= rows || c as usize >= cols {
            return 0.0;
        }
        let h = &hist[(r as usize * cols + c as usize) * n_signed..][..n_signed];
        (0..n_half)
            .map(|o| {
                let s = h[o] + h[o + n_half];
                s * s
            })
            .sum()
    };

    let mut out = FeatureMap::zeros(rows, cols, dim, scale);
    let tau = cfg.clip;
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let h = &hist[(r as usize * cols as usize + c as usize) * n_signed..][..n_signed];
            // The four 2x2 block normalizers around this cell.
            let denoms: [f64; 4] = [(1, 1), (1, -1), (-1, 1), (-1, -1)].map(|(dr, dc)| {
                let sum = energy(r, c)
                    + energy(r, c + dc)
                    + energy(r + dr, c)
                    + energy(r + dr, c + dc);
                sum.sqrt().max(1e-12)
            });

            let cell_out = &mut out.data[(r as usize * cols + c as usize) * dim..][..dim];
            let mut occupancy = [0.0f64; 4];
            for o in 0..n_signed {
                let mut acc = 0.0;
                for (k, d) in denoms.iter().enumerate() {
                    let clipped = (h[o] / d).min(tau);
                    acc += clipped;
                    occupancy[k] += clipped;
                }
                cell_out[o] = 0.25 * acc;
            }
            for o in 0..n_half {
                let s = h[o] + h[o + n_half];
                let acc: f64 = denoms.iter().map(|d| (s / d).min(tau)).sum();
                cell_out[n_signed + o] = 0.25 * acc;
            }
            for k in 0..4 {
                cell_out[n_signed + n_half + k] = occupancy[k] / n_signed as f64;
            }
        }
    }
    Ok(out)
}

/// Multi-scale stack of feature maps, scales decreasing geometrically by
/// `2^(-1/interval)` per level.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
    pub interval: usize,
    pub cell_size: usize,
}

impl FeaturePyramid {
    pub fn level_scale(&self, level: usize) -> f64 {
        self.levels[level].scale
    }
}

/// Build the feature pyramid of an image. Level 0 is the finest scale
/// (the original resolution); levels stop once either grid dimension
/// would fall below `min_level_cells`.
pub fn build_pyramid(
    image: &Image,
    cfg: &HogConfig,
    interval: usize,
    min_level_cells: usize,
) -> Result<FeaturePyramid> {
    assert!(interval >= 1);
    let mut levels = Vec::new();
    let mut level = 0usize;
    loop {
        let scale = 2f64.powf(-(level as f64) / interval as f64);
        let scaled = if level == 0 {
            image.clone()
        } else {
            image.rescale(scale)
        };
        if scaled.width < cfg.cell_size || scaled.height < cfg.cell_size {
            break;
        }
        let map = compute_hog_scaled(&scaled, cfg, scale)?;
        if map.rows < min_level_cells || map.cols < min_level_cells {
            break;
        }
        levels.push(map);
        level += 1;
    }
    if levels.is_empty() {
        return Err(Error::ImageTooSmall {
            width: image.width,
            height: image.height,
            cell_size: cfg.cell_size * min_level_cells,
        });
    }
    Ok(FeaturePyramid {
        levels,
        interval,
        cell_size: cfg.cell_size,
    })
}

/// Appearance template: `h` x `w` cells of `dim`-dimensional weights plus
/// a scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Template {
    pub fn zeros(h: usize, w: usize, dim: usize) -> Self {
        Template {
            h,
            w,
            dim,
            weights: vec![0.0; h * w * dim],
            bias: 0.0,
        }
    }

    #[inline]
    pub fn weight(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.weights[(r * self.w + c) * self.dim + ch]
    }
}

/// Dense grid of scores, the raw material of score maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ScoreGrid {
    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        ScoreGrid {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.cols + col] = v;
    }
}

/// Valid-region cross-correlation of a template against a feature map,
/// plus the template bias. The output is
/// `(rows - h + 1) x (cols - w + 1)`; a template that does not fit
/// yields an empty (invalid) grid.
pub fn correlate_template(map: &FeatureMap, tpl: &Template) -> ScoreGrid {
    assert_eq!(map.dim, tpl.dim, "feature dimension mismatch");
    if tpl.h > map.rows || tpl.w > map.cols {
        return ScoreGrid {
            rows: 0,
            cols: 0,
            data: Vec::new(),
        };
    }
    let out_rows = map.rows - tpl.h + 1;
    let out_cols = map.cols - tpl.w + 1;
    let mut out = ScoreGrid::filled(out_rows, out_cols, tpl.bias);
    let dim = map.dim;
    let row_span = tpl.w * dim;
    for oy in 0..out_rows {
        for ty in 0..tpl.h {
            let tpl_row = &tpl.weights[ty * row_span..(ty + 1) * row_span];
            let map_row = &map.data[((oy + ty) * map.cols) * dim..];
            for ox in 0..out_cols {
                let seg = &map_row[ox * dim..ox * dim + row_span];
                let mut acc = 0.0;
                for (a, b) in tpl_row.iter().zip(seg) {
                    acc += a * b;
                }
                out.data[oy * out_cols + ox] += acc;
            }
        }
    }
    out
}
