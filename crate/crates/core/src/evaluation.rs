//! Quantitative stand-ins for visual inspection: energy heatmaps, latent
//! interpolation, mode coverage, quadrature-normalized likelihoods and
//! simple image/CSV exporters.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data_io::SpiralFamily;
use crate::energy_model::{log_sum_exp, EnergySurface, QuadratureGrid};
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, LatentBatch};
use crate::tensor::Tensor;

/// Samples farther than this from every arm count as unassigned.
pub const MODE_THRESHOLD: f64 = 0.1;

/// Segments per arm in the polyline used for distance-to-manifold queries.
const ARM_SEGMENTS: usize = 2000;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    /// `[(x_lo, x_hi), (y_lo, y_hi)]`.
    pub bounds: [(f64, f64); 2],
    /// `[nx, ny]`.
    pub resolution: [usize; 2],
    /// `[ny, nx]`, row `iy` holds cells at height `iy`.
    pub values: Tensor,
}

impl HeatmapGrid {
    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let [(x0, x1), (y0, y1)] = self.bounds;
        let [nx, ny] = self.resolution;
        [
            x0 + (ix as f64 + 0.5) * (x1 - x0) / nx as f64,
            y0 + (iy as f64 + 0.5) * (y1 - y0) / ny as f64,
        ]
    }

    pub fn min(&self) -> f64 {
        self.values.min()
    }

    pub fn max(&self) -> f64 {
        self.values.max()
    }

    /// `(ix, iy)` of the lowest-energy cell; ties go to the first in row-major order.
    pub fn argmin(&self) -> (usize, usize) {
        let nx = self.resolution[0];
        let k = self
            .values
            .data()
            .iter()
            .enumerate()
            .fold(0, |best, (k, &v)| if v < self.values.data()[best] { k } else { best });
        (k % nx, k / nx)
    }

    /// Index of the cell containing `p`, if inside the bounds.
    pub fn cell_of(&self, p: [f64; 2]) -> Option<(usize, usize)> {
        let mut idx = [0usize; 2];
        for a in 0..2 {
            let (lo, hi) = self.bounds[a];
            let f = (p[a] - lo) / (hi - lo);
            if !(0.0..1.0).contains(&f) {
                return None;
            }
            idx[a] = (f * self.resolution[a] as f64) as usize;
        }
        Some((idx[0], idx[1]))
    }
}

/// Energy at the center of every cell of a regular grid over a 2-D box.
pub fn energy_heatmap(
    dem: &(impl EnergySurface + ?Sized),
    bounds: [(f64, f64); 2],
    resolution: [usize; 2],
) -> Result<HeatmapGrid> {
    if dem.input_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "heatmaps need a 2-D energy, got input dimension {}",
            dem.input_dim()
        )));
    }
    if resolution.iter().any(|&r| r < 2) {
        return Err(Error::Usage(format!("heatmap resolution must be >= 2 per axis, got {resolution:?}")));
    }
    if bounds.iter().any(|(lo, hi)| !(hi > lo)) {
        return Err(Error::Usage(format!("empty heatmap bounds {bounds:?}")));
    }
    let [nx, ny] = resolution;
    let mut grid = HeatmapGrid {
        bounds,
        resolution,
        values: Tensor::zeros(&[ny, nx]),
    };
    let mut centers = Vec::with_capacity(2 * nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            centers.extend(grid.cell_center(ix, iy));
        }
    }
    let e = dem.energy_values(&Tensor::new(vec![nx * ny, 2], centers)?)?;
    if !e.all_finite() {
        return Err(Error::Invariant("heatmap contains non-finite energies".into()));
    }
    grid.values = e.reshape(vec![ny, nx])?;
    Ok(grid)
}

/// Infer-mode generator outputs along the straight line from `z_a` to `z_b`.
pub fn latent_interpolation(gen: &GeneratorModel, z_a: &[f64], z_b: &[f64], k: usize) -> Result<Tensor> {
    if k < 2 {
        return Err(Error::Usage(format!("interpolation needs at least 2 frames, got {k}")));
    }
    let d = gen.latent_dim();
    if z_a.len() != d || z_b.len() != d {
        return Err(Error::Dimension {
            op: "latent interpolation",
            lhs: vec![z_a.len(), z_b.len()],
            rhs: vec![d],
        });
    }
    let mut z = Vec::with_capacity(k * d);
    for i in 0..k {
        let t = i as f64 / (k - 1) as f64;
        z.extend(z_a.iter().zip(z_b).map(|(a, b)| (1.0 - t) * a + t * b));
    }
    let batch = LatentBatch::new(Tensor::new(vec![k, d], z)?)?;
    gen.generate_infer(&batch)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeCoverage {
    pub dataset: String,
    pub threshold: f64,
    pub counts: Vec<usize>,
    pub unassigned_count: usize,
    pub fractions: Vec<f64>,
    pub unassigned: f64,
}

impl ModeCoverage {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.unassigned_count
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

/// Distance from `p` to each noiseless arm of `family`.
pub fn arm_distances(family: &SpiralFamily, p: [f64; 2]) -> Vec<f64> {
    let h = (family.t_max - family.t_min) / ARM_SEGMENTS as f64;
    (0..family.arms)
        .map(|arm| {
            let mut best = f64::INFINITY;
            let mut prev = family.point(arm, family.t_min);
            for s in 1..=ARM_SEGMENTS {
                let next = family.point(arm, family.t_min + h * s as f64);
                best = best.min(point_segment_distance(p, prev, next));
                prev = next;
            }
            best
        })
        .collect()
}

/// Assigns each sample to the nearest spiral arm, or to no arm when it lies
/// farther than [`MODE_THRESHOLD`] from all of them.
pub fn mode_coverage(samples: &Tensor, dataset_name: &str) -> Result<ModeCoverage> {
    let family = SpiralFamily::by_name(dataset_name)?;
    if samples.shape().len() != 2 || samples.cols() != 2 {
        return Err(Error::Dimension {
            op: "mode coverage",
            lhs: samples.shape().to_vec(),
            rhs: vec![2],
        });
    }
    let mut counts = vec![0usize; family.arms];
    let mut unassigned_count = 0;
    for i in 0..samples.rows() {
        let p = [samples.get(i, 0), samples.get(i, 1)];
        let d = arm_distances(&family, p);
        let (arm, dist) = d
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (k, &v)| if v < acc.1 { (k, v) } else { acc });
        if dist <= MODE_THRESHOLD {
            counts[arm] += 1;
        } else {
            unassigned_count += 1;
        }
    }
    let n = samples.rows().max(1) as f64;
    Ok(ModeCoverage {
        dataset: dataset_name.to_string(),
        threshold: MODE_THRESHOLD,
        fractions: counts.iter().map(|&c| c as f64 / n).collect(),
        unassigned: unassigned_count as f64 / n,
        counts,
        unassigned_count,
    })
}

/// Product-Gaussian kernel density estimate with Scott's-rule bandwidths,
/// exposed as the energy `-log p̂(x)`.
#[derive(Clone, Debug)]
pub struct GaussianKde {
    /// Points sorted by their first coordinate.
    points: Tensor,
    pub bandwidth: Vec<f64>,
    log_norm: f64,
}

/// Kernel contributions beyond this many bandwidths along the first axis are
/// dropped when the retained mass makes their relative share below `1e-12`.
const KDE_CUTOFF: f64 = 12.0;

impl GaussianKde {
    pub fn new(points: &Tensor) -> Result<Self> {
        if points.shape().len() != 2 || points.rows() < 2 {
            return Err(Error::Usage("kernel density estimate needs at least 2 points".into()));
        }
        let (n, d) = (points.rows(), points.cols());
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let bandwidth: Vec<f64> = (0..d)
            .map(|j| {
                let col: Vec<f64> = (0..n).map(|i| points.get(i, j)).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
                var.sqrt() * factor
            })
            .collect();
        if bandwidth.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Singularity(format!("degenerate KDE bandwidth {bandwidth:?}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| points.get(a, 0).total_cmp(&points.get(b, 0)));
        let log_norm = (n as f64).ln()
            + bandwidth
                .iter()
                .map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln())
                .sum::<f64>();
        Ok(Self {
            points: points.select_rows(&order),
            bandwidth,
            log_norm,
        })
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let h0 = self.bandwidth[0];
        let rows = self.points.rows();
        let lo = self.partition(x[0] - KDE_CUTOFF * h0);
        let hi = self.partition(x[0] + KDE_CUTOFF * h0);
        let exponent = |i: usize| {
            -0.5 * self
                .points
                .row(i)
                .iter()
                .zip(x)
                .zip(&self.bandwidth)
                .map(|((p, q), h)| ((p - q) / h).powi(2))
                .sum::<f64>()
        };
        let near = log_sum_exp((lo..hi.min(rows)).map(exponent));
        // dropped mass is at most rows · exp(-C²/2)
        if near > -0.5 * KDE_CUTOFF * KDE_CUTOFF + (rows as f64).ln() + 12.0 * std::f64::consts::LN_10 {
            near - self.log_norm
        } else {
            // far from all data: the window may miss the dominant kernel
            log_sum_exp((0..rows).map(exponent)) - self.log_norm
        }
    }

    fn partition(&self, x0: f64) -> usize {
        let (mut lo, mut hi) = (0, self.points.rows());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.points.get(mid, 0) < x0 {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

impl EnergySurface for GaussianKde {
    fn input_dim(&self) -> usize {
        self.points.cols()
    }

    fn energy_values(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                op: "kde input",
                lhs: x.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        let e = (0..x.rows()).map(|i| -self.log_density(x.row(i))).collect();
        Tensor::new(vec![x.rows()], e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Divergence {
    /// Mean `-log P(x)` over the evaluation points, in nats.
    pub cross_entropy: f64,
    /// `KL(p̂_data || P_model)` on the quadrature grid, both renormalized to the box.
    pub kl_vs_kde: f64,
    pub log_z: f64,
}

/// Likelihood metrics for a 2-D energy normalized by quadrature over `bounds`.
pub fn model_data_divergence(
    dem: &(impl EnergySurface + ?Sized),
    points: &Tensor,
    bounds: [(f64, f64); 2],
    grid_n: usize,
) -> Result<Divergence> {
    if dem.input_dim() != 2 {
        return Err(Error::Unsupported(format!(
            "divergence needs a 2-D energy, got input dimension {}",
            dem.input_dim()
        )));
    }
    let grid = QuadratureGrid::new(&bounds, grid_n)?;
    let e_model = dem.energy_values(&grid.points)?;
    let log_z = grid.log_integral(e_model.data());
    let cross_entropy = dem.energy_values(points)?.mean() + log_z;

    let kde = GaussianKde::new(points)?;
    let e_kde = kde.energy_values(&grid.points)?;
    let log_z_kde = grid.log_integral(e_kde.data());
    let kl_vs_kde = grid
        .log_weights
        .iter()
        .zip(e_kde.data().iter().zip(e_model.data()))
        .map(|(lw, (&ek, &em))| {
            let log_q = -ek - log_z_kde;
            let log_p = -em - log_z;
            let w = (lw + log_q).exp();
            if w == 0.0 {
                0.0
            } else {
                w * (log_q - log_p)
            }
        })
        .sum::<f64>();
    Ok(Divergence {
        cross_entropy,
        kl_vs_kde,
        log_z,
    })
}

/// Min-max scaling recorded next to an exported image or heatmap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScale {
    pub min: f64,
    pub max: f64,
}

impl ImageScale {
    pub fn of(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { min, max }
    }

    /// True when all values are equal, in which case every pixel maps to 0.
    pub fn is_degenerate(&self) -> bool {
        !(self.max > self.min)
    }

    pub fn to_u8(&self, v: f64) -> u8 {
        if self.is_degenerate() {
            0
        } else {
            ((v - self.min) / (self.max - self.min) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    }
}

/// `<path>.txt`, holding `key=value` lines.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".txt");
    PathBuf::from(name)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn write_sidecar(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let text: String = entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    write_file(&sidecar_path(path), text.as_bytes())
}

/// Writes a binary 8-bit PGM of row-major `values` and returns the scale used.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<ImageScale> {
    if width * height != values.len() || values.is_empty() {
        return Err(Error::Dimension {
            op: "pgm",
            lhs: vec![height, width],
            rhs: vec![values.len()],
        });
    }
    let scale = ImageScale::of(values);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| scale.to_u8(v)));
    write_file(path, &bytes)?;
    write_sidecar(
        path,
        &[
            ("width", width.to_string()),
            ("height", height.to_string()),
            ("min", scale.min.to_string()),
            ("max", scale.max.to_string()),
            ("degenerate", scale.is_degenerate().to_string()),
        ],
    )?;
    Ok(scale)
}

/// Reads a binary PGM written by [`write_pgm`]: `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |what: &str| Error::Usage(format!("{}: not a binary PGM ({what})", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("short header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("magic"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("no pixel data"))?;
    if pixels.len() != width * height {
        return Err(bad("pixel count"));
    }
    Ok((width, height, pixels.to_vec()))
}

/// Lays out square images (one per row of `samples`) left to right in a
/// single strip and writes it as PGM.
pub fn export_image_strip(samples: &Tensor, path: &Path) -> Result<ImageScale> {
    let (k, pixels) = (samples.rows(), samples.cols());
    let side = (pixels as f64).sqrt().round() as usize;
    if side * side != pixels {
        return Err(Error::Usage(format!("rows of width {pixels} are not square images")));
    }
    let width = k * side;
    let mut strip = vec![0.0; width * side];
    for t in 0..k {
        for (p, &v) in samples.row(t).iter().enumerate() {
            let (r, c) = (p / side, p % side);
            strip[r * width + t * side + c] = v;
        }
    }
    write_pgm(path, width, side, &strip)
}

/// Heatmap CSV with header `x,y,energy`, one cell center per line, plus a
/// sidecar holding bounds, resolution and the min/max used for color scaling.
pub fn export_heatmap(grid: &HeatmapGrid, path: &Path) -> Result<()> {
    let [nx, ny] = grid.resolution;
    let mut out = String::from("x,y,energy\n");
    for iy in 0..ny {
        for ix in 0..nx {
            let [x, y] = grid.cell_center(ix, iy);
            out.push_str(&format!("{x},{y},{}\n", grid.values.get(iy, ix)));
        }
    }
    write_file(path, out.as_bytes())?;
    let [(x0, x1), (y0, y1)] = grid.bounds;
    let (ax, ay) = grid.argmin();
    write_sidecar(
        path,
        &[
            ("bounds", format!("{x0},{x1},{y0},{y1}")),
            ("resolution", format!("{nx},{ny}")),
            ("min", grid.min().to_string()),
            ("max", grid.max().to_string()),
            ("argmin", format!("{ax},{ay}")),
        ],
    )
}
