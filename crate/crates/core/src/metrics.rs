//! Fréchet distance, mode-collapse score, and dataset complexity measures.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::ImageGrid;
use crate::error::{Error, Result};

/// Diagonal loading applied to both covariances inside [`fid_score`].
pub const COV_REGULARIZATION: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-9;
const NEGATIVE_EIG_TOL: f64 = 1e-6;

fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Eigen-decomposition of a symmetric matrix. Eigenvalues are sorted in
/// descending order; column `i` of the returned matrix belongs to value `i`.
pub fn sym_eigh(a: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(Error::dim(format!("{}x{} matrix is not square", a.nrows(), a.ncols())));
    }
    let asym = max_asymmetry(a);
    if asym >= SYMMETRY_TOL {
        return Err(Error::Contract(format!("matrix is not symmetric (max |A - Aᵀ| = {asym:e})")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), a.nrows(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Principal square root `V Λ^{1/2} Vᵀ`. Eigenvalues down to `−1e-6` are
/// treated as rounding noise and clipped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, v) = sym_eigh(a)?;
    if let Some(bad) = values.iter().find(|l| **l < -NEGATIVE_EIG_TOL) {
        return Err(Error::Contract(format!("matrix has eigenvalue {bad:e}, not PSD")));
    }
    let roots = DVector::from_iterator(values.len(), values.iter().map(|l| l.max(0.0).sqrt()));
    Ok(&v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Gaussian summary of a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dim(format!(
                "{}x{} covariance for {} features",
                cov.nrows(),
                cov.ncols(),
                mean.len()
            )));
        }
        if max_asymmetry(&cov) > 1e-12 {
            return Err(Error::Contract("covariance is not symmetric".into()));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            cov,
            count,
        })
    }

    /// Sample mean and unbiased covariance of the rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if m < 2 {
            return Err(Error::Contract(format!("need at least 2 rows for a covariance, got {m}")));
        }
        let x = rows_to_matrix(rows)?;
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(m, x.ncols(), |r, c| x[(r, c)] - mean[c]);
        let mut cov = centered.transpose() * &centered / (m as f64 - 1.0);
        // Exact symmetry; the product is symmetric only up to rounding.
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov, count: m })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(Error::dim(format!("ragged rows: {} vs {d}", bad.len())));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]))
}

/// `‖μ_r − μ_g‖² + Tr(Σ_r + Σ_g − 2 (Σ_r^{1/2} Σ_g Σ_r^{1/2})^{1/2})` with
/// `1e-6·I` added to both covariances.
pub fn fid_score(real: &FeatureStats, generated: &FeatureStats) -> Result<f64> {
    if real.dim() != generated.dim() {
        return Err(Error::dim(format!(
            "feature dims differ: {} vs {}",
            real.dim(),
            generated.dim()
        )));
    }
    let eye = DMatrix::<f64>::identity(real.dim(), real.dim()) * COV_REGULARIZATION;
    let sr = &real.cov + &eye;
    let sg = &generated.cov + &eye;
    let root_r = psd_sqrt(&sr)?;
    let inner = &root_r * &sg * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = psd_sqrt(&inner)?;
    let mean_term = (&real.mean - &generated.mean).norm_squared();
    let fid = mean_term + sr.trace() + sg.trace() - 2.0 * cross.trace();
    Ok(fid.max(0.0))
}

/// Feature extractor choice for FID.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extractor {
    /// Raw model-space pixels.
    Identity,
    /// Projection onto the top `k` principal components of the reference set.
    Pca(usize),
}

impl std::fmt::Display for Extractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Extractor::Identity => f.write_str("identity"),
            Extractor::Pca(k) => write!(f, "pca({k})"),
        }
    }
}

impl std::str::FromStr for Extractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            return Ok(Extractor::Identity);
        }
        s.strip_prefix("pca(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|k| k.parse().ok())
            .map(Extractor::Pca)
            .ok_or_else(|| Error::Config(format!("unknown extractor {s:?}")))
    }
}

/// An [`Extractor`] fitted to a reference set.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    kind: Extractor,
    projection: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl FeatureMap {
    pub fn fit(kind: Extractor, reference: &[Vec<f64>]) -> Result<Self> {
        let projection = match kind {
            Extractor::Identity => None,
            Extractor::Pca(k) => {
                let d = reference.first().map_or(0, Vec::len);
                if k > d {
                    return Err(Error::dim(format!("pca({k}) on {d}-dim data")));
                }
                let fit = pca_fit(reference)?;
                Some((fit.mean, fit.components.columns(0, k).into_owned()))
            }
        };
        Ok(Self { kind, projection })
    }

    pub fn kind(&self) -> Extractor {
        self.kind
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let Some((mean, comps)) = &self.projection else {
            return Ok(rows.to_vec());
        };
        rows.iter()
            .map(|r| {
                if r.len() != mean.len() {
                    return Err(Error::dim(format!("row of {} for a {}-dim projection", r.len(), mean.len())));
                }
                let centered = DVector::from_iterator(r.len(), r.iter().zip(mean.iter()).map(|(a, b)| a - b));
                Ok((comps.transpose() * centered).iter().copied().collect())
            })
            .collect()
    }
}

/// Fits `extractor` on `reference` and applies it to `images`.
pub fn extract_features(images: &[Vec<f64>], extractor: Extractor, reference: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    FeatureMap::fit(extractor, reference)?.apply(images)
}

/// FID between two row sets under an already fitted feature map.
pub fn fid_rows(map: &FeatureMap, real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let r = FeatureStats::from_rows(&map.apply(real)?)?;
    let g = FeatureStats::from_rows(&map.apply(generated)?)?;
    fid_score(&r, &g)
}

fn mean_pairwise_distance(rows: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Mean pairwise Euclidean distance among generated rows over the same
/// quantity for the reference rows. Near 0 means the samples collapsed.
pub fn mode_collapse_score(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if generated.len() < 2 || reference.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 rows on each side, got {} and {}",
            generated.len(),
            reference.len()
        )));
    }
    let d = reference[0].len();
    if generated.iter().chain(reference).any(|r| r.len() != d) {
        return Err(Error::dim("rows differ in length"));
    }
    let denom = mean_pairwise_distance(reference);
    if denom == 0.0 {
        return Err(Error::Degenerate("reference rows are all identical".into()));
    }
    Ok(mean_pairwise_distance(generated) / denom)
}

/// Shannon entropy in bits of the pixel histogram over `[0, 255]`.
pub fn image_entropy(img: &ImageGrid, bins: usize) -> f64 {
    let bins = bins.max(1);
    let mut hist = vec![0usize; bins];
    for p in img.pixels() {
        let b = ((p / 255.0) * bins as f64).floor();
        hist[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    let n = img.pixels().len() as f64;
    hist.iter()
        .filter(|c| **c > 0)
        .map(|c| {
            let p = *c as f64 / n;
            p * (1.0 / p).log2()
        })
        .sum::<f64>()
}

pub const DEFAULT_ENTROPY_BINS: usize = 256;
pub const DEFAULT_FRACTAL_THRESHOLD: f64 = 0.1;

/// Box-counting dimension of the pixels at or above
/// `threshold_frac × max`, from box sizes `1, 2, 4, …, min(h, w)/2`.
/// Returns 0 (and logs a warning) when nothing survives the threshold.
pub fn fractal_dimension(img: &ImageGrid, threshold_frac: f64) -> Result<f64> {
    let (h, w) = (img.height(), img.width());
    if h.min(w) < 4 {
        return Err(Error::dim(format!("{h}x{w} image is too small for box counting")));
    }
    let max = img.max();
    if !(max > 0.0) {
        log::warn!("fractal dimension undefined for an empty image; reporting 0");
        return Ok(0.0);
    }
    let thr = threshold_frac * max;
    let on: Vec<bool> = img.pixels().iter().map(|p| *p > 0.0 && *p >= thr).collect();
    let mut pts = Vec::new();
    let mut s = 1;
    while s <= h.min(w) / 2 {
        let (bh, bw) = (h.div_ceil(s), w.div_ceil(s));
        let mut occupied = vec![false; bh * bw];
        for r in 0..h {
            for c in 0..w {
                if on[r * w + c] {
                    occupied[(r / s) * bw + c / s] = true;
                }
            }
        }
        let n = occupied.iter().filter(|o| **o).count();
        pts.push(((1.0 / s as f64).ln(), (n as f64).ln()));
        s *= 2;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Principal axes of mean-centred data.
#[derive(Debug, Clone)]
pub struct PcaFit {
    pub mean: DVector<f64>,
    /// Unit principal axes as columns, by decreasing variance.
    pub components: DMatrix<f64>,
    /// Covariance eigenvalues, negatives clipped to zero.
    pub variances: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
}

/// PCA via [`sym_eigh`] of the unbiased covariance. When the data has no
/// variance at all the whole ratio mass goes to the first component.
pub fn pca_fit(data: &[Vec<f64>]) -> Result<PcaFit> {
    let stats = FeatureStats::from_rows(data)?;
    let (values, components) = sym_eigh(&stats.cov)?;
    let variances: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = variances.iter().sum();
    let explained_variance_ratio = if total > 0.0 {
        variances.iter().map(|v| v / total).collect()
    } else {
        (0..variances.len()).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect()
    };
    Ok(PcaFit {
        mean: stats.mean,
        components,
        variances,
        explained_variance_ratio,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityReport {
    pub entropy_values: Vec<f64>,
    pub fractal_dims: Vec<f64>,
    pub pca_explained_variance: Vec<f64>,
}

pub const PER_IMAGE_HEADER: [&str; 3] = ["image_id", "entropy_bits", "fractal_dim"];
pub const PCA_HEADER: [&str; 2] = ["component", "explained_variance_ratio"];

impl ComplexityReport {
    /// Entropy and box-counting dimension per image, PCA over the
    /// flattened pixels. Needs at least two images.
    pub fn compute(images: &[ImageGrid]) -> Result<Self> {
        let entropy_values = images.iter().map(|i| image_entropy(i, DEFAULT_ENTROPY_BINS)).collect();
        let fractal_dims = images
            .iter()
            .map(|i| fractal_dimension(i, DEFAULT_FRACTAL_THRESHOLD))
            .collect::<Result<_>>()?;
        let rows: Vec<Vec<f64>> = images.iter().map(ImageGrid::flatten).collect();
        let pca = pca_fit(&rows)?;
        Ok(Self {
            entropy_values,
            fractal_dims,
            pca_explained_variance: pca.explained_variance_ratio,
        })
    }

    pub fn write_per_image<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PER_IMAGE_HEADER).map_err(csv_err)?;
        for (i, (e, f)) in self.entropy_values.iter().zip(&self.fractal_dims).enumerate() {
            w.write_record([i.to_string(), fmt17(*e), fmt17(*f)]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn write_pca<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PCA_HEADER).map_err(csv_err)?;
        for (i, r) in self.pca_explained_variance.iter().enumerate() {
            w.write_record([i.to_string(), fmt17(*r)]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn save(&self, per_image: impl AsRef<Path>, pca: impl AsRef<Path>) -> Result<()> {
        let (a, b) = (per_image.as_ref(), pca.as_ref());
        self.write_per_image(File::create(a).map_err(|e| Error::io(a, e))?)?;
        self.write_pca(File::create(b).map_err(|e| Error::io(b, e))?)
    }

    /// Inverse of [`ComplexityReport::write_per_image`] and
    /// [`ComplexityReport::write_pca`].
    pub fn read<R: Read, S: Read>(per_image: R, pca: S) -> Result<Self> {
        let a = read_columns(per_image, &PER_IMAGE_HEADER)?;
        let b = read_columns(pca, &PCA_HEADER)?;
        Ok(Self {
            entropy_values: a.iter().map(|r| r[1]).collect(),
            fractal_dims: a.iter().map(|r| r[2]).collect(),
            pca_explained_variance: b.iter().map(|r| r[1]).collect(),
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Contract(format!("writing csv: {e}"))
}

pub(crate) fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads a numeric CSV with a fixed header into rows of floats.
pub(crate) fn read_columns<R: Read>(input: R, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if i == 0 {
            if rec.iter().ne(header.iter().copied()) {
                return Err(Error::Parse {
                    line,
                    message: format!("expected header {}", header.join(",")),
                });
            }
            continue;
        }
        let row = rec
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad number {f:?}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(row);
    }
    Ok(out)
}
