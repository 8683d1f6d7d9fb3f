//! Gaussian feature statistics, Fréchet distance and multimodality.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues above `-EIG_CLAMP · max(1, λ_max)` are treated as zero.
pub const EIG_CLAMP: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mu: Vec<f64>,
    /// Row-major `[dim, dim]`, unbiased.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub fn feature_stats(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Data(format!("feature statistics need at least 2 vectors, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Data("feature vectors must share a positive length".into()));
    }
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in i..d {
                cov[i * d + j] += di * (f[j] - mu[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(FeatureStats { mu, cov, n })
}

/// Square root of a symmetric positive semi-definite matrix.
fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("eigendecomposition did not converge".into()))?;
    let largest = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let top = largest.max(1.0);
    // Eigenvalues this small are rounding noise of a rank-deficient matrix;
    // their square roots (~1e-8) would otherwise dominate the error.
    let noise = 64.0 * f64::EPSILON * m.nrows() as f64 * largest;
    let mut roots = Vec::with_capacity(eig.eigenvalues.len());
    for &l in eig.eigenvalues.iter() {
        if l < -EIG_CLAMP * top {
            return Err(Error::Numerical(format!("matrix is not positive semi-definite (eigenvalue {l:e})")));
        }
        roots.push(if l <= noise { 0.0 } else { l.sqrt() });
    }
    let d = DMatrix::from_diagonal(&DVector::from_vec(roots));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^½)`.
///
/// `Tr((Σ_a Σ_b)^½)` equals the sum of singular values of `Σ_a^½ Σ_b^½`.
/// Taking it that way, rather than from the eigenvalues of
/// `Σ_a^½ Σ_b Σ_a^½`, keeps rounding at `ε ‖Σ‖` instead of `√ε ‖Σ‖`, which
/// matters for the self-distance of near-singular feature covariances.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if d != b.dim() || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(Error::shape("frechet_distance", &[a.dim()], &[b.dim()]));
    }
    let mean: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let ra = sqrtm_psd(&sa)?;
    let rb = sqrtm_psd(&sb)?;
    let svd = (&ra * &rb)
        .try_svd(false, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("singular value decomposition did not converge".into()))?;
    let cross: f64 = svd.singular_values.iter().sum();
    let value = mean + sa.trace() + sb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numerical("Fréchet distance is not finite".into()));
    }
    Ok(value.max(0.0))
}

/// Recorded equal split of one class: `order[..h]` pairs index-wise with
/// `order[h..]`. An odd sample is left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub order: Vec<usize>,
}

pub fn draw_split<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SplitRecord> {
    if n < 2 {
        return Err(Error::Data(format!("multimodality needs at least 2 samples per class, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.truncate(n - n % 2);
    Ok(SplitRecord { order })
}

/// Mean distance between paired members of the two halves.
pub fn split_distance(features: &[Vec<f64>], split: &SplitRecord) -> Result<f64> {
    let h = split.order.len() / 2;
    if h == 0 || split.order.iter().any(|&i| i >= features.len()) {
        return Err(Error::Data("split does not match the feature set".into()));
    }
    let total: f64 = (0..h)
        .map(|i| {
            let (a, b) = (&features[split.order[i]], &features[split.order[h + i]]);
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    Ok(total / h as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMultimodality {
    pub generated: f64,
    pub reference: f64,
    pub generated_split: SplitRecord,
    pub reference_split: SplitRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multimodality {
    /// Mean over classes of `|d_generated − d_reference|`.
    pub score: f64,
    pub classes: Vec<ClassMultimodality>,
}

/// Multimodality from already drawn splits.
pub fn multimodality_with_splits(
    generated: &[Vec<Vec<f64>>],
    reference: &[Vec<Vec<f64>>],
    splits: &[(SplitRecord, SplitRecord)],
) -> Result<Multimodality> {
    if generated.len() != reference.len() || generated.len() != splits.len() || generated.is_empty() {
        return Err(Error::Data("class counts of generated and reference features differ".into()));
    }
    let classes = generated
        .iter()
        .zip(reference)
        .zip(splits)
        .map(|((g, r), (sg, sr))| {
            Ok(ClassMultimodality {
                generated: split_distance(g, sg)?,
                reference: split_distance(r, sr)?,
                generated_split: sg.clone(),
                reference_split: sr.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let score = classes.iter().map(|c| (c.generated - c.reference).abs()).sum::<f64>() / classes.len() as f64;
    Ok(Multimodality { score, classes })
}

/// Features are grouped by class. Splits are drawn class by class,
/// generated before reference; a class with equally many generated and
/// reference samples uses one split for both, so a set scored against
/// itself gets exactly zero.
pub fn multimodality<R: Rng + ?Sized>(
    generated: &[Vec<Vec<f64>>],
    reference: &[Vec<Vec<f64>>],
    rng: &mut R,
) -> Result<Multimodality> {
    if generated.len() != reference.len() {
        return Err(Error::Data("class counts of generated and reference features differ".into()));
    }
    let splits = generated
        .iter()
        .zip(reference)
        .map(|(g, r)| {
            let sg = draw_split(g.len(), rng)?;
            let sr = if r.len() == g.len() { sg.clone() } else { draw_split(r.len(), rng)? };
            Ok((sg, sr))
        })
        .collect::<Result<Vec<_>>>()?;
    multimodality_with_splits(generated, reference, &splits)
}
