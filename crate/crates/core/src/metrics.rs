//! Fréchet distance and image-embedding cosine similarity.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::panelize::PageImage;

/// Eigenvalues above `-NEG_EIG_TOL * max(1, largest |eigenvalue|)` are
/// clamped to zero before taking square roots; anything lower is an error.
pub const NEG_EIG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub extractor_id: String,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(extractor_id: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(FeatureSet {
            extractor_id: extractor_id.into(),
            dim,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean and unbiased covariance.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let n = self.len();
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 feature vectors for a covariance, got {n}"
            )));
        }
        let d = self.dim;
        let mut mu = DVector::zeros(d);
        for r in &self.rows {
            mu += DVector::from_column_slice(r);
        }
        mu /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &self.rows {
            let c = DVector::from_column_slice(r) - &mu;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok((mu, cov))
    }
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -NEG_EIG_TOL * scale {
            return Err(Error::Numerical(format!("matrix has negative eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `||μa − μb||² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`, with the trace of the
/// product root computed as `Tr(sqrt(√Σa Σb √Σa))`, which is symmetric.
/// Rounding below zero is clamped to zero.
pub fn frechet_from_moments(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu_a.len();
    if mu_b.len() != d || cov_a.shape() != (d, d) || cov_b.shape() != (d, d) {
        return Err(Error::Shape("moment dimensions disagree".into()));
    }
    let diff = mu_a - mu_b;
    let sa = sqrt_psd(cov_a)?;
    let inner = &sa * cov_b * &sa;
    let cross = sqrt_psd(&inner)?.trace();
    Ok((diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::InvalidArgument(format!(
            "features come from different extractors: {} vs {}",
            a.extractor_id, b.extractor_id
        )));
    }
    if a.dim != b.dim {
        return Err(Error::Shape(format!("feature widths differ: {} vs {}", a.dim, b.dim)));
    }
    let (mu_a, cov_a) = a.moments()?;
    let (mu_b, cov_b) = b.moments()?;
    frechet_from_moments(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Mean cosine similarity of paired vectors, in `[-1, 1]`.
pub fn clip_i(gen: &FeatureSet, reference: &FeatureSet) -> Result<f64> {
    if gen.extractor_id != reference.extractor_id {
        return Err(Error::InvalidArgument("features come from different extractors".into()));
    }
    if gen.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "{} generated vs {} reference images; clip_i needs pairs",
            gen.len(),
            reference.len()
        )));
    }
    if gen.is_empty() {
        return Err(Error::InvalidArgument("no feature vectors".into()));
    }
    if gen.dim != reference.dim {
        return Err(Error::Shape("feature widths differ".into()));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (i, (a, b)) in gen.rows.iter().zip(&reference.rows).enumerate() {
        let (na, nb) = (norm(a), norm(b));
        if na == 0.0 {
            return Err(Error::InvalidArgument(format!("generated feature {i} is a zero vector")));
        }
        if nb == 0.0 {
            return Err(Error::InvalidArgument(format!("reference feature {i} is a zero vector")));
        }
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        total += (dot / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok(total / gen.len() as f64)
}

pub trait FeatureExtractor {
    fn id(&self) -> &str;
    fn extract(&self, images: &[PageImage]) -> Result<FeatureSet>;
}

/// Grayscale image averaged down to an 8×8 grid and flattened.
#[derive(Debug, Clone, Copy, Default)]
pub struct StubExtractor;

pub const STUB_EXTRACTOR_ID: &str = "stub-gray8x8";

impl FeatureExtractor for StubExtractor {
    fn id(&self) -> &str {
        STUB_EXTRACTOR_ID
    }

    fn extract(&self, images: &[PageImage]) -> Result<FeatureSet> {
        let rows = images
            .iter()
            .map(|img| {
                let (h, w) = (img.height(), img.width());
                if h < 8 || w < 8 {
                    return Err(Error::Shape(format!("image {h}x{w} smaller than 8x8")));
                }
                let mut sums = [0.0f64; 64];
                let mut counts = [0usize; 64];
                for y in 0..h {
                    for x in 0..w {
                        let cell = (y * 8 / h) * 8 + x * 8 / w;
                        sums[cell] += img.gray(y, x);
                        counts[cell] += 1;
                    }
                }
                Ok(sums.iter().zip(counts).map(|(s, c)| s / c as f64).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureSet::new(STUB_EXTRACTOR_ID, rows)
    }
}
