//! Image and distribution metrics: SSIM, Fréchet distance and kernel
//! inception-style distance over codec embeddings, and a latent perceptual
//! distance.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::data::{render_garment, TryOnSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::sampler::Model;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Covariance ridge used when a set has no more samples than dimensions.
pub const COV_RIDGE: f64 = 1e-6;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// SSIM on BT.601 luma with an 11x11 Gaussian window (sigma 1.5), averaged
/// over every window that fits inside the image. Images smaller than the
/// window use a single window cropped to the image.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Contract(format!("ssim of {:?} and {:?} images", x.dims(), y.dims())));
    }
    let (h, w) = x.dims();
    let (a, b) = (x.luma(), y.luma());
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let k = gaussian_window();
    let off_h = (SSIM_WINDOW - wh) / 2;
    let off_w = (SSIM_WINDOW - ww) / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let (mut ma, mut mb, mut wsum) = (0.0, 0.0, 0.0);
            for dy in 0..wh {
                for dx in 0..ww {
                    let wt = k[dy + off_h] * k[dx + off_w];
                    let i = (y0 + dy) * w + x0 + dx;
                    ma += wt * a[i];
                    mb += wt * b[i];
                    wsum += wt;
                }
            }
            ma /= wsum;
            mb /= wsum;
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for dy in 0..wh {
                for dx in 0..ww {
                    let wt = k[dy + off_h] * k[dx + off_w] / wsum;
                    let i = (y0 + dy) * w + x0 + dx;
                    let (da, db) = (a[i] - ma, b[i] - mb);
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Pooled codec features, one row per image (`D` = latent channels).
pub fn embed(codec: &Codec, images: &[&Image]) -> Result<DMatrix<f64>> {
    let d = codec.latent_channels();
    let mut rows = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(16) {
        let z = codec.encode_batch(chunk)?;
        let hw = z.dim(2) * z.dim(3);
        for plane in z.data().chunks(hw) {
            rows.push(plane.iter().sum::<f64>() / hw as f64);
        }
    }
    Ok(DMatrix::from_row_slice(images.len(), d, &rows))
}

/// Mean squared difference between the codec latent maps of two images.
pub fn latent_perceptual_distance(codec: &Codec, x: &Image, y: &Image) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::Contract(format!("lpd of {:?} and {:?} images", x.dims(), y.dims())));
    }
    let z = codec.encode_batch(&[x, y])?;
    let n = z.numel() / 2;
    let (a, b) = z.data().split_at(n);
    Ok(a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / n as f64)
}

/// Sample mean and covariance (denominator `n - 1`); a ridge is added when
/// `n <= D`.
pub fn mean_cov(x: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = x.shape();
    if n < 2 {
        return Err(Error::Contract(format!("need at least 2 feature rows, got {n}")));
    }
    let mu = DVector::from_iterator(d, (0..d).map(|j| x.column(j).mean()));
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    if n <= d {
        cov += DMatrix::identity(d, d) * COV_RIDGE;
    }
    Ok((mu, cov))
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut roots = eig.eigenvalues.clone();
    for v in roots.iter_mut() {
        if *v < -1e-9 * scale {
            return Err(Error::Numeric(format!("matrix is not PSD (eigenvalue {v})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians with the given statistics.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> Result<f64> {
    let sa = sqrtm_psd(cov_a)?;
    let inner = &sa * cov_b * &sa;
    let cross = sqrtm_psd(&inner)?;
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// FID between two feature sets (rows are samples).
pub fn fid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(Error::Contract(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    let (ma, ca) = mean_cov(a)?;
    let (mb, cb) = mean_cov(b)?;
    frechet_distance(&ma, &ca, &mb, &cb)
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD^2 with kernel `(x.y / D + 1)^3`. Not scaled.
pub fn kid(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let (m, n) = (a.nrows(), b.nrows());
    if m < 2 || n < 2 {
        return Err(Error::Contract(format!("kid needs at least 2 rows per set, got {m} and {n}")));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Contract(format!("feature widths {} and {}", a.ncols(), b.ncols())));
    }
    let rows = |x: &DMatrix<f64>| -> Vec<Vec<f64>> { x.row_iter().map(|r| r.iter().copied().collect()).collect() };
    let (ra, rb) = (rows(a), rows(b));
    let within = |r: &[Vec<f64>]| {
        let mut s = 0.0;
        for i in 0..r.len() {
            for j in 0..r.len() {
                if i != j {
                    s += poly_kernel(&r[i], &r[j]);
                }
            }
        }
        s / (r.len() * (r.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in &ra {
        for y in &rb {
            cross += poly_kernel(x, y);
        }
    }
    Ok(within(&ra) + within(&rb) - 2.0 * cross / (m * n) as f64)
}

/// Feature space tag written into every report.
pub const FEATURE_SPACE: &str = "toy-codec";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Inputs `(~P, G)`, scored against the ground-truth `P`.
    Paired,
    /// Inputs `(P, ~G)` with a garment the person does not wear; no ground
    /// truth, distribution metrics only.
    Unpaired,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Self::Paired),
            "unpaired" => Ok(Self::Unpaired),
            other => Err(Error::Config(format!("unknown eval mode {other:?} (expected paired or unpaired)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub feature_space: String,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lpd_mean: Option<f64>,
    pub fid: f64,
    pub kid_x1000: f64,
    pub ckpt_fingerprint: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores `generated` against `reference`. Paired mode also compares the
/// sets element by element.
pub fn score(codec: &Codec, generated: &[&Image], reference: &[&Image], mode: EvalMode, fingerprint: &str) -> Result<EvalReport> {
    if generated.is_empty() || generated.len() != reference.len() {
        return Err(Error::Contract(format!(
            "{} generated images for {} references",
            generated.len(),
            reference.len()
        )));
    }
    let (ssim_mean, lpd_mean) = match mode {
        EvalMode::Paired => {
            let n = generated.len() as f64;
            let mut s = 0.0;
            let mut l = 0.0;
            for (g, r) in generated.iter().zip(reference) {
                s += ssim(g, r)?;
                l += latent_perceptual_distance(codec, g, r)?;
            }
            (Some(s / n), Some(l / n))
        }
        EvalMode::Unpaired => (None, None),
    };
    let fa = embed(codec, generated)?;
    let fb = embed(codec, reference)?;
    Ok(EvalReport {
        mode,
        feature_space: FEATURE_SPACE.into(),
        n: generated.len(),
        ssim_mean,
        lpd_mean,
        fid: fid(&fa, &fb)?,
        kid_x1000: 1000.0 * kid(&fa, &fb)?,
        ckpt_fingerprint: fingerprint.into(),
    })
}

/// Model inputs for one evaluation sample: paired mode uses the first
/// pseudo-input with the paired garment, unpaired mode the real person with
/// the first pseudo-input's garment.
pub fn eval_inputs(sample: &TryOnSample, mode: EvalMode) -> Result<(Image, Image)> {
    let pseudo = sample.pseudo.first().ok_or_else(|| Error::Contract("sample has no pseudo-input".into()))?;
    Ok(match mode {
        EvalMode::Paired => (pseudo.image.clone(), sample.garment.clone()),
        EvalMode::Unpaired => {
            let (h, w) = sample.person.dims();
            (sample.person.clone(), render_garment(&pseudo.garment, h, w))
        }
    })
}

/// Generates a try-on for every sample and scores the set against the
/// ground-truth persons. Returns the report and the generated images.
pub fn evaluate(model: &Model, samples: &[TryOnSample], mode: EvalMode, s: f64, seed: u64, batch: usize) -> Result<(EvalReport, Vec<Image>)> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let inputs: Vec<(Image, Image)> = samples.iter().map(|x| eval_inputs(x, mode)).collect::<Result<_>>()?;
    let mut generated = Vec::with_capacity(samples.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let persons: Vec<&Image> = chunk.iter().map(|(p, _)| p).collect();
        let garments: Vec<&Image> = chunk.iter().map(|(_, g)| g).collect();
        generated.extend(model.generate_batch(&persons, &garments, s, seed)?);
    }
    let gen_refs: Vec<&Image> = generated.iter().collect();
    let truth: Vec<&Image> = samples.iter().map(|x| &x.person).collect();
    let report = score(&model.codec, &gen_refs, &truth, mode, &model.fingerprint)?;
    Ok((report, generated))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(h: usize, w: usize, invert: bool) -> Image {
        let mut im = Image::new(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let on = ((y / 2 + x / 3) % 2 == 0) ^ invert;
                im.set(y, x, [on as u8 as f64; 3]);
            }
        }
        im
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = checker(20, 16, false);
        let mut b = a.clone();
        b.set(5, 5, [0.5; 3]);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_negative() {
        let a = checker(20, 16, false);
        let b = checker(20, 16, true);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn ssim_dim_mismatch() {
        assert!(matches!(
            ssim(&Image::new(12, 12, [0.0; 3]), &Image::new(12, 13, [0.0; 3])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kid_point_masses_positive() {
        let a = DMatrix::from_element(4, 2, 0.0);
        let b = DMatrix::from_element(4, 2, 1.0);
        assert!(kid(&a, &b).unwrap() > 0.0);
        assert!(kid(&DMatrix::zeros(1, 2), &b).is_err());
    }
}
