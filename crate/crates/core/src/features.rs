//! Spectral front-ends (log-STFT, full-clip FT magnitude) and the
//! bag-of-words baseline: PCA over the frequency axis followed by K-means
//! vector quantization of the spectrogram frames.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::AudioBuffer;

pub const NUM_BINS: usize = 257;
pub const NUM_FRAMES: usize = 64;
pub const SPEC_LEN: usize = NUM_BINS * NUM_FRAMES;
pub const CLIP_LEN: usize = 16384;
pub const FT_BINS: usize = CLIP_LEN / 2 + 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("expected {expected} samples, got {actual}")]
    WrongLength { expected: usize, actual: usize },
    #[error("need at least {needed} vectors, got {actual}")]
    TooFewVectors { needed: usize, actual: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid parameter: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window: String,
    pub window_size: usize,
    pub hop: usize,
    pub frames: usize,
    pub eps: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { window: "hann".into(), window_size: 512, hop: 256, frames: NUM_FRAMES, eps: 1e-7 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    /// Input length the framing is laid out for; the tail is zero-padded
    /// so that exactly `frames` windows fit.
    pub fn input_len(&self) -> usize {
        self.frames * self.hop
    }
}

/// Log-magnitude STFT, stored frame-major (`frames` rows of `bins`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    bins: usize,
    frames: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn from_frames(bins: usize, frames: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), bins * frames);
        Spectrogram { bins, frames, data }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.data[frame * self.bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.bins..(frame + 1) * self.bins]
    }

    /// Frame-major values; this is the `frames x bins` network input layout.
    pub fn as_frame_major(&self) -> &[f64] {
        &self.data
    }

    /// Row concatenation of the `bins x frames` matrix.
    pub fn flatten_rows(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for b in 0..self.bins {
            for f in 0..self.frames {
                out.push(self.get(b, f));
            }
        }
        out
    }

    pub fn argmax_bin(&self, frame: usize) -> usize {
        let row = self.frame(frame);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Reusable STFT analyzer (plan and window are built once).
pub struct Stft {
    cfg: StftConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: StftConfig) -> Self {
        let n = cfg.window_size;
        // periodic Hann
        let window = (0..n).map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Stft { cfg, window, fft }
    }

    pub fn config(&self) -> &StftConfig {
        &self.cfg
    }

    pub fn logmag(&self, samples: &[f64]) -> Result<Spectrogram, FeatureError> {
        let cfg = &self.cfg;
        if samples.len() != cfg.input_len() {
            return Err(FeatureError::WrongLength { expected: cfg.input_len(), actual: samples.len() });
        }
        let bins = cfg.bins();
        let mut data = Vec::with_capacity(bins * cfg.frames);
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.window_size];
        for f in 0..cfg.frames {
            let start = f * cfg.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                let s = samples.get(start + i).copied().unwrap_or(0.0);
                *c = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            data.extend(buf[..bins].iter().map(|c| (c.norm() + cfg.eps).ln()));
        }
        Ok(Spectrogram { bins, frames: cfg.frames, data })
    }
}

pub fn stft_logmag(audio: &AudioBuffer, eps: f64) -> Result<Spectrogram, FeatureError> {
    Stft::new(StftConfig { eps, ..StftConfig::default() }).logmag(&audio.samples)
}

/// Magnitude of the whole-clip DFT, non-redundant half.
pub fn ft_mag(audio: &AudioBuffer) -> Vec<f64> {
    let n = audio.len();
    let mut buf: Vec<Complex<f64>> = audio.samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Global standardization applied to log-spectrogram values before they
/// reach a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.0, std: 1.0 }
    }
}

impl Normalization {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Running accumulator for [`Normalization`]; sums are kept in order so the
/// result is deterministic.
#[derive(Debug, Default, Clone)]
pub struct NormalizationAccumulator {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl NormalizationAccumulator {
    pub fn push_all(&mut self, values: &[f64]) {
        for &v in values {
            self.n += 1;
            self.sum += v;
            self.sum_sq += v * v;
        }
    }

    pub fn finish(&self) -> Normalization {
        if self.n == 0 {
            return Normalization::default();
        }
        let mean = self.sum / self.n as f64;
        let var = (self.sum_sq / self.n as f64 - mean * mean).max(0.0);
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        Normalization { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub input_dim: usize,
    /// Number of retained directions (may be below the requested target
    /// when the covariance is rank deficient).
    pub dim: usize,
    pub mean: Vec<f64>,
    /// `dim` rows of `input_dim`, orthonormal.
    pub components: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub retained_variance: f64,
}

/// Fits principal directions of `frames` and keeps the top `target_dim`.
pub fn pca_fit(frames: &[Vec<f64>], target_dim: usize) -> Result<PcaModel, FeatureError> {
    if target_dim == 0 {
        return Err(FeatureError::Invalid("target_dim must be positive"));
    }
    let n = frames.len();
    if n < 2 {
        return Err(FeatureError::TooFewVectors { needed: 2, actual: n });
    }
    let d = frames[0].len();
    if let Some(bad) = frames.iter().find(|f| f.len() != d) {
        return Err(FeatureError::DimMismatch { expected: d, actual: bad.len() });
    }
    let mut mean = vec![0.0; d];
    for f in frames {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for f in frames {
        for ((c, v), m) in centered.iter_mut().zip(f).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * 1e-10;

    let mut components = Vec::new();
    let mut eigenvalues = Vec::new();
    for &idx in order.iter().take(target_dim) {
        let lambda = eig.eigenvalues[idx];
        if lambda <= tol || lambda <= 0.0 {
            break;
        }
        eigenvalues.push(lambda);
        components.extend(eig.eigenvectors.column(idx).iter().copied());
    }
    let dim = eigenvalues.len();
    let retained_variance = if total > 0.0 { (eigenvalues.iter().sum::<f64>() / total).min(1.0) } else { 1.0 };
    Ok(PcaModel { input_dim: d, dim, mean, components, eigenvalues, retained_variance })
}

impl PcaModel {
    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim, "PCA input dimension");
        self.components
            .chunks_exact(self.input_dim)
            .map(|row| row.iter().zip(x).zip(&self.mean).map(|((c, v), m)| c * (v - m)).sum())
            .collect()
    }

    /// Maps a projection back to input space.
    pub fn reconstruct(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (row, &coef) in self.components.chunks_exact(self.input_dim).zip(z) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += coef * c;
            }
        }
        out
    }
}

pub fn pca_transform(model: &PcaModel, frame: &[f64]) -> Vec<f64> {
    model.transform(frame)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmeansCodebook {
    pub k: usize,
    pub dim: usize,
    /// `k` rows of `dim`.
    pub centroids: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KmeansCodebook {
    pub fn centroid(&self, i: usize) -> &[f64] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Index and squared distance of the closest centroid; ties go to the
    /// lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist(c, x);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn quantization_error(&self, vectors: &[Vec<f64>]) -> f64 {
        vectors.iter().map(|v| self.nearest(v).1).sum()
    }
}

#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub codebook: KmeansCodebook,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
    pub converged: bool,
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// A cluster that loses all its members is re-seeded at the point farthest
/// from its current centroid.
pub fn kmeans_fit<R: Rng + ?Sized>(
    vectors: &[Vec<f64>],
    k: usize,
    rng: &mut R,
    max_iters: usize,
) -> Result<KmeansFit, FeatureError> {
    if k == 0 {
        return Err(FeatureError::Invalid("k must be positive"));
    }
    let n = vectors.len();
    if n < k {
        return Err(FeatureError::TooFewVectors { needed: k, actual: n });
    }
    let dim = vectors[0].len();
    if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
        return Err(FeatureError::DimMismatch { expected: dim, actual: bad.len() });
    }

    // k-means++
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&vectors[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(&vectors[pick]);
        for (w, v) in d2.iter_mut().zip(vectors) {
            *w = w.min(sq_dist(v, &centroids[start..start + dim]));
        }
    }

    let mut codebook = KmeansCodebook { k, dim, centroids };
    let mut assign = vec![usize::MAX; n];
    let mut dist = vec![0.0; n];
    let mut inertia = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, v) in vectors.iter().enumerate() {
            let (c, d) = codebook.nearest(v);
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
            dist[i] = d;
        }
        inertia.push(dist.iter().sum());
        if !changed {
            converged = true;
            break;
        }

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (v, &c) in vectors.iter().zip(&assign) {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(v) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    codebook.centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
        for c in (0..k).filter(|&c| counts[c] == 0) {
            let (far, far_d) = dist
                .iter()
                .enumerate()
                .fold((0, -1.0), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
            if far_d <= 0.0 {
                break;
            }
            codebook.centroids[c * dim..(c + 1) * dim].copy_from_slice(&vectors[far]);
            dist[far] = 0.0;
        }
    }
    Ok(KmeansFit { codebook, inertia, converged })
}

/// Normalized histogram of nearest-centroid assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct BowVector {
    pub probs: Vec<f64>,
}

pub fn bow_encode(codebook: &KmeansCodebook, frames: &[Vec<f64>]) -> BowVector {
    let mut probs = vec![0.0; codebook.k];
    for f in frames {
        probs[codebook.nearest(f).0] += 1.0;
    }
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        probs.iter_mut().for_each(|p| *p /= total);
    }
    BowVector { probs }
}

/// PCA + codebook pair turning a spectrogram into a bag-of-words vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowFeaturizer {
    pub pca: PcaModel,
    pub codebook: KmeansCodebook,
}

impl BowFeaturizer {
    /// Fits PCA on all frames of `specs`, then the codebook on their
    /// projections.
    pub fn fit<R: Rng + ?Sized>(
        specs: &[Spectrogram],
        pca_dim: usize,
        k: usize,
        rng: &mut R,
        max_iters: usize,
    ) -> Result<Self, FeatureError> {
        let frames: Vec<Vec<f64>> =
            specs.iter().flat_map(|s| (0..s.frames()).map(move |f| s.frame(f).to_vec())).collect();
        let pca = pca_fit(&frames, pca_dim)?;
        let projected: Vec<Vec<f64>> = frames.iter().map(|f| pca.transform(f)).collect();
        let codebook = kmeans_fit(&projected, k, rng, max_iters)?.codebook;
        Ok(BowFeaturizer { pca, codebook })
    }

    pub fn encode(&self, spec: &Spectrogram) -> BowVector {
        let frames: Vec<Vec<f64>> = (0..spec.frames()).map(|f| self.pca.transform(spec.frame(f))).collect();
        bow_encode(&self.codebook, &frames)
    }
}
