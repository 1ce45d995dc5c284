//! Song structure analysis: cosine self-similarity of bar embeddings, a
//! Gaussian-tapered checkerboard novelty curve, boundary picking, and Hu
//! moment shape signatures.

use serde::{Deserialize, Serialize};

use crate::conlon::{Channel, ConlonImage, STEPS};
use crate::error::{Error, Result};
use crate::latent::LatentVector;

pub const DEFAULT_KERNEL_HALF_WIDTH: usize = 8;
pub const DEFAULT_SIGMA: f64 = 0.5;
pub const DEFAULT_SSM_THRESHOLD: f64 = 0.8;
pub const DEFAULT_HU_THRESHOLD: f64 = 0.1;
/// Hu invariants smaller than this in magnitude count as zero.
pub const HU_ZERO: f64 = 1e-24;

/// Symmetric N×N affinities in [0, 1] with a unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_values(n: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * n);
        SimilarityMatrix { n, values }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

fn cosine(a: &LatentVector, b: &LatentVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `SM[i,j] = 1/2 + cos(w_i, w_j) / 2`. Zero vectors have cosine 0 with
/// everything; the diagonal is always 1.
pub fn compute_ssm(latents: &[LatentVector]) -> SimilarityMatrix {
    let n = latents.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = (0.5 + 0.5 * cosine(&latents[i], &latents[j])).clamp(0.0, 1.0);
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    SimilarityMatrix { n, values }
}

/// Pairs `(i, j)`, `i < j`, whose similarity exceeds `threshold`.
pub fn detect_repetitions(ssm: &SimilarityMatrix, threshold: f64) -> Vec<(usize, usize)> {
    let n = ssm.len();
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| ssm.get(i, j) > threshold)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoveltyParams {
    /// Kernel half width `L`, in bars.
    pub half_width: usize,
    pub sigma: f64,
}

impl Default for NoveltyParams {
    fn default() -> Self {
        NoveltyParams {
            half_width: DEFAULT_KERNEL_HALF_WIDTH,
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// `(2L+1)²` kernel indexed by offsets `a, b ∈ [−L, L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    half_width: usize,
    values: Vec<f64>,
}

impl Kernel {
    pub fn half_width(&self) -> usize {
        self.half_width
    }

    pub fn size(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn entry(&self, a: isize, b: isize) -> f64 {
        let l = self.half_width as isize;
        assert!(a.abs() <= l && b.abs() <= l, "kernel offset out of range");
        self.values[((a + l) as usize) * self.size() + (b + l) as usize]
    }

    /// Row-major values, row `a = −L` first.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn sign(x: isize) -> f64 {
    match x.cmp(&0) {
        std::cmp::Ordering::Less => -1.0,
        std::cmp::Ordering::Equal => 0.0,
        std::cmp::Ordering::Greater => 1.0,
    }
}

/// `sign(a)·sign(b)·exp(−(a² + b²) / (2Lσ²))`.
pub fn checkerboard_kernel(half_width: usize, sigma: f64) -> Kernel {
    assert!(half_width >= 1, "kernel half width must be at least 1");
    assert!(sigma > 0.0, "sigma must be positive");
    let l = half_width as isize;
    let denom = 2.0 * half_width as f64 * sigma * sigma;
    let mut values = Vec::with_capacity((2 * half_width + 1).pow(2));
    for a in -l..=l {
        for b in -l..=l {
            let taper = (-((a * a + b * b) as f64) / denom).exp();
            values.push(sign(a) * sign(b) * taper);
        }
    }
    Kernel { half_width, values }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoveltyCurve {
    pub values: Vec<f64>,
    pub params: NoveltyParams,
}

impl NoveltyCurve {
    /// Mean plus half a (population) standard deviation.
    pub fn default_threshold(&self) -> f64 {
        let n = self.values.len();
        if n == 0 {
            return 0.0;
        }
        let mean = self.values.iter().sum::<f64>() / n as f64;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        mean + 0.5 * var.sqrt()
    }
}

/// Correlates the kernel along the diagonal. Indices outside `[0, N)` are
/// clamped to the nearest edge, so a matrix that is constant everywhere has
/// zero novelty everywhere, edges included.
pub fn novelty(ssm: &SimilarityMatrix, params: NoveltyParams) -> NoveltyCurve {
    let kernel = checkerboard_kernel(params.half_width, params.sigma);
    let n = ssm.len() as isize;
    let l = params.half_width as isize;
    let clamp = |i: isize| i.clamp(0, n - 1) as usize;
    let values = (0..n)
        .map(|m| {
            // The kernel is odd in each offset, so the four quadrants share
            // one weight; grouping them makes constant inputs cancel exactly.
            let mut sum = 0.0;
            for a in 1..=l {
                for b in 1..=l {
                    let s = |x: isize, y: isize| ssm.get(clamp(m + x), clamp(m + y));
                    let quad = (s(a, b) + s(-a, -b)) - (s(a, -b) + s(-a, b));
                    sum += kernel.entry(a, b) * quad;
                }
            }
            sum
        })
        .collect();
    NoveltyCurve { values, params }
}

/// Segment starting points: index 0, plus every interior local maximum
/// above `threshold`. A plateau counts once, at its leftmost index, when
/// the values on both sides of it are no higher and at least one is lower.
pub fn detect_boundaries(curve: &[f64], threshold: f64) -> Vec<usize> {
    let n = curve.len();
    let mut out = vec![0];
    let mut i = 1;
    while i + 1 < n {
        let v = curve[i];
        let mut end = i;
        while end + 1 < n && curve[end + 1] == v {
            end += 1;
        }
        if end + 1 < n {
            let (left, right) = (curve[i - 1], curve[end + 1]);
            if v > threshold && v >= left && v >= right && (v > left || v > right) {
                out.push(i);
            }
        }
        i = end + 1;
    }
    out
}

/// The seven Hu moment invariants of an image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuSignature {
    pub moments: [f64; 7],
    /// Number of positive cells the signature was computed from.
    pub support: usize,
}

impl HuSignature {
    /// Fewer than two cells carry no usable shape information.
    pub fn is_degenerate(&self) -> bool {
        self.support < 2
    }
}

/// `∫ₓ^{x+1} u^k du` for `k = 0..=3`.
fn cell_integrals(x: f64) -> [f64; 4] {
    let x1 = x + 1.0;
    [
        1.0,
        (x1 * x1 - x * x) / 2.0,
        (x1.powi(3) - x.powi(3)) / 3.0,
        (x1.powi(4) - x.powi(4)) / 4.0,
    ]
}

/// Hu invariants of a grayscale grid, `values[row * width + col]`, with
/// each cell treated as a unit square of uniform mass. Columns are x, rows y.
pub fn hu_signature_grid(values: &[f32], width: usize) -> Result<HuSignature> {
    assert!(width > 0 && values.len() % width == 0);
    let cells: Vec<(f64, f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, &v)| ((i % width) as f64, (i / width) as f64, v as f64))
        .collect();
    if cells.is_empty() {
        return Err(Error::EmptyImage);
    }

    let mut m00 = 0.0;
    let mut m10 = 0.0;
    let mut m01 = 0.0;
    for &(x, y, w) in &cells {
        m00 += w;
        m10 += w * (x + 0.5);
        m01 += w * (y + 0.5);
    }
    let (cx, cy) = (m10 / m00, m01 / m00);

    // mu[p][q] for p + q <= 3
    let mut mu = [[0.0f64; 4]; 4];
    for &(x, y, w) in &cells {
        let ix = cell_integrals(x - cx);
        let iy = cell_integrals(y - cy);
        for p in 0..4 {
            for q in 0..4 - p {
                mu[p][q] += w * ix[p] * iy[q];
            }
        }
    }
    let eta = |p: usize, q: usize| mu[p][q] / mu[0][0].powf(1.0 + (p + q) as f64 / 2.0);
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));

    let a = n30 + n12;
    let b = n21 + n03;
    let h1 = n20 + n02;
    let h2 = (n20 - n02).powi(2) + 4.0 * n11 * n11;
    let h3 = (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2);
    let h4 = a * a + b * b;
    let h5 = (n30 - 3.0 * n12) * a * (a * a - 3.0 * b * b) + (3.0 * n21 - n03) * b * (3.0 * a * a - b * b);
    let h6 = (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b;
    let h7 = (3.0 * n21 - n03) * a * (a * a - 3.0 * b * b) - (n30 - 3.0 * n12) * b * (3.0 * a * a - b * b);

    Ok(HuSignature {
        moments: [h1, h2, h3, h4, h5, h6, h7],
        support: cells.len(),
    })
}

/// Hu invariants of the velocity channel.
pub fn hu_signature(image: &ConlonImage) -> Result<HuSignature> {
    hu_signature_grid(image.channel(Channel::Velocity), STEPS)
}

/// `Σ |1/m_a − 1/m_b|` with `m = sign(h)·log₁₀|h|`; invariants that are
/// zero on either side are skipped.
pub fn hu_distance(a: &HuSignature, b: &HuSignature) -> f64 {
    let log_scale = |h: f64| h.signum() * h.abs().log10();
    a.moments
        .iter()
        .zip(&b.moments)
        .filter(|(x, y)| x.abs() > HU_ZERO && y.abs() > HU_ZERO)
        .map(|(&x, &y)| (log_scale(x), log_scale(y)))
        .filter(|(mx, my)| *mx != 0.0 && *my != 0.0)
        .map(|(mx, my)| (1.0 / mx - 1.0 / my).abs())
        .sum()
}
