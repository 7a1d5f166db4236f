//! Scrambled Sobol sequences and quasirandom multivariate normal draws.
//!
//! Low-discrepancy points on the unit cube are mapped through
//! `A Φ⁻¹(u) + μ` with `Σ = A Aᵀ` to produce space-filling "draws" from a
//! multivariate normal. Replacing the Sobol points with uniform random
//! points recovers ordinary Monte Carlo sampling, which the benchmark
//! harness uses as the comparison baseline.

mod joe_kuo;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::linalg::FactorizationError;
use crate::mix_seed;
use crate::normal::NormalError;

pub use crate::normal::inv_cdf as inv_normal_cdf;

/// Largest supported dimension of the shipped direction-number table.
pub const MAX_DIMENSION: usize = joe_kuo::JOE_KUO.len() + 1;

const BITS: u32 = 32;

#[derive(Debug, Error)]
pub enum QmcError {
    #[error("Sobol dimension must lie in 1..={MAX_DIMENSION}, got {0}")]
    UnsupportedDimension(usize),
    #[error("mean has {mean} entries but covariance is {cov}x{cov}")]
    ShapeMismatch { mean: usize, cov: usize },
    #[error("sample count must be at least 1")]
    EmptySampleSet,
    #[error(transparent)]
    Factorization(#[from] FactorizationError),
    #[error(transparent)]
    Normal(#[from] NormalError),
}

/// Sobol sequence generator with optional Owen-style nested scrambling.
///
/// Direction numbers come from the Joe–Kuo "new-joe-kuo-6" table. The
/// scramble flips each output bit according to a keyed hash of the more
/// significant bits, which preserves the net structure of the sequence while
/// decorrelating different seeds. The all-zeros first point is skipped by
/// default, and every coordinate carries a half-cell offset of 2⁻³³ so that
/// emitted values never touch 0 or 1 (the normal quantile is singular there).
pub struct SobolGenerator {
    dimension: usize,
    scramble: Option<u64>,
    index: usize,
    directions: Vec<[u32; BITS as usize]>,
}

impl SobolGenerator {
    /// Scrambled generator; `skip` defaults to 1 (drops the all-zeros point).
    pub fn new(dimension: usize, scramble_seed: u64) -> Result<Self, QmcError> {
        Self::with_options(dimension, Some(scramble_seed), 1)
    }

    /// Unscrambled generator, mainly for validating the raw sequence.
    pub fn unscrambled(dimension: usize) -> Result<Self, QmcError> {
        Self::with_options(dimension, None, 1)
    }

    pub fn with_options(
        dimension: usize,
        scramble: Option<u64>,
        skip: usize,
    ) -> Result<Self, QmcError> {
        if dimension == 0 || dimension > MAX_DIMENSION {
            return Err(QmcError::UnsupportedDimension(dimension));
        }
        let directions = (0..dimension).map(direction_numbers).collect();
        Ok(Self { dimension, scramble, index: skip, directions })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Emits the next point of the sequence, in (0, 1)^d.
    pub fn next_point(&mut self) -> Vec<f64> {
        let i = self.index;
        self.index += 1;
        let gray = (i ^ (i >> 1)) as u64;
        (0..self.dimension)
            .map(|d| {
                let mut x: u32 = 0;
                let mut bits = gray;
                let mut j = 0;
                while bits != 0 {
                    if bits & 1 != 0 {
                        x ^= self.directions[d][j];
                    }
                    bits >>= 1;
                    j += 1;
                }
                if let Some(seed) = self.scramble {
                    x = owen_scramble(x, mix_seed(seed, d as u64));
                }
                (x as f64 + 0.5) / (1u64 << BITS) as f64
            })
            .collect()
    }

    pub fn points(&mut self, count: usize) -> Vec<Vec<f64>> {
        (0..count).map(|_| self.next_point()).collect()
    }
}

/// Direction numbers for one dimension, MSB-aligned.
fn direction_numbers(dim: usize) -> [u32; BITS as usize] {
    let mut v = [0u32; BITS as usize];
    if dim == 0 {
        // Van der Corput sequence in base 2.
        for (j, slot) in v.iter_mut().enumerate() {
            *slot = 1 << (BITS as usize - 1 - j);
        }
        return v;
    }
    let (s, a, m) = joe_kuo::JOE_KUO[dim - 1];
    let s = s as usize;
    for j in 0..s.min(BITS as usize) {
        v[j] = m[j] << (BITS as usize - 1 - j);
    }
    for j in s..BITS as usize {
        v[j] = v[j - s] ^ (v[j - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 != 0 {
                v[j] ^= v[j - k];
            }
        }
    }
    v
}

/// Nested uniform scramble realized with a keyed hash: the flip of each bit
/// depends only on the bits above it, so elementary intervals map onto
/// elementary intervals and equidistribution is preserved.
fn owen_scramble(x: u32, key: u64) -> u32 {
    let mut out = 0u32;
    for level in 0..BITS {
        let prefix = if level == 0 { 0 } else { (x >> (BITS - level)) as u64 };
        let flip = (mix_seed(key, ((level as u64) << 32) | prefix) & 1) as u32;
        let bit = (x >> (BITS - 1 - level)) & 1;
        out |= (bit ^ flip) << (BITS - 1 - level);
    }
    out
}

/// Unit-cube point source: scrambled Sobol for QMC, seeded uniform draws for
/// the MC baseline.
pub enum CubeSampler {
    Sobol(SobolGenerator),
    Uniform { rng: ChaCha12Rng, dimension: usize },
}

impl CubeSampler {
    pub fn sobol(dimension: usize, scramble_seed: u64) -> Result<Self, QmcError> {
        // No skip: scrambling randomizes the all-zeros point, and dropping
        // index 0 would break the net balance of the first 2^k points that
        // small sample counts rely on.
        Ok(Self::Sobol(SobolGenerator::with_options(dimension, Some(scramble_seed), 0)?))
    }

    pub fn uniform(dimension: usize, seed: u64) -> Self {
        Self::Uniform { rng: ChaCha12Rng::seed_from_u64(seed), dimension }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::Sobol(g) => g.dimension(),
            Self::Uniform { dimension, .. } => *dimension,
        }
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        match self {
            Self::Sobol(g) => g.next_point(),
            Self::Uniform { rng, dimension } => {
                (0..*dimension).map(|_| midpoint_open(rng.random::<f64>())).collect()
            }
        }
    }
}

/// Keeps uniform draws strictly inside (0, 1).
fn midpoint_open(u: f64) -> f64 {
    u.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Multivariate normal draws generated from unit-cube points.
pub struct MvnSampleSet {
    pub samples: Vec<DVector<f64>>,
    pub mean: DVector<f64>,
    /// Square root with `cov = factor * factorᵀ`, principal components in
    /// the columns ordered by decreasing eigenvalue.
    pub factor: DMatrix<f64>,
}

/// Quasirandom normal draws: `A Φ⁻¹(t_k) + μ` over a scrambled Sobol stream.
pub fn mvn_qmc(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    count: usize,
    gen: &mut SobolGenerator,
) -> Result<MvnSampleSet, QmcError> {
    if gen.dimension() != mean.len() {
        return Err(QmcError::ShapeMismatch { mean: mean.len(), cov: gen.dimension() });
    }
    let cube = gen.points(count);
    mvn_from_cube(mean, cov, &cube)
}

/// Plain Monte Carlo normal draws through the identical transform.
pub fn mvn_mc(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<MvnSampleSet, QmcError> {
    let cube: Vec<Vec<f64>> = (0..count)
        .map(|_| (0..mean.len()).map(|_| midpoint_open(rng.random::<f64>())).collect())
        .collect();
    mvn_from_cube(mean, cov, &cube)
}

pub fn mvn_from_cube(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    cube: &[Vec<f64>],
) -> Result<MvnSampleSet, QmcError> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(QmcError::ShapeMismatch { mean: n, cov: cov.nrows() });
    }
    if cube.is_empty() {
        return Err(QmcError::EmptySampleSet);
    }
    // Principal-component factor, largest eigenvalue first. For plain MC
    // any square root of the covariance is equivalent; for QMC this ordering
    // concentrates the variance in the leading (best distributed) dimensions
    // of the low-discrepancy stream, which keeps the effective dimension of
    // downstream integrands low.
    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut factor = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let sd = eig.eigenvalues[i].max(0.0).sqrt();
        factor.set_column(col, &(eig.eigenvectors.column(i) * sd));
    }
    let samples = cube
        .iter()
        .map(|point| {
            let z = DVector::from_iterator(
                n,
                point.iter().map(|&u| inv_normal_cdf(u).expect("cube points lie in (0,1)")),
            );
            &factor * z + mean
        })
        .collect();
    Ok(MvnSampleSet { samples, mean: mean.clone(), factor })
}
