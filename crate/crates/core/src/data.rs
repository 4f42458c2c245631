//! Synthetic regression data: signal functions, dataset and query generation,
//! and the seeding scheme that gives every component its own RNG stream.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Mean functions used by the simulation experiments. Covariates live in
/// `[-1, 1]^d` and responses are the signal plus standard normal noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    /// `10 sin(pi x1 x2) + 20 (x3 - 1/2)^2 + 10 x4 + 5 x5`
    Friedman,
    /// `x1 + x2 + x3 + x4`
    Linear,
    /// Constant `2`, used for null calibration.
    Constant,
}

impl SignalKind {
    /// Smallest covariate dimension the signal reads.
    pub fn min_dim(self) -> usize {
        match self {
            SignalKind::Friedman => 5,
            SignalKind::Linear => 4,
            SignalKind::Constant => 0,
        }
    }

    /// Evaluate the mean function at a covariate vector.
    pub fn eval(self, x: &[f64]) -> Result<f64> {
        if x.len() < self.min_dim() {
            return Err(Error::Dimension(format!(
                "signal {self:?} needs at least {} covariates, got {}",
                self.min_dim(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal input"));
        }
        Ok(match self {
            SignalKind::Friedman => {
                10.0 * (std::f64::consts::PI * x[0] * x[1]).sin()
                    + 20.0 * (x[2] - 0.5).powi(2)
                    + 10.0 * x[3]
                    + 5.0 * x[4]
            }
            SignalKind::Linear => x[0] + x[1] + x[2] + x[3],
            SignalKind::Constant => 2.0,
        })
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "friedman" => Ok(SignalKind::Friedman),
            "linear" => Ok(SignalKind::Linear),
            "constant" => Ok(SignalKind::Constant),
            other => Err(Error::InvalidArgument(format!("unknown signal '{other}'"))),
        }
    }
}

impl std::fmt::Display for SignalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            SignalKind::Friedman => "friedman",
            SignalKind::Linear => "linear",
            SignalKind::Constant => "constant",
        };
        f.write_str(name)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A reproducible RNG stream: one master key plus a stream index.
///
/// Streams with the same master seed and different stream indices are
/// independent by construction (the index selects a ChaCha stream, not a
/// rehash of the key), so results do not depend on scheduling or on how many
/// worker threads consume them. [`SeedSpec::child`] derives a sub-stream
/// index by hashing, which keeps whole derivation trees collision-free for
/// any realistic number of components.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl SeedSpec {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        SeedSpec { master_seed, stream_index }
    }

    /// Stream 0 for a master seed; the root of a derivation tree.
    pub fn root(master_seed: u64) -> Self {
        SeedSpec { master_seed, stream_index: 0 }
    }

    /// Derive the sub-stream with the given tag.
    pub fn child(self, tag: u64) -> Self {
        let folded = self
            .stream_index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag)
            .wrapping_add(1);
        SeedSpec { master_seed: self.master_seed, stream_index: splitmix64(folded) }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }
}

fn check_matrix(x: &DMatrix<f64>, what: &'static str) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    if x.iter().any(|v| v.abs() > 1.0) {
        return Err(Error::InvalidArgument(format!("{what} outside [-1, 1]")));
    }
    Ok(())
}

/// A regression training sample: covariates in `[-1, 1]^d` and a finite
/// response vector.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::Empty("dataset"));
        }
        if x.nrows() != y.len() {
            return Err(Error::Dimension(format!(
                "{} covariate rows vs {} responses",
                x.nrows(),
                y.len()
            )));
        }
        check_matrix(&x, "covariates")?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("responses"));
        }
        Ok(Dataset { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    #[inline]
    pub fn xv(&self, row: usize, col: usize) -> f64 {
        self.x[(row, col)]
    }

    /// Copy covariate row `i` into `out`.
    pub fn copy_row(&self, i: usize, out: &mut [f64]) {
        for (j, slot) in out.iter_mut().enumerate().take(self.dim()) {
            *slot = self.x[(i, j)];
        }
    }

    /// Covariate row `i` as an owned vector.
    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.dim()).map(|j| self.x[(i, j)]).collect()
    }

    /// Same covariates with a different response (used for residual refits).
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        Dataset::new(self.x.clone(), y)
    }
}

/// Fixed evaluation points, stored row-major so each point is a contiguous
/// slice.
#[derive(Debug, Clone)]
pub struct QuerySet {
    data: Vec<f64>,
    m: usize,
    d: usize,
}

impl QuerySet {
    pub fn new(data: Vec<f64>, m: usize, d: usize) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(Error::Empty("query set"));
        }
        if data.len() != m * d {
            return Err(Error::Dimension(format!(
                "query buffer holds {} values, expected {}x{}",
                data.len(),
                m,
                d
            )));
        }
        if data.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidArgument("query points outside [-1, 1]".into()));
        }
        Ok(QuerySet { data, m, d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged query rows".into()));
        }
        QuerySet::new(rows.concat(), m, d)
    }

    /// A query set holding a single point.
    pub fn single(x: &[f64]) -> Result<Self> {
        QuerySet::new(x.to_vec(), 1, x.len())
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.d..(j + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }
}

/// Draw an i.i.d. sample: `X ~ U[-1, 1]^d`, `Y = signal(X) + N(0, 1)`.
///
/// Each row consumes `d` uniforms followed by one normal draw, so a dataset
/// is a pure function of `(kind, n, d, seed)`.
pub fn gen_dataset(kind: SignalKind, n: usize, d: usize, seed: SeedSpec) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Empty("dataset"));
    }
    if d < kind.min_dim() || d == 0 {
        return Err(Error::Dimension(format!(
            "signal {kind:?} needs at least {} covariates, got {d}",
            kind.min_dim().max(1)
        )));
    }
    let mut rng = seed.rng();
    let mut x = DMatrix::zeros(n, d);
    let mut y = DVector::zeros(n);
    let mut row = vec![0.0; d];
    for i in 0..n {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = 2.0 * rng.gen::<f64>() - 1.0;
            x[(i, j)] = *slot;
        }
        let noise: f64 = rng.sample(StandardNormal);
        y[i] = kind.eval(&row)? + noise;
    }
    Dataset::new(x, y)
}

/// Draw `m` query points i.i.d. uniform on `[-1, 1]^d`.
pub fn gen_queries(m: usize, d: usize, seed: SeedSpec) -> Result<QuerySet> {
    if m == 0 || d == 0 {
        return Err(Error::Empty("query set"));
    }
    let mut rng = seed.rng();
    let data: Vec<f64> = (0..m * d).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect();
    QuerySet::new(data, m, d)
}
