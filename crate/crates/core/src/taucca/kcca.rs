use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kendall::TauGram;
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::metrics::quantile_sorted;

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KccaConfig {
    /// Truncation rank; `None` uses `min(25, ⌊n/10⌋)`.
    pub rank: Option<usize>,
    /// Ridge as a multiple of the mean centered-Gram eigenvalue, `trace(K̃)/n`.
    pub ridge: f64,
}

impl Default for KccaConfig {
    fn default() -> Self {
        KccaConfig { rank: None, ridge: 1e-6 }
    }
}

impl KccaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Config(format!("kcca ridge must be >= 0, got {}", self.ridge)));
        }
        if self.rank == Some(0) {
            return Err(Error::Config("kcca rank must be positive".into()));
        }
        Ok(())
    }

    pub fn rank_for(&self, n: usize) -> usize {
        self.rank.unwrap_or_else(|| (n / 10).clamp(1, 25))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcaResult {
    /// Descending, in `[0, 1]`.
    pub correlations: Vec<f64>,
    pub rank: usize,
    pub kappa_x: f64,
    pub kappa_y: f64,
    /// Set when the requested rank exceeded a Gram's numerical rank.
    pub note: Option<String>,
}

impl CcaResult {
    pub fn first(&self) -> f64 {
        self.correlations.first().copied().unwrap_or(0.0)
    }
}

/// Leading eigenpairs of a centered Gram.
#[derive(Clone, Debug)]
pub struct KernelBasis {
    /// n × rank, orthonormal columns.
    vectors: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    /// Numerical rank of the centered Gram.
    numerical_rank: usize,
    trace: f64,
    n: usize,
}

impl KernelBasis {
    pub fn new(gram: &TauGram, max_rank: usize) -> Result<Self> {
        let n = gram.n();
        if n < 3 {
            return Err(Error::invalid(format!("kcca needs at least 3 units, got {n}")));
        }
        let mean_row: Vec<f64> = (0..n).map(|i| gram.k.row(i).sum() / n as f64).collect();
        let grand = mean_row.iter().sum::<f64>() / n as f64;
        let centered = DMatrix::from_fn(n, n, |i, j| gram.k[(i, j)] - mean_row[i] - mean_row[j] + grand);
        let trace = centered.trace();
        let eig = SymmetricEigen::new(centered);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = eig.eigenvalues[order[0]].max(0.0);
        let numerical_rank = order
            .iter()
            .take_while(|&&i| eig.eigenvalues[i] > RANK_TOL * top && eig.eigenvalues[i] > 0.0)
            .count();
        let keep = max_rank.min(numerical_rank);
        let vectors = DMatrix::from_fn(n, keep, |i, c| eig.eigenvectors[(i, order[c])]);
        let eigenvalues = order[..keep].iter().map(|&i| eig.eigenvalues[i]).collect();
        Ok(KernelBasis {
            vectors,
            eigenvalues,
            numerical_rank,
            trace,
            n,
        })
    }

    pub fn numerical_rank(&self) -> usize {
        self.numerical_rank
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Canonical correlations from two bases truncated to `rank`, with unit `i`
/// of Y taken from row `perm[i]` when a permutation is given.
fn correlations(bx: &KernelBasis, by: &KernelBasis, rank: usize, cfg: &KccaConfig, perm: Option<&[usize]>) -> (Vec<f64>, f64, f64) {
    let n = bx.n as f64;
    let kx = cfg.ridge * bx.trace / n;
    let ky = cfg.ridge * by.trace / n;
    // Whitened cross-covariance of the kernel principal coordinates:
    // diag(√(λ/n)/√(λ/n + κ)) Uxᵀ Uy diag(...).
    let shrink = |l: f64, k: f64| {
        let v = l / n;
        (v / (v + k)).sqrt()
    };
    let m = DMatrix::from_fn(rank, rank, |a, b| {
        let mut s = 0.0;
        for i in 0..bx.n {
            let yi = perm.map_or(i, |p| p[i]);
            s += bx.vectors[(i, a)] * by.vectors[(yi, b)];
        }
        s * shrink(bx.eigenvalues[a], kx) * shrink(by.eigenvalues[b], ky)
    });
    let mut sv: Vec<f64> = m.singular_values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    (sv, kx, ky)
}

fn resolve_rank(bx: &KernelBasis, by: &KernelBasis, requested: usize) -> (usize, Option<String>) {
    let avail = bx.eigenvalues.len().min(by.eigenvalues.len());
    if avail < requested {
        let note = format!(
            "rank reduced from {requested} to {avail} (numerical ranks {} and {})",
            bx.numerical_rank, by.numerical_rank
        );
        log::info!("kcca: {note}");
        (avail, Some(note))
    } else {
        (requested, None)
    }
}

fn check_pair(kx: &TauGram, ky: &TauGram) -> Result<()> {
    if kx.ids != ky.ids {
        return Err(Error::invalid("kcca Grams must share unit ids in the same order"));
    }
    Ok(())
}

/// Kernel CCA between two Grams over the same units.
pub fn kcca(kx: &TauGram, ky: &TauGram, cfg: &KccaConfig) -> Result<CcaResult> {
    cfg.validate()?;
    check_pair(kx, ky)?;
    let requested = cfg.rank_for(kx.n());
    let bx = KernelBasis::new(kx, requested)?;
    let by = KernelBasis::new(ky, requested)?;
    kcca_from_bases(&bx, &by, requested, cfg)
}

pub fn kcca_from_bases(bx: &KernelBasis, by: &KernelBasis, requested: usize, cfg: &KccaConfig) -> Result<CcaResult> {
    let (rank, note) = resolve_rank(bx, by, requested);
    if rank == 0 {
        return Err(Error::Undefined("a centered Gram has rank zero".into()));
    }
    let (correlations, kappa_x, kappa_y) = correlations(bx, by, rank, cfg, None);
    Ok(CcaResult {
        correlations,
        rank,
        kappa_x,
        kappa_y,
        note,
    })
}

/// First canonical correlation for each of `n_perm` random relabelings of
/// the Y units.
pub fn permutation_null(kx: &TauGram, ky: &TauGram, cfg: &KccaConfig, n_perm: usize, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_pair(kx, ky)?;
    let requested = cfg.rank_for(kx.n());
    let bx = KernelBasis::new(kx, requested)?;
    let by = KernelBasis::new(ky, requested)?;
    permutation_null_from_bases(&bx, &by, requested, cfg, n_perm, seed)
}

pub fn permutation_null_from_bases(
    bx: &KernelBasis,
    by: &KernelBasis,
    requested: usize,
    cfg: &KccaConfig,
    n_perm: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (rank, _) = resolve_rank(bx, by, requested);
    if rank == 0 {
        return Err(Error::Undefined("a centered Gram has rank zero".into()));
    }
    let n = bx.n();
    Ok((0..n_perm)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[r as u64]));
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            correlations(bx, by, rank, cfg, Some(&p)).0[0]
        })
        .collect())
}

/// Two-sided percentile band of a null sample.
pub fn null_band(null: &[f64], level: f64) -> (f64, f64) {
    let mut v = null.to_vec();
    v.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (quantile_sorted(&v, a), quantile_sorted(&v, 1.0 - a))
}
