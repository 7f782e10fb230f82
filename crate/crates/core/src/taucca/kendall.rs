use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauVariant {
    /// Ties count zero; denominator `C(n, 2)`.
    #[default]
    A,
    /// Tie-corrected denominator `√((n₀ − n₁)(n₀ − n₂))`.
    B,
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// `sign(x_q − x_p)` for every pair `p < q`, in row-major pair order.
pub fn pair_signs(x: &[f64]) -> Vec<i8> {
    let n = x.len();
    let mut s = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for p in 0..n {
        for q in p + 1..n {
            s.push(sign(x[q] - x[p]));
        }
    }
    s
}

fn check(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::invalid("kendall tau needs at least 2 values"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kendall tau input".into()));
    }
    Ok(())
}

fn tied_error() -> Error {
    Error::Undefined("kendall tau of a vector with all values tied".into())
}

pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    kendall_tau_variant(a, b, TauVariant::A)
}

pub fn kendall_tau_variant(a: &[f64], b: &[f64], variant: TauVariant) -> Result<f64> {
    check(a, b)?;
    let (sa, sb) = (pair_signs(a), pair_signs(b));
    let (na, nb) = (nonzero(&sa), nonzero(&sb));
    if na == 0 || nb == 0 {
        return Err(tied_error());
    }
    let dot = dot(&sa, &sb) as f64;
    Ok(match variant {
        TauVariant::A => dot / sa.len() as f64,
        TauVariant::B => dot / ((na as f64) * (nb as f64)).sqrt(),
    })
}

/// `Σ w_p w_q sign·sign / Σ w_p w_q` over pairs `p < q`.
pub fn weighted_kendall_tau(a: &[f64], b: &[f64], w: &[f64]) -> Result<f64> {
    check(a, b)?;
    if w.len() != a.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: w.len(),
        });
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("weights must be positive and finite"));
    }
    if nonzero(&pair_signs(a)) == 0 || nonzero(&pair_signs(b)) == 0 {
        return Err(tied_error());
    }
    let n = a.len();
    let (mut num, mut den) = (0.0, 0.0);
    for p in 0..n {
        for q in p + 1..n {
            let ww = w[p] * w[q];
            num += ww * (sign(a[q] - a[p]) * sign(b[q] - b[p])) as f64;
            den += ww;
        }
    }
    Ok(num / den)
}

fn nonzero(s: &[i8]) -> usize {
    s.iter().filter(|&&v| v != 0).count()
}

fn dot(a: &[i8], b: &[i8]) -> i64 {
    a.iter().zip(b).map(|(&x, &y)| (x * y) as i64).sum()
}

/// Kendall-τ Gram matrix over unit profiles.
#[derive(Clone, Debug, PartialEq)]
pub struct TauGram {
    pub ids: Vec<String>,
    pub dim: usize,
    pub k: DMatrix<f64>,
    /// Units whose profile has every component tied; their row and column
    /// are zero.
    pub degenerate: Vec<bool>,
    pub variant: TauVariant,
}

impl TauGram {
    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.k.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Reorders units; `order[i]` is the old index placed at position `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<TauGram> {
        let n = self.n();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("not a permutation of the Gram units"));
        }
        Ok(TauGram {
            ids: order.iter().map(|&i| self.ids[i].clone()).collect(),
            dim: self.dim,
            k: DMatrix::from_fn(n, n, |i, j| self.k[(order[i], order[j])]),
            degenerate: order.iter().map(|&i| self.degenerate[i]).collect(),
            variant: self.variant,
        })
    }
}

/// Pairwise τ between profiles. Each entry is an exact integer count
/// divided once, so the matrix depends only on the profiles' orderings.
pub fn tau_gram(ids: Vec<String>, profiles: &[Vec<f64>], variant: TauVariant) -> Result<TauGram> {
    let n = profiles.len();
    if n < 2 || ids.len() != n {
        return Err(Error::invalid(format!(
            "tau gram needs at least 2 profiles with one id each, got {n} profiles and {} ids",
            ids.len()
        )));
    }
    let dim = profiles[0].len();
    if dim < 2 {
        return Err(Error::invalid("profile dimension must be at least 2"));
    }
    if let Some(p) = profiles.iter().find(|p| p.len() != dim) {
        return Err(Error::Dimension {
            expected: dim,
            got: p.len(),
        });
    }
    if profiles.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("tau gram profiles".into()));
    }
    let signs: Vec<Vec<i8>> = profiles.par_iter().map(|p| pair_signs(p)).collect();
    let counts: Vec<usize> = signs.iter().map(|s| nonzero(s)).collect();
    let pairs = (dim * (dim - 1) / 2) as f64;
    let degenerate: Vec<bool> = counts.iter().map(|&c| c == 0).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if degenerate[i] || degenerate[j] {
                        0.0
                    } else if i == j {
                        1.0
                    } else {
                        let d = dot(&signs[i.min(j)], &signs[i.max(j)]) as f64;
                        match variant {
                            TauVariant::A => d / pairs,
                            TauVariant::B => d / ((counts[i] as f64) * (counts[j] as f64)).sqrt(),
                        }
                    }
                })
                .collect()
        })
        .collect();
    let k = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    if degenerate.iter().any(|&d| d) {
        log::warn!(
            "tau gram: {} of {n} profiles fully tied",
            degenerate.iter().filter(|&&d| d).count()
        );
    }
    Ok(TauGram {
        ids,
        dim,
        k,
        degenerate,
        variant,
    })
}
