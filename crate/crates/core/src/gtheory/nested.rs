//! Variance components of a fully nested random-intercept model
//!
//! ```text
//! y = μ + a_1[u_1] + a_2[u_2] + … + a_L[u_L] + e,   a_h ~ N(0, σ²_h), e ~ N(0, σ²_e)
//! ```
//!
//! fitted by EM on the Gaussian tree (root → level-1 units → … → level-L units
//! → observations), with Henderson's nested method-of-moments estimate as the
//! starting point. The E-step is exact: an upward pass collects each subtree's
//! likelihood as a quadratic in the unit's cumulative effect, and a downward
//! pass turns those into posterior means and variances.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Ml,
    Reml,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub method: Method,
    pub max_iter: usize,
    /// Stop when the relative change in log-likelihood falls below this.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            method: Method::Ml,
            max_iter: 500,
            tol: 1e-8,
        }
    }
}

/// How a level that cannot be separated from a neighbour was reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confounding {
    /// Only one unit overall: absorbed by the grand mean, reported as 0.
    Intercept,
    /// Every parent has exactly one unit at this level: the level's variance
    /// is reported on its parent level.
    Parent,
    /// Every unit holds a single observation: the level's variance is
    /// reported in the residual.
    Residual,
}

/// Units of each level, `parent[h][u]` being the unit at level `h − 1` (or 0
/// for the root when `h = 0`) that contains unit `u` of level `h`.
#[derive(Clone, Debug)]
pub struct NestedDesign {
    parent: Vec<Vec<usize>>,
    /// Bottom-level unit of each observation.
    leaf: Vec<usize>,
}

impl NestedDesign {
    /// Builds the design from per-observation label paths, outermost level
    /// first. Units are identified by their full path prefix, so equal labels
    /// under different parents are different units.
    pub fn from_paths<K: AsRef<[u64]>>(paths: &[K]) -> Result<Self> {
        let depth = paths.first().map_or(0, |p| p.as_ref().len());
        if paths.iter().any(|p| p.as_ref().len() != depth) {
            return Err(Error::invalid("nesting paths differ in length"));
        }
        let mut parent = vec![Vec::new(); depth];
        let mut ids: Vec<HashMap<(usize, u64), usize>> = vec![HashMap::new(); depth];
        let mut leaf = Vec::with_capacity(paths.len());
        for p in paths {
            let mut up = 0usize;
            for (h, &label) in p.as_ref().iter().enumerate() {
                let next = ids[h].len();
                let id = *ids[h].entry((up, label)).or_insert_with(|| {
                    parent[h].push(up);
                    next
                });
                up = id;
            }
            leaf.push(up);
        }
        Ok(NestedDesign { parent, leaf })
    }

    pub fn depth(&self) -> usize {
        self.parent.len()
    }

    pub fn n_obs(&self) -> usize {
        self.leaf.len()
    }

    pub fn n_units(&self, level: usize) -> usize {
        self.parent[level].len()
    }

    /// Unit of observation `i` at every level.
    fn unit_paths(&self) -> Vec<Vec<usize>> {
        let l = self.depth();
        let mut out = vec![vec![0; self.n_obs()]; l];
        for (i, &leaf) in self.leaf.iter().enumerate() {
            let mut u = leaf;
            for h in (0..l).rev() {
                out[h][i] = u;
                u = self.parent[h][u];
            }
        }
        out
    }

    /// Same design with the listed levels removed (their units collapse into
    /// the parent level).
    fn without(&self, drop: &[bool]) -> NestedDesign {
        let paths = self.unit_paths();
        let kept: Vec<Vec<u64>> = (0..self.n_obs())
            .map(|i| {
                (0..self.depth())
                    .filter(|&h| !drop[h])
                    .map(|h| paths[h][i] as u64)
                    .collect()
            })
            .collect();
        NestedDesign::from_paths(&kept).expect("paths share a depth")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedFit {
    /// One variance per level, outermost first.
    pub sigma2: Vec<f64>,
    pub residual: f64,
    pub mu: f64,
    pub n_units: Vec<usize>,
    pub confounded: Vec<Option<Confounding>>,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// All observations identical; every component is zero.
    pub degenerate: bool,
}

/// Henderson's nested ANOVA estimator. Returns per-level variances and the
/// residual variance, untruncated.
pub fn method_of_moments(design: &NestedDesign, y: &[f64]) -> Result<(Vec<f64>, f64)> {
    let l = design.depth();
    let n = y.len();
    let paths = design.unit_paths();
    let mut count: Vec<Vec<f64>> = (0..l).map(|h| vec![0.0; design.n_units(h)]).collect();
    let mut sum: Vec<Vec<f64>> = count.clone();
    for i in 0..n {
        for h in 0..l {
            count[h][paths[h][i]] += 1.0;
            sum[h][paths[h][i]] += y[i];
        }
    }
    let total: f64 = y.iter().sum();
    let grand = total / n as f64;
    let mean = |h: usize, u: usize| sum[h][u] / count[h][u];
    let parent_mean = |h: usize, u: usize| {
        if h == 0 {
            grand
        } else {
            mean(h - 1, design.parent[h][u])
        }
    };
    let leaf_level = l - 1;
    let ss_e: f64 = (0..n)
        .map(|i| (y[i] - mean(leaf_level, paths[leaf_level][i])).powi(2))
        .sum();
    let df_e = n as f64 - design.n_units(leaf_level) as f64;
    if df_e <= 0.0 {
        return Err(Error::Undefined("no within-unit replication at the bottom level".into()));
    }
    let sigma_e = ss_e / df_e;

    // inside[h][u]: sum of squared level-k unit sizes within unit u of level h ≤ k.
    let mut t = vec![vec![0.0; l]; l + 1];
    for k in 0..l {
        let mut inside: Vec<Vec<f64>> = (0..=k).map(|h| vec![0.0; design.n_units(h)]).collect();
        for w in 0..design.n_units(k) {
            let nw2 = count[k][w] * count[k][w];
            let mut u = w;
            for h in (0..=k).rev() {
                inside[h][u] += nw2;
                if h > 0 {
                    u = design.parent[h][u];
                }
            }
        }
        let root_t: f64 = inside[0].iter().sum::<f64>() / n as f64;
        // t[h + 1][k] = Σ_u t(u, k) over units of level h; t[0][k] is the root.
        t[0][k] = root_t;
        for h in 0..l {
            t[h + 1][k] = if k <= h {
                n as f64
            } else {
                (0..design.n_units(h))
                    .map(|u| inside[h][u] / count[h][u])
                    .sum()
            };
        }
    }
    let mut sigma = vec![0.0; l];
    for h in (0..l).rev() {
        let ss_h: f64 = (0..design.n_units(h))
            .map(|u| count[h][u] * (mean(h, u) - parent_mean(h, u)).powi(2))
            .sum();
        let units_above = if h == 0 { 1 } else { design.n_units(h - 1) } as f64;
        let df_h = design.n_units(h) as f64 - units_above;
        let mut rhs = ss_h - df_h * sigma_e;
        for k in h + 1..l {
            rhs -= (t[h + 1][k] - t[h][k]) * sigma[k];
        }
        let q = t[h + 1][h] - t[h][h];
        sigma[h] = if q > 0.0 { rhs / q } else { 0.0 };
    }
    Ok((sigma, sigma_e))
}

struct Tree<'a> {
    design: &'a NestedDesign,
    /// Per bottom unit: n, Σy, Σy².
    n: Vec<f64>,
    sy: Vec<f64>,
    syy: Vec<f64>,
}

struct EStep {
    ll: f64,
    mu: f64,
    /// Σ_u E[a_u²] per level.
    sum_a2: Vec<f64>,
    sum_resid2: f64,
}

impl Tree<'_> {
    fn e_step(&self, s: &[f64], se: f64, method: Method) -> EStep {
        let d = self.design;
        let l = d.depth();
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        // Quadratic log-likelihood coefficients of each unit's subtree:
        // logc − ½ P b² + H b in the unit's cumulative effect b.
        let mut p: Vec<Vec<f64>> = (0..l).map(|h| vec![0.0; d.n_units(h)]).collect();
        let mut hh = p.clone();
        let mut c = p.clone();
        for u in 0..d.n_units(l - 1) {
            p[l - 1][u] = self.n[u] / se;
            hh[l - 1][u] = self.sy[u] / se;
            c[l - 1][u] = -0.5 * self.n[u] * (ln2pi + se.ln()) - self.syy[u] / (2.0 * se);
        }
        let (mut p0, mut h0, mut c0) = (0.0, 0.0, 0.0);
        for h in (0..l).rev() {
            for u in 0..d.n_units(h) {
                let dd = 1.0 + s[h] * p[h][u];
                let mp = p[h][u] / dd;
                let mh = hh[h][u] / dd;
                let mc = c[h][u] - 0.5 * dd.ln() + s[h] * hh[h][u] * hh[h][u] / (2.0 * dd);
                if h == 0 {
                    p0 += mp;
                    h0 += mh;
                    c0 += mc;
                } else {
                    let par = d.parent[h][u];
                    p[h - 1][par] += mp;
                    hh[h - 1][par] += mh;
                    c[h - 1][par] += mc;
                }
            }
        }
        let mu = h0 / p0;
        let (ll, v0) = match method {
            Method::Ml => (c0 + h0 * h0 / (2.0 * p0), 0.0),
            Method::Reml => (
                c0 + h0 * h0 / (2.0 * p0) + 0.5 * (ln2pi - p0.ln()),
                1.0 / p0,
            ),
        };

        let mut mean_up = vec![mu];
        let mut var_up = vec![v0];
        let mut sum_a2 = vec![0.0; l];
        for h in 0..l {
            let nu = d.n_units(h);
            let mut mean = vec![0.0; nu];
            let mut var = vec![0.0; nu];
            for u in 0..nu {
                let par = if h == 0 { 0 } else { d.parent[h][u] };
                let dd = 1.0 + s[h] * p[h][u];
                let a = 1.0 / dd;
                let b = s[h] * hh[h][u] / dd;
                let vc = s[h] / dd;
                let (mp, vp) = (mean_up[par], var_up[par]);
                mean[u] = a * mp + b;
                var[u] = a * a * vp + vc;
                let diff = mean[u] - mp;
                sum_a2[h] += diff * diff + var[u] + vp - 2.0 * a * vp;
            }
            mean_up = mean;
            var_up = var;
        }
        let sum_resid2 = (0..d.n_units(l - 1))
            .map(|u| {
                let e = mean_up[u];
                self.syy[u] - 2.0 * e * self.sy[u] + self.n[u] * (e * e + var_up[u])
            })
            .sum();
        EStep {
            ll,
            mu,
            sum_a2,
            sum_resid2,
        }
    }
}

struct EmOutcome {
    sigma2: Vec<f64>,
    residual: f64,
    mu: f64,
    ll: f64,
    iterations: usize,
    converged: bool,
}

/// EM accelerated with SQUAREM: two plain EM maps define a step direction,
/// the extrapolated point is mapped once more and kept only if it does not
/// lower the likelihood. Parameters are `[σ²_1, …, σ²_L, σ²_e]`.
fn em(design: &NestedDesign, y: &[f64], init: Vec<f64>, cfg: &EmConfig, floor: f64) -> EmOutcome {
    let l = design.depth();
    let nb = design.n_units(l - 1);
    let mut tree = Tree {
        design,
        n: vec![0.0; nb],
        sy: vec![0.0; nb],
        syy: vec![0.0; nb],
    };
    for (i, &u) in design.leaf.iter().enumerate() {
        tree.n[u] += 1.0;
        tree.sy[u] += y[i];
        tree.syy[u] += y[i] * y[i];
    }
    // One EM update; also returns the log-likelihood and μ̂ at the input.
    let map = |theta: &[f64]| -> (Vec<f64>, f64, f64) {
        let e = tree.e_step(&theta[..l], theta[l], cfg.method);
        let mut next: Vec<f64> = (0..l)
            .map(|h| (e.sum_a2[h] / design.n_units(h) as f64).max(floor))
            .collect();
        next.push((e.sum_resid2 / design.n_obs() as f64).max(floor));
        (next, e.ll, e.mu)
    };
    let mut theta = init;
    let mut prev = f64::NEG_INFINITY;
    for it in 1..=cfg.max_iter {
        let (t1, ll, mu) = map(&theta);
        if !ll.is_finite() {
            break;
        }
        if prev.is_finite() && (ll - prev).abs() <= cfg.tol * ll.abs().max(1.0) {
            return EmOutcome {
                residual: theta[l],
                sigma2: theta[..l].to_vec(),
                mu,
                ll,
                iterations: it,
                converged: true,
            };
        }
        prev = ll;
        let (t2, _, _) = map(&t1);
        let r: Vec<f64> = t1.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = (0..=l).map(|k| t2[k] - t1[k] - r[k]).collect();
        let norm = |x: &[f64]| x.iter().map(|z| z * z).sum::<f64>().sqrt();
        let (nr, nv) = (norm(&r), norm(&v));
        if nv == 0.0 || nr == 0.0 {
            theta = t2;
            continue;
        }
        let alpha = (-nr / nv).min(-1.0);
        let jump: Vec<f64> = (0..=l)
            .map(|k| (theta[k] - 2.0 * alpha * r[k] + alpha * alpha * v[k]).max(floor))
            .collect();
        let (t3, ll_jump, _) = map(&jump);
        theta = if ll_jump.is_finite() && ll_jump >= ll { t3 } else { t2 };
    }
    let (_, ll, mu) = map(&theta);
    EmOutcome {
        residual: theta[l],
        sigma2: theta[..l].to_vec(),
        mu,
        ll,
        iterations: cfg.max_iter,
        converged: false,
    }
}

/// Fits variance components for observations `y` on `design`.
///
/// Levels that cannot be separated from a neighbour are removed before
/// fitting and reported as described by [`Confounding`].
pub fn fit_nested(design: &NestedDesign, y: &[f64], cfg: &EmConfig) -> Result<NestedFit> {
    let l = design.depth();
    let n = y.len();
    if n != design.n_obs() {
        return Err(Error::Dimension {
            expected: design.n_obs(),
            got: n,
        });
    }
    if n < 2 {
        return Err(Error::invalid("need at least two observations"));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let n_units: Vec<usize> = (0..l).map(|h| design.n_units(h)).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let total_var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let mut confounded = vec![None; l];
    for h in 0..l {
        let above = if h == 0 { 1 } else { n_units[h - 1] };
        if n_units[h] == above {
            confounded[h] = Some(if h == 0 {
                Confounding::Intercept
            } else {
                Confounding::Parent
            });
        }
    }
    // A bottom run of levels with one observation per unit merges into e.
    for h in (0..l).rev() {
        if confounded[h].is_none() && n_units[h] == n {
            confounded[h] = Some(Confounding::Residual);
        } else if confounded[h].is_none() {
            break;
        }
    }
    let spread = y.iter().map(|v| (v - y[0]).abs()).fold(0.0, f64::max);
    if spread == 0.0 {
        return Ok(NestedFit {
            sigma2: vec![0.0; l],
            residual: 0.0,
            mu: y[0],
            n_units,
            confounded,
            log_likelihood: f64::NAN,
            iterations: 0,
            converged: true,
            degenerate: true,
        });
    }

    let drop: Vec<bool> = confounded.iter().map(Option::is_some).collect();
    let active: Vec<usize> = (0..l).filter(|&h| !drop[h]).collect();
    let floor = 1e-12 * total_var;

    let fit = if active.is_empty() {
        EmOutcome {
            sigma2: Vec::new(),
            residual: total_var,
            mu: mean,
            ll: f64::NAN,
            iterations: 0,
            converged: true,
        }
    } else {
        let reduced = design.without(&drop);
        let (mom, mom_e) = method_of_moments(&reduced, y)?;
        // EM cannot leave a zero component, so start slightly inside.
        let start_floor = 1e-3 * total_var;
        let mut init: Vec<f64> = mom.iter().map(|&v| v.max(start_floor)).collect();
        init.push(mom_e.max(start_floor));
        em(&reduced, y, init, cfg, floor)
    };

    let mut sigma2 = vec![0.0; l];
    for (k, &h) in active.iter().enumerate() {
        sigma2[h] = fit.sigma2[k];
    }
    // Dropped levels need no routing: a level confounded with its parent is
    // absorbed by the parent's units, a replication-free bottom level by e.
    if !fit.converged {
        log::warn!("variance-component EM stopped after {} iterations", fit.iterations);
    }
    Ok(NestedFit {
        sigma2,
        residual: fit.residual,
        mu: fit.mu,
        n_units,
        confounded,
        log_likelihood: fit.ll,
        iterations: fit.iterations,
        converged: fit.converged,
        degenerate: false,
    })
}
