//! Gaussian mixtures fitted by EM, BIC model selection, and the
//! dimension reducers applied before clustering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{argument, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureOptions {
    pub max_iter: usize,
    pub tol: f64,
    /// Added to every covariance diagonal.
    pub reg_covar: f64,
    /// Restarts per component count; the best likelihood wins.
    pub n_init: usize,
    pub seed: u64,
}

impl Default for MixtureOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            reg_covar: 1e-6,
            n_init: 3,
            seed: 0,
        }
    }
}

/// Ridge added when a full-covariance fit turns out singular.
pub const SINGULAR_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T = f64> {
    pub kind: CovarianceKind,
    pub weights: Vec<T>,
    pub means: Vec<Vec<T>>,
    /// Dense `d × d` matrices; off-diagonals are zero for `Diagonal`.
    pub covariances: Vec<Vec<Vec<T>>>,
    /// Total log-likelihood of the training data.
    pub log_likelihood: T,
    pub iterations: usize,
    pub converged: bool,
}

/// Free parameters of a `k`-component mixture in `d` dimensions.
pub fn parameter_count(k: usize, d: usize, kind: CovarianceKind) -> usize {
    let cov = match kind {
        CovarianceKind::Full => d * (d + 1) / 2,
        CovarianceKind::Diagonal => d,
    };
    k * d + k * cov + k.saturating_sub(1)
}

/// `ln(N)·p − 2·ln L̂`.
pub fn bic<T: Real>(n_samples: usize, n_params: usize, log_likelihood: T) -> T {
    T::from_count(n_samples).ln() * T::from_count(n_params) - T::lit(2.0) * log_likelihood
}

fn cholesky<T: Real>(a: &[Vec<T>]) -> Option<Vec<Vec<T>>> {
    let d = a.len();
    let mut l = vec![vec![T::zero(); d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s = s - l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

struct Factor<T> {
    chol: Vec<Vec<T>>,
    log_det: T,
}

fn factor<T: Real>(cov: &[Vec<T>]) -> Option<Factor<T>> {
    let chol = cholesky(cov)?;
    let log_det = chol
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, row)| acc + row[i].ln())
        * T::lit(2.0);
    Some(Factor { chol, log_det })
}

fn log_gaussian<T: Real>(x: &[T], mean: &[T], f: &Factor<T>) -> T {
    let d = x.len();
    // forward substitution L z = x − μ
    let mut z = vec![T::zero(); d];
    for i in 0..d {
        let mut s = x[i] - mean[i];
        for k in 0..i {
            s = s - f.chol[i][k] * z[k];
        }
        z[i] = s / f.chol[i][i];
    }
    let maha = z.iter().fold(T::zero(), |a, &v| a + v * v);
    let two_pi = T::lit(2.0 * std::f64::consts::PI);
    T::lit(-0.5) * (T::from_count(d) * two_pi.ln() + f.log_det + maha)
}

fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().fold(T::zero(), |a, &x| a + (x - m).exp()).ln()
}

#[derive(Debug)]
struct Singular;

impl<T: Real> GaussianMixture<T> {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dimension(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn n_params(&self) -> usize {
        parameter_count(self.n_components(), self.dimension(), self.kind)
    }

    pub fn bic(&self, n_samples: usize) -> T {
        bic(n_samples, self.n_params(), self.log_likelihood)
    }

    /// True when some component owns fewer points than its covariance
    /// needs (`d + 1` for full, 2 for diagonal), so its likelihood is
    /// propped up by the ridge alone.
    pub fn is_degenerate(&self, n_samples: usize) -> bool {
        let need = match self.kind {
            CovarianceKind::Full => self.dimension() + 1,
            CovarianceKind::Diagonal => 2,
        };
        let n = T::from_count(n_samples);
        self.n_components() > 1 && self.weights.iter().any(|&w| w * n < T::from_count(need))
    }

    fn factors(&self) -> std::result::Result<Vec<Factor<T>>, Singular> {
        self.covariances
            .iter()
            .map(|c| factor(c).ok_or(Singular))
            .collect()
    }

    /// Posterior component probabilities for each point (rows sum to 1).
    pub fn responsibilities(&self, data: &[Vec<T>]) -> Vec<Vec<T>> {
        let factors = match self.factors() {
            Ok(f) => f,
            Err(_) => return vec![vec![T::one() / T::from_count(self.n_components()); self.n_components()]; data.len()],
        };
        e_step(data, &self.weights, &self.means, &factors).0
    }
}

fn e_step<T: Real>(
    data: &[Vec<T>],
    weights: &[T],
    means: &[Vec<T>],
    factors: &[Factor<T>],
) -> (Vec<Vec<T>>, T) {
    let mut total = T::zero();
    let resp = data
        .iter()
        .map(|x| {
            let logs: Vec<T> = (0..weights.len())
                .map(|k| weights[k].ln() + log_gaussian(x, &means[k], &factors[k]))
                .collect();
            let norm = log_sum_exp(&logs);
            total = total + norm;
            logs.into_iter().map(|l| (l - norm).exp()).collect()
        })
        .collect();
    (resp, total)
}

type Params<T> = (Vec<T>, Vec<Vec<T>>, Vec<Vec<Vec<T>>>);

fn m_step<T: Real>(data: &[Vec<T>], resp: &[Vec<T>], kind: CovarianceKind, reg: T) -> Params<T> {
    let n = data.len();
    let d = data[0].len();
    let k = resp[0].len();
    let tiny = T::lit(10.0) * T::epsilon();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let nk = resp.iter().fold(T::zero(), |a, r| a + r[j]) + tiny;
        weights.push(nk / T::from_count(n));
        let mut mu = vec![T::zero(); d];
        for (x, r) in data.iter().zip(resp) {
            for (m, &xi) in mu.iter_mut().zip(x) {
                *m = *m + r[j] * xi;
            }
        }
        mu.iter_mut().for_each(|m| *m = *m / nk);
        let mut cov = vec![vec![T::zero(); d]; d];
        for (x, r) in data.iter().zip(resp) {
            for a in 0..d {
                let da = x[a] - mu[a];
                match kind {
                    CovarianceKind::Full => {
                        for b in 0..=a {
                            cov[a][b] = cov[a][b] + r[j] * da * (x[b] - mu[b]);
                        }
                    }
                    CovarianceKind::Diagonal => cov[a][a] = cov[a][a] + r[j] * da * da,
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                cov[a][b] = cov[a][b] / nk;
                cov[b][a] = cov[a][b];
            }
            cov[a][a] = cov[a][a] + reg;
        }
        means.push(mu);
        covs.push(cov);
    }
    let wsum = weights.iter().fold(T::zero(), |a, &w| a + w);
    weights.iter_mut().for_each(|w| *w = *w / wsum);
    (weights, means, covs)
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

/// k-means++ seeding followed by a few Lloyd rounds; returns hard labels.
fn kmeans_labels<T: Real>(data: &[Vec<T>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.len();
    let mut centers: Vec<Vec<T>> = vec![data[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = data
            .iter()
            .map(|x| {
                centers
                    .iter()
                    .map(|c| sq_dist(x, c).as_f64())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter()
                .position(|&w| {
                    u -= w;
                    u <= 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[pick].clone());
    }
    let mut labels = vec![0; n];
    for _ in 0..20 {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    sq_dist(x, &centers[a])
                        .partial_cmp(&sq_dist(x, &centers[b]))
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0);
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        for (j, c) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<T>> = data
                .iter()
                .zip(&labels)
                .filter(|(_, &l)| l == j)
                .map(|(x, _)| x)
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = T::from_count(members.len());
            for (a, v) in c.iter_mut().enumerate() {
                *v = members.iter().fold(T::zero(), |acc, x| acc + x[a]) / m;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn fit_once<T: Real>(
    data: &[Vec<T>],
    k: usize,
    kind: CovarianceKind,
    reg: T,
    opts: &MixtureOptions,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<GaussianMixture<T>, Singular> {
    let labels = kmeans_labels(data, k, rng);
    let resp: Vec<Vec<T>> = labels
        .iter()
        .map(|&l| (0..k).map(|j| if j == l { T::one() } else { T::zero() }).collect())
        .collect();
    let (mut weights, mut means, mut covs) = m_step(data, &resp, kind, reg);
    let tol = T::lit(opts.tol);
    let mut prev = T::neg_infinity();
    let mut ll = T::neg_infinity();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iter.max(1) {
        iterations = it + 1;
        let factors: Vec<Factor<T>> = covs
            .iter()
            .map(|c| factor(c).ok_or(Singular))
            .collect::<std::result::Result<_, _>>()?;
        let (resp, total) = e_step(data, &weights, &means, &factors);
        if !total.is_finite() {
            return Err(Singular);
        }
        ll = total;
        if (ll - prev).abs() <= tol * T::from_count(data.len()) {
            converged = true;
            break;
        }
        prev = ll;
        (weights, means, covs) = m_step(data, &resp, kind, reg);
    }
    Ok(GaussianMixture {
        kind,
        weights,
        means,
        covariances: covs,
        log_likelihood: ll,
        iterations,
        converged,
    })
}

fn check_data<T: Real>(data: &[Vec<T>], k: usize) -> Result<()> {
    if data.is_empty() {
        return Err(argument("no data points"));
    }
    if k == 0 || k > data.len() {
        return Err(argument(format!(
            "cannot fit {k} components to {} points",
            data.len()
        )));
    }
    let d = data[0].len();
    if d == 0 || data.iter().any(|x| x.len() != d) {
        return Err(argument("points must share a non-zero dimension"));
    }
    Ok(())
}

/// Fitted mixture plus whether the diagonal fallback was needed.
#[derive(Debug, Clone)]
pub struct MixtureFit<T = f64> {
    pub model: GaussianMixture<T>,
    pub diagonal_fallback: bool,
}

/// EM fit with `n_init` seeded restarts; a singular full-covariance fit is
/// redone with diagonal covariances plus [`SINGULAR_RIDGE`].
pub fn fit_mixture<T: Real>(
    data: &[Vec<T>],
    k: usize,
    kind: CovarianceKind,
    opts: &MixtureOptions,
) -> Result<MixtureFit<T>> {
    check_data(data, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let reg = T::lit(opts.reg_covar);
    let best = |kind: CovarianceKind, reg: T, rng: &mut ChaCha8Rng| {
        let mut best: Option<GaussianMixture<T>> = None;
        for _ in 0..opts.n_init.max(1) {
            let m = fit_once(data, k, kind, reg, opts, rng)?;
            let better = |b: &GaussianMixture<T>| {
                let (md, bd) = (m.is_degenerate(data.len()), b.is_degenerate(data.len()));
                (!md && bd) || (md == bd && m.log_likelihood > b.log_likelihood)
            };
            if best.as_ref().is_none_or(better) {
                best = Some(m);
            }
        }
        Ok::<_, Singular>(best.expect("at least one restart"))
    };
    match best(kind, reg, &mut rng) {
        Ok(model) => Ok(MixtureFit {
            model,
            diagonal_fallback: false,
        }),
        Err(Singular) => {
            let ridge = reg + T::lit(SINGULAR_RIDGE);
            let model = best(CovarianceKind::Diagonal, ridge, &mut rng)
                .map_err(|_| argument("mixture covariance singular even with diagonal ridge"))?;
            Ok(MixtureFit {
                model,
                diagonal_fallback: true,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct BicSelection<T = f64> {
    pub best: MixtureFit<T>,
    /// `(k, BIC)` for every candidate that was fitted.
    pub scores: Vec<(usize, T)>,
}

impl<T> BicSelection<T> {
    pub fn k(&self) -> usize {
        self.best.model.weights.len()
    }
}

/// Fits `k = 1..=k_max` (capped at the point count) and keeps the minimum
/// BIC. Fits with a degenerate component are scored but never selected.
pub fn select_by_bic<T: Real>(
    data: &[Vec<T>],
    k_max: usize,
    kind: CovarianceKind,
    opts: &MixtureOptions,
) -> Result<BicSelection<T>> {
    check_data(data, 1)?;
    let k_max = k_max.clamp(1, data.len());
    let mut best: Option<(T, MixtureFit<T>)> = None;
    let mut scores = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let fit = fit_mixture(data, k, kind, opts)?;
        let score = fit.model.bic(data.len());
        scores.push((k, score));
        if fit.model.is_degenerate(data.len()) {
            continue;
        }
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, fit));
        }
    }
    let (_, best) = best.expect("a single component is never degenerate");
    Ok(BicSelection { best, scores })
}

/// Maps points into a lower-dimensional space before clustering.
pub trait Reducer<T>: Send + Sync {
    fn reduce(&self, data: &[Vec<T>]) -> Vec<Vec<T>>;
    fn name(&self) -> String;
}

/// Leaves points unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReducer;

impl<T: Real> Reducer<T> for IdentityReducer {
    fn reduce(&self, data: &[Vec<T>]) -> Vec<Vec<T>> {
        data.to_vec()
    }

    fn name(&self) -> String {
        "none".into()
    }
}

/// Principal-components projection computed by power iteration with deflation.
#[derive(Debug, Clone, Copy)]
pub struct Pca {
    pub max_components: usize,
    pub seed: u64,
}

impl Default for Pca {
    fn default() -> Self {
        Self {
            max_components: 10,
            seed: 0,
        }
    }
}

impl Pca {
    /// Unit principal axes, strongest first.
    pub fn components<T: Real>(&self, centered: &[Vec<T>]) -> Vec<Vec<T>> {
        let n = centered.len();
        let d = centered.first().map_or(0, Vec::len);
        let m = self.max_components.min(d).min(n.saturating_sub(1)).max(usize::from(n == 1 && d > 0));
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let total_var = centered
            .iter()
            .flat_map(|x| x.iter())
            .fold(T::zero(), |a, &v| a + v * v);
        let mut axes: Vec<Vec<T>> = Vec::new();
        for _ in 0..m {
            let mut v: Vec<T> = (0..d).map(|_| T::lit(rng.random::<f64>() - 0.5)).collect();
            orthonormalize(&mut v, &axes);
            let mut lambda = T::zero();
            for _ in 0..1000 {
                // w = Xᵀ X v
                let proj: Vec<T> = centered.iter().map(|x| dot(x, &v)).collect();
                let mut w = vec![T::zero(); d];
                for (x, &p) in centered.iter().zip(&proj) {
                    for (wi, &xi) in w.iter_mut().zip(x) {
                        *wi = *wi + p * xi;
                    }
                }
                lambda = proj.iter().fold(T::zero(), |a, &p| a + p * p);
                if !orthonormalize(&mut w, &axes) {
                    break;
                }
                let delta = w.iter().zip(&v).fold(T::zero(), |a, (&x, &y)| a + (x - y) * (x - y));
                v = w;
                if delta < T::lit(1e-20) {
                    break;
                }
            }
            if !(lambda > total_var * T::lit(1e-12)) {
                break;
            }
            axes.push(v);
        }
        axes
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Gram–Schmidt against `basis` then normalize; false if nothing is left.
fn orthonormalize<T: Real>(v: &mut [T], basis: &[Vec<T>]) -> bool {
    for b in basis {
        let p = dot(v, b);
        v.iter_mut().zip(b).for_each(|(x, &bi)| *x = *x - p * bi);
    }
    let norm = dot(v, v).sqrt();
    if !(norm > T::min_positive_value()) {
        return false;
    }
    v.iter_mut().for_each(|x| *x = *x / norm);
    true
}

impl<T: Real> Reducer<T> for Pca {
    fn reduce(&self, data: &[Vec<T>]) -> Vec<Vec<T>> {
        if data.is_empty() {
            return Vec::new();
        }
        let d = data[0].len();
        let n = T::from_count(data.len());
        let mean: Vec<T> = (0..d)
            .map(|a| data.iter().fold(T::zero(), |s, x| s + x[a]) / n)
            .collect();
        let centered: Vec<Vec<T>> = data
            .iter()
            .map(|x| x.iter().zip(&mean).map(|(&v, &m)| v - m).collect())
            .collect();
        let axes = self.components(&centered);
        if axes.is_empty() {
            return vec![vec![T::zero()]; data.len()];
        }
        centered
            .iter()
            .map(|x| axes.iter().map(|a| dot(x, a)).collect())
            .collect()
    }

    fn name(&self) -> String {
        format!("pca({})", self.max_components)
    }
}
