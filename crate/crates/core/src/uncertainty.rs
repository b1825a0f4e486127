//! Epistemic uncertainty of an ensemble via pairwise-distance estimators.
//!
//! Component outputs are compared pairwise with a generalized distance
//! `D(p_m || p_n)` and combined as
//!
//! ```text
//! I = -sum_m pi_m ln sum_n pi_n exp(-D_mn)
//! ```
//!
//! which is bounded by `0 <= I <= -sum pi ln pi <= ln N`. The default distance
//! is the debiased Sinkhorn divergence between component point clouds, which
//! stays informative when components barely overlap. Closed-form KL and
//! Bhattacharyya distances between diagonal Gaussians are kept as
//! alternative backends, and [`mc_epistemic_oracle`] is a sampling estimate of
//! the same mutual information used only for validation.
//!
//! Value-only functions live at the top level; [`tape`] holds the
//! differentiable versions used in training.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Reduce, Tensor};
use crate::cvae_ensemble::DiagonalGaussian;
use crate::error::{Error, Result};
use crate::seed;

/// Entropic regularization used in training.
pub const DEFAULT_EPSILON: f64 = 0.15;
/// Alternating Sinkhorn updates per transport solve.
pub const DEFAULT_SINKHORN_ITERS: usize = 10;
/// Negative divergences above this are treated as round-off.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-6;

/// Uniformly weighted set of points, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Tensor,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        if points.rows() == 0 {
            return Err(Error::Dimension("a point cloud needs at least one point".into()));
        }
        if !points.is_finite() {
            return Err(Error::Numerical("point cloud contains non-finite coordinates".into()));
        }
        Ok(PointCloud { points })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        PointCloud::new(Tensor::from_rows(rows))
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    fn log_weights(&self) -> Vec<f64> {
        vec![-(self.len() as f64).ln(); self.len()]
    }

    /// Moment-matched diagonal Gaussian (population variance, floored).
    pub fn fit_gaussian(&self) -> Result<DiagonalGaussian> {
        let (m, d) = self.points.shape();
        let mut mean = vec![0.0; d];
        for r in 0..m {
            for (k, x) in self.points.row_slice(r).iter().enumerate() {
                mean[k] += x / m as f64;
            }
        }
        let mut var = vec![0.0; d];
        for r in 0..m {
            for (k, x) in self.points.row_slice(r).iter().enumerate() {
                var[k] += (x - mean[k]).powi(2) / m as f64;
            }
        }
        DiagonalGaussian::new(mean, var.iter().map(|v| (v + VARIANCE_FLOOR).sqrt()).collect())
    }
}

/// Added to fitted variances so single-point clouds stay valid.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Square matrix of generalized distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl PairwiseDistanceMatrix {
    /// Validates the diagonal and sign; entries in `(-tolerance, 0)` are clamped to 0.
    pub fn new(n: usize, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Dimension(format!("{} entries for a {n}x{n} matrix", values.len())));
        }
        for (idx, v) in values.iter_mut().enumerate() {
            if !v.is_finite() || *v < -DIVERGENCE_TOLERANCE {
                return Err(Error::Numerical(format!("distance entry {idx} = {v}")));
            }
            *v = v.max(0.0);
            if idx / n == idx % n && *v != 0.0 {
                return Err(Error::Numerical(format!("nonzero diagonal entry {v}")));
            }
        }
        Ok(PairwiseDistanceMatrix { n, values })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let mut values = vec![0.0; n * n];
        for m in 0..n {
            for k in 0..n {
                if m != k {
                    values[m * n + k] = f(m, k)?;
                }
            }
        }
        PairwiseDistanceMatrix::new(n, values)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.values[m * self.n + k]
    }
}

/// Differential entropy `0.5 * sum_i ln(2 pi e s_i^2)`.
pub fn gaussian_entropy(g: &DiagonalGaussian) -> f64 {
    g.std().iter().map(|s| 0.5 * (2.0 * PI * std::f64::consts::E * s * s).ln()).sum()
}

/// `KL(a || b)` for diagonal Gaussians.
pub fn kl_diag_gauss(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<f64> {
    a.check_same_dim(b)?;
    let mut kl = 0.0;
    for i in 0..a.dim() {
        let (va, vb) = (a.std()[i].powi(2), b.std()[i].powi(2));
        let dm = a.mean()[i] - b.mean()[i];
        kl += 0.5 * (va / vb + dm * dm / vb - 1.0 + (vb / va).ln());
    }
    Ok(kl.max(0.0))
}

/// Bhattacharyya distance for diagonal Gaussians.
pub fn bhattacharyya_diag_gauss(a: &DiagonalGaussian, b: &DiagonalGaussian) -> Result<f64> {
    a.check_same_dim(b)?;
    let mut d = 0.0;
    for i in 0..a.dim() {
        let (va, vb) = (a.std()[i].powi(2), b.std()[i].powi(2));
        let avg = 0.5 * (va + vb);
        let dm = a.mean()[i] - b.mean()[i];
        d += dm * dm / (8.0 * avg) + 0.5 * (avg.ln() - 0.5 * (va.ln() + vb.ln()));
    }
    Ok(d.max(0.0))
}

fn check_ot_inputs(x: &PointCloud, y: &PointCloud, eps: f64, iters: usize) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::Dimension(format!("clouds of dimension {} and {}", x.dim(), y.dim())));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
    }
    if iters == 0 {
        return Err(Error::Config("at least one Sinkhorn iteration is required".into()));
    }
    Ok(())
}

/// Entropic OT cost `<P, C>` with squared-Euclidean ground cost after exactly
/// `iters` alternating log-domain updates from zero potentials.
pub fn entropic_ot_cost(x: &PointCloud, y: &PointCloud, eps: f64, iters: usize) -> Result<f64> {
    check_ot_inputs(x, y, eps, iters)?;
    let cost = autograd::sq_dist(&x.points, &y.points);
    if !cost.is_finite() {
        return Err(Error::Numerical("non-finite transport cost".into()));
    }
    let (la, lb) = (x.log_weights(), y.log_weights());
    let mut g = vec![0.0; y.len()];
    let mut f = vec![0.0; x.len()];
    for _ in 0..iters {
        f = autograd::soft_min(&cost, &g, &lb, eps, Reduce::OverColumns);
        g = autograd::soft_min(&cost, &f, &la, eps, Reduce::OverRows);
    }
    let value = autograd::plan_cost(&cost, &f, &g, &la, &lb, eps);
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite entropic OT cost".into()));
    }
    Ok(value)
}

/// Cross term averaged over both argument orders, so the truncated solver is
/// exactly symmetric.
fn symmetric_cross_cost(x: &PointCloud, y: &PointCloud, eps: f64, iters: usize) -> Result<f64> {
    Ok(0.5 * (entropic_ot_cost(x, y, eps, iters)? + entropic_ot_cost(y, x, eps, iters)?))
}

fn clamp_divergence(v: f64) -> f64 {
    v.max(0.0)
}

/// Debiased Sinkhorn divergence `W(X,Y) - (W(X,X) + W(Y,Y)) / 2`, clamped at 0.
pub fn sinkhorn_divergence(x: &PointCloud, y: &PointCloud, eps: f64, iters: usize) -> Result<f64> {
    check_ot_inputs(x, y, eps, iters)?;
    let xy = symmetric_cross_cost(x, y, eps, iters)?;
    let xx = entropic_ot_cost(x, x, eps, iters)?;
    let yy = entropic_ot_cost(y, y, eps, iters)?;
    Ok(clamp_divergence(xy - 0.5 * (xx + yy)))
}

/// Probability vector check shared by the estimators.
fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Dimension(format!("{} weights for {n} components", weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| w.is_nan() || *w <= 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Numerical(format!("weights {weights:?} are not on the simplex")));
    }
    Ok(())
}

/// `-sum_m pi_m ln sum_n pi_n exp(-D_mn)`.
pub fn paide_epistemic(d: &PairwiseDistanceMatrix, weights: &[f64]) -> Result<f64> {
    check_weights(weights, d.len())?;
    let n = d.len();
    let mut total = 0.0;
    for m in 0..n {
        let inner: f64 = (0..n).map(|k| weights[k] * (-d.get(m, k)).exp()).sum();
        total -= weights[m] * inner.ln();
    }
    Ok(total.max(0.0))
}

/// `-sum pi ln pi`, the upper bound of [`paide_epistemic`].
pub fn weight_entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

/// Generalized distance used to compare component outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DistanceBackend {
    Sinkhorn { epsilon: f64, iters: usize },
    /// KL between moment-matched diagonal Gaussians.
    Kl,
    /// Bhattacharyya between moment-matched diagonal Gaussians.
    Bhattacharyya,
}

impl Default for DistanceBackend {
    fn default() -> Self {
        DistanceBackend::Sinkhorn {
            epsilon: DEFAULT_EPSILON,
            iters: DEFAULT_SINKHORN_ITERS,
        }
    }
}

/// Pairwise distance matrix over component clouds.
pub fn cloud_distances(outputs: &[PointCloud], backend: DistanceBackend) -> Result<PairwiseDistanceMatrix> {
    let n = outputs.len();
    if n == 0 {
        return Err(Error::Config("epistemic estimate needs at least one component".into()));
    }
    if outputs.iter().any(|c| c.dim() != outputs[0].dim()) {
        return Err(Error::Dimension("component clouds differ in dimension".into()));
    }
    match backend {
        DistanceBackend::Sinkhorn { epsilon, iters } => {
            // Unordered pairs in canonical order, mirrored.
            let selfs = outputs
                .iter()
                .map(|c| entropic_ot_cost(c, c, epsilon, iters))
                .collect::<Result<Vec<_>>>()?;
            let mut values = vec![0.0; n * n];
            for m in 0..n {
                for k in m + 1..n {
                    let xy = symmetric_cross_cost(&outputs[m], &outputs[k], epsilon, iters)?;
                    let s = clamp_divergence(xy - 0.5 * (selfs[m] + selfs[k]));
                    values[m * n + k] = s;
                    values[k * n + m] = s;
                }
            }
            PairwiseDistanceMatrix::new(n, values)
        }
        DistanceBackend::Kl | DistanceBackend::Bhattacharyya => {
            let fitted = outputs.iter().map(PointCloud::fit_gaussian).collect::<Result<Vec<_>>>()?;
            PairwiseDistanceMatrix::from_fn(n, |m, k| match backend {
                DistanceBackend::Kl => kl_diag_gauss(&fitted[m], &fitted[k]),
                _ => bhattacharyya_diag_gauss(&fitted[m], &fitted[k]),
            })
        }
    }
}

/// PaiDEs estimate over component output clouds.
pub fn epistemic_loss(outputs: &[PointCloud], weights: &[f64], backend: DistanceBackend) -> Result<f64> {
    let d = cloud_distances(outputs, backend)?;
    paide_epistemic(&d, weights)
}

/// PaiDEs estimate with closed-form Gaussian distances.
pub fn paide_gaussian(components: &[DiagonalGaussian], weights: &[f64], distance: fn(&DiagonalGaussian, &DiagonalGaussian) -> Result<f64>) -> Result<f64> {
    let d = PairwiseDistanceMatrix::from_fn(components.len(), |m, k| distance(&components[m], &components[k]))?;
    paide_epistemic(&d, weights)
}

fn log_density(g: &DiagonalGaussian, y: &[f64]) -> f64 {
    g.mean()
        .iter()
        .zip(g.std())
        .zip(y)
        .map(|((m, s), x)| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * PI).ln())
        .sum()
}

/// Monte-Carlo mutual information of a Gaussian mixture ensemble:
/// sampled mixture entropy minus the weighted component entropies.
pub fn mc_epistemic_oracle(components: &[DiagonalGaussian], weights: &[f64], n_samples: usize, seed: u64) -> Result<f64> {
    check_weights(weights, components.len())?;
    if n_samples == 0 {
        return Err(Error::Config("oracle needs at least one sample".into()));
    }
    for c in components {
        c.check_same_dim(&components[0])?;
    }
    let mut rng = seed::rng(seed, "mc-epistemic-oracle");
    let pick = WeightedIndex::new(weights).map_err(|e| Error::Numerical(e.to_string()))?;
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let dim = components[0].dim();
    let mut y = vec![0.0; dim];
    let mut terms = vec![0.0; components.len()];
    let mut neg_log_mix = 0.0;
    for _ in 0..n_samples {
        let c = &components[pick.sample(&mut rng)];
        for (k, slot) in y.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *slot = c.mean()[k] + c.std()[k] * z;
        }
        for (t, (comp, lw)) in terms.iter_mut().zip(components.iter().zip(&log_w)) {
            *t = lw + log_density(comp, &y);
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        neg_log_mix -= lse;
    }
    let mixture_entropy = neg_log_mix / n_samples as f64;
    let aleatoric: f64 = components.iter().zip(weights).map(|(c, w)| w * gaussian_entropy(c)).sum();
    Ok(mixture_entropy - aleatoric)
}

/// Draw `n` points from a diagonal Gaussian.
pub fn sample_cloud(g: &DiagonalGaussian, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            g.mean()
                .iter()
                .zip(g.std())
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    PointCloud::from_rows(&rows)
}

/// Differentiable counterparts of the estimators, built on an
/// [`autograd::Graph`].
pub mod tape {
    use super::*;
    use crate::autograd::{Graph, Var};

    fn uniform_log_weights(n: usize) -> Rc<Vec<f64>> {
        Rc::new(vec![-(n as f64).ln(); n])
    }

    /// Graph version of [`entropic_ot_cost`]; `x`, `y` are `M x d` point rows.
    pub fn entropic_ot_cost(g: &mut Graph, x: Var, y: Var, eps: f64, iters: usize) -> Var {
        assert!(iters >= 1 && eps > 0.0, "invalid Sinkhorn settings");
        let (n, m) = (g.value(x).rows(), g.value(y).rows());
        let (la, lb) = (uniform_log_weights(n), uniform_log_weights(m));
        let cost = g.sq_dist(x, y);
        let mut gp = g.constant(Tensor::zeros(m, 1));
        let mut fp = gp;
        for _ in 0..iters {
            fp = g.soft_min(cost, gp, lb.clone(), eps, Reduce::OverColumns);
            gp = g.soft_min(cost, fp, la.clone(), eps, Reduce::OverRows);
        }
        g.plan_cost(cost, fp, gp, la, lb, eps)
    }

    /// Graph version of [`sinkhorn_divergence`]; `self_costs` caches `W(X,X)`
    /// terms when the same cloud appears in several pairs.
    pub fn sinkhorn_divergence(g: &mut Graph, x: Var, y: Var, xx: Var, yy: Var, eps: f64, iters: usize) -> Var {
        let xy = entropic_ot_cost(g, x, y, eps, iters);
        let yx = entropic_ot_cost(g, y, x, eps, iters);
        let cross = g.add(xy, yx);
        let selfs = g.add(xx, yy);
        let diff = g.sub(cross, selfs);
        let half = g.scale(diff, 0.5);
        g.relu(half)
    }

    fn fit_gaussian(g: &mut Graph, x: Var) -> (Var, Var) {
        let m = g.value(x).rows() as f64;
        let s = g.sum_rows(x);
        let mean = g.scale(s, 1.0 / m);
        let centered = g.sub(x, mean);
        let sq = g.square(centered);
        let vs = g.sum_rows(sq);
        let var = g.scale(vs, 1.0 / m);
        let var = g.offset(var, VARIANCE_FLOOR);
        (mean, var)
    }

    fn kl(g: &mut Graph, a: (Var, Var), b: (Var, Var)) -> Var {
        let ratio = g.div(a.1, b.1);
        let dm = g.sub(a.0, b.0);
        let dm2 = g.square(dm);
        let quad = g.div(dm2, b.1);
        let lr = g.ln(ratio);
        let t = g.add(ratio, quad);
        let t = g.sub(t, lr);
        let t = g.offset(t, -1.0);
        let s = g.sum(t);
        let s = g.scale(s, 0.5);
        g.relu(s)
    }

    fn bhattacharyya(g: &mut Graph, a: (Var, Var), b: (Var, Var)) -> Var {
        let sum = g.add(a.1, b.1);
        let avg = g.scale(sum, 0.5);
        let dm = g.sub(a.0, b.0);
        let dm2 = g.square(dm);
        let quad = g.div(dm2, avg);
        let quad = g.scale(quad, 1.0 / 8.0);
        let la = g.ln(avg);
        let l1 = g.ln(a.1);
        let l2 = g.ln(b.1);
        let lp = g.add(l1, l2);
        let lp = g.scale(lp, 0.5);
        let logdiff = g.sub(la, lp);
        let logdiff = g.scale(logdiff, 0.5);
        let t = g.add(quad, logdiff);
        let s = g.sum(t);
        g.relu(s)
    }

    /// `-sum_m pi_m ln sum_n pi_n exp(-D_mn)`; `dist[m][n]` is `None` on the
    /// diagonal and `weights` is a `1 x N` row on the simplex.
    pub fn paide_epistemic(g: &mut Graph, dist: &[Vec<Option<Var>>], weights: Var) -> Var {
        let n = dist.len();
        let pis: Vec<Var> = (0..n).map(|k| g.slice_cols(weights, k, 1)).collect();
        let mut total = None;
        for m in 0..n {
            let mut inner = pis[m];
            for k in (0..n).filter(|&k| k != m) {
                let d = dist[m][k].expect("off-diagonal distance");
                let nd = g.neg(d);
                let e = g.exp(nd);
                let term = g.mul(pis[k], e);
                inner = g.add(inner, term);
            }
            let l = g.ln(inner);
            let t = g.mul(pis[m], l);
            total = Some(match total {
                None => t,
                Some(acc) => g.add(acc, t),
            });
        }
        let total = total.expect("at least one component");
        g.neg(total)
    }

    /// Differentiable PaiDEs estimate over component clouds (`M x d` each).
    pub fn epistemic_loss(g: &mut Graph, outputs: &[Var], weights: Var, backend: DistanceBackend) -> Var {
        let n = outputs.len();
        assert!(n >= 1, "epistemic loss needs at least one component");
        let mut dist = vec![vec![None; n]; n];
        match backend {
            DistanceBackend::Sinkhorn { epsilon, iters } => {
                if n > 1 {
                    let selfs: Vec<Var> = outputs
                        .iter()
                        .map(|&x| self::entropic_ot_cost(g, x, x, epsilon, iters))
                        .collect();
                    for m in 0..n {
                        for k in m + 1..n {
                            let s = self::sinkhorn_divergence(g, outputs[m], outputs[k], selfs[m], selfs[k], epsilon, iters);
                            dist[m][k] = Some(s);
                            dist[k][m] = Some(s);
                        }
                    }
                }
            }
            DistanceBackend::Kl | DistanceBackend::Bhattacharyya => {
                let fitted: Vec<(Var, Var)> = outputs.iter().map(|&x| fit_gaussian(g, x)).collect();
                for m in 0..n {
                    for k in (0..n).filter(|&k| k != m) {
                        dist[m][k] = Some(match backend {
                            DistanceBackend::Kl => kl(g, fitted[m], fitted[k]),
                            _ => bhattacharyya(g, fitted[m], fitted[k]),
                        });
                    }
                }
            }
        }
        self::paide_epistemic(g, &dist, weights)
    }
}
