//! Numerical verification harness.
//!
//! * [`grad_check`] compares reverse-mode gradients with central finite
//!   differences, parameter by parameter. Where the two disagree only
//!   because of a stop-gradient, the parameter is reported in the
//!   [`GroupClass::StopGradient`] class instead of failing.
//! * [`verify_synergy_decomposition`] estimates, for a two-head regression
//!   model under Gaussian feature perturbation `z0 + eps`, how the expected
//!   squared disagreement between the heads splits into the unperturbed
//!   disagreement and a Jacobian-mismatch term.
//! * [`ds_vs_dks_loss_split`] checks that the matching loss accounts for
//!   exactly the difference between the two regression objectives.

use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Builds a scalar loss from a parameter store.
pub type LossFn<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupClass {
    /// Analytic gradient compared directly with finite differences.
    Checked,
    /// Analytic gradient differs from finite differences, and the
    /// difference disappears when stop-gradients are made transparent.
    StopGradient,
}

impl fmt::Display for GroupClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupClass::Checked => "checked",
            GroupClass::StopGradient => "expected-stop-gradient",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// When `x +- step` changes which side of a rectifier or max-pool kink
    /// any activation lies on, the step is divided by ten, down to this.
    pub min_step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error. Below it the comparison
    /// is effectively absolute: `|a - n| <= tolerance * rel_floor`.
    pub rel_floor: f64,
    /// Check at most this many coordinates per parameter, chosen at random.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            min_step: 1e-8,
            tolerance: 1e-5,
            rel_floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub class: GroupClass,
    pub coords: usize,
    /// Against the stop-gradient gradient for `Checked`, against the
    /// transparent gradient for `StopGradient`.
    pub max_rel_error: f64,
    /// Largest analytic gradient magnitude among checked coordinates.
    pub max_analytic: f64,
    /// Coordinate with the largest error: index, gradient, finite difference.
    pub worst: (usize, f64, f64),
    /// Step reductions taken to keep differences on one smooth piece.
    pub refined: usize,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.pass)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,class,coords,max_rel_error,max_analytic,refined,pass\n");
        for g in &self.groups {
            s += &format!(
                "{},{},{},{:e},{:e},{},{}\n",
                g.name, g.class, g.coords, g.max_rel_error, g.max_analytic, g.refined, g.pass
            );
        }
        s
    }
}

pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn scalar_loss(g: &mut Graph<f64>, store: &ParamStore<f64>, loss: &LossFn) -> Result<(Var, f64)> {
    let l = loss(g, store)?;
    if !g.value(l).is_scalar() {
        return Err(Error::usage(format!(
            "loss has shape {:?}, expected a scalar",
            g.shape(l)
        )));
    }
    Ok((l, g.value(l).item()))
}

/// Central finite-difference audit of every trainable parameter in `store`.
pub fn grad_check(
    store: &ParamStore<f64>,
    loss: &LossFn,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let (l, _) = scalar_loss(&mut g, store, loss)?;
    let analytic = g.backward(l)?;
    let pattern = g.kink_pattern();
    let mut gt = Graph::without_stop_gradient();
    let (lt, _) = scalar_loss(&mut gt, store, loss)?;
    let transparent = gt.backward(lt)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut groups = Vec::new();
    for id in store.trainable_ids() {
        let p = store.get(id);
        let n = p.value.numel();
        let a = analytic.param(id).unwrap_or_else(|| vec![0.0; n]);
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Verification(format!(
                "non-finite analytic gradient for {}",
                p.name
            )));
        }
        let t = transparent.param(id).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let (mut err_sg, mut err_tr, mut max_a, mut differs) = (0.0f64, 0.0f64, 0.0f64, false);
        let mut refined = 0;
        let (mut worst_sg, mut worst_tr) = ((0, 0.0, 0.0), (0, 0.0, 0.0));
        for &i in &coords {
            let orig = work.value(id).data()[i];
            let mut eval = |v: f64| -> Result<(f64, u64)> {
                work.value_mut(id).data_mut()[i] = v;
                let mut g = Graph::new();
                let (_, value) = scalar_loss(&mut g, &work, loss)?;
                Ok((value, g.kink_pattern()))
            };
            let mut h = opts.step;
            let fd = loop {
                let (lp, pp) = eval(orig + h)?;
                let (lm, pm) = eval(orig - h)?;
                if (pp == pattern && pm == pattern) || h <= opts.min_step {
                    break (lp - lm) / (2.0 * h);
                }
                h /= 10.0;
                refined += 1;
            };
            work.value_mut(id).data_mut()[i] = orig;
            let (es, et) = (
                rel_error(a[i], fd, opts.rel_floor),
                rel_error(t[i], fd, opts.rel_floor),
            );
            if es > err_sg {
                (err_sg, worst_sg) = (es, (i, a[i], fd));
            }
            if et > err_tr {
                (err_tr, worst_tr) = (et, (i, t[i], fd));
            }
            max_a = max_a.max(a[i].abs());
            differs |= a[i] != t[i];
        }
        let report = if err_sg <= opts.tolerance || !differs {
            GroupReport {
                name: p.name.clone(),
                class: GroupClass::Checked,
                coords: coords.len(),
                max_rel_error: err_sg,
                max_analytic: max_a,
                worst: worst_sg,
                refined,
                pass: err_sg <= opts.tolerance,
            }
        } else {
            GroupReport {
                name: p.name.clone(),
                class: GroupClass::StopGradient,
                coords: coords.len(),
                max_rel_error: err_tr,
                max_analytic: max_a,
                worst: worst_tr,
                refined,
                pass: err_tr <= opts.tolerance,
            }
        };
        groups.push(report);
    }
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
    })
}

type HeadFn = dyn Fn(&mut Graph<f64>, Var) -> Result<Var> + Send + Sync;

/// A map from a `B x d` batch of features to `B x m` outputs, applied row
/// by row.
#[derive(Clone)]
pub struct Head {
    name: String,
    f: Arc<HeadFn>,
}

impl fmt::Debug for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Head({})", self.name)
    }
}

impl Head {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn apply(&self, g: &mut Graph<f64>, z: Var) -> Result<Var> {
        (self.f)(g, z)
    }

    /// `z -> a * z`.
    pub fn scaled(a: f64) -> Self {
        Self::new(format!("{a}*z"), move |g, z| Ok(g.scale(z, a)))
    }

    /// Elementwise `z^3`.
    pub fn cube() -> Self {
        Self::new("z^3", |g, z| {
            let z2 = g.mul(z, z)?;
            g.mul(z2, z)
        })
    }

    /// `z W^T + b` with `w` of shape `m x d`.
    pub fn linear(w: Tensor<f64>, b: Option<Tensor<f64>>) -> Self {
        Self::new("linear", move |g, z| {
            let wv = g.constant(w.clone());
            let bv = b.clone().map(|b| g.constant(b));
            g.linear(z, wv, bv)
        })
    }

    /// `tanh(z W1^T + b1) W2^T + b2`.
    pub fn tanh_mlp(w1: Tensor<f64>, b1: Tensor<f64>, w2: Tensor<f64>, b2: Tensor<f64>) -> Self {
        Self::new("tanh-mlp", move |g, z| {
            let (w1, b1) = (g.constant(w1.clone()), g.constant(b1.clone()));
            let h = g.linear(z, w1, Some(b1))?;
            let h = g.tanh(h);
            let (w2, b2) = (g.constant(w2.clone()), g.constant(b2.clone()));
            g.linear(h, w2, Some(b2))
        })
    }

    /// Same as [`tanh_mlp`](Self::tanh_mlp) with a ReLU; rejected by the
    /// perturbation checks.
    pub fn relu_mlp(w1: Tensor<f64>, b1: Tensor<f64>, w2: Tensor<f64>, b2: Tensor<f64>) -> Self {
        Self::new("relu-mlp", move |g, z| {
            let (w1, b1) = (g.constant(w1.clone()), g.constant(b1.clone()));
            let h = g.linear(z, w1, Some(b1))?;
            let h = g.relu(h);
            let (w2, b2) = (g.constant(w2.clone()), g.constant(b2.clone()));
            g.linear(h, w2, Some(b2))
        })
    }

    /// Outputs for a batch of feature rows.
    pub fn eval(&self, z: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let zv = g.input(z.clone(), false);
        let out = self.apply(&mut g, zv)?;
        Ok(g.value(out).clone())
    }

    /// `m x d` Jacobian at `z0`, one reverse pass per output coordinate.
    pub fn jacobian(&self, z0: &[f64]) -> Result<Tensor<f64>> {
        let d = z0.len();
        let z = Tensor::new(&[1, d], z0.to_vec())?;
        let m = self.eval(&z)?.numel();
        let mut jac = Vec::with_capacity(m * d);
        for j in 0..m {
            let mut g = Graph::new();
            let zv = g.input(z.clone(), true);
            let out = self.apply(&mut g, zv)?;
            let mut sel = vec![0.0; m];
            sel[j] = 1.0;
            let sv = g.constant(Tensor::new(g.shape(out), sel)?);
            let picked = g.mul(out, sv)?;
            let s = g.sum(picked);
            let grads = g.backward(s)?;
            jac.extend_from_slice(grads.get(zv).expect("input requires grad").data());
        }
        Tensor::new(&[m, d], jac)
    }

    /// Central finite-difference Jacobian.
    pub fn fd_jacobian(&self, z0: &[f64], step: f64) -> Result<Tensor<f64>> {
        let d = z0.len();
        let mut rows = Vec::new();
        for i in 0..d {
            let mut zp = z0.to_vec();
            let mut zm = z0.to_vec();
            zp[i] += step;
            zm[i] -= step;
            let yp = self.eval(&Tensor::new(&[1, d], zp)?)?;
            let ym = self.eval(&Tensor::new(&[1, d], zm)?)?;
            rows.push(
                yp.data()
                    .iter()
                    .zip(ym.data())
                    .map(|(a, b)| (a - b) / (2.0 * step))
                    .collect::<Vec<_>>(),
            );
        }
        let m = rows.first().map_or(0, |r| r.len());
        let data = (0..m)
            .flat_map(|j| rows.iter().map(move |r| r[j]))
            .collect();
        Tensor::new(&[m, d], data)
    }
}

/// `z = f(x)`, `y1 = g1(z)`, `y2 = g2(z)`.
#[derive(Debug, Clone)]
pub struct TwoHeadRegression {
    /// Shared map; the identity when absent.
    pub f: Option<Head>,
    pub g1: Head,
    pub g2: Head,
}

impl TwoHeadRegression {
    pub fn new(g1: Head, g2: Head) -> Self {
        Self { f: None, g1, g2 }
    }

    pub fn features(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        match &self.f {
            Some(f) => f.eval(x),
            None => Ok(x.clone()),
        }
    }

    /// Evaluates both heads on the same feature node.
    pub fn outputs(&self, z: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>, bool)> {
        let mut g = Graph::new();
        let zv = g.input(z.clone(), false);
        let y1 = self.g1.apply(&mut g, zv)?;
        let y2 = self.g2.apply(&mut g, zv)?;
        if g.shape(y1) != g.shape(y2) {
            return Err(Error::config(format!(
                "heads {} and {} produce shapes {:?} and {:?}",
                self.g1.name,
                self.g2.name,
                g.shape(y1),
                g.shape(y2)
            )));
        }
        Ok((g.value(y1).clone(), g.value(y2).clone(), g.has_kinks()))
    }

    fn require_smooth(&self, z0: &[f64]) -> Result<()> {
        let (_, _, kinks) = self.outputs(&Tensor::new(&[1, z0.len()], z0.to_vec())?)?;
        if kinks {
            return Err(Error::config(format!(
                "heads {} / {} contain a ReLU or max-pool; the perturbation expansion needs \
                 twice-differentiable heads (use tanh)",
                self.g1.name, self.g2.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// Per-coordinate standard deviation of `eps`.
    pub sigma: f64,
    /// Number of perturbed evaluations, rounded up to an even count.
    pub n_samples: usize,
    pub seed: u64,
}

const MC_CHUNK: usize = 4096;

/// Sample means and standard errors of the per-sample quantities
/// `[0.5|g1 - y|^2, 0.5|g2 - y|^2, 0.5|g1 - g2|^2]`.
///
/// Perturbations come in antithetic pairs `+eps, -eps`, so the empirical
/// mean of `eps` is exactly zero; standard errors are taken over pair
/// means. For a fixed seed the unit draws do not depend on `sigma`.
struct Moments {
    mean: [f64; 3],
    se: [f64; 3],
    n: usize,
}

fn monte_carlo(
    model: &TwoHeadRegression,
    z0: &[f64],
    y: Option<&[f64]>,
    spec: &PerturbationSpec,
) -> Result<Moments> {
    let d = z0.len();
    let pairs = spec.n_samples.div_ceil(2).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut sum, mut sq) = ([0.0f64; 3], [0.0f64; 3]);
    let mut done = 0;
    while done < pairs {
        let b = MC_CHUNK.min(pairs - done);
        let mut z = Vec::with_capacity(2 * b * d);
        let mut neg = Vec::with_capacity(b * d);
        for _ in 0..b {
            for &c in z0 {
                let u: f64 = StandardNormal.sample(&mut rng);
                z.push(c + spec.sigma * u);
                neg.push(c - spec.sigma * u);
            }
        }
        z.extend(neg);
        let (o1, o2, _) = model.outputs(&Tensor::new(&[2 * b, d], z)?)?;
        let m = o1.numel() / (2 * b);
        let per = |r: usize| -> [f64; 3] {
            let (a, c) = (
                &o1.data()[r * m..(r + 1) * m],
                &o2.data()[r * m..(r + 1) * m],
            );
            let mut t = [0.0; 3];
            for j in 0..m {
                let yj = y.map_or(0.0, |y| y[j]);
                t[0] += 0.5 * (a[j] - yj).powi(2);
                t[1] += 0.5 * (c[j] - yj).powi(2);
                t[2] += 0.5 * (a[j] - c[j]).powi(2);
            }
            t
        };
        for i in 0..b {
            let (p, q) = (per(i), per(b + i));
            for k in 0..3 {
                let v = 0.5 * (p[k] + q[k]);
                sum[k] += v;
                sq[k] += v * v;
            }
        }
        done += b;
    }
    let n = pairs as f64;
    let mut mean = [0.0; 3];
    let mut se = [0.0; 3];
    for k in 0..3 {
        mean[k] = sum[k] / n;
        let var = if pairs > 1 {
            ((sq[k] - n * mean[k] * mean[k]) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        se[k] = (var / n).sqrt();
    }
    Ok(Moments {
        mean,
        se,
        n: 2 * pairs,
    })
}

/// Width of the Monte-Carlo confidence interval in standard errors.
pub const CI_WIDTH: f64 = 3.0;
/// Default constant of the `c * sigma^4` band.
pub const DEFAULT_BAND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynergyReport {
    pub sigma: f64,
    pub n_samples: usize,
    /// Estimate of `E 0.5|g1(z0+eps) - g2(z0+eps)|^2`.
    pub lhs: f64,
    /// Half-width of the confidence interval of `lhs`.
    pub lhs_ci: f64,
    /// `0.5|g1(z0) - g2(z0)|^2`.
    pub consistency_term: f64,
    /// `0.5 sigma^2 |J1(z0) - J2(z0)|_F^2`.
    pub mismatch_term: f64,
    pub residual: f64,
    /// `c sigma^4 + lhs_ci`.
    pub tolerance: f64,
    pub pass: bool,
}

impl SynergyReport {
    pub const CSV_HEADER: &'static str =
        "fixture,sigma,n_samples,lhs,lhs_ci,consistency_term,mismatch_term,residual,tolerance,pass";

    pub fn csv_row(&self, fixture: &str) -> String {
        format!(
            "{fixture},{},{},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.sigma,
            self.n_samples,
            self.lhs,
            self.lhs_ci,
            self.consistency_term,
            self.mismatch_term,
            self.residual,
            self.tolerance,
            self.pass
        )
    }
}

/// Splits the expected perturbed disagreement of the two heads at `z0`
/// and checks `|residual| <= c sigma^4 + CI`.
pub fn verify_synergy_decomposition(
    model: &TwoHeadRegression,
    z0: &[f64],
    spec: &PerturbationSpec,
    c: f64,
) -> Result<SynergyReport> {
    if spec.sigma <= 0.0 || !spec.sigma.is_finite() {
        return Err(Error::config(format!(
            "sigma {} must be positive",
            spec.sigma
        )));
    }
    if z0.is_empty() {
        return Err(Error::config("z0 must have at least one coordinate"));
    }
    model.require_smooth(z0)?;
    let (y1, y2, _) = model.outputs(&Tensor::new(&[1, z0.len()], z0.to_vec())?)?;
    let consistency: f64 = 0.5
        * y1.data()
            .iter()
            .zip(y2.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    let j1 = model.g1.jacobian(z0)?;
    let j2 = model.g2.jacobian(z0)?;
    let frob: f64 = j1
        .data()
        .iter()
        .zip(j2.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    let mismatch = 0.5 * spec.sigma * spec.sigma * frob;

    let mc = monte_carlo(model, z0, None, spec)?;
    let lhs = mc.mean[2];
    let ci = CI_WIDTH * mc.se[2];
    let residual = lhs - consistency - mismatch;
    let tolerance = c * spec.sigma.powi(4) + ci;
    Ok(SynergyReport {
        sigma: spec.sigma,
        n_samples: mc.n,
        lhs,
        lhs_ci: ci,
        consistency_term: consistency,
        mismatch_term: mismatch,
        residual,
        tolerance,
        pass: residual.abs() <= tolerance,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Verification(
            "slope fit needs at least two strictly positive points".into(),
        ));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(cov / var)
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SynergyReport>,
    /// Log-log slope of `|residual|` against `sigma`.
    pub slope: f64,
    pub min_slope: f64,
    pub pass: bool,
}

/// Runs the decomposition at each `sigma` with shared unit draws and fits
/// the residual scaling.
pub fn synergy_sweep(
    model: &TwoHeadRegression,
    z0: &[f64],
    sigmas: &[f64],
    n_samples: usize,
    seed: u64,
    c: f64,
    min_slope: f64,
) -> Result<SweepReport> {
    let rows = sigmas
        .iter()
        .map(|&sigma| {
            verify_synergy_decomposition(
                model,
                z0,
                &PerturbationSpec {
                    sigma,
                    n_samples,
                    seed,
                },
                c,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.sigma, r.residual.abs())).collect();
    let slope = loglog_slope(&pts)?;
    Ok(SweepReport {
        rows,
        slope,
        min_slope,
        pass: slope >= min_slope,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSplitReport {
    pub l_ds: f64,
    pub l_dks: f64,
    pub synergy: f64,
    /// `l_dks - l_ds - synergy`.
    pub gap: f64,
    pub pass: bool,
}

/// Estimates both regression objectives and the matching term on one set
/// of perturbations. `sigma = 0` evaluates at `z0` exactly.
pub fn ds_vs_dks_loss_split(
    model: &TwoHeadRegression,
    z0: &[f64],
    y: &[f64],
    spec: &PerturbationSpec,
) -> Result<LossSplitReport> {
    if spec.sigma < 0.0 || !spec.sigma.is_finite() {
        return Err(Error::config(format!(
            "sigma {} must be non-negative",
            spec.sigma
        )));
    }
    model.require_smooth(z0)?;
    let (y1, _, _) = model.outputs(&Tensor::new(&[1, z0.len()], z0.to_vec())?)?;
    if y1.numel() != y.len() {
        return Err(Error::config(format!(
            "target has {} values, heads produce {}",
            y.len(),
            y1.numel()
        )));
    }
    let mc = monte_carlo(model, z0, Some(y), spec)?;
    let l_ds = mc.mean[0] + mc.mean[1];
    let synergy = mc.mean[2];
    let l_dks = mc.mean[0] + mc.mean[1] + mc.mean[2];
    let gap = l_dks - l_ds - synergy;
    Ok(LossSplitReport {
        l_ds,
        l_dks,
        synergy,
        gap,
        pass: gap.abs() <= 1e-12 * l_dks.abs().max(1.0),
    })
}

/// The standard fixtures.
pub mod fixtures {
    use super::*;

    /// `g1 = 2z`, `g2 = z`.
    pub fn linear() -> TwoHeadRegression {
        TwoHeadRegression::new(Head::scaled(2.0), Head::scaled(1.0))
    }

    /// `g1 = z^3`, `g2 = 0`.
    pub fn cubic() -> TwoHeadRegression {
        TwoHeadRegression::new(Head::cube(), Head::scaled(0.0))
    }

    /// Two copies of one tanh network on 3-d features.
    pub fn identical_tanh() -> TwoHeadRegression {
        let t = |s: &[usize], v: &[f64]| Tensor::from_f64(s, v).unwrap();
        let h = Head::tanh_mlp(
            t(&[2, 3], &[0.3, -0.5, 0.8, 1.1, 0.2, -0.4]),
            t(&[2], &[0.1, -0.2]),
            t(&[2, 2], &[0.7, -1.3, 0.4, 0.9]),
            t(&[2], &[0.05, 0.0]),
        );
        TwoHeadRegression::new(h.clone(), h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Owner, ParamKind};

    #[test]
    fn cube_gradient_audit() {
        let mut s = ParamStore::new();
        s.add(
            "x",
            Tensor::scalar(2.0),
            ParamKind::Trainable,
            Owner::Backbone,
        )
        .unwrap();
        let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let x = g.param(s, s.find("x").unwrap());
            let x2 = g.mul(x, x)?;
            let x3 = g.mul(x2, x)?;
            Ok(g.sum(x3))
        };
        let opts = GradCheckOptions {
            step: 1e-5,
            min_step: 1e-8,
            tolerance: 1e-9,
            ..Default::default()
        };
        let r = grad_check(&s, &loss, &opts).unwrap();
        assert!(r.pass(), "{r:?}");
        assert_eq!(r.groups[0].max_analytic, 12.0);
    }

    #[test]
    fn detached_teacher_is_an_expected_divergence() {
        // loss = sum(softmax(detach(t)) * log softmax(s)); t is reachable only
        // through the detached branch.
        let mut s = ParamStore::new();
        let t = Tensor::from_f64(&[1, 3], &[0.2, -0.4, 0.9]).unwrap();
        let st = Tensor::from_f64(&[1, 3], &[0.5, 0.1, -0.3]).unwrap();
        s.add("teacher", t, ParamKind::Trainable, Owner::Backbone)
            .unwrap();
        s.add("student", st, ParamKind::Trainable, Owner::Backbone)
            .unwrap();
        let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let t = g.param(s, s.find("teacher").unwrap());
            let st = g.param(s, s.find("student").unwrap());
            crate::loss::knowledge_match(g, t, st, 1.0)
        };
        let r = grad_check(&s, &loss, &GradCheckOptions::default()).unwrap();
        assert!(r.pass(), "{r:?}");
        assert_eq!(r.groups[0].class, GroupClass::StopGradient);
        assert_eq!(r.groups[0].max_analytic, 0.0);
        assert_eq!(r.groups[1].class, GroupClass::Checked);
    }

    #[test]
    fn wrong_gradient_fails() {
        // A deliberately broken op: value of x^2 with the graph of 3x.
        let mut s = ParamStore::new();
        s.add(
            "x",
            Tensor::scalar(2.5),
            ParamKind::Trainable,
            Owner::Backbone,
        )
        .unwrap();
        let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let x = g.param(s, s.find("x").unwrap());
            let v = g.value(x).item();
            let c = g.constant(Tensor::scalar(v * v - 3.0 * v));
            let lin = g.scale(x, 3.0);
            let y = g.add(lin, c)?;
            Ok(g.sum(y))
        };
        let r = grad_check(&s, &loss, &GradCheckOptions::default()).unwrap();
        assert!(!r.pass());
        assert_eq!(r.failures().count(), 1);
    }

    #[test]
    fn steps_shrink_across_kinks() {
        // relu(x) with x five microsteps right of the kink: a 1e-5 central
        // difference straddles it and reads 0.75.
        let mut s = ParamStore::new();
        s.add(
            "x",
            Tensor::scalar(5e-6),
            ParamKind::Trainable,
            Owner::Backbone,
        )
        .unwrap();
        let loss = |g: &mut Graph<f64>, s: &ParamStore<f64>| -> Result<Var> {
            let x = g.param(s, s.find("x").unwrap());
            let r = g.relu(x);
            Ok(g.sum(r))
        };
        let r = grad_check(&s, &loss, &GradCheckOptions::default()).unwrap();
        assert!(r.pass(), "{r:?}");
        assert_eq!(r.groups[0].refined, 1);
        let fixed = GradCheckOptions {
            min_step: 1e-5,
            ..Default::default()
        };
        let r = grad_check(&s, &loss, &fixed).unwrap();
        assert!((r.groups[0].worst.2 - 0.75).abs() < 1e-9);
        assert!(!r.pass());
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let m = fixtures::identical_tanh();
        let z0 = [0.4, -0.7, 1.2];
        let a = m.g1.jacobian(&z0).unwrap();
        let n = m.g1.fd_jacobian(&z0, 1e-6).unwrap();
        assert_eq!(a.shape(), &[2, 3]);
        for (x, y) in a.data().iter().zip(n.data()) {
            assert!(rel_error(*x, *y, 1e-12) < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn linear_fixture_closed_form() {
        let r = verify_synergy_decomposition(
            &fixtures::linear(),
            &[3.0],
            &PerturbationSpec {
                sigma: 0.1,
                n_samples: 200_000,
                seed: 0,
            },
            DEFAULT_BAND,
        )
        .unwrap();
        assert_eq!(r.consistency_term, 4.5);
        assert!((r.mismatch_term - 0.005).abs() < 1e-15);
        assert!((r.lhs - 4.505).abs() <= r.lhs_ci, "{r:?}");
        assert!(r.pass);
    }

    #[test]
    fn identical_heads_give_zero() {
        let r = verify_synergy_decomposition(
            &fixtures::identical_tanh(),
            &[0.1, 0.2, 0.3],
            &PerturbationSpec {
                sigma: 0.3,
                n_samples: 1000,
                seed: 1,
            },
            DEFAULT_BAND,
        )
        .unwrap();
        assert_eq!(
            (r.lhs, r.consistency_term, r.mismatch_term),
            (0.0, 0.0, 0.0)
        );
    }

    /// `E[u^k]` for standard normal `u`.
    fn normal_moment(k: u32) -> f64 {
        if k % 2 == 1 {
            0.0
        } else {
            (1..k).step_by(2).map(|v| v as f64).product()
        }
    }

    fn binom(n: u32, k: u32) -> f64 {
        (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product()
    }

    #[test]
    fn cubic_fixture_matches_exact_moments() {
        let sigma: f64 = 0.1;
        // 0.5 E (1 + sigma u)^6 by binomial expansion.
        let exact: f64 = 0.5
            * (0..=6)
                .map(|j| binom(6, j) * sigma.powi(j as i32) * normal_moment(j))
                .sum::<f64>();
        let r = verify_synergy_decomposition(
            &fixtures::cubic(),
            &[1.0],
            &PerturbationSpec {
                sigma,
                n_samples: 200_000,
                seed: 4,
            },
            DEFAULT_BAND,
        )
        .unwrap();
        assert!((r.lhs - exact).abs() <= r.lhs_ci, "{} vs {exact}", r.lhs);
        assert!((r.mismatch_term - 4.5 * sigma * sigma).abs() < 1e-15);
        let exact_residual = exact - 0.5 - 4.5 * sigma * sigma;
        assert!((r.residual - exact_residual).abs() <= r.lhs_ci);
    }

    #[test]
    fn relu_heads_and_bad_sigma_rejected() {
        let t = |s: &[usize], v: &[f64]| Tensor::from_f64(s, v).unwrap();
        let h = Head::relu_mlp(
            t(&[1, 1], &[1.0]),
            t(&[1], &[0.0]),
            t(&[1, 1], &[1.0]),
            t(&[1], &[0.0]),
        );
        let m = TwoHeadRegression::new(h, Head::scaled(1.0));
        let spec = PerturbationSpec {
            sigma: 0.1,
            n_samples: 10,
            seed: 0,
        };
        assert!(matches!(
            verify_synergy_decomposition(&m, &[1.0], &spec, 10.0),
            Err(Error::Config(_))
        ));
        let bad = PerturbationSpec { sigma: 0.0, ..spec };
        assert!(matches!(
            verify_synergy_decomposition(&fixtures::linear(), &[1.0], &bad, 10.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn loss_split_identity_and_closed_form() {
        let spec = PerturbationSpec {
            sigma: 0.1,
            n_samples: 100_000,
            seed: 2,
        };
        let r = ds_vs_dks_loss_split(&fixtures::linear(), &[3.0], &[0.0], &spec).unwrap();
        assert!(r.gap.abs() < 1e-12);
        // 0.5 E(2(3+e))^2 + 0.5 E(3+e)^2 = 2.5 (9 + sigma^2).
        assert!((r.l_ds - 22.525).abs() < 5e-3, "{r:?}");
        assert!((r.synergy - 4.505).abs() < 1e-3);

        let flat = TwoHeadRegression::new(Head::scaled(1.0), Head::scaled(1.0));
        let zero = PerturbationSpec { sigma: 0.0, ..spec };
        let r = ds_vs_dks_loss_split(&flat, &[2.0], &[2.0], &zero).unwrap();
        assert_eq!((r.l_ds, r.l_dks, r.synergy), (0.0, 0.0, 0.0));
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = [0.2, 0.1, 0.05]
            .iter()
            .map(|&s: &f64| (s, 7.0 * s.powi(4)))
            .collect();
        assert!((loglog_slope(&pts).unwrap() - 4.0).abs() < 1e-12);
    }
}
