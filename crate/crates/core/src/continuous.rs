//! Calibration against a continuous sensitive variable.
//!
//! Every smoothed function is stored as a [`LocalSurface`] and every centering
//! regression as a [`CenteringFit`], so that training output and out-of-sample
//! replay go through the same evaluation code.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::categorical::{quantile_bins, BinScheme, DEFAULT_PREMIUM_FLOOR};
use crate::data::{Portfolio, PremiumVector};
use crate::error::{Error, Result};
use crate::metrics::poisson_deviance;
use crate::smoothing::{
    default_knn_k, knn_exposure_at, quantile_nodes, weighted_scale, Degree, LocalSurface,
    SmoothConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContinuousMode {
    LocalBc,
    LocalMbc,
    MultiIterCont,
}

impl ContinuousMode {
    /// Local linear for every mode; local constant fits carry a boundary bias
    /// in 2-D that differs from the 1-D one and would leak into `delta`.
    pub fn default_degree(self) -> Degree {
        Degree::Linear
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousConfig {
    pub alpha: f64,
    /// Smoother degree; `None` uses the mode default.
    pub degree: Option<Degree>,
    pub credibility: f64,
    /// kNN size for local exposure; `None` uses `max(50, ceil(0.01 n))`.
    pub knn_k: Option<usize>,
    pub eta: f64,
    pub tol: f64,
    pub max_iterations: usize,
    pub premium_floor: f64,
    /// 2-D grid resolution in the premium and sensitive directions.
    pub grid_p: usize,
    pub grid_s: usize,
    /// 1-D grid resolution.
    pub grid_1d: usize,
    /// Stopping grid: premium and sensitive quantile bin counts.
    pub stop_bins_p: usize,
    pub stop_bins_s: usize,
    /// Quantile bins of the piecewise-linear regression that centres the
    /// joint correction on the premium.
    pub centering_bins: usize,
    /// Warning threshold for a bin mean of a centred correction.
    pub centering_tol: f64,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        ContinuousConfig {
            alpha: 0.5,
            degree: None,
            credibility: 100.0,
            knn_k: None,
            eta: 0.2,
            tol: 0.01,
            max_iterations: 500,
            premium_floor: DEFAULT_PREMIUM_FLOOR,
            grid_p: 64,
            grid_s: 64,
            grid_1d: 256,
            stop_bins_p: 10,
            stop_bins_s: 10,
            centering_bins: 100,
            centering_tol: 1e-6,
        }
    }
}

impl ContinuousConfig {
    pub fn validate(&self) -> Result<()> {
        self.smooth(ContinuousMode::LocalBc).validate()?;
        if !(self.credibility > 0.0) {
            return Err(Error::Config(format!(
                "credibility constant must be positive, got {}",
                self.credibility
            )));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("eta must be in (0, 1], got {}", self.eta)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.premium_floor > 0.0) {
            return Err(Error::Config("premium floor must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if self.knn_k == Some(0) {
            return Err(Error::Config("knn k must be at least 1".into()));
        }
        for (name, v) in [
            ("grid-p", self.grid_p),
            ("grid-s", self.grid_s),
            ("grid-1d", self.grid_1d),
            ("stop-bins-p", self.stop_bins_p),
            ("stop-bins-s", self.stop_bins_s),
            ("centering-bins", self.centering_bins),
        ] {
            if v < 2 {
                return Err(Error::Config(format!("{name} must be at least 2, got {v}")));
            }
        }
        Ok(())
    }

    pub fn smooth(&self, mode: ContinuousMode) -> SmoothConfig {
        SmoothConfig::new(self.alpha, self.degree.unwrap_or(mode.default_degree()))
    }
}

/// Per-iteration surfaces of the iterative procedure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousStep {
    /// Marginal residual bias `b(p)`.
    pub marginal: LocalSurface,
    /// Joint residual bias `b(p, s)`; absent when `s` is constant.
    pub joint: Option<LocalSurface>,
    /// Smoothed part of the credibility-weighted deviation, subtracted to
    /// centre it.
    pub centering: Option<CenteringFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousModel {
    pub mode: ContinuousMode,
    pub config: ContinuousConfig,
    /// `E[Y | p]` for the direct modes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<LocalSurface>,
    /// `E[Y | p, s]` for `local-mbc`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint: Option<LocalSurface>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centering: Option<CenteringFit>,
    /// Fixed credibility weights `z(p, s)` over the initial premium.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credibility_surface: Option<LocalSurface>,
    #[serde(default)]
    pub steps: Vec<ContinuousStep>,
    /// Premium and sensitive bins of the stopping grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_grid: Option<(BinScheme, BinScheme)>,
    #[serde(default)]
    pub trace: Vec<f64>,
    #[serde(default)]
    pub deviance_trace: Vec<f64>,
    /// Largest remaining bin mean after each centering.
    #[serde(default)]
    pub centering_residuals: Vec<f64>,
    pub converged: bool,
}

impl ContinuousModel {
    fn direct(mode: ContinuousMode, config: &ContinuousConfig) -> Self {
        ContinuousModel {
            mode,
            config: config.clone(),
            base: None,
            joint: None,
            centering: None,
            credibility_surface: None,
            steps: vec![],
            stop_grid: None,
            trace: vec![],
            deviance_trace: vec![],
            centering_residuals: vec![],
            converged: true,
        }
    }

    pub fn n_iterations(&self) -> usize {
        self.steps.len()
    }

    /// Marginal bias `b(p)` and centred deviation of iteration `j` at `(p, s)`,
    /// before the step size is applied.
    pub fn step_components(&self, j: usize, p: f64, s: f64) -> Option<(f64, f64)> {
        let step = self.steps.get(j)?;
        let z = self.credibility_surface.as_ref()?;
        let (bp, d, _) = step_parts(step, z, p, s);
        Some((bp, step_correction(bp, d, step.centering.as_ref(), p) - bp))
    }
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

fn check_inputs(portfolio: &Portfolio, premium: &PremiumVector, s: Option<&[f64]>) -> Result<()> {
    if portfolio.is_empty() {
        return Err(Error::Validation("training fold is empty".into()));
    }
    premium.check_len(portfolio.len())?;
    if let Some(s) = s {
        if s.len() != portfolio.len() {
            return Err(Error::Validation(format!(
                "sensitive values have length {}, expected {}",
                s.len(),
                portfolio.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("sensitive values must be finite".into()));
        }
    }
    Ok(())
}

fn fit_base(
    portfolio: &Portfolio,
    premium: &[f64],
    cfg: &ContinuousConfig,
    mode: ContinuousMode,
) -> Result<LocalSurface> {
    let w = portfolio.exposure();
    if is_constant(premium) {
        let mean = portfolio.total_claims() / portfolio.total_exposure();
        return Ok(LocalSurface::from_values_1d(vec![premium[0]], vec![mean]));
    }
    LocalSurface::fit_1d(premium, &portfolio.frequency(), w, cfg.grid_1d, &cfg.smooth(mode))
}

/// Balance correction by 1-D local regression of `Y` on the premium.
pub fn local_balance_correct(
    portfolio: &Portfolio,
    premium: &PremiumVector,
    cfg: &ContinuousConfig,
) -> Result<(PremiumVector, ContinuousModel)> {
    cfg.validate()?;
    check_inputs(portfolio, premium, None)?;
    let mut model = ContinuousModel::direct(ContinuousMode::LocalBc, cfg);
    model.base = Some(fit_base(portfolio, premium, cfg, ContinuousMode::LocalBc)?);
    let (out, _) = apply_continuous(&model, premium, &vec![0.0; premium.len()])?;
    Ok((out, model))
}

/// Piecewise-linear regression of a correction on the premium, fitted
/// separately on each exposure-weighted quantile bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringFit {
    pub bins: BinScheme,
    /// Exposure-weighted mean premium per bin; the line of bin `k` is
    /// `intercepts[k] + slopes[k] * (p - centers[k])`.
    pub centers: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub slopes: Vec<f64>,
}

impl CenteringFit {
    /// Premiums outside the training range are clamped to it.
    pub fn eval(&self, p: f64) -> f64 {
        let p = p.clamp(self.bins.lo, self.bins.hi);
        let k = self.bins.bin_of(p);
        self.intercepts[k] + self.slopes[k] * (p - self.centers[k])
    }
}

/// Removes the part of `delta` explained by a 1-D regression on `p`.
///
/// The regression is exposure-weighted least squares on `(1, p)` within each of
/// `centering_bins` quantile bins of `p`, so the centred values have zero
/// weighted mean on every bin and on every union of bins. That remaining mean
/// is returned with the fit.
fn center(p: &[f64], delta: &[f64], w: &[f64], cfg: &ContinuousConfig) -> Result<(CenteringFit, f64)> {
    let bins = quantile_bins(p, w, cfg.centering_bins)?;
    let nb = bins.n_bins();
    let codes = bins.assign(p);
    // Per bin: sum w, sum w p, sum w d.
    let mut acc = vec![(0.0, 0.0, 0.0); nb];
    for i in 0..p.len() {
        let a = &mut acc[codes[i]];
        a.0 += w[i];
        a.1 += w[i] * p[i];
        a.2 += w[i] * delta[i];
    }
    let centers: Vec<f64> = acc.iter().map(|a| a.1 / a.0).collect();
    let intercepts: Vec<f64> = acc.iter().map(|a| a.2 / a.0).collect();
    // Per bin: sum w x^2 and sum w x d, with x = p - center.
    let mut mom = vec![(0.0, 0.0); nb];
    for i in 0..p.len() {
        let k = codes[i];
        let x = p[i] - centers[k];
        mom[k].0 += w[i] * x * x;
        mom[k].1 += w[i] * x * (delta[i] - intercepts[k]);
    }
    let slopes: Vec<f64> = mom
        .iter()
        .zip(&acc)
        .map(|(m, a)| {
            let scale = a.1 / a.0;
            if m.0 > 1e-24 * a.0 * scale * scale {
                m.1 / m.0
            } else {
                0.0
            }
        })
        .collect();
    let fit = CenteringFit {
        bins,
        centers,
        intercepts,
        slopes,
    };
    let mut left = vec![0.0; nb];
    for i in 0..p.len() {
        left[codes[i]] += w[i] * (delta[i] - fit.eval(p[i]));
    }
    let remaining = left
        .iter()
        .zip(&acc)
        .fold(0.0f64, |m, (l, a)| m.max((l / a.0).abs()));
    if remaining > cfg.centering_tol {
        warn!(
            "centering left a bin mean of {remaining:.3e} (target {:.1e})",
            cfg.centering_tol
        );
    }
    Ok((fit, remaining))
}

/// Centered multibalance correction: `m0(p) + delta(p, s) - E[delta | p]`
/// with `delta = m(p, s) - m0(p)`.
pub fn mbc_bivariate_centered(
    portfolio: &Portfolio,
    premium: &PremiumVector,
    s: &[f64],
    cfg: &ContinuousConfig,
) -> Result<(PremiumVector, ContinuousModel)> {
    cfg.validate()?;
    check_inputs(portfolio, premium, Some(s))?;
    let mode = ContinuousMode::LocalMbc;
    let mut model = ContinuousModel::direct(mode, cfg);
    let base = fit_base(portfolio, premium, cfg, mode)?;
    if !is_constant(s) && !is_constant(premium) {
        let w = portfolio.exposure();
        let joint = LocalSurface::fit_2d(
            premium,
            s,
            &portfolio.frequency(),
            w,
            cfg.grid_p,
            cfg.grid_s,
            &cfg.smooth(mode),
        )?;
        let delta: Vec<f64> = premium
            .iter()
            .zip(s)
            .map(|(&p, &sv)| joint.eval(p, sv) - base.eval_1d(p))
            .collect();
        let (centering, resid) = center(premium, &delta, w, cfg)?;
        model.centering_residuals.push(resid);
        model.joint = Some(joint);
        model.centering = Some(centering);
    }
    model.base = Some(base);
    let (out, _) = apply_continuous(&model, premium, s)?;
    Ok((out, model))
}

/// Marginal bias and credibility-weighted deviation of one record.
fn step_parts(step: &ContinuousStep, z: &LocalSurface, p: f64, s: f64) -> (f64, f64, bool) {
    let (bp, c1) = step.marginal.eval_checked(p, s);
    match &step.joint {
        Some(j) => {
            let (bps, c2) = j.eval_checked(p, s);
            let (zv, _) = z.eval_checked(p, s);
            (bp, zv * (bps - bp), c1 || c2)
        }
        None => (bp, 0.0, c1),
    }
}

fn step_correction(bp: f64, delta: f64, centering: Option<&CenteringFit>, p: f64) -> f64 {
    let c = match centering {
        Some(g) => delta - g.eval(p),
        None => delta,
    };
    bp + c
}

fn credibility_surface(
    p: &[f64],
    s: &[f64],
    w: &[f64],
    cfg: &ContinuousConfig,
) -> Result<LocalSurface> {
    let n = p.len();
    let k = cfg.knn_k.unwrap_or_else(|| default_knn_k(n));
    if k > n {
        return Err(Error::Config(format!("knn k = {k} exceeds the {n} training records")));
    }
    let scales = [weighted_scale(p, w), weighted_scale(s, w)];
    let gp = quantile_nodes(p, w, cfg.grid_p);
    let gs = quantile_nodes(s, w, cfg.grid_s);
    let nodes: Vec<(f64, f64)> = gp
        .iter()
        .flat_map(|&a| gs.iter().map(move |&b| (a, b)))
        .collect();
    let values = knn_exposure_at(p, s, w, k, scales, &nodes)
        .into_iter()
        .map(|wl| wl / (wl + cfg.credibility))
        .collect();
    let ranges = vec![(gp[0], *gp.last().unwrap()), (gs[0], *gs.last().unwrap())];
    Ok(LocalSurface {
        grid_p: gp,
        grid_s: Some(gs),
        values,
        scales: scales.to_vec(),
        ranges,
    })
}

/// Stopping criterion `max |eta * mean correction| / mean premium` over the
/// non-empty cells of the fixed grid.
fn grid_criterion(
    grid: &(BinScheme, BinScheme),
    s_bins: &[usize],
    p: &[f64],
    corr: &[f64],
    w: &[f64],
    eta: f64,
) -> f64 {
    let ns = grid.1.n_bins();
    let cells = grid.0.n_bins() * ns;
    let mut sw = vec![0.0; cells];
    let mut sc = vec![0.0; cells];
    let mut sp = vec![0.0; cells];
    for i in 0..p.len() {
        let c = grid.0.bin_of(p[i]) * ns + s_bins[i];
        sw[c] += w[i];
        sc[c] += w[i] * corr[i];
        sp[c] += w[i] * p[i];
    }
    (0..cells)
        .filter(|&c| sw[c] > 0.0)
        .map(|c| (eta * sc[c] / sw[c]).abs() / (sp[c] / sw[c]))
        .fold(0.0, f64::max)
}

/// Iterative multicalibration against a continuous `s`.
///
/// Credibility weights `z(p, s) = w_loc / (w_loc + c)` come from kNN local
/// exposure around the initial premium and stay fixed. Each iteration fits
/// the marginal and joint residual bias in the current premium space, forms
/// `delta = z * (b(p, s) - b(p))`, centres it on `p`, and moves the premium
/// by `eta * (b(p) + centred delta)`. The premium is retained once the fixed
/// grid criterion is at most `tol`.
pub fn iterate_multical_continuous(
    portfolio: &Portfolio,
    premium0: &PremiumVector,
    s: &[f64],
    cfg: &ContinuousConfig,
) -> Result<(PremiumVector, ContinuousModel)> {
    cfg.validate()?;
    check_inputs(portfolio, premium0, Some(s))?;
    let mode = ContinuousMode::MultiIterCont;
    let smooth = cfg.smooth(mode);
    let w = portfolio.exposure();
    let y = portfolio.frequency();
    let n = portfolio.len();
    let s_constant = is_constant(s);

    let z = credibility_surface(premium0, s, w, cfg)?;
    let stop_grid = (
        quantile_bins(premium0, w, cfg.stop_bins_p)?,
        quantile_bins(s, w, cfg.stop_bins_s)?,
    );
    let s_bins = stop_grid.1.assign(s);

    let mut p = premium0.to_vec();
    let mut model = ContinuousModel::direct(mode, cfg);
    model.converged = false;
    for _ in 0..cfg.max_iterations {
        let r: Vec<f64> = y.iter().zip(&p).map(|(a, b)| a - b).collect();
        let marginal = if is_constant(&p) {
            let mean = r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / portfolio.total_exposure();
            LocalSurface::from_values_1d(vec![p[0]], vec![mean])
        } else {
            LocalSurface::fit_1d(&p, &r, w, cfg.grid_1d, &smooth)?
        };
        let joint = if s_constant || is_constant(&p) {
            None
        } else {
            Some(LocalSurface::fit_2d(&p, s, &r, w, cfg.grid_p, cfg.grid_s, &smooth)?)
        };
        let mut step = ContinuousStep {
            marginal,
            joint,
            centering: None,
        };
        let parts: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let (bp, d, _) = step_parts(&step, &z, p[i], s[i]);
                (bp, d)
            })
            .collect();
        if step.joint.is_some() {
            let delta: Vec<f64> = parts.iter().map(|x| x.1).collect();
            let (g, resid) = center(&p, &delta, w, cfg)?;
            model.centering_residuals.push(resid);
            step.centering = Some(g);
        }
        let corr: Vec<f64> = (0..n)
            .map(|i| step_correction(parts[i].0, parts[i].1, step.centering.as_ref(), p[i]))
            .collect();

        let criterion = grid_criterion(&stop_grid, &s_bins, &p, &corr, w, cfg.eta);
        model.trace.push(criterion);
        model.deviance_trace.push(poisson_deviance(portfolio.claims(), w, &p)?);
        if criterion <= cfg.tol {
            model.converged = true;
            break;
        }
        for (pi, c) in p.iter_mut().zip(&corr) {
            *pi = (*pi + cfg.eta * c).max(cfg.premium_floor);
        }
        model.steps.push(step);
    }
    if !model.converged {
        warn!(
            "continuous multicalibration stopped after {} iterations without reaching tol {} (last criterion {:.3e})",
            cfg.max_iterations,
            cfg.tol,
            model.trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    let early = &model.deviance_trace[..model.deviance_trace.len().min(10)];
    if early.windows(2).any(|d| d[1] > d[0] * (1.0 + 1e-6)) {
        warn!("training deviance increased during the first iterations");
    }
    model.credibility_surface = Some(z);
    model.stop_grid = Some(stop_grid);
    Ok((PremiumVector::floored(p, cfg.premium_floor), model))
}

/// Replays a fitted model on new premiums; also returns the number of
/// records whose evaluation was clamped to a surface's training range.
pub fn apply_continuous(
    model: &ContinuousModel,
    premium: &PremiumVector,
    s: &[f64],
) -> Result<(PremiumVector, usize)> {
    let needs_s = model.joint.is_some() || model.steps.iter().any(|st| st.joint.is_some());
    if needs_s && s.len() != premium.len() {
        return Err(Error::Validation(format!(
            "sensitive values have length {}, expected {}",
            s.len(),
            premium.len()
        )));
    }
    let floor = model.config.premium_floor;
    let sv = |i: usize| if s.len() == premium.len() { s[i] } else { 0.0 };
    let mut clamped = 0;
    let out: Vec<f64> = match model.mode {
        ContinuousMode::LocalBc | ContinuousMode::LocalMbc => {
            let base = model
                .base
                .as_ref()
                .ok_or_else(|| Error::Validation("model has no base surface".into()))?;
            premium
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let (m0, c0) = base.eval_checked(p, 0.0);
                    let mut hit = c0;
                    let v = match (&model.joint, &model.centering) {
                        (Some(j), Some(g)) => {
                            let (m, c1) = j.eval_checked(p, sv(i));
                            hit |= c1;
                            let delta = m - m0;
                            m0 + (delta - g.eval(p))
                        }
                        _ => m0,
                    };
                    clamped += hit as usize;
                    v.max(floor)
                })
                .collect()
        }
        ContinuousMode::MultiIterCont => {
            let mut p = premium.to_vec();
            let mut hit = vec![false; p.len()];
            if !model.steps.is_empty() {
                let z = model
                    .credibility_surface
                    .as_ref()
                    .ok_or_else(|| Error::Validation("model has no credibility surface".into()))?;
                for step in &model.steps {
                    for (i, pi) in p.iter_mut().enumerate() {
                        let (bp, d, c) = step_parts(step, z, *pi, sv(i));
                        hit[i] |= c;
                        let corr = step_correction(bp, d, step.centering.as_ref(), *pi);
                        *pi = (*pi + model.config.eta * corr).max(floor);
                    }
                }
            }
            clamped = hit.iter().filter(|h| **h).count();
            p
        }
    };
    if clamped > 0 {
        warn!("{clamped} records fell outside a fitted surface's range and were clamped");
    }
    Ok((PremiumVector::floored(out, floor), clamped))
}

/// Picks the credibility constant with the smallest validation deviance.
#[allow(clippy::too_many_arguments)]
pub fn select_credibility_continuous(
    train: &Portfolio,
    train_premium: &PremiumVector,
    train_s: &[f64],
    validation: &Portfolio,
    validation_premium: &PremiumVector,
    validation_s: &[f64],
    cfg: &ContinuousConfig,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Config("credibility grid is empty".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &c in grid {
        let cc = ContinuousConfig {
            credibility: c,
            ..cfg.clone()
        };
        let (_, model) = iterate_multical_continuous(train, train_premium, train_s, &cc)?;
        let (pv, _) = apply_continuous(&model, validation_premium, validation_s)?;
        scores.push((c, poisson_deviance(validation.claims(), validation.exposure(), &pv)?));
    }
    let best = scores
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|x| x.0)
        .unwrap();
    Ok((best, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Poisson};

    /// Portfolio with mean `mu(p, s)` and premium `p`, with Poisson counts.
    fn simulate(
        n: usize,
        seed: u64,
        mu: impl Fn(f64, f64) -> f64,
    ) -> (Portfolio, PremiumVector, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut claims, mut exposure, mut prem, mut s) = (vec![], vec![], vec![], vec![]);
        for _ in 0..n {
            let p: f64 = rng.random_range(0.5..2.0);
            let sv: f64 = rng.random_range(0.0..20.0);
            let w: f64 = rng.random_range(0.05..1.0);
            let lam = w * mu(p, sv);
            claims.push(Poisson::new(lam).unwrap().sample(&mut rng));
            exposure.push(w);
            prem.push(p);
            s.push(sv);
        }
        let port = Portfolio::from_columns(claims, exposure).unwrap();
        (port, PremiumVector::new(prem).unwrap(), s)
    }

    fn small_cfg() -> ContinuousConfig {
        ContinuousConfig {
            grid_p: 16,
            grid_s: 16,
            grid_1d: 64,
            ..Default::default()
        }
    }

    #[test]
    fn degenerate_premium_gives_global_mean() {
        let port = Portfolio::from_columns(vec![0.0, 1.0, 2.0], vec![1.0, 0.5, 0.5]).unwrap();
        let pv = PremiumVector::new(vec![0.3; 3]).unwrap();
        let (out, _) = local_balance_correct(&port, &pv, &ContinuousConfig::default()).unwrap();
        assert!(out.iter().all(|v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn local_bc_is_scale_invariant_and_balanced() {
        let (port, pv, _) = simulate(4000, 1, |p, _| 0.8 * p);
        let cfg = small_cfg();
        let (a, _) = local_balance_correct(&port, &pv, &cfg).unwrap();
        let scaled = PremiumVector::new(pv.iter().map(|v| 2.0 * v).collect()).unwrap();
        let (b, _) = local_balance_correct(&port, &scaled, &cfg).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9, "{x} {y}");
        }
        let charged: f64 = a.iter().zip(port.exposure()).map(|(p, w)| p * w).sum();
        let gap = (charged - port.total_claims()) / port.total_claims();
        assert!(gap.abs() < 0.01, "{gap}");
    }

    #[test]
    fn constant_s_reduces_to_local_bc() {
        let (port, pv, _) = simulate(2000, 2, |p, _| p);
        let s = vec![3.0; port.len()];
        let cfg = small_cfg();
        let (a, _) = local_balance_correct(&port, &pv, &cfg).unwrap();
        let (b, m) = mbc_bivariate_centered(&port, &pv, &s, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(m.joint.is_none());
    }

    #[test]
    fn centered_mbc_keeps_marginal_consistency_and_recovers_tilt() {
        let beta = 0.04;
        let (port, pv, s) = simulate(60_000, 3, |p, sv| p + beta * (sv - 10.0));
        let cfg = ContinuousConfig::default();
        let (out, model) = mbc_bivariate_centered(&port, &pv, &s, &cfg).unwrap();
        let base = model.base.as_ref().unwrap();
        let w = port.exposure();
        // Decile means of (mbc - m0) relative to the decile premium.
        let bins = quantile_bins(&pv, w, 10).unwrap();
        let mut acc = vec![(0.0, 0.0, 0.0); 10];
        for i in 0..port.len() {
            let k = bins.bin_of(pv[i]);
            acc[k].0 += w[i] * (out[i] - base.eval_1d(pv[i]));
            acc[k].1 += w[i] * pv[i];
            acc[k].2 += w[i];
        }
        for (d, p, e) in acc {
            assert!((d / e).abs() <= 1e-3 * (p / e), "{} vs {}", d / e, p / e);
        }
        // Interior tilt in s at p = 1.25, against the closed-form slope.
        let j = model.joint.as_ref().unwrap();
        let slope = (j.eval(1.25, 15.0) - j.eval(1.25, 5.0)) / 10.0;
        assert!((slope - beta).abs() < 0.2 * beta, "{slope}");
    }

    #[test]
    fn s_independent_of_y_matches_local_bc() {
        // Replicated fits: at fixed interior points the mean of (mbc - bc)
        // over seeds must be within 3 standard errors of zero.
        let queries = [(0.9, 6.0), (1.25, 10.0), (1.6, 14.0), (1.1, 12.0)];
        let qp = PremiumVector::new(queries.iter().map(|q| q.0).collect()).unwrap();
        let qs: Vec<f64> = queries.iter().map(|q| q.1).collect();
        let reps = 8;
        let mut diffs = vec![vec![]; queries.len()];
        for seed in 0..reps {
            let (port, pv, s) = simulate(20_000, 100 + seed, |p, _| 0.7 * p + 0.2);
            let cfg = ContinuousConfig::default();
            let (_, bc) = local_balance_correct(&port, &pv, &cfg).unwrap();
            let (_, mbc) = mbc_bivariate_centered(&port, &pv, &s, &cfg).unwrap();
            let a = apply_continuous(&bc, &qp, &qs).unwrap().0;
            let b = apply_continuous(&mbc, &qp, &qs).unwrap().0;
            for q in 0..queries.len() {
                diffs[q].push(b[q] - a[q]);
            }
        }
        for d in diffs {
            let mean = d.iter().sum::<f64>() / reps as f64;
            let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            assert!(mean.abs() <= 3.0 * sd / (reps as f64).sqrt() + 1e-12, "{mean} (sd {sd})");
        }
    }

    #[test]
    fn iterative_already_calibrated_stops_immediately() {
        let port = Portfolio::from_columns(vec![1.0; 200], vec![1.0; 200]).unwrap();
        let pv = PremiumVector::new(vec![1.0; 200]).unwrap();
        let s: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let (out, m) = iterate_multical_continuous(&port, &pv, &s, &small_cfg()).unwrap();
        assert!(m.converged);
        assert_eq!(m.n_iterations(), 0);
        assert_eq!(out, pv);
    }

    #[test]
    fn iterative_reduces_grid_bias_and_replays() {
        let (port, pv, s) = simulate(6000, 5, |p, sv| 1.5 * p * (1.0 + 0.05 * (sv - 10.0)).max(0.1));
        let cfg = small_cfg();
        let (out, model) = iterate_multical_continuous(&port, &pv, &s, &cfg).unwrap();
        assert!(model.converged, "{:?}", model.trace);
        assert!(out.iter().all(|v| *v >= cfg.premium_floor));
        let z = model.credibility_surface.as_ref().unwrap();
        assert!(z.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let (replay, _) = apply_continuous(&model, &pv, &s).unwrap();
        for (a, b) in replay.iter().zip(out.iter()) {
            assert!((a - b).abs() <= 1e-10);
        }
        for r in &model.centering_residuals {
            assert!(*r <= 1e-6, "{r}");
        }
    }

    #[test]
    fn large_credibility_constant_switches_off_the_joint_correction() {
        let (port, pv, s) = simulate(3000, 6, |p, sv| p * (1.0 + 0.03 * (sv - 10.0)).max(0.1));
        let cfg = ContinuousConfig {
            credibility: 1e12,
            ..small_cfg()
        };
        let (_, model) = iterate_multical_continuous(&port, &pv, &s, &cfg).unwrap();
        assert!(model.credibility_surface.unwrap().values.iter().all(|v| *v < 1e-8));
    }

    #[test]
    fn zero_iteration_model_is_identity() {
        let model = ContinuousModel::direct(ContinuousMode::MultiIterCont, &ContinuousConfig::default());
        let pv = PremiumVector::new(vec![0.2, 0.4]).unwrap();
        assert_eq!(apply_continuous(&model, &pv, &[1.0, 2.0]).unwrap().0, pv);
    }

    #[test]
    fn out_of_range_queries_are_clamped_and_counted() {
        let (port, pv, _) = simulate(500, 7, |p, _| p);
        let (_, model) = local_balance_correct(&port, &pv, &small_cfg()).unwrap();
        let q = PremiumVector::new(vec![0.01, 1.0, 50.0]).unwrap();
        let (out, clamped) = apply_continuous(&model, &q, &[]).unwrap();
        assert_eq!(clamped, 2);
        let base = model.base.unwrap();
        assert_eq!(out[0], base.values[0].max(DEFAULT_PREMIUM_FLOOR));
    }

    #[test]
    fn config_validation() {
        let bad = ContinuousConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ContinuousConfig {
            knn_k: Some(0),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let (port, pv, s) = simulate(20, 8, |p, _| p);
        let cfg = ContinuousConfig {
            knn_k: Some(21),
            ..small_cfg()
        };
        assert!(matches!(
            iterate_multical_continuous(&port, &pv, &s, &cfg),
            Err(Error::Config(_))
        ));
    }
}

