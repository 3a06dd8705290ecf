//! Balance and multibalance correction for a categorical sensitive feature,
//! plus the iterative binned bias correction with credibility shrinkage.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{Grouping, Portfolio, PremiumVector};
use crate::error::{Error, Result};
use crate::isotonic::{weighted_isotonic_fit, StepFunction};
use crate::metrics::poisson_deviance;

/// Lower bound applied to every corrected premium, in claims per policy-year.
pub const DEFAULT_PREMIUM_FLOOR: f64 = 1e-6;

/// Partition of the premium axis into right-closed intervals.
///
/// `edges` are the interior cut points; bin `k` is `(edges[k-1], edges[k]]`,
/// the first bin extends to `-inf` and the last to `+inf`. `lo`/`hi` record
/// the range of the premiums the scheme was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinScheme {
    pub edges: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl BinScheme {
    pub fn n_bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn bin_of(&self, p: f64) -> usize {
        self.edges.partition_point(|&e| e < p)
    }

    /// Nominal `(lower, upper]` bounds of bin `k`, using `lo`/`hi` at the ends.
    pub fn bounds(&self, k: usize) -> (f64, f64) {
        let lower = if k == 0 { self.lo } else { self.edges[k - 1] };
        let upper = if k == self.edges.len() { self.hi } else { self.edges[k] };
        (lower, upper)
    }

    pub fn assign(&self, premium: &[f64]) -> Vec<usize> {
        premium.iter().map(|&p| self.bin_of(p)).collect()
    }
}

/// Bins with edges at the exposure-weighted quantiles `k/K` of the premium.
///
/// Duplicate edges are collapsed, so the effective number of bins can be
/// smaller than `k`; no bin is ever empty.
pub fn quantile_bins(premium: &[f64], exposure: &[f64], k: usize) -> Result<BinScheme> {
    if k == 0 {
        return Err(Error::Config("number of bins must be at least 1".into()));
    }
    if premium.is_empty() || premium.len() != exposure.len() {
        return Err(Error::Validation(
            "quantile bins need equally long, non-empty premium and exposure".into(),
        ));
    }
    let mut order: Vec<usize> = (0..premium.len()).collect();
    order.sort_by(|&a, &b| premium[a].total_cmp(&premium[b]));
    let lo = premium[order[0]];
    let hi = premium[order[order.len() - 1]];
    let total: f64 = exposure.iter().sum();

    let mut edges: Vec<f64> = Vec::with_capacity(k.saturating_sub(1));
    let mut cum = 0.0;
    let mut pos = 0;
    for q in 1..k {
        let target = (q as f64 * total) / k as f64;
        while pos < order.len() && cum < target * (1.0 - 1e-12) {
            cum += exposure[order[pos]];
            pos += 1;
        }
        let v = premium[order[pos - 1]];
        if v < hi && edges.last().is_none_or(|&e| e < v) {
            edges.push(v);
        }
        // Remaining records tied at v belong to the same bin.
        while pos < order.len() && premium[order[pos]] == v {
            cum += exposure[order[pos]];
            pos += 1;
        }
    }
    if edges.len() + 1 < k {
        warn!(
            "requested {k} premium bins but only {} distinct quantile edges exist; using {} bins",
            edges.len(),
            edges.len() + 1
        );
    }
    Ok(BinScheme { edges, lo, hi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub exposure: f64,
    /// Exposure-weighted mean residual; `None` for an empty cell.
    pub bias: Option<f64>,
    /// Exposure-weighted mean premium; `None` for an empty cell.
    pub mean_premium: Option<f64>,
    pub shrunk_bias: f64,
    pub credibility: f64,
}

/// Per (premium bin, group level) residual statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellBiasTable {
    pub n_bins: usize,
    pub n_levels: usize,
    /// Row-major: cell `(k, l)` is at `k * n_levels + l`.
    pub cells: Vec<CellStats>,
    pub pooled_bias: Vec<f64>,
    pub bin_exposure: Vec<f64>,
}

impl CellBiasTable {
    pub fn cell(&self, k: usize, l: usize) -> &CellStats {
        &self.cells[k * self.n_levels + l]
    }

    /// Largest `|bias|` over non-empty cells.
    pub fn max_abs_bias(&self) -> f64 {
        self.cells
            .iter()
            .filter_map(|c| c.bias)
            .fold(0.0, |m, b| m.max(b.abs()))
    }

    pub fn max_abs_pooled_bias(&self) -> f64 {
        self.pooled_bias.iter().fold(0.0, |m, b| m.max(b.abs()))
    }
}

fn tabulate(
    y: &[f64],
    w: &[f64],
    premium: &[f64],
    bins: &[usize],
    codes: &[usize],
    n_bins: usize,
    n_levels: usize,
) -> CellBiasTable {
    let mut sw = vec![0.0; n_bins * n_levels];
    let mut sr = vec![0.0; n_bins * n_levels];
    let mut sp = vec![0.0; n_bins * n_levels];
    for i in 0..y.len() {
        let c = bins[i] * n_levels + codes[i];
        sw[c] += w[i];
        sr[c] += w[i] * (y[i] - premium[i]);
        sp[c] += w[i] * premium[i];
    }
    let mut pooled_bias = vec![0.0; n_bins];
    let mut bin_exposure = vec![0.0; n_bins];
    for k in 0..n_bins {
        let row = k * n_levels..(k + 1) * n_levels;
        let wk: f64 = sw[row.clone()].iter().sum();
        let rk: f64 = sr[row].iter().sum();
        bin_exposure[k] = wk;
        pooled_bias[k] = if wk > 0.0 { rk / wk } else { 0.0 };
    }
    let cells = (0..n_bins * n_levels)
        .map(|c| {
            let filled = sw[c] > 0.0;
            CellStats {
                exposure: sw[c],
                bias: filled.then(|| sr[c] / sw[c]),
                mean_premium: filled.then(|| sp[c] / sw[c]),
                shrunk_bias: if filled { sr[c] / sw[c] } else { pooled_bias[c / n_levels] },
                credibility: if filled { 1.0 } else { 0.0 },
            }
        })
        .collect();
    CellBiasTable {
        n_bins,
        n_levels,
        cells,
        pooled_bias,
        bin_exposure,
    }
}

/// Exposure-weighted mean residuals `Y - premium` per (bin, level) cell.
///
/// The returned table is unshrunk: `shrunk_bias` equals the raw cell bias for
/// filled cells and the pooled bin bias for empty ones.
pub fn cell_biases(
    portfolio: &Portfolio,
    premium: &PremiumVector,
    bins: &BinScheme,
    group: &Grouping,
) -> Result<CellBiasTable> {
    premium.check_len(portfolio.len())?;
    if group.codes.len() != portfolio.len() {
        return Err(Error::Validation("grouping length mismatch".into()));
    }
    Ok(tabulate(
        &portfolio.frequency(),
        portfolio.exposure(),
        premium,
        &bins.assign(premium),
        &group.codes,
        bins.n_bins(),
        group.n_levels(),
    ))
}

/// Credibility-weighted shrinkage of each cell bias toward its bin's pooled
/// bias, with weight `z = w / (w + c)`.
pub fn shrink(table: &CellBiasTable, c: f64) -> Result<CellBiasTable> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("credibility constant must be positive, got {c}")));
    }
    let mut out = table.clone();
    for (idx, cell) in out.cells.iter_mut().enumerate() {
        let pooled = table.pooled_bias[idx / table.n_levels];
        match cell.bias {
            Some(b) => {
                let z = cell.exposure / (cell.exposure + c);
                cell.credibility = z;
                cell.shrunk_bias = z * b + (1.0 - z) * pooled;
            }
            None => {
                cell.credibility = 0.0;
                cell.shrunk_bias = pooled;
            }
        }
    }
    Ok(out)
}

/// Claim mass, relative to the claim total, that lifting zero-valued isotonic
/// blocks may add.
const ZERO_BLOCK_MASS: f64 = 1e-12;

/// Isotonic fit of `y` on `x` with zero-valued blocks (no claims) lifted to a
/// small positive value, keeping the fitted total within `ZERO_BLOCK_MASS`.
fn positive_isotonic_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<StepFunction> {
    let mut f = weighted_isotonic_fit(x, y, w)?;
    let (mut zero_w, mut total) = (0.0, 0.0);
    for ((&xi, &yi), &wi) in x.iter().zip(y).zip(w) {
        total += wi * yi;
        if f.eval(xi) <= 0.0 {
            zero_w += wi;
        }
    }
    if zero_w > 0.0 {
        let smallest = f
            .values
            .iter()
            .copied()
            .filter(|v| *v > 0.0)
            .fold(DEFAULT_PREMIUM_FLOOR, f64::min);
        let lift = if total > 0.0 {
            (ZERO_BLOCK_MASS * total / zero_w).min(smallest)
        } else {
            DEFAULT_PREMIUM_FLOOR
        };
        for v in f.values.iter_mut().filter(|v| **v <= 0.0) {
            *v = lift;
        }
    }
    Ok(f)
}

/// Replaces each premium by the isotonic regression of `Y` on the premium.
pub fn balance_correct(
    portfolio: &Portfolio,
    premium: &PremiumVector,
) -> Result<(PremiumVector, StepFunction)> {
    premium.check_len(portfolio.len())?;
    let f = positive_isotonic_fit(premium, &portfolio.frequency(), portfolio.exposure())?;
    let out = premium.iter().map(|&p| f.eval(p)).collect();
    Ok((PremiumVector::new(out)?, f))
}

/// Per-level isotonic recalibration, with the pooled fit kept for unseen levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultibalanceModel {
    pub per_level: BTreeMap<String, StepFunction>,
    pub pooled: StepFunction,
}

impl MultibalanceModel {
    pub fn apply<S: AsRef<str>>(&self, premium: &[f64], labels: &[S]) -> (PremiumVector, usize) {
        let mut unseen = 0;
        let out = premium
            .iter()
            .zip(labels)
            .map(|(&p, l)| match self.per_level.get(l.as_ref()) {
                Some(f) => f.eval(p),
                None => {
                    unseen += 1;
                    self.pooled.eval(p)
                }
            })
            .collect();
        if unseen > 0 {
            warn!("{unseen} records with unseen group levels used the pooled correction");
        }
        (PremiumVector::floored(out, f64::MIN_POSITIVE), unseen)
    }
}

/// Isotonic regression of `Y` on the premium separately within each level.
pub fn multibalance_correct(
    portfolio: &Portfolio,
    premium: &PremiumVector,
    group: &Grouping,
    min_group_size: usize,
) -> Result<(PremiumVector, MultibalanceModel)> {
    premium.check_len(portfolio.len())?;
    if group.codes.len() != portfolio.len() {
        return Err(Error::Validation("grouping length mismatch".into()));
    }
    let mut members = vec![Vec::new(); group.n_levels()];
    for (i, &c) in group.codes.iter().enumerate() {
        members[c].push(i);
    }
    for (l, m) in members.iter().enumerate() {
        if !m.is_empty() && m.len() < min_group_size {
            return Err(Error::SmallGroup {
                level: group.levels[l].clone(),
                count: m.len(),
                min: min_group_size,
            });
        }
    }
    let y = portfolio.frequency();
    let w = portfolio.exposure();
    let mut out = vec![0.0; portfolio.len()];
    let mut per_level = BTreeMap::new();
    for (l, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        let px: Vec<f64> = m.iter().map(|&i| premium[i]).collect();
        let py: Vec<f64> = m.iter().map(|&i| y[i]).collect();
        let pw: Vec<f64> = m.iter().map(|&i| w[i]).collect();
        let f = positive_isotonic_fit(&px, &py, &pw)?;
        for &i in m {
            out[i] = f.eval(premium[i]);
        }
        per_level.insert(group.levels[l].clone(), f);
    }
    let pooled = positive_isotonic_fit(premium, &y, w)?;
    Ok((PremiumVector::new(out)?, MultibalanceModel { per_level, pooled }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Number of premium bins `K`.
    pub bins: usize,
    /// Step size in `(0, 1]`.
    pub eta: f64,
    /// Credibility constant `c`, in exposure units.
    pub credibility: f64,
    /// Stopping tolerance on the relative cell correction.
    pub tol: f64,
    pub max_iterations: usize,
    pub premium_floor: f64,
    /// Build the bins once from the starting premium and apply a single
    /// full-step update.
    pub fixed_bins: bool,
    pub min_group_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            bins: 10,
            eta: 0.2,
            credibility: 100.0,
            tol: 0.01,
            max_iterations: 500,
            premium_floor: DEFAULT_PREMIUM_FLOOR,
            fixed_bins: false,
            min_group_size: 30,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bins == 0 {
            return bad("bins must be at least 1".into());
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if !(self.credibility > 0.0 && self.credibility.is_finite()) {
            return bad(format!("credibility must be positive, got {}", self.credibility));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tolerance must be positive, got {}", self.tol));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if !(self.premium_floor > 0.0) {
            return bad(format!("premium floor must be positive, got {}", self.premium_floor));
        }
        Ok(())
    }
}

/// One applied update: the bins it was computed on and the additive
/// correction per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStep {
    pub bins: BinScheme,
    /// `eta * shrunk_bias`, row-major over (bin, level).
    pub corrections: Vec<f64>,
    /// `eta * pooled_bias` per bin, used for levels not seen in training.
    pub pooled: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeModel {
    pub levels: Vec<String>,
    pub steps: Vec<IterationStep>,
    pub config: CalibrationConfig,
    pub converged: bool,
    /// Stopping criterion evaluated at each iteration.
    pub trace: Vec<f64>,
}

impl IterativeModel {
    pub fn n_iterations(&self) -> usize {
        self.steps.len()
    }
}

fn apply_step(step: &IterationStep, n_levels: usize, premium: &mut [f64], codes: &[Option<usize>], floor: f64) {
    for (p, code) in premium.iter_mut().zip(codes) {
        let k = step.bins.bin_of(*p);
        let corr = match code {
            Some(l) => step.corrections[k * n_levels + l],
            None => step.pooled[k],
        };
        *p = (*p + corr).max(floor);
    }
}

/// Iteratively removes shrunk cell biases from the premium.
///
/// Each iteration bins the current premium (exposure-weighted quantiles),
/// computes cell and pooled bin biases, shrinks them with `z = w/(w+c)` and
/// evaluates `max |eta * shrunk| / mean premium` over non-empty cells. When
/// that is at most `tol` the current premium is retained; otherwise the
/// premium moves by `eta * shrunk` and is floored.
pub fn iterate_multical_categorical(
    portfolio: &Portfolio,
    premium0: &PremiumVector,
    group: &Grouping,
    config: &CalibrationConfig,
) -> Result<(PremiumVector, IterativeModel)> {
    config.validate()?;
    premium0.check_len(portfolio.len())?;
    if portfolio.is_empty() {
        return Err(Error::Validation("training fold is empty".into()));
    }
    if group.codes.len() != portfolio.len() {
        return Err(Error::Validation("grouping length mismatch".into()));
    }
    let y = portfolio.frequency();
    let w = portfolio.exposure();
    let n_levels = group.n_levels();
    let codes: Vec<Option<usize>> = group.codes.iter().map(|&c| Some(c)).collect();
    let mut p: Vec<f64> = premium0.to_vec();
    let fixed = if config.fixed_bins {
        Some(quantile_bins(&p, w, config.bins)?)
    } else {
        None
    };

    let mut steps = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iterations {
        let bins = match &fixed {
            Some(b) => b.clone(),
            None => quantile_bins(&p, w, config.bins)?,
        };
        let assign = bins.assign(&p);
        let raw = tabulate(&y, w, &p, &assign, &group.codes, bins.n_bins(), n_levels);
        let table = shrink(&raw, config.credibility)?;
        let criterion = table
            .cells
            .iter()
            .filter_map(|c| c.mean_premium.map(|m| (config.eta * c.shrunk_bias).abs() / m))
            .fold(0.0, f64::max);
        trace.push(criterion);
        if criterion <= config.tol {
            converged = true;
            break;
        }
        let eta = if config.fixed_bins { 1.0 } else { config.eta };
        let step = IterationStep {
            corrections: table.cells.iter().map(|c| eta * c.shrunk_bias).collect(),
            pooled: table.pooled_bias.iter().map(|b| eta * b).collect(),
            bins,
        };
        apply_step(&step, n_levels, &mut p, &codes, config.premium_floor);
        steps.push(step);
        if config.fixed_bins {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "iterative multicalibration stopped after {} iterations without reaching tol {} (last criterion {:.3e})",
            config.max_iterations,
            config.tol,
            trace.last().copied().unwrap_or(f64::NAN)
        );
    }
    let model = IterativeModel {
        levels: group.levels.clone(),
        steps,
        config: config.clone(),
        converged,
        trace,
    };
    Ok((PremiumVector::floored(p, config.premium_floor), model))
}

/// Replays the stored corrections on new premiums.
///
/// Records whose level was not seen in training receive the pooled bin
/// correction. Returns the premiums and the number of such records.
pub fn apply_iterative<S: AsRef<str>>(
    model: &IterativeModel,
    premium: &PremiumVector,
    labels: &[S],
) -> Result<(PremiumVector, usize)> {
    premium.check_len(labels.len())?;
    let index: BTreeMap<&str, usize> = model
        .levels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let codes: Vec<Option<usize>> = labels.iter().map(|l| index.get(l.as_ref()).copied()).collect();
    let unseen = codes.iter().filter(|c| c.is_none()).count();
    if unseen > 0 && !model.steps.is_empty() {
        warn!("{unseen} records with unseen group levels use pooled bin corrections");
    }
    let mut p = premium.to_vec();
    for step in &model.steps {
        apply_step(step, model.levels.len(), &mut p, &codes, model.config.premium_floor);
    }
    Ok((PremiumVector::floored(p, model.config.premium_floor), unseen))
}

/// Default grid of credibility constants, in exposure-years.
pub const CREDIBILITY_GRID: [f64; 5] = [1.0, 10.0, 100.0, 1_000.0, 10_000.0];

/// Picks the credibility constant with the smallest validation deviance.
///
/// Returns the chosen value and the `(c, deviance)` pairs evaluated.
pub fn select_credibility(
    train: &Portfolio,
    train_premium: &PremiumVector,
    train_group: &Grouping,
    validation: &Portfolio,
    validation_premium: &PremiumVector,
    validation_labels: &[String],
    config: &CalibrationConfig,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    if grid.is_empty() {
        return Err(Error::Config("credibility grid is empty".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &c in grid {
        let cfg = CalibrationConfig {
            credibility: c,
            ..config.clone()
        };
        let (_, model) = iterate_multical_categorical(train, train_premium, train_group, &cfg)?;
        let (pv, _) = apply_iterative(&model, validation_premium, validation_labels)?;
        let d = poisson_deviance(validation.claims(), validation.exposure(), &pv)?;
        scores.push((c, d));
    }
    let best = scores
        .iter()
        .fold((grid[0], f64::INFINITY), |acc, &(c, d)| if d < acc.1 { (c, d) } else { acc });
    Ok((best.0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn portfolio(claims: &[f64], exposure: &[f64]) -> Portfolio {
        Portfolio::from_columns(claims.to_vec(), exposure.to_vec()).unwrap()
    }

    #[test]
    fn single_bin_scheme() {
        let b = quantile_bins(&[0.3, 0.1, 0.2], &[1.0; 3], 1).unwrap();
        assert_eq!(b.n_bins(), 1);
        assert!(b.assign(&[0.3, 0.1, 0.2, 50.0]).iter().all(|&k| k == 0));
    }

    #[test]
    fn deciles_of_one_to_hundred() {
        // Oracle: sort and scan for the first value whose cumulative weight reaches q.
        let p: Vec<f64> = (1..=100).rev().map(f64::from).collect();
        let w = vec![1.0; 100];
        let mut expected = Vec::new();
        for q in 1..10 {
            let target = q as f64 * 100.0 / 10.0;
            let mut sorted = p.clone();
            sorted.sort_by(f64::total_cmp);
            let mut cum = 0.0;
            for v in &sorted {
                cum += 1.0;
                if cum >= target {
                    expected.push(*v);
                    break;
                }
            }
        }
        assert_eq!(expected, (1..10).map(|k| 10.0 * k as f64).collect::<Vec<_>>());
        let b = quantile_bins(&p, &w, 10).unwrap();
        assert_eq!(b.edges, expected);
        let counts = b.assign(&p).iter().fold(vec![0; 10], |mut c, &k| {
            c[k] += 1;
            c
        });
        assert_eq!(counts, vec![10; 10]);
    }

    #[test]
    fn few_distinct_values_collapse_without_empty_bins() {
        let p = [1.0, 1.0, 1.0, 2.0, 2.0, 3.0];
        let b = quantile_bins(&p, &[1.0; 6], 10).unwrap();
        assert!(b.n_bins() <= 3);
        let assign = b.assign(&p);
        for k in 0..b.n_bins() {
            assert!(assign.contains(&k), "bin {k} empty in {b:?}");
        }
    }

    #[test]
    fn cell_bias_hand_computed() {
        // bin1/groupA: (Y=1, pi=0.4, w=2), (Y=0, pi=0.4, w=1); bin1/groupB: (Y=0.2, pi=0.4, w=1)
        let p = portfolio(&[2.0, 0.0, 0.2], &[2.0, 1.0, 1.0]);
        let g = Grouping::from_labels(&["A", "A", "B"]);
        let pi = PremiumVector::new(vec![0.4; 3]).unwrap();
        let bins = BinScheme { edges: vec![], lo: 0.4, hi: 0.4 };
        let t = cell_biases(&p, &pi, &bins, &g).unwrap();
        let a = t.cell(0, 0).bias.unwrap();
        assert!((a - (2.0 * 0.6 - 0.4) / 3.0).abs() < 1e-12);
        assert!((t.cell(0, 1).bias.unwrap() - (-0.2)).abs() < 1e-12);
        assert!((t.pooled_bias[0] - 0.6 / 4.0).abs() < 1e-12);
        assert_eq!(t.bin_exposure[0], 4.0);
        // pooled bias is the exposure-weighted average of cell biases
        let avg = (3.0 * a + 1.0 * t.cell(0, 1).bias.unwrap()) / 4.0;
        assert!((avg - t.pooled_bias[0]).abs() < 1e-12);

        let s = shrink(&t, 3.0).unwrap();
        let c = s.cell(0, 0);
        assert!((c.credibility - 0.5).abs() < 1e-12);
        assert!((c.shrunk_bias - (0.5 * 0.8 / 3.0 + 0.5 * 0.15)).abs() < 1e-12);
        assert!((c.shrunk_bias - 0.2083).abs() < 1e-4);
    }

    #[test]
    fn calibrated_cells_have_zero_bias() {
        let p = portfolio(&[1.0, 0.0, 3.0, 1.0], &[1.0, 1.0, 1.0, 1.0]);
        let g = Grouping::from_labels(&["A", "A", "B", "B"]);
        let pi = PremiumVector::new(vec![0.5, 0.5, 2.0, 2.0]).unwrap();
        let bins = quantile_bins(&pi, p.exposure(), 2).unwrap();
        let t = cell_biases(&p, &pi, &bins, &g).unwrap();
        assert_eq!(t.max_abs_bias(), 0.0);
    }

    #[test]
    fn empty_cells_take_pooled_bias() {
        let p = portfolio(&[1.0, 0.0], &[1.0, 1.0]);
        let g = Grouping { levels: vec!["A".into(), "B".into()], codes: vec![0, 0] };
        let pi = PremiumVector::new(vec![0.2, 0.2]).unwrap();
        let bins = BinScheme { edges: vec![], lo: 0.2, hi: 0.2 };
        let t = shrink(&cell_biases(&p, &pi, &bins, &g).unwrap(), 1.0).unwrap();
        let empty = t.cell(0, 1);
        assert!(empty.bias.is_none());
        assert_eq!(empty.credibility, 0.0);
        assert_eq!(empty.shrunk_bias, t.pooled_bias[0]);
    }

    #[test]
    fn huge_credibility_constant_gives_pooled_bias() {
        let p = portfolio(&[2.0, 0.0, 0.2], &[2.0, 1.0, 1.0]);
        let g = Grouping::from_labels(&["A", "A", "B"]);
        let pi = PremiumVector::new(vec![0.4; 3]).unwrap();
        let bins = BinScheme { edges: vec![], lo: 0.4, hi: 0.4 };
        let t = shrink(&cell_biases(&p, &pi, &bins, &g).unwrap(), 1e12).unwrap();
        for c in &t.cells {
            assert!((c.shrunk_bias - 0.15).abs() < 1e-10);
        }
        assert!(matches!(shrink(&t, 0.0), Err(Error::Config(_))));
        assert!(shrink(&t, -1.0).is_err());
    }

    #[test]
    fn claim_free_lowest_block_stays_positive_and_balanced() {
        let p = portfolio(&[0.0, 0.0, 1.0, 2.0], &[40.0, 60.0, 1.0, 1.0]);
        let pi = PremiumVector::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (out, f) = balance_correct(&p, &pi).unwrap();
        assert!(out.iter().all(|&v| v > 0.0));
        assert_eq!(f.eval(0.05), out[0]);
        let charged: f64 = out.iter().zip(p.exposure()).map(|(a, b)| a * b).sum();
        assert!((charged - 3.0).abs() <= 1e-11 * 3.0);
    }

    #[test]
    fn balance_correct_pools_anti_monotone_pair() {
        let p = portfolio(&[0.0, 0.4], &[1.0, 1.0]);
        let pi = PremiumVector::new(vec![0.3, 0.1]).unwrap();
        let (out, _) = balance_correct(&p, &pi).unwrap();
        assert!((out[0] - 0.2).abs() < 1e-15 && (out[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn balance_correct_keeps_calibrated_two_value_premium() {
        let p = portfolio(&[0.0, 1.0, 1.0, 2.0], &[1.0; 4]);
        let pi = PremiumVector::new(vec![0.5, 0.5, 1.5, 1.5]).unwrap();
        let (out, _) = balance_correct(&p, &pi).unwrap();
        assert_eq!(&out[..], &pi[..]);
    }

    #[test]
    fn balance_correct_rejects_misaligned() {
        let p = portfolio(&[0.0, 1.0], &[1.0; 2]);
        let pi = PremiumVector::new(vec![0.5]).unwrap();
        assert!(matches!(balance_correct(&p, &pi), Err(Error::Validation(_))));
    }

    #[test]
    fn multibalance_small_group_is_rejected() {
        let p = portfolio(&[0.0; 40], &[1.0; 40]);
        let labels: Vec<&str> = (0..40).map(|i| if i < 35 { "A" } else { "B" }).collect();
        let g = Grouping::from_labels(&labels);
        let pi = PremiumVector::new(vec![0.1; 40]).unwrap();
        match multibalance_correct(&p, &pi, &g, 30) {
            Err(Error::SmallGroup { level, count, .. }) => {
                assert_eq!(level, "B");
                assert_eq!(count, 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn multibalance_group_shift_oracle() {
        // Two groups at identical premiums; oracle = per-group weighted means.
        let n = 60;
        let pi = PremiumVector::new(vec![0.5; n]).unwrap();
        let labels: Vec<&str> = (0..n).map(|i| if i % 2 == 0 { "A" } else { "B" }).collect();
        let claims: Vec<f64> = (0..n)
            .map(|i| if i % 2 == 0 { if i % 4 == 0 { 1.2 } else { 0.0 } } else if i % 4 == 1 { 0.8 } else { 0.0 })
            .collect();
        let p = portfolio(&claims, &vec![1.0; n]);
        let g = Grouping::from_labels(&labels);
        let (out, model) = multibalance_correct(&p, &pi, &g, 30).unwrap();
        let mean = |lvl: usize| {
            let idx: Vec<usize> = (0..n).filter(|&i| g.codes[i] == lvl).collect();
            idx.iter().map(|&i| claims[i]).sum::<f64>() / idx.len() as f64
        };
        assert!((out[0] - mean(0)).abs() < 1e-12);
        assert!((out[1] - mean(1)).abs() < 1e-12);
        assert_ne!(model.per_level["A"], model.per_level["B"]);
    }

    #[test]
    fn iterative_stops_immediately_on_calibrated_input() {
        let p = portfolio(&[0.0, 1.0, 1.0, 2.0], &[1.0; 4]);
        let g = Grouping::constant(4, "all");
        let pi = PremiumVector::new(vec![0.5, 0.5, 1.5, 1.5]).unwrap();
        let cfg = CalibrationConfig { bins: 2, ..Default::default() };
        let (out, model) = iterate_multical_categorical(&p, &pi, &g, &cfg).unwrap();
        assert!(model.converged);
        assert_eq!(model.trace.len(), 1);
        assert_eq!(model.n_iterations(), 0);
        assert_eq!(&out[..], &pi[..]);
        let (again, _) = apply_iterative(&model, &pi, &["all"; 4]).unwrap();
        assert_eq!(&again[..], &pi[..]);
    }

    #[test]
    fn config_validation() {
        let bad = CalibrationConfig { eta: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CalibrationConfig { eta: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = CalibrationConfig { bins: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(CalibrationConfig::default().validate().is_ok());
    }
}
