//! Tricube-kernel local regression with nearest-neighbour bandwidths.
//!
//! The bandwidth at a query point is the distance to its `ceil(alpha * n)`-th
//! nearest observation, inflated by a relative `1e-6` so that observations at
//! exactly that distance keep a small positive weight. Kernel weights are
//! multiplied by exposure.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BANDWIDTH_INFLATION: f64 = 1.0 + 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degree {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    /// Nearest-neighbour fraction in `(0, 1]`.
    pub alpha: f64,
    pub degree: Degree,
    /// Per-dimension scale factors for 2-D distances; estimated from the data
    /// when absent.
    pub scales: Option<[f64; 2]>,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            alpha: 0.5,
            degree: Degree::Constant,
            scales: None,
        }
    }
}

impl SmoothConfig {
    pub fn new(alpha: f64, degree: Degree) -> Self {
        SmoothConfig {
            alpha,
            degree,
            scales: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if let Some(sc) = self.scales {
            if sc.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("scale factors must be positive, got {sc:?}")));
            }
        }
        Ok(())
    }

    fn neighbours(&self, n: usize) -> usize {
        ((self.alpha * n as f64).ceil() as usize).max(2).min(n)
    }
}

fn tricube(r: f64) -> f64 {
    if r >= 1.0 {
        0.0
    } else {
        let t = 1.0 - r * r * r;
        t * t * t
    }
}

/// Exposure-weighted standard deviation, falling back to `IQR / 1.349` and
/// then to 1 when the spread is zero.
pub fn weighted_scale(x: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let mean = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let var = x.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / sw;
    if var.sqrt() > 0.0 && var.is_finite() {
        return var.sqrt();
    }
    let iqr = weighted_quantile(x, w, 0.75) - weighted_quantile(x, w, 0.25);
    if iqr > 0.0 {
        iqr / 1.349
    } else {
        1.0
    }
}

/// Smallest `x` whose cumulative weight reaches `q` of the total.
pub fn weighted_quantile(x: &[f64], w: &[f64], q: f64) -> f64 {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let total: f64 = w.iter().sum();
    let target = q * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    for &i in &order {
        cum += w[i];
        if cum >= target {
            return x[i];
        }
    }
    x[*order.last().unwrap()]
}

/// Up to `m` distinct grid nodes at exposure-weighted quantiles `k / (m - 1)`,
/// always including the minimum and maximum of `x`.
pub fn quantile_nodes(x: &[f64], w: &[f64], m: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let total: f64 = w.iter().sum();
    let m = m.max(2);
    let mut nodes = vec![x[order[0]]];
    let (mut cum, mut pos) = (0.0, 0);
    for k in 1..m - 1 {
        let target = total * k as f64 / (m - 1) as f64 * (1.0 - 1e-12);
        while pos < order.len() && cum < target {
            cum += w[order[pos]];
            pos += 1;
        }
        let v = x[order[pos.max(1) - 1]];
        if v > *nodes.last().unwrap() {
            nodes.push(v);
        }
    }
    let max = x[*order.last().unwrap()];
    if max > *nodes.last().unwrap() {
        nodes.push(max);
    }
    nodes
}

fn check_inputs(n: usize, lens: &[usize], w: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::Domain("local regression needs at least one observation".into()));
    }
    if lens.iter().any(|&l| l != n) {
        return Err(Error::Validation(format!(
            "local regression inputs differ in length: {n} vs {lens:?}"
        )));
    }
    if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Validation("local regression weights must be positive".into()));
    }
    Ok(())
}

/// Sorted view of a 1-D design for repeated neighbourhood queries.
pub(crate) struct Smoother1d {
    xs: Vec<f64>,
    ws: Vec<f64>,
    order: Vec<usize>,
    q: usize,
    degree: Degree,
}

impl Smoother1d {
    pub(crate) fn new(x: &[f64], w: &[f64], cfg: &SmoothConfig) -> Result<Self> {
        cfg.validate()?;
        check_inputs(x.len(), &[w.len()], w)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite smoothing coordinate".into()));
        }
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
        Ok(Smoother1d {
            xs: order.iter().map(|&i| x[i]).collect(),
            ws: order.iter().map(|&i| w[i]).collect(),
            q: cfg.neighbours(x.len()),
            order,
            degree: cfg.degree,
        })
    }

    fn kth_distance(&self, p: f64) -> f64 {
        let n = self.xs.len();
        let pos = self.xs.partition_point(|&v| v < p);
        let (mut lo, mut hi) = (pos, pos);
        while hi - lo < self.q {
            if lo == 0 {
                hi += 1;
            } else if hi == n || p - self.xs[lo - 1] <= self.xs[hi] - p {
                lo -= 1;
            } else {
                hi += 1;
            }
        }
        (p - self.xs[lo]).max(self.xs[hi - 1] - p)
    }

    /// Calls `f(record_index, weight)` for the equivalent-kernel weights of the
    /// fit at `p`; the weights sum to 1.
    pub(crate) fn for_each_weight(&self, p: f64, mut f: impl FnMut(usize, f64)) {
        let d = self.kth_distance(p);
        if d == 0.0 {
            let lo = self.xs.partition_point(|&v| v < p);
            let hi = self.xs.partition_point(|&v| v <= p);
            let s0: f64 = self.ws[lo..hi].iter().sum();
            for j in lo..hi {
                f(self.order[j], self.ws[j] / s0);
            }
            return;
        }
        let h = d * BANDWIDTH_INFLATION;
        let lo = self.xs.partition_point(|&v| v < p - h);
        let hi = self.xs.partition_point(|&v| v <= p + h);
        let k = |j: usize| {
            let r = (self.xs[j] - p).abs() / h;
            (tricube(r) * self.ws[j], (self.xs[j] - p) / h)
        };
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for j in lo..hi {
            let (kw, u) = k(j);
            s0 += kw;
            s1 += kw * u;
            s2 += kw * u * u;
        }
        if !(s0 > 0.0) {
            let j = self.nearest(p);
            f(self.order[j], 1.0);
            return;
        }
        let det = s0 * s2 - s1 * s1;
        let linear = self.degree == Degree::Linear && det > 1e-10 * s0 * s2;
        for j in lo..hi {
            let (kw, u) = k(j);
            if kw > 0.0 {
                let l = if linear { kw * (s2 - s1 * u) / det } else { kw / s0 };
                f(self.order[j], l);
            }
        }
    }

    fn nearest(&self, p: f64) -> usize {
        let pos = self.xs.partition_point(|&v| v < p);
        if pos == 0 {
            0
        } else if pos == self.xs.len() || p - self.xs[pos - 1] <= self.xs[pos] - p {
            pos - 1
        } else {
            pos
        }
    }

    pub(crate) fn fit_at(&self, y: &[f64], p: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_weight(p, |i, l| acc += l * y[i]);
        acc
    }

    pub(crate) fn fit_many(&self, y: &[f64], at: &[f64]) -> Vec<f64> {
        at.par_iter().map(|&p| self.fit_at(y, p)).collect()
    }
}

/// Local constant or local linear regression of `y` on `x` at `eval_at`.
pub fn local_mean_1d(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    eval_at: &[f64],
    cfg: &SmoothConfig,
) -> Result<Vec<f64>> {
    check_inputs(x.len(), &[y.len(), w.len()], w)?;
    let sm = Smoother1d::new(x, w, cfg)?;
    Ok(sm.fit_many(y, eval_at))
}

/// 2-D design with standardized coordinates.
pub(crate) struct Smoother2d {
    u: Vec<f64>,
    v: Vec<f64>,
    w: Vec<f64>,
    scales: [f64; 2],
    q: usize,
    degree: Degree,
}

impl Smoother2d {
    pub(crate) fn new(p: &[f64], s: &[f64], w: &[f64], cfg: &SmoothConfig) -> Result<Self> {
        cfg.validate()?;
        check_inputs(p.len(), &[s.len(), w.len()], w)?;
        if p.iter().chain(s).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite smoothing coordinate".into()));
        }
        let scales = cfg
            .scales
            .unwrap_or_else(|| [weighted_scale(p, w), weighted_scale(s, w)]);
        Ok(Smoother2d {
            u: p.iter().map(|x| x / scales[0]).collect(),
            v: s.iter().map(|x| x / scales[1]).collect(),
            w: w.to_vec(),
            scales,
            q: cfg.neighbours(p.len()),
            degree: cfg.degree,
        })
    }

    fn sq_dist(&self, a: f64, b: f64) -> Vec<f64> {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| (u - a).powi(2) + (v - b).powi(2))
            .collect()
    }

    fn fit_at(&self, y: &[f64], p: f64, s: f64) -> f64 {
        let (a, b) = (p / self.scales[0], s / self.scales[1]);
        let d2 = self.sq_dist(a, b);
        let mut buf = d2.clone();
        let (_, &mut kth, _) = buf.select_nth_unstable_by(self.q - 1, f64::total_cmp);
        if kth == 0.0 {
            let (sw, swy) = d2
                .iter()
                .enumerate()
                .filter(|(_, d)| **d == 0.0)
                .fold((0.0, 0.0), |(sw, swy), (i, _)| (sw + self.w[i], swy + self.w[i] * y[i]));
            return swy / sw;
        }
        let h = kth.sqrt() * BANDWIDTH_INFLATION;
        let h2 = h * h;
        // Moments of (1, du, dv) for the local linear normal equations.
        let mut m = [0.0f64; 6];
        let mut r = [0.0f64; 3];
        for (i, &dd) in d2.iter().enumerate() {
            if dd >= h2 {
                continue;
            }
            let kw = tricube(dd.sqrt() / h) * self.w[i];
            if kw == 0.0 {
                continue;
            }
            let (du, dv) = ((self.u[i] - a) / h, (self.v[i] - b) / h);
            m[0] += kw;
            m[1] += kw * du;
            m[2] += kw * dv;
            m[3] += kw * du * du;
            m[4] += kw * du * dv;
            m[5] += kw * dv * dv;
            r[0] += kw * y[i];
            r[1] += kw * du * y[i];
            r[2] += kw * dv * y[i];
        }
        if !(m[0] > 0.0) {
            let i = (0..d2.len())
                .min_by(|&x, &z| d2[x].total_cmp(&d2[z]).then(x.cmp(&z)))
                .unwrap();
            return y[i];
        }
        let constant = r[0] / m[0];
        if self.degree == Degree::Constant {
            return constant;
        }
        let mat = nalgebra::Matrix3::new(m[0], m[1], m[2], m[1], m[3], m[4], m[2], m[4], m[5]);
        let det = mat.determinant();
        if !(det > 1e-10 * m[0] * m[3] * m[5]) {
            return constant;
        }
        match mat.cholesky() {
            Some(ch) => ch.solve(&nalgebra::Vector3::new(r[0], r[1], r[2]))[0],
            None => constant,
        }
    }
}

/// 2-D local regression in standardized `(p, s)` coordinates.
pub fn local_mean_2d(
    p: &[f64],
    s: &[f64],
    y: &[f64],
    w: &[f64],
    eval_at: &[(f64, f64)],
    cfg: &SmoothConfig,
) -> Result<Vec<f64>> {
    check_inputs(p.len(), &[s.len(), y.len(), w.len()], w)?;
    let sm = Smoother2d::new(p, s, w, cfg)?;
    Ok(eval_at.par_iter().map(|&(a, b)| sm.fit_at(y, a, b)).collect())
}

/// Sum of exposures of the `k` nearest records to each query point, in
/// coordinates divided by `scales`; distance ties go to the lower index.
pub(crate) fn knn_exposure_at(
    p: &[f64],
    s: &[f64],
    w: &[f64],
    k: usize,
    scales: [f64; 2],
    queries: &[(f64, f64)],
) -> Vec<f64> {
    queries
        .par_iter()
        .map(|&(a, b)| {
            let mut d: Vec<(f64, usize)> = p
                .iter()
                .zip(s)
                .enumerate()
                .map(|(i, (x, y))| (((x - a) / scales[0]).powi(2) + ((y - b) / scales[1]).powi(2), i))
                .collect();
            let cmp = |x: &(f64, usize), y: &(f64, usize)| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1));
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
            }
            d[..k].iter().map(|&(_, i)| w[i]).sum()
        })
        .collect()
}

/// Local effective exposure of every record: the exposure summed over its
/// `k` nearest records (itself included) in standardized `(p, s)` space.
pub fn knn_local_exposure(
    p: &[f64],
    s: &[f64],
    w: &[f64],
    k: usize,
    scales: Option<[f64; 2]>,
) -> Result<Vec<f64>> {
    check_inputs(p.len(), &[s.len(), w.len()], w)?;
    if k == 0 || k > p.len() {
        return Err(Error::Config(format!(
            "kNN size must be in 1..={}, got {k}",
            p.len()
        )));
    }
    let scales = scales.unwrap_or_else(|| [weighted_scale(p, w), weighted_scale(s, w)]);
    let queries: Vec<(f64, f64)> = p.iter().copied().zip(s.iter().copied()).collect();
    Ok(knn_exposure_at(p, s, w, k, scales, &queries))
}

/// Default kNN size `max(50, ceil(0.01 n))`, capped at `n`.
pub fn default_knn_k(n: usize) -> usize {
    50.max((0.01 * n as f64).ceil() as usize).min(n)
}

/// Fitted values on a grid, interpolated linearly (1-D) or bilinearly (2-D)
/// with queries clamped to the grid range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSurface {
    pub grid_p: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_s: Option<Vec<f64>>,
    /// Row-major over `(p, s)` nodes.
    pub values: Vec<f64>,
    pub scales: Vec<f64>,
    pub ranges: Vec<(f64, f64)>,
}

fn locate(grid: &[f64], x: f64) -> (usize, f64, bool) {
    let n = grid.len();
    if n == 1 {
        return (0, 0.0, x != grid[0]);
    }
    if x <= grid[0] {
        return (0, 0.0, x < grid[0]);
    }
    if x >= grid[n - 1] {
        return (n - 2, 1.0, x > grid[n - 1]);
    }
    let j = grid.partition_point(|&g| g <= x) - 1;
    let t = (x - grid[j]) / (grid[j + 1] - grid[j]);
    (j, t, false)
}

impl LocalSurface {
    pub fn from_values_1d(grid_p: Vec<f64>, values: Vec<f64>) -> Self {
        let range = (grid_p[0], *grid_p.last().unwrap());
        LocalSurface {
            grid_p,
            grid_s: None,
            values,
            scales: vec![],
            ranges: vec![range],
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::from_values_1d(vec![0.0], vec![value])
    }

    pub fn fit_1d(x: &[f64], y: &[f64], w: &[f64], nodes: usize, cfg: &SmoothConfig) -> Result<Self> {
        check_inputs(x.len(), &[y.len(), w.len()], w)?;
        let grid = quantile_nodes(x, w, nodes);
        let sm = Smoother1d::new(x, w, cfg)?;
        let values = sm.fit_many(y, &grid);
        Ok(Self::from_values_1d(grid, values))
    }

    pub(crate) fn fit_2d_with(
        sm: &Smoother2d,
        y: &[f64],
        grid_p: Vec<f64>,
        grid_s: Vec<f64>,
    ) -> Self {
        let nodes: Vec<(f64, f64)> = grid_p
            .iter()
            .flat_map(|&a| grid_s.iter().map(move |&b| (a, b)))
            .collect();
        let values = nodes.par_iter().map(|&(a, b)| sm.fit_at(y, a, b)).collect();
        let ranges = vec![
            (grid_p[0], *grid_p.last().unwrap()),
            (grid_s[0], *grid_s.last().unwrap()),
        ];
        LocalSurface {
            grid_p,
            grid_s: Some(grid_s),
            values,
            scales: sm.scales.to_vec(),
            ranges,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn fit_2d(
        p: &[f64],
        s: &[f64],
        y: &[f64],
        w: &[f64],
        nodes_p: usize,
        nodes_s: usize,
        cfg: &SmoothConfig,
    ) -> Result<Self> {
        check_inputs(p.len(), &[s.len(), y.len(), w.len()], w)?;
        let sm = Smoother2d::new(p, s, w, cfg)?;
        Ok(Self::fit_2d_with(
            &sm,
            y,
            quantile_nodes(p, w, nodes_p),
            quantile_nodes(s, w, nodes_s),
        ))
    }

    pub fn is_2d(&self) -> bool {
        self.grid_s.is_some()
    }

    /// Value at `(p, s)` and whether the query was clamped; `s` is ignored by
    /// 1-D surfaces.
    pub fn eval_checked(&self, p: f64, s: f64) -> (f64, bool) {
        let (i, tp, cp) = locate(&self.grid_p, p);
        match &self.grid_s {
            None => {
                let v = if self.grid_p.len() == 1 {
                    self.values[0]
                } else if tp == 0.0 {
                    self.values[i]
                } else if tp == 1.0 {
                    self.values[i + 1]
                } else {
                    self.values[i] + tp * (self.values[i + 1] - self.values[i])
                };
                (v, cp)
            }
            Some(gs) => {
                let ns = gs.len();
                let (j, ts, cs) = locate(gs, s);
                let at = |a: usize, b: usize| self.values[a * ns + b];
                let (i1, j1) = ((i + 1).min(self.grid_p.len() - 1), (j + 1).min(ns - 1));
                let lerp = |x: f64, y: f64, t: f64| if t == 0.0 { x } else if t == 1.0 { y } else { x + t * (y - x) };
                let lo = lerp(at(i, j), at(i, j1), ts);
                let hi = lerp(at(i1, j), at(i1, j1), ts);
                (lerp(lo, hi, tp), cp || cs)
            }
        }
    }

    pub fn eval(&self, p: f64, s: f64) -> f64 {
        self.eval_checked(p, s).0
    }

    pub fn eval_1d(&self, p: f64) -> f64 {
        self.eval_checked(p, 0.0).0
    }
}
