//! Synthetic portfolios with a known true mean.
//!
//! `mu(x) = exp(intercept + sum_j b_j x_j + sum_k c_k[level_k] + beta_s * score(S))`
//! where `score` maps the sensitive variable to `[-1, 1]`. Counts are
//! `Poisson(w * mu)` with exposure uniform on `(0.05, 1]`. Every record draws
//! from its own ChaCha stream, so output depends only on the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnData, Grouping, Portfolio, PremiumVector, SensitiveColumn};
use crate::error::{Error, Result};

pub const SENSITIVE_COLUMN: &str = "S";
pub const TRUE_MU_COLUMN: &str = "true_mu";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GroupKind {
    /// `levels` equally likely levels `g00`, `g01`, ...; level `l` scores
    /// `2l / (levels - 1) - 1`.
    Categorical { levels: usize },
    /// `S ~ U(0, 20)`, scoring `(S - 10) / 10`.
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distortion {
    /// Multiplier `a`; `None` picks it so that `sum w pi = sum w mu`.
    pub scale: Option<f64>,
    pub power: f64,
    /// Remove the sensitive term from `mu` before distorting.
    pub drop_s: bool,
    /// Remove these features' terms from `mu` before distorting.
    #[serde(default)]
    pub drop_features: Vec<String>,
}

impl Default for Distortion {
    fn default() -> Self {
        Distortion {
            scale: Some(1.0),
            power: 1.0,
            drop_s: false,
            drop_features: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub group_kind: GroupKind,
    pub intercept: f64,
    /// Effects of standard normal features `x0`, `x1`, ...
    pub numeric_effects: Vec<f64>,
    /// Per-level effects of uniform categorical features `c0`, `c1`, ...
    pub categorical_effects: Vec<Vec<f64>>,
    pub beta_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 10_000,
            seed: 0,
            group_kind: GroupKind::Categorical { levels: 4 },
            intercept: -2.0,
            numeric_effects: vec![0.3, -0.2],
            categorical_effects: vec![vec![0.0, 0.25, -0.25]],
            beta_s: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic portfolio needs n >= 1".into()));
        }
        if let GroupKind::Categorical { levels: 0 } = self.group_kind {
            return Err(Error::Config("categorical sensitive variable needs at least one level".into()));
        }
        if self.categorical_effects.iter().any(|e| e.is_empty()) {
            return Err(Error::Config("categorical features need at least one level".into()));
        }
        let all = std::iter::once(self.intercept)
            .chain(self.numeric_effects.iter().copied())
            .chain(self.categorical_effects.iter().flatten().copied())
            .chain(std::iter::once(self.beta_s));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("synthetic effects must be finite".into()));
        }
        Ok(())
    }

    pub fn numeric_name(j: usize) -> String {
        format!("x{j}")
    }

    pub fn categorical_name(j: usize) -> String {
        format!("c{j}")
    }

    pub fn feature_names(&self) -> Vec<String> {
        (0..self.numeric_effects.len())
            .map(Self::numeric_name)
            .chain((0..self.categorical_effects.len()).map(Self::categorical_name))
            .collect()
    }
}

/// A generated portfolio with the additive pieces of its log-mean.
#[derive(Debug, Clone)]
pub struct SynthPortfolio {
    /// Features `x*`, `c*` and `S`, with `S` also set as the sensitive column.
    pub portfolio: Portfolio,
    pub true_mu: PremiumVector,
    /// Per record: the sensitive term `beta_s * score`.
    pub s_term: Vec<f64>,
    /// Per feature name: that feature's term in the log-mean.
    pub feature_terms: Vec<(String, Vec<f64>)>,
}

struct Draw {
    exposure: f64,
    numeric: Vec<f64>,
    categorical: Vec<usize>,
    level: usize,
    s: f64,
    score: f64,
    eta: f64,
    claims: f64,
}

fn draw(cfg: &SynthConfig, i: usize) -> Draw {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);
    // (0.05, 1]: mirror a half-open [0, 0.95) draw.
    let exposure = 1.0 - rng.random_range(0.0..0.95);
    let numeric: Vec<f64> = cfg
        .numeric_effects
        .iter()
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let categorical: Vec<usize> = cfg
        .categorical_effects
        .iter()
        .map(|e| rng.random_range(0..e.len()))
        .collect();
    let (level, s, score) = match cfg.group_kind {
        GroupKind::Categorical { levels } => {
            let l = rng.random_range(0..levels);
            let score = if levels > 1 {
                2.0 * l as f64 / (levels - 1) as f64 - 1.0
            } else {
                0.0
            };
            (l, l as f64, score)
        }
        GroupKind::Continuous => {
            let s: f64 = rng.random_range(0.0..20.0);
            (0, s, (s - 10.0) / 10.0)
        }
    };
    let eta = cfg.intercept
        + numeric.iter().zip(&cfg.numeric_effects).map(|(x, b)| x * b).sum::<f64>()
        + categorical
            .iter()
            .zip(&cfg.categorical_effects)
            .map(|(&k, e)| e[k])
            .sum::<f64>()
        + cfg.beta_s * score;
    let lambda = exposure * eta.exp();
    let claims = Poisson::new(lambda).map(|d| d.sample(&mut rng)).unwrap_or(0.0);
    Draw {
        exposure,
        numeric,
        categorical,
        level,
        s,
        score,
        eta,
        claims,
    }
}

/// Generates the portfolio and its true mean; identical for identical configs.
pub fn generate(cfg: &SynthConfig) -> Result<SynthPortfolio> {
    cfg.validate()?;
    let draws: Vec<Draw> = (0..cfg.n).into_par_iter().map(|i| draw(cfg, i)).collect();
    let mut portfolio = Portfolio::from_columns(
        draws.iter().map(|d| d.claims).collect(),
        draws.iter().map(|d| d.exposure).collect(),
    )?
    .with_ids((1..=cfg.n).map(|i| i.to_string()).collect())?;
    let mut feature_terms = Vec::new();
    for (j, b) in cfg.numeric_effects.iter().enumerate() {
        let x: Vec<f64> = draws.iter().map(|d| d.numeric[j]).collect();
        feature_terms.push((SynthConfig::numeric_name(j), x.iter().map(|v| v * b).collect()));
        portfolio = portfolio.with_feature(&SynthConfig::numeric_name(j), ColumnData::Numeric(x))?;
    }
    for (j, e) in cfg.categorical_effects.iter().enumerate() {
        let k: Vec<usize> = draws.iter().map(|d| d.categorical[j]).collect();
        feature_terms.push((SynthConfig::categorical_name(j), k.iter().map(|&l| e[l]).collect()));
        let labels = k.iter().map(|l| format!("L{l:02}")).collect();
        portfolio = portfolio.with_feature(&SynthConfig::categorical_name(j), ColumnData::Categorical(labels))?;
    }
    let sensitive = match cfg.group_kind {
        GroupKind::Categorical { .. } => {
            let labels: Vec<String> = draws.iter().map(|d| format!("g{:02}", d.level)).collect();
            portfolio = portfolio.with_feature(SENSITIVE_COLUMN, ColumnData::Categorical(labels.clone()))?;
            SensitiveColumn::Categorical(Grouping::from_labels(&labels))
        }
        GroupKind::Continuous => {
            let s: Vec<f64> = draws.iter().map(|d| d.s).collect();
            portfolio = portfolio.with_feature(SENSITIVE_COLUMN, ColumnData::Numeric(s.clone()))?;
            SensitiveColumn::Continuous(s)
        }
    };
    let portfolio = portfolio.with_sensitive(sensitive)?;
    let true_mu = PremiumVector::new(draws.iter().map(|d| d.eta.exp()).collect())?;
    Ok(SynthPortfolio {
        portfolio,
        true_mu,
        s_term: draws.iter().map(|d| cfg.beta_s * d.score).collect(),
        feature_terms,
    })
}

/// `pi = a * mu_tilde^b`, with `mu_tilde` the true mean after removing the
/// dropped terms from its log.
pub fn distorted_baseline(synth: &SynthPortfolio, spec: &Distortion) -> Result<PremiumVector> {
    if !spec.power.is_finite() {
        return Err(Error::Config("distortion power must be finite".into()));
    }
    if let Some(a) = spec.scale {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::Config(format!("distortion scale must be positive, got {a}")));
        }
    }
    let mut drops: Vec<&[f64]> = Vec::new();
    for name in &spec.drop_features {
        let terms = synth
            .feature_terms
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        drops.push(&terms.1);
    }
    let tilde: Vec<f64> = (0..synth.true_mu.len())
        .map(|i| {
            let mut log_mu = synth.true_mu[i].ln();
            if spec.drop_s {
                log_mu -= synth.s_term[i];
            }
            for d in &drops {
                log_mu -= d[i];
            }
            (spec.power * log_mu).exp()
        })
        .collect();
    let a = match spec.scale {
        Some(a) => a,
        None => {
            let w = synth.portfolio.exposure();
            let target: f64 = synth.true_mu.iter().zip(w).map(|(m, w)| m * w).sum();
            let raw: f64 = tilde.iter().zip(w).map(|(m, w)| m * w).sum();
            target / raw
        }
    };
    PremiumVector::new(tilde.into_iter().map(|t| a * t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_portfolio() {
        let a = generate(&cfg(500, 3)).unwrap();
        let b = generate(&cfg(500, 3)).unwrap();
        assert_eq!(a.portfolio, b.portfolio);
        assert_eq!(a.true_mu, b.true_mu);
        let c = generate(&cfg(500, 4)).unwrap();
        assert_ne!(a.portfolio.claims(), c.portfolio.claims());
    }

    #[test]
    fn prefix_is_stable_across_n() {
        let a = generate(&cfg(100, 9)).unwrap();
        let b = generate(&cfg(300, 9)).unwrap();
        assert_eq!(a.portfolio.claims(), &b.portfolio.claims()[..100]);
    }

    #[test]
    fn exposure_range_and_schema() {
        let s = generate(&cfg(2000, 1)).unwrap();
        assert!(s.portfolio.exposure().iter().all(|w| *w > 0.05 && *w <= 1.0));
        let names: Vec<&str> = s.portfolio.schema().feature_names().collect();
        assert_eq!(names, vec!["x0", "x1", "c0", "S"]);
        assert_eq!(s.portfolio.grouping().unwrap().levels, vec!["g00", "g01", "g02", "g03"]);
    }

    #[test]
    fn weighted_mean_matches_true_mean_within_clt_bound() {
        let s = generate(&SynthConfig {
            n: 500_000,
            seed: 21,
            ..Default::default()
        })
        .unwrap();
        let w = s.portfolio.exposure();
        let sw: f64 = w.iter().sum();
        let mean_y = s.portfolio.total_claims() / sw;
        let mean_mu = s.true_mu.iter().zip(w).map(|(m, w)| m * w).sum::<f64>() / sw;
        let bound = 3.0 * s.true_mu.iter().zip(w).map(|(m, w)| w * w * m).sum::<f64>().sqrt() / sw;
        assert!((mean_y - mean_mu).abs() <= bound, "{mean_y} vs {mean_mu} (bound {bound})");
    }

    #[test]
    fn identity_distortion_returns_true_mean() {
        let s = generate(&cfg(100, 2)).unwrap();
        let pi = distorted_baseline(&s, &Distortion::default()).unwrap();
        for (a, b) in pi.iter().zip(s.true_mu.iter()) {
            assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn drop_s_removes_the_sensitive_term() {
        let s = generate(&cfg(300, 5)).unwrap();
        let pi = distorted_baseline(
            &s,
            &Distortion {
                drop_s: true,
                ..Default::default()
            },
        )
        .unwrap();
        for i in 0..300 {
            assert!((pi[i].ln() - (s.true_mu[i].ln() - s.s_term[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn auto_scale_balances_expected_totals() {
        let s = generate(&cfg(1000, 6)).unwrap();
        let pi = distorted_baseline(
            &s,
            &Distortion {
                scale: None,
                power: 0.5,
                drop_s: true,
                drop_features: vec!["x1".into()],
            },
        )
        .unwrap();
        let w = s.portfolio.exposure();
        let a: f64 = pi.iter().zip(w).map(|(p, w)| p * w).sum();
        let b: f64 = s.true_mu.iter().zip(w).map(|(p, w)| p * w).sum();
        assert!((a - b).abs() < 1e-9 * b);
        assert!(distorted_baseline(
            &s,
            &Distortion {
                drop_features: vec!["nope".into()],
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn continuous_sensitive() {
        let s = generate(&SynthConfig {
            group_kind: GroupKind::Continuous,
            ..cfg(1000, 7)
        })
        .unwrap();
        let v = s.portfolio.sensitive_values().unwrap();
        assert!(v.iter().all(|x| (0.0..20.0).contains(x)));
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&cfg(0, 1)).is_err());
        assert!(generate(&SynthConfig {
            group_kind: GroupKind::Categorical { levels: 0 },
            ..cfg(10, 1)
        })
        .is_err());
    }
}
