//! Versioned model files.
//!
//! A model file records everything `apply` needs: the column mapping, the
//! split settings, the optional embedded baseline GLM and the fitted
//! correction under a `mode` discriminator.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::categorical::{apply_iterative, IterativeModel, MultibalanceModel};
use crate::continuous::{apply_continuous, ContinuousMode, ContinuousModel};
use crate::data::{ColumnMapping, Portfolio, PremiumVector};
use crate::error::{Error, Result};
use crate::glm::{predict, GlmModel};
use crate::isotonic::StepFunction;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(fractions: [f64; 3], seed: u64) -> Self {
        SplitConfig { fractions, seed }
    }
}

/// The fitted correction, tagged by mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "fit", rename_all = "kebab-case")]
pub enum ModelBody {
    Glm(GlmModel),
    Bc(StepFunction),
    Mbc(MultibalanceModel),
    /// Iterative procedure with the sensitive feature ignored.
    AutoIter(IterativeModel),
    MultiIter(IterativeModel),
    LocalBc(ContinuousModel),
    LocalMbc(ContinuousModel),
    MultiIterCont(ContinuousModel),
}

impl ModelBody {
    pub fn mode_name(&self) -> &'static str {
        match self {
            ModelBody::Glm(_) => "glm",
            ModelBody::Bc(_) => "bc",
            ModelBody::Mbc(_) => "mbc",
            ModelBody::AutoIter(_) => "auto-iter",
            ModelBody::MultiIter(_) => "multi-iter",
            ModelBody::LocalBc(_) => "local-bc",
            ModelBody::LocalMbc(_) => "local-mbc",
            ModelBody::MultiIterCont(_) => "multi-iter-cont",
        }
    }

    pub fn from_continuous(model: ContinuousModel) -> Self {
        match model.mode {
            ContinuousMode::LocalBc => ModelBody::LocalBc(model),
            ContinuousMode::LocalMbc => ModelBody::LocalMbc(model),
            ContinuousMode::MultiIterCont => ModelBody::MultiIterCont(model),
        }
    }

    pub fn converged(&self) -> bool {
        match self {
            ModelBody::Glm(m) => m.converged,
            ModelBody::Bc(_) | ModelBody::Mbc(_) => true,
            ModelBody::AutoIter(m) | ModelBody::MultiIter(m) => m.converged,
            ModelBody::LocalBc(m) | ModelBody::LocalMbc(m) | ModelBody::MultiIterCont(m) => m.converged,
        }
    }

    /// Per-iteration stopping criterion, for the iterative modes.
    pub fn trace(&self) -> Option<&[f64]> {
        match self {
            ModelBody::AutoIter(m) | ModelBody::MultiIter(m) => Some(&m.trace),
            ModelBody::MultiIterCont(m) => Some(&m.trace),
            _ => None,
        }
    }

    /// Whether applying the model reads the sensitive column.
    pub fn uses_sensitive(&self) -> bool {
        matches!(
            self,
            ModelBody::Mbc(_) | ModelBody::MultiIter(_) | ModelBody::LocalMbc(_) | ModelBody::MultiIterCont(_)
        )
    }

    /// Applies the correction to `premium`; the GLM ignores `premium` and
    /// predicts from the portfolio's features. Also returns the number of
    /// records that needed a fallback (unseen level or clamped evaluation).
    pub fn apply(&self, portfolio: &Portfolio, premium: &PremiumVector) -> Result<(PremiumVector, usize)> {
        premium.check_len(portfolio.len())?;
        match self {
            ModelBody::Glm(m) => predict(m, portfolio),
            ModelBody::Bc(f) => {
                let out = premium.iter().map(|&p| f.eval(p)).collect();
                Ok((PremiumVector::floored(out, f64::MIN_POSITIVE), 0))
            }
            ModelBody::Mbc(m) => Ok(m.apply(premium, &labels(portfolio)?)),
            ModelBody::AutoIter(m) => {
                let constant = vec![m.levels.first().cloned().unwrap_or_default(); portfolio.len()];
                apply_iterative(m, premium, &constant)
            }
            ModelBody::MultiIter(m) => apply_iterative(m, premium, &labels(portfolio)?),
            ModelBody::LocalBc(m) => apply_continuous(m, premium, &[]),
            ModelBody::LocalMbc(m) | ModelBody::MultiIterCont(m) => {
                apply_continuous(m, premium, portfolio.sensitive_values()?)
            }
        }
    }
}

fn labels(portfolio: &Portfolio) -> Result<Vec<String>> {
    let g = portfolio.grouping()?;
    Ok(g.codes.iter().map(|&c| g.levels[c].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub mapping: ColumnMapping,
    pub split: SplitConfig,
    /// Baseline GLM whose predictions are the input premium, when the input
    /// premium is not a CSV column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<GlmModel>,
    pub model: ModelBody,
}

impl ModelFile {
    pub fn new(mapping: ColumnMapping, split: SplitConfig, baseline: Option<GlmModel>, model: ModelBody) -> Self {
        ModelFile {
            format_version: FORMAT_VERSION,
            mapping,
            split,
            baseline,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses a model file, rejecting versions newer than this build reads.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Validation("model file has no format_version".into()))?;
        if found > FORMAT_VERSION as u64 {
            return Err(Error::FormatVersion {
                found: found as u32,
                supported: FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Validation(format!("malformed model file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Input premium for `portfolio`: the embedded baseline's predictions,
    /// else the mapped premium column.
    pub fn input_premium(&self, portfolio: &Portfolio) -> Result<PremiumVector> {
        match &self.baseline {
            Some(glm) => Ok(predict(glm, portfolio)?.0),
            None => portfolio.baseline_premium(),
        }
    }
}
