//! Evaluation: RMSE, credible-interval coverage, epistemic/aleatoric ratio.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-width of a 95% symmetric Gaussian interval in standard deviations.
pub const Z95: f64 = 1.96;

pub fn rmse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::domain("rmse of an empty set"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape("predictions and targets differ in length"));
    }
    let mse = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / predictions.len() as f64;
    Ok(mse.sqrt())
}

/// Fraction of components with `|target - mean| <= 1.96 sqrt(variance)`.
///
/// Inputs are flattened `points x p_y`, so for several outputs this is the
/// per-component coverage averaged over components.
pub fn coverage(means: &[f64], variances: &[f64], targets: &[f64]) -> Result<f64> {
    coverage_at(means, variances, targets, Z95)
}

pub fn coverage_at(means: &[f64], variances: &[f64], targets: &[f64], z: f64) -> Result<f64> {
    if means.is_empty() {
        return Err(Error::domain("coverage of an empty set"));
    }
    if means.len() != variances.len() || means.len() != targets.len() {
        return Err(Error::shape(
            "means, variances and targets differ in length",
        ));
    }
    if let Some(v) = variances.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::domain(format!("negative variance {v}")));
    }
    let inside = means
        .iter()
        .zip(variances)
        .zip(targets)
        .filter(|((m, v), t)| (*t - *m).abs() <= z * v.sqrt())
        .count();
    Ok(inside as f64 / means.len() as f64)
}

/// How the epistemic/aleatoric ratio is aggregated over a test set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Mean of the per-point ratios.
    #[default]
    PerPoint,
    /// Mean epistemic variance over mean aleatoric variance.
    OfMeans,
}

pub fn variance_ratio(epistemic: &[f64], aleatoric: &[f64]) -> Result<f64> {
    variance_ratio_with(epistemic, aleatoric, RatioMode::PerPoint)
}

pub fn variance_ratio_with(epistemic: &[f64], aleatoric: &[f64], mode: RatioMode) -> Result<f64> {
    if epistemic.is_empty() {
        return Err(Error::domain("ratio of an empty set"));
    }
    if epistemic.len() != aleatoric.len() {
        return Err(Error::shape("epistemic and aleatoric differ in length"));
    }
    if aleatoric.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::domain("aleatoric variance must be positive"));
    }
    let n = epistemic.len() as f64;
    Ok(match mode {
        RatioMode::PerPoint => {
            epistemic
                .iter()
                .zip(aleatoric)
                .map(|(e, a)| e / a)
                .sum::<f64>()
                / n
        }
        RatioMode::OfMeans => epistemic.iter().sum::<f64>() / aleatoric.iter().sum::<f64>(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Classical,
    Extended,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Classical => "classical",
            Variant::Extended => "extended",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classical" => Ok(Variant::Classical),
            "extended" => Ok(Variant::Extended),
            other => Err(Error::config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One row of results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub variant: Variant,
    pub ensemble_size: usize,
    pub rmse: f64,
    pub epistemic_coverage: f64,
    pub total_coverage: f64,
    pub variance_ratio: f64,
    /// Epistemic coverage of the noise-free regression function; only known
    /// for synthetic data.
    pub truth_coverage: Option<f64>,
    /// RMSE against the noise-free regression function.
    pub truth_rmse: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 7] = [
    "dataset",
    "variant",
    "L",
    "rmse",
    "epistemic_cov",
    "total_cov",
    "ratio",
];

impl EvalReport {
    /// Tab-separated row in [`REPORT_COLUMNS`] order.
    pub fn row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.dataset,
            self.variant,
            self.ensemble_size,
            self.rmse,
            self.epistemic_coverage,
            self.total_coverage,
            self.variance_ratio
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != REPORT_COLUMNS.len() {
            return Err(Error::Format(format!(
                "report row needs 7 columns: `{line}`"
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Format(format!("bad number `{}` in report row", f[i])))
        };
        Ok(Self {
            dataset: f[0].to_string(),
            variant: Variant::parse(f[1])?,
            ensemble_size: f[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad ensemble size `{}`", f[2])))?,
            rmse: num(3)?,
            epistemic_coverage: num(4)?,
            total_coverage: num(5)?,
            variance_ratio: num(6)?,
            truth_coverage: None,
            truth_rmse: None,
        })
    }
}

/// Header plus one row per report, sorted by (dataset, L, variant).
pub fn report_table(reports: &[EvalReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::domain("no reports to tabulate"));
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        a.dataset
            .cmp(&b.dataset)
            .then(a.ensemble_size.cmp(&b.ensemble_size))
            .then(a.variant.cmp(&b.variant))
    });
    let mut out = REPORT_COLUMNS.join("\t");
    out.push('\n');
    for r in sorted {
        out.push_str(&r.row());
        out.push('\n');
    }
    Ok(out)
}

/// Parse a table written by [`report_table`].
pub fn parse_report_table(text: &str) -> Result<Vec<EvalReport>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.split('\t').eq(REPORT_COLUMNS.iter().copied()) => {}
        _ => return Err(Error::Format("missing report header".into())),
    }
    lines.map(EvalReport::parse_row).collect()
}
