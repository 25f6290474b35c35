use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: f64,
    pub df_within: f64,
}

/// One-way analysis of variance across `groups`.
///
/// The p value is the upper tail of the F distribution,
/// `I_{d2 / (d2 + d1 F)}(d2 / 2, d1 / 2)`.
pub fn anova_oneway(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 {
        return Err(invalid("ANOVA needs at least two groups"));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(invalid("every ANOVA group needs at least two values"));
    }
    if groups.iter().flatten().any(|x| !x.is_finite()) {
        return Err(invalid("ANOVA input must be finite"));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let k = groups.len();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    if ss_within == 0.0 {
        return Err(Error::UndefinedStatistic("every group has zero within-group variance".into()));
    }
    let d1 = (k - 1) as f64;
    let d2 = (n - k) as f64;
    let f = (ss_between / d1) / (ss_within / d2);
    let p = if f == 0.0 { 1.0 } else { beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(f64::MIN_POSITIVE, 1.0) };
    Ok(AnovaResult { f, p, df_between: d1, df_within: d2 })
}
