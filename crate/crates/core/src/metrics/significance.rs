use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use super::MetricError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestName {
    Mcnemar,
    PairedT,
    WelchT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub statistic: f64,
    pub p_value: f64,
    pub test_name: TestName,
}

/// McNemar's test without continuity correction on the discordant counts.
///
/// `n_ab` counts items where A is better, `n_ba` where B is better. The
/// statistic is chi-square with one degree of freedom.
pub fn mcnemar_test(n_ab: u64, n_ba: u64) -> Result<SignificanceResult, MetricError> {
    if n_ab + n_ba == 0 {
        return Err(MetricError::NoDiscordantPairs);
    }
    let diff = n_ab as f64 - n_ba as f64;
    let statistic = diff * diff / (n_ab + n_ba) as f64;
    // Survival function of chi-square(1): P(Z^2 > x) = erfc(sqrt(x / 2)).
    let p_value = erfc((statistic / 2.0).sqrt());
    Ok(SignificanceResult { statistic, p_value, test_name: TestName::Mcnemar })
}

/// Two-sided p-value of Student's t with `dof` degrees of freedom.
pub fn student_t_two_sided(t: f64, dof: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(dof / 2.0, 0.5, dof / (dof + t * t))
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Two-sided paired t-test on per-item scores.
pub fn paired_t_test(scores_a: &[f64], scores_b: &[f64]) -> Result<SignificanceResult, MetricError> {
    if scores_a.len() != scores_b.len() {
        return Err(MetricError::LengthMismatch(scores_a.len(), scores_b.len()));
    }
    if scores_a.len() < 2 {
        return Err(MetricError::TooFewSamples(scores_a.len()));
    }
    let d: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let var = sample_variance(&d);
    if d.iter().all(|&x| x == 0.0) {
        return Ok(SignificanceResult { statistic: 0.0, p_value: 1.0, test_name: TestName::PairedT });
    }
    if var == 0.0 {
        return Err(MetricError::DegenerateVariance);
    }
    let n = d.len() as f64;
    let statistic = mean(&d) / (var / n).sqrt();
    Ok(SignificanceResult { statistic, p_value: student_t_two_sided(statistic, n - 1.0), test_name: TestName::PairedT })
}

/// Two-sided Welch t-test for independent samples.
pub fn welch_t_test(scores_a: &[f64], scores_b: &[f64]) -> Result<SignificanceResult, MetricError> {
    let (na, nb) = (scores_a.len(), scores_b.len());
    if na < 2 || nb < 2 {
        return Err(MetricError::TooFewSamples(na.min(nb)));
    }
    let (va, vb) = (sample_variance(scores_a) / na as f64, sample_variance(scores_b) / nb as f64);
    if va + vb == 0.0 {
        return Err(MetricError::DegenerateVariance);
    }
    let statistic = (mean(scores_a) - mean(scores_b)) / (va + vb).sqrt();
    let dof = (va + vb).powi(2) / (va * va / (na - 1) as f64 + vb * vb / (nb - 1) as f64);
    Ok(SignificanceResult { statistic, p_value: student_t_two_sided(statistic, dof), test_name: TestName::WelchT })
}
