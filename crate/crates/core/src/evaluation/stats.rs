use serde::{Deserialize, Serialize};

use super::PerQueryScores;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateStats {
    pub mean: f64,
    /// Sample standard deviation (divisor n − 1); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn aggregate(values: &[f64]) -> Result<AggregateStats> {
    let n = values.len();
    if n == 0 {
        return Err(Error::Empty("values to aggregate"));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let all_equal = values.iter().all(|&v| v == values[0]);
    let std = if n == 1 || all_equal {
        0.0
    } else {
        (values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(AggregateStats { mean, std, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    /// ±∞ when the differences are constant and nonzero (serialized as
    /// `"inf"` / `"-inf"`).
    #[serde(with = "extended_f64")]
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub significant_at_5pct: bool,
    /// All paired differences are identical, so their variance is zero.
    pub degenerate: bool,
}

/// JSON has no infinities, so non-finite values travel as strings.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            f64::INFINITY => Repr::Text("inf".into()),
            f64::NEG_INFINITY => Repr::Text("-inf".into()),
            v if v.is_nan() => Repr::Text("nan".into()),
            v => Repr::Number(v),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Two-sided paired t-test on `a − b` over a shared query set.
///
/// Constant differences: all zero gives `t = 0, p = 1`; a nonzero constant
/// gives `t = ±∞, p = 0`.
pub fn paired_t_test(a: &PerQueryScores, b: &PerQueryScores) -> Result<TTestResult> {
    if a.scores.len() != b.scores.len() || a.scores.keys().zip(b.scores.keys()).any(|(x, y)| x != y) {
        return Err(Error::QuerySetMismatch);
    }
    let diffs: Vec<f64> = a.scores.values().zip(b.scores.values()).map(|(x, y)| x - y).collect();
    paired_differences_t_test(&diffs)
}

pub fn paired_differences_t_test(diffs: &[f64]) -> Result<TTestResult> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::TooFewPairs(n));
    }
    let df = n - 1;
    if diffs.iter().all(|&d| d == diffs[0]) {
        let d = diffs[0];
        let (t, p) = if d == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(d), 0.0)
        };
        return Ok(TTestResult {
            t_statistic: t,
            degrees_of_freedom: df,
            p_value: p,
            significant_at_5pct: p < 0.05,
            degenerate: true,
        });
    }
    let stats = aggregate(diffs)?;
    let t = stats.mean / (stats.std / (n as f64).sqrt());
    let p = student_t_two_sided_p(t, df as f64);
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        significant_at_5pct: p < 0.05,
        degenerate: false,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom, via
/// `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let t2 = t * t;
    let x = df / (df + t2);
    let y = t2 / (df + t2);
    reg_inc_beta(df / 2.0, 0.5, x, y).clamp(0.0, 1.0)
}

/// Natural log of Γ(x) for x > 0 (Lanczos, g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized incomplete beta `I_x(a, b)`, taking `y = 1 − x` separately so
/// callers can pass it without cancellation.
pub fn reg_inc_beta(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * y.ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b));
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, y) / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
