use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    /// Time span, values, sampling interval and trend.
    #[default]
    Full,
    /// Domain description only.
    Domain,
    /// Numeric description only: time span, values and interval.
    Timestamp,
    /// Fixed forecasting instruction only.
    Instruction,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 4] = [
        PromptVariant::Full,
        PromptVariant::Domain,
        PromptVariant::Timestamp,
        PromptVariant::Instruction,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptVariant::Full => "full",
            PromptVariant::Domain => "domain",
            PromptVariant::Timestamp => "timestamp",
            PromptVariant::Instruction => "instruction",
        }
    }
}

impl FromStr for PromptVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown prompt variant {s:?}"))
    }
}

/// Scalar summarizing the direction of a window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendRule {
    /// `x_n - x_1`
    #[default]
    LastMinusFirst,
    /// Least-squares slope times `n - 1`.
    FittedSlope,
}

impl TrendRule {
    pub fn eval(&self, values: &[f64]) -> f64 {
        let n = values.len();
        if n < 2 {
            return 0.0;
        }
        match self {
            TrendRule::LastMinusFirst => values[n - 1] - values[0],
            TrendRule::FittedSlope => {
                let tm = (n - 1) as f64 / 2.0;
                let vm = values.iter().sum::<f64>() / n as f64;
                let (mut num, mut den) = (0.0, 0.0);
                for (t, v) in values.iter().enumerate() {
                    let dt = t as f64 - tm;
                    num += dt * (v - vm);
                    den += dt * dt;
                }
                num / den * (n - 1) as f64
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplateSpec {
    pub variant: PromptVariant,
    /// Sampling interval as prose, e.g. "15 minutes".
    pub frequency: String,
    /// Decimal places for every rendered number.
    pub precision: usize,
    pub domain: String,
    pub trend: TrendRule,
}

impl Default for PromptTemplateSpec {
    fn default() -> Self {
        Self {
            variant: PromptVariant::Full,
            frequency: "1 hour".into(),
            precision: 3,
            domain: "electricity transformer".into(),
            trend: TrendRule::LastMinusFirst,
        }
    }
}

pub const INSTRUCTION_TEXT: &str = "Forecast the next values of this variable from its recent history.";

fn fmt_num(v: f64, precision: usize) -> String {
    let s = format!("{v:.precision$}");
    // "-0.000" and "0.000" must not differ
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Renders one variable's prompt. A pure function of its arguments.
pub fn render_prompt(values: &[f64], first_ts: &str, last_ts: &str, spec: &PromptTemplateSpec) -> String {
    let p = spec.precision;
    let values_clause = || {
        let mut s = String::new();
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                s.push_str(", ");
            }
            s.push_str(&fmt_num(*v, p));
        }
        s
    };
    let mut out = String::new();
    match spec.variant {
        PromptVariant::Full => {
            let trend = fmt_num(spec.trend.eval(values), p);
            write!(
                out,
                "From {first_ts} to {last_ts}, the values were {} every {}. The total trend value was {trend}.",
                values_clause(),
                spec.frequency
            )
            .unwrap();
        }
        PromptVariant::Timestamp => {
            write!(
                out,
                "From {first_ts} to {last_ts}, the values were {} every {}.",
                values_clause(),
                spec.frequency
            )
            .unwrap();
        }
        PromptVariant::Domain => {
            write!(out, "This variable comes from the {} domain.", spec.domain).unwrap();
        }
        PromptVariant::Instruction => out.push_str(INSTRUCTION_TEXT),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(f: &str) -> PromptTemplateSpec {
        PromptTemplateSpec {
            frequency: f.into(),
            ..Default::default()
        }
    }

    #[test]
    fn full_template_wording() {
        let text = render_prompt(&[1.0, 2.0], "2016-07-01 00:00", "2016-07-01 00:15", &spec("15 minutes"));
        assert_eq!(
            text,
            "From 2016-07-01 00:00 to 2016-07-01 00:15, the values were 1.000, 2.000 every 15 minutes. The total trend value was 1.000."
        );
        assert!(text.contains("The total trend value was 1.000"));
    }

    #[test]
    fn constant_window_has_zero_trend() {
        let text = render_prompt(&[-0.25; 5], "0", "4", &spec("1 day"));
        assert!(text.ends_with("The total trend value was 0.000."), "{text}");
    }

    #[test]
    fn negative_zero_is_normalized() {
        assert_eq!(fmt_num(-0.0001, 3), "0.000");
        assert_eq!(fmt_num(-0.0006, 3), "-0.001");
    }

    #[test]
    fn fitted_slope_of_line() {
        let v: Vec<f64> = (0..10).map(|t| 3.0 + 0.5 * t as f64).collect();
        assert!((TrendRule::FittedSlope.eval(&v) - 4.5).abs() < 1e-12);
    }

    #[test]
    fn variants_pairwise_distinct() {
        let values = [0.1, -0.4, 0.9];
        let texts: Vec<String> = PromptVariant::ALL
            .iter()
            .map(|&variant| {
                render_prompt(
                    &values,
                    "a",
                    "b",
                    &PromptTemplateSpec {
                        variant,
                        ..spec("1 hour")
                    },
                )
            })
            .collect();
        for i in 0..texts.len() {
            for j in i + 1..texts.len() {
                assert_ne!(texts[i], texts[j]);
            }
        }
    }
}
