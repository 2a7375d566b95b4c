use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::netsim::Tick;

/// Scores for one run. Ratios with a zero denominator are NaN and
/// serialize as the string `"NaN"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "nan_as_string")]
    pub precision: f64,
    #[serde(with = "nan_as_string")]
    pub recall: f64,
    #[serde(with = "nan_as_string")]
    pub f1: f64,
    pub correct_edges: usize,
    pub discovered_edges: usize,
    pub ground_truth_edges: usize,
    /// Ticks from bootstrap until the last scored edge appeared.
    pub time_to_completion: Option<Tick>,
    pub unpaired_events: usize,
    /// Ground-truth edges that carry no traffic and so cannot be found.
    pub undiscoverable: Vec<String>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 of `found` against `truth`.
pub fn compute_metrics<T: Ord>(found: &BTreeSet<T>, truth: &BTreeSet<T>) -> MetricsReport {
    let correct = found.intersection(truth).count();
    let precision = ratio(correct, found.len());
    let recall = ratio(correct, truth.len());
    let f1 = if precision.is_nan() || recall.is_nan() || precision + recall == 0.0 {
        f64::NAN
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    MetricsReport {
        precision,
        recall,
        f1,
        correct_edges: correct,
        discovered_edges: found.len(),
        ground_truth_edges: truth.len(),
        time_to_completion: None,
        unpaired_events: 0,
        undiscoverable: Vec::new(),
    }
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// Two-decimal rendering used in tables.
pub fn fmt_ratio(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x:.2}")
    }
}

mod nan_as_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_nan() {
            s.serialize_str("NaN")
        } else {
            s.serialize_f64(*x)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(t) if t == "NaN" => Ok(f64::NAN),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"NaN\", got {t:?}"))),
        }
    }
}
