//! Metrics report: JSON document and plain-text table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// One published row: R@1, R@10, R@50, BLEU, Dist-2, Dist-3 in percent.
/// These numbers come from full-scale training and are for orientation only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub system: &'static str,
    pub recall_1: f64,
    pub recall_10: f64,
    pub recall_50: f64,
    pub bleu: Option<f64>,
    pub dist_2: f64,
    pub dist_3: f64,
}

const fn row(system: &'static str, r: [f64; 3], bleu: Option<f64>, d2: f64, d3: f64) -> ReferenceRow {
    ReferenceRow { system, recall_1: r[0], recall_10: r[1], recall_50: r[2], bleu, dist_2: d2, dist_3: d3 }
}

pub const REFERENCE_ROWS: [ReferenceRow; 6] = [
    row("Redial", [2.4, 14.0, 32.0], Some(21.9), 14.0, 32.0),
    row("KBRD", [3.1, 15.0, 33.6], Some(22.8), 15.0, 33.6),
    row("KGSF", [3.9, 18.3, 37.8], Some(18.6), 18.3, 37.8),
    row("CRWalker", [4.0, 18.7, 37.6], Some(28.0), 19.2, 40.8),
    row("RevCore", [6.1, 23.6, 45.4], None, 42.4, 55.8),
    row("EGCR", [3.8, 17.8, 36.1], None, 19.1, 40.4),
];

/// All values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub recall: BTreeMap<usize, f64>,
    pub bleu: f64,
    pub dist_2: f64,
    pub dist_3: f64,
    pub n_eval_turns: u64,
}

impl MetricsReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    /// Pretty JSON with a trailing newline; byte-stable for equal reports.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Published rows followed by this run, all scaled to percent.
    pub fn to_table(&self, label: &str) -> String {
        let mut cols: Vec<usize> = vec![1, 10, 50];
        for &k in self.recall.keys() {
            if !cols.contains(&k) {
                cols.push(k);
            }
        }
        cols.sort_unstable();
        let mut header = vec!["System".to_string()];
        header.extend(cols.iter().map(|k| format!("R@{k}")));
        header.extend(["BLEU", "Dist2", "Dist3"].map(String::from));

        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        let mut rows: Vec<Vec<String>> = REFERENCE_ROWS
            .iter()
            .map(|r| {
                let mut cells = vec![r.system.to_string()];
                cells.extend(cols.iter().map(|&k| {
                    pct(match k {
                        1 => Some(r.recall_1),
                        10 => Some(r.recall_10),
                        50 => Some(r.recall_50),
                        _ => None,
                    })
                }));
                cells.extend([pct(r.bleu), pct(Some(r.dist_2)), pct(Some(r.dist_3))]);
                cells
            })
            .collect();
        let mut mine = vec![label.to_string()];
        mine.extend(cols.iter().map(|k| pct(self.recall_at(*k).map(|v| v * 100.0))));
        mine.extend([self.bleu, self.dist_2, self.dist_3].map(|v| pct(Some(v * 100.0))));
        rows.push(mine);

        let widths: Vec<usize> = (0..header.len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
                if i == 0 {
                    let _ = write!(s, "{cell:<w$}");
                } else {
                    let _ = write!(s, "  {cell:>w$}");
                }
            }
            s.push('\n');
            s
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)) + "\n";
        let mut out = line(&header);
        out.push_str(&rule);
        for (i, r) in rows.iter().enumerate() {
            if i == REFERENCE_ROWS.len() {
                out.push_str(&rule);
            }
            out.push_str(&line(r));
        }
        let _ = writeln!(out, "\nevaluated turns: {}", self.n_eval_turns);
        out
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.recall.len() + 4))?;
        for (k, v) in &self.recall {
            map.serialize_entry(&format!("recall_{k}"), v)?;
        }
        map.serialize_entry("bleu", &self.bleu)?;
        map.serialize_entry("dist_2", &self.dist_2)?;
        map.serialize_entry("dist_3", &self.dist_3)?;
        map.serialize_entry("n_eval_turns", &self.n_eval_turns)?;
        map.end()
    }
}

impl<'de> Deserialize<'de> for MetricsReport {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = BTreeMap::<String, serde_json::Number>::deserialize(deserializer)?;
        let real = |key: &str| {
            raw.get(key).and_then(serde_json::Number::as_f64).ok_or_else(|| D::Error::missing_field_owned(key))
        };
        let mut recall = BTreeMap::new();
        for (key, v) in &raw {
            if let Some(k) = key.strip_prefix("recall_") {
                let k: usize = k.parse().map_err(|_| D::Error::custom(format!("bad recall key {key}")))?;
                recall.insert(k, v.as_f64().ok_or_else(|| D::Error::custom("recall value is not a number"))?);
            }
        }
        let n_eval_turns = raw
            .get("n_eval_turns")
            .and_then(serde_json::Number::as_u64)
            .ok_or_else(|| D::Error::missing_field_owned("n_eval_turns"))?;
        Ok(Self { recall, bleu: real("bleu")?, dist_2: real("dist_2")?, dist_3: real("dist_3")?, n_eval_turns })
    }
}

trait MissingOwned {
    fn missing_field_owned(key: &str) -> Self;
}

impl<E: serde::de::Error> MissingOwned for E {
    fn missing_field_owned(key: &str) -> Self {
        E::custom(format!("missing or non-numeric field `{key}`"))
    }
}
