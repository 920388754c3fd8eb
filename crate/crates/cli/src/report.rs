//! Report rows and their CSV / JSON renderings.

use std::fmt::Write as _;

use serde::Serialize;

/// CSV column order.
pub const COLUMNS: [&str; 13] = [
    "quantity",
    "label",
    "t",
    "x",
    "value",
    "gamma_total",
    "gamma_b",
    "gamma_s0",
    "gamma_sigma",
    "gamma_r",
    "bias",
    "std_error",
    "reference",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Row {
    pub quantity: String,
    pub label: String,
    pub t: Option<f64>,
    pub x: Option<f64>,
    pub value: Option<f64>,
    pub gamma_total: Option<f64>,
    pub gamma_b: Option<f64>,
    pub gamma_s0: Option<f64>,
    pub gamma_sigma: Option<f64>,
    pub gamma_r: Option<f64>,
    pub bias: Option<f64>,
    pub std_error: Option<f64>,
    pub reference: Option<f64>,
}

impl Row {
    pub fn new(quantity: impl Into<String>, label: impl Into<String>) -> Self {
        Self { quantity: quantity.into(), label: label.into(), ..Self::default() }
    }

    /// Sets `gamma_total` to the sum of the per-source entries present.
    pub fn total(mut self) -> Self {
        let parts = [self.gamma_b, self.gamma_s0, self.gamma_sigma, self.gamma_r];
        if parts.iter().any(Option::is_some) {
            self.gamma_total = Some(parts.iter().flatten().sum());
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub command: String,
    pub seed: u64,
    pub version: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub metadata: Metadata,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Json,
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

impl Report {
    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Csv => self.to_csv(),
            Format::Json => self.to_json(),
        }
    }

    pub fn to_csv(&self) -> String {
        let m = &self.metadata;
        let mut out = String::new();
        for (k, v) in [("command", &m.command), ("seed", &m.seed.to_string()), ("version", &m.version), ("config_hash", &m.config_hash)] {
            let _ = writeln!(out, "# {k}={v}");
        }
        out.push_str(&COLUMNS.join(","));
        out.push('\n');
        for r in &self.rows {
            let cells = [
                field(&r.quantity),
                field(&r.label),
                num(r.t),
                num(r.x),
                num(r.value),
                num(r.gamma_total),
                num(r.gamma_b),
                num(r.gamma_s0),
                num(r.gamma_sigma),
                num(r.gamma_r),
                num(r.bias),
                num(r.std_error),
                num(r.reference),
            ];
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Floats go through the same 17-significant-digit formatting as the
    /// CSV so both renderings carry identical numbers.
    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                let mut o = serde_json::Map::new();
                o.insert("quantity".into(), r.quantity.clone().into());
                o.insert("label".into(), r.label.clone().into());
                for (k, v) in [
                    ("t", r.t),
                    ("x", r.x),
                    ("value", r.value),
                    ("gamma_total", r.gamma_total),
                    ("gamma_b", r.gamma_b),
                    ("gamma_s0", r.gamma_s0),
                    ("gamma_sigma", r.gamma_sigma),
                    ("gamma_r", r.gamma_r),
                    ("bias", r.bias),
                    ("std_error", r.std_error),
                    ("reference", r.reference),
                ] {
                    let val = match v {
                        Some(x) => serde_json::Value::String(format!("{x:.16e}")),
                        None => serde_json::Value::Null,
                    };
                    o.insert(k.into(), val);
                }
                serde_json::Value::Object(o)
            })
            .collect();
        let doc = serde_json::json!({ "metadata": self.metadata, "rows": rows });
        let mut s = serde_json::to_string_pretty(&doc).expect("report serialises");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> Report {
        Report {
            metadata: Metadata { command: "price".into(), seed: 7, version: "0.1.0".into(), config_hash: "ab".into() },
            rows: vec![Row { t: Some(0.5), value: Some(1.0 / 3.0), ..Row::new("value", "a,b") }],
        }
    }

    #[test]
    fn csv_layout() {
        let csv = report().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "# command=price");
        assert_eq!(lines[4], COLUMNS.join(","));
        assert_eq!(lines[5], "value,\"a,b\",5.0000000000000000e-1,,3.3333333333333331e-1,,,,,,,,");
        assert_eq!(lines[5].matches(',').count(), 13);
    }

    #[test]
    fn totals_and_json() {
        let r = Row { gamma_b: Some(1.0), gamma_r: Some(2.0), ..Row::new("v", "") }.total();
        assert_eq!(r.gamma_total, Some(3.0));
        assert_eq!(Row::new("v", "").total().gamma_total, None);
        let j: serde_json::Value = serde_json::from_str(&report().to_json()).unwrap();
        assert_eq!(j["rows"][0]["value"], "3.3333333333333331e-1");
        assert_eq!(j["metadata"]["seed"], 7);
    }
}
