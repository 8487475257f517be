use std::io::Write;

use serde::{Deserialize, Serialize};

/// One number in a report, addressed by dataset, method and metric name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricEntry {
    pub dataset: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub config_hash: String,
    pub seed: u64,
    pub entries: Vec<MetricEntry>,
}

impl MetricReport {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self {
            config_hash: config_hash.into(),
            seed,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, dataset: &str, method: &str, metric: &str, value: f64) {
        self.entries.push(MetricEntry {
            dataset: dataset.into(),
            method: method.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn get(&self, dataset: &str, method: &str, metric: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.dataset == dataset && e.method == method && e.metric == metric)
            .map(|e| e.value)
    }

    /// Adds `<label>/<method>/<metric>` entries averaging each (method,
    /// metric) pair, for the listed metrics, over datasets that all report it.
    pub fn add_macro_average(&mut self, datasets: &[&str], metrics: &[&str], label: &str) {
        let mut keys: Vec<(String, String)> = Vec::new();
        for e in &self.entries {
            let k = (e.method.clone(), e.metric.clone());
            if datasets.contains(&e.dataset.as_str())
                && metrics.contains(&e.metric.as_str())
                && !keys.contains(&k)
            {
                keys.push(k);
            }
        }
        for (method, metric) in keys {
            let vals: Vec<f64> = datasets
                .iter()
                .filter_map(|d| self.get(d, &method, &metric))
                .collect();
            if vals.len() == datasets.len() {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                self.push(label, &method, &metric, mean);
            }
        }
    }

    /// Pretty JSON with a trailing newline. Non-finite values become null.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "dataset,method,metric,value")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{}",
                csv_field(&e.dataset),
                csv_field(&e.method),
                csv_field(&e.metric),
                e.value
            )?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_json_agree() {
        let mut r = MetricReport::new("abc", 7);
        r.push("chain-arith", "uhead", "pr_auc", 0.5);
        r.push("schedule", "uhead", "pr_auc", 0.25);
        r.push("chain-arith", "msp", "pr_auc", 0.375);
        r.push("chain-arith", "-", "steps", 10.0);
        r.push("schedule", "-", "steps", 20.0);
        r.add_macro_average(&["chain-arith", "schedule"], &["pr_auc"], "macro");
        assert_eq!(r.get("macro", "-", "steps"), None);
        assert_eq!(r.get("macro", "uhead", "pr_auc"), Some(0.375));
        assert_eq!(r.get("macro", "msp", "pr_auc"), None);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert_eq!(csv.lines().count(), r.entries.len() + 1);
        assert!(csv.contains("schedule,uhead,pr_auc,0.25\n"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert_eq!(csv_field("a,b"), "\"a,b\"");
    }
}
