use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        ConfusionMatrix {
            class_names,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Validation(format!(
                "confusion matrix must be {k}x{k} to match its class names"
            )));
        }
        Ok(ConfusionMatrix {
            class_names,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Samples per true class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// Header row `label,<names...>`, one row per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for n in &self.class_names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(name);
            for c in row {
                write!(out, ",{c}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`ConfusionMatrix::to_csv`] output. Lines starting with `#` are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty confusion CSV".into()))?;
        let names: Vec<String> = header
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        if names.is_empty() {
            return Err(Error::Format(
                "confusion CSV header lists no classes".into(),
            ));
        }
        let mut counts = Vec::with_capacity(names.len());
        for (i, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let row_name = cells.next().unwrap_or_default().trim();
            if names.get(i).map(String::as_str) != Some(row_name) {
                return Err(Error::Format(format!(
                    "confusion CSV row {} is '{row_name}', expected '{}'",
                    i + 1,
                    names.get(i).map_or("<none>", String::as_str)
                )));
            }
            let row = cells
                .map(|c| c.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("confusion CSV row {}: {e}", i + 1)))?;
            counts.push(row);
        }
        ConfusionMatrix::from_counts(names, counts)
    }
}
