//! `BQDS` labeled dataset.
//!
//! `"BQDS" | u32 sample_count | u32 feature_len | u32 class_count`, then per
//! sample `feature_len` f32 values followed by a u32 label. Little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::store::reader::Reader;

pub const DATASET_MAGIC: &[u8; 4] = b"BQDS";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_len: usize,
    pub num_classes: usize,
    /// Row-major, `len() * feature_len` values.
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn new(
        feature_len: usize,
        num_classes: usize,
        features: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Dataset> {
        let ds = Dataset {
            feature_len,
            num_classes,
            features,
            labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_len == 0 || self.num_classes == 0 {
            return Err(Error::Validation(
                "dataset needs positive feature length and class count".into(),
            ));
        }
        if self.features.len() != self.labels.len() * self.feature_len {
            return Err(Error::Corruption(format!(
                "{} feature values for {} samples of length {}",
                self.features.len(),
                self.labels.len(),
                self.feature_len
            )));
        }
        if let Some(l) = self
            .labels
            .iter()
            .find(|&&l| l as usize >= self.num_classes)
        {
            return Err(Error::Validation(format!(
                "label {l} outside [0, {})",
                self.num_classes
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("dataset has non-finite features".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        &self.features[i * self.feature_len..(i + 1) * self.feature_len]
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes).map(|k| format!("c{k}")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.features.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_len as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        for (i, label) in self.labels.iter().enumerate() {
            for v in self.sample(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&label.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::Format("bad magic, expected BQDS".into()));
        }
        let count = r.u32()? as usize;
        let feature_len = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let expected = count
            .checked_mul(feature_len.saturating_add(1))
            .and_then(|v| v.checked_mul(4));
        if expected != Some(r.remaining()) {
            return Err(Error::Corruption(format!(
                "dataset body has {} bytes, header implies {count} samples of {feature_len} features",
                r.remaining()
            )));
        }
        let mut features = Vec::with_capacity(count * feature_len);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            for _ in 0..feature_len {
                features.push(r.f32()?);
            }
            labels.push(r.u32()?);
        }
        Dataset::new(feature_len, num_classes, features, labels)
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ds.validate()?;
    std::fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let ds = Dataset::new(2, 3, vec![1.0, 2.0, 3.0, 4.0], vec![0, 2]).unwrap();
        let bytes = ds.to_bytes();
        assert_eq!(bytes.len(), 16 + 2 * 12);
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        assert!(matches!(
            Dataset::from_bytes(&bytes[..bytes.len() - 2]),
            Err(Error::Corruption(_))
        ));
        assert!(matches!(
            Dataset::new(1, 2, vec![0.0], vec![2]),
            Err(Error::Validation(_))
        ));
    }
}
