//! Labelled sample sets and their CSV form (`y,x_1,...,x_d`).

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `N` samples in `R^d`, each tagged with a scalar regression label.
///
/// Samples are stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    samples: Vec<f64>,
    labels: Vec<f64>,
    label_range: (f64, f64),
}

impl LabeledDataset {
    pub fn new(
        dim: usize,
        samples: Vec<f64>,
        labels: Vec<f64>,
        label_range: (f64, f64),
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("dataset dimension must be >= 1"));
        }
        if labels.is_empty() {
            return Err(Error::config("dataset must contain at least one sample"));
        }
        if samples.len() != labels.len() * dim {
            return Err(Error::config(format!(
                "{} sample values do not form {} rows of dimension {dim}",
                samples.len(),
                labels.len()
            )));
        }
        let (lo, hi) = label_range;
        if !(lo <= hi) {
            return Err(Error::config(format!("invalid label range [{lo}, {hi}]")));
        }
        if let Some(i) = labels.iter().position(|y| !(*y >= lo && *y <= hi)) {
            return Err(Error::config(format!(
                "label {} of row {i} lies outside [{lo}, {hi}]",
                labels[i]
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("dataset contains non-finite sample values"));
        }
        Ok(LabeledDataset {
            dim,
            samples,
            labels,
            label_range,
        })
    }

    /// Builds a dataset whose label range is the span of its labels.
    pub fn from_rows(dim: usize, samples: Vec<f64>, labels: Vec<f64>) -> Result<Self> {
        let lo = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(dim, samples, labels, (lo, hi))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label_range(&self) -> (f64, f64) {
        self.label_range
    }

    pub fn rows(&self) -> impl Iterator<Item = (f64, &[f64])> {
        self.labels
            .iter()
            .copied()
            .zip(self.samples.chunks_exact(self.dim))
    }

    /// Mean over dimensions of the per-dimension standard deviation.
    pub fn mean_std(&self) -> f64 {
        let n = self.len() as f64;
        let mut total = 0.0;
        for k in 0..self.dim {
            let mean = self.rows().map(|(_, x)| x[k]).sum::<f64>() / n;
            let var = self.rows().map(|(_, x)| (x[k] - mean).powi(2)).sum::<f64>() / n;
            total += var.sqrt();
        }
        total / self.dim as f64
    }

    /// Rows whose label lies within `half_width` of `center`.
    pub fn window(&self, center: f64, half_width: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| (self.labels[i] - center).abs() <= half_width)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(&mut file)
            .map_err(|e| Error::io(path, e))
    }

    pub fn write_csv_to<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.dim).map(|k| format!("x_{k}")));
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(self.dim + 1);
        for (y, x) in self.rows() {
            row.clear();
            row.push(y.to_string());
            row.extend(x.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()
    }

    /// Reads a `y,x_1,...,x_d` CSV. The label range is taken from the data
    /// unless `label_range` is given.
    pub fn read_csv(path: &Path, label_range: Option<(f64, f64)>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let header = r.headers().map_err(|e| Error::parse(path, e))?.clone();
        if header.len() < 2 || &header[0] != "y" {
            return Err(Error::parse(path, "expected header `y,x_1,...,x_d`"));
        }
        for (k, name) in header.iter().skip(1).enumerate() {
            if name != format!("x_{}", k + 1) {
                return Err(Error::parse(
                    path,
                    format!("unexpected column `{name}` (expected `x_{}`)", k + 1),
                ));
            }
        }
        let dim = header.len() - 1;
        let mut labels = Vec::new();
        let mut samples = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(|e| Error::parse(path, e))?;
            if record.len() != dim + 1 {
                return Err(Error::parse(
                    path,
                    format!("row {} has {} fields, expected {}", line + 1, record.len(), dim + 1),
                ));
            }
            for (k, field) in record.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::parse(path, format!("row {}: `{field}` is not a number", line + 1))
                })?;
                if k == 0 {
                    labels.push(v);
                } else {
                    samples.push(v);
                }
            }
        }
        let built = match label_range {
            Some(range) => Self::new(dim, samples, labels, range),
            None => Self::from_rows(dim, samples, labels),
        };
        built.map_err(|e| Error::parse(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(LabeledDataset::from_rows(2, vec![1.0, 2.0, 3.0], vec![0.0, 1.0]).is_err());
        assert!(LabeledDataset::from_rows(1, vec![], vec![]).is_err());
        assert!(LabeledDataset::new(1, vec![1.0], vec![2.0], (0.0, 1.0)).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = LabeledDataset::from_rows(
            2,
            vec![0.1, -2.5e-8, 3.0, 1.0 / 3.0],
            vec![0.25, 0.75],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("y,x_1,x_2\n"));
        let back = LabeledDataset::read_csv(&path, None).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn read_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "label,a\n1,2\n").unwrap();
        assert!(matches!(
            LabeledDataset::read_csv(&path, None),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            LabeledDataset::read_csv(&dir.path().join("missing.csv"), None),
            Err(Error::Io { .. })
        ));
    }
}
