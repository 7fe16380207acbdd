//! Labeled feature datasets and class splits.
//!
//! Two sources: a synthetic Gaussian-mixture generator for controlled
//! experiments, and a delimited-text loader for external data. Splits are
//! always by class, never by sample; open-set evaluation needs test classes
//! the model has never seen.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, normal, shuffled_indices};

/// Feature matrix plus dense integer labels.
///
/// Labels are remapped to `[0, n_classes)` on construction (sorted by
/// original label value); the original labels are kept as metadata.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    class_index: Vec<Vec<usize>>,
    original_labels: Vec<i64>,
}

impl LabeledDataset {
    pub fn from_parts(features: Tensor, raw_labels: Vec<i64>) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if raw_labels.len() != n {
            return Err(Error::Shape(format!(
                "{} labels for {n} samples",
                raw_labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::Invalid("dataset has no samples".into()));
        }
        let mut original_labels: Vec<i64> = raw_labels.clone();
        original_labels.sort_unstable();
        original_labels.dedup();
        let dense = |raw: i64| original_labels.binary_search(&raw).unwrap();
        let labels: Vec<usize> = raw_labels.iter().map(|&r| dense(r)).collect();
        let mut class_index = vec![Vec::new(); original_labels.len()];
        for (i, &l) in labels.iter().enumerate() {
            class_index[l].push(i);
        }
        Ok(LabeledDataset { features, labels, class_index, original_labels })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.dims2().expect("features are a matrix").1
    }

    pub fn n_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sample indices belonging to dense class `c`.
    pub fn class_samples(&self, c: usize) -> &[usize] {
        &self.class_index[c]
    }

    /// The label value class `c` carried in the source data.
    pub fn original_label(&self, c: usize) -> i64 {
        self.original_labels[c]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    /// Copy the given sample rows into a fresh `[len, dim]` tensor.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor::matrix(rows.len(), d, data).expect("gather shapes agree")
    }
}

/// Parameters of the synthetic Gaussian-mixture generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    /// Class centers are drawn uniformly from `[-center_scale, center_scale]^dim`.
    pub center_scale: f64,
    /// Isotropic within-class standard deviation.
    pub within_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Invalid(format!(
                "synthetic spec needs at least 2 classes, got {}",
                self.n_classes
            )));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Invalid("samples_per_class must be at least 1".into()));
        }
        if self.within_std.is_nan() || self.within_std <= 0.0 {
            return Err(Error::Invalid(format!(
                "within_std must be positive, got {}",
                self.within_std
            )));
        }
        if self.dim == 0 {
            return Err(Error::Invalid("dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Deterministic Gaussian mixture: class `c` samples come from
/// `Normal(center_c, within_std^2 I)` with centers uniform in the box.
pub fn generate_gaussian_mixture(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = derive_rng(spec.seed, "gaussian-mixture", 0);
    let mut centers = Vec::with_capacity(spec.n_classes);
    for _ in 0..spec.n_classes {
        let c: Vec<f64> = (0..spec.dim)
            .map(|_| rng.gen::<f64>() * 2.0 * spec.center_scale - spec.center_scale)
            .collect();
        centers.push(c);
    }
    let n = spec.n_classes * spec.samples_per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &mu in center {
                data.push(normal(&mut rng, mu, spec.within_std));
            }
            labels.push(c as i64);
        }
    }
    LabeledDataset::from_parts(Tensor::matrix(n, spec.dim, data)?, labels)
}

fn parse_field(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// Load `d` real feature fields plus one trailing integer label per line.
/// A non-numeric first row is treated as a header and skipped. Row numbers
/// in errors are 1-based physical line numbers.
pub fn load_delimited(path: &Path, delimiter: char) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    let mut width: Option<usize> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let row_no = lineno + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delimiter).collect();
        if width.is_none() && rows.is_empty() {
            // Header detection: a first row with any non-numeric field.
            if fields.iter().any(|f| parse_field(f).is_none()) {
                continue;
            }
        }
        let w = match width {
            Some(w) => {
                if fields.len() != w {
                    return Err(Error::Data {
                        row: row_no,
                        message: format!("expected {w} fields, found {}", fields.len()),
                    });
                }
                w
            }
            None => {
                if fields.len() < 2 {
                    return Err(Error::Data {
                        row: row_no,
                        message: format!(
                            "need at least one feature and a label, found {} fields",
                            fields.len()
                        ),
                    });
                }
                width = Some(fields.len());
                fields.len()
            }
        };
        let mut feats = Vec::with_capacity(w - 1);
        for (fi, field) in fields[..w - 1].iter().enumerate() {
            match parse_field(field) {
                Some(v) => feats.push(v),
                None => {
                    return Err(Error::Data {
                        row: row_no,
                        message: format!("field {} is not numeric: {field:?}", fi + 1),
                    })
                }
            }
        }
        let label_field = fields[w - 1].trim();
        let label: i64 = label_field.parse().map_err(|_| Error::Data {
            row: row_no,
            message: format!("label is not an integer: {label_field:?}"),
        })?;
        if label < 0 {
            return Err(Error::Data {
                row: row_no,
                message: format!("label must be nonnegative, got {label}"),
            });
        }
        rows.push(feats);
        raw_labels.push(label);
    }

    if rows.is_empty() {
        return Err(Error::Invalid(format!("{}: no data rows", path.display())));
    }
    LabeledDataset::from_parts(Tensor::from_rows(&rows)?, raw_labels)
}

/// Write a dataset in the same delimited layout `load_delimited` reads.
/// Features carry 17 significant digits so files round-trip exactly.
pub fn write_delimited(ds: &LabeledDataset, path: &Path, delimiter: char) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..ds.n_samples() {
        let mut line = String::new();
        for v in ds.row(i) {
            line.push_str(&format!("{v:.16e}"));
            line.push(delimiter);
        }
        line.push_str(&ds.original_label(ds.labels()[i]).to_string());
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Disjoint class-index lists for meta-train, validation, and test.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle classes by seed and partition by fraction. Validation and test
/// counts are rounded; train takes the remainder. Empty val or test parts
/// must be explicitly allowed.
pub fn split_classes(
    dataset: &LabeledDataset,
    fractions: (f64, f64, f64),
    seed: u64,
    allow_empty: bool,
) -> Result<ClassSplit> {
    let (ft, fv, fs) = fractions;
    if ft < 0.0 || fv < 0.0 || fs < 0.0 {
        return Err(Error::Invalid("split fractions must be nonnegative".into()));
    }
    if ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split fractions must sum to 1, got {}",
            ft + fv + fs
        )));
    }
    let n = dataset.n_classes();
    let n_val = (fv * n as f64).round() as usize;
    let n_test = (fs * n as f64).round() as usize;
    if n_val + n_test > n {
        return Err(Error::Invalid(format!(
            "too few classes ({n}) for requested fractions"
        )));
    }
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::Invalid("split leaves no training classes".into()));
    }
    if !allow_empty && (n_val == 0 || n_test == 0) {
        return Err(Error::Invalid(format!(
            "split gives {n_val} val / {n_test} test classes; empty parts need allow_empty"
        )));
    }
    let mut rng = derive_rng(seed, "class-split", 0);
    let order = shuffled_indices(n, &mut rng);
    Ok(ClassSplit {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}
