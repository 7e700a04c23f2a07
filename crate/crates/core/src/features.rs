//! Pooled network representations as plain vectors, and their file formats.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    /// Index where the second pathway's entries begin.
    pub boundary: usize,
    pub label: Option<usize>,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Scales to unit Euclidean norm. A zero vector is returned unchanged with a warning.
pub fn l2_normalize(values: &[f32]) -> Vec<f32> {
    let norm = values.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if norm == 0.0 {
        log::warn!("l2_normalize: zero vector left unchanged");
        return values.to_vec();
    }
    values.iter().map(|&v| (v as f64 / norm) as f32).collect()
}

/// Representations of every image in `data`, computed in batches of `batch`.
pub fn extract_features(net: &mut Network<f32>, data: &Dataset, batch: usize) -> Result<Vec<FeatureVector>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in indices.chunks(batch.max(1)) {
        let (images, labels) = data.batch(chunk);
        let rep = net.extract_representation(&images)?;
        for (n, label) in labels.into_iter().enumerate() {
            out.push(FeatureVector {
                values: rep.features.sample(n).to_vec(),
                boundary: rep.boundary,
                label: Some(label),
            });
        }
    }
    Ok(out)
}

fn check_uniform(features: &[FeatureVector]) -> Result<usize> {
    let d = features.first().map_or(0, FeatureVector::len);
    if let Some(f) = features.iter().find(|f| f.len() != d) {
        return Err(Error::dim("feature vector", "len", d, f.len()));
    }
    Ok(d)
}

/// CSV with a `# boundary=<k>` line, a `label,f0,..` header and one row per
/// vector. Unknown labels are written as empty fields.
pub fn features_to_csv(features: &[FeatureVector]) -> Result<String> {
    let d = check_uniform(features)?;
    let boundary = features.first().map_or(d, |f| f.boundary);
    let mut s = format!("# boundary={boundary}\nlabel");
    for j in 0..d {
        write!(s, ",f{j}").expect("write to String");
    }
    s.push('\n');
    for f in features {
        if let Some(l) = f.label {
            write!(s, "{l}").expect("write to String");
        }
        for v in &f.values {
            write!(s, ",{v}").expect("write to String");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn features_from_csv(text: &str) -> Result<Vec<FeatureVector>> {
    let mut boundary = None;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
    while let Some(l) = lines.next_if(|l| l.starts_with('#')) {
        if let Some(b) = l.trim_start_matches('#').trim().strip_prefix("boundary=") {
            boundary = Some(b.trim().parse().map_err(|_| Error::Format(format!("bad boundary line '{l}'")))?);
        }
    }
    let header = lines.next().ok_or_else(|| Error::Format("feature CSV has no header".into()))?;
    let d = header.split(',').count() - 1;
    if !header.starts_with("label") {
        return Err(Error::Format("feature CSV header must start with 'label'".into()));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(',');
        let label = match fields.next().unwrap_or("").trim() {
            "" => None,
            l => Some(l.parse().map_err(|_| Error::Format(format!("row {}: bad label '{l}'", i + 1)))?),
        };
        let values: Vec<f32> = fields
            .map(|v| v.trim().parse().map_err(|_| Error::Format(format!("row {}: bad value '{v}'", i + 1))))
            .collect::<Result<_>>()?;
        if values.len() != d {
            return Err(Error::dim(format!("feature CSV row {}", i + 1), "len", d, values.len()));
        }
        out.push(FeatureVector {
            values,
            boundary: boundary.unwrap_or(d),
            label,
        });
    }
    Ok(out)
}

/// Features as an `(N, D, 1, 1)` tensor (labels are not stored).
pub fn features_to_tensor(features: &[FeatureVector]) -> Result<Tensor<f32>> {
    let d = check_uniform(features)?;
    let data = features.iter().flat_map(|f| f.values.iter().copied()).collect();
    Tensor::from_vec(Shape::new(features.len(), d, 1, 1), data)
}

pub fn save_features(path: &Path, features: &[FeatureVector]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "rtpt") {
        return features_to_tensor(features)?.save_fixture(path);
    }
    fs::write(path, features_to_csv(features)?).map_err(|e| Error::io(path, e))
}

/// Reads CSV features, or an RTPT tensor (unlabeled) when the extension is `.rtpt`.
pub fn load_features(path: &Path) -> Result<Vec<FeatureVector>> {
    if path.extension().is_some_and(|e| e == "rtpt") {
        let t = Tensor::load_fixture(path)?;
        let d = t.shape().sample_len();
        return Ok((0..t.shape().n)
            .map(|n| FeatureVector {
                values: t.sample(n).to_vec(),
                boundary: d,
                label: None,
            })
            .collect());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    features_from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_vector_is_fixed() {
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0; 4]), vec![0.0; 4]);
    }

    proptest! {
        #[test]
        fn normalized_norm_is_one(v in prop::collection::vec(-100.0f32..100.0, 1..64)) {
            prop_assume!(v.iter().any(|&x| x.abs() > 1e-3));
            let n: f64 = l2_normalize(&v).iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn csv_round_trip(rows in prop::collection::vec((prop::option::of(0usize..9), prop::collection::vec(-1e3f32..1e3, 3)), 1..10)) {
            let feats: Vec<FeatureVector> = rows
                .into_iter()
                .map(|(label, values)| FeatureVector { values, boundary: 2, label })
                .collect();
            let back = features_from_csv(&features_to_csv(&feats).unwrap()).unwrap();
            prop_assert_eq!(back, feats);
        }
    }

    #[test]
    fn ragged_features_are_rejected() {
        let a = FeatureVector {
            values: vec![1.0],
            boundary: 1,
            label: None,
        };
        let b = FeatureVector {
            values: vec![1.0, 2.0],
            ..a.clone()
        };
        assert!(matches!(features_to_csv(&[a, b]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.rtpt");
        let feats = vec![
            FeatureVector {
                values: vec![1.0, 2.0],
                boundary: 2,
                label: None,
            },
            FeatureVector {
                values: vec![3.0, 4.5],
                boundary: 2,
                label: None,
            },
        ];
        save_features(&path, &feats).unwrap();
        assert_eq!(load_features(&path).unwrap(), feats);
    }
}
