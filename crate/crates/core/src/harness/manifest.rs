use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::image::{decode_pnm, resize_bilinear, to_tensor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled image list read from a `path,class_name` CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against (the manifest's directory).
    pub root: PathBuf,
    pub records: Vec<(PathBuf, String)>,
    /// Sorted class names mapped to 0..N-1.
    pub class_index: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn from_records(root: PathBuf, records: Vec<(PathBuf, String)>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Format("manifest has no records".into()));
        }
        let mut names: Vec<&String> = records.iter().map(|(_, c)| c).collect();
        names.sort();
        names.dedup();
        let class_index = names.into_iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Ok(DatasetManifest {
            root,
            records,
            class_index,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if headers.len() != 2 || &headers[0] != "path" || &headers[1] != "class_name" {
            return Err(Error::Format(format!("{}: header must be 'path,class_name'", path.display())));
        }
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            records.push((PathBuf::from(&row[0]), row[1].to_string()));
        }
        DatasetManifest::from_records(root, records)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fail = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["path", "class_name"]).map_err(fail)?;
        for (p, c) in &self.records {
            w.write_record([p.to_string_lossy().as_ref(), c.as_str()]).map_err(fail)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn class_names(&self) -> Vec<String> {
        self.class_index.keys().cloned().collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|(_, c)| self.class_index[c]).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// How images become network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    /// (height, width) after resizing.
    pub size: (usize, usize),
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl LoadOptions {
    pub fn new(size: usize) -> Self {
        LoadOptions {
            size: (size, size),
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

/// Reads the manifest and decodes, resizes and normalizes every image.
pub fn load_dataset(manifest_path: &Path, opts: &LoadOptions) -> Result<(DatasetManifest, Dataset)> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let data = load_images(&manifest, opts)?;
    Ok((manifest, data))
}

pub fn load_images(manifest: &DatasetManifest, opts: &LoadOptions) -> Result<Dataset> {
    let (h, w) = opts.size;
    let images: Vec<Tensor<f32>> = manifest
        .records
        .par_iter()
        .map(|(p, _)| {
            let path = manifest.resolve(p);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let img = decode_pnm(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            Ok(to_tensor(&resize_bilinear(&img, h, w), opts.mean, opts.std))
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    Dataset::new(Tensor::stack(&refs)?, manifest.labels(), manifest.class_names())
}
