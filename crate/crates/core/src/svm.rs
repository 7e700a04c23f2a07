//! One-vs-rest linear SVM trained by dual coordinate descent on the
//! L2-regularized hinge loss. The bias is an extra weight on a constant-1
//! feature, so it is regularized together with `w`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed;

const MAGIC: &[u8; 4] = b"RTPS";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    /// Stop once the largest projected-gradient violation in a pass falls below this...
    pub tolerance: f64,
    /// ...and the duality gap is at most this fraction of the primal objective.
    pub gap_tolerance: f64,
    pub max_epochs: usize,
    /// Seeds the coordinate order of every binary problem.
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            tolerance: 1e-4,
            gap_tolerance: 1e-4,
            max_epochs: 1000,
            seed: 0,
        }
    }
}

/// Result of one binary problem, weights in f64 with the bias last.
#[derive(Clone, Debug)]
pub struct BinarySolution {
    pub weights: Vec<f64>,
    pub epochs: usize,
    pub converged: bool,
}

/// Solves `min ½‖w̄‖² + C Σ max(0, 1 − y_i w̄·x̄_i)` with `x̄ = [x, 1]` and `y_i = ±1`.
pub fn train_binary(xs: &[&[f32]], ys: &[f64], params: &SvmParams) -> BinarySolution {
    let d = xs.first().map_or(0, |x| x.len());
    let mut w = vec![0.0f64; d + 1];
    let mut alpha = vec![0.0f64; xs.len()];
    let qii: Vec<f64> = xs.iter().map(|x| x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() + 1.0).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = seed::rng(params.seed);
    let c = params.c;

    for epoch in 1..=params.max_epochs {
        order.shuffle(&mut rng);
        let mut max_violation = 0.0f64;
        for &i in &order {
            let x = xs[i];
            let y = ys[i];
            let margin = x.iter().zip(&w).map(|(&v, &wj)| v as f64 * wj).sum::<f64>() + w[d];
            let g = y * margin - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == c {
                g.max(0.0)
            } else {
                g
            };
            max_violation = max_violation.max(pg.abs());
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, c);
                let delta = (alpha[i] - old) * y;
                for (wj, &v) in w.iter_mut().zip(x) {
                    *wj += delta * v as f64;
                }
                w[d] += delta;
            }
        }
        if max_violation < params.tolerance && duality_gap(xs, ys, &w, &alpha, c) <= params.gap_tolerance * primal_objective(xs, ys, &w, c) {
            return BinarySolution {
                weights: w,
                epochs: epoch,
                converged: true,
            };
        }
    }
    log::warn!("svm: no convergence after {} epochs", params.max_epochs);
    BinarySolution {
        weights: w,
        epochs: params.max_epochs,
        converged: false,
    }
}

/// `P(w) - D(alpha)` with `D = sum(alpha) - ½‖w‖²`; an upper bound on `P(w) - P*`.
fn duality_gap(xs: &[&[f32]], ys: &[f64], w: &[f64], alpha: &[f64], c: f64) -> f64 {
    let dual = alpha.iter().sum::<f64>() - 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    primal_objective(xs, ys, w, c) - dual
}

/// Primal objective of a binary problem for weights `w` (bias last).
pub fn primal_objective(xs: &[&[f32]], ys: &[f64], w: &[f64], c: f64) -> f64 {
    let d = w.len() - 1;
    let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let loss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, &y)| {
            let m = x.iter().zip(w).map(|(&v, &wj)| v as f64 * wj).sum::<f64>() + w[d];
            (1.0 - y * m).max(0.0)
        })
        .sum();
    reg + c * loss
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    /// Class ids in increasing order; row `k` of `weights` belongs to `class_ids[k]`.
    pub class_ids: Vec<usize>,
    pub weights: Vec<Vec<f32>>,
    pub biases: Vec<f32>,
    pub c: f64,
}

impl SvmModel {
    /// Trains one binary machine per class (class versus rest).
    pub fn train(features: &[&[f32]], labels: &[usize], params: &SvmParams) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::dim("svm labels", "n", features.len(), labels.len()));
        }
        let d = features.first().map_or(0, |f| f.len());
        if let Some(f) = features.iter().find(|f| f.len() != d) {
            return Err(Error::dim("svm feature", "len", d, f.len()));
        }
        if features.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("svm features contain non-finite values".into()));
        }
        let mut class_ids = labels.to_vec();
        class_ids.sort_unstable();
        class_ids.dedup();
        if class_ids.len() < 2 {
            return Err(Error::Domain(format!("svm needs at least two classes, got {}", class_ids.len())));
        }
        if !(params.c > 0.0) {
            return Err(Error::Config(format!("svm C must be positive, got {}", params.c)));
        }

        let solutions: Vec<BinarySolution> = class_ids
            .par_iter()
            .map(|&k| {
                let ys: Vec<f64> = labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
                let p = SvmParams {
                    seed: seed::derive(params.seed, k as u64),
                    ..params.clone()
                };
                train_binary(features, &ys, &p)
            })
            .collect();
        Ok(SvmModel {
            class_ids,
            weights: solutions.iter().map(|s| s.weights[..d].iter().map(|&v| v as f32).collect()).collect(),
            biases: solutions.iter().map(|s| s.weights[d] as f32).collect(),
            c: params.c,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    /// Decision values `w_k·x + b_k` per class.
    pub fn scores(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim("svm input", "len", self.dim(), x.len()));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, &b)| w.iter().zip(x).map(|(&a, &v)| a as f64 * v as f64).sum::<f64>() + b as f64)
            .collect())
    }

    /// Class with the largest decision value; ties go to the lowest class id.
    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        let s = self.scores(x)?;
        let best = s.iter().enumerate().fold(0, |best, (k, &v)| if v > s[best] { k } else { best });
        Ok(self.class_ids[best])
    }

    pub fn predict_batch(&self, xs: &[&[f32]]) -> Result<Vec<usize>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    /// Header `RTPS`, version, classes, dim, C (f64); then per class: id (u32),
    /// bias and `dim` weights (f32), all little-endian.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.class_ids.len() as u32).to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        out.write_all(&self.c.to_le_bytes())?;
        for ((id, w), b) in self.class_ids.iter().zip(&self.weights).zip(&self.biases) {
            out.write_all(&(*id as u32).to_le_bytes())?;
            out.write_all(&b.to_le_bytes())?;
            for v in w {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Format(format!("truncated svm model: {e}"));
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4).map_err(bad)?;
        if &b4 != MAGIC {
            return Err(Error::Format(format!("bad svm model magic {b4:?}")));
        }
        let mut u32_at = |input: &mut R| -> Result<u32> {
            input.read_exact(&mut b4).map_err(bad)?;
            Ok(u32::from_le_bytes(b4))
        };
        let version = u32_at(&mut input)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported svm model version {version}")));
        }
        let k = u32_at(&mut input)? as usize;
        let d = u32_at(&mut input)? as usize;
        let mut b8 = [0u8; 8];
        input.read_exact(&mut b8).map_err(bad)?;
        let c = f64::from_le_bytes(b8);
        let mut model = SvmModel {
            class_ids: Vec::with_capacity(k),
            weights: Vec::with_capacity(k),
            biases: Vec::with_capacity(k),
            c,
        };
        let f32_at = |input: &mut R| -> Result<f32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b).map_err(bad)?;
            Ok(f32::from_le_bytes(b))
        };
        for _ in 0..k {
            model.class_ids.push(u32_at(&mut input)? as usize);
            model.biases.push(f32_at(&mut input)?);
            model.weights.push((0..d).map(|_| f32_at(&mut input)).collect::<Result<_>>()?);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        SvmModel::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_problem_is_symmetric() {
        let xs: Vec<&[f32]> = vec![&[1.0, 0.0], &[-1.0, 0.0]];
        let s = train_binary(&xs, &[1.0, -1.0], &SvmParams::default());
        assert!(s.converged);
        // the objective is symmetric in b, and w = (1, 0), b = 0 puts both points on the margin
        assert!((s.weights[0] - 1.0).abs() < 1e-4);
        assert!(s.weights[1].abs() < 1e-9);
        assert!(s.weights[2].abs() < 1e-4);
        let model = SvmModel::train(&xs, &[0, 1], &SvmParams::default()).unwrap();
        assert_eq!(model.predict(&[0.3, 5.0]).unwrap(), 0);
        assert_eq!(model.predict(&[-0.3, -5.0]).unwrap(), 1);
    }

    #[test]
    fn single_class_is_domain_error() {
        let xs: Vec<&[f32]> = vec![&[1.0], &[2.0]];
        assert!(matches!(SvmModel::train(&xs, &[3, 3], &SvmParams::default()), Err(Error::Domain(_))));
    }

    #[test]
    fn zero_feature_uses_biases_with_low_id_tie_break() {
        let m = SvmModel {
            class_ids: vec![2, 5, 7],
            weights: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            biases: vec![0.1, 0.3, 0.3],
            c: 1.0,
        };
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap(), 5);
        assert!(matches!(m.predict(&[0.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn model_file_round_trip() {
        let m = SvmModel {
            class_ids: vec![0, 1],
            weights: vec![vec![1.5, -0.25], vec![0.0, 3.0]],
            biases: vec![0.1, -0.3],
            c: 1.0,
        };
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(SvmModel::read_from(bytes.as_slice()).unwrap(), m);
        bytes[1] = b'X';
        assert!(matches!(SvmModel::read_from(bytes.as_slice()), Err(Error::Format(_))));
    }
}
