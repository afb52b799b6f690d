//! Linear value probes and nullspace projection of decoder embeddings.

use crate::error::{ArithError, Result};
use crate::model::{read_tensor_file, write_tensor_file, CheckpointHeader, Model, Overwrite, TensorFile, EVAL_CHUNK};
use crate::rng::RngState;
use crate::tasks::{Sample, Token};
use crate::tensor::{Scalar, Tensor};
use crate::train::sequence_accuracy;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::path::Path;
use std::sync::Arc;

/// Relative ridge added to the normal equations.
pub const RIDGE: f64 = 1e-6;
pub const BASELINE_FLOOR: f64 = 0.99;
const CONTROL_STREAM: u64 = 0xC0_47_01;

/// Row-major `n × d` design matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(ArithError::Shape {
                op: "embeddings",
                left: vec![rows, dim],
                right: vec![data.len()],
            });
        }
        Ok(Self { rows, dim, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn project(&self, p: &ProjectionOp) -> Result<Self> {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.dim) {
            p.apply(row)?;
        }
        Ok(Self { data, ..*self })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Root mean squared error on the fitting rows.
    pub rmse: f64,
}

impl LinearProbe {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.bias + x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>()
    }
}

/// Least-squares probe through ridge-stabilized normal equations.
pub fn fit_probe(x: &Embeddings, y: &[f64]) -> Result<LinearProbe> {
    fit_probe_with_ridge(x, y, RIDGE)
}

/// As [`fit_probe`] with an explicit relative ridge; `0` gives the plain
/// normal equations.
pub fn fit_probe_with_ridge(x: &Embeddings, y: &[f64], ridge: f64) -> Result<LinearProbe> {
    let (n, d) = (x.rows, x.dim);
    if n < 2 || y.len() != n {
        return Err(ArithError::Precondition(format!("probe needs >= 2 rows matching targets, got {n} rows and {} targets", y.len())));
    }
    if x.data.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ArithError::Numeric("non-finite probe input"));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.data[i * d + j]).sum::<f64>() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut xc = x.data.clone();
    for row in xc.chunks_mut(d) {
        row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let mut gram = vec![0.0; d * d];
    f64::gemm(d, n, d, 1.0, (&xc, 1, d as isize), (&xc, d as isize, 1), 0.0, &mut gram);
    let mut rhs = vec![0.0; d];
    f64::gemm(d, n, 1, 1.0, (&xc, 1, d as isize), (&yc, 1, 1), 0.0, &mut rhs);
    let trace: f64 = (0..d).map(|i| gram[i * d + i]).sum();
    let lambda = ridge * trace / d as f64;
    let mut a = DMatrix::from_row_slice(d, d, &gram);
    for i in 0..d {
        a[(i, i)] += lambda;
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| ArithError::Conditioning(format!("normal equations not positive definite (d = {d}, ridge = {lambda:e})")))?;
    let w = chol.solve(&DVector::from_vec(rhs));
    if w.iter().any(|v| !v.is_finite()) {
        return Err(ArithError::Conditioning("probe solve produced non-finite weights".into()));
    }
    let weights: Vec<f64> = w.iter().copied().collect();
    let bias = y_mean - mean.iter().zip(&weights).map(|(m, w)| m * w).sum::<f64>();
    let mut probe = LinearProbe { weights, bias, rmse: 0.0 };
    let sse: f64 = (0..n).map(|i| (probe.predict(x.row(i)) - y[i]).powi(2)).sum();
    probe.rmse = (sse / n as f64).sqrt();
    Ok(probe)
}

/// Projector onto the orthogonal complement of a set of unit directions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionOp {
    pub dim: usize,
    /// Orthonormal removed directions, in removal order.
    pub directions: Vec<Vec<f64>>,
}

impl ProjectionOp {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            directions: Vec::new(),
        }
    }

    /// Composes with `I − uuᵀ` for `u` the part of `w` orthogonal to the
    /// directions already removed.
    pub fn remove(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim {
            return Err(ArithError::Shape {
                op: "nullspace_projector",
                left: vec![self.dim],
                right: vec![w.len()],
            });
        }
        let scale = norm(w);
        if scale == 0.0 || !scale.is_finite() {
            return Err(ArithError::Contract("cannot remove a zero direction".into()));
        }
        let mut u = w.to_vec();
        // two passes of Gram-Schmidt keep u orthogonal in floating point
        for _ in 0..2 {
            for d in &self.directions {
                let c = dot(d, &u);
                u.iter_mut().zip(d).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&u);
        if n <= 1e-12 * scale {
            return Err(ArithError::Contract("direction already removed".into()));
        }
        u.iter_mut().for_each(|v| *v /= n);
        self.directions.push(u);
        Ok(())
    }

    pub fn apply(&self, v: &mut [f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(ArithError::Shape {
                op: "projection",
                left: vec![self.dim],
                right: vec![v.len()],
            });
        }
        for u in &self.directions {
            let c = dot(u, v);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        Ok(())
    }

    /// Applies the projector to a leading slice of a vector, as if the
    /// missing tail were zero. Used on partial decoder sequences.
    pub fn apply_prefix<T: Scalar>(&self, v: &mut [T]) {
        let len = v.len().min(self.dim);
        let x: Vec<f64> = v[..len].iter().map(|a| a.f64()).collect();
        let mut out = x.clone();
        for u in &self.directions {
            let c = dot(&u[..len], &x);
            out.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
        }
        v[..len].iter_mut().zip(out).for_each(|(a, b)| *a = T::of(b));
    }

    /// Dense `dim × dim` matrix, row-major.
    pub fn matrix(&self) -> Vec<f64> {
        let d = self.dim;
        let mut p = vec![0.0; d * d];
        for i in 0..d {
            p[i * d + i] = 1.0;
        }
        for u in &self.directions {
            for i in 0..d {
                for j in 0..d {
                    p[i * d + j] -= u[i] * u[j];
                }
            }
        }
        p
    }

    pub fn to_tensor_file(&self, meta: serde_json::Value) -> Result<TensorFile> {
        let k = self.directions.len();
        let data: Vec<f32> = self.directions.iter().flatten().map(|&v| v as f32).collect();
        Ok(TensorFile {
            header: CheckpointHeader {
                format_version: crate::model::CHECKPOINT_VERSION,
                config: None,
                seed: 0,
                epoch: 0,
                meta,
            },
            tensors: vec![("directions".to_string(), Tensor::new(vec![k, self.dim], data)?)],
        })
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        let file = self.to_tensor_file(meta)?;
        write_tensor_file(std::io::BufWriter::new(std::fs::File::create(path)?), &file)
    }

    /// Reads directions back; they are re-orthonormalized after the f32 round trip.
    pub fn load(path: &Path) -> Result<Self> {
        let file = read_tensor_file(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let (_, t) = file
            .tensors
            .iter()
            .find(|(n, _)| n == "directions")
            .ok_or_else(|| ArithError::Format("no directions tensor".into()))?;
        let [k, dim] = t.shape() else {
            return Err(ArithError::Format(format!("directions must be 2-D, got {:?}", t.shape())));
        };
        let mut p = ProjectionOp::identity(*dim);
        for r in 0..*k {
            let row: Vec<f64> = t.data()[r * dim..(r + 1) * dim].iter().map(|&v| v as f64).collect();
            p.remove(&row)?;
        }
        Ok(p)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Rank-1 projector removing `w`.
pub fn nullspace_projector(w: &[f64]) -> Result<ProjectionOp> {
    let mut p = ProjectionOp::identity(w.len());
    p.remove(w)?;
    Ok(p)
}

/// `k` random orthonormal directions in `dim` dimensions.
pub fn random_projector(dim: usize, k: usize, rng: &mut RngState) -> Result<ProjectionOp> {
    let mut p = ProjectionOp::identity(dim);
    while p.directions.len() < k {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        p.remove(&v)?;
    }
    Ok(p)
}

/// Teacher-forced decoder-layer outputs for every sample, one row each.
pub fn capture_decoder_layer<T: Scalar>(model: &Model<T>, samples: &[&Sample], layer: usize) -> Result<Embeddings> {
    let count = model.config().decoder_layers;
    if layer == 0 || layer > count {
        return Err(ArithError::LayerRange { index: layer, count });
    }
    let mut data = Vec::new();
    let mut dim = 0;
    for chunk in samples.chunks(EVAL_CHUNK) {
        let prompts: Vec<&[Token]> = chunk.iter().map(|s| s.prompt.as_slice()).collect();
        let targets: Vec<&[Token]> = chunk.iter().map(|s| s.completion.as_slice()).collect();
        let acts = model
            .teacher_forced_batch(&prompts, &targets, true)?
            .activations
            .unwrap_or_default();
        for i in 0..chunk.len() {
            let v = acts.dec_vector(layer, i)?;
            dim = v.len();
            data.extend(v.iter().map(|x| x.f64()));
        }
    }
    Embeddings::new(samples.len(), dim, data)
}

#[derive(Clone, Debug, Serialize)]
pub struct RemovalHistory {
    pub projector: ProjectionOp,
    /// Probe fitted at each iteration, before its direction is removed.
    pub probes: Vec<LinearProbe>,
    /// Fresh probe on the fully projected embeddings.
    pub residual: LinearProbe,
}

impl RemovalHistory {
    pub fn rmse(&self) -> Vec<f64> {
        self.probes.iter().map(|p| p.rmse).collect()
    }
}

/// Fit, remove, refit: `iterations` rounds on fixed embeddings.
pub fn iterative_removal(x: &Embeddings, y: &[f64], iterations: usize) -> Result<RemovalHistory> {
    let mut projector = ProjectionOp::identity(x.dim);
    let mut probes = Vec::with_capacity(iterations);
    let mut current = x.clone();
    for _ in 0..iterations {
        let probe = fit_probe(&current, y)?;
        projector.remove(&probe.weights)?;
        probes.push(probe);
        current = x.project(&projector)?;
    }
    let residual = fit_probe(&current, y)?;
    Ok(RemovalHistory {
        projector,
        probes,
        residual,
    })
}

/// Model whose decoder layer `layer` output passes through `p` at every step.
pub fn with_projection<T: Scalar>(model: &Model<T>, layer: usize, p: &ProjectionOp) -> Result<Model<T>> {
    let p = Arc::new(p.clone());
    let hook: Overwrite<T> = Arc::new(move |v: &mut [T]| p.apply_prefix(v));
    model.with_overwrite(layer, hook)
}

#[derive(Clone, Debug, Serialize)]
pub struct AmnesicReport {
    pub layer: usize,
    pub iterations: usize,
    pub embedding_dim: usize,
    pub fit_rows: usize,
    pub eval_rows: usize,
    pub probe_rmse: Vec<f64>,
    pub residual_rmse: f64,
    pub baseline_accuracy: f64,
    pub projected_accuracy: f64,
    pub control_accuracy: f64,
    pub control_seed: u64,
    /// How decoding applies the projector.
    pub application: &'static str,
    pub fit_rows_source: &'static str,
}

#[derive(Clone, Debug)]
pub struct AmnesicOutcome {
    pub report: AmnesicReport,
    pub projector: ProjectionOp,
    pub control: ProjectionOp,
}

/// Probe on `fit` rows, remove value directions, and measure greedy
/// accuracy on `eval` with the projector and with a random control.
pub fn run_amnesic<T: Scalar>(
    model: &Model<T>,
    fit: &[&Sample],
    eval: &[&Sample],
    layer: usize,
    iterations: usize,
    seed: u64,
) -> Result<AmnesicOutcome> {
    let baseline = sequence_accuracy(model, eval)?;
    if baseline < BASELINE_FLOOR {
        return Err(ArithError::Precondition(format!(
            "baseline sequence accuracy {baseline:.4} is below {BASELINE_FLOOR}"
        )));
    }
    let x = capture_decoder_layer(model, fit, layer)?;
    let y: Vec<f64> = fit.iter().map(|s| s.result as f64).collect();
    let history = iterative_removal(&x, &y, iterations)?;
    let projected = sequence_accuracy(&with_projection(model, layer, &history.projector)?, eval)?;
    let control = random_projector(x.dim, iterations, &mut RngState::new(seed).fork(CONTROL_STREAM))?;
    let control_accuracy = sequence_accuracy(&with_projection(model, layer, &control)?, eval)?;
    Ok(AmnesicOutcome {
        report: AmnesicReport {
            layer,
            iterations,
            embedding_dim: x.dim,
            fit_rows: x.rows,
            eval_rows: eval.len(),
            probe_rmse: history.rmse(),
            residual_rmse: history.residual.rmse,
            baseline_accuracy: baseline,
            projected_accuracy: projected,
            control_accuracy,
            control_seed: seed,
            application: "every decoding step, prefix of each removed direction",
            fit_rows_source: "teacher-forced decoder outputs over the supplied fit samples",
        },
        projector: history.projector,
        control,
    })
}
