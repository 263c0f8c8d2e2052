//! Two-branch embedding network: a small MLP encoder producing unit-norm
//! main embeddings `x`, and a proxy head projecting them to compact
//! unit-norm vectors `z` used only for mini-batch mining during training.
//!
//! Both branches are differentiated by hand; `backward` accumulates into
//! the `ParamTensor` gradients and `sgd_step` consumes them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, ParamTensor, DEGENERATE_NORM};
use crate::sampler::PlaceId;

const CHECKPOINT_MAGIC: &[u8; 8] = b"GPMCKPT\x01";

/// Architecture of the encoder and proxy head.
///
/// `proxy_dim` must not exceed `embed_dim`; the proxy space is the compact
/// one. `seed` drives parameter initialization.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub proxy_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("proxy_dim", self.proxy_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.proxy_dim > self.embed_dim {
            return Err(Error::Config(format!(
                "proxy_dim {} must not exceed embed_dim {}",
                self.proxy_dim, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Two-layer tanh MLP with L2-normalized output rows.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub w1: ParamTensor,
    pub b1: ParamTensor,
    pub w2: ParamTensor,
    pub b2: ParamTensor,
}

/// Linear projection to the proxy space, followed by L2 normalization.
///
/// With `detach_input` set, losses on the proxy branch contribute no
/// gradient to the encoder; the head itself still trains.
#[derive(Clone, Debug)]
pub struct ProxyHead {
    pub w: ParamTensor,
    pub b: ParamTensor,
    pub detach_input: bool,
}

/// Encoder plus proxy head, the unit of training and checkpointing.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: EncoderConfig,
    pub encoder: Encoder,
    pub head: ProxyHead,
}

/// Activations retained from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    features: Matrix,
    hidden: Matrix,
    x_prenorm_norms: Vec<f64>,
    /// Unit-norm main embeddings, one row per input.
    pub x: Matrix,
    z_prenorm_norms: Vec<f64>,
    /// Unit-norm proxy projections, one row per input.
    pub z: Matrix,
}

/// A forward-pass result annotated with place labels, laid out as
/// `M` groups of exactly `K` consecutive rows per place.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    pub x: Matrix,
    pub z: Matrix,
    pub labels: Vec<PlaceId>,
    pub images_per_place: usize,
}

impl EmbeddingBatch {
    pub fn new(x: Matrix, z: Matrix, labels: Vec<PlaceId>, images_per_place: usize) -> Result<Self> {
        let b = labels.len();
        let k = images_per_place;
        if x.rows() != b || z.rows() != b {
            return Err(Error::Shape(format!(
                "batch of {} labels with x rows {} and z rows {}",
                b,
                x.rows(),
                z.rows()
            )));
        }
        if k == 0 || !b.is_multiple_of(k) {
            return Err(Error::Validation(format!(
                "batch size {b} is not a multiple of images_per_place {k}"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for g in 0..b / k {
            let label = labels[g * k];
            if labels[g * k..(g + 1) * k].iter().any(|l| *l != label) {
                return Err(Error::Validation(format!(
                    "group {g} mixes place labels"
                )));
            }
            if !seen.insert(label) {
                return Err(Error::Validation(format!(
                    "place {label} appears in more than one group"
                )));
            }
        }
        Ok(EmbeddingBatch {
            x,
            z,
            labels,
            images_per_place,
        })
    }

    pub fn n_places(&self) -> usize {
        self.labels.len() / self.images_per_place
    }

    /// Label of the g-th place group.
    pub fn group_label(&self, g: usize) -> PlaceId {
        self.labels[g * self.images_per_place]
    }
}

fn init_weight(rng: &mut StdRng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Normalizes every row to unit length, returning the pre-normalization
/// norms needed by the backward pass.
fn normalize_rows(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let row = out.row_mut(i);
        let n = dot(row, row).sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite(format!(
                "row {i} has non-finite values before normalization; training diverged"
            )));
        }
        if n < DEGENERATE_NORM {
            return Err(Error::Degenerate(format!(
                "row {i} has norm {n:.3e} before normalization"
            )));
        }
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Backward through per-row L2 normalization: given `g = dL/dy` where
/// `y = u / ||u||`, returns `dL/du = (g - (g . y) y) / ||u||`.
fn normalize_rows_backward(grad_out: &Matrix, normalized: &Matrix, norms: &[f64]) -> Matrix {
    let mut out = grad_out.clone();
    for (i, &n) in norms.iter().enumerate() {
        let y = normalized.row(i);
        let coeff = dot(out.row(i), y);
        let row = out.row_mut(i);
        for (r, yi) in row.iter_mut().zip(y) {
            *r = (*r - coeff * yi) / n;
        }
    }
    out
}

impl Model {
    /// Initializes all weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// from the config seed; biases start at zero.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = StdRng::seed_from_u64(config.seed);
        let encoder = Encoder {
            w1: ParamTensor::new(init_weight(
                &mut rng,
                config.input_dim,
                config.hidden_dim,
                config.input_dim,
            )),
            b1: ParamTensor::new(Matrix::zeros(1, config.hidden_dim)),
            w2: ParamTensor::new(init_weight(
                &mut rng,
                config.hidden_dim,
                config.embed_dim,
                config.hidden_dim,
            )),
            b2: ParamTensor::new(Matrix::zeros(1, config.embed_dim)),
        };
        let head = ProxyHead {
            w: ParamTensor::new(init_weight(
                &mut rng,
                config.embed_dim,
                config.proxy_dim,
                config.embed_dim,
            )),
            b: ParamTensor::new(Matrix::zeros(1, config.proxy_dim)),
            detach_input: false,
        };
        Ok(Model {
            config,
            encoder,
            head,
        })
    }

    /// Main-branch forward only: features to unit-norm embeddings.
    pub fn encode_forward(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_encoder(features)?.0)
    }

    /// Proxy-branch forward only: unit-norm embeddings to unit-norm
    /// compact projections.
    pub fn proxy_forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_head(x)?.0)
    }

    /// Full forward through both branches, retaining activations.
    pub fn forward(&self, features: &Matrix) -> Result<Forward> {
        let (x, hidden, x_norms) = self.forward_encoder(features)?;
        let (z, z_norms) = self.forward_head(&x)?;
        Ok(Forward {
            features: features.clone(),
            hidden,
            x_prenorm_norms: x_norms,
            x,
            z_prenorm_norms: z_norms,
            z,
        })
    }

    fn forward_encoder(&self, features: &Matrix) -> Result<(Matrix, Matrix, Vec<f64>)> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "features have dim {}, encoder expects {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        let hidden = features
            .matmul(&self.encoder.w1.value)?
            .add_row_bias(&self.encoder.b1.value)?
            .map(f64::tanh);
        let pre = hidden
            .matmul(&self.encoder.w2.value)?
            .add_row_bias(&self.encoder.b2.value)?;
        let (x, norms) = normalize_rows(&pre)?;
        Ok((x, hidden, norms))
    }

    fn forward_head(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if x.cols() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "embeddings have dim {}, head expects {}",
                x.cols(),
                self.config.embed_dim
            )));
        }
        let pre = x
            .matmul(&self.head.w.value)?
            .add_row_bias(&self.head.b.value)?;
        normalize_rows(&pre)
    }

    /// Accumulates parameter gradients for losses applied to both branches.
    ///
    /// `grad_x` is dL/dx and `grad_z` is dL/dz. With `detach_input` set on
    /// the head, the proxy branch contributes exactly zero gradient to the
    /// encoder parameters.
    pub fn backward(&mut self, fwd: &Forward, grad_x: &Matrix, grad_z: &Matrix) -> Result<()> {
        if grad_x.shape() != fwd.x.shape() || grad_z.shape() != fwd.z.shape() {
            return Err(Error::Shape(format!(
                "grad_x {:?} vs x {:?}, grad_z {:?} vs z {:?}",
                grad_x.shape(),
                fwd.x.shape(),
                grad_z.shape(),
                fwd.z.shape()
            )));
        }

        // proxy branch, back through its output normalization
        let grad_z_pre = normalize_rows_backward(grad_z, &fwd.z, &fwd.z_prenorm_norms);
        self.head
            .w
            .grad
            .scaled_add_assign(&fwd.x.transpose().matmul(&grad_z_pre)?, 1.0)?;
        self.head
            .b
            .grad
            .scaled_add_assign(&grad_z_pre.col_sums(), 1.0)?;

        // gradient reaching x: the external one, plus the head's unless detached
        let grad_x_total = if self.head.detach_input {
            grad_x.clone()
        } else {
            grad_x.add(&grad_z_pre.matmul(&self.head.w.value.transpose())?)?
        };

        // encoder, back through output normalization
        let grad_x_pre = normalize_rows_backward(&grad_x_total, &fwd.x, &fwd.x_prenorm_norms);
        self.encoder
            .w2
            .grad
            .scaled_add_assign(&fwd.hidden.transpose().matmul(&grad_x_pre)?, 1.0)?;
        self.encoder
            .b2
            .grad
            .scaled_add_assign(&grad_x_pre.col_sums(), 1.0)?;

        let grad_hidden = grad_x_pre.matmul(&self.encoder.w2.value.transpose())?;
        // tanh'(a) = 1 - tanh(a)^2, expressed through the stored activation
        let grad_pre_act = grad_hidden.hadamard(&fwd.hidden.map(|h| 1.0 - h * h))?;
        self.encoder
            .w1
            .grad
            .scaled_add_assign(&fwd.features.transpose().matmul(&grad_pre_act)?, 1.0)?;
        self.encoder
            .b1
            .grad
            .scaled_add_assign(&grad_pre_act.col_sums(), 1.0)?;
        Ok(())
    }

    /// All trainable tensors, in checkpoint order.
    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![
            &mut self.encoder.w1,
            &mut self.encoder.b1,
            &mut self.encoder.w2,
            &mut self.encoder.b2,
            &mut self.head.w,
            &mut self.head.b,
        ]
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        vec![
            &self.encoder.w1,
            &self.encoder.b1,
            &self.encoder.w2,
            &self.encoder.b2,
            &self.head.w,
            &self.head.b,
        ]
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Writes a versioned binary checkpoint; round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            detach_input: self.head.detach_input,
        })
        .map_err(|e| Error::Validation(format!("encoding checkpoint header: {e}")))?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for p in self.params() {
            write_matrix(&mut w, &p.value)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 8];
        r.read_exact_at(&mut magic, "checkpoint magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                location: "offset 0".into(),
                msg: "not a model checkpoint (bad magic)".into(),
            });
        }
        let header_len = r.read_u32("header length")? as usize;
        let mut header = vec![0u8; header_len];
        r.read_exact_at(&mut header, "checkpoint header")?;
        let header: CheckpointHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Parse {
                location: "header".into(),
                msg: e.to_string(),
            })?;
        header.config.validate()?;

        let mut model = Model::init(header.config)?;
        model.head.detach_input = header.detach_input;
        for p in model.params_mut() {
            let m = read_matrix(&mut r)?;
            if m.shape() != p.value.shape() {
                return Err(Error::Parse {
                    location: format!("offset {}", r.offset),
                    msg: format!(
                        "tensor shape {:?} does not match config shape {:?}",
                        m.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = m;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: EncoderConfig,
    detach_input: bool,
}

struct OffsetReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn new(inner: R) -> Self {
        OffsetReader { inner, offset: 0 }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            location: format!("offset {}", self.offset),
            msg: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(&(m.rows() as u32).to_le_bytes())?;
    w.write_all(&(m.cols() as u32).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut OffsetReader<R>) -> Result<Matrix> {
    let rows = r.read_u32("matrix rows")? as usize;
    let cols = r.read_u32("matrix cols")? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b = [0u8; 8];
    for _ in 0..rows * cols {
        r.read_exact_at(&mut b, "matrix payload")?;
        data.push(f64::from_le_bytes(b));
    }
    Matrix::from_vec(rows, cols, data)
}
