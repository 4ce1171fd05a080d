//! Named parameter storage shared by the model, its gradients and the
//! optimizer state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Vector,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vector,
    /// Key matrix K (d_ffn × d_model); row j is the key of neuron j.
    pub ffn_key: Matrix,
    /// Value matrix V (d_ffn × d_model); row j is the value of neuron j.
    pub ffn_value: Matrix,
}

/// Every trainable tensor of the toy transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vector,
}

/// One of the projection matrices inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatrixKind {
    Query,
    Key,
    Value,
    Output,
    FfnKey,
    FfnValue,
}

impl MatrixKind {
    pub const ATTENTION: [MatrixKind; 4] = [Self::Query, Self::Key, Self::Value, Self::Output];
    pub const FFN: [MatrixKind; 2] = [Self::FfnKey, Self::FfnValue];
    pub const ALL: [MatrixKind; 6] = [
        Self::Query,
        Self::Key,
        Self::Value,
        Self::Output,
        Self::FfnKey,
        Self::FfnValue,
    ];

    fn suffix(self) -> &'static str {
        match self {
            Self::Query => "attn.wq",
            Self::Key => "attn.wk",
            Self::Value => "attn.wv",
            Self::Output => "attn.wo",
            Self::FfnKey => "ffn.key",
            Self::FfnValue => "ffn.value",
        }
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, Self::FfnKey | Self::FfnValue)
    }
}

/// Identifies a block matrix by layer and kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MatrixId {
    pub layer: usize,
    pub kind: MatrixKind,
}

impl MatrixId {
    pub fn new(layer: usize, kind: MatrixKind) -> Self {
        Self { layer, kind }
    }

    pub fn name(&self) -> String {
        format!("layers.{}.{}", self.layer, self.kind.suffix())
    }

    pub fn parse(name: &str) -> Option<Self> {
        let rest = name.strip_prefix("layers.")?;
        let (layer, suffix) = rest.split_once('.')?;
        let layer = layer.parse().ok()?;
        let kind = MatrixKind::ATTENTION
            .into_iter()
            .chain(MatrixKind::FFN)
            .find(|k| k.suffix() == suffix)?;
        Some(Self { layer, kind })
    }
}

/// Metadata for one named tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: (usize, usize),
}

impl LayerParams {
    pub fn matrix(&self, kind: MatrixKind) -> &Matrix {
        match kind {
            MatrixKind::Query => &self.wq,
            MatrixKind::Key => &self.wk,
            MatrixKind::Value => &self.wv,
            MatrixKind::Output => &self.wo,
            MatrixKind::FfnKey => &self.ffn_key,
            MatrixKind::FfnValue => &self.ffn_value,
        }
    }

    pub fn matrix_mut(&mut self, kind: MatrixKind) -> &mut Matrix {
        match kind {
            MatrixKind::Query => &mut self.wq,
            MatrixKind::Key => &mut self.wk,
            MatrixKind::Value => &mut self.wv,
            MatrixKind::Output => &mut self.wo,
            MatrixKind::FfnKey => &mut self.ffn_key,
            MatrixKind::FfnValue => &mut self.ffn_value,
        }
    }
}

fn mat(name: String, m: &Matrix) -> (TensorInfo, &[f64]) {
    let shape = m.shape();
    (TensorInfo { name, shape }, m.as_slice())
}

fn vec(name: String, v: &Vector) -> (TensorInfo, &[f64]) {
    let shape = (1, v.dim());
    (TensorInfo { name, shape }, v.as_slice())
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = LayerParams {
            attn_norm: Vector::zeros(d),
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ffn_norm: Vector::zeros(d),
            ffn_key: Matrix::zeros(config.d_ffn, d),
            ffn_value: Matrix::zeros(config.d_ffn, d),
        };
        Self {
            tok_emb: Matrix::zeros(config.vocab_size, d),
            pos_emb: Matrix::zeros(config.max_seq_len, d),
            layers: vec![layer; config.n_layers],
            final_norm: Vector::zeros(d),
        }
    }

    /// Scaled-normal initialization, deterministic per `config.seed`.
    ///
    /// Norm scales start at 1. Attention-output and FFN-value matrices use
    /// std `0.02 / √(2·n_layers)`; everything else uses 0.02.
    pub fn init(config: &ModelConfig) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |m: &mut [f64], std: f64| {
            for v in m {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = std * z;
            }
        };
        fill(p.tok_emb.as_mut_slice(), INIT_STD);
        fill(p.pos_emb.as_mut_slice(), INIT_STD);
        for layer in &mut p.layers {
            layer.attn_norm.as_mut_slice().fill(1.0);
            layer.ffn_norm.as_mut_slice().fill(1.0);
            fill(layer.wq.as_mut_slice(), INIT_STD);
            fill(layer.wk.as_mut_slice(), INIT_STD);
            fill(layer.wv.as_mut_slice(), INIT_STD);
            fill(layer.wo.as_mut_slice(), residual_std);
            fill(layer.ffn_key.as_mut_slice(), INIT_STD);
            fill(layer.ffn_value.as_mut_slice(), residual_std);
        }
        p.final_norm.as_mut_slice().fill(1.0);
        p
    }

    /// Tensors in canonical order (the order used by checkpoints and the
    /// optimizer).
    pub fn tensors(&self) -> Vec<(TensorInfo, &[f64])> {
        let mut out = Vec::with_capacity(4 + 8 * self.layers.len());
        out.push(mat("tok_emb".into(), &self.tok_emb));
        out.push(mat("pos_emb".into(), &self.pos_emb));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(vec(format!("layers.{l}.attn_norm"), &layer.attn_norm));
            for kind in MatrixKind::ATTENTION {
                out.push(mat(MatrixId::new(l, kind).name(), layer.matrix(kind)));
            }
            out.push(vec(format!("layers.{l}.ffn_norm"), &layer.ffn_norm));
            for kind in MatrixKind::FFN {
                out.push(mat(MatrixId::new(l, kind).name(), layer.matrix(kind)));
            }
        }
        out.push(vec("final_norm".into(), &self.final_norm));
        out
    }

    /// Mutable slices in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(4 + 8 * self.layers.len());
        out.push(self.tok_emb.as_mut_slice());
        out.push(self.pos_emb.as_mut_slice());
        for layer in &mut self.layers {
            out.push(layer.attn_norm.as_mut_slice());
            out.push(layer.wq.as_mut_slice());
            out.push(layer.wk.as_mut_slice());
            out.push(layer.wv.as_mut_slice());
            out.push(layer.wo.as_mut_slice());
            out.push(layer.ffn_norm.as_mut_slice());
            out.push(layer.ffn_key.as_mut_slice());
            out.push(layer.ffn_value.as_mut_slice());
        }
        out.push(self.final_norm.as_mut_slice());
        out
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors()
            .into_iter()
            .find(|(info, _)| info.name == name)
            .map(|(_, s)| s)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let pos = self.tensors().iter().position(|(info, _)| info.name == name)?;
        self.tensors_mut().into_iter().nth(pos)
    }

    pub fn matrix(&self, id: MatrixId) -> Result<&Matrix> {
        self.layers
            .get(id.layer)
            .map(|l| l.matrix(id.kind))
            .ok_or(Error::IndexOutOfRange {
                index: id.layer,
                len: self.layers.len(),
            })
    }

    pub fn matrix_mut(&mut self, id: MatrixId) -> Result<&mut Matrix> {
        let len = self.layers.len();
        self.layers
            .get_mut(id.layer)
            .map(|l| l.matrix_mut(id.kind))
            .ok_or(Error::IndexOutOfRange { index: id.layer, len })
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, s) in self.tensors() {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, s)| s.iter().all(|v| v.is_finite()))
    }
}
