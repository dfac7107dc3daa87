//! The learnable hash function: one fully connected layer followed by `sign`.
//!
//! Gradients cross the binarization with the straight-through rule, i.e. the
//! derivative of `sign` is taken to be the identity.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{rand_uniform, Matrix, SeededRng};

/// Linear map from `feature_dim` inputs to `code_len` continuous outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModel {
    /// `feature_dim × code_len`, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients with the same shapes as [`HashModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &HashModel) -> Self {
        Self {
            weights: Matrix::zeros(model.feature_dim(), model.code_len()),
            bias: vec![0.0; model.code_len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.scale(s);
        self.bias.iter_mut().for_each(|b| *b *= s);
    }
}

impl HashModel {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::dim("HashModel::new", weights.cols(), bias.len()));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("non-finite model parameter".into()));
        }
        Ok(Self { weights, bias })
    }

    /// Fan-in uniform init in `[-1/√D, 1/√D)` with zero bias.
    pub fn init(feature_dim: usize, code_len: usize, rng: &mut SeededRng) -> Result<Self> {
        if feature_dim == 0 || code_len == 0 {
            return Err(Error::InvalidArgument(
                "feature_dim and code_len must be positive".into(),
            ));
        }
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let weights = rand_uniform(rng, feature_dim, code_len, -bound, bound)?;
        Ok(Self {
            weights,
            bias: vec![0.0; code_len],
        })
    }

    #[inline]
    pub fn feature_dim(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn code_len(&self) -> usize {
        self.weights.cols()
    }

    /// Continuous outputs `H = X·W + b`.
    pub fn project(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.feature_dim() {
            return Err(Error::dim("forward", self.feature_dim(), features.cols()));
        }
        let mut h = features.matmul(&self.weights)?;
        let k = self.code_len();
        exec::for_each_row_mut(h.as_mut_slice(), k, |_, row| {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        });
        Ok(h)
    }

    /// Returns `(H, sign(H))`.
    pub fn forward(&self, features: &Matrix) -> Result<(Matrix, CodeMatrix)> {
        let h = self.project(features)?;
        let b = CodeMatrix::from_signs(&h);
        Ok((h, b))
    }

    pub fn encode(&self, features: &Matrix) -> Result<CodeMatrix> {
        self.forward(features).map(|(_, b)| b)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Gradient of the loss w.r.t. `H` given its gradient w.r.t. `B = sign(H)`.
/// The straight-through rule makes this the identity.
pub fn backward_straight_through(grad_b: &Matrix) -> Matrix {
    grad_b.clone()
}

/// Parameter gradients of a loss with `∂L/∂H = grad_h` for `H = X·W + b`.
pub fn backward_linear(grad_h: &Matrix, features: &Matrix) -> Result<Gradients> {
    if grad_h.rows() != features.rows() {
        return Err(Error::dim("backward_linear", features.rows(), grad_h.rows()));
    }
    Ok(Gradients {
        weights: features.t_matmul(grad_h)?,
        bias: grad_h.column_sums(),
    })
}

/// `N × K` matrix of ±1 codes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeMatrix {
    rows: usize,
    bits: usize,
    values: Vec<i8>,
}

impl CodeMatrix {
    pub fn new(rows: usize, bits: usize, values: Vec<i8>) -> Result<Self> {
        if values.len() != rows * bits {
            return Err(Error::dim("CodeMatrix::new", rows * bits, values.len()));
        }
        if values.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::InvalidArgument("code entries must be ±1".into()));
        }
        Ok(Self { rows, bits, values })
    }

    /// `sign` with `sign(0) = +1`.
    pub fn from_signs(h: &Matrix) -> Self {
        let values = h
            .as_slice()
            .iter()
            .map(|&v| if v >= 0.0 { 1 } else { -1 })
            .collect();
        Self {
            rows: h.rows(),
            bits: h.cols(),
            values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i8 {
        self.values[r * self.bits + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[i8] {
        &self.values[r * self.bits..(r + 1) * self.bits]
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.values
    }

    pub fn select_rows(&self, idx: &[usize]) -> CodeMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.bits);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        CodeMatrix {
            rows: idx.len(),
            bits: self.bits,
            values,
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.bits,
            self.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("shape is consistent by construction")
    }

    pub fn pack(&self) -> PackedCodes {
        pack(self)
    }
}

/// Bit-packed codes. Bit `j` of a row lives in word `j / 64` at position
/// `j % 64`; a set bit means `+1`. Bits past `bits` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedCodes {
    rows: usize,
    bits: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

#[inline]
pub fn words_for_bits(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl PackedCodes {
    /// Wraps raw words, rejecting any row with padding bits set.
    pub fn from_words(rows: usize, bits: usize, words: Vec<u64>) -> Result<Self> {
        let wpr = words_for_bits(bits);
        if words.len() != rows * wpr {
            return Err(Error::dim("PackedCodes::from_words", rows * wpr, words.len()));
        }
        let tail = bits % 64;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            for r in 0..rows {
                if words[r * wpr + wpr - 1] & mask != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "row {r} has padding bits set"
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            bits,
            words_per_row: wpr,
            words,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn bits(&self) -> usize {
        self.bits
    }

    #[inline]
    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn select_rows(&self, idx: &[usize]) -> PackedCodes {
        let mut words = Vec::with_capacity(idx.len() * self.words_per_row);
        for &i in idx {
            words.extend_from_slice(self.row(i));
        }
        PackedCodes {
            rows: idx.len(),
            bits: self.bits,
            words_per_row: self.words_per_row,
            words,
        }
    }

    pub fn unpack(&self) -> CodeMatrix {
        unpack(self)
    }
}

pub fn pack(codes: &CodeMatrix) -> PackedCodes {
    let wpr = words_for_bits(codes.bits);
    let mut words = vec![0u64; codes.rows * wpr];
    for r in 0..codes.rows {
        let out = &mut words[r * wpr..(r + 1) * wpr];
        for (j, &v) in codes.row(r).iter().enumerate() {
            if v > 0 {
                out[j / 64] |= 1u64 << (j % 64);
            }
        }
    }
    PackedCodes {
        rows: codes.rows,
        bits: codes.bits,
        words_per_row: wpr,
        words,
    }
}

pub fn unpack(packed: &PackedCodes) -> CodeMatrix {
    let mut values = Vec::with_capacity(packed.rows * packed.bits);
    for r in 0..packed.rows {
        let row = packed.row(r);
        for j in 0..packed.bits {
            values.push(if row[j / 64] >> (j % 64) & 1 == 1 { 1 } else { -1 });
        }
    }
    CodeMatrix {
        rows: packed.rows,
        bits: packed.bits,
        values,
    }
}
