//! Dense real tensors and integer token batches.

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Build a `[rows.len(), cols]` tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[rest, last]`.
    pub fn rows(&self) -> usize {
        if self.data.is_empty() {
            0
        } else {
            self.data.len() / self.cols()
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Integer token sequences, `batch × positions`, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenBatch {
    batch: usize,
    positions: usize,
    tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, positions: usize, tokens: Vec<u32>) -> Result<Self> {
        if batch * positions != tokens.len() {
            return Err(Error::Shape(format!(
                "token batch {batch}x{positions} needs {} tokens, got {}",
                batch * positions,
                tokens.len()
            )));
        }
        Ok(Self {
            batch,
            positions,
            tokens,
        })
    }

    pub fn filled(batch: usize, positions: usize, token: u32) -> Self {
        Self {
            batch,
            positions,
            tokens: vec![token; batch * positions],
        }
    }

    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let positions = seqs.first().map_or(0, Vec::len);
        let mut tokens = Vec::with_capacity(seqs.len() * positions);
        for s in seqs {
            if s.len() != positions {
                return Err(Error::Shape("ragged sequences".into()));
            }
            tokens.extend_from_slice(s);
        }
        Self::new(seqs.len(), positions, tokens)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [u32] {
        &mut self.tokens
    }

    pub fn get(&self, b: usize, d: usize) -> u32 {
        self.tokens[b * self.positions + d]
    }

    pub fn sequence(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.positions..(b + 1) * self.positions]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks(self.positions.max(1)).take(self.batch)
    }

    /// Every token must be below `limit`.
    pub fn validate(&self, limit: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= limit) {
            Some(&token) => Err(Error::InvalidToken { token, limit }),
            None => Ok(()),
        }
    }

    /// One-hot rows of width `vocab`, shape `[batch, positions, vocab]`.
    pub fn one_hot(&self, vocab: usize) -> Result<Tensor> {
        self.validate(vocab)?;
        let mut t = Tensor::zeros(vec![self.batch, self.positions, vocab]);
        for (r, &tok) in self.tokens.iter().enumerate() {
            t.data_mut()[r * vocab + tok as usize] = 1.0;
        }
        Ok(t)
    }

    /// Stack batches along the batch axis.
    pub fn concat(parts: &[TokenBatch]) -> Result<Self> {
        let positions = parts.first().map_or(0, |p| p.positions);
        let mut tokens = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.positions != positions {
                return Err(Error::Shape("concat of mismatched sequence lengths".into()));
            }
            tokens.extend_from_slice(&p.tokens);
            batch += p.batch;
        }
        Self::new(batch, positions, tokens)
    }
}
