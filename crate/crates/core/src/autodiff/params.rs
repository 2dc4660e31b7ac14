use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// A named slice of a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with a parallel gradient buffer.
///
/// Every store carries a process-unique id; graph leaves remember the id of
/// the store they were read from so `backward` routes gradients to the
/// right buffer. Cloning yields a new id.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    values: Vec<f64>,
    grads: Vec<f64>,
    blocks: Vec<ParamBlock>,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            blocks: self.blocks.clone(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            values: Vec::new(),
            grads: Vec::new(),
            blocks: Vec::new(),
        }
    }

    /// Rebuild a store from a block table and flat values.
    pub fn from_parts(blocks: Vec<ParamBlock>, values: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        for b in &blocks {
            if b.offset != expected {
                return Err(Error::Shape(format!("block {} is not contiguous", b.name)));
            }
            expected += b.len();
        }
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "blocks cover {expected} values, store has {}",
                values.len()
            )));
        }
        let grads = vec![0.0; values.len()];
        Ok(Self {
            id: fresh_id(),
            values,
            grads,
            blocks,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn add_block(&mut self, name: &str, shape: Vec<usize>, init: Vec<f64>) -> Result<()> {
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate block {name}")));
        }
        let block = ParamBlock {
            name: name.to_string(),
            offset: self.values.len(),
            shape,
        };
        if block.len() != init.len() {
            return Err(Error::Shape(format!(
                "block {name} expects {} values, got {}",
                block.len(),
                init.len()
            )));
        }
        self.values.extend(init);
        self.grads.resize(self.values.len(), 0.0);
        self.blocks.push(block);
        Ok(())
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter block named {name}")))
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.blocks.iter().any(|b| b.name == name)
    }

    pub fn block_tensor(&self, name: &str) -> Result<Tensor> {
        let b = self.block(name)?;
        Tensor::new(b.shape.clone(), self.values[b.range()].to_vec())
    }

    pub fn block_values(&self, name: &str) -> Result<&[f64]> {
        let r = self.block(name)?.range();
        Ok(&self.values[r])
    }

    pub fn block_grads(&self, name: &str) -> Result<&[f64]> {
        let r = self.block(name)?.range();
        Ok(&self.grads[r])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn grads_mut(&mut self) -> &mut [f64] {
        &mut self.grads
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.values, &mut self.grads)
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}
