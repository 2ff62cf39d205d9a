//! Attribute schema: names, score kinds and the block partition of the latent space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrKind {
    /// Scores in (0, 1), trained with binary cross-entropy.
    Binary,
    /// Unbounded scores, trained with absolute error.
    Continuous,
}

/// Names and kinds of the N attributes plus block sizes `n_0..n_N`.
///
/// Block 0 is the unnamed residual block; block `k >= 1` belongs to attribute `k - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub names: Vec<String>,
    pub kinds: Vec<AttrKind>,
    pub block_sizes: Vec<usize>,
}

impl AttributeSchema {
    pub fn new(names: Vec<String>, kinds: Vec<AttrKind>, block_sizes: Vec<usize>) -> Result<Self> {
        let s = Self {
            names,
            kinds,
            block_sizes,
        };
        s.validate()?;
        Ok(s)
    }

    /// pose, smile, age, gender, glasses with 2-dimensional blocks and a 22-dimensional residual.
    pub fn default_faces() -> Self {
        use AttrKind::*;
        Self::new(
            ["pose", "smile", "age", "gender", "glasses"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            vec![Continuous, Binary, Continuous, Binary, Binary],
            vec![22, 2, 2, 2, 2, 2],
        )
        .expect("default schema is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.kinds.len() {
            return Err(Error::BadSchema(format!(
                "{} names but {} kinds",
                self.names.len(),
                self.kinds.len()
            )));
        }
        if self.block_sizes.len() != self.names.len() + 1 {
            return Err(Error::BadSchema(format!(
                "expected {} block sizes (residual + one per attribute), found {}",
                self.names.len() + 1,
                self.block_sizes.len()
            )));
        }
        if let Some(i) = self.block_sizes.iter().position(|&n| n == 0) {
            return Err(Error::BadSchema(format!("block {i} has size 0")));
        }
        for (i, a) in self.names.iter().enumerate() {
            if self.names[..i].contains(a) {
                return Err(Error::BadSchema(format!("duplicate attribute name `{a}`")));
            }
        }
        Ok(())
    }

    /// Number of attributes N.
    pub fn n_attrs(&self) -> usize {
        self.names.len()
    }

    /// Number of blocks N + 1.
    pub fn n_blocks(&self) -> usize {
        self.block_sizes.len()
    }

    /// Latent dimension D.
    pub fn dim(&self) -> usize {
        self.block_sizes.iter().sum()
    }

    /// Column offset of block `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.block_sizes[..i].iter().sum()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        let o = self.offset(i);
        o..o + self.block_sizes[i]
    }

    /// Block index of the named attribute.
    pub fn block_of(&self, name: &str) -> Result<usize> {
        self.attr_index(name).map(|k| k + 1)
    }

    /// Zero-based attribute index of the named attribute.
    pub fn attr_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    /// Block index that owns latent coordinate `j`.
    pub fn block_of_coord(&self, j: usize) -> usize {
        let mut acc = 0;
        for (i, &n) in self.block_sizes.iter().enumerate() {
            acc += n;
            if j < acc {
                return i;
            }
        }
        panic!("coordinate {j} outside latent dimension {acc}");
    }
}
