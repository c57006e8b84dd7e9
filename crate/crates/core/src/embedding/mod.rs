//! Patch tokenization with the local attention gate, token merging between
//! scales and positional embeddings.

mod la;
mod merge;
mod tokenizer;

pub use la::{la_forward, LaConfig, LocalAttention};
pub use merge::TokenMerge;
pub use tokenizer::{PatchEmbed, PosEmbed};

use crate::geometry::Point;
use crate::tensor::Var;

/// Tokens living at one pyramid scale.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    /// `[n, C]` token features.
    pub tokens: Var,
    /// Center coordinates, one per token row.
    pub coords: Vec<Point>,
    /// Point index at `scale` of each token row.
    pub indices: Vec<usize>,
    pub scale: usize,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}
