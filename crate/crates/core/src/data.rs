//! Training-pair records shared by the losses, optimizer and benchmark.

use serde::{Deserialize, Serialize};

use crate::model::TokenSeq;

/// One `(x, y⁻, y⁺)` triplet: a query, its outdated answer and its update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditPair {
    pub fact_id: usize,
    pub template_id: usize,
    pub x: TokenSeq,
    pub y_old: TokenSeq,
    pub y_new: TokenSeq,
}

impl EditPair {
    pub fn new(x: TokenSeq, y_old: TokenSeq, y_new: TokenSeq) -> Self {
        Self { fact_id: 0, template_id: 0, x, y_old, y_new }
    }
}
