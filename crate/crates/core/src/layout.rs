use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermLayout {
    pub gamma: Range<usize>,
    pub alpha: Range<usize>,
}

impl TermLayout {
    /// The contiguous `[γ̃, α̃]` block.
    pub fn block(&self) -> Range<usize> {
        self.gamma.start..self.alpha.end
    }
}

/// Positions of `β`, then `γ̃ʲ`, `α̃ʲ` for each term, inside `ψ`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoefficientLayout {
    pub beta: Range<usize>,
    pub terms: Vec<TermLayout>,
    pub dim: usize,
}

impl CoefficientLayout {
    /// `terms` holds `(q_j, s_j)` pairs.
    pub fn new(p: usize, terms: &[(usize, usize)]) -> Self {
        let mut at = p;
        let terms = terms
            .iter()
            .map(|&(q, s)| {
                let gamma = at..at + q;
                let alpha = at + q..at + q + s;
                at += q + s;
                TermLayout { gamma, alpha }
            })
            .collect();
        Self {
            beta: 0..p,
            terms,
            dim: at,
        }
    }

    pub fn p(&self) -> usize {
        self.beta.len()
    }
}
