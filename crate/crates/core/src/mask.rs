//! Self-attention visibility patterns.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Which key positions a query position may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMask {
    /// `j <= i`.
    Causal,
    /// Bidirectional inside the first `prefix_len` positions, causal after.
    PrefixNonCausal { prefix_len: usize },
    /// Every position sees every position (encoders, cross-attention).
    Full,
}

impl AttentionMask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match *self {
            AttentionMask::Causal => j <= i,
            AttentionMask::PrefixNonCausal { prefix_len } => {
                j <= i || (i < prefix_len && j < prefix_len)
            }
            AttentionMask::Full => true,
        }
    }

    pub fn prefix_len(&self) -> usize {
        match *self {
            AttentionMask::PrefixNonCausal { prefix_len } => prefix_len,
            _ => 0,
        }
    }
}

/// Materialise the `t x t` boolean mask (`true` = may attend).
pub fn build_mask(spec: AttentionMask, t: usize) -> Result<Vec<Vec<bool>>> {
    if t == 0 {
        return Err(Error::Contract("mask length must be at least 1".into()));
    }
    if let AttentionMask::PrefixNonCausal { prefix_len } = spec {
        if prefix_len > t {
            return Err(Error::Contract(alloc::format!(
                "prefix length {prefix_len} exceeds sequence length {t}"
            )));
        }
    }
    Ok((0..t)
        .map(|i| (0..t).map(|j| spec.allows(i, j)).collect())
        .collect())
}
