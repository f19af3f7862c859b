//! Attention masks as O(1) predicates.
//!
//! Production masks are block-structured (no dense matrix is ever
//! materialized); `Explicit` exists for tests and ad-hoc patterns.

use std::sync::Arc;

/// Which keys a query row may attend to.
#[derive(Debug, Clone)]
pub enum Mask {
    /// Every query sees every key.
    Full,
    /// First `n_standby` query rows see everything; the remaining rows see
    /// only keys at index >= `n_standby` (the asymmetric dual-path rule).
    Asymmetric { n_standby: usize },
    /// Query in frame `q / frame_len` sees keys in frames <= its own.
    /// `frame_len == 1` is plain token-level causal.
    FrameCausal { frame_len: usize },
    /// Arbitrary dense pattern, row-major `queries × keys`.
    Explicit(Arc<ExplicitMask>),
}

#[derive(Debug)]
pub struct ExplicitMask {
    pub queries: usize,
    pub keys: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn explicit(rows: Vec<Vec<bool>>) -> Mask {
        let queries = rows.len();
        let keys = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut allowed = Vec::with_capacity(queries * keys);
        for row in &rows {
            assert_eq!(row.len(), keys, "ragged mask");
            allowed.extend_from_slice(row);
        }
        Mask::Explicit(Arc::new(ExplicitMask { queries, keys, allowed }))
    }

    #[inline]
    pub fn permits(&self, q: usize, k: usize) -> bool {
        match self {
            Mask::Full => true,
            Mask::Asymmetric { n_standby } => q < *n_standby || k >= *n_standby,
            Mask::FrameCausal { frame_len } => k / frame_len <= q / frame_len,
            Mask::Explicit(m) => m.allowed[q * m.keys + k],
        }
    }

    /// Number of permitted keys for query `q` out of `keys` total.
    pub fn permitted_count(&self, q: usize, keys: usize) -> usize {
        match self {
            Mask::Full => keys,
            Mask::Asymmetric { n_standby } => {
                if q < *n_standby {
                    keys
                } else {
                    keys - n_standby
                }
            }
            Mask::FrameCausal { frame_len } => keys.min((q / frame_len + 1) * frame_len),
            Mask::Explicit(m) => (0..keys).filter(|&k| m.allowed[q * m.keys + k]).count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asymmetric_rule() {
        let m = Mask::Asymmetric { n_standby: 2 };
        // standby queries see everything
        assert!(m.permits(0, 0) && m.permits(1, 5));
        // patch queries see only patch keys
        assert!(!m.permits(2, 0) && !m.permits(2, 1));
        assert!(m.permits(2, 2) && m.permits(4, 7));
        assert_eq!(m.permitted_count(0, 8), 8);
        assert_eq!(m.permitted_count(3, 8), 6);
    }

    #[test]
    fn frame_causal_blocks() {
        let m = Mask::FrameCausal { frame_len: 3 };
        // tokens 0..3 are frame 0, 3..6 frame 1
        assert!(m.permits(1, 2));
        assert!(!m.permits(2, 3));
        assert!(m.permits(4, 0) && m.permits(4, 5));
        assert_eq!(m.permitted_count(4, 9), 6);
    }
}
