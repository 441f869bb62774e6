//! Multiply-accumulate accounting for the pruned decoder.
//!
//! Each layer running on `N` queries of width `d` is charged `N^2 d` for
//! attention and `N d^2` for projections and the feed-forward block, both
//! with unit constants. Text cross-attention (`N K d`) is kept in its own
//! column and left out of [`CostLedger::total`].

use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: usize,
    pub n_queries: usize,
    pub attn_macs: u128,
    pub ffn_macs: u128,
    pub text_macs: u128,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CostLedger {
    pub layers: Vec<LayerCost>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Charges one decoder layer that ran on `n` queries.
    pub fn record(&mut self, n: usize, dim: usize, text_len: usize) {
        let (n, d, k) = (n as u128, dim as u128, text_len as u128);
        self.layers.push(LayerCost {
            layer: self.layers.len(),
            n_queries: n as usize,
            attn_macs: n * n * d,
            ffn_macs: n * d * d,
            text_macs: n * k * d,
        });
    }

    pub fn total(&self) -> u128 {
        self.layers.iter().map(|l| l.attn_macs + l.ffn_macs).sum()
    }

    pub fn text_total(&self) -> u128 {
        self.layers.iter().map(|l| l.text_macs).sum()
    }

    /// The ledger a decoder would produce without running it: `layers` rounds
    /// starting from `n` queries, keeping `retained(N, k, min_keep)` after each.
    pub fn plan(n: usize, dim: usize, layers: usize, k: usize, text_len: usize, min_keep: usize) -> Self {
        let mut ledger = CostLedger::new();
        let mut current = n;
        for _ in 0..layers {
            ledger.record(current, dim, text_len);
            current = retained(current, k, min_keep);
        }
        ledger
    }

    /// `layer,n_queries,attn_macs,ffn_macs` rows behind a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,n_queries,attn_macs,ffn_macs\n");
        for l in &self.layers {
            let _ = writeln!(out, "{},{},{},{}", l.layer, l.n_queries, l.attn_macs, l.ffn_macs);
        }
        out
    }
}

/// Queries surviving one pruning round: `ceil(n / k)`, but never fewer than
/// `min_keep` unless `n` itself is smaller.
pub fn retained(n: usize, k: usize, min_keep: usize) -> usize {
    assert!(k >= 1, "retention divisor must be at least 1");
    n.div_ceil(k).max(min_keep.min(n))
}

/// Cost of `layers` unpruned layers on `n` queries.
pub fn unpruned_total(n: usize, dim: usize, layers: usize) -> u128 {
    let (n, d) = (n as u128, dim as u128);
    layers as u128 * (n * n * d + n * d * d)
}

/// Depth-independent bound `k^2/(k^2-1) N^2 d + k/(k-1) N d^2` for `k >= 2`.
pub fn closed_form_bound(n: usize, dim: usize, k: usize) -> f64 {
    assert!(k >= 2, "the geometric bound needs k >= 2");
    let (n, d, k) = (n as f64, dim as f64, k as f64);
    k * k / (k * k - 1.0) * n * n * d + k / (k - 1.0) * n * d * d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ceil_chain_from_900() {
        let mut n = 900;
        let mut chain = vec![n];
        for _ in 0..6 {
            n = retained(n, 2, 1);
            chain.push(n);
        }
        assert_eq!(chain, vec![900, 450, 225, 113, 57, 29, 15]);
    }

    #[test]
    fn k_one_is_the_unpruned_closed_form() {
        for layers in 1..8 {
            assert_eq!(CostLedger::plan(37, 16, layers, 1, 5, 1).total(), unpruned_total(37, 16, layers));
        }
    }

    #[test]
    fn reference_configuration_ratio() {
        let pruned = CostLedger::plan(900, 256, 6, 2, 8, 1).total() as f64;
        let ratio = pruned / unpruned_total(900, 256, 6) as f64;
        // Straight-line recount of the six layers.
        let want: u128 = [900u128, 450, 225, 113, 57, 29].iter().map(|n| n * n * 256 + n * 256 * 256).sum();
        assert_eq!(pruned as u128, want);
        assert!((ratio - 0.247).abs() <= 0.005, "{ratio}");
    }

    #[test]
    fn csv_has_one_row_per_layer() {
        let csv = CostLedger::plan(10, 4, 3, 2, 2, 1).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "layer,n_queries,attn_macs,ffn_macs");
        assert_eq!(lines[1], "0,10,400,160");
        assert_eq!(lines[3], "2,3,36,48");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn ledger_total_is_sum_of_entries(n in 1usize..2000, k in 1usize..6, layers in 0usize..10, d in 1usize..64) {
            let ledger = CostLedger::plan(n, d, layers, k, 3, 1);
            let sum: u128 = ledger.layers.iter().map(|l| l.attn_macs + l.ffn_macs).sum();
            prop_assert_eq!(ledger.total(), sum);
            prop_assert_eq!(ledger.layers.len(), layers);
        }
    }
}
