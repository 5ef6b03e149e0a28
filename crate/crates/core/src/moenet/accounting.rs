//! Analytic parameter and FLOP counts.
//!
//! A linear or convolution layer costs two FLOPs per multiply-accumulate at
//! every position it is applied to; an affine layer costs two per element.
//! Activations, pooling, softmax and residual additions are not counted.

use super::config::{MoeConfig, INPUT_ROWS};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Cost {
    /// `in → out` dense layer applied at `positions` positions.
    pub fn linear(inp: usize, out: usize, positions: usize) -> Cost {
        let (i, o, p) = (inp as u64, out as u64, positions as u64);
        Cost {
            params: i * o + o,
            flops: 2 * i * o * p,
        }
    }

    /// Elementwise scale and shift of width `dim` at `positions` positions.
    pub fn affine(dim: usize, positions: usize) -> Cost {
        let (d, p) = (dim as u64, positions as u64);
        Cost {
            params: 2 * d,
            flops: 2 * d * p,
        }
    }

    fn times(self, k: u64) -> Cost {
        Cost {
            params: self.params * k,
            flops: self.flops * k,
        }
    }
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

/// Counts for one configuration, per single-window inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Accounting {
    pub gate: Cost,
    /// One expert; routed and shared experts share this shape.
    pub expert: Cost,
    pub head: Cost,
    /// All stored parameters.
    pub total_params: u64,
    /// Parameters touched by one inference: gate, shared expert, K routed experts, head.
    pub active_params: u64,
    pub active_flops: u64,
    /// FLOPs if every routed expert ran densely alongside the shared one.
    pub dense_flops: u64,
}

impl Accounting {
    pub fn flop_ratio(&self) -> f64 {
        self.active_flops as f64 / self.dense_flops as f64
    }
}

pub fn count_params_flops(cfg: &MoeConfig) -> Accounting {
    let (p, d, o) = (cfg.n_patch, cfg.l_inner, cfg.l_out);
    let gate = Cost::linear(INPUT_ROWS, cfg.gate_channels, cfg.window_len) + Cost::linear(cfg.gate_channels, cfg.n_experts, 1);
    // cross-patch mixing is a `[P, P]` convolution applied at each of the d feature columns
    let block = Cost::affine(d, p)
        + Cost::linear(p, p, d)
        + Cost::linear(d, d, p)
        + Cost::affine(d, p)
        + Cost::linear(d, d, p)
        + Cost::linear(d, d, p);
    let expert = Cost::linear(cfg.patch_dim(), d, p) + block.times(cfg.depth as u64) + Cost::linear(d, o, p);
    let head = Cost::linear(2 * o, o, p) + Cost::linear(o, o, 1) + Cost::linear(o, 3, 1) + Cost::linear(o, 3, 1);

    let active = gate + expert.times(cfg.top_k as u64 + 1) + head;
    let dense = gate + expert.times(cfg.n_experts as u64 + 1) + head;
    Accounting {
        gate,
        expert,
        head,
        total_params: dense.params,
        active_params: active.params,
        active_flops: active.flops,
        dense_flops: dense.flops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moenet::model::MoeModel;

    #[test]
    fn single_linear() {
        assert_eq!(Cost::linear(9, 3, 1), Cost { params: 30, flops: 54 });
    }

    #[test]
    fn active_below_dense_whenever_k_below_n() {
        for n in 2..10 {
            for k in 1..n {
                let cfg = MoeConfig {
                    n_experts: n,
                    top_k: k,
                    ..MoeConfig::default()
                };
                let a = count_params_flops(&cfg);
                assert!(a.active_flops < a.dense_flops);
                assert!(a.active_params < a.total_params);
            }
        }
    }

    #[test]
    fn totals_match_instantiated_model() {
        for cfg in [
            MoeConfig::default(),
            MoeConfig {
                n_experts: 3,
                top_k: 1,
                window_len: 12,
                n_patch: 4,
                l_feature: 3,
                l_inner: 5,
                l_out: 7,
                depth: 1,
                gate_channels: 2,
                ..MoeConfig::default()
            },
        ] {
            let m = MoeModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.params().numel() as u64, count_params_flops(&cfg).total_params);
        }
    }
}
