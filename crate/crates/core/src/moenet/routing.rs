//! Top-K selection with per-expert capacity and overflow cascade.

use super::config::MoeConfig;
use crate::error::{Error, Result};

/// How many samples each routed expert may take in one batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Capacity {
    /// `⌈c·B/N⌉` for the batch being routed.
    Batch,
    Fixed(usize),
    Unbounded,
}

/// Routing outcome for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    pub n_experts: usize,
    pub top_k: usize,
    /// Capacity applied to every expert, `None` when unbounded.
    pub capacity: Option<usize>,
    /// Final experts per sample, in the order they were assigned.
    pub selected: Vec<Vec<usize>>,
    /// Renormalized gate weights aligned with `selected`.
    pub weights: Vec<Vec<f64>>,
    /// Experts each sample ranked high enough to want but found full.
    pub overflowed: Vec<Vec<usize>>,
    /// Summed gate probabilities per expert over the batch.
    pub importance: Vec<f64>,
    /// Assigned samples per expert.
    pub load: Vec<usize>,
    /// Slots left unfilled because every remaining expert was full.
    pub dropped_slots: usize,
}

impl GateDecision {
    pub fn batch_size(&self) -> usize {
        self.selected.len()
    }

    /// Row-major `[B, N]` assignment mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.batch_size() * self.n_experts];
        for (b, sel) in self.selected.iter().enumerate() {
            for &e in sel {
                m[b * self.n_experts + e] = true;
            }
        }
        m
    }

    /// Sample indices routed to `expert`, ascending.
    pub fn samples_for(&self, expert: usize) -> Vec<usize> {
        (0..self.batch_size())
            .filter(|&b| self.selected[b].contains(&expert))
            .collect()
    }
}

/// Experts of one probability row in descending order, ties to lower index.
pub fn rank_experts(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Routes a `[B, N]` row-major probability matrix.
///
/// Samples are served in batch order. Each takes its highest-ranked experts
/// that still have room, cascading past full experts in descending weight
/// order until it holds K experts or runs out of candidates.
pub fn topk_route(probs: &[f64], batch: usize, cfg: &MoeConfig, capacity: Capacity) -> Result<GateDecision> {
    let n = cfg.n_experts;
    let k = cfg.top_k;
    if k >= n {
        return Err(Error::InvalidConfig(format!("K < N violated (K = {k}, N = {n})")));
    }
    if batch == 0 || probs.len() != batch * n {
        return Err(Error::Shape {
            op: "topk_route",
            lhs: vec![probs.len()],
            rhs: vec![batch, n],
        });
    }
    let cap = match capacity {
        Capacity::Batch => Some(super::config::expert_capacity(cfg, batch)),
        Capacity::Fixed(c) => Some(c),
        Capacity::Unbounded => None,
    };

    let mut load = vec![0usize; n];
    let mut importance = vec![0.0; n];
    let mut selected = Vec::with_capacity(batch);
    let mut weights = Vec::with_capacity(batch);
    let mut overflowed = Vec::with_capacity(batch);
    let mut dropped = 0;

    for row in probs.chunks(n) {
        for (i, p) in importance.iter_mut().zip(row) {
            *i += p;
        }
        let mut sel = Vec::with_capacity(k);
        let mut over = Vec::new();
        for e in rank_experts(row) {
            if sel.len() == k {
                break;
            }
            if cap.is_some_and(|c| load[e] >= c) {
                over.push(e);
                continue;
            }
            load[e] += 1;
            sel.push(e);
        }
        dropped += k - sel.len();
        let total: f64 = sel.iter().map(|&e| row[e]).sum();
        let w = sel
            .iter()
            .map(|&e| if total > 0.0 { row[e] / total } else { 1.0 / sel.len() as f64 })
            .collect();
        selected.push(sel);
        weights.push(w);
        overflowed.push(over);
    }

    Ok(GateDecision {
        n_experts: n,
        top_k: k,
        capacity: cap,
        selected,
        weights,
        overflowed,
        importance,
        load,
        dropped_slots: dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, k: usize, c: f64) -> MoeConfig {
        MoeConfig {
            n_experts: n,
            top_k: k,
            capacity_factor: c,
            ..MoeConfig::default()
        }
    }

    #[test]
    fn renormalizes_top_two() {
        let d = topk_route(&[0.5, 0.3, 0.15, 0.05], 1, &cfg(4, 2, 1.0), Capacity::Unbounded).unwrap();
        assert_eq!(d.selected[0], vec![0, 1]);
        assert!((d.weights[0][0] - 0.625).abs() < 1e-15);
        assert!((d.weights[0][1] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn single_sample_never_binds() {
        let c = cfg(8, 2, 1.25);
        let row = [0.05, 0.1, 0.3, 0.05, 0.2, 0.1, 0.1, 0.1];
        let a = topk_route(&row, 1, &c, Capacity::Batch).unwrap();
        let b = topk_route(&row, 1, &c, Capacity::Unbounded).unwrap();
        assert_eq!(a.selected, b.selected);
        assert_eq!(a.dropped_slots, 0);
    }

    #[test]
    fn overflow_cascades_to_next_expert() {
        let probs = [0.9, 0.1].repeat(4);
        let d = topk_route(&probs, 4, &cfg(2, 1, 1.0), Capacity::Batch).unwrap();
        assert_eq!(d.capacity, Some(2));
        assert_eq!(d.load, vec![2, 2]);
        assert_eq!(d.selected, vec![vec![0], vec![0], vec![1], vec![1]]);
        assert_eq!(d.overflowed[2], vec![0]);
        assert_eq!(d.dropped_slots, 0);
        for w in &d.weights {
            assert_eq!(w, &vec![1.0]);
        }
    }

    #[test]
    fn exhausted_experts_drop_slots() {
        // Capacity 1 each, 3 samples wanting 2 of 3 experts: 6 slots wanted, 3 available.
        let probs = [0.5, 0.3, 0.2].repeat(3);
        let d = topk_route(&probs, 3, &cfg(3, 2, 1.0), Capacity::Batch).unwrap();
        assert_eq!(d.capacity, Some(1));
        assert_eq!(d.selected, vec![vec![0, 1], vec![2], vec![]]);
        assert_eq!(d.dropped_slots, 3);
        assert_eq!(d.weights[1], vec![1.0]);
        assert!(d.weights[2].is_empty());
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(rank_experts(&[0.25, 0.25, 0.25, 0.25]), vec![0, 1, 2, 3]);
        let d = topk_route(&[0.2, 0.4, 0.4], 1, &cfg(3, 1, 1.0), Capacity::Unbounded).unwrap();
        assert_eq!(d.selected[0], vec![1]);
    }

    #[test]
    fn importance_uses_all_probabilities() {
        let probs = [0.7, 0.2, 0.1, 0.1, 0.6, 0.3];
        let d = topk_route(&probs, 2, &cfg(3, 1, 1.0), Capacity::Unbounded).unwrap();
        let expect = [0.8, 0.8, 0.4];
        for (a, b) in d.importance.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(d.load, vec![1, 1, 0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(topk_route(&[0.5, 0.5, 0.0], 2, &cfg(2, 1, 1.0), Capacity::Batch).is_err());
        assert!(topk_route(&[0.5, 0.5], 1, &cfg(2, 2, 1.0), Capacity::Batch).is_err());
    }
}
