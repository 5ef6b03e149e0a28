//! Training losses, as plain functions and as tape graphs.

use nalgebra::Vector3;

use super::routing::GateDecision;
use crate::diffkernel::{Tape, Var};
use crate::error::{Error, Result};

fn check_pairs(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == 0 || a != b {
        return Err(Error::Shape {
            op,
            lhs: vec![a, 3],
            rhs: vec![b, 3],
        });
    }
    Ok(())
}

/// Mean over the batch of `‖v − v̂‖²`.
pub fn loss_mse(v: &[Vector3<f64>], v_hat: &[Vector3<f64>]) -> Result<f64> {
    check_pairs("loss_mse", v.len(), v_hat.len())?;
    Ok(v.iter().zip(v_hat).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / v.len() as f64)
}

/// Gaussian negative log-likelihood with diagonal covariance, constant
/// terms dropped: mean of `½·log det Σ + ½·rᵀΣ⁻¹r`.
pub fn loss_nll(v: &[Vector3<f64>], v_hat: &[Vector3<f64>], sigma_diag: &[Vector3<f64>]) -> Result<f64> {
    check_pairs("loss_nll", v.len(), v_hat.len())?;
    check_pairs("loss_nll", v.len(), sigma_diag.len())?;
    let mut total = 0.0;
    for ((a, b), s) in v.iter().zip(v_hat).zip(sigma_diag) {
        if s.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Contract(format!("variance must be positive, got {:?}", s.as_slice())));
        }
        let r = a - b;
        total += (0..3).map(|i| 0.5 * s[i].ln() + 0.5 * r[i] * r[i] / s[i]).sum::<f64>();
    }
    Ok(total / v.len() as f64)
}

fn uniform_deviation(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let total: f64 = x.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    x.iter().map(|v| (v / total - 1.0 / n).powi(2)).sum()
}

/// Importance and load balancing terms from raw per-expert totals.
pub fn aux_from_parts(importance: &[f64], load: &[f64]) -> (f64, f64) {
    (uniform_deviation(importance), uniform_deviation(load))
}

/// `L_importance + L_load` for a routed batch.
pub fn loss_aux(decision: &GateDecision) -> f64 {
    let load: Vec<f64> = decision.load.iter().map(|&l| l as f64).collect();
    let (i, l) = aux_from_parts(&decision.importance, &load);
    i + l
}

fn target(tape: &mut Tape, v: &[Vector3<f64>]) -> Result<Var> {
    tape.constant(vec![v.len(), 3], v.iter().flat_map(|x| x.iter().copied()).collect())
}

/// Graph form of [`loss_mse`] for a `[B, 3]` prediction.
pub fn mse_graph(tape: &mut Tape, v_hat: Var, v: &[Vector3<f64>]) -> Result<Var> {
    check_pairs("mse_graph", v.len(), tape.shape(v_hat)[0])?;
    let t = target(tape, v)?;
    let r = tape.sub(v_hat, t)?;
    let r2 = tape.square(r);
    let s = tape.sum_all(r2);
    Ok(tape.scale(s, 1.0 / v.len() as f64))
}

/// Graph form of [`loss_nll`] with the covariance given as log-variance.
pub fn nll_graph(tape: &mut Tape, v_hat: Var, log_var: Var, v: &[Vector3<f64>]) -> Result<Var> {
    check_pairs("nll_graph", v.len(), tape.shape(v_hat)[0])?;
    let t = target(tape, v)?;
    let r = tape.sub(v_hat, t)?;
    let r2 = tape.square(r);
    let neg = tape.scale(log_var, -1.0);
    let inv = tape.exp(neg);
    let maha = tape.mul(r2, inv)?;
    let per = tape.add(log_var, maha)?;
    let s = tape.sum_all(per);
    Ok(tape.scale(s, 0.5 / v.len() as f64))
}

/// Graph form of [`loss_aux`]: the importance term is differentiated through
/// the gate probabilities `[B, N]`, the load term enters as a constant.
pub fn aux_graph(tape: &mut Tape, probs: Var, decision: &GateDecision) -> Result<Var> {
    let n = decision.n_experts as f64;
    let imp = tape.sum_rows(probs)?;
    let imp = tape.normalize_sum(imp)?;
    let dev = tape.add_const(imp, -1.0 / n);
    let sq = tape.square(dev);
    let l_imp = tape.sum_all(sq);
    let load: Vec<f64> = decision.load.iter().map(|&l| l as f64).collect();
    let (_, l_load) = aux_from_parts(&[1.0], &load);
    Ok(tape.add_const(l_imp, l_load))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::gradcheck::check;
    use crate::diffkernel::Tensor;
    use crate::moenet::config::MoeConfig;
    use crate::moenet::routing::{topk_route, Capacity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v3(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn mse_hand_cases() {
        let z = v3(0.0, 0.0, 0.0);
        assert_eq!(loss_mse(&[v3(1.0, 2.0, 3.0)], &[v3(1.0, 2.0, 3.0)]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[v3(1.0, 0.0, 0.0)], &[z]).unwrap(), 1.0);
        let a = loss_mse(&[v3(0.3, -0.2, 0.1)], &[z]).unwrap();
        let b = loss_mse(&[v3(0.6, -0.4, 0.2)], &[z]).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-15);
        assert!(loss_mse(&[z], &[]).is_err());
    }

    #[test]
    fn nll_hand_cases() {
        let z = v3(0.0, 0.0, 0.0);
        let one = v3(1.0, 1.0, 1.0);
        let e = std::f64::consts::E;
        assert_eq!(loss_nll(&[z], &[z], &[one]).unwrap(), 0.0);
        assert!((loss_nll(&[z], &[z], &[v3(e, e, e)]).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(loss_nll(&[v3(1.0, 0.0, 0.0)], &[z], &[one]).unwrap(), 0.5);
        assert!(loss_nll(&[z], &[z], &[v3(1.0, 0.0, 1.0)]).is_err());
    }

    #[test]
    fn nll_is_smallest_near_the_residual_scale() {
        let r = [v3(0.5, 0.0, 0.0)];
        let z = [v3(0.0, 0.0, 0.0)];
        let at = |s: f64| loss_nll(&r, &z, &[v3(s, 1.0, 1.0)]).unwrap();
        assert!(at(0.25) < at(10.0));
        assert!(at(0.25) < at(0.01));
    }

    #[test]
    fn aux_hand_cases() {
        assert_eq!(aux_from_parts(&[0.25; 4], &[3.0; 4]), (0.0, 0.0));
        let (i, l) = aux_from_parts(&[1.0, 0.0], &[5.0, 0.0]);
        assert_eq!(i + l, 1.0);
        let (a, _) = aux_from_parts(&[0.7, 0.2, 0.1], &[1.0; 3]);
        let (b, _) = aux_from_parts(&[7.0, 2.0, 1.0], &[1.0; 3]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn aux_zero_only_when_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let imp: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..1.0)).collect();
            let (i, _) = aux_from_parts(&imp, &[1.0; 5]);
            assert!(i > 0.0);
        }
    }

    fn random_probs(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Vec<f64> {
        let mut p = Vec::with_capacity(b * n);
        for _ in 0..b {
            let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            p.extend(row.iter().map(|x| x / s));
        }
        p
    }

    #[test]
    fn graph_values_match_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = 5;
        let v: Vec<_> = (0..b).map(|_| v3(rng.random(), rng.random(), rng.random())).collect();
        let vh: Vec<_> = (0..b).map(|_| v3(rng.random(), rng.random(), rng.random())).collect();
        let lv: Vec<_> = (0..b).map(|_| v3(rng.random_range(-1.0..1.0), 0.3, -0.2)).collect();
        let mut tape = Tape::new();
        let vh_var = tape.constant(vec![b, 3], vh.iter().flat_map(|x| x.iter().copied()).collect()).unwrap();
        let lv_var = tape.constant(vec![b, 3], lv.iter().flat_map(|x| x.iter().copied()).collect()).unwrap();
        let m = mse_graph(&mut tape, vh_var, &v).unwrap();
        let n = nll_graph(&mut tape, vh_var, lv_var, &v).unwrap();
        let sig: Vec<_> = lv.iter().map(|x| x.map(f64::exp)).collect();
        assert!((tape.value(m)[0] - loss_mse(&v, &vh).unwrap()).abs() < 1e-14);
        assert!((tape.value(n)[0] - loss_nll(&v, &vh, &sig).unwrap()).abs() < 1e-13);

        let cfg = MoeConfig {
            n_experts: 4,
            top_k: 2,
            ..MoeConfig::default()
        };
        let probs = random_probs(&mut rng, 8, 4);
        let d = topk_route(&probs, 8, &cfg, Capacity::Batch).unwrap();
        let p = tape.constant(vec![8, 4], probs).unwrap();
        let a = aux_graph(&mut tape, p, &d).unwrap();
        assert!((tape.value(a)[0] - loss_aux(&d)).abs() < 1e-15);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = 4;
        let v: Vec<_> = (0..b).map(|_| v3(rng.random(), rng.random(), rng.random())).collect();
        let rand_t = |rng: &mut ChaCha8Rng| {
            Tensor::from_vec(vec![b, 3], (0..3 * b).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (vh, lv) = (rand_t(&mut rng), rand_t(&mut rng));

        let g = check(std::slice::from_ref(&vh), 1e-4, |tp, x| mse_graph(tp, x[0], &v)).unwrap();
        assert!(g.rel_error < 1e-4, "mse {}", g.rel_error);
        let g = check(&[vh, lv], 1e-4, |tp, x| nll_graph(tp, x[0], x[1], &v)).unwrap();
        assert!(g.rel_error < 1e-4, "nll {}", g.rel_error);

        let cfg = MoeConfig {
            n_experts: 4,
            top_k: 1,
            ..MoeConfig::default()
        };
        let probs = random_probs(&mut rng, 6, 4);
        let d = topk_route(&probs, 6, &cfg, Capacity::Batch).unwrap();
        let p = Tensor::from_vec(vec![6, 4], probs).unwrap();
        let g = check(&[p], 1e-4, |tp, x| aux_graph(tp, x[0], &d)).unwrap();
        assert!(g.rel_error < 1e-4, "aux {}", g.rel_error);
    }
}
