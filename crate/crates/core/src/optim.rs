//! RMSprop on the parameter/gradient registries: plain variant, no
//! momentum, no centering, no weight decay.
//!
//! Update rule, elementwise:
//!
//! ```text
//! v     <- alpha * v + (1 - alpha) * g^2
//! theta <- theta - lr * g / (sqrt(v) + eps)
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ndarr::Tensor;

/// Named tensor collection used for gradients and optimizer accumulators.
/// BTreeMap keeps iteration order stable.
pub type TensorMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.001,
            alpha: 0.95,
            eps: 1e-7,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0,1), got {}", self.alpha)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Per-parameter squared-gradient accumulators plus a step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    pub v: TensorMap,
    pub step: u64,
}

/// One RMSprop step over every registered parameter. The step is atomic:
/// all gradients are validated (matching keys, shapes, finite values)
/// before any parameter is touched, so a bad gradient aborts with the
/// parameters unchanged.
pub fn rmsprop_step(
    params: &mut [(String, &mut Tensor)],
    grads: &TensorMap,
    state: &mut OptimState,
    cfg: &OptimConfig,
) -> Result<()> {
    cfg.validate()?;
    if grads.len() != params.len() {
        return Err(Error::InvalidArg {
            op: "rmsprop_step",
            msg: format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            ),
        });
    }
    for (name, param) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::InvalidArg {
            op: "rmsprop_step",
            msg: format!("missing gradient for parameter {name}"),
        })?;
        if g.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op: "rmsprop_step",
                expected: format!("{name} {:?}", param.shape()),
                got: format!("{:?}", g.shape()),
            });
        }
        if !g.all_finite() {
            return Err(Error::InvalidArg {
                op: "rmsprop_step",
                msg: format!("non-finite gradient for parameter {name}; step aborted"),
            });
        }
    }

    for (name, param) in params.iter_mut() {
        let g = &grads[name.as_str()];
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        for ((tv, &gv), pv) in v
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(param.data_mut())
        {
            *tv = cfg.alpha * *tv + (1.0 - cfg.alpha) * gv * gv;
            *pv -= cfg.lr * gv / (tv.sqrt() + cfg.eps);
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(name: &str, value: f64) -> (TensorMap, Tensor) {
        let mut grads = TensorMap::new();
        grads.insert(name.to_string(), Tensor::from_vec(&[1], vec![value]).unwrap());
        (grads, Tensor::from_vec(&[1], vec![0.0]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_v() {
        let cfg = OptimConfig::default();
        let mut state = OptimState::default();
        state
            .v
            .insert("p".to_string(), Tensor::from_vec(&[1], vec![0.8]).unwrap());
        let (grads, mut p) = single("p", 0.0);
        p.data_mut()[0] = 1.5;
        let mut params = vec![("p".to_string(), &mut p)];
        rmsprop_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert!((state.v["p"].data()[0] - 0.8 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_computed_value() {
        // g=1: v = 0.05, delta = 0.001 / (sqrt(0.05) + 1e-7)
        let cfg = OptimConfig::default();
        let mut state = OptimState::default();
        let (grads, mut p) = single("p", 1.0);
        let mut params = vec![("p".to_string(), &mut p)];
        rmsprop_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!((state.v["p"].data()[0] - 0.05).abs() < 1e-15);
        let delta = -p.data()[0];
        assert!((delta - 0.004472133955000474).abs() < 1e-9, "delta {delta}");
        assert!((delta - 0.0044721).abs() < 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn step_opposes_gradient_sign() {
        let cfg = OptimConfig::default();
        let mut state = OptimState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = Tensor::from_fn(&[10], |_| rng.gen_range(-2.0..2.0));
        let before = p.clone();
        let g = Tensor::from_fn(&[10], |_| rng.gen_range(-3.0..3.0));
        let mut grads = TensorMap::new();
        grads.insert("p".to_string(), g.clone());
        let mut params = vec![("p".to_string(), &mut p)];
        rmsprop_step(&mut params, &grads, &mut state, &cfg).unwrap();
        for i in 0..10 {
            let delta = p.data()[i] - before.data()[i];
            if g.data()[i] != 0.0 {
                assert!(delta.signum() == -g.data()[i].signum());
            }
        }
    }

    #[test]
    fn accumulator_stays_nonnegative() {
        let cfg = OptimConfig::default();
        let mut state = OptimState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = Tensor::zeros(&[4]);
        for _ in 0..200 {
            let g = Tensor::from_fn(&[4], |_| rng.gen_range(-100.0..100.0));
            let mut grads = TensorMap::new();
            grads.insert("p".to_string(), g);
            let mut params = vec![("p".to_string(), &mut p)];
            rmsprop_step(&mut params, &grads, &mut state, &cfg).unwrap();
            assert!(state.v["p"].data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn first_step_magnitude_is_scale_free_once_v_dominates_eps() {
        // first nonzero step: lr*|g| / (sqrt(1-alpha)*|g| + eps) ~ lr/sqrt(1-alpha)
        let expect = 0.001 / 0.05f64.sqrt();
        for &mag in &[1e-6f64, 1.0, 1e6] {
            // trivially bounded by lr*|g|/eps in all regimes
            let cfg = OptimConfig::default();
            let mut state = OptimState::default();
            let (grads, mut p) = single("p", mag);
            let mut params = vec![("p".to_string(), &mut p)];
            rmsprop_step(&mut params, &grads, &mut state, &cfg).unwrap();
            let delta = p.data()[0].abs();
            assert!(delta <= cfg.lr * mag / cfg.eps * (1.0 + 1e-12));
            if (1.0 - cfg.alpha).sqrt() * mag > 100.0 * cfg.eps {
                assert!((delta - expect).abs() / expect < 0.01, "|g|={mag}: {delta}");
            }
            // with a small enough eps the 1% claim holds at every magnitude
            let cfg = OptimConfig {
                eps: 1e-15,
                ..OptimConfig::default()
            };
            let mut state = OptimState::default();
            let (grads, mut p) = single("p", mag);
            let mut params = vec![("p".to_string(), &mut p)];
            rmsprop_step(&mut params, &grads, &mut state, &cfg).unwrap();
            let delta = p.data()[0].abs();
            assert!((delta - expect).abs() / expect < 0.01, "eps-free |g|={mag}: {delta}");
        }
    }

    #[test]
    fn mismatched_registries_are_rejected() {
        let cfg = OptimConfig::default();
        let mut state = OptimState::default();
        let (_, mut p) = single("p", 1.0);
        let mut grads = TensorMap::new();
        grads.insert("q".to_string(), Tensor::zeros(&[1]));
        let mut params = vec![("p".to_string(), &mut p)];
        assert!(rmsprop_step(&mut params, &grads, &mut state, &cfg).is_err());

        let mut grads = TensorMap::new();
        grads.insert("p".to_string(), Tensor::zeros(&[2]));
        let mut params = vec![("p".to_string(), &mut p)];
        assert!(rmsprop_step(&mut params, &grads, &mut state, &cfg).is_err());
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let cfg = OptimConfig::default();
        let mut state = OptimState::default();
        let mut p = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let mut q = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let mut grads = TensorMap::new();
        grads.insert("a".to_string(), Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap());
        grads.insert("b".to_string(), Tensor::from_vec(&[1], vec![f64::NAN]).unwrap());
        let mut params = vec![("a".to_string(), &mut p), ("b".to_string(), &mut q)];
        assert!(rmsprop_step(&mut params, &grads, &mut state, &cfg).is_err());
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(q.data(), &[3.0]);
        assert_eq!(state.step, 0);
        assert!(state.v.is_empty());
    }
}
