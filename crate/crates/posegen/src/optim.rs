//! Adam optimizer over named parameter stores.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use crate::nets::ParamStore;

pub const ADAM_EPS: f64 = 1e-8;

/// Adam state: first/second moment estimates shaped like the parameters,
/// plus the step counter used for bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub m: ParamStore,
    pub v: ParamStore,
    pub steps: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        let zeros_like = |s: &ParamStore| -> ParamStore {
            s.iter().map(|(k, t)| (k.clone(), ArrayD::zeros(IxDyn(t.shape())))).collect()
        };
        Self {
            learning_rate,
            beta1,
            beta2,
            m: zeros_like(params),
            v: zeros_like(params),
            steps: 0,
        }
    }

    /// One update: `m`/`v` exponential moving averages with bias
    /// correction, then `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            let m = self.m.get_mut(name).expect("moment matches params");
            let v = self.v.get_mut(name).expect("moment matches params");
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn single_step_matches_hand_computed_oracle() {
        // Two parameters, one step, worked by hand from the update rule:
        //   m1 = (1-b1) g        m_hat = m1 / (1-b1) = g
        //   v1 = (1-b2) g^2      v_hat = v1 / (1-b2) = g^2
        //   p' = p - lr * g / (|g| + eps)
        let (lr, b1, b2) = (0.01, 0.5, 0.9);
        let p0 = [0.3, -0.2];
        let g0 = [0.1, -0.4];

        let mut params: ParamStore =
            [("p".to_string(), arr1(&p0).into_dyn())].into_iter().collect();
        let mut adam = Adam::new(&params, lr, b1, b2);
        let grads: BTreeMap<_, _> =
            [("p".to_string(), arr1(&g0).into_dyn())].into_iter().collect();
        adam.step(&mut params, &grads);

        for i in 0..2 {
            let want = p0[i] - lr * g0[i] / (g0[i].abs() + ADAM_EPS);
            let got = params["p"].as_slice().unwrap()[i];
            assert!(
                (got - want).abs() <= 1e-10,
                "param {i}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn two_steps_match_explicit_recurrence() {
        let (lr, b1, b2) = (0.05, 0.9, 0.999);
        let p0 = 1.0;
        let g1 = 0.3;
        let g2 = -0.7;

        let mut params: ParamStore =
            [("p".to_string(), arr1(&[p0]).into_dyn())].into_iter().collect();
        let mut adam = Adam::new(&params, lr, b1, b2);
        for g in [g1, g2] {
            let grads: BTreeMap<_, _> =
                [("p".to_string(), arr1(&[g]).into_dyn())].into_iter().collect();
            adam.step(&mut params, &grads);
        }

        // explicit recurrence
        let mut m = 0.0;
        let mut v = 0.0;
        let mut p = p0;
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        let got = params["p"].as_slice().unwrap()[0];
        assert!((got - p).abs() <= 1e-12, "got {got}, want {p}");
    }

    #[test]
    fn missing_grads_leave_params_untouched() {
        let mut params: ParamStore =
            [("a".to_string(), arr1(&[1.0]).into_dyn()), ("b".to_string(), arr1(&[2.0]).into_dyn())]
                .into_iter()
                .collect();
        let mut adam = Adam::new(&params, 0.1, 0.5, 0.9);
        let grads: BTreeMap<_, _> =
            [("a".to_string(), arr1(&[1.0]).into_dyn())].into_iter().collect();
        adam.step(&mut params, &grads);
        assert_eq!(params["b"].as_slice().unwrap()[0], 2.0);
        assert_ne!(params["a"].as_slice().unwrap()[0], 1.0);
    }
}
