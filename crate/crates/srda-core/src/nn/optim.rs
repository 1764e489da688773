//! Gradient-descent optimizers with serializable state.

use ndarray::ArrayD;

use super::Param;

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

/// Snapshot of Adam's moment estimates, for checkpointing.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
            self.v = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn restore(&mut self, state: AdamState) {
        self.t = state.t;
        self.m = state.m;
        self.v = state.v;
    }
}

/// Plain SGD with heavy-ball momentum.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.velocity.is_empty() {
            self.velocity = params
                .iter()
                .map(|p| ArrayD::zeros(p.value.raw_dim()))
                .collect();
        }
        for (i, p) in params.iter_mut().enumerate() {
            let v = &mut self.velocity[i];
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(v)
                .for_each(|w, &g, v| {
                    *v = self.momentum * *v + g;
                    *w -= self.lr * *v;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn quad_param(x0: f64) -> Param {
        Param::new(arr1(&[x0]).into_dyn())
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = quad_param(3.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            p.zero_grad();
            let x = p.value[0];
            p.grad[0] = 2.0 * x; // d/dx x^2
            opt.step(&mut [&mut p]);
        }
        assert!(p.value[0].abs() < 1e-2);
    }

    #[test]
    fn sgd_momentum_hand_steps() {
        let mut p = quad_param(1.0);
        let mut opt = SgdMomentum::new(0.5, 0.9);
        p.grad[0] = 1.0;
        opt.step(&mut [&mut p]);
        assert!((p.value[0] - 0.5).abs() < 1e-15); // v=1, w=1-0.5
        p.zero_grad();
        p.grad[0] = 1.0;
        opt.step(&mut [&mut p]);
        // v = 0.9*1 + 1 = 1.9, w = 0.5 - 0.95
        assert!((p.value[0] + 0.45).abs() < 1e-12);
    }

    #[test]
    fn adam_state_roundtrip_resumes_identically() {
        let run = |restore_at: Option<usize>| -> f64 {
            let mut p = quad_param(2.0);
            let mut opt = Adam::new(0.05);
            let mut saved = None;
            for i in 0..20 {
                if Some(i) == restore_at {
                    saved = Some((opt.state(), p.value[0]));
                }
                p.zero_grad();
                p.grad[0] = 2.0 * p.value[0];
                opt.step(&mut [&mut p]);
            }
            if let Some((state, w)) = saved {
                // Replay the tail from the snapshot.
                let mut p2 = quad_param(w);
                let mut opt2 = Adam::new(0.05);
                // Prime the state vectors.
                p2.zero_grad();
                opt2.restore(state);
                for _ in restore_at.unwrap()..20 {
                    p2.zero_grad();
                    p2.grad[0] = 2.0 * p2.value[0];
                    opt2.step(&mut [&mut p2]);
                }
                assert_eq!(p2.value[0], p.value[0]);
            }
            p.value[0]
        };
        run(Some(7));
    }
}
