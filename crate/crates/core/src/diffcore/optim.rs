use serde::{Deserialize, Serialize};

use super::{DiffError, Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum OptimizerKind {
    /// Plain gradient step: `p ← p ± lr·g`.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Direction::Ascent => 1.0,
            Direction::Descent => -1.0,
        }
    }
}

/// Learning rate, step counter, and (for Adam) moment estimates of one store.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    clip_norm: Option<f64>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self, DiffError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(DiffError::LearningRate(lr));
        }
        Ok(Self {
            kind,
            lr,
            steps: 0,
            clip_norm: None,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    /// Rescales each update so its global L2 norm is at most `max_norm`.
    pub fn with_clip_norm(mut self, max_norm: Option<f64>) -> Self {
        self.clip_norm = max_norm;
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    /// Applies one update to every tensor of `store`. Every tensor must have a
    /// gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, direction: Direction) -> Result<(), DiffError> {
        let mut gs = Vec::with_capacity(store.len());
        for i in 0..store.len() {
            let key = store.key(i);
            let g = grads.get(key).ok_or_else(|| DiffError::MissingGradient {
                group: key.group,
                index: key.index,
                name: store.name(i).to_string(),
            })?;
            if g.len() != store.tensor(i).len() {
                return Err(DiffError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: store.tensor(i).shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            gs.push(g);
        }
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = gs
                    .iter()
                    .flat_map(|g| g.data().iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let sign = direction.sign();
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, g) in gs.iter().enumerate() {
                    for (p, gv) in store.tensor_mut(i).data_mut().iter_mut().zip(g.data()) {
                        *p += sign * self.lr * clip * gv;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = gs.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, g) in gs.iter().enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    let p = store.tensor_mut(i).data_mut();
                    for j in 0..p.len() {
                        let gv = clip * g.data()[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gv;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gv * gv;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        p[j] += sign * self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn store_with(v: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.add("p", Tensor::row(vec![v]));
        s
    }

    fn grad(store: &ParamStore, g: f64) -> Gradients {
        let mut gr = Gradients::new();
        gr.insert(store.key(0), Tensor::row(vec![g]));
        gr
    }

    #[test]
    fn plain_ascent_adds_scaled_gradient() {
        let mut s = store_with(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1).unwrap();
        let g = grad(&s, 2.0);
        opt.step(&mut s, &g, Direction::Ascent).unwrap();
        assert!((s.tensor(0).data()[0] - 1.2).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::adam()] {
            let mut s = store_with(0.7);
            let mut opt = OptimizerState::new(kind, 0.5).unwrap();
            let g = grad(&s, 0.0);
            opt.step(&mut s, &g, Direction::Descent).unwrap();
            assert_eq!(s.tensor(0).data()[0], 0.7);
        }
    }

    #[test]
    fn two_sgd_steps_equal_one_summed_step() {
        let mut a = store_with(0.3);
        let mut b = store_with(0.3);
        let mut oa = OptimizerState::new(OptimizerKind::Sgd, 0.05).unwrap();
        let mut ob = OptimizerState::new(OptimizerKind::Sgd, 0.05).unwrap();
        let (g1, g2, g3) = (grad(&a, 1.7), grad(&a, -0.4), grad(&b, 1.3));
        oa.step(&mut a, &g1, Direction::Ascent).unwrap();
        oa.step(&mut a, &g2, Direction::Ascent).unwrap();
        ob.step(&mut b, &g3, Direction::Ascent).unwrap();
        assert!((a.tensor(0).data()[0] - b.tensor(0).data()[0]).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut s = store_with(1.0);
        s.add("q", Tensor::row(vec![2.0]));
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, 0.1).unwrap();
        let g = grad(&s, 1.0);
        let err = opt.step(&mut s, &g, Direction::Ascent).unwrap_err();
        assert!(matches!(err, DiffError::MissingGradient { index: 1, .. }));
    }

    #[test]
    fn non_positive_learning_rate_is_rejected() {
        assert!(OptimizerState::new(OptimizerKind::Sgd, 0.0).is_err());
        assert!(OptimizerState::new(OptimizerKind::Sgd, -1e-5).is_err());
    }
}
