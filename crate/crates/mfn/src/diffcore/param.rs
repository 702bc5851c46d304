//! Trainable parameters and the Adam optimizer.

use super::matrix::Matrix;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable matrix with its gradient and Adam moment accumulators.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Matrix,
    pub gradient: Matrix,
    pub adam_m: Matrix,
    pub adam_v: Matrix,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Parameter {
            value,
            gradient: Matrix::zeros(r, c),
            adam_m: Matrix::zeros(r, c),
            adam_v: Matrix::zeros(r, c),
            step_count: 0,
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Owns every trainable parameter of a model, in a stable insertion order.
///
/// Names are unique and double as section keys in checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Parameter::new(value));
        self.names.push(name);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(self.params[id.0].value.shape(), value.shape());
        self.params[id.0].value = value;
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].gradient
    }

    pub fn add_to_grad(&mut self, id: ParamId, delta: &Matrix) {
        let g = &mut self.params[id.0].gradient;
        assert_eq!(g.shape(), delta.shape());
        for (gi, di) in g.data_mut().iter_mut().zip(delta.data().iter()) {
            *gi += di;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.gradient.data_mut().fill(0.0);
        }
    }

    /// One bias-corrected Adam update over every parameter, then clears all
    /// gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        for p in &mut self.params {
            p.step_count += 1;
            let t = p.step_count as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let value = p.value.data_mut();
            let grad = p.gradient.data_mut();
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            grad.fill(0.0);
        }
    }

    /// One plain SGD step (value -= lr * grad), then clears all gradients.
    pub fn sgd_step(&mut self, lr: f64) {
        for p in &mut self.params {
            p.step_count += 1;
            let value = p.value.data_mut();
            let grad = p.gradient.data_mut();
            for i in 0..value.len() {
                value[i] -= lr * grad[i];
            }
            grad.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_value_unchanged() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_rows(&[vec![1.5, -2.0]]));
        store.adam_step(&AdamConfig::with_lr(0.1));
        assert_eq!(store.value(id), &Matrix::from_rows(&[vec![1.5, -2.0]]));
    }

    #[test]
    fn first_step_moves_by_lr_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::from_rows(&[vec![0.0, 0.0]]));
        store.add_to_grad(id, &Matrix::from_rows(&[vec![3.0, -0.25]]));
        let lr = 1e-2;
        store.adam_step(&AdamConfig::with_lr(lr));
        let v = store.value(id);
        // Bias-corrected first step is -lr * g / (|g| + eps'), magnitude <= lr.
        assert!(v.get(0, 0) < 0.0 && v.get(0, 1) > 0.0);
        assert!(v.get(0, 0).abs() <= lr * (1.0 + 1e-6));
        assert!(v.get(0, 1).abs() <= lr * (1.0 + 1e-6));
        assert!((v.get(0, 0).abs() - lr).abs() < 1e-6);
    }

    #[test]
    fn two_steps_match_scalar_adam_trace() {
        // Independent scalar Adam, followed by the store on the same gradients.
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let grads = [0.7, 0.7];
        let mut theta = 0.2_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }

        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(0.2));
        let cfg = AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        };
        for g in grads {
            store.add_to_grad(id, &Matrix::scalar(g));
            store.adam_step(&cfg);
        }
        assert_eq!(store.value(id).item(), theta, "store must replay the oracle trace");
    }

    #[test]
    fn adam_clears_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(0.0));
        store.add_to_grad(id, &Matrix::scalar(1.0));
        store.adam_step(&AdamConfig::default());
        assert_eq!(store.grad(id).item(), 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Matrix::scalar(0.0));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            store.add("w", Matrix::scalar(1.0))
        }));
        assert!(result.is_err());
    }
}
