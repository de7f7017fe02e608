use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::{Element, ParamGrads, ParamStore, Tensor};

/// Moment estimates, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn zeros(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }

    /// Checks that the moments line up with `store`.
    pub fn matches(&self, store: &ParamStore<T>) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .all(|(id, p)| self.m[id.index()].shape() == p.value.shape() && self.v[id.index()].shape() == p.value.shape())
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T: Element> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub state: AdamState<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: &TrainConfig, store: &ParamStore<T>) -> Self {
        Adam {
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            state: AdamState::zeros(store),
        }
    }

    pub fn with_state(config: &TrainConfig, store: &ParamStore<T>, state: AdamState<T>) -> Result<Self> {
        if !state.matches(store) {
            return Err(Error::Checkpoint("optimizer state does not match the model parameters".into()));
        }
        Ok(Adam { state, ..Adam::new(config, store) })
    }

    /// One update of every trainable parameter that received a gradient.
    /// Gradients are checked for finiteness before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", store.get(id).name)));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::from_f64(self.learning_rate), T::from_f64(self.epsilon));
        for (id, g) in grads.iter() {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let m = self.state.m[id.index()].data_mut();
            let v = self.state.v[id.index()].data_mut();
            for (((theta, &g), m), v) in param.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
