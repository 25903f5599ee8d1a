use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Fresh optimizer state for parameters of the given shapes.
    pub fn new<'a>(config: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid("adam", format!("learning rate {} must be positive", config.lr)));
        }
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        Ok(Self {
            config,
            step: 0,
            m,
            v,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` belongs to `params[i]`; a `None`
    /// gradient is treated as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != params[i].shape() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient {:?} for parameter {:?}", g.shape(), params[i].shape()),
                ));
            }
            if let Some(pos) = g.data().iter().position(|v| v.is_nan()) {
                return Err(Error::non_finite(
                    "adam",
                    format!("NaN in gradient of parameter #{i} at element {pos}"),
                ));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let m = m.data_mut();
            let v = v.data_mut();
            let gd = g.map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = gd.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
        Ok(())
    }

    /// Moments and step counter as named tensors, for checkpointing.
    pub fn state_tensors(&self, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = vec![("step".to_string(), Tensor::scalar(self.step as f32))];
        for (name, (m, v)) in names.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("m.{name}"), m.clone()));
            out.push((format!("v.{name}"), v.clone()));
        }
        out
    }

    /// Rebuilds optimizer state saved by [`Adam::state_tensors`].
    pub fn from_state(config: AdamConfig, names: &[String], state: &[(String, Tensor)]) -> Result<Self> {
        let find = |key: &str| {
            state
                .iter()
                .find(|(n, _)| n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::invalid("adam", format!("missing optimizer entry {key}")))
        };
        let step = find("step")?.item() as u64;
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in names {
            m.push(find(&format!("m.{name}"))?);
            v.push(find(&format!("v.{name}"))?);
        }
        Ok(Self { config, step, m, v })
    }
}
