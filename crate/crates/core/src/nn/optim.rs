use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DenseNetwork, Gradients};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    /// Mini-batch gradient descent without momentum.
    BatchGd,
    /// Mini-batch SGD with a linearly ramped momentum coefficient.
    SgdMomentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum_start: f64,
    #[serde(default)]
    pub momentum_end: f64,
    pub batch_size: usize,
    /// Number of epochs.
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn gd(learning_rate: f64, batch_size: usize, iterations: usize) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::BatchGd,
            learning_rate,
            momentum_start: 0.0,
            momentum_end: 0.0,
            batch_size,
            iterations,
            seed: 0,
        }
    }

    pub fn momentum(learning_rate: f64, batch_size: usize, iterations: usize, start: f64, end: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum_start: start,
            momentum_end: end,
            batch_size,
            iterations,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0 <= self.momentum_start && self.momentum_start <= self.momentum_end && self.momentum_end < 1.0) {
            return Err(Error::invalid(format!(
                "momentum range {}..{} must satisfy 0 <= start <= end < 1",
                self.momentum_start, self.momentum_end
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Momentum coefficient at epoch `t`, ramped linearly over all epochs.
    pub fn momentum_at(&self, t: usize) -> f64 {
        match self.kind {
            OptimizerKind::BatchGd => 0.0,
            OptimizerKind::SgdMomentum => {
                if self.iterations <= 1 {
                    self.momentum_start
                } else {
                    let frac = (t.min(self.iterations - 1)) as f64 / (self.iterations - 1) as f64;
                    self.momentum_start + (self.momentum_end - self.momentum_start) * frac
                }
            }
        }
    }
}

/// Optimizer state: one velocity buffer per layer plus a freeze flag.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    velocity: Vec<(Array2<f64>, Array1<f64>)>,
    frozen: Vec<bool>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &DenseNetwork) -> Result<Self> {
        config.validate()?;
        let velocity = net.layers.iter().map(|l| (Array2::zeros(l.weights.dim()), Array1::zeros(l.biases.len()))).collect();
        Ok(Optimizer { config, velocity, frozen: vec![false; net.layers.len()] })
    }

    /// Layers with `frozen[i] == true` are never updated.
    pub fn freeze(&mut self, layers: &[usize]) {
        for &i in layers {
            if let Some(f) = self.frozen.get_mut(i) {
                *f = true;
            }
        }
    }

    pub fn step(&mut self, net: &mut DenseNetwork, grads: &Gradients, epoch: usize) -> Result<()> {
        if grads.layers.len() != net.layers.len() {
            return Err(Error::shape("gradient depth does not match network"));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { stage: "optimizer step (gradient)".into(), iteration: epoch });
        }
        let lr = self.config.learning_rate;
        let mu = self.config.momentum_at(epoch);
        for (i, (layer, g)) in net.layers.iter_mut().zip(&grads.layers).enumerate() {
            if self.frozen[i] {
                continue;
            }
            if g.weights.dim() != layer.weights.dim() || g.biases.len() != layer.biases.len() {
                return Err(Error::shape(format!("gradient shape mismatch at layer {i}")));
            }
            match self.config.kind {
                OptimizerKind::BatchGd => {
                    layer.weights.scaled_add(-lr, &g.weights);
                    layer.biases.scaled_add(-lr, &g.biases);
                }
                OptimizerKind::SgdMomentum => {
                    let (vw, vb) = &mut self.velocity[i];
                    *vw *= mu;
                    vw.scaled_add(-lr, &g.weights);
                    *vb *= mu;
                    vb.scaled_add(-lr, &g.biases);
                    layer.weights += &*vw;
                    layer.biases += &*vb;
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::NonFinite { stage: "optimizer step (parameters)".into(), iteration: epoch });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, LayerGrad};
    use ndarray::array;

    fn scalar_net(w: f64) -> DenseNetwork {
        DenseNetwork::new(vec![DenseLayer { weights: array![[w]], biases: array![0.0], activation: Activation::Identity }], None)
            .unwrap()
    }

    fn grad(g: f64) -> Gradients {
        Gradients { layers: vec![LayerGrad { weights: array![[g]], biases: array![0.0] }], input: array![[0.0]], side: None }
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let mut net = scalar_net(1.5);
        let mut opt = Optimizer::new(OptimizerConfig::momentum(0.0, 1, 10, 0.1, 0.9), &net).unwrap();
        opt.step(&mut net, &grad(3.0), 0).unwrap();
        opt.step(&mut net, &grad(-7.0), 1).unwrap();
        assert_eq!(net.layers[0].weights[[0, 0]], 1.5);
    }

    #[test]
    fn zero_momentum_matches_plain_gd() {
        let mut a = scalar_net(1.0);
        let mut b = scalar_net(1.0);
        let mut oa = Optimizer::new(OptimizerConfig::momentum(0.1, 1, 5, 0.0, 0.0), &a).unwrap();
        let mut ob = Optimizer::new(OptimizerConfig::gd(0.1, 1, 5), &b).unwrap();
        for t in 0..3 {
            let g = 2.0 * a.layers[0].weights[[0, 0]];
            oa.step(&mut a, &grad(g), t).unwrap();
            let g = 2.0 * b.layers[0].weights[[0, 0]];
            ob.step(&mut b, &grad(g), t).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn momentum_recurrence_on_quadratic() {
        // f(x) = x^2, g = 2x, lr = 0.1, mu = 0.5, x0 = 1
        // v1 = -0.2, x1 = 0.8; v2 = 0.5*-0.2 - 0.1*1.6 = -0.26, x2 = 0.54
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::momentum(0.1, 1, 2, 0.5, 0.5), &net).unwrap();
        for t in 0..2 {
            let g = 2.0 * net.layers[0].weights[[0, 0]];
            opt.step(&mut net, &grad(g), t).unwrap();
        }
        assert!((net.layers[0].weights[[0, 0]] - 0.54).abs() < 1e-15);
    }

    #[test]
    fn momentum_ramp_endpoints() {
        let c = OptimizerConfig::momentum(0.1, 1, 5, 0.1, 0.9);
        assert_eq!(c.momentum_at(0), 0.1);
        assert!((c.momentum_at(2) - 0.5).abs() < 1e-15);
        assert_eq!(c.momentum_at(4), 0.9);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::gd(0.1, 1, 1), &net).unwrap();
        assert!(matches!(opt.step(&mut net, &grad(f64::NAN), 3), Err(Error::NonFinite { iteration: 3, .. })));
    }

    #[test]
    fn frozen_layers_stay_fixed() {
        let mut net = scalar_net(1.0);
        let mut opt = Optimizer::new(OptimizerConfig::gd(0.1, 1, 1), &net).unwrap();
        opt.freeze(&[0]);
        opt.step(&mut net, &grad(5.0), 0).unwrap();
        assert_eq!(net.layers[0].weights[[0, 0]], 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::momentum(0.1, 1, 1, 0.9, 0.1).validate().is_err());
        assert!(OptimizerConfig::momentum(0.1, 1, 1, 0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::gd(0.1, 0, 1).validate().is_err());
        assert!(OptimizerConfig::gd(-0.1, 1, 1).validate().is_err());
    }
}
