//! Small dense network engine shared by the autoencoders and the classifier.
//!
//! Batches are row-major (`batch × features`). A network may take a side
//! input that is concatenated to the activations entering one layer, which is
//! how demographics join the classifier before its output layer.

pub mod gradcheck;
mod io;
pub mod loss;
pub mod optim;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{LayerRecord, NetworkRecord};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Softmax,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Identity => {}
            Activation::Softmax => softmax_rows(z),
        }
    }

    /// Gradient w.r.t. the pre-activation given the output `a` and the
    /// gradient `g` w.r.t. `a`.
    fn backward(self, a: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Tanh => g * &a.mapv(|a| 1.0 - a * a),
            Activation::Identity => g.clone(),
            Activation::Softmax => {
                let dot = (g * a).sum_axis(Axis(1)).insert_axis(Axis(1));
                a * &(g - &dot)
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `fan_in × fan_out`.
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        DenseLayer { weights: Array2::zeros((fan_in, fan_out)), biases: Array1::zeros(fan_out), activation }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut dyn RngCore) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..=limit));
        DenseLayer { weights, biases: Array1::zeros(fan_out), activation }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.is_finite())
    }

    /// Affine map plus activation, no dropout.
    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weights) + &self.biases;
        self.activation.apply(&mut z);
        z
    }
}

/// Extra input concatenated after the activations feeding `layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SideInput {
    pub layer: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNetwork {
    pub layers: Vec<DenseLayer>,
    pub side_input: Option<SideInput>,
}

/// Intermediate values of one forward pass, consumed by [`DenseNetwork::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Actual input of each layer (after dropout and side concatenation).
    pub inputs: Vec<Array2<f64>>,
    /// Activation output of each layer, before dropout.
    pub outputs: Vec<Array2<f64>>,
    /// Inverted-dropout scale applied to `outputs[i]` before layer `i + 1`.
    pub masks: Vec<Option<Array2<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
    /// Gradient w.r.t. the network input.
    pub input: Array2<f64>,
    /// Gradient w.r.t. the side input, when present.
    pub side: Option<Array2<f64>>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|g| g.weights.iter().chain(g.biases.iter()).all(|v| v.is_finite()))
    }

    /// Flattened in [`DenseNetwork::param`] order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|g| g.weights.iter().chain(g.biases.iter()).copied()).collect()
    }
}

impl DenseNetwork {
    pub fn new(layers: Vec<DenseLayer>, side_input: Option<SideInput>) -> Result<Self> {
        let net = DenseNetwork { layers, side_input };
        net.validate()?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        if let Some(side) = self.side_input {
            if side.layer == 0 || side.layer >= self.layers.len() {
                return Err(Error::shape(format!("side input at layer {} invalid", side.layer)));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.biases.len() != l.fan_out() {
                return Err(Error::shape(format!("layer {i}: {} biases for fan_out {}", l.biases.len(), l.fan_out())));
            }
            if i > 0 {
                let expected = self.layers[i - 1].fan_out() + self.side_width_at(i);
                if l.fan_in() != expected {
                    return Err(Error::shape(format!("layer {i}: fan_in {} but upstream provides {expected}", l.fan_in())));
                }
            }
        }
        Ok(())
    }

    fn side_width_at(&self, layer: usize) -> usize {
        match self.side_input {
            Some(s) if s.layer == layer => s.dim,
            _ => 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("validated").fan_out()
    }

    pub fn forward_infer(&self, x: ArrayView2<f64>, side: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        Ok(self.forward_impl(x, side, None)?.0)
    }

    /// Forward pass with inverted dropout on every hidden layer's output.
    pub fn forward_train(
        &self,
        x: ArrayView2<f64>,
        side: Option<ArrayView2<f64>>,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::invalid(format!("dropout rate {dropout} outside [0, 1)")));
        }
        self.forward_impl(x, side, Some((dropout, rng)))
    }

    /// Forward pass that records a cache but applies no dropout.
    pub fn forward_cached(&self, x: ArrayView2<f64>, side: Option<ArrayView2<f64>>) -> Result<(Array2<f64>, ForwardCache)> {
        self.forward_impl(x, side, None)
    }

    fn forward_impl(
        &self,
        x: ArrayView2<f64>,
        side: Option<ArrayView2<f64>>,
        mut dropout: Option<(f64, &mut dyn RngCore)>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!("input has {} columns, network expects {}", x.ncols(), self.input_dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite network input"));
        }
        match (self.side_input, side) {
            (Some(s), Some(v)) if v.ncols() == s.dim && v.nrows() == x.nrows() => {
                if v.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("non-finite side input"));
                }
            }
            (None, None) => {}
            (Some(s), Some(v)) => {
                return Err(Error::shape(format!("side input {:?}, expected {} × {}", v.dim(), x.nrows(), s.dim)))
            }
            (Some(_), None) => return Err(Error::shape("network requires a side input")),
            (None, Some(_)) => return Err(Error::shape("network takes no side input")),
        }

        let n = self.layers.len();
        let mut cache = ForwardCache { inputs: Vec::with_capacity(n), outputs: Vec::with_capacity(n), masks: Vec::with_capacity(n) };
        let mut current = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 && self.side_width_at(i) > 0 {
                current = concatenate![Axis(1), current, side.expect("checked")];
            }
            let a = layer.apply(current.view());
            cache.inputs.push(current);
            let is_hidden = i + 1 < n;
            let mask = match dropout.as_mut() {
                Some((p, rng)) if is_hidden && *p > 0.0 => {
                    let keep = 1.0 / (1.0 - *p);
                    Some(a.mapv(|_| if rng.random::<f64>() < *p { 0.0 } else { keep }))
                }
                _ => None,
            };
            current = match &mask {
                Some(m) => &a * m,
                None => a.clone(),
            };
            cache.outputs.push(a);
            cache.masks.push(mask);
        }
        let out = cache.outputs.last().expect("non-empty").clone();
        Ok((out, cache))
    }

    /// Exact gradients of a loss whose gradient w.r.t. the network output is
    /// `out_grad`. `extra` adds gradient contributions w.r.t. individual
    /// layers' pre-dropout outputs (e.g. a sparsity penalty on a hidden layer).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        out_grad: ArrayView2<f64>,
        extra: &[(usize, ArrayView2<f64>)],
    ) -> Result<Gradients> {
        let n = self.layers.len();
        if cache.inputs.len() != n || cache.outputs.len() != n || cache.masks.len() != n {
            return Err(Error::shape("forward cache does not match network depth"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if cache.inputs[i].ncols() != l.fan_in() || cache.outputs[i].ncols() != l.fan_out() {
                return Err(Error::shape(format!("stale forward cache at layer {i}")));
            }
        }
        if out_grad.dim() != cache.outputs[n - 1].dim() {
            return Err(Error::shape("loss gradient shape does not match network output"));
        }

        let mut layers = vec![None; n];
        let mut side_grad = None;
        let mut g = out_grad.to_owned();
        let mut input_grad = Array2::zeros((0, 0));
        for i in (0..n).rev() {
            for (layer, eg) in extra {
                if *layer == i {
                    if eg.dim() != g.dim() {
                        return Err(Error::shape(format!("extra gradient shape mismatch at layer {i}")));
                    }
                    g += eg;
                }
            }
            let layer = &self.layers[i];
            let dz = layer.activation.backward(&cache.outputs[i], &g);
            layers[i] = Some(LayerGrad { weights: cache.inputs[i].t().dot(&dz), biases: dz.sum_axis(Axis(0)) });
            let mut gin = dz.dot(&layer.weights.t());
            if i == 0 {
                input_grad = gin;
                break;
            }
            let side_w = self.side_width_at(i);
            if side_w > 0 {
                let split = gin.ncols() - side_w;
                side_grad = Some(gin.slice(s![.., split..]).to_owned());
                gin = gin.slice(s![.., ..split]).to_owned();
            }
            if let Some(m) = &cache.masks[i - 1] {
                gin *= m;
            }
            g = gin;
        }
        Ok(Gradients { layers: layers.into_iter().map(|l| l.expect("filled")).collect(), input: input_grad, side: side_grad })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, Option<(usize, usize)>, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            let nw = l.weights.len();
            if index < nw {
                return (li, Some((index / l.fan_out(), index % l.fan_out())), 0);
            }
            index -= nw;
            if index < l.biases.len() {
                return (li, None, index);
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter by flat index: each layer's weights (row-major), then biases.
    pub fn param(&self, index: usize) -> f64 {
        match self.locate(index) {
            (l, Some(rc), _) => self.layers[l].weights[rc],
            (l, None, b) => self.layers[l].biases[b],
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        match self.locate(index) {
            (l, Some(rc), _) => self.layers[l].weights[rc] = value,
            (l, None, b) => self.layers[l].biases[b] = value,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(DenseLayer::is_finite)
    }

    /// Little-endian bytes of every parameter in flat order.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
            .flat_map(|v| v.to_le_bytes())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_outputs_zero() {
        let net = DenseNetwork::new(vec![DenseLayer::zeros(3, 4, Activation::Tanh)], None).unwrap();
        let out = net.forward_infer(array![[1.0, -2.0, 3.0]].view(), None).unwrap();
        assert_eq!(out, Array2::<f64>::zeros((1, 4)));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut z = array![[0.0, 0.0], [100.0, -100.0], [1000.0, 1000.0]];
        softmax_rows(&mut z);
        assert_eq!(z.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((z.row(1).sum() - 1.0).abs() < 1e-12);
        assert_eq!(z.row(2).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn hand_computed_toy_net() {
        // 1 -> 2 (tanh) -> 2 (softmax)
        let l1 = DenseLayer { weights: array![[0.5, -1.0]], biases: array![0.1, 0.2], activation: Activation::Tanh };
        let l2 = DenseLayer { weights: array![[1.0, -1.0], [2.0, 0.5]], biases: array![0.0, 0.3], activation: Activation::Softmax };
        let net = DenseNetwork::new(vec![l1, l2], None).unwrap();
        let out = net.forward_infer(array![[2.0]].view(), None).unwrap();
        let h1 = (0.5f64 * 2.0 + 0.1).tanh();
        let h2 = (-1.0f64 * 2.0 + 0.2).tanh();
        let z1 = h1 * 1.0 + h2 * 2.0;
        let z2 = -h1 + 0.5 * h2 + 0.3;
        let p1 = 1.0 / (1.0 + (z2 - z1).exp());
        assert!((out[[0, 0]] - p1).abs() < 1e-12);
        assert!((out[[0, 1]] - (1.0 - p1)).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let l1 = DenseLayer::zeros(3, 4, Activation::Tanh);
        let l2 = DenseLayer::zeros(5, 2, Activation::Softmax);
        assert!(DenseNetwork::new(vec![l1.clone(), l2.clone()], None).is_err());
        let net = DenseNetwork::new(vec![l1, l2], Some(SideInput { layer: 1, dim: 1 })).unwrap();
        assert!(net.forward_infer(array![[1.0, 2.0, 3.0]].view(), None).is_err());
        assert!(net.forward_infer(array![[1.0, 2.0]].view(), Some(array![[1.0]].view())).is_err());
        assert!(net.forward_infer(array![[1.0, 2.0, f64::NAN]].view(), Some(array![[1.0]].view())).is_err());
        assert!(net.forward_infer(array![[1.0, 2.0, 3.0]].view(), Some(array![[1.0]].view())).is_ok());
    }

    #[test]
    fn linear_mse_closed_form_gradient() {
        // y = x W, L = sum (y - t)^2  =>  dL/dW = 2 x^T (xW - t)
        let layer = DenseLayer { weights: array![[0.3], [-0.2]], biases: array![0.0], activation: Activation::Identity };
        let net = DenseNetwork::new(vec![layer], None).unwrap();
        let x = array![[1.0, 2.0]];
        let t = array![[0.5]];
        let (y, cache) = net.forward_cached(x.view(), None).unwrap();
        let g = net.backward(&cache, (2.0 * (&y - &t)).view(), &[]).unwrap();
        let expected = 2.0 * x.t().dot(&(&y - &t));
        assert_eq!(g.layers[0].weights, expected);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNetwork::new(
            vec![DenseLayer::init(4, 3, Activation::Tanh, &mut rng), DenseLayer::init(3, 2, Activation::Softmax, &mut rng)],
            None,
        )
        .unwrap();
        let (y, cache) = net.forward_cached(array![[0.1, 0.2, 0.3, 0.4]].view(), None).unwrap();
        let g = net.backward(&cache, Array2::zeros(y.dim()).view(), &[]).unwrap();
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DenseNetwork::new(vec![DenseLayer::init(4, 3, Activation::Tanh, &mut rng)], None).unwrap();
        let b = DenseNetwork::new(vec![DenseLayer::init(4, 2, Activation::Tanh, &mut rng)], None).unwrap();
        let (y, cache) = a.forward_cached(Array2::zeros((1, 4)).view(), None).unwrap();
        assert!(b.backward(&cache, y.view(), &[]).is_err());
    }

    #[test]
    fn dropout_train_expectation_matches_infer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNetwork::new(
            vec![DenseLayer::init(3, 50, Activation::Tanh, &mut rng), DenseLayer::init(50, 1, Activation::Identity, &mut rng)],
            None,
        )
        .unwrap();
        let x = array![[0.3, -0.4, 0.9]];
        let infer = net.forward_infer(x.view(), None).unwrap()[[0, 0]];
        let reps = 20_000;
        let mean: f64 = (0..reps).map(|_| net.forward_train(x.view(), None, 0.5, &mut rng).unwrap().0[[0, 0]]).sum::<f64>()
            / reps as f64;
        assert!((mean - infer).abs() < 0.02, "mean {mean} vs infer {infer}");
        let (no_drop, _) = net.forward_train(x.view(), None, 0.0, &mut rng).unwrap();
        assert_eq!(no_drop[[0, 0]], infer);
    }

    #[test]
    fn flat_param_access_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = DenseNetwork::new(
            vec![DenseLayer::init(2, 3, Activation::Tanh, &mut rng), DenseLayer::init(3, 2, Activation::Softmax, &mut rng)],
            None,
        )
        .unwrap();
        assert_eq!(net.param_count(), 2 * 3 + 3 + 3 * 2 + 2);
        net.set_param(7, 42.0);
        assert_eq!(net.layers[0].biases[1], 42.0);
        net.set_param(9, -1.0);
        assert_eq!(net.layers[1].weights[[0, 0]], -1.0);
        assert_eq!(net.param(9), -1.0);
    }
}
