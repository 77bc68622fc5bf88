//! Stacked sparse denoising autoencoder: greedy layer-wise pre-training of
//! two autoencoders whose encoders seed the classifier.
//!
//! Each autoencoder minimises
//! `mean reconstruction loss + β · Σ_j KL(ρ ‖ ρ̂_j)` where the input is
//! corrupted by masking noise and the target is the clean input. Hidden
//! units use tanh, so `ρ̂_j` is the batch mean of `(a + 1) / 2`.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::loss::{self, LOG_EPS};
use crate::nn::{Activation, DenseLayer, DenseNetwork, Gradients, NetworkRecord, Optimizer, OptimizerConfig};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionLoss {
    Mse,
    /// Bernoulli cross-entropy on tanh outputs mapped to [0, 1].
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub hidden_dim: usize,
    pub noise_proportion: f64,
    pub sparsity_target: f64,
    pub sparsity_weight: f64,
    pub dropout_rate: f64,
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_loss")]
    pub loss: ReconstructionLoss,
}

fn default_loss() -> ReconstructionLoss {
    ReconstructionLoss::Mse
}

impl AutoencoderConfig {
    /// First autoencoder (n-1000-n).
    pub fn ae1() -> Self {
        AutoencoderConfig {
            hidden_dim: 1000,
            noise_proportion: 0.3,
            sparsity_target: 0.5,
            sparsity_weight: 0.2,
            dropout_rate: 0.5,
            optimizer: OptimizerConfig::gd(0.001, 100, 700),
            loss: ReconstructionLoss::Mse,
        }
    }

    /// Second autoencoder. Hidden width 500 so the encoder transfers into
    /// the classifier's 500-unit layer.
    pub fn ae2() -> Self {
        AutoencoderConfig {
            hidden_dim: 500,
            noise_proportion: 0.1,
            sparsity_target: 0.5,
            sparsity_weight: 0.2,
            dropout_rate: 0.5,
            optimizer: OptimizerConfig::gd(0.001, 10, 1000),
            loss: ReconstructionLoss::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::invalid("autoencoder hidden_dim must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.noise_proportion) {
            return Err(Error::invalid(format!("noise_proportion {} outside [0, 1]", self.noise_proportion)));
        }
        if !(self.sparsity_target > 0.0 && self.sparsity_target < 1.0) {
            return Err(Error::invalid(format!("sparsity_target {} outside (0, 1)", self.sparsity_target)));
        }
        if !(self.sparsity_weight >= 0.0) {
            return Err(Error::invalid("sparsity_weight must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeLosses {
    pub reconstruction: f64,
    pub sparsity: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedAutoencoder {
    pub encoder: DenseLayer,
    pub decoder: DenseLayer,
    pub config: AutoencoderConfig,
    /// Clean-input (no noise, no dropout) objective on the training data.
    pub final_losses: AeLosses,
    /// Mean minibatch objective per epoch.
    pub history: Vec<f64>,
}

/// Masking noise: zeroes a uniformly random `⌊proportion · dim⌋` subset.
pub fn corrupt(input: &[f64], proportion: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let mut out = input.to_vec();
    let k = ((proportion.clamp(0.0, 1.0) * input.len() as f64) + 1e-9).floor() as usize;
    for i in index::sample(rng, input.len(), k.min(input.len())) {
        out[i] = 0.0;
    }
    out
}

/// Row-wise [`corrupt`].
pub fn corrupt_rows(x: ArrayView2<f64>, proportion: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let mut out = x.to_owned();
    if proportion <= 0.0 {
        return out;
    }
    for mut row in out.rows_mut() {
        let noisy = corrupt(row.as_slice().expect("standard layout"), proportion, rng);
        row.assign(&ndarray::ArrayView1::from(&noisy));
    }
    out
}

/// `ρ log(ρ/ρ̂) + (1 − ρ) log((1 − ρ)/(1 − ρ̂))`.
pub fn kl_divergence(rho: f64, rho_hat: f64) -> f64 {
    let r = rho_hat.clamp(LOG_EPS, 1.0 - LOG_EPS);
    rho * (rho / r).ln() + (1.0 - rho) * ((1.0 - rho) / (1.0 - r)).ln()
}

/// KL sparsity penalty summed over hidden units, with its gradient w.r.t.
/// the tanh activations `hidden` (`batch × units`).
pub fn sparsity_penalty(hidden: ArrayView2<f64>, rho: f64) -> (f64, Array2<f64>) {
    let m = hidden.nrows().max(1) as f64;
    let rho_hat = hidden.mapv(|a| (a + 1.0) / 2.0).mean_axis(Axis(0)).expect("rows");
    let mut value = 0.0;
    let mut dunit = Vec::with_capacity(rho_hat.len());
    for &r in rho_hat.iter() {
        value += kl_divergence(rho, r);
        let clamped = !(LOG_EPS..=1.0 - LOG_EPS).contains(&r);
        dunit.push(if clamped { 0.0 } else { -rho / r + (1.0 - rho) / (1.0 - r) });
    }
    let mut grad = Array2::zeros(hidden.dim());
    for mut row in grad.rows_mut() {
        for (g, d) in row.iter_mut().zip(&dunit) {
            *g = d / (2.0 * m);
        }
    }
    (value, grad)
}

fn reconstruction(kind: ReconstructionLoss, pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    match kind {
        ReconstructionLoss::Mse => loss::mse(pred, target),
        ReconstructionLoss::CrossEntropy => loss::tanh_bernoulli_cross_entropy(pred, target),
    }
}

/// Objective on one batch: forward with dropout drawn from `rng`, no backward.
pub fn objective_value(
    net: &DenseNetwork,
    clean: ArrayView2<f64>,
    corrupted: ArrayView2<f64>,
    config: &AutoencoderConfig,
    rng: &mut dyn RngCore,
) -> Result<AeLosses> {
    let (out, cache) = net.forward_train(corrupted, None, config.dropout_rate, rng)?;
    let (recon, _) = reconstruction(config.loss, out.view(), clean)?;
    let (kl, _) = sparsity_penalty(cache.outputs[0].view(), config.sparsity_target);
    Ok(AeLosses { reconstruction: recon, sparsity: kl, objective: recon + config.sparsity_weight * kl })
}

/// Objective and exact gradients on one batch.
pub fn objective_and_gradients(
    net: &DenseNetwork,
    clean: ArrayView2<f64>,
    corrupted: ArrayView2<f64>,
    config: &AutoencoderConfig,
    rng: &mut dyn RngCore,
) -> Result<(AeLosses, Gradients)> {
    let (out, cache) = net.forward_train(corrupted, None, config.dropout_rate, rng)?;
    let (recon, g_out) = reconstruction(config.loss, out.view(), clean)?;
    let (kl, g_hidden) = sparsity_penalty(cache.outputs[0].view(), config.sparsity_target);
    let g_hidden = g_hidden * config.sparsity_weight;
    let grads = net.backward(&cache, g_out.view(), &[(0, g_hidden.view())])?;
    Ok((AeLosses { reconstruction: recon, sparsity: kl, objective: recon + config.sparsity_weight * kl }, grads))
}

/// Freshly initialised encoder/decoder pair.
pub fn init_autoencoder(input_dim: usize, hidden_dim: usize, rng: &mut dyn RngCore) -> DenseNetwork {
    DenseNetwork::new(
        vec![
            DenseLayer::init(input_dim, hidden_dim, Activation::Tanh, rng),
            DenseLayer::init(hidden_dim, input_dim, Activation::Tanh, rng),
        ],
        None,
    )
    .expect("consistent shapes")
}

pub fn train_autoencoder(features: ArrayView2<f64>, config: &AutoencoderConfig, seed: u64) -> Result<TrainedAutoencoder> {
    config.validate()?;
    let (n, dim) = features.dim();
    if n == 0 || dim == 0 {
        return Err(Error::invalid("autoencoder needs at least one sample and one feature"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = init_autoencoder(dim, config.hidden_dim, &mut rng);
    let mut opt = Optimizer::new(config.optimizer.clone(), &net)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.optimizer.iterations);

    for epoch in 0..config.optimizer.iterations {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.optimizer.batch_size) {
            let clean = features.select(Axis(0), batch);
            let noisy = corrupt_rows(clean.view(), config.noise_proportion, &mut rng);
            let (losses, grads) = objective_and_gradients(&net, clean.view(), noisy.view(), config, &mut rng)?;
            if !losses.objective.is_finite() {
                return Err(Error::NonFinite { stage: "autoencoder objective".into(), iteration: epoch });
            }
            opt.step(&mut net, &grads, epoch)?;
            total += losses.objective;
            batches += 1;
        }
        history.push(total / batches as f64);
        log::trace!("ae hidden={} epoch={epoch} objective={:.6}", config.hidden_dim, total / batches as f64);
    }

    let mut layers = net.layers.into_iter();
    let encoder = layers.next().expect("encoder");
    let decoder = layers.next().expect("decoder");
    let mut ae = TrainedAutoencoder {
        encoder,
        decoder,
        config: config.clone(),
        final_losses: AeLosses { reconstruction: 0.0, sparsity: 0.0, objective: 0.0 },
        history,
    };
    ae.final_losses = ae.evaluate(features)?;
    Ok(ae)
}

impl TrainedAutoencoder {
    pub fn network(&self) -> DenseNetwork {
        DenseNetwork::new(vec![self.encoder.clone(), self.decoder.clone()], None).expect("consistent shapes")
    }

    /// Hidden codes of clean inputs.
    pub fn encode(&self, features: ArrayView2<f64>) -> Array2<f64> {
        self.encoder.apply(features)
    }

    /// Objective on clean inputs without dropout.
    pub fn evaluate(&self, features: ArrayView2<f64>) -> Result<AeLosses> {
        let net = self.network();
        let (out, cache) = net.forward_cached(features, None)?;
        let (recon, _) = reconstruction(self.config.loss, out.view(), features)?;
        let (kl, _) = sparsity_penalty(cache.outputs[0].view(), self.config.sparsity_target);
        Ok(AeLosses { reconstruction: recon, sparsity: kl, objective: recon + self.config.sparsity_weight * kl })
    }

    pub fn to_record(&self, role: &str) -> AutoencoderRecord {
        AutoencoderRecord {
            network: self.network().to_record(role),
            config: self.config.clone(),
            final_losses: self.final_losses,
        }
    }

    pub fn from_record(rec: &AutoencoderRecord) -> Result<Self> {
        let net = DenseNetwork::from_record(&rec.network)?;
        if net.layers.len() != 2 {
            return Err(Error::shape("autoencoder record must have 2 layers"));
        }
        let mut layers = net.layers.into_iter();
        Ok(TrainedAutoencoder {
            encoder: layers.next().expect("2"),
            decoder: layers.next().expect("2"),
            config: rec.config.clone(),
            final_losses: rec.final_losses,
            history: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderRecord {
    pub network: NetworkRecord,
    pub config: AutoencoderConfig,
    pub final_losses: AeLosses,
}

/// Greedy stacking: AE1 on the features, then AE2 on AE1's clean codes.
pub fn stack(features: ArrayView2<f64>, configs: &[AutoencoderConfig; 2], seed: u64) -> Result<[TrainedAutoencoder; 2]> {
    let ae1 = train_autoencoder(features, &configs[0], seeds::derive(seed, &[seeds::tag("AE1")]))?;
    let codes = ae1.encode(features);
    let ae2 = train_autoencoder(codes.view(), &configs[1], seeds::derive(seed, &[seeds::tag("AE2")]))?;
    Ok([ae1, ae2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_config(hidden: usize, beta: f64, noise: f64, iters: usize) -> AutoencoderConfig {
        AutoencoderConfig {
            hidden_dim: hidden,
            noise_proportion: noise,
            sparsity_target: 0.5,
            sparsity_weight: beta,
            dropout_rate: 0.0,
            optimizer: OptimizerConfig::momentum(0.05, 5, iters, 0.5, 0.9),
            loss: ReconstructionLoss::Mse,
        }
    }

    #[test]
    fn corrupt_extremes_and_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f64> = (1..=3000).map(f64::from).collect();
        assert_eq!(corrupt(&x, 0.0, &mut rng), x);
        assert!(corrupt(&x, 1.0, &mut rng).iter().all(|v| *v == 0.0));
        for _ in 0..5 {
            let c = corrupt(&x, 0.3, &mut rng);
            assert_eq!(c.iter().filter(|v| **v == 0.0).count(), 900);
            assert!(c.iter().zip(&x).all(|(c, x)| *c == 0.0 || c == x));
        }
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_divergence(0.5, 0.5), 0.0);
        let expected = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((kl_divergence(0.5, 0.25) - expected).abs() < 1e-15);
        assert!((kl_divergence(0.5, 0.25) - 0.14384).abs() < 1e-5);
        // tanh activation -0.5 maps to 0.25
        let (v, _) = sparsity_penalty(array![[-0.5]].view(), 0.5);
        assert!((v - expected).abs() < 1e-15);
        let (v, g) = sparsity_penalty(array![[0.0, 0.0], [0.0, 0.0]].view(), 0.5);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn plain_autoencoder_reaches_near_identity() {
        let x = array![
            [0.1, -0.2, 0.3, 0.0, 0.5],
            [-0.4, 0.2, 0.1, 0.3, -0.1],
            [0.2, 0.2, -0.3, 0.1, 0.0],
            [0.0, -0.5, 0.4, -0.2, 0.2],
            [0.3, 0.1, 0.0, -0.4, -0.3]
        ];
        let mut cfg = small_config(5, 0.0, 0.0, 400);
        cfg.optimizer.batch_size = 5;
        let ae = train_autoencoder(x.view(), &cfg, 1).unwrap();
        assert!(ae.final_losses.reconstruction < 0.01, "{:?}", ae.final_losses);
    }

    #[test]
    fn zero_iterations_returns_initialised_pair() {
        let x = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 7 + j) as f64).sin());
        let cfgs = [small_config(4, 0.2, 0.3, 0), small_config(3, 0.2, 0.1, 0)];
        let [a, b] = stack(x.view(), &cfgs, 9).unwrap();
        assert_eq!(a.encoder.weights.dim(), (6, 4));
        assert_eq!(b.encoder.weights.dim(), (4, 3));
        assert!(a.history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let x = Array2::from_shape_fn((12, 6), |(i, j)| ((i * 3 + j * 5) as f64).cos() * 0.5);
        let cfg = small_config(4, 0.2, 0.3, 20);
        let a = train_autoencoder(x.view(), &cfg, 3).unwrap();
        let b = train_autoencoder(x.view(), &cfg, 3).unwrap();
        assert_eq!(a.network().param_bytes(), b.network().param_bytes());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn invalid_config_rejected() {
        let x = Array2::<f64>::zeros((2, 2));
        let mut cfg = small_config(2, 0.2, 0.3, 1);
        cfg.sparsity_target = 1.0;
        assert!(train_autoencoder(x.view(), &cfg, 0).is_err());
        let cfg = small_config(2, 0.2, 0.3, 1);
        assert!(train_autoencoder(Array2::<f64>::zeros((0, 2)).view(), &cfg, 0).is_err());
    }

    #[test]
    fn table_defaults() {
        let a = AutoencoderConfig::ae1();
        assert_eq!((a.hidden_dim, a.optimizer.batch_size, a.optimizer.iterations), (1000, 100, 700));
        assert_eq!((a.noise_proportion, a.sparsity_target, a.sparsity_weight, a.dropout_rate), (0.3, 0.5, 0.2, 0.5));
        let b = AutoencoderConfig::ae2();
        assert_eq!((b.hidden_dim, b.optimizer.batch_size, b.optimizer.iterations), (500, 10, 1000));
        assert_eq!(b.noise_proportion, 0.1);
        assert_eq!(b.optimizer.learning_rate, 0.001);
    }
}
