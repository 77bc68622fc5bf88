//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use connectome_ensemble::classifier::{self, MlpConfig, MlpModel};
use connectome_ensemble::data::{AtlasId, AtlasSpec, Demographics, Label};
use connectome_ensemble::evaluation::Dataset;
use connectome_ensemble::feature_selection::FeatureMask;
use connectome_ensemble::nn::gradcheck::{self, Probe};
use connectome_ensemble::nn::loss::{cross_entropy, one_hot};
use connectome_ensemble::nn::{DenseLayer, DenseNetwork, OptimizerConfig};
use connectome_ensemble::ssdae::{self, AutoencoderConfig, ReconstructionLoss, TrainedAutoencoder};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-6;
pub const N_PROBES: usize = 100;

/// Textbook Pearson coefficient for two columns, two passes.
pub fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Between-class over within-class variance of one feature, written out
/// term by term with `n± − 1` denominators.
pub fn naive_fscore(values: &[f64], labels: &[Label]) -> f64 {
    let pos: Vec<f64> = values.iter().zip(labels).filter(|(_, l)| **l == Label::Asd).map(|(v, _)| *v).collect();
    let neg: Vec<f64> = values.iter().zip(labels).filter(|(_, l)| **l == Label::Tc).map(|(v, _)| *v).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all = mean(values);
    let mp = mean(&pos);
    let mn = mean(&neg);
    let num = (mp - all).powi(2) + (mn - all).powi(2);
    let vp: f64 = pos.iter().map(|v| (v - mp).powi(2)).sum::<f64>() / (pos.len() as f64 - 1.0);
    let vn: f64 = neg.iter().map(|v| (v - mn).powi(2)).sum::<f64>() / (neg.len() as f64 - 1.0);
    let den = vp + vn;
    if den == 0.0 {
        if num > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    } else {
        num / den
    }
}

/// Row-major enumeration of the strict upper triangle.
pub fn enumerate_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn random_demographics(n: usize, rng: &mut ChaCha8Rng) -> Vec<Demographics> {
    (0..n)
        .map(|_| {
            Demographics::complete(
                rng.random_range(7.0..40.0),
                rng.random_range(1..=2) as f64,
                rng.random_range(1..=3) as f64,
                rng.random_range(80.0..130.0),
            )
        })
        .collect()
}

/// `N_PROBES` parameter indices; small networks are covered completely by
/// successive shuffled passes.
fn sample_probes(n_params: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(N_PROBES);
    while out.len() < N_PROBES {
        let take = (N_PROBES - out.len()).min(n_params);
        out.extend(sample(rng, n_params, take).into_vec());
    }
    out
}

/// 6-4-6 denoising autoencoder with a KL penalty; the objective is
/// evaluated with a fixed corruption and a fixed dropout stream.
pub fn autoencoder_gradient_probes(seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = ssdae::init_autoencoder(6, 4, &mut rng);
    let clean = random_matrix(7, 6, &mut rng);
    let config = AutoencoderConfig {
        hidden_dim: 4,
        noise_proportion: 0.3,
        sparsity_target: 0.2,
        sparsity_weight: 0.5,
        dropout_rate: 0.25,
        optimizer: OptimizerConfig::gd(0.1, 7, 1),
        loss: ReconstructionLoss::Mse,
    };
    let corrupted = ssdae::corrupt_rows(clean.view(), config.noise_proportion, &mut rng);
    let dropout_seed = rng.random::<u64>();
    let (_, grads) = ssdae::objective_and_gradients(
        &net,
        clean.view(),
        corrupted.view(),
        &config,
        &mut ChaCha8Rng::seed_from_u64(dropout_seed),
    )
    .unwrap();
    let indices = sample_probes(net.param_count(), &mut rng);
    gradcheck::probe(&net, &grads.flat(), &indices, GRAD_STEP, |n| {
        ssdae::objective_value(n, clean.view(), corrupted.view(), &config, &mut ChaCha8Rng::seed_from_u64(dropout_seed))
            .unwrap()
            .objective
    })
}

/// 12-8-6-(4‖4)-2 classifier with demographic fusion and dropout.
pub fn classifier_gradient_probes(seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DenseNetwork::new(
        vec![
            DenseLayer::init(12, 8, connectome_ensemble::nn::Activation::Tanh, &mut rng),
            DenseLayer::init(8, 6, connectome_ensemble::nn::Activation::Tanh, &mut rng),
            DenseLayer::init(6, 4, connectome_ensemble::nn::Activation::Tanh, &mut rng),
            DenseLayer::init(8, 2, connectome_ensemble::nn::Activation::Softmax, &mut rng),
        ],
        Some(connectome_ensemble::nn::SideInput { layer: 3, dim: 4 }),
    )
    .unwrap();
    let x = random_matrix(9, 12, &mut rng);
    let side = random_matrix(9, 4, &mut rng);
    let classes: Vec<usize> = (0..9).map(|i| i % 2).collect();
    let y = one_hot(&classes, 2);
    let dropout_seed = rng.random::<u64>();
    let loss = |n: &DenseNetwork| -> f64 {
        let (p, _) = n.forward_train(x.view(), Some(side.view()), 0.3, &mut ChaCha8Rng::seed_from_u64(dropout_seed)).unwrap();
        cross_entropy(p.view(), y.view()).unwrap().0
    };
    let (p, cache) = net.forward_train(x.view(), Some(side.view()), 0.3, &mut ChaCha8Rng::seed_from_u64(dropout_seed)).unwrap();
    let (_, g) = cross_entropy(p.view(), y.view()).unwrap();
    let grads = net.backward(&cache, g.view(), &[]).unwrap();
    let indices = sample_probes(net.param_count(), &mut rng);
    gradcheck::probe(&net, &grads.flat(), &indices, GRAD_STEP, loss)
}

pub fn worst(probes: &[Probe]) -> &Probe {
    probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).expect("probes")
}

/// Untrained encoder pair and classifier for transfer tests.
pub fn random_transfer(seed: u64, n: usize, h: [usize; 3]) -> ([TrainedAutoencoder; 2], MlpModel) {
    let cfg = |hidden| AutoencoderConfig { hidden_dim: hidden, optimizer: OptimizerConfig::gd(0.01, 4, 0), ..AutoencoderConfig::ae1() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_matrix(6, n, &mut rng);
    let aes = ssdae::stack(x.view(), &[cfg(h[0]), cfg(h[1])], seed).unwrap();
    let mlp_cfg = MlpConfig { hidden: h, optimizer: OptimizerConfig::momentum(0.01, 4, 1, 0.1, 0.9), ..MlpConfig::default() };
    let model = classifier::build_from_ssdae(&aes, FeatureMask::identity(AtlasId::CC, n), &mlp_cfg, seed).unwrap();
    (aes, model)
}

pub fn reduced_atlases() -> Vec<AtlasSpec> {
    vec![AtlasSpec::reduced(AtlasId::CC, 30), AtlasSpec::reduced(AtlasId::AAL, 20), AtlasSpec::reduced(AtlasId::EZ, 20)]
}

pub fn synthetic_dataset(n: usize, effect: f64, seed: u64) -> Dataset {
    let atlases = reduced_atlases();
    let synth = connectome_ensemble::data::generate_synthetic(&connectome_ensemble::data::SynthConfig::new(n, atlases.clone(), effect, seed))
        .unwrap();
    Dataset::from_records(&synth.records, &atlases).unwrap()
}
