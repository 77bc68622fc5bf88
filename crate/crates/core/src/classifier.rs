//! MLP classifier seeded from the SSDAE encoders.
//!
//! Layout: `n → h0 → h1 → h2 ‖ demographics(4) → 2 (softmax)`. The first two
//! layers copy the two encoders; the demographic slots are concatenated after
//! the third hidden layer and standardised with training-set statistics.

use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AtlasId, Demographics, Label};
use crate::error::{Error, Result};
use crate::feature_selection::FeatureMask;
use crate::nn::loss::{cross_entropy, one_hot};
use crate::nn::{Activation, DenseLayer, DenseNetwork, NetworkRecord, Optimizer, OptimizerConfig, SideInput};
use crate::seeds;
use crate::ssdae::TrainedAutoencoder;

pub const N_DEMOGRAPHICS: usize = 4;
pub const N_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Learned hidden widths; the first two must match the encoders.
    pub hidden: [usize; 3],
    /// When false the demographic slots are fed zeros.
    pub use_demographics: bool,
    pub dropout_rate: f64,
    pub optimizer: OptimizerConfig,
    /// Keep the transferred layers fixed during fine-tuning.
    #[serde(default)]
    pub freeze_pretrained: bool,
    /// Accept an AE2 wider than `hidden[1]` by inserting a random projection.
    #[serde(default)]
    pub ae2_projection: bool,
}

impl Default for MlpConfig {
    /// Default MLP: n-1000-500-104-2, lr 0.0005, batch 10, 200
    /// epochs, dropout 0.3, momentum 0.1 → 0.9.
    fn default() -> Self {
        MlpConfig {
            hidden: [1000, 500, 100],
            use_demographics: true,
            dropout_rate: 0.3,
            optimizer: OptimizerConfig::momentum(0.0005, 10, 200, 0.1, 0.9),
            freeze_pretrained: false,
            ae2_projection: false,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::invalid("MLP hidden widths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("MLP dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        self.optimizer.validate()
    }
}

/// Per-field z-score parameters fitted on training subjects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemographicScaler {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl DemographicScaler {
    pub fn fit(demographics: &[Demographics]) -> Result<Self> {
        if demographics.is_empty() {
            return Err(Error::invalid("cannot fit demographic scaler on no subjects"));
        }
        let values: Vec<[f64; 4]> = demographics.iter().map(Demographics::values).collect::<Result<_>>()?;
        let n = values.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for f in 0..4 {
            mean[f] = values.iter().map(|v| v[f]).sum::<f64>() / n;
            let var = values.iter().map(|v| (v[f] - mean[f]).powi(2)).sum::<f64>() / n;
            std[f] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(DemographicScaler { mean, std })
    }

    pub fn transform(&self, d: &Demographics) -> Result<[f64; 4]> {
        let v = d.values()?;
        Ok(std::array::from_fn(|f| (v[f] - self.mean[f]) / self.std[f]))
    }
}

/// Concatenates the third hidden layer's activations with the four
/// standardised demographics (age, sex, handedness, fiq).
pub fn fuse_demographics(hidden3: &[f64], demographics: &Demographics, scaler: Option<&DemographicScaler>) -> Result<Vec<f64>> {
    let scaler = scaler.ok_or_else(|| Error::invalid("demographic scaler not fitted"))?;
    let mut out = hidden3.to_vec();
    out.extend(scaler.transform(demographics)?);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub atlas_id: AtlasId,
    pub net: DenseNetwork,
    pub mask: FeatureMask,
    pub scaler: Option<DemographicScaler>,
    pub config: MlpConfig,
    /// Number of leading layers copied from the encoders.
    pub pretrained_layers: usize,
    /// Mean minibatch loss per fine-tuning epoch (not persisted).
    pub history: Vec<f64>,
}

fn fusion_net(layers: Vec<DenseLayer>) -> Result<DenseNetwork> {
    let side = SideInput { layer: layers.len() - 1, dim: N_DEMOGRAPHICS };
    DenseNetwork::new(layers, Some(side))
}

/// Copies both encoders into the first layers and randomly initialises the
/// rest from `seed`.
pub fn build_from_ssdae(
    ssdae: &[TrainedAutoencoder; 2],
    mask: FeatureMask,
    config: &MlpConfig,
    seed: u64,
) -> Result<MlpModel> {
    config.validate()?;
    let [ae1, ae2] = ssdae;
    let n = mask.len();
    let [h0, h1, h2] = config.hidden;
    if ae1.encoder.fan_in() != n || ae1.encoder.fan_out() != h0 {
        return Err(Error::shape(format!(
            "AE1 encoder is {}→{}, classifier expects {n}→{h0}",
            ae1.encoder.fan_in(),
            ae1.encoder.fan_out()
        )));
    }
    if ae2.encoder.fan_in() != h0 {
        return Err(Error::shape(format!("AE2 encoder input {} != {h0}", ae2.encoder.fan_in())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::tag("mlp-init")]));
    let mut layers = vec![ae1.encoder.clone(), ae2.encoder.clone()];
    let ae2_width = ae2.encoder.fan_out();
    if ae2_width != h1 {
        if !config.ae2_projection {
            return Err(Error::shape(format!(
                "AE2 hidden width {ae2_width} does not match classifier layer {h1}; enable ae2_projection"
            )));
        }
        layers.push(DenseLayer::init(ae2_width, h1, Activation::Tanh, &mut rng));
    }
    let pretrained_layers = 2;
    layers.push(DenseLayer::init(h1, h2, Activation::Tanh, &mut rng));
    layers.push(DenseLayer::init(h2 + N_DEMOGRAPHICS, N_CLASSES, Activation::Softmax, &mut rng));
    Ok(MlpModel {
        atlas_id: mask.atlas_id,
        net: fusion_net(layers)?,
        mask,
        scaler: None,
        config: config.clone(),
        pretrained_layers,
        history: Vec::new(),
    })
}

impl MlpModel {
    fn side_input(&self, demographics: &[Demographics]) -> Result<Array2<f64>> {
        let mut side = Array2::zeros((demographics.len(), N_DEMOGRAPHICS));
        if self.config.use_demographics {
            let scaler = self.scaler.as_ref().ok_or_else(|| Error::invalid("demographic scaler not fitted"))?;
            for (i, d) in demographics.iter().enumerate() {
                side.row_mut(i).assign(&ndarray::ArrayView1::from(&scaler.transform(d)?));
            }
        }
        Ok(side)
    }

    fn check_rows(&self, features: ArrayView2<f64>, demographics: &[Demographics]) -> Result<()> {
        if features.ncols() != self.mask.len() {
            return Err(Error::shape(format!(
                "{} masked features given, model expects {}",
                features.ncols(),
                self.mask.len()
            )));
        }
        if features.nrows() != demographics.len() {
            return Err(Error::shape("feature rows and demographics differ in length"));
        }
        Ok(())
    }

    /// Class probabilities `[P(ASD), P(TC)]` per row of masked features.
    pub fn predict_proba_batch(&self, features: ArrayView2<f64>, demographics: &[Demographics]) -> Result<Array2<f64>> {
        self.check_rows(features, demographics)?;
        let side = self.side_input(demographics)?;
        self.net.forward_infer(features, Some(side.view()))
    }

    pub fn predict_proba(&self, features: &[f64], demographics: &Demographics) -> Result<[f64; 2]> {
        let row = ArrayView2::from_shape((1, features.len()), features).map_err(|e| Error::shape(e.to_string()))?;
        let p = self.predict_proba_batch(row, std::slice::from_ref(demographics))?;
        Ok([p[[0, 0]], p[[0, 1]]])
    }

    /// As [`Self::predict_proba_batch`] for unmasked connectivity rows.
    pub fn predict_proba_unmasked(&self, features: ArrayView2<f64>, demographics: &[Demographics]) -> Result<Array2<f64>> {
        let masked = crate::feature_selection::apply_mask(features, &self.mask)?;
        self.predict_proba_batch(masked.view(), demographics)
    }

    pub fn predict(&self, features: ArrayView2<f64>, demographics: &[Demographics]) -> Result<Vec<Label>> {
        let p = self.predict_proba_batch(features, demographics)?;
        Ok(p.rows().into_iter().map(|r| if r[0] >= r[1] { Label::Asd } else { Label::Tc }).collect())
    }

    /// Activations of the last learned hidden layer (before fusion).
    pub fn last_hidden(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut a = features.to_owned();
        for layer in &self.net.layers[..self.net.layers.len() - 1] {
            a = layer.apply(a.view());
        }
        Ok(a)
    }

    pub fn to_record(&self) -> MlpRecord {
        MlpRecord {
            network: self.net.to_record("mlp"),
            atlas_id: self.atlas_id,
            mask: self.mask.clone(),
            scaler: self.scaler,
            config: self.config.clone(),
            pretrained_layers: self.pretrained_layers,
        }
    }

    pub fn from_record(rec: MlpRecord) -> Result<Self> {
        let net = DenseNetwork::from_record(&rec.network)?;
        rec.mask.validate()?;
        if net.input_dim() != rec.mask.len() {
            return Err(Error::shape("model input width does not match its mask"));
        }
        Ok(MlpModel {
            atlas_id: rec.atlas_id,
            net,
            mask: rec.mask,
            scaler: rec.scaler,
            config: rec.config,
            pretrained_layers: rec.pretrained_layers,
            history: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_record())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_record(serde_json::from_str(&text)?)
    }
}

/// Self-contained model file: network, mask, scaler and config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpRecord {
    pub network: NetworkRecord,
    pub atlas_id: AtlasId,
    pub mask: FeatureMask,
    pub scaler: Option<DemographicScaler>,
    pub config: MlpConfig,
    pub pretrained_layers: usize,
}

/// Supervised end-to-end training on masked features with cross-entropy.
/// The demographic scaler is refitted on `demographics`.
pub fn fine_tune(
    mut model: MlpModel,
    features: ArrayView2<f64>,
    demographics: &[Demographics],
    labels: &[Label],
    seed: u64,
) -> Result<MlpModel> {
    model.check_rows(features, demographics)?;
    if labels.len() != features.nrows() {
        return Err(Error::shape("labels and feature rows differ in length"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("fine-tuning needs at least one subject"));
    }
    if model.config.use_demographics {
        model.scaler = Some(DemographicScaler::fit(demographics)?);
    }
    let side = model.side_input(demographics)?;
    let targets = one_hot(&labels.iter().map(|l| l.index()).collect::<Vec<_>>(), N_CLASSES);

    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::tag("mlp-train")]));
    let mut opt = Optimizer::new(cfg.optimizer.clone(), &model.net)?;
    if cfg.freeze_pretrained {
        opt.freeze(&(0..model.pretrained_layers).collect::<Vec<_>>());
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    model.history.clear();
    for epoch in 0..cfg.optimizer.iterations {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.optimizer.batch_size) {
            let x = features.select(Axis(0), batch);
            let s = side.select(Axis(0), batch);
            let y = targets.select(Axis(0), batch);
            let (p, cache) = model.net.forward_train(x.view(), Some(s.view()), cfg.dropout_rate, &mut rng)?;
            let (loss, g) = cross_entropy(p.view(), y.view())?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { stage: "classifier loss".into(), iteration: epoch });
            }
            let grads = model.net.backward(&cache, g.view(), &[])?;
            opt.step(&mut model.net, &grads, epoch)?;
            total += loss;
            batches += 1;
        }
        model.history.push(total / batches as f64);
        log::trace!("mlp atlas={} epoch={epoch} loss={:.6}", model.atlas_id, total / batches as f64);
    }
    Ok(model)
}

/// Training-set accuracy helper.
pub fn accuracy(pred: &[Label], truth: &[Label]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Rows of `hidden` concatenated with the fused demographic slots.
pub fn fuse_batch(hidden: ArrayView2<f64>, side: ArrayView2<f64>) -> Array2<f64> {
    concatenate![Axis(1), hidden, side]
}
