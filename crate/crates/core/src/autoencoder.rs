//! Fully-connected autoencoder and masked autoencoder trained by
//! explicit backpropagation with Adam.
//!
//! The masked variant zeroes each input coordinate independently with
//! probability `p` and reconstructs the unmasked input. The loss is
//!
//!   L = mean((x_rec - x)^2) + lambda_sl * mean(SL(x, x_rec))
//!
//! with both terms averaged over coordinates and batch, and SL the
//! smooth-L1 penalty: 0.5 e^2 for |e| < 1, |e| - 0.5 otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("latent dimension {latent} must be smaller than input dimension {input}")]
    LatentTooLarge { latent: usize, input: usize },
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Encoder shape: `input_dim -> hidden... -> latent_dim`, ReLU on hidden
/// layers, identity on the latent and reconstruction outputs. The decoder
/// mirrors the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub init_seed: u64,
}

impl MlpSpec {
    /// Default architecture: one hidden layer of max(2d/3, z+1) units.
    pub fn default_for(input_dim: usize, latent_dim: usize, init_seed: u64) -> Self {
        let h = (2 * input_dim / 3).max(latent_dim + 1);
        MlpSpec {
            input_dim,
            hidden: vec![h],
            latent_dim,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.latent_dim >= self.input_dim {
            return Err(TrainError::LatentTooLarge {
                latent: self.latent_dim,
                input: self.input_dim,
            });
        }
        Ok(())
    }
}

/// Training hyperparameters. Defaults: 500 epochs, smooth-L1 coefficient
/// 0.01, masking probability 0.75, Adam (0.9, 0.999, eps 1e-12),
/// lr 0.001 decaying by 0.95 on a 20-epoch plateau after epoch 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeTrainConfig {
    pub epochs: usize,
    pub lambda_sl: f64,
    pub mask_prob: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub lr_decay_gamma: f64,
    pub plateau_patience: usize,
    pub warmup_epochs: usize,
    pub plateau_min_improvement: f64,
    /// `None`: full batch up to 4096 rows, then seeded minibatches of 256.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for MaeTrainConfig {
    fn default() -> Self {
        MaeTrainConfig {
            epochs: 500,
            lambda_sl: 0.01,
            mask_prob: 0.75,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-12,
            learning_rate: 0.001,
            lr_decay_gamma: 0.95,
            plateau_patience: 20,
            warmup_epochs: 100,
            plateau_min_improvement: 1e-6,
            batch_size: None,
            seed: 0,
        }
    }
}

impl MaeTrainConfig {
    /// Plain autoencoder: no masking.
    pub fn plain_ae() -> Self {
        MaeTrainConfig {
            mask_prob: 0.0,
            ..MaeTrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(TrainError::InvalidConfig(
                "mask_prob must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub relu: bool,
}

impl DenseLayer {
    fn init(in_dim: usize, out_dim: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        DenseLayer {
            weights,
            biases: vec![0.0; out_dim],
            in_dim,
            out_dim,
            relu,
        }
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut out = self.biases.clone();
        for (o, out_v) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            *out_v += row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
            if self.relu && *out_v < 0.0 {
                *out_v = 0.0;
            }
        }
        out
    }
}

/// Encoder + mirrored decoder. Inference (`encode`) never applies masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub spec: MlpSpec,
    pub layers: Vec<DenseLayer>,
    pub n_encoder_layers: usize,
}

impl Autoencoder {
    pub fn init(spec: &MlpSpec) -> Result<Self, TrainError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let mut sizes = vec![spec.input_dim];
        sizes.extend(&spec.hidden);
        sizes.push(spec.latent_dim);
        let mut layers = Vec::new();
        // encoder: ReLU on hidden layers, identity into the latent
        let n_enc = sizes.len() - 1;
        for (i, w) in sizes.windows(2).enumerate() {
            let is_latent = i == n_enc - 1;
            layers.push(DenseLayer::init(w[0], w[1], !is_latent, &mut rng));
        }
        let mut dec_sizes: Vec<usize> = sizes.clone();
        dec_sizes.reverse();
        for (i, w) in dec_sizes.windows(2).enumerate() {
            let is_output = i == dec_sizes.len() - 2;
            layers.push(DenseLayer::init(w[0], w[1], !is_output, &mut rng));
        }
        Ok(Autoencoder {
            spec: spec.clone(),
            layers,
            n_encoder_layers: n_enc,
        })
    }

    /// Activations after each layer; index 0 is the input itself.
    fn forward_all(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let next = layer.forward(acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    /// Latent embedding of a row (no masking at inference).
    pub fn encode_row(&self, input: &[f64]) -> Result<Vec<f64>, TrainError> {
        if input.len() != self.spec.input_dim {
            return Err(TrainError::DimMismatch {
                expected: self.spec.input_dim,
                got: input.len(),
            });
        }
        let mut a = input.to_vec();
        for layer in &self.layers[..self.n_encoder_layers] {
            a = layer.forward(&a);
        }
        Ok(a)
    }

    pub fn encode(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, TrainError> {
        rows.iter().map(|r| self.encode_row(r)).collect()
    }

    pub fn reconstruct_row(&self, input: &[f64]) -> Vec<f64> {
        let mut a = input.to_vec();
        for layer in &self.layers {
            a = layer.forward(&a);
        }
        a
    }
}

/// Smooth-L1 penalty between two scalars.
pub fn smooth_l1(a: f64, b: f64) -> f64 {
    let e = (a - b).abs();
    if e < 1.0 {
        0.5 * e * e
    } else {
        e - 0.5
    }
}

fn smooth_l1_grad(err: f64) -> f64 {
    // derivative of SL(x, x_rec) w.r.t. x_rec, err = x_rec - x
    if err.abs() < 1.0 {
        err
    } else {
        err.signum()
    }
}

/// Bernoulli keep-mask: each coordinate is zeroed independently with
/// probability `p` (kept with probability 1-p).
pub fn mask_sample<R: Rng>(x: &[f64], p: f64, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mask: Vec<f64> = x
        .iter()
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 })
        .collect();
    let masked = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
    (masked, mask)
}

/// Reconstruction and loss for one sample. The model sees `x * mask`;
/// the loss always targets the unmasked `x`.
pub fn forward_loss(
    model: &Autoencoder,
    x: &[f64],
    mask: Option<&[f64]>,
    lambda_sl: f64,
) -> (Vec<f64>, f64) {
    let masked: Vec<f64> = match mask {
        Some(m) => x.iter().zip(m).map(|(v, b)| v * b).collect(),
        None => x.to_vec(),
    };
    let rec = model.reconstruct_row(&masked);
    let d = x.len() as f64;
    let mse = rec
        .iter()
        .zip(x)
        .map(|(r, t)| (r - t).powi(2))
        .sum::<f64>()
        / d;
    let sl = rec
        .iter()
        .zip(x)
        .map(|(r, t)| smooth_l1(*t, *r))
        .sum::<f64>()
        / d;
    (rec, mse + lambda_sl * sl)
}

/// Parameter gradients, mirroring the layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Autoencoder) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }
}

/// Mean batch loss and exact gradients of that loss for every parameter.
/// `masks[i]` multiplies the i-th input; the reconstruction target stays
/// unmasked. Loss reduction is the mean over batch and coordinates.
pub fn backward_gradients(
    model: &Autoencoder,
    xs: &[Vec<f64>],
    masks: Option<&[Vec<f64>]>,
    lambda_sl: f64,
) -> (f64, Gradients) {
    let batch = xs.len();
    let d = model.spec.input_dim;
    let scale = 1.0 / (batch as f64 * d as f64);
    let mut grads = Gradients::zeros_like(model);
    let mut total_loss = 0.0;

    for (i, x) in xs.iter().enumerate() {
        let masked: Vec<f64> = match masks {
            Some(ms) => x.iter().zip(&ms[i]).map(|(v, b)| v * b).collect(),
            None => x.clone(),
        };
        let acts = model.forward_all(&masked);
        let rec = acts.last().unwrap();
        for (r, t) in rec.iter().zip(x) {
            total_loss += (r - t).powi(2) + lambda_sl * smooth_l1(*t, *r);
        }
        // dL/d(output): scaled sum of the MSE and smooth-L1 terms
        let mut delta: Vec<f64> = rec
            .iter()
            .zip(x)
            .map(|(r, t)| scale * (2.0 * (r - t) + lambda_sl * smooth_l1_grad(r - t)))
            .collect();
        for (l, layer) in model.layers.iter().enumerate().rev() {
            // convert dL/d(post) to dL/d(pre) through the activation
            if layer.relu {
                for (dv, post) in delta.iter_mut().zip(&acts[l + 1]) {
                    if *post <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let input = &acts[l];
            let lg = &mut grads.layers[l];
            for (o, dv) in delta.iter().enumerate() {
                lg.biases[o] += dv;
                let row = &mut lg.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (w, x_in) in row.iter_mut().zip(input) {
                    *w += dv * x_in;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for (o, dv) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += dv * w;
                    }
                }
                delta = prev;
            }
        }
    }
    (total_loss * scale, grads)
}

/// Adam first/second moment state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<LayerGrads>,
    pub v: Vec<LayerGrads>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Autoencoder) -> Self {
        let zeros = Gradients::zeros_like(model).layers;
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One Adam update with bias correction.
pub fn adam_step(
    model: &mut Autoencoder,
    state: &mut AdamState,
    grads: &Gradients,
    lr: f64,
    config: &MaeTrainConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let g = &grads.layers[l];
        let m = &mut state.m[l];
        let v = &mut state.v[l];
        for (k, w) in layer.weights.iter_mut().enumerate() {
            m.weights[k] = config.beta1 * m.weights[k] + (1.0 - config.beta1) * g.weights[k];
            v.weights[k] =
                config.beta2 * v.weights[k] + (1.0 - config.beta2) * g.weights[k] * g.weights[k];
            let m_hat = m.weights[k] / bc1;
            let v_hat = v.weights[k] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        for (k, b) in layer.biases.iter_mut().enumerate() {
            m.biases[k] = config.beta1 * m.biases[k] + (1.0 - config.beta1) * g.biases[k];
            v.biases[k] =
                config.beta2 * v.biases[k] + (1.0 - config.beta2) * g.biases[k] * g.biases[k];
            let m_hat = m.biases[k] / bc1;
            let v_hat = v.biases[k] / bc2;
            *b -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
}

/// Per-epoch mean training loss and the final learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_learning_rate: f64,
}

/// Train on standardized training-fold rows only. Masks are redrawn per
/// sample per epoch from the seeded stream; the learning rate decays by
/// `lr_decay_gamma` on a training-loss plateau after the warmup epochs.
pub fn train_autoencoder(
    x_train: &[Vec<f64>],
    spec: &MlpSpec,
    config: &MaeTrainConfig,
) -> Result<(Autoencoder, TrainReport), TrainError> {
    config.validate()?;
    if x_train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    for row in x_train {
        if row.len() != spec.input_dim {
            return Err(TrainError::DimMismatch {
                expected: spec.input_dim,
                got: row.len(),
            });
        }
    }
    let mut model = Autoencoder::init(spec)?;
    let mut state = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = x_train.len();
    let batch_size = config.batch_size.unwrap_or(if n <= 4096 { n } else { 256 });

    let mut lr = config.learning_rate;
    let mut best_loss = f64::INFINITY;
    let mut plateau = 0usize;
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=config.epochs {
        if batch_size < n {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
        }
        let mut epoch_loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| x_train[i].clone()).collect();
            let masks = if config.mask_prob > 0.0 {
                Some(
                    xs.iter()
                        .map(|x| mask_sample(x, config.mask_prob, &mut rng).1)
                        .collect::<Vec<_>>(),
                )
            } else {
                None
            };
            let (loss, grads) = backward_gradients(&model, &xs, masks.as_deref(), config.lambda_sl);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            adam_step(&mut model, &mut state, &grads, lr, config);
            epoch_loss_sum += loss * chunk.len() as f64;
        }
        let epoch_loss = epoch_loss_sum / n as f64;
        epoch_losses.push(epoch_loss);

        if epoch_loss < best_loss - config.plateau_min_improvement {
            best_loss = epoch_loss;
            plateau = 0;
        } else {
            plateau += 1;
            if epoch > config.warmup_epochs && plateau >= config.plateau_patience {
                lr *= config.lr_decay_gamma;
                plateau = 0;
            }
        }
    }
    Ok((
        model,
        TrainReport {
            epoch_losses,
            final_learning_rate: lr,
        },
    ))
}
