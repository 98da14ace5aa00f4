//! Dense sigmoid autoencoder trained by mini-batch gradient descent.
//!
//! The network is a mirrored stack of fully connected layers. The activations
//! of the middle layer serve as the feature of an image patch; the output
//! layer's reconstruction error serves as a per-pixel change score.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::bolf::{FeatureExtractor, FeatureVector};
use crate::config::AE_HIDDEN_LAYERS;
use crate::error::{Error, Result};
use crate::image::GrayImage;

const MODEL_MAGIC: &[u8; 8] = b"LCDICDAE";
const MODEL_VERSION: u32 = 1;

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fully connected layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Dense {
    fn forward(&self, input: &[f64], output: &mut [f64]) {
        for (o, out) in output.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let z: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + self.biases[o];
            *out = sigmoid(z);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeModel {
    layer_dims: Vec<usize>,
    layers: Vec<Dense>,
    input_side: usize,
    seed: u64,
}

/// Per-layer gradients, same layout as the model parameters.
#[derive(Debug, Clone)]
pub struct Gradient {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Gradient {
    /// Parameters in the order of [`AeModel::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b).copied())
            .collect()
    }
}

impl AeModel {
    /// Autoencoder with the standard hidden layout for `side`×`side` inputs.
    pub fn with_default_layout(input_side: usize, seed: u64) -> Result<Self> {
        let d = input_side * input_side;
        let mut dims = vec![d];
        dims.extend_from_slice(&AE_HIDDEN_LAYERS);
        dims.push(d);
        Self::new(dims, input_side, seed)
    }

    /// Xavier-uniform initialised network. `layer_dims` must be a palindrome
    /// whose first entry is `input_side²`.
    pub fn new(layer_dims: Vec<usize>, input_side: usize, seed: u64) -> Result<Self> {
        validate_dims(&layer_dims, input_side)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let limit = (6.0 / (inputs + outputs) as f64).sqrt();
                let weights: Vec<f64> = (0..inputs * outputs)
                    .map(|_| rng.random_range(-limit..limit))
                    .collect();
                Dense {
                    inputs,
                    outputs,
                    weights,
                    biases: vec![0.0; outputs],
                }
            })
            .collect();
        Ok(Self {
            layer_dims,
            layers,
            input_side,
            seed,
        })
    }

    /// Network with every weight and bias set to zero.
    pub fn zeroed(layer_dims: Vec<usize>, input_side: usize) -> Result<Self> {
        let mut model = Self::new(layer_dims, input_side, 0)?;
        model.set_parameters(&vec![0.0; model.parameter_count()])?;
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_side(&self) -> usize {
        self.input_side
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Index into `layer_dims` of the code layer.
    fn code_layer(&self) -> usize {
        (self.layer_dims.len() - 1) / 2
    }

    pub fn code_dim(&self) -> usize {
        self.layer_dims[self.code_layer()]
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All weights and biases, layer by layer (weights before biases).
    pub fn parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
            .collect()
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: self.parameter_count(),
                actual: params.len(),
            });
        }
        let mut rest = params;
        for layer in &mut self.layers {
            let (w, r) = rest.split_at(layer.weights.len());
            let (b, r) = r.split_at(layer.biases.len());
            layer.weights.copy_from_slice(w);
            layer.biases.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    fn check_input(&self, pixels: &[f64]) -> Result<()> {
        if pixels.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: pixels.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer, input included.
    fn forward_all(&self, input: &[f64], acts: &mut Vec<Vec<f64>>) {
        acts.resize_with(self.layer_dims.len(), Vec::new);
        acts[0].clear();
        acts[0].extend_from_slice(input);
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = acts.split_at_mut(l + 1);
            let out = &mut tail[0];
            out.resize(layer.outputs, 0.0);
            layer.forward(&head[l], out);
        }
    }

    /// Bottleneck activations for a flattened `side`×`side` patch.
    pub fn encode(&self, pixels: &[f64]) -> Result<FeatureVector> {
        self.check_input(pixels)?;
        let mut current = pixels.to_vec();
        for layer in &self.layers[..self.code_layer()] {
            let mut next = vec![0.0; layer.outputs];
            layer.forward(&current, &mut next);
            current = next;
        }
        FeatureVector::new(current)
    }

    pub fn reconstruct(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        self.check_input(pixels)?;
        let mut acts = Vec::new();
        self.forward_all(pixels, &mut acts);
        Ok(acts.pop().unwrap())
    }

    /// Training objective: batch mean of `½‖reconstruction − input‖²`.
    pub fn objective(&self, batch: &[&[f64]]) -> Result<f64> {
        let mut total = 0.0;
        for x in batch {
            let r = self.reconstruct(x)?;
            total += 0.5 * r.iter().zip(*x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / batch.len() as f64)
    }

    /// Mean squared reconstruction error per pixel over `images`.
    pub fn mse(&self, images: &[Vec<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for x in images {
            let r = self.reconstruct(x)?;
            total += r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / (images.len() * self.input_dim()) as f64)
    }

    /// Objective and its analytic gradient over `batch`.
    pub fn gradient(&self, batch: &[&[f64]]) -> Result<(f64, Gradient)> {
        let mut grad = Gradient {
            weights: self.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: self.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        };
        let mut acts = Vec::new();
        let mut total = 0.0;
        for x in batch {
            self.check_input(x)?;
            total += self.accumulate(x, &mut acts, &mut grad);
        }
        let scale = 1.0 / batch.len() as f64;
        for g in grad.weights.iter_mut().chain(grad.biases.iter_mut()) {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        Ok((total * scale, grad))
    }

    /// Backpropagates one sample into `grad`, returning its loss.
    fn accumulate(&self, x: &[f64], acts: &mut Vec<Vec<f64>>, grad: &mut Gradient) -> f64 {
        self.forward_all(x, acts);
        let output = acts.last().unwrap();
        let mut loss = 0.0;
        let mut delta: Vec<f64> = output
            .iter()
            .zip(x)
            .map(|(&a, &t)| {
                let e = a - t;
                loss += 0.5 * e * e;
                e * a * (1.0 - a)
            })
            .collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &acts[l];
            let gw = &mut grad.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                grad.biases[l][o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= a * (1.0 - a);
                }
                delta = prev;
            }
        }
        loss
    }

    fn apply(&mut self, grad: &Gradient, learning_rate: f64) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&grad.weights[l]) {
                *w -= learning_rate * g;
            }
            for (b, g) in layer.biases.iter_mut().zip(&grad.biases[l]) {
                *b -= learning_rate * g;
            }
        }
    }

    /// Squared reconstruction error of a `side`×`side` input, upscaled by
    /// nearest neighbour to `width`×`height`.
    pub fn reconstruction_error_map(&self, pixels: &[f64], width: u32, height: u32) -> Result<Vec<f64>> {
        let recon = self.reconstruct(pixels)?;
        let errors: Vec<f64> = recon
            .iter()
            .zip(pixels)
            .map(|(r, p)| (p - r) * (p - r))
            .collect();
        Ok(upscale_nearest(&errors, self.input_side, width, height))
    }

    /// [`AeModel::reconstruction_error_map`] of an image at its own resolution.
    pub fn image_error_map(&self, image: &GrayImage) -> Result<Vec<f64>> {
        let side = self.input_side as u32;
        let resized = image.resize(side, side);
        self.reconstruction_error_map(resized.pixels(), image.width(), image.height())
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = Writer::new(out);
        w.bytes(MODEL_MAGIC)?;
        w.u32(MODEL_VERSION)?;
        w.u32(self.input_side as u32)?;
        w.u64(self.seed)?;
        w.u32(self.layer_dims.len() as u32)?;
        for &d in &self.layer_dims {
            w.u32(d as u32)?;
        }
        for layer in &self.layers {
            w.f64s(&layer.weights)?;
            w.f64s(&layer.biases)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader::new(input, "autoencoder model");
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let input_side = r.u32()? as usize;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(r.error(format!("implausible layer count {n}")));
        }
        let dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let mut model = Self::new(dims, input_side, seed).map_err(|e| r.error(e.to_string()))?;
        let mut params = Vec::with_capacity(model.parameter_count());
        for layer in &model.layers {
            params.extend(r.f64s(layer.weights.len())?);
            params.extend(r.f64s(layer.biases.len())?);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(r.error("non-finite parameter"));
        }
        model.set_parameters(&params)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(bytes.as_slice())
    }
}

impl FeatureExtractor for AeModel {
    fn input_side(&self) -> usize {
        self.input_side
    }

    fn feature_dim(&self) -> usize {
        self.code_dim()
    }

    fn extract(&self, patch: &[f64]) -> Result<FeatureVector> {
        self.encode(patch)
    }
}

fn validate_dims(dims: &[usize], input_side: usize) -> Result<()> {
    if dims.len() < 3 || dims.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer dims {dims:?} need at least three positive entries"
        )));
    }
    if dims.iter().ne(dims.iter().rev()) {
        return Err(Error::InvalidArgument(format!(
            "layer dims {dims:?} are not symmetric"
        )));
    }
    if dims[0] != input_side * input_side {
        return Err(Error::InvalidArgument(format!(
            "input dim {} does not match side {input_side}",
            dims[0]
        )));
    }
    Ok(())
}

pub(crate) fn upscale_nearest(values: &[f64], side: usize, width: u32, height: u32) -> Vec<f64> {
    let xs: Vec<usize> = (0..width as usize).map(|x| x * side / width as usize).collect();
    let mut out = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height as usize {
        let row = &values[(y * side / height as usize) * side..][..side];
        out.extend(xs.iter().map(|&x| row[x]));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAe {
    pub model: AeModel,
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Mean objective of each epoch, measured before each batch update.
    pub epoch_losses: Vec<f64>,
}

/// Trains the default-layout autoencoder on flattened `side`×`side` images.
pub fn train_ae(images: &[Vec<f64>], input_side: usize, config: &TrainConfig) -> Result<TrainedAe> {
    let model = AeModel::with_default_layout(input_side, config.seed)?;
    train_model(model, images, config)
}

/// Runs mini-batch gradient descent from an initialised `model`.
pub fn train_model(mut model: AeModel, images: &[Vec<f64>], config: &TrainConfig) -> Result<TrainedAe> {
    if images.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(
            "batch size and learning rate must be positive".into(),
        ));
    }
    for x in images {
        model.check_input(x)?;
    }
    let initial_mse = model.mse(images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| images[i].as_slice()).collect();
            let (loss, grad) = model.gradient(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            model.apply(&grad, config.learning_rate);
        }
        epoch_loss /= images.len() as f64;
        if !epoch_loss.is_finite() || model.parameters().iter().any(|p| !p.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");
        epoch_losses.push(epoch_loss);
    }
    let final_mse = model.mse(images)?;
    if !final_mse.is_finite() {
        return Err(Error::Diverged {
            epoch: config.epochs,
        });
    }
    Ok(TrainedAe {
        model,
        initial_mse,
        final_mse,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_images(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
    }

    #[test]
    fn default_layout_mirrors_hidden_widths() {
        let m = AeModel::with_default_layout(32, 1).unwrap();
        assert_eq!(
            m.layer_dims(),
            &[1024, 128, 64, 32, 16, 16, 32, 64, 128, 1024]
        );
        assert_eq!(m.code_dim(), 16);
    }

    #[test]
    fn asymmetric_layouts_are_rejected() {
        assert!(AeModel::new(vec![4, 2, 1, 3, 4], 2, 0).is_err());
        assert!(AeModel::new(vec![9, 2, 9], 2, 0).is_err());
    }

    #[test]
    fn zero_network_encodes_to_one_half() {
        let m = AeModel::zeroed(vec![16, 8, 4, 8, 16], 4).unwrap();
        let code = m.encode(&[0.0; 16]).unwrap();
        assert_eq!(code.as_slice(), &[0.5; 4]);
    }

    #[test]
    fn encode_is_sixteen_dimensional_and_pure() {
        let m = AeModel::with_default_layout(8, 3).unwrap();
        let x = random_images(1, 64, 9).pop().unwrap();
        let a = m.encode(&x).unwrap();
        assert_eq!(a.dim(), 16);
        assert_eq!(a, m.encode(&x).unwrap());
        assert!(matches!(
            m.encode(&x[..63]),
            Err(Error::DimensionMismatch { expected: 64, actual: 63 })
        ));
    }

    #[test]
    fn training_reduces_loss() {
        let images = random_images(50, 256, 4);
        let cfg = TrainConfig {
            epochs: 200,
            ..TrainConfig::default()
        };
        let t = train_ae(&images, 16, &cfg).unwrap();
        assert!(t.final_mse < t.initial_mse, "{} !< {}", t.final_mse, t.initial_mse);
        assert!(t.epoch_losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn constant_images_are_learned_by_the_biases() {
        let images = vec![vec![0.5; 64]; 20];
        let cfg = TrainConfig {
            epochs: 100,
            ..TrainConfig::default()
        };
        let t = train_ae(&images, 8, &cfg).unwrap();
        assert!(t.final_mse < 1e-3, "mse {}", t.final_mse);
    }

    #[test]
    fn training_is_deterministic() {
        let images = random_images(12, 64, 5);
        let cfg = TrainConfig {
            epochs: 5,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = train_ae(&images, 8, &cfg).unwrap().model;
        let b = train_ae(&images, 8, &cfg).unwrap().model;
        let bits = |m: &AeModel| m.parameters().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(matches!(
            train_ae(&[], 8, &TrainConfig::default()),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn non_finite_loss_reports_the_epoch() {
        let mut images = random_images(4, 4, 1);
        images[2][1] = f64::NAN;
        let model = AeModel::new(vec![4, 2, 4], 2, 0).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.1,
            batch_size: 2,
            seed: 0,
        };
        assert!(matches!(train_model(model, &images, &cfg), Err(Error::Diverged { epoch: 0 })));
    }

    #[test]
    fn error_map_of_constant_half_reconstruction() {
        // Zero network reconstructs 0.5 everywhere.
        let m = AeModel::zeroed(vec![4, 2, 4], 2).unwrap();
        let map = m.reconstruction_error_map(&[1.0; 4], 5, 3).unwrap();
        assert_eq!(map.len(), 15);
        assert!(map.iter().all(|&v| v == 0.25));
        let perfect = m.reconstruction_error_map(&[0.5; 4], 2, 2).unwrap();
        assert!(perfect.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nearest_upscale_replicates_blocks() {
        let up = upscale_nearest(&[1.0, 2.0, 3.0, 4.0], 2, 4, 2);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn model_container_roundtrip() {
        let m = AeModel::with_default_layout(4, 11).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MODEL_MAGIC);
        assert_eq!(AeModel::read_from(buf.as_slice()).unwrap(), m);
        buf[0] = b'X';
        assert!(matches!(AeModel::read_from(buf.as_slice()), Err(Error::Format { .. })));
    }
}
