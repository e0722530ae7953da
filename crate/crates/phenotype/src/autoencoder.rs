//! Two-layer stacked sparse autoencoder over fixed-width patches of
//! interpolated series: greedy layerwise training with frozen earlier
//! layers, then joint fine-tuning. Sigmoid encoders, linear decoders, L1
//! activity and L2 weight regularization, plain mini-batch SGD.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gpr::InterpolatedSeries;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Linear,
}

/// One fully connected layer, `activation(W·x + b)` with columns as examples.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Uniform init in ±sqrt(6/(fan_in+fan_out)).
    pub fn seeded(out_dim: usize, in_dim: usize, activation: Activation, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = DMatrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-limit..limit));
        DenseLayer {
            w,
            b: DVector::zeros(out_dim),
            activation,
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * x;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        match self.activation {
            Activation::Sigmoid => z.map(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Linear => z,
        }
    }

    pub fn bits_equal(&self, other: &DenseLayer) -> bool {
        self.activation == other.activation
            && self.w.len() == other.w.len()
            && self.b.len() == other.b.len()
            && self
                .w
                .iter()
                .zip(other.w.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self
                .b
                .iter()
                .zip(other.b.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Training hyperparameters shared by all three phases.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Hidden width of both encoder layers.
    pub hidden: usize,
    /// Weight of the L1 penalty on encoder activations.
    pub l1_activity: f64,
    /// Weight of the L2 penalty on trained weight matrices.
    pub l2_weight: f64,
    /// Epochs per training phase.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of patches held out and monitored for reporting only.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 100,
            l1_activity: 1e-4,
            l2_weight: 1e-3,
            epochs: 200,
            learning_rate: 0.01,
            batch_size: 64,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".to_string()));
        }
        if self.l1_activity < 0.0 || self.l2_weight < 0.0 {
            return Err(Error::Config("regularization weights must be >= 0".to_string()));
        }
        if !(self.validation_fraction >= 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".to_string()));
        }
        Ok(())
    }
}

/// One training example: the mean channel of a contiguous window followed by
/// its variance channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub hadm_id: u64,
    pub label: u8,
    /// Starting grid index of the window in its source series.
    pub offset: usize,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub patch_len: usize,
    pub patches: Vec<Patch>,
}

impl PatchMatrix {
    pub fn input_dim(&self) -> usize {
        2 * self.patch_len
    }

    /// Column-per-patch data matrix, `2·patch_len × n`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.input_dim(), self.patches.len(), |r, c| {
            self.patches[c].x[r]
        })
    }
}

/// Draw `n_patches` windows (with replacement) uniformly over all
/// (series, offset) pairs pooled together. Series shorter than `patch_len`
/// are skipped with a diagnostic.
pub fn sample_patches(
    series_set: &[InterpolatedSeries],
    patch_len: usize,
    n_patches: usize,
    seed: u64,
) -> Result<PatchMatrix> {
    if patch_len == 0 || n_patches == 0 {
        return Err(Error::Config(
            "patch_len and n_patches must be >= 1".to_string(),
        ));
    }
    let mut pool: Vec<(usize, usize)> = Vec::new();
    let mut skipped = 0usize;
    for (i, s) in series_set.iter().enumerate() {
        let len = s.grid_times.len();
        if len < patch_len {
            skipped += 1;
            continue;
        }
        pool.extend((0..=len - patch_len).map(|off| (i, off)));
    }
    if skipped > 0 {
        log::warn!("sample_patches: skipped {skipped} series shorter than {patch_len}");
    }
    if pool.is_empty() {
        return Err(Error::Data(format!(
            "no series of length >= {patch_len} to sample patches from"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let (si, offset) = pool[rng.random_range(0..pool.len())];
        let s = &series_set[si];
        let mut x = Vec::with_capacity(2 * patch_len);
        x.extend_from_slice(&s.means[offset..offset + patch_len]);
        x.extend_from_slice(&s.variances[offset..offset + patch_len]);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite patch entry in series hadm_id={}",
                s.hadm_id
            )));
        }
        patches.push(Patch {
            hadm_id: s.hadm_id,
            label: s.label,
            offset,
            x,
        });
    }
    Ok(PatchMatrix { patch_len, patches })
}

/// Gradient of the phase loss with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub dw: DMatrix<f64>,
    pub db: DVector<f64>,
}

#[derive(Debug, Clone, Copy)]
struct SlotFlags {
    trainable: bool,
    l1: bool,
}

fn forward_all(layers: &[DenseLayer], x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(layers.len());
    for (i, l) in layers.iter().enumerate() {
        let input = if i == 0 { x } else { &acts[i - 1] };
        acts.push(l.forward(input));
    }
    acts
}

/// Phase loss: mean squared reconstruction over the batch, plus the L1
/// activity penalty on flagged activations (also per example) and the L2
/// penalty on trainable weight matrices.
fn phase_loss(layers: &[DenseLayer], flags: &[SlotFlags], x: &DMatrix<f64>, cfg: &TrainConfig) -> f64 {
    let acts = forward_all(layers, x);
    let m = x.ncols() as f64;
    let recon = (acts.last().unwrap() - x).map(|v| v * v).sum() / m;
    let mut l1 = 0.0;
    let mut l2 = 0.0;
    for i in 0..layers.len() {
        if flags[i].l1 {
            l1 += acts[i].iter().map(|a| a.abs()).sum::<f64>();
        }
        if flags[i].trainable {
            l2 += layers[i].w.iter().map(|w| w * w).sum::<f64>();
        }
    }
    recon + cfg.l1_activity * l1 / m + cfg.l2_weight * l2
}

/// Backprop through the stack; returns the loss and per-layer gradients
/// (None for frozen layers). The target is the raw input.
fn phase_gradients(
    layers: &[DenseLayer],
    flags: &[SlotFlags],
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> (f64, Vec<Option<LayerGrad>>) {
    let acts = forward_all(layers, x);
    let m = x.ncols() as f64;

    let mut loss = (acts.last().unwrap() - x).map(|v| v * v).sum() / m;
    for i in 0..layers.len() {
        if flags[i].l1 {
            loss += cfg.l1_activity * acts[i].iter().map(|a| a.abs()).sum::<f64>() / m;
        }
        if flags[i].trainable {
            loss += cfg.l2_weight * layers[i].w.iter().map(|w| w * w).sum::<f64>();
        }
    }

    let mut da = (acts.last().unwrap() - x) * (2.0 / m);
    let mut grads: Vec<Option<LayerGrad>> = vec![None; layers.len()];
    for i in (0..layers.len()).rev() {
        let a = &acts[i];
        if flags[i].l1 {
            da += a.map(|v| v.signum()) * (cfg.l1_activity / m);
        }
        let dz = match layers[i].activation {
            Activation::Sigmoid => da.component_mul(&a.map(|v| v * (1.0 - v))),
            Activation::Linear => da.clone(),
        };
        if flags[i].trainable {
            let prev: &DMatrix<f64> = if i == 0 { x } else { &acts[i - 1] };
            let dw = &dz * prev.transpose() + &layers[i].w * (2.0 * cfg.l2_weight);
            let db = dz.column_sum();
            grads[i] = Some(LayerGrad { dw, db });
        }
        if i > 0 {
            da = layers[i].w.transpose() * dz;
        }
    }
    (loss, grads)
}

/// Loss curve of one phase; index 0 is the loss before any update.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.train_losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.train_losses.last().unwrap()
    }
}

fn select_columns(data: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(data.nrows(), idx.len(), |r, c| data[(r, idx[c])])
}

/// Mini-batch SGD over the trainable slots. `keep_best` restores the
/// parameters of the lowest-loss epoch (including the initial state) at the
/// end, making "never ends worse" structural.
fn run_phase(
    layers: &mut [DenseLayer],
    flags: &[SlotFlags],
    data: &DMatrix<f64>,
    cfg: &TrainConfig,
    shuffle_seed: u64,
    keep_best: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    let n = data.ncols();
    if n == 0 {
        return Err(Error::Data("cannot train on an empty patch set".to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_val = (cfg.validation_fraction * n as f64).floor() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let (val_idx, train_idx) = idx.split_at(n_val);
    let train = select_columns(data, train_idx);
    let val = (!val_idx.is_empty()).then(|| select_columns(data, val_idx));

    let snapshot = |layers: &[DenseLayer]| -> Vec<DenseLayer> { layers.to_vec() };
    let mut train_losses = vec![phase_loss(layers, flags, &train, cfg)];
    let mut val_losses: Vec<f64> = Vec::new();
    if let Some(v) = &val {
        val_losses.push(phase_loss(layers, flags, v, cfg));
    }
    let mut best = keep_best.then(|| (train_losses[0], snapshot(layers)));

    let mut order: Vec<usize> = (0..train.ncols()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch_idx in order.chunks(cfg.batch_size) {
            let xb = select_columns(&train, batch_idx);
            let (_, grads) = phase_gradients(layers, flags, &xb, cfg);
            for (layer, grad) in layers.iter_mut().zip(grads) {
                if let Some(g) = grad {
                    layer.w -= g.dw * cfg.learning_rate;
                    layer.b -= g.db * cfg.learning_rate;
                }
            }
        }
        let loss = phase_loss(layers, flags, &train, cfg);
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at epoch {epoch} (loss {loss}); try a smaller learning rate"
            )));
        }
        train_losses.push(loss);
        if let Some(v) = &val {
            val_losses.push(phase_loss(layers, flags, v, cfg));
        }
        if let Some((best_loss, best_params)) = &mut best {
            if loss < *best_loss {
                *best_loss = loss;
                *best_params = snapshot(layers);
            }
        }
    }
    if let Some((_, best_params)) = best {
        for (layer, saved) in layers.iter_mut().zip(best_params) {
            *layer = saved;
        }
    }
    Ok(TrainReport { train_losses, val_losses })
}

const TRAINABLE_L1: SlotFlags = SlotFlags { trainable: true, l1: true };
const TRAINABLE: SlotFlags = SlotFlags { trainable: true, l1: false };
const FROZEN: SlotFlags = SlotFlags { trainable: false, l1: false };

/// Train the first encoder/decoder pair on raw patches.
pub fn train_layer1(
    patches: &PatchMatrix,
    cfg: &TrainConfig,
) -> Result<(DenseLayer, DenseLayer, TrainReport)> {
    cfg.validate()?;
    let dim = patches.input_dim();
    let mut layers = vec![
        DenseLayer::seeded(cfg.hidden, dim, Activation::Sigmoid, seeds::derive(cfg.seed, "encode1")),
        DenseLayer::seeded(dim, cfg.hidden, Activation::Linear, seeds::derive(cfg.seed, "decode1")),
    ];
    let report = run_phase(
        &mut layers,
        &[TRAINABLE_L1, TRAINABLE],
        &patches.to_matrix(),
        cfg,
        seeds::derive(cfg.seed, "phase1-order"),
        false,
    )?;
    let dec = layers.pop().unwrap();
    let enc = layers.pop().unwrap();
    Ok((enc, dec, report))
}

/// Train the second encoder/decoder against raw patches while the first
/// encoder stays frozen (bit-identical before and after).
pub fn train_layer2(
    patches: &PatchMatrix,
    encode1: &DenseLayer,
    cfg: &TrainConfig,
) -> Result<(DenseLayer, DenseLayer, TrainReport)> {
    cfg.validate()?;
    let dim = patches.input_dim();
    let hidden1 = encode1.w.nrows();
    let mut layers = vec![
        encode1.clone(),
        DenseLayer::seeded(cfg.hidden, hidden1, Activation::Sigmoid, seeds::derive(cfg.seed, "encode2")),
        DenseLayer::seeded(dim, cfg.hidden, Activation::Linear, seeds::derive(cfg.seed, "decode2")),
    ];
    let report = run_phase(
        &mut layers,
        &[FROZEN, TRAINABLE_L1, TRAINABLE],
        &patches.to_matrix(),
        cfg,
        seeds::derive(cfg.seed, "phase2-order"),
        false,
    )?;
    debug_assert!(layers[0].bits_equal(encode1));
    let dec = layers.pop().unwrap();
    let enc = layers.pop().unwrap();
    Ok((enc, dec, report))
}

/// The stacked model. Decoders exist only while training; persisted models
/// carry the two encoders, the training config, and the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedAutoencoder {
    pub encode1: DenseLayer,
    pub encode2: DenseLayer,
    pub decode1: Option<DenseLayer>,
    pub decode2: Option<DenseLayer>,
    pub config: TrainConfig,
}

impl StackedAutoencoder {
    /// Freshly initialized (untrained) encoders for the given patch width.
    pub fn init(patch_len: usize, cfg: &TrainConfig) -> Self {
        let dim = 2 * patch_len;
        StackedAutoencoder {
            encode1: DenseLayer::seeded(
                cfg.hidden,
                dim,
                Activation::Sigmoid,
                seeds::derive(cfg.seed, "encode1"),
            ),
            encode2: DenseLayer::seeded(
                cfg.hidden,
                cfg.hidden,
                Activation::Sigmoid,
                seeds::derive(cfg.seed, "encode2"),
            ),
            decode1: None,
            decode2: None,
            config: cfg.clone(),
        }
    }
}

/// Jointly optimize encode1, encode2, and decode2 on raw patches. The best
/// epoch (including the starting point) is kept, so the final training loss
/// never exceeds the pre-fine-tuning loss.
pub fn fine_tune(
    patches: &PatchMatrix,
    model: StackedAutoencoder,
    cfg: &TrainConfig,
) -> Result<(StackedAutoencoder, TrainReport)> {
    cfg.validate()?;
    let decode2 = model.decode2.ok_or_else(|| {
        Error::Config("fine_tune requires a trained decode2 layer".to_string())
    })?;
    let mut layers = vec![model.encode1, model.encode2, decode2];
    let report = run_phase(
        &mut layers,
        &[TRAINABLE_L1, TRAINABLE_L1, TRAINABLE],
        &patches.to_matrix(),
        cfg,
        seeds::derive(cfg.seed, "finetune-order"),
        true,
    )?;
    let decode2 = layers.pop().unwrap();
    let encode2 = layers.pop().unwrap();
    let encode1 = layers.pop().unwrap();
    Ok((
        StackedAutoencoder {
            encode1,
            encode2,
            decode1: model.decode1,
            decode2: Some(decode2),
            config: cfg.clone(),
        },
        report,
    ))
}

/// All three phases in sequence: layer 1, layer 2 (frozen layer 1), joint
/// fine-tuning.
pub fn train_stack(
    patches: &PatchMatrix,
    cfg: &TrainConfig,
) -> Result<(StackedAutoencoder, [TrainReport; 3])> {
    let (encode1, _decode1, r1) = train_layer1(patches, cfg)?;
    let (encode2, decode2, r2) = train_layer2(patches, &encode1, cfg)?;
    let model = StackedAutoencoder {
        encode1,
        encode2,
        decode1: None,
        decode2: Some(decode2),
        config: cfg.clone(),
    };
    let (model, r3) = fine_tune(patches, model, cfg)?;
    Ok((model, [r1, r2, r3]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeLayer {
    First,
    Second,
}

/// Feature matrix (row per patch): encode1 activations, or
/// encode2(encode1(x)) for the second layer. Sigmoid keeps every entry in
/// (0, 1).
pub fn encode(model: &StackedAutoencoder, patches: &PatchMatrix, layer: EncodeLayer) -> DMatrix<f64> {
    let x = patches.to_matrix();
    let a1 = model.encode1.forward(&x);
    let features = match layer {
        EncodeLayer::First => a1,
        EncodeLayer::Second => model.encode2.forward(&a1),
    };
    features.transpose()
}

/// Rows of encode1's weight matrix, one time-series signature per hidden
/// unit.
pub fn first_layer_signatures(model: &StackedAutoencoder) -> Vec<Vec<f64>> {
    model
        .encode1
        .w
        .row_iter()
        .map(|r| r.iter().copied().collect())
        .collect()
}

// --- Gradient-check entry points -------------------------------------------
//
// Pure loss/gradient evaluations for each training phase, used to validate
// the backprop against central finite differences.

pub fn layer1_loss(enc: &DenseLayer, dec: &DenseLayer, x: &DMatrix<f64>, cfg: &TrainConfig) -> f64 {
    phase_loss(&[enc.clone(), dec.clone()], &[TRAINABLE_L1, TRAINABLE], x, cfg)
}

pub fn layer1_gradients(
    enc: &DenseLayer,
    dec: &DenseLayer,
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> (LayerGrad, LayerGrad) {
    let (_, mut grads) = phase_gradients(
        &[enc.clone(), dec.clone()],
        &[TRAINABLE_L1, TRAINABLE],
        x,
        cfg,
    );
    let g1 = grads.remove(0).unwrap();
    let g2 = grads.remove(0).unwrap();
    (g1, g2)
}

pub fn layer2_loss(
    enc1: &DenseLayer,
    enc2: &DenseLayer,
    dec2: &DenseLayer,
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> f64 {
    phase_loss(
        &[enc1.clone(), enc2.clone(), dec2.clone()],
        &[FROZEN, TRAINABLE_L1, TRAINABLE],
        x,
        cfg,
    )
}

pub fn layer2_gradients(
    enc1: &DenseLayer,
    enc2: &DenseLayer,
    dec2: &DenseLayer,
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> (LayerGrad, LayerGrad) {
    let (_, mut grads) = phase_gradients(
        &[enc1.clone(), enc2.clone(), dec2.clone()],
        &[FROZEN, TRAINABLE_L1, TRAINABLE],
        x,
        cfg,
    );
    let g_dec = grads.pop().unwrap().unwrap();
    let g_enc = grads.pop().unwrap().unwrap();
    (g_enc, g_dec)
}

pub fn stack_loss(
    enc1: &DenseLayer,
    enc2: &DenseLayer,
    dec2: &DenseLayer,
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> f64 {
    phase_loss(
        &[enc1.clone(), enc2.clone(), dec2.clone()],
        &[TRAINABLE_L1, TRAINABLE_L1, TRAINABLE],
        x,
        cfg,
    )
}

pub fn stack_gradients(
    enc1: &DenseLayer,
    enc2: &DenseLayer,
    dec2: &DenseLayer,
    x: &DMatrix<f64>,
    cfg: &TrainConfig,
) -> (LayerGrad, LayerGrad, LayerGrad) {
    let (_, mut grads) = phase_gradients(
        &[enc1.clone(), enc2.clone(), dec2.clone()],
        &[TRAINABLE_L1, TRAINABLE_L1, TRAINABLE],
        x,
        cfg,
    );
    let g_dec = grads.pop().unwrap().unwrap();
    let g_enc2 = grads.pop().unwrap().unwrap();
    let g_enc1 = grads.pop().unwrap().unwrap();
    (g_enc1, g_enc2, g_dec)
}

// --- Model persistence ------------------------------------------------------

const MODEL_MAGIC: &str = "PHENO-AE v1";

fn push_layer_bytes(out: &mut Vec<u8>, layer: &DenseLayer) {
    for v in layer.w.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in layer.b.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Save the trained encoders: a self-describing text header (shapes, config,
/// seed), a blank line, then raw little-endian 64-bit floats.
pub fn save_model(path: &Path, model: &StackedAutoencoder) -> Result<()> {
    let c = &model.config;
    let header = format!(
        "{MODEL_MAGIC}\n\
         patch_len = {}\n\
         encode1 = {} {}\n\
         encode2 = {} {}\n\
         hidden = {}\n\
         l1_activity = {}\n\
         l2_weight = {}\n\
         epochs = {}\n\
         learning_rate = {}\n\
         batch_size = {}\n\
         validation_fraction = {}\n\
         seed = {}\n\n",
        model.encode1.w.ncols() / 2,
        model.encode1.w.nrows(),
        model.encode1.w.ncols(),
        model.encode2.w.nrows(),
        model.encode2.w.ncols(),
        c.hidden,
        c.l1_activity,
        c.l2_weight,
        c.epochs,
        c.learning_rate,
        c.batch_size,
        c.validation_fraction,
        c.seed,
    );
    let mut bytes = header.into_bytes();
    push_layer_bytes(&mut bytes, &model.encode1);
    push_layer_bytes(&mut bytes, &model.encode2);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn take_f64(blob: &[u8], pos: &mut usize, path: &Path) -> Result<f64> {
    let end = *pos + 8;
    let chunk = blob
        .get(*pos..end)
        .ok_or_else(|| Error::Data(format!("{}: truncated weight blob", path.display())))?;
    *pos = end;
    Ok(f64::from_le_bytes(chunk.try_into().unwrap()))
}

fn read_layer(
    blob: &[u8],
    pos: &mut usize,
    rows: usize,
    cols: usize,
    activation: Activation,
    path: &Path,
) -> Result<DenseLayer> {
    let mut w = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            w[(r, c)] = take_f64(blob, pos, path)?;
        }
    }
    let mut b = DVector::zeros(rows);
    for r in 0..rows {
        b[r] = take_f64(blob, pos, path)?;
    }
    Ok(DenseLayer { w, b, activation })
}

/// Load a model saved by [`save_model`]; encode outputs are bit-exact.
pub fn load_model(path: &Path) -> Result<StackedAutoencoder> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Data(format!("{}: missing model header", path.display())))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Data(format!("{}: non-utf8 model header", path.display())))?;
    let blob = &bytes[split + 2..];

    let mut lines = header.lines();
    if lines.next() != Some(MODEL_MAGIC) {
        return Err(Error::Data(format!(
            "{}: not a {MODEL_MAGIC} model file",
            path.display()
        )));
    }
    let mut fields: std::collections::HashMap<&str, &str> = std::collections::HashMap::new();
    for line in lines {
        if let Some((k, v)) = line.split_once('=') {
            fields.insert(k.trim(), v.trim());
        }
    }
    let get = |key: &str| -> Result<&str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::Data(format!("{}: model header missing {key}", path.display())))
    };
    let shape = |key: &str| -> Result<(usize, usize)> {
        let raw = get(key)?;
        let mut it = raw.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad shape {raw:?}", path.display())))
        };
        Ok((parse(it.next())?, parse(it.next())?))
    };
    let num = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad number for {key}", path.display())))
    };

    let (e1r, e1c) = shape("encode1")?;
    let (e2r, e2c) = shape("encode2")?;
    let config = TrainConfig {
        hidden: num("hidden")? as usize,
        l1_activity: num("l1_activity")?,
        l2_weight: num("l2_weight")?,
        epochs: num("epochs")? as usize,
        learning_rate: num("learning_rate")?,
        batch_size: num("batch_size")? as usize,
        validation_fraction: num("validation_fraction")?,
        seed: num("seed")? as u64,
    };
    let mut pos = 0usize;
    let encode1 = read_layer(blob, &mut pos, e1r, e1c, Activation::Sigmoid, path)?;
    let encode2 = read_layer(blob, &mut pos, e2r, e2c, Activation::Sigmoid, path)?;
    Ok(StackedAutoencoder {
        encode1,
        encode2,
        decode1: None,
        decode2: None,
        config,
    })
}

/// Feature matrix CSV `patch_id,hadm_id,label,f1..fK`.
pub fn write_features_csv(path: &Path, patches: &PatchMatrix, features: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut header = vec!["patch_id".to_string(), "hadm_id".to_string(), "label".to_string()];
    header.extend((1..=features.ncols()).map(|i| format!("f{i}")));
    w.write_record(&header)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for (i, patch) in patches.patches.iter().enumerate() {
        let mut record = vec![i.to_string(), patch.hadm_id.to_string(), patch.label.to_string()];
        record.extend(features.row(i).iter().map(|v| v.to_string()));
        w.write_record(&record)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read features back as (patch metadata, row-per-patch matrix).
pub fn read_features_csv(path: &Path) -> Result<(Vec<(u64, u8)>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let width = r
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .len()
        .saturating_sub(3);
    let mut meta = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let hadm: u64 = record
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: bad hadm_id", path.display())))?;
        let label: u8 = record
            .get(2)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: bad label", path.display())))?;
        meta.push((hadm, label));
        for i in 0..width {
            let v: f64 = record
                .get(3 + i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad feature value", path.display())))?;
            rows.push(v);
        }
    }
    let n = meta.len();
    Ok((meta, DMatrix::from_row_slice(n, width, &rows)))
}

/// Patch matrix CSV `patch_id,hadm_id,label,offset,x0..x{2p-1}`.
pub fn write_patches_csv(path: &Path, patches: &PatchMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let dim = patches.input_dim();
    let mut header = vec![
        "patch_id".to_string(),
        "hadm_id".to_string(),
        "label".to_string(),
        "offset".to_string(),
    ];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for (i, p) in patches.patches.iter().enumerate() {
        let mut record = vec![
            i.to_string(),
            p.hadm_id.to_string(),
            p.label.to_string(),
            p.offset.to_string(),
        ];
        record.extend(p.x.iter().map(|v| v.to_string()));
        w.write_record(&record)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_patches_csv(path: &Path) -> Result<PatchMatrix> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let width = r
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .len()
        .saturating_sub(4);
    if width == 0 || width % 2 != 0 {
        return Err(Error::Data(format!(
            "{}: patch file must have an even number of value columns",
            path.display()
        )));
    }
    let mut patches = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let field = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::Data(format!("{}: short row", path.display())))
        };
        let hadm_id: u64 = field(1)?
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad hadm_id", path.display())))?;
        let label: u8 = field(2)?
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad label", path.display())))?;
        let offset: usize = field(3)?
            .parse()
            .map_err(|_| Error::Data(format!("{}: bad offset", path.display())))?;
        let mut x = Vec::with_capacity(width);
        for i in 0..width {
            x.push(
                field(4 + i)?
                    .parse()
                    .map_err(|_| Error::Data(format!("{}: bad patch value", path.display())))?,
            );
        }
        patches.push(Patch { hadm_id, label, offset, x });
    }
    Ok(PatchMatrix { patch_len: width / 2, patches })
}
