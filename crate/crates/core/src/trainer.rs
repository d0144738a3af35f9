//! Interleaved adversarial training of the autoencoder and the discriminator.
//!
//! Every batch gives the discriminator one step on `L_disc = Ind`; every
//! `beta`-th batch also gives the encoder and decoder one step on
//! `L_AE = recon - lambda * Ind`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::datagen::{Condition, PairedDataset};
use crate::error::{Error, Result};
use crate::eval::{as_points, best_spearman, subsample_indices};
use crate::infometrics::{hsic, pearson, Points};
use crate::io;
use crate::nn::{Activation, AdamState, Layer, Mode, Net, NetCheckpoint, NetSpec, Role};
use crate::objectives::{self, derangement, IndKind, ObjectiveConfig, ReconKind};

fn default_weight_decay() -> f64 {
    1e-4
}

fn one() -> usize {
    1
}

fn default_eval_samples() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Discriminator steps per autoencoder step.
    pub beta: usize,
    pub lr_ae: f64,
    pub lr_disc: f64,
    pub objective: ObjectiveConfig,
    pub encoder: NetSpec,
    pub decoder: NetSpec,
    pub discriminator: NetSpec,
    #[serde(default = "default_weight_decay")]
    pub disc_weight_decay: f64,
    /// Epochs between metric records; the last epoch is always recorded.
    #[serde(default = "one")]
    pub eval_every: usize,
    /// Sequence data only: train on random windows of this many time steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_len: Option<usize>,
    /// Random windows drawn from every sequence per epoch; needs `crop_len`.
    #[serde(default = "one")]
    pub crops_per_sample: usize,
    /// Points used for the per-record Spearman and HSIC estimates.
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

impl TrainConfig {
    /// Two-dimensional demo: three hidden layers of 64 units for every
    /// network, a one-dimensional code, regression discriminator and L1
    /// reconstruction, with an autoencoder step every fifth batch.
    pub fn two_d(act: Activation, lambda: f64, seed: u64) -> Self {
        Self::flat(2, 1, 1, act, lambda, seed)
    }

    /// Flat features of width `input` with a numeric condition of width
    /// `cond`, encoded to `code` dimensions by 3x64 MLPs.
    ///
    /// The discriminator standardizes its input with a batchnorm layer. Its
    /// r^2 score ignores the output gain, so without it a small initial code
    /// can let the gain drift to zero and stall training on a degenerate batch.
    pub fn flat(input: usize, cond: usize, code: usize, act: Activation, lambda: f64, seed: u64) -> Self {
        let hidden = [64, 64, 64];
        let mut discriminator = NetSpec::mlp(Role::Discriminator, code, &hidden, cond, act, Activation::Identity);
        discriminator.layers.insert(0, Layer::Batchnorm1d { ch: code });
        Self {
            seed,
            epochs: 30,
            batch_size: 64,
            beta: 5,
            lr_ae: 1e-4,
            lr_disc: 1e-4,
            objective: ObjectiveConfig {
                recon: ReconKind::L1,
                ind: IndKind::Regression,
                lambda,
            },
            encoder: NetSpec::mlp(Role::Encoder, input, &hidden, code, act, Activation::Identity),
            decoder: NetSpec::conditioned_mlp(Role::Decoder, code, cond, None, &hidden, input, act, Activation::Identity),
            discriminator,
            disc_weight_decay: default_weight_decay(),
            eval_every: 1,
            crop_len: None,
            crops_per_sample: 1,
            eval_samples: default_eval_samples(),
        }
    }

    /// Multichannel recordings: convolutional encoder and decoder, and a
    /// discriminator with the encoder's architecture mapping the reference
    /// channels to the code space under the scale-invariant objective.
    pub fn sequence(n_a: usize, n_t: usize, code: usize, seed: u64) -> Self {
        Self {
            seed,
            epochs: 20,
            batch_size: 32,
            beta: 5,
            lr_ae: 1e-4,
            lr_disc: 1e-4,
            objective: ObjectiveConfig {
                recon: ReconKind::Mse,
                ind: IndKind::ScaleInvariant,
                lambda: 0.01,
            },
            encoder: NetSpec::ecg_encoder(Role::Encoder, n_a, code),
            decoder: NetSpec::ecg_decoder(code, n_t, n_a),
            discriminator: NetSpec::ecg_encoder(Role::Discriminator, n_t, code),
            disc_weight_decay: default_weight_decay(),
            eval_every: 1,
            crop_len: None,
            crops_per_sample: 1,
            eval_samples: default_eval_samples(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta == 0 || self.batch_size < 2 || self.epochs == 0 || self.eval_every == 0 {
            return Err(Error::invalid("need beta >= 1, batch_size >= 2, epochs >= 1, eval_every >= 1"));
        }
        for (name, lr) in [("lr_ae", self.lr_ae), ("lr_disc", self.lr_disc)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and > 0, got {lr}")));
            }
        }
        if !(self.disc_weight_decay >= 0.0 && self.disc_weight_decay.is_finite()) {
            return Err(Error::invalid("disc_weight_decay must be finite and >= 0"));
        }
        if self.crop_len == Some(0) || self.eval_samples < 3 {
            return Err(Error::invalid("crop_len must be positive and eval_samples >= 3"));
        }
        if self.crops_per_sample == 0 || (self.crops_per_sample > 1 && self.crop_len.is_none()) {
            return Err(Error::invalid("crops_per_sample must be >= 1, and > 1 only with crop_len"));
        }
        self.objective.validate()?;
        for (spec, role) in [
            (&self.encoder, Role::Encoder),
            (&self.decoder, Role::Decoder),
            (&self.discriminator, Role::Discriminator),
        ] {
            if spec.role != role {
                return Err(Error::invalid(format!("{role:?} slot holds a {:?} spec", spec.role)));
            }
        }
        let code = self.encoder.validate()?;
        if self.decoder.input_width() != code {
            return Err(Error::invalid(format!(
                "decoder takes {} code features, encoder emits {code}",
                self.decoder.input_width()
            )));
        }
        if self.decoder.validate()? != self.encoder.input_width() {
            return Err(Error::invalid("decoder output width differs from the encoder input width"));
        }
        if self.decoder.condition().is_none() {
            return Err(Error::invalid("decoder must take the condition"));
        }
        let h_out = self.discriminator.validate()?;
        let h_cond = self.discriminator.condition().is_some();
        match self.objective.ind {
            IndKind::Contrastive if !h_cond => {
                return Err(Error::invalid("contrastive discriminator must take the condition"))
            }
            IndKind::Contrastive if h_out != 1 => return Err(Error::invalid("contrastive discriminator emits one logit")),
            IndKind::ScaleInvariant if h_out != code => {
                return Err(Error::invalid("scale-invariant discriminator must emit the code width"))
            }
            IndKind::DomainConfusion | IndKind::Regression | IndKind::ScaleInvariant if h_cond => {
                return Err(Error::invalid("this discriminator takes no condition"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Checks that the dataset fits the networks and the objective.
    pub fn validate_for(&self, data: &PairedDataset) -> Result<()> {
        self.validate()?;
        if data.len() < 2 {
            return Err(Error::invalid("dataset needs at least two samples"));
        }
        if data.is_sequence() != self.encoder.is_sequence() {
            return Err(Error::invalid("encoder input kind does not match the dataset"));
        }
        if data.x.shape()[1] != self.encoder.input_width() {
            return Err(Error::invalid(format!(
                "dataset has {} input features, encoder expects {}",
                data.x.shape()[1],
                self.encoder.input_width()
            )));
        }
        let classes = self.decoder.condition().and_then(|c| c.2);
        match (&data.t, self.objective.ind) {
            (Condition::Classes { .. }, IndKind::Regression | IndKind::ScaleInvariant) => {
                return Err(Error::invalid("regression and scale-invariant objectives need a numeric condition"))
            }
            (Condition::Numeric(_), IndKind::DomainConfusion) => {
                return Err(Error::invalid("domain confusion needs class conditions"))
            }
            _ => {}
        }
        match (&data.t, classes) {
            (Condition::Classes { classes: k, .. }, Some(c)) if *k == c => {}
            (Condition::Numeric(_), None) => {}
            _ => return Err(Error::invalid("decoder condition layer does not match the dataset condition")),
        }
        if let Some(len) = self.crop_len {
            if !data.is_sequence() || len > data.x.shape()[2] {
                return Err(Error::invalid("crop_len needs sequence data at least that long"));
            }
        }
        Ok(())
    }
}

/// Shuffled index batches of size `b` for one epoch.
///
/// A short final batch is dropped, unless it is the only batch and still
/// holds at least two samples.
pub fn make_batches(n: usize, b: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let b = b.max(1);
    let mut batches: Vec<Vec<usize>> = idx.chunks(b).map(<[usize]>::to_vec).collect();
    if let Some(last) = batches.last() {
        let only = batches.len() == 1;
        if last.len() < 2 || (last.len() < b && !only) {
            batches.pop();
        }
    }
    batches
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nets {
    pub encoder: Net,
    pub decoder: Net,
    pub discriminator: Net,
}

impl Nets {
    pub fn set_mode(&mut self, mode: Mode) {
        self.encoder.set_mode(mode);
        self.decoder.set_mode(mode);
        self.discriminator.set_mode(mode);
    }
}

/// One training batch: inputs, decoder condition (one-hot for classes) and labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub cond: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn from_dataset(data: &PairedDataset, idx: &[usize]) -> Result<Self> {
        let t = data.t.select(idx)?;
        Ok(Self {
            x: data.x.select_rows(idx)?,
            labels: match &t {
                Condition::Classes { labels, .. } => Some(labels.clone()),
                Condition::Numeric(_) => None,
            },
            cond: t.to_tensor(),
        })
    }

    /// Cuts sample `i` of `[B, C, T]` tensors to `[offsets[i], offsets[i] + len)`.
    pub fn crop(&self, offsets: &[usize], len: usize) -> Result<Self> {
        let cut = |t: &Tensor| -> Result<Tensor> {
            let rows: Result<Vec<Tensor>> = t
                .unstack()
                .iter()
                .zip(offsets)
                .map(|(row, &o)| row.window_last(o, len))
                .collect();
            let rows = rows?;
            Tensor::stack(&rows.iter().collect::<Vec<_>>())
        };
        Ok(Self {
            x: cut(&self.x)?,
            cond: cut(&self.cond)?,
            labels: self.labels.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscStep {
    pub ind: f64,
    /// r^2 for regression, accuracy for the classifiers, the distance for scale-invariant.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeStep {
    pub recon: f64,
    pub ind: f64,
}

/// Value of the independence term and the discriminator's score on it.
fn independence(
    g: &mut Graph,
    kind: IndKind,
    h: &Net,
    code: Var,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, f64, crate::nn::Forward)> {
    match kind {
        IndKind::Regression => {
            let fwd = h.forward(g, code, None)?;
            let t = g.constant(batch.cond.clone());
            let ind = objectives::ind_regression(g, fwd.output, t)?;
            let score = -g.value(ind).item().unwrap_or(f64::NAN);
            Ok((ind, score, fwd))
        }
        IndKind::DomainConfusion => {
            let labels = batch.labels.as_ref().ok_or_else(|| Error::invalid("domain confusion needs labels"))?;
            let fwd = h.forward(g, code, None)?;
            let ind = objectives::ind_domain_confusion(g, fwd.output, labels)?;
            let logits = g.value(fwd.output);
            let k = logits.shape()[1];
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| {
                    let row = &logits.data()[i * k..(i + 1) * k];
                    (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])) == Some(l)
                })
                .count();
            Ok((ind, hits as f64 / labels.len() as f64, fwd))
        }
        IndKind::Contrastive => {
            let b = batch.x.shape()[0];
            let perm = derangement(b, rng);
            let fake = batch.cond.select_rows(&perm)?;
            let cond = Tensor::stack(&[&batch.cond, &fake])
                .and_then(|t| {
                    let mut shape = batch.cond.shape().to_vec();
                    shape[0] *= 2;
                    t.reshape(&shape)
                })?;
            let cond = g.constant(cond);
            let codes = g.concat(&[code, code], 0)?;
            let fwd = h.forward(g, codes, Some(cond))?;
            let labels: Vec<bool> = (0..2 * b).map(|i| i < b).collect();
            let ind = objectives::ind_contrastive(g, fwd.output, &labels)?;
            let hits = g
                .value(fwd.output)
                .data()
                .iter()
                .zip(&labels)
                .filter(|(z, &l)| (**z > 0.0) == l)
                .count();
            Ok((ind, hits as f64 / (2 * b) as f64, fwd))
        }
        IndKind::ScaleInvariant => {
            let t = g.constant(batch.cond.clone());
            let fwd = h.forward(g, t, None)?;
            let ind = objectives::ind_scale_invariant_batched(g, code, fwd.output)?;
            let score = g.value(ind).item().unwrap_or(f64::NAN);
            Ok((ind, score, fwd))
        }
    }
}

fn grads_for(g: &Graph, root: Var, params: &[Var], net: &Net) -> Result<Vec<Tensor>> {
    let grads = g.backward(root)?;
    Ok(params
        .iter()
        .zip(net.params())
        .map(|(&v, p)| grads.get_or_zeros(v, &p.tensor))
        .collect())
}

fn finite(value: f64, what: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { op: what })
    }
}

/// Networks, optimizers and step counters of one training run.
pub struct Trainer {
    config: TrainConfig,
    nets: Nets,
    adam_enc: AdamState,
    adam_dec: AdamState,
    adam_disc: AdamState,
    rng: ChaCha8Rng,
    disc_steps: usize,
    ae_steps: usize,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let s = config.seed;
        let encoder = Net::build(&config.encoder, s.wrapping_add(1))?;
        let decoder = Net::build(&config.decoder, s.wrapping_add(2))?;
        let discriminator = Net::build(&config.discriminator, s.wrapping_add(3))?;
        let adam_enc = AdamState::for_net(&encoder, config.lr_ae);
        let adam_dec = AdamState::for_net(&decoder, config.lr_ae);
        let adam_disc = AdamState::for_net(&discriminator, config.lr_disc).with_weight_decay(config.disc_weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        rng.set_stream(u64::MAX);
        Ok(Self {
            config: config.clone(),
            nets: Nets {
                encoder,
                decoder,
                discriminator,
            },
            adam_enc,
            adam_dec,
            adam_disc,
            rng,
            disc_steps: 0,
            ae_steps: 0,
        })
    }

    pub fn nets(&self) -> &Nets {
        &self.nets
    }

    pub fn nets_mut(&mut self) -> &mut Nets {
        &mut self.nets
    }

    pub fn into_nets(self) -> Nets {
        self.nets
    }

    /// `(discriminator steps, autoencoder steps)` taken so far.
    pub fn step_counts(&self) -> (usize, usize) {
        (self.disc_steps, self.ae_steps)
    }

    /// Gathers a batch, cropping sequences to random windows when configured.
    pub fn batch(&mut self, data: &PairedDataset, idx: &[usize]) -> Result<Batch> {
        let batch = Batch::from_dataset(data, idx)?;
        match self.config.crop_len {
            Some(len) => {
                let total = batch.x.shape()[2];
                let offsets: Vec<usize> = idx.iter().map(|_| self.rng.random_range(0..=total - len)).collect();
                batch.crop(&offsets, len)
            }
            None => Ok(batch),
        }
    }

    /// One discriminator update on codes from the current encoder, which is left untouched.
    pub fn train_step_disc(&mut self, batch: &Batch) -> Result<DiscStep> {
        let code = {
            let mut g = Graph::new();
            g.set_grad_enabled(false);
            let x = g.constant(batch.x.clone());
            let fwd = self.nets.encoder.forward(&mut g, x, None)?;
            g.value(fwd.output).clone()
        };
        let mut g = Graph::new();
        let code = g.constant(code);
        let (ind, score, fwd) = independence(
            &mut g,
            self.config.objective.ind,
            &self.nets.discriminator,
            code,
            batch,
            &mut self.rng,
        )?;
        let loss = objectives::loss_disc(ind);
        let value = finite(g.value(loss).item().unwrap_or(f64::NAN), "discriminator loss")?;
        let grads = grads_for(&g, loss, &fwd.params, &self.nets.discriminator)?;
        self.adam_disc.step(self.nets.discriminator.params_mut(), &grads)?;
        self.nets.discriminator.update_running_stats(&g, &fwd);
        self.disc_steps += 1;
        Ok(DiscStep { ind: value, score })
    }

    /// One encoder/decoder update on `recon - lambda * Ind`; the discriminator is left untouched.
    pub fn train_step_ae(&mut self, batch: &Batch) -> Result<AeStep> {
        let obj = self.config.objective;
        let mut g = Graph::new();
        let x = g.constant(batch.x.clone());
        let cond = g.constant(batch.cond.clone());
        let enc = self.nets.encoder.forward(&mut g, x, None)?;
        let dec = self.nets.decoder.forward(&mut g, enc.output, Some(cond))?;
        let recon = objectives::recon(&mut g, obj.recon, dec.output, x)?;
        let (ind, _, _) = independence(&mut g, obj.ind, &self.nets.discriminator, enc.output, batch, &mut self.rng)?;
        let loss = objectives::loss_ae(&mut g, recon, ind, obj.lambda)?;
        finite(g.value(loss).item().unwrap_or(f64::NAN), "autoencoder loss")?;
        let grads = g.backward(loss)?;
        let collect = |params: &[Var], net: &Net| -> Vec<Tensor> {
            params
                .iter()
                .zip(net.params())
                .map(|(&v, p)| grads.get_or_zeros(v, &p.tensor))
                .collect()
        };
        let ge = collect(&enc.params, &self.nets.encoder);
        let gd = collect(&dec.params, &self.nets.decoder);
        // Validate both before touching either, so a bad gradient changes nothing.
        for (grad, p) in ge.iter().zip(self.nets.encoder.params()).chain(gd.iter().zip(self.nets.decoder.params())) {
            if !grad.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        self.adam_enc.step(self.nets.encoder.params_mut(), &ge)?;
        self.adam_dec.step(self.nets.decoder.params_mut(), &gd)?;
        self.nets.encoder.update_running_stats(&g, &enc);
        self.nets.decoder.update_running_stats(&g, &dec);
        self.ae_steps += 1;
        Ok(AeStep {
            recon: g.value(recon).item().unwrap_or(f64::NAN),
            ind: g.value(ind).item().unwrap_or(f64::NAN),
        })
    }

    pub fn checkpoint(&self, epoch: usize) -> TrainCheckpoint {
        TrainCheckpoint {
            config: self.config.clone(),
            epoch,
            disc_steps: self.disc_steps,
            ae_steps: self.ae_steps,
            encoder: NetCheckpoint::capture(&self.nets.encoder, &self.adam_enc),
            decoder: NetCheckpoint::capture(&self.nets.decoder, &self.adam_dec),
            discriminator: NetCheckpoint::capture(&self.nets.discriminator, &self.adam_disc),
        }
    }
}

/// Everything needed to rebuild the three networks and their optimizers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCheckpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub disc_steps: usize,
    pub ae_steps: usize,
    pub encoder: NetCheckpoint,
    pub decoder: NetCheckpoint,
    pub discriminator: NetCheckpoint,
}

impl TrainCheckpoint {
    pub fn nets(&self) -> Result<Nets> {
        Ok(Nets {
            encoder: self.encoder.clone().restore()?.0,
            decoder: self.decoder.clone().restore()?.0,
            discriminator: self.discriminator.clone().restore()?.0,
        })
    }
}

/// One row of the metrics CSV.
///
/// Columns: `epoch,ae_steps,disc_steps,recon,ind,disc_score,spearman_code_source,hsic_code_condition`.
/// Step counts are cumulative, losses are epoch means, and the last two
/// columns are empty when the dataset has no hidden source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ae_steps: usize,
    pub disc_steps: usize,
    pub recon: Option<f64>,
    pub ind: f64,
    pub disc_score: f64,
    pub spearman_code_source: Option<f64>,
    pub hsic_code_condition: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub disc_steps: usize,
    pub ae_steps: usize,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

pub fn write_metrics_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    io::write_atomic(path, &bytes)
}

/// Codes `E(x)` for every sample; the encoder must be in eval mode.
pub fn encode_dataset(encoder: &Net, x: &Tensor) -> Result<Tensor> {
    if encoder.mode() != Mode::Eval {
        return Err(Error::invalid("encode_dataset needs the encoder in eval mode"));
    }
    encoder.infer(x, None)
}

/// `D(E(x), t_new)`: re-renders each input under a new condition.
pub fn synthesize(nets: &Nets, x: &Tensor, t_new: &Condition) -> Result<Tensor> {
    if nets.encoder.mode() != Mode::Eval || nets.decoder.mode() != Mode::Eval {
        return Err(Error::invalid("synthesize needs the networks in eval mode"));
    }
    let classes = nets.decoder.spec().condition().and_then(|c| c.2);
    match (t_new, classes) {
        (Condition::Classes { classes: k, .. }, Some(c)) if *k == c => {}
        (Condition::Numeric(_), None) => {}
        _ => return Err(Error::invalid("condition type does not match the decoder")),
    }
    let code = nets.encoder.infer(x, None)?;
    nets.decoder.infer(&code, Some(&t_new.to_tensor()))
}

/// Spearman against `s` and HSIC against `t` on a subsample of code points.
fn code_metrics(encoder: &Net, data: &PairedDataset, max: usize, seed: u64) -> Result<(Option<f64>, Option<f64>)> {
    let Some(s) = &data.s else {
        return Ok((None, None));
    };
    let mut enc = encoder.clone();
    enc.set_mode(Mode::Eval);
    let rows: Vec<usize> = if data.is_sequence() {
        (0..data.len()).collect()
    } else {
        (0..data.len().min(max)).collect()
    };
    let sub = data.select(&rows)?;
    let code = encode_dataset(&enc, &sub.x)?;
    let (cp, cd) = as_points(&code)?;
    let (sp, sd) = as_points(&s.select_rows(&rows)?)?;
    let (tp, td) = as_points(&sub.t.to_tensor())?;
    let pick = subsample_indices(cp.len() / cd, max, seed);
    let gather = |v: &[f64], d: usize| -> Vec<f64> { pick.iter().flat_map(|&i| v[i * d..(i + 1) * d].to_vec()).collect() };
    let (cp, sp, tp) = (gather(&cp, cd), gather(&sp, sd), gather(&tp, td));
    let rho = if sd == 1 { best_spearman(&cp, cd, &sp).ok() } else { None };
    let h = hsic(Points::new(&cp, cd)?, Points::new(&tp, td)?).ok();
    Ok((rho, h))
}

/// Runs the full schedule. With `out_dir`, the metrics CSV and the latest
/// checkpoint are rewritten at every record.
pub fn train(config: &TrainConfig, data: &PairedDataset, out_dir: Option<&Path>) -> Result<(Nets, TrainReport)> {
    config.validate_for(data)?;
    let mut trainer = Trainer::new(config)?;
    let mut records = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    for epoch in 0..config.epochs {
        let (mut recon_sum, mut ind_sum, mut score_sum) = (0.0, 0.0, 0.0);
        let (mut n_ae, mut n_disc) = (0usize, 0usize);
        let batches = make_batches(data.len() * config.crops_per_sample, config.batch_size, config.seed, epoch);
        for idx in &batches {
            let idx: Vec<usize> = idx.iter().map(|&i| i % data.len()).collect();
            let step = trainer.disc_steps + trainer.ae_steps;
            let diverged = |e: Error, last: &Option<PathBuf>| match e {
                Error::NonFinite { .. } | Error::NonFiniteGradient(_) => Error::Diverged {
                    epoch: epoch + 1,
                    step,
                    reason: e.to_string(),
                    last_checkpoint: last.clone(),
                },
                other => other,
            };
            let batch = trainer.batch(data, &idx)?;
            let d = trainer.train_step_disc(&batch).map_err(|e| diverged(e, &last_good))?;
            ind_sum += d.ind;
            score_sum += d.score;
            n_disc += 1;
            // The ratio runs across epoch boundaries: every beta-th step overall.
            if trainer.disc_steps % config.beta == 0 {
                let a = trainer.train_step_ae(&batch).map_err(|e| diverged(e, &last_good))?;
                recon_sum += a.recon;
                n_ae += 1;
            }
        }
        if n_disc == 0 {
            return Err(Error::invalid("batch size leaves no batch of at least two samples"));
        }
        if (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs {
            let (rho, h) = code_metrics(&trainer.nets.encoder, data, config.eval_samples, config.seed)?;
            records.push(EpochRecord {
                epoch: epoch + 1,
                ae_steps: trainer.ae_steps,
                disc_steps: trainer.disc_steps,
                recon: (n_ae > 0).then(|| recon_sum / n_ae as f64),
                ind: ind_sum / n_disc as f64,
                disc_score: score_sum / n_disc as f64,
                spearman_code_source: rho,
                hsic_code_condition: h,
            });
            if let Some(dir) = out_dir {
                write_metrics_csv(&records, &dir.join(METRICS_FILE))?;
                let path = dir.join(CHECKPOINT_FILE);
                io::write_json(&path, &trainer.checkpoint(epoch + 1))?;
                last_good = Some(path);
            }
        }
    }
    let report = TrainReport {
        records,
        disc_steps: trainer.disc_steps,
        ae_steps: trainer.ae_steps,
    };
    let mut nets = trainer.into_nets();
    nets.set_mode(Mode::Eval);
    Ok((nets, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of the samples held out for scoring.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            holdout: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `r2` (regression) or `accuracy` (class conditions).
    pub metric: String,
    /// Held-out score of the fresh probe.
    pub score: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

fn standardize_columns(t: &Tensor) -> Result<Tensor> {
    let (n, d) = (t.shape()[0], t.shape()[1]);
    let mut out = t.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        let sd = ((0..n).map(|i| (out[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..n {
            out[i * d + j] = (out[i * d + j] - mean) / sd;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Trains a fresh discriminator from `spec` to predict the condition from
/// frozen flat codes `[N, d]` and scores it on held-out samples.
///
/// Numeric conditions are scored by the mean per-coordinate squared
/// correlation, class conditions by accuracy.
pub fn probe_independence(codes: &Tensor, cond: &Condition, spec: &NetSpec, cfg: &ProbeConfig) -> Result<ProbeReport> {
    if codes.ndim() != 2 || codes.shape()[0] != cond.len() {
        return Err(Error::shape("probe", format!("codes {:?} for {} conditions", codes.shape(), cond.len())));
    }
    if !(cfg.holdout > 0.0 && cfg.holdout < 1.0) || cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(Error::invalid("probe needs holdout in (0, 1), batch_size >= 2, epochs >= 1"));
    }
    let n = codes.shape()[0];
    let n_test = ((n as f64 * cfg.holdout).round() as usize).clamp(3, n.saturating_sub(2));
    let n_train = n - n_test;
    let codes = standardize_columns(codes)?;
    let kind = match cond {
        Condition::Numeric(_) => IndKind::Regression,
        Condition::Classes { .. } => IndKind::DomainConfusion,
    };
    let mut h = Net::build(spec, cfg.seed.wrapping_add(4))?;
    let mut adam = AdamState::for_net(&h, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train_rows: Vec<usize> = (0..n_train).collect();
    let full = PairedDataset::new(
        codes.clone(),
        cond.clone(),
        None,
        crate::datagen::DatasetMeta {
            generator: "codes".into(),
            seed: cfg.seed,
            params: serde_json::Value::Null,
            segment_len: None,
            lags: None,
        },
    )?;
    let train_set = full.select(&train_rows)?;
    for epoch in 0..cfg.epochs {
        for idx in make_batches(n_train, cfg.batch_size, cfg.seed, epoch) {
            let batch = Batch::from_dataset(&train_set, &idx)?;
            let mut g = Graph::new();
            let code = g.constant(batch.x.clone());
            let (ind, _, fwd) = independence(&mut g, kind, &h, code, &batch, &mut rng)?;
            finite(g.value(ind).item().unwrap_or(f64::NAN), "probe loss")?;
            let grads = grads_for(&g, ind, &fwd.params, &h)?;
            adam.step(h.params_mut(), &grads)?;
            h.update_running_stats(&g, &fwd);
        }
    }
    h.set_mode(Mode::Eval);
    let test_rows: Vec<usize> = (n_train..n).collect();
    let test = full.select(&test_rows)?;
    let pred = h.infer(&test.x, None)?;
    let score = match &test.t {
        Condition::Numeric(t) => {
            let (pd, td) = (pred.shape()[1], t.shape()[1]);
            if pd != td {
                return Err(Error::shape("probe", format!("probe emits {pd} values for a {td}-wide condition")));
            }
            let mut total = 0.0;
            for j in 0..td {
                let a: Vec<f64> = pred.data().iter().skip(j).step_by(pd).copied().collect();
                let b: Vec<f64> = t.data().iter().skip(j).step_by(td).copied().collect();
                let r = pearson(&a, &b).unwrap_or(0.0);
                total += r * r;
            }
            total / td as f64
        }
        Condition::Classes { labels, .. } => {
            let k = pred.shape()[1];
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| {
                    let row = &pred.data()[i * k..(i + 1) * k];
                    (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])) == Some(l)
                })
                .count();
            hits as f64 / labels.len() as f64
        }
    };
    Ok(ProbeReport {
        metric: if kind == IndKind::Regression { "r2" } else { "accuracy" }.into(),
        score,
        train_samples: n_train,
        test_samples: n_test,
    })
}
