//! Supervised mask training: weighted MSE masking loss, ADAM, a plateau
//! learning-rate schedule with early stopping, and the epoch loop.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{self, GlobalStats, MagPatch, N_BINS, PATCH_FRAMES};
use crate::error::{Error, Result};
use crate::network::{save_checkpoint, Checkpoint, ForwardCtx, NetworkConfig, ParamStore, ThreeWayMDenseNet};
use crate::tensor::ops::{self, BatchNormMode};
use crate::tensor::{no_grad, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_p: f64,
    pub lambda_h: f64,
    pub lr0: f64,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    /// A validation loss counts as an improvement only if it beats the best
    /// so far by more than this.
    pub improvement_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.5,
            lambda_h: 0.5,
            lr0: 1e-3,
            batch_size: 8,
            plateau_patience: 3,
            plateau_factor: 0.5,
            stop_patience: 15,
            max_epochs: 200,
            seed: 0,
            val_fraction: 0.2,
            improvement_tol: 1e-7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.lambda_p >= 0.0 && self.lambda_h >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must be in (0, 1)");
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be at least 1");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

/// Aligned raw-magnitude patches of the mixture and both ground truths.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: MagPatch,
    pub p: MagPatch,
    pub h: MagPatch,
}

/// Masking loss: `λp·mean((m_p ⊙ x − p)²) + λh·mean((m_h ⊙ x − h)²)`.
pub fn loss(
    mask_p: &Var,
    mask_h: &Var,
    x: &Tensor,
    p: &Tensor,
    h: &Tensor,
    lambda_p: f64,
    lambda_h: f64,
) -> Result<Var> {
    for t in [mask_h.value(), x, p, h] {
        if t.shape() != mask_p.shape() {
            return Err(Error::shape("loss", format!("{:?} vs mask {:?}", t.shape(), mask_p.shape())));
        }
    }
    let x = Var::constant(x.clone());
    let term = |mask: &Var, target: &Tensor, weight: f64| -> Result<Var> {
        let est = ops::mul(mask, &x)?;
        let err = ops::sub(&est, &Var::constant(target.clone()))?;
        ops::scale(&ops::mean(&ops::square(&err)?)?, weight)
    };
    ops::add(&term(mask_p, p, lambda_p)?, &term(mask_h, h, lambda_h)?)
}

/// ADAM with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: IndexMap::new() }
    }
}

impl Adam {
    /// Applies one update to every trainable tensor named in `grads`.
    ///
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            let p = store.tensor(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", format!("`{name}` grad {:?} vs {:?}", g.shape(), p.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let param = &mut store.get_mut(name).expect("checked above").tensor;
            let (m, v) =
                self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in param.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleDecision {
    Continue,
    ReduceLr,
    Stop,
}

/// Optimizer and schedule state carried across epochs.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub adam: Adam,
    pub lr: f64,
    pub best_val_loss: f64,
    pub epochs_since_improve_lr: usize,
    pub epochs_since_improve_stop: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            adam: Adam::default(),
            lr: cfg.lr0,
            best_val_loss: f64::INFINITY,
            epochs_since_improve_lr: 0,
            epochs_since_improve_stop: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

/// End-of-epoch bookkeeping: reduce the learning rate after
/// `plateau_patience` stale epochs, stop after `stop_patience`.
pub fn schedule_epoch(val_loss: f64, state: &mut TrainState, cfg: &TrainConfig) -> ScheduleDecision {
    if val_loss < state.best_val_loss - cfg.improvement_tol {
        state.best_val_loss = val_loss;
        state.epochs_since_improve_lr = 0;
        state.epochs_since_improve_stop = 0;
        return ScheduleDecision::Continue;
    }
    state.epochs_since_improve_lr += 1;
    state.epochs_since_improve_stop += 1;
    if state.epochs_since_improve_stop >= cfg.stop_patience {
        ScheduleDecision::Stop
    } else if state.epochs_since_improve_lr >= cfg.plateau_patience {
        state.lr *= cfg.plateau_factor;
        state.epochs_since_improve_lr = 0;
        ScheduleDecision::ReduceLr
    } else {
        ScheduleDecision::Continue
    }
}

/// Builds training examples from an aligned mixture and drums stem. The
/// harmonic target is `mixture - drums` in the time domain.
pub fn make_ground_truth(mixture: &[f64], drums: &[f64], sample_rate: u32) -> Result<Vec<Example>> {
    if mixture.len() != drums.len() {
        return Err(Error::shape("make_ground_truth", format!("mixture {} vs drums {}", mixture.len(), drums.len())));
    }
    let harmonic: Vec<f64> = mixture.iter().zip(drums).map(|(m, d)| m - d).collect();
    let patches = |s: &[f64]| -> Result<Vec<MagPatch>> { dsp::patchify(&dsp::stft(s, sample_rate)?.magnitude()) };
    let (xs, ps, hs) = (patches(mixture)?, patches(drums)?, patches(&harmonic)?);
    Ok(xs.into_iter().zip(ps).zip(hs).map(|((x, p), h)| Example { x, p, h }).collect())
}

/// A track as seen by the trainer.
#[derive(Clone, Debug)]
pub struct TrainingTrack {
    pub id: String,
    pub mixture: Vec<f64>,
    pub drums: Vec<f64>,
    pub sample_rate: u32,
}

/// Track-level split: returns `(train, validation)` indices.
pub fn split_tracks(n_tracks: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_tracks < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 tracks to split, got {n_tracks}")));
    }
    let mut idx: Vec<usize> = (0..n_tracks).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = ((n_tracks as f64 * val_fraction).round() as usize).clamp(1, n_tracks - 1);
    let val = idx.split_off(n_tracks - n_val);
    Ok((idx, val))
}

// Keeps the split stream independent of the init and shuffle streams.
const SPLIT_SALT: u64 = 0x5eed_5011;

/// An example ready for the network: normalized input plus raw targets.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub input: Tensor,
    pub x: Tensor,
    pub p: Tensor,
    pub h: Tensor,
    pub track: usize,
}

impl PreparedExample {
    pub fn new(ex: &Example, stats: &GlobalStats, track: usize) -> Result<Self> {
        Ok(Self {
            input: dsp::normalize(&ex.x, stats)?.to_tensor(),
            x: ex.x.to_tensor(),
            p: ex.p.to_tensor(),
            h: ex.h.to_tensor(),
            track,
        })
    }
}

fn stack(batch: &[&PreparedExample], pick: impl Fn(&PreparedExample) -> &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(batch.len() * N_BINS * PATCH_FRAMES);
    let shape = pick(batch[0]).shape().to_vec();
    for ex in batch {
        data.extend_from_slice(pick(ex).data());
    }
    let mut full = vec![batch.len()];
    full.extend(shape);
    Tensor::new(full, data).expect("examples share a shape")
}

/// Owns a model, its parameters and the optimizer state.
pub struct Trainer {
    pub net: ThreeWayMDenseNet,
    pub params: ParamStore,
    pub cfg: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(net_cfg: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let net = ThreeWayMDenseNet::new(net_cfg)?;
        let params = net.init_params(cfg.seed);
        let state = TrainState::new(&cfg);
        Ok(Self { net, params, cfg, state })
    }

    /// One optimizer step on a mini-batch; returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &[&PreparedExample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        let bound = self.params.bind(true);
        let mut ctx = ForwardCtx::new(&bound, BatchNormMode::Train);
        let input = Var::constant(stack(batch, |e| &e.input));
        let masks = self.net.forward(&mut ctx, &input)?;
        let l = loss(
            &masks.percussive,
            &masks.harmonic,
            &stack(batch, |e| &e.x),
            &stack(batch, |e| &e.p),
            &stack(batch, |e| &e.h),
            self.cfg.lambda_p,
            self.cfg.lambda_h,
        )?;
        let value = l.value().item();
        l.backward()?;
        self.state.adam.step(&mut self.params, &bound.grads(), self.state.lr)?;
        self.params.apply_bn_updates(ctx.into_bn_updates())?;
        Ok(value)
    }

    /// Mean inference-mode loss over `examples`.
    pub fn evaluate(&self, examples: &[&PreparedExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut total = 0.0;
        for chunk in examples.chunks(self.cfg.batch_size) {
            let value = no_grad(|| -> Result<f64> {
                let bound = self.params.bind(false);
                let mut ctx = ForwardCtx::new(&bound, BatchNormMode::Infer);
                let masks = self.net.forward(&mut ctx, &Var::constant(stack(chunk, |e| &e.input)))?;
                let l = loss(
                    &masks.percussive,
                    &masks.harmonic,
                    &stack(chunk, |e| &e.x),
                    &stack(chunk, |e| &e.p),
                    &stack(chunk, |e| &e.h),
                    self.cfg.lambda_p,
                    self.cfg.lambda_h,
                )?;
                Ok(l.value().item())
            })?;
            total += value * chunk.len() as f64;
        }
        Ok(total / examples.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_val_loss: f64,
    pub stats: GlobalStats,
    pub train_tracks: Vec<String>,
    pub val_tracks: Vec<String>,
    /// Track index of every example in every training batch, in order.
    pub batch_tracks: Vec<Vec<usize>>,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
}

/// Path of the metrics CSV written next to a checkpoint.
pub fn metrics_path_for(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".metrics.csv");
    checkpoint.with_file_name(name)
}

/// Full training run. The checkpoint at `checkpoint` is rewritten whenever
/// the validation loss improves; the metrics CSV is appended every epoch.
pub fn train(
    tracks: &[TrainingTrack],
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    checkpoint: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if tracks.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let (train_idx, val_idx) = split_tracks(tracks.len(), cfg.val_fraction, cfg.seed)?;

    let mut raw: Vec<(usize, Example)> = Vec::new();
    for (i, t) in tracks.iter().enumerate() {
        raw.extend(make_ground_truth(&t.mixture, &t.drums, t.sample_rate)?.into_iter().map(|e| (i, e)));
    }
    let stats = dsp::compute_global_stats(raw.iter().filter(|(i, _)| train_idx.contains(i)).map(|(_, e)| &e.x))?;
    let prepared = raw.iter().map(|(i, e)| PreparedExample::new(e, &stats, *i)).collect::<Result<Vec<_>>>()?;
    let train_set: Vec<&PreparedExample> = prepared.iter().filter(|e| train_idx.contains(&e.track)).collect();
    let val_set: Vec<&PreparedExample> = prepared.iter().filter(|e| val_idx.contains(&e.track)).collect();

    let metrics_path = metrics_path_for(checkpoint);
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "epoch,train_loss,val_loss,lr")?;
    metrics.flush()?;
    let mut metrics = BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?);

    let mut trainer = Trainer::new(net_cfg.clone(), cfg.clone())?;
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_val_loss: f64::INFINITY,
        stats,
        train_tracks: train_idx.iter().map(|&i| tracks[i].id.clone()).collect(),
        val_tracks: val_idx.iter().map(|&i| tracks[i].id.clone()).collect(),
        batch_tracks: Vec::new(),
        stopped_early: false,
        checkpoint: checkpoint.to_path_buf(),
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut trainer.state.rng);
        let lr = trainer.state.lr;
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| train_set[i]).collect();
            report.batch_tracks.push(batch.iter().map(|e| e.track).collect());
            let l = match trainer.train_step(&batch) {
                Ok(l) => l,
                Err(Error::NonFinite(_) | Error::NonFiniteGradient(_)) => return Err(Error::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            total += l * batch.len() as f64;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = trainer.evaluate(&val_set)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        writeln!(metrics, "{epoch},{train_loss},{val_loss},{lr}")?;
        metrics.flush()?;
        report.epochs.push(EpochLog { epoch, train_loss, val_loss, lr });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e}");

        let previous_best = trainer.state.best_val_loss;
        let decision = schedule_epoch(val_loss, &mut trainer.state, cfg);
        if trainer.state.best_val_loss < previous_best {
            report.best_val_loss = val_loss;
            let ckpt = Checkpoint { config: net_cfg.clone(), stats, params: trainer.params.clone() };
            save_checkpoint(checkpoint, &ckpt)?;
        }
        if decision == ScheduleDecision::Stop {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}
