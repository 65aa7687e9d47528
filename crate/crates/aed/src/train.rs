//! Training loop: Adam or SGD-momentum over teacher-forced batches,
//! learning-rate decay ×factor when validation CER plateaus for a fixed
//! number of epochs, best-epoch snapshotting, and greedy evaluation.

use crate::dataset::{assemble_batch, bucket_batches, image_to_tensor, Batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{score_pairs, EvalReport};
use crate::model::Model;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::util::SplitMix64;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub stop_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// stop as soon as validation CER reaches this value
    pub early_stop_cer: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-3,
            lr_decay_factor: 10.0,
            plateau_patience: 15,
            stop_lr: 1e-6,
            batch_size: 8,
            max_epochs: 300,
            seed: 1,
            optimizer: OptimizerKind::Adam,
            early_stop_cer: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > self.stop_lr && self.stop_lr > 0.0) {
            return Err(Error::Config(format!(
                "need initial_lr > stop_lr > 0, got {} and {}",
                self.initial_lr, self.stop_lr
            )));
        }
        if self.plateau_patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.lr_decay_factor <= 1.0 {
            return Err(Error::Config("decay factor must exceed 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleEvent {
    Improved,
    Plateau,
    Decayed,
    Stopped,
}

/// Validation-CER plateau schedule: a strict new minimum resets the
/// counter; `patience` consecutive non-improving epochs divide the lr by
/// the decay factor; training stops once the lr falls to `stop_lr`.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    pub lr: f64,
    decay: f64,
    patience: usize,
    stop_lr: f64,
    best: Option<f64>,
    counter: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: cfg.initial_lr,
            decay: cfg.lr_decay_factor,
            patience: cfg.plateau_patience,
            stop_lr: cfg.stop_lr,
            best: None,
            counter: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn observe(&mut self, val_cer: f64) -> ScheduleEvent {
        if self.best.map_or(true, |b| val_cer < b) {
            self.best = Some(val_cer);
            self.counter = 0;
            return ScheduleEvent::Improved;
        }
        self.counter += 1;
        if self.counter < self.patience {
            return ScheduleEvent::Plateau;
        }
        self.counter = 0;
        self.lr /= self.decay;
        // tolerate rounding when initial_lr is an exact power of the
        // factor above stop_lr
        if self.lr <= self.stop_lr * (1.0 + 1e-9) {
            ScheduleEvent::Stopped
        } else {
            ScheduleEvent::Decayed
        }
    }
}

/// Parameter updater over a fixed tensor list.
pub struct Optimizer<T> {
    kind: OptimizerKind,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SGD_MOMENTUM: f64 = 0.9;

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &[(String, Tensor<T>)]) -> Self {
        let m = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        Optimizer { kind, m, v, t: 0 }
    }

    /// Apply one update from accumulated gradients, then clear them.
    pub fn step(&mut self, params: &[(String, Tensor<T>)], lr: f64) {
        self.t += 1;
        for (k, (_, p)) in params.iter().enumerate() {
            let Some(g) = p.grad() else { continue };
            let mut d = p.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
                    let c1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
                    let c2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));
                    let eps = T::from_f64(ADAM_EPS);
                    let lr = T::from_f64(lr);
                    for i in 0..d.len() {
                        let gi = g[i];
                        self.m[k][i] = b1 * self.m[k][i] + (T::one() - b1) * gi;
                        self.v[k][i] = b2 * self.v[k][i] + (T::one() - b2) * gi * gi;
                        let mhat = self.m[k][i] / c1;
                        let vhat = self.v[k][i] / c2;
                        d[i] = d[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let mu = T::from_f64(SGD_MOMENTUM);
                    let lr = T::from_f64(lr);
                    for i in 0..d.len() {
                        self.m[k][i] = mu * self.m[k][i] + g[i];
                        d[i] = d[i] - lr * self.m[k][i];
                    }
                }
            }
            drop(d);
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_cer: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_cer: f64,
}

/// Greedy-decode every sample and score. Samples whose decode fails are
/// scored with an empty hypothesis rather than aborting the run.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let ds8 = model.enc.cfg.downsample_factor();
    let mut pairs = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let wpad = s.image.width.div_ceil(ds8) * ds8;
        let hyp = image_to_tensor::<T>(&s.image, wpad)
            .and_then(|t| model.recognize(&t, s.image.width, vocab))
            .map(|(text, _, _)| text)
            .unwrap_or_default();
        pairs.push((s.label.clone(), hyp));
    }
    score_pairs(&pairs)
}

fn snapshot<T: Scalar>(params: &[(String, Tensor<T>)]) -> Vec<Vec<T>> {
    params.iter().map(|(_, p)| p.to_vec()).collect()
}

fn restore<T: Scalar>(params: &[(String, Tensor<T>)], snap: &[Vec<T>]) {
    for ((_, p), s) in params.iter().zip(snap.iter()) {
        p.data_mut().copy_from_slice(s);
    }
}

/// Train in place. Returns per-epoch stats; on return the model holds
/// the parameters of the best-validation-CER epoch.
pub fn train<T: Scalar>(
    model: &Model<T>,
    train_set: &Dataset,
    val_set: &Dataset,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut log: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    let all_params = model.named_params();
    let trainable = model.trainable_params();
    let mut opt = Optimizer::new(cfg.optimizer, &trainable);
    let mut sched = PlateauSchedule::new(cfg);
    let ds8 = model.enc.cfg.downsample_factor();

    let groups = bucket_batches(train_set, cfg.batch_size);
    let batches: Vec<Batch<T>> = groups
        .iter()
        .map(|g| {
            let refs: Vec<_> = g.iter().map(|&i| &train_set.samples[i]).collect();
            assemble_batch(&refs, vocab, ds8)
        })
        .collect::<Result<_>>()?;

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_cer: f64::INFINITY,
    };
    let mut best_snap: Option<Vec<Vec<T>>> = None;

    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..batches.len()).collect();
        SplitMix64::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let lr = sched.lr;
        let (mut loss_sum, mut n_sum) = (0.0f64, 0usize);
        for (bi, &b) in order.iter().enumerate() {
            let batch = &batches[b];
            let tape = Tape::new();
            let loss = model.batch_loss(
                &tape,
                &batch.images,
                &batch.valid_widths,
                &batch.targets,
                true,
            )?;
            let lv = Scalar::to_f64(loss.item());
            if !lv.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: bi,
                    lr,
                });
            }
            tape.backward(&loss)?;
            opt.step(&trainable, lr);
            let n = batch.valid_widths.len();
            loss_sum += lv * n as f64;
            n_sum += n;
        }
        let val = evaluate(model, val_set, vocab)?;
        let stats = EpochStats {
            epoch,
            lr,
            train_loss: loss_sum / n_sum as f64,
            val_cer: val.cer,
        };
        log(&stats);
        report.epochs.push(stats);
        let event = sched.observe(val.cer);
        if event == ScheduleEvent::Improved {
            report.best_epoch = epoch;
            report.best_cer = val.cer;
            best_snap = Some(snapshot(&all_params));
        }
        if let Some(thresh) = cfg.early_stop_cer {
            if val.cer <= thresh {
                break 'epochs;
            }
        }
        if event == ScheduleEvent::Stopped {
            break 'epochs;
        }
    }

    if let Some(snap) = &best_snap {
        restore(&all_params, snap);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, synthetic_vocabulary};
    use crate::decoder::DecoderConfig;
    use crate::encoder::EncoderConfig;
    use crate::ink::render;
    use crate::dataset::Sample;

    fn stub_cfg(initial_lr: f64, stop_lr: f64, patience: usize) -> TrainConfig {
        TrainConfig {
            initial_lr,
            stop_lr,
            plateau_patience: patience,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut s = PlateauSchedule::new(&stub_cfg(1e-3, 1e-9, 2));
        assert_eq!(s.observe(10.0), ScheduleEvent::Improved);
        assert_eq!(s.observe(10.0), ScheduleEvent::Plateau);
        assert_eq!(s.observe(10.0), ScheduleEvent::Decayed);
        assert!((s.lr - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn stop_boundary_one_decay() {
        let mut s = PlateauSchedule::new(&stub_cfg(1e-5, 1e-6, 1));
        assert_eq!(s.observe(5.0), ScheduleEvent::Improved);
        assert_eq!(s.observe(5.0), ScheduleEvent::Stopped);
    }

    #[test]
    fn schedule_matches_scalar_simulation() {
        // independent simulation of the decay rule over random curves
        let mut rng = SplitMix64::new(31);
        for _ in 0..50 {
            let patience = 1 + rng.below(4);
            let cfg = stub_cfg(1e-2, 1e-8, patience);
            let mut s = PlateauSchedule::new(&cfg);
            let (mut lr, mut best, mut counter) = (cfg.initial_lr, f64::INFINITY, 0usize);
            for _ in 0..40 {
                let cer = (rng.below(5) * 10) as f64;
                let got = s.observe(cer);
                // simulation
                let want = if cer < best {
                    best = cer;
                    counter = 0;
                    ScheduleEvent::Improved
                } else {
                    counter += 1;
                    if counter < patience {
                        ScheduleEvent::Plateau
                    } else {
                        counter = 0;
                        lr /= cfg.lr_decay_factor;
                        if lr <= cfg.stop_lr * (1.0 + 1e-9) {
                            ScheduleEvent::Stopped
                        } else {
                            ScheduleEvent::Decayed
                        }
                    }
                };
                assert_eq!(got, want);
                assert_eq!(s.lr, lr);
                if got == ScheduleEvent::Stopped {
                    break;
                }
            }
        }
    }

    fn toy_model(seed: u64) -> Model<f64> {
        let enc = EncoderConfig::toy();
        let dec = DecoderConfig::toy(synthetic_vocabulary().len(), enc.out_channels());
        Model::new(enc, dec, seed).unwrap()
    }

    fn tiny_dataset(seed: u64, n: usize) -> Dataset {
        let vocab = synthetic_vocabulary();
        let inks = generate_corpus(seed, n, &vocab, (1, 2), 0.0).unwrap();
        Dataset {
            samples: inks
                .iter()
                .enumerate()
                .map(|(i, ink)| Sample {
                    name: format!("s{i}"),
                    label: ink.label.clone(),
                    image: render(ink, 8, 1, 256).unwrap(),
                })
                .collect(),
        }
    }

    #[test]
    fn optimizer_step_strictly_decreases_loss() {
        let vocab = synthetic_vocabulary();
        let ds = tiny_dataset(11, 1);
        for seed in 0..10 {
            let model = toy_model(seed);
            let trainable = model.trainable_params();
            let mut opt = Optimizer::new(OptimizerKind::Adam, &trainable);
            let refs: Vec<_> = ds.samples.iter().collect();
            let batch = assemble_batch::<f64>(&refs, &vocab, 8).unwrap();
            let loss_of = |train: bool, tape: &Tape| {
                model
                    .batch_loss(tape, &batch.images, &batch.valid_widths, &batch.targets, train)
                    .unwrap()
            };
            let t = Tape::new();
            let loss = loss_of(true, &t);
            let before = loss.item();
            t.backward(&loss).unwrap();
            opt.step(&trainable, 1e-4);
            let after = loss_of(true, &Tape::inference()).item();
            assert!(after < before, "seed {seed}: {before} -> {after}");
        }
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let model = toy_model(1);
        for (name, p) in model.named_params() {
            if name == "dec.out.b" {
                p.data_mut()[0] = f64::NAN;
            }
        }
        let ds = tiny_dataset(12, 2);
        let vocab = synthetic_vocabulary();
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let err = train(&model, &ds, &ds, &vocab, &cfg, |_| {}).unwrap_err();
        match err {
            Error::NanLoss { epoch, .. } => assert_eq!(epoch, 1),
            other => panic!("wanted NanLoss, got {other}"),
        }
    }

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let model = toy_model(2);
        let before: Vec<Vec<f64>> = model.named_params().iter().map(|(_, p)| p.to_vec()).collect();
        let ds = tiny_dataset(13, 2);
        let vocab = synthetic_vocabulary();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let rep = train(&model, &ds, &ds, &vocab, &cfg, |_| {}).unwrap();
        assert!(rep.epochs.is_empty());
        for ((_, p), b) in model.named_params().iter().zip(before.iter()) {
            assert_eq!(&p.to_vec(), b);
        }
    }

    #[test]
    fn training_reduces_loss_and_restores_best() {
        let model = toy_model(3);
        let ds = tiny_dataset(14, 3);
        let vocab = synthetic_vocabulary();
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let rep = train(&model, &ds, &ds, &vocab, &cfg, |_| {}).unwrap();
        assert_eq!(rep.epochs.len(), 5);
        assert!(rep.epochs.last().unwrap().train_loss < rep.epochs[0].train_loss);
        assert!(rep.best_epoch >= 1);
        // model holds the best epoch's parameters: re-evaluating gives best CER
        let cer = evaluate(&model, &ds, &vocab).unwrap().cer;
        assert!((cer - rep.best_cer).abs() < 1e-9);
    }
}
