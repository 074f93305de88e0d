//! Deterministic mini-batch SGD for the tuning head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::head::{argmax_rows, AptHead, CategoryPrompts, HeadConfig, ProposalBatch};
use crate::network::Mode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Multiply the learning rate by `.1` every `.0` epochs.
    pub lr_step: Option<(usize, f64)>,
    pub head: HeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 12,
            seed: 0,
            lr_step: None,
            head: HeadConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if let Some((every, factor)) = self.lr_step {
            if every == 0 || !(factor.is_finite() && factor > 0.0) {
                return Err(Error::InvalidConfig("lr_step needs a positive period and factor".into()));
            }
        }
        self.head.validate()
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_step {
            Some((every, factor)) => {
                let mut lr = self.learning_rate;
                for _ in 0..epoch / every {
                    lr *= factor;
                }
                lr
            }
            None => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Top-1 accuracy on the held-out proposals, when given.
    pub val_accuracy: Option<f64>,
}

/// SGD with heavy-ball momentum: `v ← μ·v + g (+ λ·p)`, `p ← p − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    velocity: Vec<f64>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(params: usize, momentum: f64, weight_decay: f64) -> Self {
        Self { velocity: vec![0.0; params], momentum, weight_decay }
    }

    pub fn step(&mut self, head: &mut AptHead, grad: &[f64], lr: f64) {
        let mut pos = 0;
        let (vel, mu, wd) = (&mut self.velocity, self.momentum, self.weight_decay);
        head.visit_params_mut(&mut |buf| {
            for p in buf.iter_mut() {
                let mut g = grad[pos];
                if wd != 0.0 {
                    g += wd * *p;
                }
                vel[pos] = if mu == 0.0 { g } else { mu * vel[pos] + g };
                *p -= lr * vel[pos];
                pos += 1;
            }
        });
    }
}

/// Builds a head from `config.seed` and trains it on `train_set`. Prompts
/// are read-only throughout. The returned head is in eval mode.
pub fn train(
    config: &TrainConfig,
    train_set: &ProposalBatch,
    prompts: &CategoryPrompts,
    val_set: Option<&ProposalBatch>,
) -> Result<(AptHead, TrainReport)> {
    config.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = AptHead::new(config.head, prompts.dim(), &mut init_rng)?;
    let report = train_head(config, &mut head, train_set, prompts, val_set)?;
    Ok((head, report))
}

/// Trains an existing head in place.
pub fn train_head(
    config: &TrainConfig,
    head: &mut AptHead,
    train_set: &ProposalBatch,
    prompts: &CategoryPrompts,
    val_set: Option<&ProposalBatch>,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.labels.is_none() {
        return Err(Error::InvalidConfig("training proposals need labels".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut sgd = Sgd::new(head.param_count(), config.momentum, config.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    head.set_mode(Mode::Train);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = config.lr_at(epoch);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = train_set.select(chunk);
            let (loss, grad, trace) = head.loss_and_gradient(prompts, &batch, true)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { batch: steps });
            }
            head.commit(&trace);
            sgd.step(head, &grad, lr);
            total += loss * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
        epoch_losses.push(if seen == 0 { 0.0 } else { total / seen as f64 });
    }
    head.set_mode(Mode::Eval);

    let val_accuracy = match val_set {
        Some(v) => Some(evaluate_accuracy(head, prompts, v, &(0..prompts.len()).collect::<Vec<_>>())?),
        None => None,
    };
    Ok(TrainReport { epoch_losses, steps, val_accuracy })
}

/// Fraction of proposals whose argmax over the `subset` prompts is their
/// label. Labels index the full prompt list; a label outside `subset` is
/// always counted wrong.
pub fn evaluate_accuracy(
    head: &AptHead,
    prompts: &CategoryPrompts,
    proposals: &ProposalBatch,
    subset: &[usize],
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::InvalidConfig("category subset is empty".into()));
    }
    let labels = proposals
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("accuracy needs labels".into()))?;
    if proposals.is_empty() {
        return Ok(0.0);
    }
    let restricted = prompts.subset(subset)?;
    let unlabeled = ProposalBatch { labels: None, ..proposals.clone() };
    let probs = head.forward(&restricted, &unlabeled, false)?.probs;
    let correct = argmax_rows(&probs)
        .into_iter()
        .zip(labels)
        .filter(|(pred, &label)| subset[*pred] == label)
        .count();
    Ok(correct as f64 / proposals.len() as f64)
}
