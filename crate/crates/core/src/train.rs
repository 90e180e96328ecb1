//! Minibatch training loop shared by every model, and the epoch loss log.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::optim::{adam_update, clip_grad_norm, AdamState};
use crate::params::{write_atomic, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    /// Optimizer steps. An epoch is one shuffled pass over the items.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Mean loss of each (possibly partial) epoch, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub epochs: Vec<f64>,
}

impl LossLog {
    /// One `epoch,mean_loss` line per epoch, epochs numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (i, l) in self.epochs.iter().enumerate() {
            let _ = writeln!(s, "{},{l:.6}", i + 1);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn first(&self) -> Option<f64> {
        self.epochs.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.epochs.last().copied()
    }
}

/// Runs `schedule.steps` Adam steps over `n_items` training items.
///
/// `step` receives the current parameters and the batch's item indices and
/// returns the batch loss with one gradient buffer per parameter.
pub fn run_training<S>(
    params: &mut ParamSet<f32>,
    n_items: usize,
    schedule: &Schedule,
    rng: &mut ChaCha8Rng,
    mut step: S,
) -> Result<LossLog>
where
    S: FnMut(&ParamSet<f32>, &[usize], &mut ChaCha8Rng) -> Result<(f64, Vec<Vec<f32>>)>,
{
    schedule.validate()?;
    if n_items == 0 {
        return Err(Error::Degenerate("no training items".into()));
    }
    let mut adam = AdamState::new(params, schedule.lr);
    let mut log = LossLog::default();
    let mut order: Vec<usize> = (0..n_items).collect();
    let mut cursor = n_items;
    let (mut sum, mut count) = (0.0, 0usize);
    for _ in 0..schedule.steps {
        if cursor >= n_items {
            if count > 0 {
                log.epochs.push(sum / count as f64);
                log::debug!("epoch {} mean loss {:.6}", log.epochs.len(), sum / count as f64);
            }
            (sum, count) = (0.0, 0);
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + schedule.batch_size).min(n_items);
        let batch = order[cursor..end].to_vec();
        cursor = end;
        let (loss, mut grads) = step(params, &batch, rng)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("training loss became {loss}")));
        }
        if let Some(max) = schedule.clip {
            clip_grad_norm(&mut grads, max);
        }
        adam_update(params, &grads, &mut adam)?;
        sum += loss;
        count += 1;
    }
    if count > 0 {
        log.epochs.push(sum / count as f64);
    }
    Ok(log)
}
