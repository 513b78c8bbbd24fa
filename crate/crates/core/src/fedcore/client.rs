use rand::seq::SliceRandom;
use rand::Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::models::{self, load_params, task_loss, ModelSpec};
use crate::tensor::{Gradient, ParamVector, Sgd, Tape};

use super::StrategyConfig;

/// A client's never-uploaded personal model.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalModel {
    pub model: ModelSpec,
    pub params: ParamVector,
}

/// Local training hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Rescales each step's full gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.local_epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        Sgd::new(self.lr).map_err(|e| Error::config("train.lr", e.to_string()))?;
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::config("train.clip_norm", format!("must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// Applies [`LocalTraining::clip_norm`] to `grad` in place.
    pub fn clip(&self, grad: &mut Gradient) {
        let Some(max) = self.clip_norm else { return };
        let norm = grad.values().map(|g| g * g).sum::<f64>().sqrt();
        if norm > max {
            let scale = max / norm;
            grad.values_mut().for_each(|g| *g *= scale);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub train: Dataset,
    /// Held-out samples for per-client evaluation, when the task has them.
    pub test: Option<Dataset>,
    /// Local copy of the shared weights after the last update.
    pub weights: ParamVector,
    pub personal: Option<PersonalModel>,
    pub training: LocalTraining,
    /// `(start, len)` of the shared model's output columns this client trains
    /// and reads; `None` uses every column.
    pub output_slice: Option<(usize, usize)>,
}

impl ClientState {
    pub fn num_samples(&self) -> usize {
        self.train.len()
    }

    /// This client's view of the shared architecture.
    pub fn view(&self, shared: &ModelSpec) -> Result<ModelSpec> {
        match self.output_slice {
            None => Ok(shared.clone()),
            Some((start, len)) => ModelSpec::slice(shared.clone(), start, len),
        }
    }
}

/// Result of one client's local phase.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub weights: ParamVector,
    /// Mean supervised loss over the local steps.
    pub train_loss: f64,
    /// Mean strategy penalty over the local steps.
    pub reg_loss: f64,
    pub steps: usize,
}

fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Runs `E` epochs of minibatch SGD on the supervised loss plus the
/// strategy's penalty, starting from the broadcast weights `global`.
#[allow(clippy::too_many_arguments)]
pub fn client_update<R: Rng + ?Sized>(
    client: usize,
    model: &ModelSpec,
    data: &Dataset,
    training: &LocalTraining,
    global: &ParamVector,
    delta: &ParamVector,
    strategy: &StrategyConfig,
    rng: &mut R,
) -> Result<LocalUpdate> {
    let sgd = Sgd::new(training.lr)?;
    let mut weights = global.clone();
    let (mut loss_sum, mut reg_sum, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..training.epochs {
        for batch in minibatches(data.len(), training.batch_size, rng) {
            let (loss, mut grad) = models::loss_and_grad(model, &weights, data, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("non-finite local loss {loss}")));
            }
            if let Some((penalty, pgrad)) = strategy.penalty(client, &weights, global, delta)? {
                reg_sum += penalty;
                grad.axpy(1.0, &pgrad);
            }
            training.clip(&mut grad);
            sgd.step(&mut weights, &grad)?;
            loss_sum += loss;
            steps += 1;
        }
    }
    if !weights.is_finite() {
        return Err(Error::Data("local weights diverged".into()));
    }
    let denom = steps.max(1) as f64;
    Ok(LocalUpdate {
        weights,
        train_loss: loss_sum / denom,
        reg_loss: reg_sum / denom,
        steps,
    })
}

/// Distillation loss of a personal model against the frozen shared model on
/// samples `idx`, with gradients for the personal model only.
///
/// Classification: `(1 − α)·CE(pred_p, y) + α·KL(softmax(pred_p/T) ‖ softmax(pred/T))`.
/// Regression: `(1 − α)·MSE(pred_p, y) + α·MSE(pred_p, pred)` on output
/// column 0, since softened class distributions do not exist there.
pub fn kd_local_step(
    personal: &PersonalModel,
    teacher_model: &ModelSpec,
    teacher_params: &ParamVector,
    data: &Dataset,
    idx: &[usize],
    alpha: f64,
    temperature: f64,
) -> Result<(f64, Gradient)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let teacher = models::predict(teacher_model, teacher_params, data, idx)?;
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, &personal.params, true);
    let pred = personal.model.forward(&mut tape, &vars, data, idx)?;
    let supervised = task_loss(&mut tape, pred, data, idx)?;
    let distill = match data.task() {
        crate::datagen::TaskKind::Classification { .. } => {
            tape.distill_kl(pred, &teacher, temperature)?
        }
        crate::datagen::TaskKind::Regression => {
            let soft: Vec<f64> = (0..teacher.rows()).map(|r| teacher.at(r, 0)).collect();
            tape.mse(pred, &soft, 0)?
        }
    };
    let total = tape.weighted_sum(&[(supervised, 1.0 - alpha), (distill, alpha)])?;
    let grads = tape.backward(total);
    let grad = models::collect_grads(&personal.params, &vars, &grads)?;
    Ok((tape.value(total).data()[0], grad))
}

/// `E` epochs of distillation SGD on the personal model. Returns the mean
/// step loss. On error the personal model is left unchanged.
#[allow(clippy::too_many_arguments)]
pub fn personal_update<R: Rng + ?Sized>(
    personal: &mut PersonalModel,
    teacher_model: &ModelSpec,
    teacher_params: &ParamVector,
    data: &Dataset,
    training: &LocalTraining,
    alpha: f64,
    temperature: f64,
    rng: &mut R,
) -> Result<f64> {
    let sgd = Sgd::new(training.lr)?;
    let mut work = personal.clone();
    let (mut total, mut steps) = (0.0, 0usize);
    for _ in 0..training.epochs {
        for batch in minibatches(data.len(), training.batch_size, rng) {
            let (loss, mut grad) = kd_local_step(
                &work,
                teacher_model,
                teacher_params,
                data,
                &batch,
                alpha,
                temperature,
            )?;
            if !loss.is_finite() {
                return Err(Error::Data(format!("non-finite distillation loss {loss}")));
            }
            training.clip(&mut grad);
            sgd.step(&mut work.params, &grad)?;
            total += loss;
            steps += 1;
        }
    }
    if !work.params.is_finite() {
        return Err(Error::Data("personal weights diverged".into()));
    }
    *personal = work;
    Ok(total / steps.max(1) as f64)
}
