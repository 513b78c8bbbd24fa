use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::tensor::ParamVector;

use super::client::{client_update, personal_update, ClientState};
use super::rng::{stream, Purpose};
use super::strategy::{blend_delta, StrategyConfig};

/// Server-side state between rounds.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalState {
    /// Rounds completed so far.
    pub round: usize,
    pub weights: ParamVector,
    /// Delta broadcast with the weights in the next round.
    pub blended_delta: ParamVector,
    /// Raw deltas `w^{t+1} − w^t`, newest first.
    pub raw_delta_history: VecDeque<ParamVector>,
    pub history_capacity: usize,
}

impl GlobalState {
    /// Round-zero state: the given weights and a zero delta.
    pub fn new(weights: ParamVector, strategy: &StrategyConfig) -> Self {
        let history_capacity = strategy.delta_mode().map_or(1, |m| m.history_capacity());
        GlobalState {
            round: 0,
            blended_delta: weights.zeros_like(),
            weights,
            raw_delta_history: VecDeque::with_capacity(history_capacity),
            history_capacity,
        }
    }
}

/// Per-client outcome within a round.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientReport {
    pub client: usize,
    pub samples: usize,
    pub train_loss: f64,
    pub reg_loss: f64,
    /// Mean distillation loss of the personal model, under FedKd.
    pub personal_loss: Option<f64>,
    pub bytes_uploaded: u64,
    pub bytes_downloaded: u64,
    /// Why the client's update was dropped, if it was.
    pub aborted: Option<String>,
    /// Why the personal model's update failed, if it did. The shared update
    /// is unaffected.
    pub personal_aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub clients: Vec<ClientReport>,
}

impl RoundReport {
    /// Sample-weighted mean training loss over clients that finished.
    pub fn mean_train_loss(&self) -> Option<f64> {
        let done: Vec<_> = self.clients.iter().filter(|c| c.aborted.is_none()).collect();
        let n: usize = done.iter().map(|c| c.samples).sum();
        (n > 0).then(|| {
            done.iter()
                .map(|c| c.train_loss * c.samples as f64)
                .sum::<f64>()
                / n as f64
        })
    }
}

/// Number of clients drawn per round: `max(1, round(scr·K))`.
pub fn sample_size(num_clients: usize, scr: f64) -> Result<usize> {
    if !(scr > 0.0 && scr <= 1.0) {
        return Err(Error::Parameter(format!(
            "sampled client ratio must lie in (0, 1], got {scr}"
        )));
    }
    if num_clients == 0 {
        return Err(Error::Parameter("no clients to sample".into()));
    }
    Ok(((scr * num_clients as f64).round() as usize).clamp(1, num_clients))
}

/// Uniform sample of client ids without replacement, in ascending order.
pub fn sample_clients<R: Rng + ?Sized>(num_clients: usize, scr: f64, rng: &mut R) -> Result<Vec<usize>> {
    let m = sample_size(num_clients, scr)?;
    let mut ids = rand::seq::index::sample(rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Sample-weighted mean `Σ (n_k / n) w_k`, accumulated in the given order as
/// `w_1 + Σ (n_k / n)(w_k − w_1)` so identical updates average to themselves
/// bit-exactly.
pub fn aggregate(updates: &[(&ParamVector, usize)]) -> Result<ParamVector> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| Error::Data("nothing to aggregate".into()))?;
    if updates.iter().any(|&(_, n)| n == 0) {
        return Err(Error::Data("client with zero samples in aggregation".into()));
    }
    for (w, _) in updates {
        first.ensure_congruent(w, "aggregate")?;
    }
    let total: usize = updates.iter().map(|&(_, n)| n).sum();
    let mut out = (*first).clone();
    for &(w, n) in &updates[1..] {
        out.axpy(n as f64 / total as f64, &w.sub(first)?);
    }
    Ok(out)
}

/// Round driver: holds the shared architecture and strategy.
#[derive(Clone, Debug)]
pub struct Server {
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub scr: f64,
    pub seed: u64,
}

struct Outcome {
    report: ClientReport,
    weights: Option<ParamVector>,
}

impl Server {
    /// Bytes sent to one sampled client: the weights, plus the delta when the
    /// strategy broadcasts it.
    pub fn download_bytes(&self, weights: &ParamVector) -> u64 {
        let copies = if self.strategy.broadcasts_delta() { 2 } else { 1 };
        copies * weights.wire_bytes()
    }

    /// Executes round `state.round + 1`. `clients[k]` must have id `k`.
    /// Client work runs on the current rayon pool; results are independent
    /// of its size.
    pub fn run_round(
        &self,
        state: &GlobalState,
        clients: &mut [ClientState],
    ) -> Result<(GlobalState, RoundReport)> {
        if let Some((k, c)) = clients.iter().enumerate().find(|(k, c)| c.id != *k) {
            return Err(Error::Structural(format!(
                "client at position {k} has id {}",
                c.id
            )));
        }
        let round = state.round + 1;
        let mut sampler = stream(self.seed, round, None, Purpose::Sampling);
        let sampled = sample_clients(clients.len(), self.scr, &mut sampler)?;
        let download = self.download_bytes(&state.weights);

        let outcomes: Vec<Outcome> = clients
            .par_iter_mut()
            .filter(|c| sampled.binary_search(&c.id).is_ok())
            .map(|c| self.local_phase(round, state, c, download))
            .collect();

        let accepted: Vec<(&ParamVector, usize)> = outcomes
            .iter()
            .filter_map(|o| o.weights.as_ref().map(|w| (w, o.report.samples)))
            .collect();
        if accepted.is_empty() {
            return Err(Error::Round {
                round,
                message: "every sampled client aborted".into(),
            });
        }
        let weights = aggregate(&accepted)?;

        let raw = weights.sub(&state.weights)?;
        let mut history = state.raw_delta_history.clone();
        history.push_front(raw);
        history.truncate(state.history_capacity);
        let blended_delta = match self.strategy.delta_mode() {
            Some(mode) => {
                let h: Vec<ParamVector> = history.iter().cloned().collect();
                blend_delta(&h, mode, &state.blended_delta)?
            }
            None => state.blended_delta.clone(),
        };

        let next = GlobalState {
            round,
            weights,
            blended_delta,
            raw_delta_history: history,
            history_capacity: state.history_capacity,
        };
        let report = RoundReport {
            round,
            sampled,
            clients: outcomes.into_iter().map(|o| o.report).collect(),
        };
        Ok((next, report))
    }

    fn local_phase(
        &self,
        round: usize,
        state: &GlobalState,
        client: &mut ClientState,
        download: u64,
    ) -> Outcome {
        let mut report = ClientReport {
            client: client.id,
            samples: client.num_samples(),
            train_loss: f64::NAN,
            reg_loss: 0.0,
            personal_loss: None,
            bytes_uploaded: 0,
            bytes_downloaded: download,
            aborted: None,
            personal_aborted: None,
        };
        let model = match client.view(&self.model) {
            Ok(m) => m,
            Err(e) => {
                report.aborted = Some(e.to_string());
                return Outcome {
                    report,
                    weights: None,
                };
            }
        };
        let mut rng = stream(self.seed, round, Some(client.id), Purpose::LocalTraining);
        let update = client_update(
            client.id,
            &model,
            &client.train,
            &client.training,
            &state.weights,
            &state.blended_delta,
            &self.strategy,
            &mut rng,
        );
        let weights = match update {
            Ok(u) => {
                report.train_loss = u.train_loss;
                report.reg_loss = u.reg_loss;
                report.bytes_uploaded = u.weights.wire_bytes();
                client.weights = u.weights.clone();
                Some(u.weights)
            }
            Err(e) => {
                report.aborted = Some(e.to_string());
                None
            }
        };

        if let StrategyConfig::FedKd {
            alpha, temperature, ..
        } = &self.strategy
        {
            if let Some(personal) = client.personal.as_mut() {
                let mut rng = stream(self.seed, round, Some(client.id), Purpose::PersonalTraining);
                match personal_update(
                    personal,
                    &model,
                    &state.weights,
                    &client.train,
                    &client.training,
                    *alpha,
                    *temperature,
                    &mut rng,
                ) {
                    Ok(loss) => report.personal_loss = Some(loss),
                    Err(e) => report.personal_aborted = Some(e.to_string()),
                }
            }
        }
        Outcome { report, weights }
    }
}
