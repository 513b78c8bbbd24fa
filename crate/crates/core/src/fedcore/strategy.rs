use std::collections::BTreeMap;
use std::fmt::Write;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::tensor::{Gradient, ParamVector};

/// Longest history usable by [`DeltaMode::OptionI`]: coefficients `a_0..a_3`.
pub const MAX_DELTA_HISTORY: usize = 4;

/// How the broadcast model delta is formed from the raw per-round deltas.
#[derive(Clone, Debug, PartialEq)]
pub enum DeltaMode {
    /// `Σ_i a_i · δ^{t−i}` over the most recent raw deltas; `coeffs[0]`
    /// weights the newest. Missing history counts as zero.
    OptionI { coeffs: Vec<f64> },
    /// `(1 − a) · previous_blend + a · δ^t`.
    OptionII { a: f64 },
}

impl DeltaMode {
    pub fn option_i(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() || coeffs.len() > MAX_DELTA_HISTORY {
            return Err(Error::config(
                "strategy.fedr.coeffs",
                format!("need 1 to {MAX_DELTA_HISTORY} coefficients, got {}", coeffs.len()),
            ));
        }
        let total: f64 = coeffs.iter().sum();
        if (total - 1.0).abs() > 1e-12 || coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::config(
                "strategy.fedr.coeffs",
                format!("coefficients must sum to 1, got {total}"),
            ));
        }
        Ok(DeltaMode::OptionI { coeffs })
    }

    pub fn option_ii(a: f64) -> Result<Self> {
        if !(a > 0.0 && a < 1.0) {
            return Err(Error::config(
                "strategy.fedr.a",
                format!("decay factor must lie in (0, 1), got {a}"),
            ));
        }
        Ok(DeltaMode::OptionII { a })
    }

    /// Raw deltas retained by the server.
    pub fn history_capacity(&self) -> usize {
        match self {
            DeltaMode::OptionI { coeffs } => coeffs.len(),
            DeltaMode::OptionII { .. } => 1,
        }
    }
}

/// Aggregation strategy and its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub enum StrategyConfig {
    FedAvg,
    /// Proximal term `(μ/2)‖w_k − w^t‖²`.
    FedProx { mu: f64 },
    /// Filtered delta regularization. `client_mu` overrides `mu` per client.
    Fedr {
        mu: f64,
        delta_mode: DeltaMode,
        client_mu: BTreeMap<usize, f64>,
    },
    /// Federated distillation: the shared model trains under `inner`, and
    /// every client also trains a personal model that is never uploaded.
    FedKd {
        inner: Box<StrategyConfig>,
        alpha: f64,
        temperature: f64,
        /// Architecture of each client's personal model, indexed by client.
        personal_archs: Vec<ModelSpec>,
    },
}

fn check_mu(field: &str, mu: f64) -> Result<()> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::config(field, format!("must be finite and >= 0, got {mu}")));
    }
    Ok(())
}

impl StrategyConfig {
    pub fn fedprox(mu: f64) -> Result<Self> {
        check_mu("strategy.fedprox.mu", mu)?;
        Ok(StrategyConfig::FedProx { mu })
    }

    pub fn fedr(mu: f64, delta_mode: DeltaMode) -> Result<Self> {
        check_mu("strategy.fedr.mu", mu)?;
        Ok(StrategyConfig::Fedr {
            mu,
            delta_mode,
            client_mu: BTreeMap::new(),
        })
    }

    /// Adds per-client μ overrides to a Fedr strategy.
    pub fn with_client_mu(self, overrides: BTreeMap<usize, f64>) -> Result<Self> {
        match self {
            StrategyConfig::Fedr { mu, delta_mode, .. } => {
                for &m in overrides.values() {
                    check_mu("strategy.fedr.client_mu", m)?;
                }
                Ok(StrategyConfig::Fedr {
                    mu,
                    delta_mode,
                    client_mu: overrides,
                })
            }
            _ => Err(Error::config(
                "strategy.fedr.client_mu",
                "per-client mu applies to fedr only",
            )),
        }
    }

    pub fn fedkd(
        inner: StrategyConfig,
        alpha: f64,
        temperature: f64,
        personal_archs: Vec<ModelSpec>,
    ) -> Result<Self> {
        if matches!(inner, StrategyConfig::FedKd { .. }) {
            return Err(Error::config("strategy.fedkd.inner", "cannot nest fedkd"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config(
                "strategy.fedkd.alpha",
                format!("must lie in [0, 1], got {alpha}"),
            ));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::config(
                "strategy.fedkd.temperature",
                format!("must be positive, got {temperature}"),
            ));
        }
        Ok(StrategyConfig::FedKd {
            inner: Box::new(inner),
            alpha,
            temperature,
            personal_archs,
        })
    }

    /// The strategy that drives shared-model training.
    pub fn base(&self) -> &StrategyConfig {
        match self {
            StrategyConfig::FedKd { inner, .. } => inner,
            other => other,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::FedAvg => "fedavg",
            StrategyConfig::FedProx { .. } => "fedprox",
            StrategyConfig::Fedr { .. } => "fedr",
            StrategyConfig::FedKd { .. } => "fedkd",
        }
    }

    pub fn delta_mode(&self) -> Option<&DeltaMode> {
        match self.base() {
            StrategyConfig::Fedr { delta_mode, .. } => Some(delta_mode),
            _ => None,
        }
    }

    /// Whether clients receive the blended delta alongside the weights.
    pub fn broadcasts_delta(&self) -> bool {
        self.delta_mode().is_some()
    }

    /// Local penalty for client `client` and its gradient at `local`. `None`
    /// when the strategy adds nothing (including μ = 0).
    pub fn penalty(
        &self,
        client: usize,
        local: &ParamVector,
        global: &ParamVector,
        delta: &ParamVector,
    ) -> Result<Option<(f64, Gradient)>> {
        match self.base() {
            StrategyConfig::FedAvg | StrategyConfig::FedKd { .. } => Ok(None),
            StrategyConfig::FedProx { mu } => {
                if *mu == 0.0 {
                    return Ok(None);
                }
                prox_penalty(local, global, *mu).map(Some)
            }
            StrategyConfig::Fedr { mu, client_mu, .. } => {
                let mu = client_mu.get(&client).copied().unwrap_or(*mu);
                if mu == 0.0 {
                    return Ok(None);
                }
                reg_penalty(local, global, delta, mu).map(Some)
            }
        }
    }

    /// Stable textual form used for digests.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        match self {
            StrategyConfig::FedAvg => s.push_str("fedavg"),
            StrategyConfig::FedProx { mu } => write!(s, "fedprox;mu={mu:?}").unwrap(),
            StrategyConfig::Fedr {
                mu,
                delta_mode,
                client_mu,
            } => {
                write!(s, "fedr;mu={mu:?};").unwrap();
                match delta_mode {
                    DeltaMode::OptionI { coeffs } => write!(s, "option=I;coeffs={coeffs:?}"),
                    DeltaMode::OptionII { a } => write!(s, "option=II;a={a:?}"),
                }
                .unwrap();
                for (k, m) in client_mu {
                    write!(s, ";mu[{k}]={m:?}").unwrap();
                }
            }
            StrategyConfig::FedKd {
                inner,
                alpha,
                temperature,
                personal_archs,
            } => {
                write!(
                    s,
                    "fedkd;alpha={alpha:?};temperature={temperature:?};inner=({});personal={personal_archs:?}",
                    inner.canonical()
                )
                .unwrap();
            }
        }
        s
    }

    /// Hex SHA-256 of [`StrategyConfig::canonical`].
    pub fn digest(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Blends raw deltas (newest first) into the delta broadcast next round.
pub fn blend_delta(
    history: &[ParamVector],
    mode: &DeltaMode,
    prev_blended: &ParamVector,
) -> Result<ParamVector> {
    let newest = history
        .first()
        .ok_or_else(|| Error::Data("delta blending needs at least one raw delta".into()))?;
    for h in history {
        newest.ensure_congruent(h, "delta history")?;
    }
    newest.ensure_congruent(prev_blended, "previous blended delta")?;
    match mode {
        DeltaMode::OptionI { coeffs } => {
            let mut out = newest.zeros_like();
            for (a, raw) in coeffs.iter().zip(history) {
                out.axpy(*a, raw);
            }
            Ok(out)
        }
        DeltaMode::OptionII { a } => {
            let mut out = prev_blended.scaled(1.0 - a);
            out.axpy(*a, newest);
            Ok(out)
        }
    }
}

/// Filtered delta penalty. For each coordinate `j`, if
/// `(w_k − w^t)_j · δ_j ≥ 0` the coordinate is ignored; otherwise it
/// contributes `r_j = (w_k − w^t − δ)_j`. Returns `(μ/2)·Σ r_j²` and the
/// gradient `μ·r_j` on contributing coordinates (zero elsewhere); the mask is
/// held constant for differentiation.
pub fn reg_penalty(
    local: &ParamVector,
    global: &ParamVector,
    delta: &ParamVector,
    mu: f64,
) -> Result<(f64, Gradient)> {
    local.ensure_congruent(global, "reg_penalty weights")?;
    local.ensure_congruent(delta, "reg_penalty delta")?;
    check_mu("mu", mu)?;
    let mut grad = local.zeros_like();
    let mut sum_sq = 0.0;
    for (((g, w), wt), d) in grad
        .values_mut()
        .zip(local.values())
        .zip(global.values())
        .zip(delta.values())
    {
        let update = w - wt;
        if update * d >= 0.0 {
            continue;
        }
        let r = update - d;
        sum_sq += r * r;
        *g = mu * r;
    }
    Ok((0.5 * mu * sum_sq, grad))
}

/// `(μ/2)‖w_k − w^t‖²` and its gradient.
pub fn prox_penalty(local: &ParamVector, global: &ParamVector, mu: f64) -> Result<(f64, Gradient)> {
    let diff = local.sub(global)?;
    let sum_sq: f64 = diff.values().map(|v| v * v).sum();
    Ok((0.5 * mu * sum_sq, diff.scaled(mu)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pv(values: &[f64]) -> ParamVector {
        ParamVector::new(vec![("w".into(), Tensor::vector(values.to_vec()).unwrap())]).unwrap()
    }

    #[test]
    fn option_ii_midpoint() {
        let out = blend_delta(&[pv(&[4.0])], &DeltaMode::option_ii(0.5).unwrap(), &pv(&[2.0]))
            .unwrap();
        assert_eq!(out.flatten(), vec![3.0]);
    }

    #[test]
    fn option_i_convex_combination_of_equal_deltas() {
        let mode = DeltaMode::option_i(vec![0.2, 0.3, 0.5]).unwrap();
        let h = [pv(&[1.0]), pv(&[1.0]), pv(&[1.0])];
        assert_eq!(blend_delta(&h, &mode, &pv(&[0.0])).unwrap().flatten(), vec![1.0]);
    }

    #[test]
    fn option_i_hand_dot_product() {
        let mode = DeltaMode::option_i(vec![0.2, 0.3, 0.5]).unwrap();
        let h = [pv(&[10.0]), pv(&[0.0]), pv(&[0.0])];
        assert_eq!(blend_delta(&h, &mode, &pv(&[0.0])).unwrap().flatten(), vec![2.0]);
    }

    #[test]
    fn option_i_short_history_counts_missing_as_zero() {
        let mode = DeltaMode::option_i(vec![0.2, 0.3, 0.5]).unwrap();
        let out = blend_delta(&[pv(&[10.0])], &mode, &pv(&[0.0])).unwrap();
        assert_eq!(out.flatten(), vec![2.0]);
    }

    #[test]
    fn coefficient_validation_happens_at_construction() {
        assert!(DeltaMode::option_i(vec![0.5, 0.6]).is_err());
        assert!(DeltaMode::option_i(vec![0.25; 5]).is_err());
        assert!(DeltaMode::option_ii(1.0).is_err());
        assert!(DeltaMode::option_ii(0.0).is_err());
    }

    #[test]
    fn aligned_update_has_no_penalty() {
        let (p, g) = reg_penalty(&pv(&[1.5, -2.0]), &pv(&[1.0, -1.0]), &pv(&[0.5, -1.0]), 3.0)
            .unwrap();
        assert_eq!(p, 0.0);
        assert_eq!(g.flatten(), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_penalty() {
        // w_k − w^t = [1, −1], δ = [1, 1]: only coordinate 1 opposes δ,
        // r = −1 − 1 = −2, penalty 0.1/2 · 4.
        let (p, g) =
            reg_penalty(&pv(&[1.0, -1.0]), &pv(&[0.0, 0.0]), &pv(&[1.0, 1.0]), 0.1).unwrap();
        assert!((p - 0.2).abs() < 1e-15);
        assert_eq!(g.flatten()[0], 0.0);
        assert!((g.flatten()[1] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_mu_zero_penalty() {
        let (p, g) = reg_penalty(&pv(&[3.0, -7.0]), &pv(&[1.0, 2.0]), &pv(&[-4.0, 5.0]), 0.0)
            .unwrap();
        assert_eq!(p, 0.0);
        assert!(g.values().all(|v| v == 0.0));
    }

    #[test]
    fn incongruent_inputs_rejected() {
        assert!(reg_penalty(&pv(&[1.0]), &pv(&[1.0, 2.0]), &pv(&[1.0]), 0.1).is_err());
    }

    #[test]
    fn prox_penalty_value() {
        let (p, g) = prox_penalty(&pv(&[1.0, 3.0]), &pv(&[0.0, 1.0]), 0.01).unwrap();
        assert!((p - 0.025).abs() < 1e-15);
        assert_eq!(g.flatten(), vec![0.01, 0.02]);
    }

    #[test]
    fn digest_is_stable_and_distinguishing() {
        let a = StrategyConfig::fedr(0.1, DeltaMode::option_ii(0.5).unwrap()).unwrap();
        let b = StrategyConfig::fedr(0.1, DeltaMode::option_ii(0.4).unwrap()).unwrap();
        assert_eq!(a.digest(), a.clone().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
