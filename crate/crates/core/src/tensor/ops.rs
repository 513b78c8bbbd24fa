//! Value-level tensor operations. The tape in [`super::tape`] reuses these for
//! its forward pass, and they are also usable on their own.

use crate::error::{Error, Result};

use super::Tensor;

/// Probability floor applied inside logarithms of KL terms.
pub const PROB_FLOOR: f64 = 1e-12;

fn ensure_matrix(t: &Tensor, what: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Structural(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// `a · b` for `a: [n×k]`, `b: [k×m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_matrix(a, "left operand")?;
    ensure_matrix(b, "right operand")?;
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let (k2, m) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Structural(format!(
            "cannot multiply {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = ad[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, w) in row.iter_mut().zip(&bd[p * m..(p + 1) * m]) {
                *o += x * w;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `input · weights + bias`, with the bias broadcast over the batch.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    ensure_matrix(input, "input")?;
    ensure_matrix(weights, "weights")?;
    if input.shape()[1] != weights.shape()[0] || bias.shape() != [weights.shape()[1]] {
        return Err(Error::Structural(format!(
            "dense layer shape mismatch: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let mut out = matmul(input, weights)?;
    let m = bias.len();
    for row in out.data_mut().chunks_mut(m) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise `exp(z_i / tau) / Σ_j exp(z_j / tau)`. Vectors are treated as a
/// single row.
pub fn softmax_with_temperature(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    let cols = logits.cols();
    let mut out = Tensor::zeros(logits.shape());
    for (src, dst) in logits
        .data()
        .chunks(cols)
        .zip(out.data_mut().chunks_mut(cols))
    {
        softmax_into(src, tau, dst);
    }
    Ok(out)
}

/// Mean cross-entropy over the batch, and its gradient with respect to the
/// logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    ensure_matrix(logits, "logits")?;
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::Structural(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut grad = softmax_with_temperature(logits, 1.0)?;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad.data_mut()[r * classes + y] -= 1.0;
    }
    let scale = 1.0 / batch as f64;
    grad.data_mut().iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

fn ensure_distribution(t: &Tensor, what: &str) -> Result<()> {
    let total: f64 = t.data().iter().sum();
    if t.data().iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Data(format!(
            "{what} is not a probability distribution (sum {total})"
        )));
    }
    Ok(())
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)`. Zero entries of `q` are floored at
/// [`PROB_FLOOR`]; terms with `p_i == 0` contribute nothing.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::Structural(format!(
            "KL operands differ in shape: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    ensure_distribution(p, "p")?;
    ensure_distribution(q, "q")?;
    Ok(kl_terms(p.data(), q.data()))
}

pub(crate) fn kl_terms(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum()
}

/// Mean squared error between column `column` of `pred` and `targets`.
pub fn mse(pred: &Tensor, targets: &[f64], column: usize) -> Result<(f64, Tensor)> {
    ensure_matrix(pred, "predictions")?;
    if pred.shape()[0] != targets.len() || column >= pred.shape()[1] {
        return Err(Error::Structural(format!(
            "predictions {:?} do not match {} targets (column {column})",
            pred.shape(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for (r, &y) in targets.iter().enumerate() {
        let diff = pred.at(r, column) - y;
        loss += diff * diff;
        grad.data_mut()[r * pred.cols() + column] = 2.0 * diff / n;
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn dense_identity_weights() {
        let x = Tensor::matrix(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::vector(vec![0.0, 0.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_zero_input_passes_bias() {
        let x = Tensor::matrix(&[vec![0.0, 0.0]]).unwrap();
        let w = Tensor::matrix(&[vec![5.0, -2.0], vec![0.3, 9.0]]).unwrap();
        let b = Tensor::vector(vec![3.0, 4.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_hand_multiply() {
        // [1,1]·[[2,3],[4,5]] + [1,1] = [2+4+1, 3+5+1]
        let x = Tensor::matrix(&[vec![1.0, 1.0]]).unwrap();
        let w = Tensor::matrix(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let b = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn dense_shape_mismatch_names_both_shapes() {
        let x = Tensor::matrix(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let w = Tensor::matrix(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let b = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let msg = dense_forward(&x, &w, &b).unwrap_err().to_string();
        assert!(msg.contains("[1, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric() {
        let s = softmax_with_temperature(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 1.0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_temperature_ten() {
        // exp(0.1), exp(0.2), exp(0.3) normalised, evaluated independently:
        let e: Vec<f64> = [0.1f64, 0.2, 0.3].iter().map(|v| v.exp()).collect();
        let total: f64 = e.iter().sum();
        let s = softmax_with_temperature(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), 10.0)
            .unwrap();
        for ((got, want), frozen) in s.data().iter().zip(&e).zip([0.3006, 0.3322, 0.3672]) {
            assert_close(*got, want / total, 1e-15);
            assert_close(*got, frozen, 1e-3);
        }
    }

    #[test]
    fn softmax_high_temperature_is_uniform() {
        let logits = Tensor::vector(vec![-3.0, 0.5, 7.0, 2.0]).unwrap();
        let s = softmax_with_temperature(&logits, 1e6).unwrap();
        for v in s.data() {
            assert!((v - 0.25).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let logits = Tensor::vector(vec![1.0]).unwrap();
        assert!(matches!(
            softmax_with_temperature(&logits, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(softmax_with_temperature(&logits, -1.0).is_err());
    }

    #[test]
    fn cross_entropy_confident_correct() {
        let logits = Tensor::matrix(&[vec![0.0, 1e6, 0.0]]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let logits = Tensor::zeros(&[2, 10]);
        let (loss, _) = cross_entropy(&logits, &[3, 9]).unwrap();
        assert_close(loss, 10f64.ln(), 1e-9);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let rows: Vec<Vec<f64>> = vec![
            vec![0.3, -1.2, 2.5, 0.0],
            vec![-0.7, 0.4, 0.1, 1.9],
            vec![1.1, 1.1, -2.0, 0.6],
        ];
        let labels = [2, 0, 3];
        // Naive oracle: -ln(exp(z_y) / Σ exp(z_j)), no max shift.
        let oracle: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, y)| -(r[y].exp() / r.iter().map(|z| z.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 3.0;
        let (loss, _) = cross_entropy(&Tensor::matrix(&rows).unwrap(), &labels).unwrap();
        assert_close(loss, oracle, 1e-10);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::zeros(&[1, 3]);
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn kl_identity_and_analytic() {
        let p = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
        let a = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let b = Tensor::vector(vec![0.5, 0.5]).unwrap();
        assert_close(kl_divergence(&a, &b).unwrap(), 2f64.ln(), 1e-9);
    }

    #[test]
    fn kl_matches_direct_sum() {
        let p: [f64; 5] = [0.05, 0.3, 0.15, 0.4, 0.1];
        let q: [f64; 5] = [0.2, 0.2, 0.25, 0.05, 0.3];
        let mut oracle = 0.0;
        for i in 0..5 {
            oracle += p[i] * p[i].ln() - p[i] * q[i].ln();
        }
        let got = kl_divergence(
            &Tensor::vector(p.to_vec()).unwrap(),
            &Tensor::vector(q.to_vec()).unwrap(),
        )
        .unwrap();
        assert_close(got, oracle, 1e-10);
    }

    #[test]
    fn kl_clamps_zero_q() {
        let p = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let q = Tensor::vector(vec![1.0, 0.0]).unwrap();
        let v = kl_divergence(&p, &q).unwrap();
        assert!(v.is_finite());
        assert_close(v, 0.5 * 0.5f64.ln() + 0.5 * (0.5 / PROB_FLOOR).ln(), 1e-9);
    }

    #[test]
    fn mse_of_constant_zero_prediction() {
        let pred = Tensor::zeros(&[4, 1]);
        let (loss, grad) = mse(&pred, &[1.0, -1.0, 2.0, -2.0], 0).unwrap();
        assert_close(loss, 2.5, 1e-15);
        assert_eq!(grad.data(), &[-0.5, 0.5, -1.0, 1.0]);
    }
}
