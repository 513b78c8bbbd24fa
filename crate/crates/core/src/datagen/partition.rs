//! Client partitioners: IID splitting and per-class Dirichlet (LDA) label
//! skew.
//!
//! The Dirichlet partitioner consumes a single `ChaCha8Rng` seeded with
//! `seed_from_u64(seed)`. For each attempt, classes are visited in ascending
//! order; for each class the class's sample indices (ascending) are shuffled
//! with `SliceRandom::shuffle`, then `K` draws of `rand_distr::Gamma(alpha, 1)`
//! are normalized into proportions and the shuffled indices are cut at
//! `floor(cumsum_k · n_c)`, the last client taking the remainder. An attempt that
//! leaves any client empty is discarded and the stream continues.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Attempts made before the Dirichlet partitioner gives up on giving every
/// client at least one sample.
pub const MAX_PARTITION_ATTEMPTS: usize = 100;

/// Mapping from client id to a sorted set of sample indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DirichletParams {
    pub alpha: f64,
    pub num_clients: usize,
    pub seed: u64,
}

impl DirichletParams {
    pub fn new(alpha: f64, num_clients: usize, seed: u64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::config("partition.alpha", format!("must be > 0, got {alpha}")));
        }
        if num_clients == 0 {
            return Err(Error::config("partition.clients", "must be >= 1"));
        }
        Ok(DirichletParams {
            alpha,
            num_clients,
            seed,
        })
    }
}

impl Partition {
    /// Wraps client index sets, sorting each. Use [`Partition::validate`] to
    /// check the set-partition property.
    pub fn from_assignments(mut assignments: Vec<Vec<usize>>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::Partition("no clients".into()));
        }
        assignments.iter_mut().for_each(|a| a.sort_unstable());
        Ok(Partition { assignments })
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client(&self, k: usize) -> &[usize] {
        &self.assignments[k]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Checks that the client sets are disjoint, cover `[0, n)` exactly and
    /// are each nonempty.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, set) in self.assignments.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Partition(format!("client {k} has no samples")));
            }
            for &i in set {
                if i >= n {
                    return Err(Error::Partition(format!("index {i} outside [0, {n})")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Partition(format!("index {missing} unassigned")));
        }
        Ok(())
    }

    /// Per-client class counts.
    pub fn label_histograms(&self, labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
        self.assignments
            .iter()
            .map(|set| {
                let mut h = vec![0; classes];
                for &i in set {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    /// Mean over clients of the total-variation distance between the client's
    /// label distribution and the global one.
    pub fn mean_label_tv(&self, labels: &[usize], classes: usize) -> f64 {
        let global = normalized(&histogram(labels, classes));
        let hists = self.label_histograms(labels, classes);
        hists
            .iter()
            .map(|h| total_variation(&normalized(h), &global))
            .sum::<f64>()
            / hists.len() as f64
    }
}

pub(crate) fn histogram(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

fn normalized(h: &[usize]) -> Vec<f64> {
    let total: usize = h.iter().sum();
    h.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

/// `½ Σ |p_i − q_i|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Shuffles `[0, n)` and deals contiguous chunks; the first `n mod K` clients
/// receive one extra sample.
pub fn iid_partition(n: usize, num_clients: usize, seed: u64) -> Result<Partition> {
    if num_clients == 0 {
        return Err(Error::config("partition.clients", "must be >= 1"));
    }
    if n < num_clients {
        return Err(Error::Partition(format!(
            "{n} samples cannot cover {num_clients} clients"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / num_clients, n % num_clients);
    let mut assignments = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in 0..num_clients {
        let size = base + usize::from(k < extra);
        assignments.push(order[start..start + size].to_vec());
        start += size;
    }
    Partition::from_assignments(assignments)
}

/// Per-class Dirichlet split of sample indices across clients.
pub fn lda_partition(labels: &[usize], params: &DirichletParams) -> Result<Partition> {
    let k = params.num_clients;
    if labels.len() < k {
        return Err(Error::Partition(format!(
            "{} samples cannot cover {k} clients",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    if let Some(empty) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class {empty} has no samples")));
    }
    let gamma = Gamma::new(params.alpha, 1.0)
        .map_err(|e| Error::Parameter(format!("dirichlet alpha {}: {e}", params.alpha)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    for _ in 0..MAX_PARTITION_ATTEMPTS {
        let mut assignments = vec![Vec::new(); k];
        let mut degenerate = false;
        for members in &by_class {
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut rng);
            let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                degenerate = true;
                continue;
            }
            let n_c = shuffled.len();
            let mut cumulative = 0.0;
            let mut start = 0;
            for (client, draw) in draws.iter().enumerate() {
                cumulative += draw / total;
                let end = if client + 1 == k {
                    n_c
                } else {
                    ((cumulative * n_c as f64).floor() as usize).clamp(start, n_c)
                };
                assignments[client].extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if !degenerate && assignments.iter().all(|a| !a.is_empty()) {
            return Partition::from_assignments(assignments);
        }
    }
    Err(Error::Partition(format!(
        "could not give all {k} clients a sample after {MAX_PARTITION_ATTEMPTS} attempts (alpha {})",
        params.alpha
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| i % classes).collect()
    }

    #[test]
    fn iid_remainder_goes_to_earlier_clients() {
        let p = iid_partition(102, 4, 3).unwrap();
        assert_eq!(p.sizes(), vec![26, 26, 25, 25]);
        p.validate(102).unwrap();
        assert_eq!(iid_partition(100, 4, 3).unwrap().sizes(), vec![25; 4]);
    }

    #[test]
    fn single_client_takes_everything() {
        let labels = balanced(50, 5);
        let p = lda_partition(&labels, &DirichletParams::new(0.15, 1, 9).unwrap()).unwrap();
        assert_eq!(p.client(0), (0..50).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn empty_class_is_a_data_error() {
        let labels = vec![0, 0, 2, 2];
        let err = lda_partition(&labels, &DirichletParams::new(1.0, 2, 0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn unsatisfiable_min_size_is_a_partition_error() {
        // One sample per client and extreme concentration: a valid split needs
        // every class to land on a distinct client.
        let labels: Vec<usize> = (0..50).collect();
        let err =
            lda_partition(&labels, &DirichletParams::new(1e-3, 50, 1).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Partition(_)), "{err}");
    }

    #[test]
    fn alpha_must_be_positive() {
        let err = DirichletParams::new(0.0, 3, 0).unwrap_err();
        assert!(err.to_string().contains("partition.alpha"));
    }

    #[test]
    fn same_seed_same_partition() {
        let labels = balanced(300, 3);
        let params = DirichletParams::new(0.5, 6, 11).unwrap();
        assert_eq!(
            lda_partition(&labels, &params).unwrap(),
            lda_partition(&labels, &params).unwrap()
        );
    }
}
