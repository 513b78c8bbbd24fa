use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Features, TaskKind, Targets};

/// Class-conditional isotropic Gaussians with unit variance.
///
/// Class `c < features` is centred at `margin · e_c`; further classes use
/// random directions scaled to `margin`. Sample `i` has label `i mod classes`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    pub features: usize,
    pub margin: f64,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("dataset.classes", "need at least 2 classes"));
        }
        if self.features == 0 {
            return Err(Error::config("dataset.features", "must be >= 1"));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::config("dataset.margin", "must be finite and >= 0"));
        }
        Ok(())
    }
}

pub fn make_blobs(spec: &BlobSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.classes {
        return Err(Error::Parameter(format!(
            "{n} samples cannot represent {} classes",
            spec.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.features;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let mut dir = vec![0.0; f];
            if c < f {
                dir[c] = 1.0;
            } else {
                dir.iter_mut()
                    .for_each(|v| *v = StandardNormal.sample(&mut rng));
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter_mut().for_each(|v| *v /= norm);
            }
            dir.into_iter().map(|v| v * spec.margin).collect()
        })
        .collect();

    let mut data = Vec::with_capacity(n * f);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % spec.classes;
        labels.push(y);
        for mean in &means[y] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(mean + noise);
        }
    }
    Dataset::new(
        Features::Vectors(Tensor::new(vec![n, f], data)?),
        Targets::Classes(labels),
        TaskKind::Classification {
            classes: spec.classes,
        },
    )
}

/// Per-client feature offsets drawn from `N(0, scale²)`.
pub fn client_feature_offsets(
    num_clients: usize,
    features: usize,
    scale: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let normal = Normal::new(0.0, scale)
        .map_err(|e| Error::config("partition.shift", format!("{e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_4946_545f_4f46);
    Ok((0..num_clients)
        .map(|_| (0..features).map(|_| normal.sample(&mut rng)).collect())
        .collect())
}

/// Adds `offset` to every feature row of a vector dataset.
pub fn apply_feature_shift(data: &mut Dataset, offset: &[f64]) -> Result<()> {
    let Features::Vectors(x) = data.features_mut() else {
        return Err(Error::Data("feature shift applies to vector datasets".into()));
    };
    if x.cols() != offset.len() {
        return Err(Error::Structural(format!(
            "offset of width {} for {} features",
            offset.len(),
            x.cols()
        )));
    }
    let f = x.cols();
    for row in x.data_mut().chunks_mut(f) {
        for (v, o) in row.iter_mut().zip(offset) {
            *v += o;
        }
    }
    Ok(())
}

/// Uniform integer in `[lo, hi]`.
pub(crate) fn uniform_inclusive<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let spec = BlobSpec {
            classes: 3,
            features: 5,
            margin: 2.0,
        };
        assert_eq!(make_blobs(&spec, 60, 4).unwrap(), make_blobs(&spec, 60, 4).unwrap());
        assert_ne!(make_blobs(&spec, 60, 4).unwrap(), make_blobs(&spec, 60, 5).unwrap());
    }

    #[test]
    fn labels_are_balanced() {
        let spec = BlobSpec {
            classes: 4,
            features: 2,
            margin: 1.0,
        };
        let d = make_blobs(&spec, 40, 0).unwrap();
        let mut counts = [0; 4];
        d.labels().unwrap().iter().for_each(|&y| counts[y] += 1);
        assert_eq!(counts, [10; 4]);
    }

    #[test]
    fn too_few_samples() {
        let spec = BlobSpec {
            classes: 4,
            features: 2,
            margin: 1.0,
        };
        assert!(make_blobs(&spec, 3, 0).is_err());
    }

    #[test]
    fn shift_moves_every_row() {
        let spec = BlobSpec {
            classes: 2,
            features: 2,
            margin: 0.0,
        };
        let base = make_blobs(&spec, 4, 1).unwrap();
        let mut shifted = base.clone();
        apply_feature_shift(&mut shifted, &[1.0, -2.0]).unwrap();
        let (Features::Vectors(a), Features::Vectors(b)) = (base.features(), shifted.features())
        else {
            unreachable!()
        };
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let want = if i % 2 == 0 { 1.0 } else { -2.0 };
            assert!((y - x - want).abs() < 1e-12);
        }
    }
}
