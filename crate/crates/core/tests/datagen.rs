use std::fs;
use std::path::PathBuf;

use fedsim_core::datagen::{
    iid_partition, idx_load, lda_partition, make_blobs, make_graph_tasks, BlobSpec,
    DirichletParams, Features, GraphRule, GraphTaskSpec, Partition, Targets,
};
use fedsim_core::models::Target;
use fedsim_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

fn balanced(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

/// Reference draw-and-split: returns the client of every sample, or `None`
/// after 100 failed attempts.
fn reference_lda(labels: &[usize], alpha: f64, k: usize, seed: u64) -> Option<Vec<usize>> {
    let classes = labels.iter().copied().max().unwrap() + 1;
    let gamma = Gamma::new(alpha, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    'attempt: for _ in 0..100 {
        let mut owner = vec![usize::MAX; labels.len()];
        let mut counts = vec![0usize; k];
        for c in 0..classes {
            let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            members.shuffle(&mut rng);
            let g: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = g.iter().sum();
            if total.is_nan() || total <= 0.0 {
                continue 'attempt;
            }
            let n_c = members.len();
            let mut cuts = Vec::with_capacity(k + 1);
            cuts.push(0usize);
            let mut cum = 0.0;
            for (j, gj) in g.iter().enumerate() {
                cum += gj / total;
                let cut = if j == k - 1 { n_c } else { (cum * n_c as f64).floor() as usize };
                let prev = *cuts.last().unwrap();
                cuts.push(cut.max(prev).min(n_c));
            }
            for j in 0..k {
                for &i in &members[cuts[j]..cuts[j + 1]] {
                    owner[i] = j;
                    counts[j] += 1;
                }
            }
        }
        if counts.iter().all(|&c| c > 0) {
            return Some(owner);
        }
    }
    None
}

fn owners(p: &Partition, n: usize) -> Vec<usize> {
    let mut owner = vec![usize::MAX; n];
    for (k, set) in p.assignments().iter().enumerate() {
        for &i in set {
            owner[i] = k;
        }
    }
    owner
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/lda_alpha0.15_k10_n1000_seed7.csv")
}

/// Writes the fixture from the reference implementation when
/// `FEDSIM_REGENERATE_FIXTURES` is set.
#[test]
fn lda_matches_committed_reference_fixture() {
    let labels = balanced(1000, 10);
    let path = fixture_path();
    if std::env::var_os("FEDSIM_REGENERATE_FIXTURES").is_some() {
        let owner = reference_lda(&labels, 0.15, 10, 7).expect("reference succeeds");
        let mut text = String::from("index,client\n");
        for (i, k) in owner.iter().enumerate() {
            text.push_str(&format!("{i},{k}\n"));
        }
        fs::write(&path, text).unwrap();
    }
    let fixture: Vec<usize> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let p = lda_partition(&labels, &DirichletParams::new(0.15, 10, 7).unwrap()).unwrap();
    p.validate(1000).unwrap();
    assert_eq!(owners(&p, 1000), fixture);
    // And the reference still reproduces the committed file.
    assert_eq!(reference_lda(&labels, 0.15, 10, 7).unwrap(), fixture);
}

#[test]
fn lda_agrees_with_reference_across_seeds() {
    let labels = balanced(600, 6);
    for seed in 0..30 {
        for alpha in [0.1, 0.5, 3.0] {
            let ours = lda_partition(&labels, &DirichletParams::new(alpha, 8, seed).unwrap());
            match reference_lda(&labels, alpha, 8, seed) {
                Some(owner) => assert_eq!(owners(&ours.unwrap(), 600), owner),
                None => assert!(matches!(ours, Err(Error::Partition(_)))),
            }
        }
    }
}

#[test]
fn single_client_receives_everything() {
    let labels = balanced(37, 3);
    let p = lda_partition(&labels, &DirichletParams::new(0.15, 1, 0).unwrap()).unwrap();
    assert_eq!(p.client(0), (0..37).collect::<Vec<_>>().as_slice());
}

#[test]
fn huge_alpha_matches_global_histogram() {
    let labels = balanced(1000, 10);
    for seed in 0..20 {
        let p = lda_partition(&labels, &DirichletParams::new(1e6, 10, seed).unwrap()).unwrap();
        let global = vec![0.1; 10];
        for h in p.label_histograms(&labels, 10) {
            let total: usize = h.iter().sum();
            let dist: Vec<f64> = h.iter().map(|&c| c as f64 / total as f64).collect();
            let tv = fedsim_core::datagen::total_variation(&dist, &global);
            assert!(tv < 0.05, "seed {seed}: tv {tv}");
        }
    }
}

#[test]
fn skew_is_monotone_in_alpha() {
    let labels = balanced(1000, 10);
    let mean_tv = |alpha: f64| {
        (0..20)
            .map(|seed| {
                let p = lda_partition(&labels, &DirichletParams::new(alpha, 10, seed).unwrap()).unwrap();
                p.validate(1000).unwrap();
                p.mean_label_tv(&labels, 10)
            })
            .sum::<f64>()
            / 20.0
    };
    let tvs: Vec<f64> = [0.05, 0.15, 1.0, 10.0].iter().map(|&a| mean_tv(a)).collect();
    for w in tvs.windows(2) {
        assert!(w[0] >= w[1], "{tvs:?}");
    }
}

#[test]
fn lda_errors() {
    let err = DirichletParams::new(0.0, 3, 0).unwrap_err();
    assert!(err.to_string().contains("partition.alpha"));
    let labels = vec![0, 0, 2, 2];
    let err = lda_partition(&labels, &DirichletParams::new(1.0, 2, 0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    // Two samples can never feed three clients.
    let err = lda_partition(&[0, 1], &DirichletParams::new(1.0, 3, 0).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Partition(_)));
    // One sample per client almost never survives extreme skew.
    let labels = balanced(20, 2);
    let err = lda_partition(&labels, &DirichletParams::new(1e-3, 20, 1).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Partition(_)));
}

#[test]
fn iid_even_split() {
    let p = iid_partition(100, 4, 1).unwrap();
    assert_eq!(p.sizes(), vec![25; 4]);
    p.validate(100).unwrap();
}

proptest! {
    #[test]
    fn every_partition_is_an_exact_set_partition(
        n in 1usize..300,
        classes in 1usize..6,
        k in 1usize..12,
        alpha in 0.05f64..20.0,
        seed in any::<u64>(),
    ) {
        let labels = balanced(n.max(classes), classes);
        let n = labels.len();
        if let Ok(p) = iid_partition(n, k, seed) {
            prop_assert!(p.validate(n).is_ok());
        }
        match lda_partition(&labels, &DirichletParams::new(alpha, k, seed).unwrap()) {
            Ok(p) => {
                prop_assert_eq!(p.num_clients(), k);
                prop_assert!(p.validate(n).is_ok());
            }
            Err(e) => prop_assert!(matches!(e, Error::Partition(_))),
        }
    }
}

fn train_logistic(x: &[Vec<f64>], y: &[usize], classes: usize, epochs: usize) -> Vec<Vec<f64>> {
    // Softmax regression by full-batch gradient descent; the last column is
    // the bias.
    let f = x[0].len();
    let mut w = vec![vec![0.0; f + 1]; classes];
    for _ in 0..epochs {
        let mut grad = vec![vec![0.0; f + 1]; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let logits: Vec<f64> = w
                .iter()
                .map(|wc| wc[..f].iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + wc[f])
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..classes {
                let p = (logits[c] - max).exp() / z - if c == yi { 1.0 } else { 0.0 };
                for j in 0..f {
                    grad[c][j] += p * xi[j];
                }
                grad[c][f] += p;
            }
        }
        for c in 0..classes {
            for j in 0..=f {
                w[c][j] -= 0.5 * grad[c][j] / x.len() as f64;
            }
        }
    }
    w
}

fn accuracy(w: &[Vec<f64>], x: &[Vec<f64>], y: &[usize]) -> f64 {
    let f = x[0].len();
    let hits = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| {
            let scores: Vec<f64> = w
                .iter()
                .map(|wc| wc[..f].iter().zip(xi.iter()).map(|(a, b)| a * b).sum::<f64>() + wc[f])
                .collect();
            let best = (0..scores.len())
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
                .unwrap();
            best == yi
        })
        .count();
    hits as f64 / y.len() as f64
}

fn rows_and_labels(spec: &BlobSpec, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = make_blobs(spec, n, seed).unwrap();
    let Features::Vectors(x) = d.features() else { unreachable!() };
    let rows = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
    (rows, d.labels().unwrap().to_vec())
}

#[test]
fn separated_blobs_are_learnable() {
    let spec = BlobSpec { classes: 2, features: 4, margin: 4.0 };
    let (x, y) = rows_and_labels(&spec, 1000, 3);
    let w = train_logistic(&x, &y, 2, 200);
    let acc = accuracy(&w, &x, &y);
    assert!(acc >= 0.99, "train accuracy {acc}");
}

#[test]
fn overlapping_blobs_stay_at_chance() {
    let spec = BlobSpec { classes: 4, features: 4, margin: 0.0 };
    let (x, y) = rows_and_labels(&spec, 2000, 4);
    let (xt, yt) = rows_and_labels(&spec, 2000, 5);
    let w = train_logistic(&x, &y, 4, 100);
    let acc = accuracy(&w, &xt, &yt);
    assert!((acc - 0.25).abs() <= 0.05, "test accuracy {acc}");
}

#[test]
fn generators_are_deterministic() {
    let spec = BlobSpec { classes: 3, features: 5, margin: 2.0 };
    assert_eq!(make_blobs(&spec, 100, 9).unwrap(), make_blobs(&spec, 100, 9).unwrap());
    for rule in [GraphRule::CountNodes, GraphRule::MaxFeature, GraphRule::TrianglePresence] {
        let g = GraphTaskSpec { rule, min_nodes: 3, max_nodes: 9, features: 2 };
        assert_eq!(make_graph_tasks(&g, 30, 2).unwrap(), make_graph_tasks(&g, 30, 2).unwrap());
    }
}

#[test]
fn triangle_labels_are_mixed() {
    let g = GraphTaskSpec { rule: GraphRule::TrianglePresence, min_nodes: 3, max_nodes: 8, features: 1 };
    let d = make_graph_tasks(&g, 200, 1).unwrap();
    let Targets::Classes(y) = d.targets() else { panic!() };
    let ones = y.iter().filter(|&&v| v == 1).count();
    assert!(ones > 50 && ones < 150, "{ones}");
    let Features::Graphs(graphs) = d.features() else { panic!() };
    for (graph, &label) in graphs.iter().zip(y) {
        assert_eq!(graph.target, Target::Class(label));
    }
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(payload);
    b
}

#[test]
fn idx_minimal_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("img.idx");
    let labels = dir.path().join("lbl.idx");
    fs::write(&images, idx_bytes(0x803, &[1, 2, 2], &[0, 128, 255, 64])).unwrap();
    fs::write(&labels, idx_bytes(0x801, &[1], &[7])).unwrap();
    let d = idx_load(&images, &labels).unwrap();
    let Features::Vectors(x) = d.features() else { panic!() };
    let expected = [0.0, 0.50196, 1.0, 0.25098];
    for (a, b) in x.data().iter().zip(expected) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
    for (a, b) in x.data().iter().zip([0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]) {
        assert!((a - b).abs() <= 1e-15);
    }
    assert_eq!(d.labels().unwrap(), &[7]);

    fs::write(&labels, idx_bytes(0x801, &[2], &[7, 1])).unwrap();
    assert!(matches!(idx_load(&images, &labels), Err(Error::Format { .. })));

    fs::write(&images, b"").unwrap();
    assert!(matches!(idx_load(&images, &labels), Err(Error::Format { .. })));

    fs::write(&images, idx_bytes(0x802, &[1, 2, 2], &[0; 4])).unwrap();
    assert!(matches!(idx_load(&images, &labels), Err(Error::Format { .. })));

    fs::write(&images, idx_bytes(0x803, &[1, 2, 2], &[0; 3])).unwrap();
    let err = idx_load(&images, &labels).unwrap_err();
    assert!(err.to_string().contains("offset"), "{err}");
}
