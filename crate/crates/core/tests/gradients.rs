use fedsim_core::tensor::{softmax_with_temperature, ParamVector, Sgd, Tensor};
use fedsim_core::verify::{component_names, gradient_suite, TOLERANCE};
use proptest::prelude::*;

#[test]
fn every_component_passes_one_hundred_trials() {
    let checks = gradient_suite(11, 100, None).unwrap();
    assert_eq!(checks.len(), component_names().len());
    for c in &checks {
        assert!(
            c.max_rel_error < TOLERANCE,
            "{} max relative error {:e}",
            c.name,
            c.max_rel_error
        );
    }
}

#[test]
fn corrupted_component_is_reported() {
    let checks = gradient_suite(3, 2, Some("readout_max")).unwrap();
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
    assert_eq!(failed, vec!["readout_max"]);
}

#[test]
fn zero_parameter_model_is_vacuous() {
    let checks = gradient_suite(0, 1, None).unwrap();
    let empty = checks.iter().find(|c| c.name == "zero_parameter_model").unwrap();
    assert_eq!(empty.coordinates, 0);
    assert!(empty.passed());
}

fn finite_matrix() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..5, 1usize..6).prop_flat_map(|(r, c)| {
        (Just(c), prop::collection::vec(-30.0f64..30.0, r * c))
    })
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_keep_argmax(
        (cols, data) in finite_matrix(),
        tau in 0.05f64..50.0,
    ) {
        let rows = data.len() / cols;
        let z = Tensor::new(vec![rows, cols], data).unwrap();
        let p = softmax_with_temperature(&z, tau).unwrap();
        for r in 0..rows {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(r).iter().all(|&v| v >= 0.0));
            prop_assert_eq!(argmax(p.row(r)), argmax(z.row(r)));
        }
    }

    #[test]
    fn flatten_unflatten_is_bit_exact(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 0..4),
        seed in any::<u64>(),
    ) {
        let mut state = seed;
        let segments = shapes
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|_| {
                        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        f64::from_bits(state >> 2).clamp(-1e300, 1e300)
                    })
                    .map(|v| if v.is_finite() { v } else { 0.5 })
                    .collect();
                (format!("s{i}"), Tensor::new(shape, data).unwrap())
            })
            .collect();
        let p = ParamVector::new(segments).unwrap();
        let back = ParamVector::unflatten(&p.layout(), &p.flatten()).unwrap();
        prop_assert_eq!(p.len(), back.len());
        for (a, b) in p.values().zip(back.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn zero_learning_rate_is_identity(
        w in prop::collection::vec(-1e6f64..1e6, 1..20),
        g in prop::collection::vec(-1e6f64..1e6, 1..20),
    ) {
        let n = w.len().min(g.len());
        let mk = |v: &[f64]| ParamVector::new(vec![("w".into(), Tensor::vector(v[..n].to_vec()).unwrap())]).unwrap();
        let mut params = mk(&w);
        let before = params.clone();
        Sgd::new(0.0).unwrap().step(&mut params, &mk(&g)).unwrap();
        for (a, b) in params.values().zip(before.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn linear_regression_and_mlp_thresholds() {
    let checks = gradient_suite(5, 20, None).unwrap();
    let get = |n: &str| checks.iter().find(|c| c.name == n).unwrap().max_rel_error;
    assert!(get("linear_regression") < 1e-6, "{:e}", get("linear_regression"));
    assert!(get("mlp") < 1e-4);
    assert!(get("gin") < 1e-4);
}
