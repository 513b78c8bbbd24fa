//! Finite-difference verification of every differentiable component: layers,
//! losses, model forwards, strategy penalties and the distillation step.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datagen::{Dataset, Features, TaskKind, Targets};
use crate::error::Result;
use crate::fedcore::{kd_local_step, prox_penalty, reg_penalty, PersonalModel};
use crate::models::{
    self, load_params, GinConfig, Graph, Head, MlpConfig, ModelSpec, ReadoutMode,
    Target,
};
use crate::tensor::{grad_check, Gradient, ParamVector, Pool, Tape, Tensor, Var};

/// Largest acceptable relative error.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Check = fn(&mut ChaCha8Rng) -> Result<Instance>;
type LossFn = Box<dyn Fn(&ParamVector) -> Result<(f64, Gradient)>>;

/// Instances closer than this to a ReLU kink or a max-pool tie are redrawn:
/// central differences straddling such a point measure a one-sided slope.
const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;

struct Instance {
    params: ParamVector,
    loss: LossFn,
    margin: f64,
}

impl Instance {
    fn smooth(params: ParamVector, loss: LossFn) -> Result<Instance> {
        Ok(Instance {
            params,
            loss,
            margin: f64::INFINITY,
        })
    }
}

/// Names of all components, in the order [`gradient_suite`] runs them.
pub fn component_names() -> Vec<&'static str> {
    components().iter().map(|(n, _)| *n).collect()
}

fn components() -> Vec<(&'static str, Check)> {
    vec![
        ("dense", check_dense),
        ("relu", check_relu),
        ("scalar_mul", check_scalar_mul),
        ("neighbor_sum", check_neighbor_sum),
        ("readout_sum", |r| check_pool(r, ReadoutMode::Sum)),
        ("readout_mean", |r| check_pool(r, ReadoutMode::Mean)),
        ("readout_max", |r| check_pool(r, ReadoutMode::Max)),
        ("readout_mix", |r| check_pool(r, ReadoutMode::Mix)),
        ("cross_entropy", check_cross_entropy),
        ("temperature_kl", check_temperature_kl),
        ("mse", check_mse),
        ("linear_regression", check_linear_regression),
        ("mlp", check_mlp),
        ("gin", check_gin),
        ("slice_cols", check_slice_cols),
        ("gin_multitask_slice", check_gin_slice),
        ("reg_penalty", check_reg_penalty),
        ("prox_penalty", check_prox_penalty),
        ("kd_local_step", check_kd_classification),
        ("kd_local_step_regression", check_kd_regression),
        ("zero_parameter_model", check_empty),
    ]
}

/// Runs `trials` random instances of each component. When `corrupt` names a
/// component, its analytic gradient is deliberately perturbed; this exists to
/// exercise failure reporting.
pub fn gradient_suite(seed: u64, trials: usize, corrupt: Option<&str>) -> Result<Vec<ComponentCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, build) in components() {
        let mut check = ComponentCheck {
            name,
            trials,
            coordinates: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..trials {
            let Instance { params, loss: f, .. } = draw(build, &mut rng)?;
            let report = if corrupt == Some(name) {
                grad_check(
                    |p| {
                        let (l, g) = f(p)?;
                        let mut bad = g.scaled(1.5);
                        bad.values_mut().for_each(|v| *v += 0.1);
                        Ok((l, bad))
                    },
                    &params,
                )?
            } else {
                grad_check(&f, &params)?
            };
            check.coordinates = check.coordinates.max(report.coordinates);
            check.max_rel_error = check.max_rel_error.max(report.max_rel_error);
        }
        out.push(check);
    }
    Ok(out)
}

fn draw(build: Check, rng: &mut ChaCha8Rng) -> Result<Instance> {
    for _ in 0..MAX_REDRAWS {
        let inst = build(rng)?;
        if inst.margin > KINK_MARGIN {
            return Ok(inst);
        }
    }
    Err(crate::Error::Structural(
        "could not draw an instance away from non-differentiable points".into(),
    ))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect()).expect("shape")
}

fn params_of(tensors: Vec<Tensor>) -> ParamVector {
    ParamVector::new(
        tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("p{i}"), t))
            .collect(),
    )
    .expect("unique names")
}

/// Differentiates `build(tape, vars)` after reducing a non-scalar output to a
/// scalar through a fixed random projection and squared norm.
fn tape_loss<F>(params: ParamVector, build: F, rng: &mut ChaCha8Rng) -> Result<Instance>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    let margin = {
        let mut tape = Tape::new();
        let vars = load_params(&mut tape, &params, true);
        build(&mut tape, &vars)?;
        tape.kink_margin()
    };
    let projection_seed: u64 = rng.random();
    let loss = Box::new(move |p: &ParamVector| {
        let mut tape = Tape::new();
        let vars = load_params(&mut tape, p, true);
        let mut out = build(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            let (rows, cols) = (tape.value(out).rows(), tape.value(out).cols());
            let mut prng = ChaCha8Rng::seed_from_u64(projection_seed);
            let proj = tape.constant(random_tensor(&mut prng, &[cols, 1]));
            let projected = tape.matmul(out, proj)?;
            out = tape.mse(projected, &vec![0.0; rows], 0)?;
        }
        let grads = tape.backward(out);
        let g = models::collect_grads(p, &vars, &grads)?;
        Ok((tape.value(out).data()[0], g))
    });
    Ok(Instance {
        params,
        loss,
        margin,
    })
}

fn check_dense(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = params_of(vec![
        random_tensor(rng, &[3, 4]),
        random_tensor(rng, &[4, 2]),
        random_tensor(rng, &[2]),
    ]);
    tape_loss(p, |t, v| t.dense(v[0], v[1], v[2]), rng)
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = params_of(vec![random_tensor(rng, &[4, 3])]);
    tape_loss(p, |t, v| Ok(t.relu(v[0])), rng)
}

fn check_scalar_mul(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = params_of(vec![random_tensor(rng, &[3, 2]), random_tensor(rng, &[1])]);
    let build = |t: &mut Tape, v: &[Var]| {
        let s = t.add_const(v[1], 1.0);
        t.mul_scalar(v[0], s)
    };
    tape_loss(p, build, rng)
}

fn random_edges(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<(usize, usize)> {
    (0..m)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .collect()
}

fn check_neighbor_sum(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = params_of(vec![random_tensor(rng, &[5, 3])]);
    let edges: Arc<[(usize, usize)]> = random_edges(rng, 5, 8).into();
    tape_loss(p, move |t, v| t.neighbor_sum(v[0], edges.clone()), rng)
}

fn check_pool(rng: &mut ChaCha8Rng, mode: ReadoutMode) -> Result<Instance> {
    let p = params_of(vec![random_tensor(rng, &[7, 3])]);
    let offsets = vec![0, 3, 4, 7];
    let build = move |t: &mut Tape, v: &[Var]| match mode {
        ReadoutMode::Sum => t.segment_pool(v[0], offsets.clone(), Pool::Sum),
        ReadoutMode::Mean => t.segment_pool(v[0], offsets.clone(), Pool::Mean),
        ReadoutMode::Max => t.segment_pool(v[0], offsets.clone(), Pool::Max),
        ReadoutMode::Mix => {
            let parts = [
                t.segment_pool(v[0], offsets.clone(), Pool::Sum)?,
                t.segment_pool(v[0], offsets.clone(), Pool::Mean)?,
                t.segment_pool(v[0], offsets.clone(), Pool::Max)?,
            ];
            t.concat_cols(&parts)
        }
    };
    tape_loss(p, build, rng)
}

fn check_cross_entropy(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = params_of(vec![random_tensor(rng, &[4, 5])]);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    tape_loss(p, move |t, v| t.cross_entropy(v[0], &labels), rng)
}

fn check_temperature_kl(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = params_of(vec![random_tensor(rng, &[3, 4]).map(|v| 3.0 * v)]);
    let teacher = random_tensor(rng, &[3, 4]).map(|v| 3.0 * v);
    let temperature = rng.random_range(0.5..12.0);
    tape_loss(p, move |t, v| t.distill_kl(v[0], &teacher, temperature), rng)
}

fn check_mse(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = params_of(vec![random_tensor(rng, &[5, 2])]);
    let targets: Vec<f64> = (0..5).map(|_| normal(rng)).collect();
    tape_loss(p, move |t, v| t.mse(v[0], &targets, 1), rng)
}

fn check_linear_regression(rng: &mut ChaCha8Rng) -> Result<Instance> {
    // 9 weights + 1 bias.
    let p = params_of(vec![random_tensor(rng, &[9, 1]), random_tensor(rng, &[1])]);
    let x = random_tensor(rng, &[12, 9]);
    let y: Vec<f64> = (0..12).map(|_| normal(rng)).collect();
    let build = move |t: &mut Tape, v: &[Var]| {
        let input = t.constant(x.clone());
        let pred = t.dense(input, v[0], v[1])?;
        t.mse(pred, &y, 0)
    };
    tape_loss(p, build, rng)
}

fn vector_classification(rng: &mut ChaCha8Rng, n: usize, f: usize, classes: usize) -> Dataset {
    let x = random_tensor(rng, &[n, f]);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(
        Features::Vectors(x),
        Targets::Classes(y),
        TaskKind::Classification { classes },
    )
    .expect("valid dataset")
}

fn forward_margin(model: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::new();
    let vars = load_params(&mut tape, params, true);
    model.forward(&mut tape, &vars, data, &idx)?;
    Ok(tape.kink_margin())
}

fn supervised(model: ModelSpec, params: ParamVector, data: Dataset) -> Result<Instance> {
    let margin = forward_margin(&model, &params, &data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(Instance {
        params,
        loss: Box::new(move |p| models::loss_and_grad(&model, p, &data, &idx)),
        margin,
    })
}

// Zero biases put ReLU inputs exactly on the kink whenever a whole layer is
// inactive, so move every parameter off its initial value.
fn perturbed_init(rng: &mut ChaCha8Rng, model: &ModelSpec) -> ParamVector {
    let mut p = model.init(rng);
    p.values_mut().for_each(|v| *v += 0.1 * normal(rng));
    p
}

fn check_mlp(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let model = ModelSpec::Mlp(MlpConfig::new(4, vec![5, 4], 3)?);
    let params = perturbed_init(rng, &model);
    let data = vector_classification(rng, 6, 4, 3);
    supervised(model, params, data)
}

fn random_graph_set(rng: &mut ChaCha8Rng, count: usize, features: usize, task: TaskKind) -> Dataset {
    let graphs = (0..count)
        .map(|_| {
            let n = rng.random_range(1..6);
            let x = random_tensor(rng, &[n, features]);
            let edges: Vec<(usize, usize)> = (1..n).map(|v| (rng.random_range(0..v), v)).collect();
            let target = match task {
                TaskKind::Classification { classes } => Target::Class(rng.random_range(0..classes)),
                TaskKind::Regression => Target::Value(normal(rng)),
            };
            Graph::undirected(x, &edges, target).expect("valid graph")
        })
        .collect();
    Dataset::from_graphs(graphs, task).expect("valid graphs")
}

fn random_readout(rng: &mut ChaCha8Rng) -> ReadoutMode {
    [ReadoutMode::Sum, ReadoutMode::Mean, ReadoutMode::Max, ReadoutMode::Mix][rng.random_range(0..4)]
}

fn check_gin(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = GinConfig::new(2, 2, 3, random_readout(rng), Head::Classification(2))?;
    let model = ModelSpec::Gin(cfg);
    let params = perturbed_init(rng, &model);
    let data = random_graph_set(rng, 3, 2, TaskKind::Classification { classes: 2 });
    supervised(model, params, data)
}

fn check_slice_cols(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let p = params_of(vec![random_tensor(rng, &[3, 5])]);
    let start = rng.random_range(0..4);
    let len = rng.random_range(1..=5 - start);
    tape_loss(p, move |t, v| t.slice_cols(v[0], start, len), rng)
}

/// A regression client reading one column of a four-output multi-task GIN.
fn check_gin_slice(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let cfg = GinConfig::new(2, 2, 3, random_readout(rng), Head::MultiTask(4))?;
    let start = rng.random_range(0..4);
    let model = ModelSpec::slice(ModelSpec::Gin(cfg), start, 1)?;
    let params = perturbed_init(rng, &model);
    let data = random_graph_set(rng, 3, 2, TaskKind::Regression);
    supervised(model, params, data)
}

fn mask_safe_triple(rng: &mut ChaCha8Rng, d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut local = Vec::with_capacity(d);
    let mut global = Vec::with_capacity(d);
    let mut delta = Vec::with_capacity(d);
    while local.len() < d {
        let (w, wt, dl) = (normal(rng), normal(rng), normal(rng));
        if ((w - wt) * dl).abs() > KINK_MARGIN {
            local.push(w);
            global.push(wt);
            delta.push(dl);
        }
    }
    (local, global, delta)
}

fn check_reg_penalty(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (local, global, delta) = mask_safe_triple(rng, 12);
    let mu = rng.random_range(0.01..2.0);
    let wrap = |v: Vec<f64>| params_of(vec![Tensor::vector(v).expect("nonempty")]);
    let (global, delta) = (wrap(global), wrap(delta));
    Instance::smooth(
        wrap(local),
        Box::new(move |p| reg_penalty(p, &global, &delta, mu)),
    )
}

fn check_prox_penalty(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let local = params_of(vec![random_tensor(rng, &[8])]);
    let global = params_of(vec![random_tensor(rng, &[8])]);
    let mu = rng.random_range(0.01..2.0);
    Instance::smooth(local, Box::new(move |p| prox_penalty(p, &global, mu)))
}

fn kd_check(rng: &mut ChaCha8Rng, task: TaskKind) -> Result<Instance> {
    let head = match task {
        TaskKind::Classification { classes } => Head::Classification(classes),
        TaskKind::Regression => Head::Regression,
    };
    let teacher = ModelSpec::Gin(GinConfig::new(2, 1, 3, ReadoutMode::Mean, head)?);
    let student = ModelSpec::Gin(GinConfig::new(2, 1, 2, random_readout(rng), head)?);
    let teacher_params = perturbed_init(rng, &teacher);
    let student_params = perturbed_init(rng, &student);
    let data = random_graph_set(rng, 4, 2, task);
    let alpha = rng.random_range(0.0..=1.0);
    let temperature = rng.random_range(0.5..12.0);
    let margin = forward_margin(&student, &student_params, &data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(Instance {
        params: student_params,
        loss: Box::new(move |p| {
            let personal = PersonalModel {
                model: student.clone(),
                params: p.clone(),
            };
            kd_local_step(&personal, &teacher, &teacher_params, &data, &idx, alpha, temperature)
        }),
        margin,
    })
}

fn check_kd_classification(rng: &mut ChaCha8Rng) -> Result<Instance> {
    kd_check(rng, TaskKind::Classification { classes: 3 })
}

fn check_kd_regression(rng: &mut ChaCha8Rng) -> Result<Instance> {
    kd_check(rng, TaskKind::Regression)
}

fn check_empty(_: &mut ChaCha8Rng) -> Result<Instance> {
    Instance::smooth(ParamVector::empty(), Box::new(|p| Ok((0.0, p.clone()))))
}
