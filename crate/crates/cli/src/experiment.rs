//! Builds client datasets from a config and drives the federation loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;

use fedsim_core::datagen::{
    apply_feature_shift, client_feature_offsets, idx_load, iid_partition, lda_partition,
    make_blobs, make_graph_tasks, Dataset, DirichletParams, Features, Partition, TaskKind,
    Targets,
};
use fedsim_core::fedcore::rng::{stream, Purpose};
use fedsim_core::fedcore::{
    client_update, Checkpoint, ClientState, GlobalState, LocalTraining, PersonalModel,
    RoundReport, Server, StrategyConfig,
};
use fedsim_core::io::write_atomic;
use fedsim_core::models::ModelSpec;
use fedsim_core::runlog::{
    evaluate_model, improvement_ratio, write_csv, ClientRef, IsolatedBaseline, Metric,
    MetricRecord, Split, IMP_RATIO_DEFINITION,
};
use fedsim_core::tensor::{ParamVector, Tensor};
use fedsim_core::{Error, Result};

use crate::config::{BaselineSource, DatasetConfig, ExperimentConfig, PartitionConfig};

pub const RUN_FORMAT: &str = "fedsim-run-1";

/// Every client's samples before the train/test split.
#[derive(Clone, Debug)]
pub struct ClientData {
    /// The pooled dataset and its partition, absent for rosters.
    pub pooled: Option<(Dataset, Partition)>,
    pub clients: Vec<Dataset>,
}

fn derived_seed(seed: u64, client: Option<usize>, purpose: Purpose) -> u64 {
    stream(seed, 0, client, purpose).next_u64()
}

pub fn build_client_data(config: &ExperimentConfig) -> Result<ClientData> {
    let seed = config.seed;
    let k = config.partition.num_clients();
    if let PartitionConfig::Roster {
        tasks,
        graphs_per_client,
    } = &config.partition
    {
        let clients = tasks
            .iter()
            .enumerate()
            .map(|(c, t)| {
                make_graph_tasks(t, *graphs_per_client, derived_seed(seed, Some(c), Purpose::Data))
            })
            .collect::<Result<Vec<_>>>()?;
        return Ok(ClientData {
            pooled: None,
            clients,
        });
    }

    let data_seed = derived_seed(seed, None, Purpose::Data);
    let full = match &config.dataset {
        DatasetConfig::Blobs { spec, samples } => make_blobs(spec, *samples, data_seed)?,
        DatasetConfig::Graphs { spec, samples } => make_graph_tasks(spec, *samples, data_seed)?,
        DatasetConfig::Idx {
            images,
            labels,
            features,
            classes,
        } => {
            let d = idx_load(images, labels)?;
            let Features::Vectors(x) = d.features() else {
                unreachable!("idx files hold vectors")
            };
            if x.cols() != *features {
                return Err(Error::config(
                    "dataset.features",
                    format!("images have {} features, config says {features}", x.cols()),
                ));
            }
            if let Some(&bad) = d.labels().and_then(|y| y.iter().find(|&&c| c >= *classes)) {
                return Err(Error::config(
                    "dataset.classes",
                    format!("label {bad} does not fit {classes} classes"),
                ));
            }
            let Targets::Classes(y) = d.targets().clone() else {
                unreachable!("idx labels are classes")
            };
            Dataset::new(
                d.features().clone(),
                Targets::Classes(y),
                TaskKind::Classification { classes: *classes },
            )?
        }
    };

    let partition = match &config.partition {
        PartitionConfig::Iid { clients } | PartitionConfig::FeatureShift { clients, .. } => {
            iid_partition(full.len(), *clients, seed)?
        }
        PartitionConfig::Dirichlet { clients, alpha } => {
            let labels = full.labels().ok_or_else(|| {
                Error::config("partition.kind", "dirichlet partitioning needs class labels")
            })?;
            lda_partition(labels, &DirichletParams::new(*alpha, *clients, seed)?)?
        }
        PartitionConfig::Roster { .. } => unreachable!("handled above"),
    };
    partition.validate(full.len())?;

    let mut clients = (0..k)
        .map(|c| full.subset(partition.client(c)))
        .collect::<Result<Vec<_>>>()?;
    if let PartitionConfig::FeatureShift { scale, .. } = &config.partition {
        let Features::Vectors(x) = full.features() else {
            return Err(Error::config("partition.kind", "feature_shift needs vector data"));
        };
        let offsets = client_feature_offsets(k, x.cols(), *scale, seed)?;
        for (d, off) in clients.iter_mut().zip(&offsets) {
            apply_feature_shift(d, off)?;
        }
    }
    Ok(ClientData {
        pooled: Some((full, partition)),
        clients,
    })
}

/// Shuffles a client's samples on its split stream and holds out
/// `round(fraction · n)` of them, keeping at least one on each side.
pub fn train_test_split(
    data: &Dataset,
    fraction: f64,
    seed: u64,
    client: usize,
) -> Result<(Dataset, Option<Dataset>)> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, 0, Some(client), Purpose::Split));
    let mut n_test = (fraction * n as f64).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_test = n_test.clamp(1, n - 1);
    } else {
        n_test = 0;
    }
    if n_test == 0 {
        return Ok((data.clone(), None));
    }
    let (test, train) = order.split_at(n_test);
    Ok((data.subset(train)?, Some(data.subset(test)?)))
}

/// Stacks datasets of one task into a single set.
pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
    let task = first.task();
    if parts.iter().any(|d| d.task() != task) {
        return Err(Error::Structural("cannot pool datasets of different tasks".into()));
    }
    let features = match first.features() {
        Features::Vectors(x) => {
            let cols = x.cols();
            let mut data = Vec::new();
            for d in parts {
                match d.features() {
                    Features::Vectors(x) if x.cols() == cols => data.extend_from_slice(x.data()),
                    _ => return Err(Error::Structural("mismatched feature layout".into())),
                }
            }
            let rows = data.len() / cols;
            Features::Vectors(Tensor::new(vec![rows, cols], data)?)
        }
        Features::Graphs(_) => {
            let mut graphs = Vec::new();
            for d in parts {
                match d.features() {
                    Features::Graphs(g) => graphs.extend(g.iter().cloned()),
                    _ => return Err(Error::Structural("mismatched feature layout".into())),
                }
            }
            Features::Graphs(graphs)
        }
    };
    let targets = match first.targets() {
        Targets::Classes(_) => Targets::Classes(
            parts
                .iter()
                .flat_map(|d| d.labels().unwrap_or_default().iter().copied())
                .collect(),
        ),
        Targets::Values(_) => Targets::Values(
            parts
                .iter()
                .flat_map(|d| match d.targets() {
                    Targets::Values(v) => v.clone(),
                    Targets::Classes(_) => Vec::new(),
                })
                .collect(),
        ),
    };
    Dataset::new(features, targets, task)
}

/// A federation ready to run: everything that can fail validation has
/// already been checked.
#[derive(Clone, Debug)]
pub struct Federation {
    pub config: ExperimentConfig,
    pub server: Server,
    pub clients: Vec<ClientState>,
    pub initial: GlobalState,
    /// Union of the client test sets, for homogeneous tasks.
    pub pooled_test: Option<Dataset>,
    pub loaded_baselines: Option<IsolatedBaseline>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    /// Personal-model rows; empty unless the strategy is FedKd.
    pub personal_records: Vec<MetricRecord>,
    pub reports: Vec<RoundReport>,
    pub initial_weights: ParamVector,
    pub final_state: GlobalState,
    pub baselines: Option<IsolatedBaseline>,
}

impl Federation {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        let data = build_client_data(&config)?;
        let seed = config.seed;
        let init = config
            .model
            .init(&mut stream(seed, 0, None, Purpose::Init));
        let personal_archs = match &config.strategy {
            StrategyConfig::FedKd { personal_archs, .. } => Some(personal_archs.clone()),
            _ => None,
        };
        let slices = config.output_slices();
        let mut clients = Vec::with_capacity(data.clients.len());
        for (k, d) in data.clients.iter().enumerate() {
            let (train, test) = train_test_split(d, config.test_fraction, seed, k)?;
            if train.is_empty() {
                return Err(Error::Partition(format!("client {k} has no training samples")));
            }
            let personal = personal_archs.as_ref().map(|archs| {
                let model = archs[k].clone();
                let params = model.init(&mut stream(seed, 0, Some(k), Purpose::Init));
                PersonalModel { model, params }
            });
            clients.push(ClientState {
                id: k,
                train,
                test,
                weights: init.clone(),
                personal,
                training: config.training,
                output_slice: slices[k],
            });
        }
        let pooled_test = if config.homogeneous() {
            let tests: Vec<&Dataset> = clients.iter().filter_map(|c| c.test.as_ref()).collect();
            if tests.is_empty() {
                None
            } else {
                Some(concat(&tests)?)
            }
        } else {
            None
        };
        let loaded_baselines = match &config.baselines {
            BaselineSource::File(path) => {
                let b = IsolatedBaseline::load(path)?;
                if let Some(&k) = b.values().keys().find(|&&k| k >= clients.len()) {
                    return Err(Error::config(
                        "baselines.file",
                        format!("baseline for client {k}, but only {} clients", clients.len()),
                    ));
                }
                Some(b)
            }
            _ => None,
        };
        let server = Server {
            model: config.model.clone(),
            strategy: config.strategy.clone(),
            scr: config.scr,
            seed,
        };
        let initial = GlobalState::new(init, &config.strategy);
        Ok(Federation {
            config,
            server,
            clients,
            initial,
            pooled_test,
            loaded_baselines,
        })
    }

    /// Architecture each client trains alone for its baseline: the personal
    /// one under FedKd, its view of the shared one otherwise.
    fn baseline_model(&self, c: &ClientState) -> Result<ModelSpec> {
        match &self.config.strategy {
            StrategyConfig::FedKd { personal_archs, .. } => Ok(personal_archs[c.id].clone()),
            _ => c.view(&self.config.model),
        }
    }

    /// Error of a model trained only on each client's own data. Clients
    /// without a test set, or whose isolated model is already perfect, get
    /// no baseline.
    pub fn isolated_baselines(&self, epochs: usize) -> Result<IsolatedBaseline> {
        let cfg = &self.config;
        let training = LocalTraining {
            epochs,
            ..cfg.training
        };
        let errors: Vec<Option<(usize, f64)>> = self
            .clients
            .par_iter()
            .map(|c| -> Result<Option<(usize, f64)>> {
                let Some(test) = &c.test else { return Ok(None) };
                let model = self.baseline_model(c)?;
                let mut rng = stream(cfg.seed, 0, Some(c.id), Purpose::Baseline);
                let init = model.init(&mut rng);
                let update = client_update(
                    c.id,
                    &model,
                    &c.train,
                    &training,
                    &init,
                    &init.zeros_like(),
                    &StrategyConfig::FedAvg,
                    &mut rng,
                )?;
                let err = evaluate_model(&model, &update.weights, test)?.error();
                if err > 0.0 && err.is_finite() {
                    Ok(Some((c.id, err)))
                } else {
                    warn!("client {}: isolated error {err} cannot serve as a baseline", c.id);
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        IsolatedBaseline::new(errors.into_iter().flatten().collect::<BTreeMap<_, _>>())
    }

    /// Runs every round, evaluating and checkpointing as it goes. Metrics
    /// gathered before a failing round are still written.
    pub fn run(mut self, out: &Path) -> Result<RunOutput> {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let baselines = match (&self.config.baselines, self.loaded_baselines.take()) {
            (_, Some(b)) => Some(b),
            (BaselineSource::Isolated { epochs }, None) => {
                info!("training isolated baselines for {epochs} epochs");
                Some(self.isolated_baselines(*epochs)?)
            }
            _ => None,
        };
        let cfg = self.config.clone();
        let digest = cfg.strategy.digest();
        let mut state = self.initial.clone();
        let mut out_run = RunOutput {
            records: Vec::new(),
            personal_records: Vec::new(),
            reports: Vec::new(),
            initial_weights: self.initial.weights.clone(),
            final_state: state.clone(),
            baselines: baselines.clone(),
        };
        let mut failure = None;
        for round in 1..=cfg.rounds {
            let (next, report) = match self.server.run_round(&state, &mut self.clients) {
                Ok(r) => r,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            state = next;
            Checkpoint {
                strategy_digest: digest.clone(),
                seed: cfg.seed,
                state: state.clone(),
            }
            .save(&out.join("checkpoint"))?;
            if round % cfg.eval_every == 0 || round == cfg.rounds {
                let (shared, personal) = self.evaluate(round, &state, &report, baselines.as_ref())?;
                if let Some(acc) = shared
                    .iter()
                    .find(|r| r.client == ClientRef::Global && r.metric == Metric::Acc)
                {
                    info!("round {round}: global test acc {:.4}", acc.value);
                } else {
                    info!("round {round} done");
                }
                out_run.records.extend(shared);
                out_run.personal_records.extend(personal);
            }
            out_run.reports.push(report);
        }
        out_run.final_state = state;
        self.write_artifacts(out, &out_run)?;
        match failure {
            Some(e) => Err(e),
            None => Ok(out_run),
        }
    }

    fn evaluate(
        &self,
        round: usize,
        state: &GlobalState,
        report: &RoundReport,
        baselines: Option<&IsolatedBaseline>,
    ) -> Result<(Vec<MetricRecord>, Vec<MetricRecord>)> {
        let model = &self.config.model;
        let per_client: Vec<(Vec<MetricRecord>, Vec<MetricRecord>)> = self
            .clients
            .par_iter()
            .map(|c| -> Result<_> {
                let Some(test) = &c.test else {
                    return Ok((Vec::new(), Vec::new()));
                };
                let who = ClientRef::Client(c.id);
                let ev = evaluate_model(&c.view(model)?, &state.weights, test)?;
                let mut shared = ev.records(round, who, Split::Test);
                let mut personal = Vec::new();
                let b = baselines.and_then(|b| b.get(c.id));
                if let Some(b) = b {
                    let ratio = improvement_ratio(b, ev.error())?;
                    shared.push(MetricRecord::new(round, who, Split::Test, Metric::ImpRatio, ratio));
                }
                if let Some(p) = &c.personal {
                    let pev = evaluate_model(&p.model, &p.params, test)?;
                    personal = pev.records(round, who, Split::Test);
                    if let Some(b) = b {
                        let ratio = improvement_ratio(b, pev.error())?;
                        personal.push(MetricRecord::new(
                            round,
                            who,
                            Split::Test,
                            Metric::ImpRatio,
                            ratio,
                        ));
                    }
                }
                Ok((shared, personal))
            })
            .collect::<Result<_>>()?;
        let (mut shared, mut personal) = (Vec::new(), Vec::new());
        for (s, p) in per_client {
            shared.extend(s);
            personal.extend(p);
        }

        if let Some(pooled) = &self.pooled_test {
            shared.extend(evaluate_model(model, &state.weights, pooled)?.records(
                round,
                ClientRef::Global,
                Split::Test,
            ));
        }
        if let Some(loss) = report.mean_train_loss() {
            shared.push(MetricRecord::new(
                round,
                ClientRef::Global,
                Split::Train,
                Metric::AvgLoss,
                loss,
            ));
        }
        for rows in [&mut shared, &mut personal] {
            if let Some(mean) = mean_imp_ratio(rows) {
                rows.push(MetricRecord::new(
                    round,
                    ClientRef::Global,
                    Split::Test,
                    Metric::ImpRatio,
                    mean,
                ));
            }
        }
        Ok((shared, personal))
    }

    fn write_artifacts(&self, out: &Path, run: &RunOutput) -> Result<()> {
        write_csv(&run.records, &out.join("metrics.csv"))?;
        if matches!(self.config.strategy, StrategyConfig::FedKd { .. }) {
            write_csv(&run.personal_records, &out.join("personal_metrics.csv"))?;
        }
        write_atomic(
            &out.join("config_resolved.txt"),
            self.config.canonical().as_bytes(),
        )?;
        let cfg = &self.config;
        let mut m = String::new();
        writeln!(m, "format={RUN_FORMAT}").expect("write to string");
        writeln!(m, "seed={}", cfg.seed).expect("write to string");
        writeln!(m, "config_digest={}", cfg.digest()).expect("write to string");
        writeln!(m, "strategy={}", cfg.strategy.name()).expect("write to string");
        writeln!(m, "strategy_digest={}", cfg.strategy.digest()).expect("write to string");
        writeln!(m, "rounds_requested={}", cfg.rounds).expect("write to string");
        writeln!(m, "rounds_completed={}", run.final_state.round).expect("write to string");
        writeln!(m, "imp_ratio_definition={IMP_RATIO_DEFINITION}").expect("write to string");
        write_atomic(&out.join("run_manifest.txt"), m.as_bytes())
    }
}

/// Mean of the per-client `imp_ratio` rows.
fn mean_imp_ratio(rows: &[MetricRecord]) -> Option<f64> {
    let values: Vec<f64> = rows
        .iter()
        .filter(|r| r.metric == Metric::ImpRatio && matches!(r.client, ClientRef::Client(_)))
        .map(|r| r.value)
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Validates, then runs. Errors from the first stage are validation errors.
pub fn simulate(config: ExperimentConfig) -> std::result::Result<RunOutput, Stage> {
    let out = config.output.clone();
    let fed = Federation::prepare(config).map_err(Stage::Validation)?;
    fed.run(&out).map_err(Stage::Runtime)
}

/// Where a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Stage {
    Validation(Error),
    Runtime(Error),
}

impl Stage {
    pub fn exit_code(&self) -> u8 {
        match self {
            Stage::Validation(_) => 1,
            Stage::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Stage::Validation(e) | Stage::Runtime(e) => e,
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error().fmt(f)
    }
}

/// Writes `partition.csv`, `label_histogram.csv` and, for vector data,
/// `dataset.csv`. Rosters get `roster.csv` instead of a partition.
pub fn write_partition(config: &ExperimentConfig, out: &Path) -> Result<ClientData> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = build_client_data(config)?;
    let mut hist = String::from("client,label,count\n");
    for (k, d) in data.clients.iter().enumerate() {
        if let (Some(y), TaskKind::Classification { classes }) = (d.labels(), d.task()) {
            let mut counts = vec![0usize; classes];
            y.iter().for_each(|&c| counts[c] += 1);
            for (c, n) in counts.iter().enumerate() {
                writeln!(hist, "{k},{c},{n}").expect("write to string");
            }
        }
    }
    write_atomic(&out.join("label_histogram.csv"), hist.as_bytes())?;
    match (&data.pooled, &config.partition) {
        (Some((full, partition)), _) => {
            let mut owner = vec![0usize; full.len()];
            for (k, idx) in partition.assignments().iter().enumerate() {
                idx.iter().for_each(|&i| owner[i] = k);
            }
            let mut text = String::from("index,client\n");
            for (i, k) in owner.iter().enumerate() {
                writeln!(text, "{i},{k}").expect("write to string");
            }
            write_atomic(&out.join("partition.csv"), text.as_bytes())?;
            if matches!(full.features(), Features::Vectors(_)) {
                full.write_csv(&out.join("dataset.csv"))?;
            }
        }
        (None, PartitionConfig::Roster { tasks, .. }) => {
            let mut text = String::from("client,rule,graphs\n");
            for (k, (t, d)) in tasks.iter().zip(&data.clients).enumerate() {
                writeln!(text, "{k},{},{}", t.rule, d.len()).expect("write to string");
            }
            write_atomic(&out.join("roster.csv"), text.as_bytes())?;
        }
        (None, _) => unreachable!("only rosters lack a pooled dataset"),
    }
    Ok(data)
}
