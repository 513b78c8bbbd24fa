//! Experiment configuration: a flat `dotted.key = value` text format.
//!
//! Lines are `key = value`; `#` starts a comment. Every key is optional and
//! falls back to a desk-scale default. Unknown and repeated keys are errors
//! naming the key, and every validation error names the offending field path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fedsim_core::datagen::{BlobSpec, GraphRule, GraphTaskSpec, TaskKind};
use fedsim_core::fedcore::{hex_digest, DeltaMode, LocalTraining, StrategyConfig};
use fedsim_core::models::{GinConfig, Head, LinearConfig, MlpConfig, ModelSpec, ReadoutMode};
use fedsim_core::{Error, Result};

/// Source of the samples before partitioning.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetConfig {
    Blobs { spec: BlobSpec, samples: usize },
    /// `features` and `classes` are checked against the files on load.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        features: usize,
        classes: usize,
    },
    /// One labelling rule for every client; ignored rules come from the roster.
    Graphs {
        spec: GraphTaskSpec,
        samples: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum PartitionConfig {
    Iid { clients: usize },
    Dirichlet { clients: usize, alpha: f64 },
    /// IID split plus a per-client offset added to every feature.
    FeatureShift { clients: usize, scale: f64 },
    /// One synthetic graph task per client.
    Roster {
        tasks: Vec<GraphTaskSpec>,
        graphs_per_client: usize,
    },
}

impl PartitionConfig {
    pub fn num_clients(&self) -> usize {
        match self {
            PartitionConfig::Iid { clients }
            | PartitionConfig::Dirichlet { clients, .. }
            | PartitionConfig::FeatureShift { clients, .. } => *clients,
            PartitionConfig::Roster { tasks, .. } => tasks.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineSource {
    None,
    File(PathBuf),
    /// Train every client's model alone for `epochs` epochs.
    Isolated { epochs: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub test_fraction: f64,
    pub partition: PartitionConfig,
    /// Shared architecture.
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub baselines: BaselineSource,
    pub rounds: usize,
    pub scr: f64,
    pub training: LocalTraining,
    pub eval_every: usize,
    /// Every resolved setting, defaults included, as canonical text.
    effective: BTreeMap<String, String>,
}

/// Splits `text` into `key → (value, line)` pairs.
fn parse_pairs(text: &str) -> Result<BTreeMap<String, (String, usize)>> {
    let mut pairs = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {line_no}"), "expected `key = value`")
        })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::config(format!("line {line_no}"), "malformed key"));
        }
        let value = value.trim().to_string();
        if pairs.insert(key.to_string(), (value, line_no)).is_some() {
            return Err(Error::config(key, format!("duplicate key on line {line_no}")));
        }
    }
    Ok(pairs)
}

/// Consumes keys from the parsed pairs, recording every effective value.
struct Reader {
    pairs: BTreeMap<String, (String, usize)>,
    effective: BTreeMap<String, String>,
}

impl Reader {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.pairs.remove(key).map(|(v, _)| v)
    }

    fn record(&mut self, key: &str, value: String) {
        self.effective.insert(key.to_string(), value);
    }

    fn parse<T: FromStr + ToString>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: ToString,
    {
        let value = match self.raw(key) {
            Some(text) => text
                .parse::<T>()
                .map_err(|e| Error::config(key, format!("cannot parse `{text}`: {}", e.to_string())))?,
            None => default,
        };
        self.record(key, value.to_string());
        Ok(value)
    }

    fn real(&mut self, key: &str, default: f64) -> Result<f64> {
        let v = self.parse(key, default)?;
        if !v.is_finite() {
            return Err(Error::config(key, "must be finite"));
        }
        self.record(key, format!("{v:?}"));
        Ok(v)
    }

    fn positive(&mut self, key: &str, default: usize) -> Result<usize> {
        let v = self.parse(key, default)?;
        if v == 0 {
            return Err(Error::config(key, "must be >= 1"));
        }
        Ok(v)
    }

    fn list<T: FromStr>(&mut self, key: &str, default: &str) -> Result<Vec<T>>
    where
        T::Err: ToString,
    {
        let text = self.raw(key).unwrap_or_else(|| default.to_string());
        self.record(key, text.clone());
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        text.split(',')
            .map(|s| {
                s.trim()
                    .parse::<T>()
                    .map_err(|e| Error::config(key, format!("cannot parse `{}`: {}", s.trim(), e.to_string())))
            })
            .collect()
    }

    fn path(&mut self, key: &str) -> Result<PathBuf> {
        let p = self
            .raw(key)
            .ok_or_else(|| Error::config(key, "is required"))?;
        self.record(key, p.clone());
        Ok(PathBuf::from(p))
    }

    fn has(&self, key: &str) -> bool {
        self.pairs.contains_key(key)
    }

    /// Keys under `prefix.` that are still unread.
    fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, String)> {
        let keys: Vec<String> = self
            .pairs
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let (v, _) = self.pairs.remove(&k).expect("key present");
                (k, v)
            })
            .collect()
    }
}

/// Expands `rule*count` items of a roster list.
fn parse_roster(key: &str, text: &str) -> Result<Vec<GraphRule>> {
    let mut rules = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, count) = match item.split_once('*') {
            Some((n, c)) => {
                let c: usize = c
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(key, format!("bad repeat count in `{item}`")))?;
                (n.trim(), c)
            }
            None => (item, 1),
        };
        let rule: GraphRule = name.parse().map_err(|e: String| Error::config(key, e))?;
        rules.extend(std::iter::repeat_n(rule, count));
    }
    if rules.is_empty() {
        return Err(Error::config(key, "roster needs at least one client"));
    }
    Ok(rules)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Reader {
            pairs: parse_pairs(text)?,
            effective: BTreeMap::new(),
        };

        let seed: u64 = r.parse("seed", 0)?;
        let output = PathBuf::from(r.parse("output", "out".to_string())?);

        let dataset_kind: String = r.parse("dataset.kind", "blobs".to_string())?;
        let partition_kind: String = r.parse("partition.kind", "dirichlet".to_string())?;
        let is_roster = partition_kind == "roster";

        let graph_shape = |r: &mut Reader, rule: GraphRule| -> Result<GraphTaskSpec> {
            let spec = GraphTaskSpec {
                rule,
                min_nodes: r.positive("dataset.min_nodes", 3)?,
                max_nodes: r.positive("dataset.max_nodes", 8)?,
                features: r.positive("dataset.features", 2)?,
            };
            spec.validate()?;
            Ok(spec)
        };

        let dataset = match dataset_kind.as_str() {
            "blobs" => {
                let spec = BlobSpec {
                    classes: r.parse("dataset.classes", 4)?,
                    features: r.positive("dataset.features", 16)?,
                    margin: r.real("dataset.margin", 2.0)?,
                };
                spec.validate()?;
                let samples = r.positive("dataset.samples", 2000)?;
                if samples < spec.classes {
                    return Err(Error::config("dataset.samples", "fewer samples than classes"));
                }
                DatasetConfig::Blobs { spec, samples }
            }
            "idx" => DatasetConfig::Idx {
                images: r.path("dataset.images")?,
                labels: r.path("dataset.labels")?,
                features: r.positive("dataset.features", 28 * 28)?,
                classes: r.positive("dataset.classes", 10)?,
            },
            "graphs" => {
                let rule = if is_roster {
                    GraphRule::TrianglePresence
                } else {
                    let text: String = r.parse("dataset.rule", "triangle_presence".to_string())?;
                    text.parse().map_err(|e: String| Error::config("dataset.rule", e))?
                };
                let spec = graph_shape(&mut r, rule)?;
                let samples = if is_roster {
                    0
                } else {
                    r.positive("dataset.samples", 1000)?
                };
                DatasetConfig::Graphs { spec, samples }
            }
            other => {
                return Err(Error::config(
                    "dataset.kind",
                    format!("unknown kind `{other}` (blobs|idx|graphs)"),
                ))
            }
        };
        let test_fraction = r.real("dataset.test_fraction", 0.2)?;
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config("dataset.test_fraction", "must lie in [0, 1)"));
        }

        let partition = match partition_kind.as_str() {
            "iid" => PartitionConfig::Iid {
                clients: r.positive("partition.clients", 20)?,
            },
            "dirichlet" => {
                let clients = r.positive("partition.clients", 20)?;
                let alpha = r.real("partition.alpha", 0.15)?;
                if !(alpha > 0.0) {
                    return Err(Error::config(
                        "partition.alpha",
                        format!("must be > 0, got {alpha}"),
                    ));
                }
                if matches!(dataset, DatasetConfig::Graphs { spec, .. } if spec.rule.task() == TaskKind::Regression)
                {
                    return Err(Error::config(
                        "partition.kind",
                        "dirichlet partitioning needs class labels",
                    ));
                }
                PartitionConfig::Dirichlet { clients, alpha }
            }
            "feature_shift" => {
                let clients = r.positive("partition.clients", 20)?;
                let scale = r.real("partition.shift_scale", 1.0)?;
                if !(scale > 0.0) {
                    return Err(Error::config("partition.shift_scale", "must be > 0"));
                }
                if matches!(dataset, DatasetConfig::Graphs { .. }) {
                    return Err(Error::config(
                        "partition.kind",
                        "feature_shift applies to vector datasets",
                    ));
                }
                PartitionConfig::FeatureShift { clients, scale }
            }
            "roster" => {
                let DatasetConfig::Graphs { spec, .. } = &dataset else {
                    return Err(Error::config(
                        "partition.kind",
                        "roster partitioning needs dataset.kind = graphs",
                    ));
                };
                let text: String = r.parse(
                    "roster.rules",
                    "triangle_presence*8,count_nodes*3,max_feature*2".to_string(),
                )?;
                let tasks = parse_roster("roster.rules", &text)?
                    .into_iter()
                    .map(|rule| {
                        let t = GraphTaskSpec { rule, ..*spec };
                        t.validate().map(|_| t)
                    })
                    .collect::<Result<Vec<_>>>()?;
                PartitionConfig::Roster {
                    tasks,
                    graphs_per_client: r.positive("roster.graphs_per_client", 60)?,
                }
            }
            other => {
                return Err(Error::config(
                    "partition.kind",
                    format!("unknown kind `{other}` (iid|dirichlet|feature_shift|roster)"),
                ))
            }
        };

        let model = read_model(&mut r, &dataset, &partition)?;
        let strategy = read_strategy(&mut r, &model, &partition)?;

        let file = r.raw("baselines.file");
        let isolated = r.parse("baselines.isolated", false)?;
        let graphs = matches!(dataset, DatasetConfig::Graphs { .. });
        let rounds = r.positive("train.rounds", 100)?;
        let scr = r.real("train.scr", 0.5)?;
        if !(scr > 0.0 && scr <= 1.0) {
            return Err(Error::config("train.scr", format!("must lie in (0, 1], got {scr}")));
        }
        let training = LocalTraining {
            epochs: r.positive("train.local_epochs", 1)?,
            lr: r.real("train.lr", 0.1)?,
            batch_size: r.positive("train.batch_size", 32)?,
            clip_norm: match r.raw("train.clip_norm") {
                None if graphs => Some(1.0),
                None => None,
                Some(text) if text == "none" => None,
                Some(text) => Some(text.parse::<f64>().map_err(|_| {
                    Error::config("train.clip_norm", format!("cannot parse `{text}`"))
                })?),
            },
        };
        r.record(
            "train.clip_norm",
            training.clip_norm.map_or("none".into(), |c| format!("{c:?}")),
        );
        training.validate()?;
        let default_eval = if graphs { 5 } else { 10 };
        let eval_every = r.positive("train.eval_every", default_eval)?;

        // Default isolated budget: the local epochs an average client runs.
        let participations = ((rounds as f64 * scr).round() as usize).max(1);
        let baselines = match (file, isolated) {
            (Some(_), true) => {
                return Err(Error::config(
                    "baselines.file",
                    "conflicts with baselines.isolated = true",
                ))
            }
            (Some(p), false) => {
                r.record("baselines.file", p.clone());
                BaselineSource::File(PathBuf::from(p))
            }
            (None, true) => BaselineSource::Isolated {
                epochs: r.positive("baselines.epochs", participations * training.epochs)?,
            },
            (None, false) => BaselineSource::None,
        };

        if let Some((key, (_, line))) = r.pairs.iter().next() {
            return Err(Error::config(key.clone(), format!("unknown key on line {line}")));
        }

        Ok(ExperimentConfig {
            seed,
            output,
            dataset,
            test_fraction,
            partition,
            model,
            strategy,
            baselines,
            rounds,
            scr,
            training,
            eval_every,
            effective: r.effective,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.effective.insert("seed".into(), seed.to_string());
        self
    }

    pub fn with_output(mut self, output: PathBuf) -> Self {
        self.effective
            .insert("output".into(), output.display().to_string());
        self.output = output;
        self
    }

    /// Sorted `key=value` lines of every resolved setting. The output
    /// directory is excluded so that relocated runs share a digest.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.effective.iter().filter(|(k, _)| k.as_str() != "output") {
            writeln!(s, "{k}={v}").expect("write to string");
        }
        s
    }

    pub fn digest(&self) -> String {
        hex_digest(self.canonical().as_bytes())
    }

    /// Task of client `k`.
    pub fn client_task(&self, k: usize) -> Option<TaskKind> {
        match &self.partition {
            PartitionConfig::Roster { tasks, .. } => tasks.get(k).map(|t| t.rule.task()),
            _ => None,
        }
    }

    /// Each client's slice of the shared model's outputs, for mixed rosters.
    pub fn output_slices(&self) -> Vec<Option<(usize, usize)>> {
        let k = self.partition.num_clients();
        match &self.partition {
            PartitionConfig::Roster { tasks, .. } => match roster_layout(tasks) {
                Some((slices, _)) => slices.into_iter().map(Some).collect(),
                None => vec![None; k],
            },
            _ => vec![None; k],
        }
    }

    /// Whether every client solves the same task, so that a pooled test set
    /// is meaningful.
    pub fn homogeneous(&self) -> bool {
        match &self.partition {
            PartitionConfig::Roster { tasks, .. } => {
                tasks.iter().all(|t| t.rule == tasks[0].rule)
            }
            _ => true,
        }
    }
}

fn read_readout(r: &mut Reader, key: &str, default: ReadoutMode) -> Result<ReadoutMode> {
    let text: String = r.parse(key, default.to_string())?;
    text.parse().map_err(|e: String| Error::config(key, e))
}

/// Output columns of a shared multi-task head for a roster with more than
/// one rule: each rule, in order of first appearance, gets as many columns as
/// its task needs. Returns every client's `(start, len)` and the total width.
pub fn roster_layout(tasks: &[GraphTaskSpec]) -> Option<(Vec<(usize, usize)>, usize)> {
    let mut placed: Vec<(GraphRule, usize, usize)> = Vec::new();
    let mut width = 0;
    let slices = tasks
        .iter()
        .map(|t| {
            if let Some(&(_, start, len)) = placed.iter().find(|(r, ..)| *r == t.rule) {
                return (start, len);
            }
            let len = gin_head(t.rule.task()).outputs();
            placed.push((t.rule, width, len));
            width += len;
            (width - len, len)
        })
        .collect();
    (placed.len() > 1).then_some((slices, width))
}

/// Head of a GIN solving `task`.
fn gin_head(task: TaskKind) -> Head {
    match task {
        TaskKind::Classification { classes } => Head::Classification(classes),
        TaskKind::Regression => Head::Regression,
    }
}

fn read_model(
    r: &mut Reader,
    dataset: &DatasetConfig,
    partition: &PartitionConfig,
) -> Result<ModelSpec> {
    let graphs = matches!(dataset, DatasetConfig::Graphs { .. });
    let kind: String = r.parse("model.kind", if graphs { "gin" } else { "mlp" }.to_string())?;
    let to_model = |e: Error| match e {
        Error::Config { field, message } if field.starts_with("model") => {
            Error::Config { field, message }
        }
        other => Error::config("model", other.to_string()),
    };
    match (kind.as_str(), dataset) {
        ("mlp" | "linear", DatasetConfig::Graphs { .. }) => Err(Error::config(
            "model.kind",
            format!("`{kind}` cannot consume graph samples; use gin"),
        )),
        ("gin", DatasetConfig::Blobs { .. } | DatasetConfig::Idx { .. }) => Err(Error::config(
            "model.kind",
            "gin needs dataset.kind = graphs",
        )),
        ("mlp", _) => {
            let (input, classes) = vector_shape(dataset);
            let hidden: Vec<usize> = r.list("model.hidden", "64,64")?;
            MlpConfig::new(input, hidden, classes)
                .map(ModelSpec::Mlp)
                .map_err(to_model)
        }
        ("linear", _) => {
            let (input, classes) = vector_shape(dataset);
            LinearConfig::new(input, classes, true)
                .map(ModelSpec::Linear)
                .map_err(to_model)
        }
        ("gin", DatasetConfig::Graphs { spec, .. }) => {
            let head = match partition {
                PartitionConfig::Roster { tasks, .. } => match roster_layout(tasks) {
                    Some((_, width)) => Head::MultiTask(width),
                    None => gin_head(tasks[0].rule.task()),
                },
                _ => gin_head(spec.rule.task()),
            };
            let layers = r.positive("model.layers", 2)?;
            let width = r.positive("model.width", 8)?;
            let readout = read_readout(r, "model.readout", ReadoutMode::Mix)?;
            let multiplier = r.positive("model.head_width_multiplier", 1)?;
            GinConfig::new(spec.features, layers, width, readout, head)
                .and_then(|c| c.with_head_width_multiplier(multiplier))
                .map(ModelSpec::Gin)
                .map_err(to_model)
        }
        (other, _) => Err(Error::config(
            "model.kind",
            format!("unknown kind `{other}` (mlp|linear|gin)"),
        )),
    }
}

/// Input width and class count of a vector dataset.
fn vector_shape(dataset: &DatasetConfig) -> (usize, usize) {
    match dataset {
        DatasetConfig::Blobs { spec, .. } => (spec.features, spec.classes),
        DatasetConfig::Idx {
            features, classes, ..
        } => (*features, *classes),
        DatasetConfig::Graphs { spec, .. } => (spec.features, 2),
    }
}

fn read_strategy(
    r: &mut Reader,
    model: &ModelSpec,
    partition: &PartitionConfig,
) -> Result<StrategyConfig> {
    let kind: String = r.parse("strategy.kind", "fedavg".to_string())?;
    let kd = kind == "fedkd";
    let base_kind = if kd {
        r.parse("strategy.fedkd.inner", "fedavg".to_string())?
    } else {
        kind.clone()
    };
    let base = match base_kind.as_str() {
        "fedavg" => StrategyConfig::FedAvg,
        "fedprox" => StrategyConfig::fedprox(r.real("strategy.fedprox.mu", 0.01)?)?,
        "fedr" => {
            let mu = r.real("strategy.fedr.mu", 0.1)?;
            let option: String = r.parse("strategy.fedr.option", "II".to_string())?;
            let mode = match option.as_str() {
                "I" => DeltaMode::option_i(r.list("strategy.fedr.coeffs", "0.2,0.3,0.5")?)
                    .map_err(|e| Error::config("strategy.fedr.coeffs", e.to_string()))?,
                "II" => DeltaMode::option_ii(r.real("strategy.fedr.a", 0.5)?)
                    .map_err(|e| Error::config("strategy.fedr.a", e.to_string()))?,
                other => {
                    return Err(Error::config(
                        "strategy.fedr.option",
                        format!("unknown option `{other}` (I|II)"),
                    ))
                }
            };
            let mut overrides = BTreeMap::new();
            for (key, value) in r.take_prefixed("strategy.fedr.client_mu.") {
                let k: usize = key["strategy.fedr.client_mu.".len()..]
                    .parse()
                    .map_err(|_| Error::config(key.as_str(), "client id must be an integer"))?;
                if k >= partition.num_clients() {
                    return Err(Error::config(key.as_str(), "no such client"));
                }
                let mu: f64 = value
                    .parse()
                    .map_err(|_| Error::config(key.as_str(), format!("cannot parse `{value}`")))?;
                r.record(&key, format!("{mu:?}"));
                overrides.insert(k, mu);
            }
            let s = StrategyConfig::fedr(mu, mode)?;
            if overrides.is_empty() {
                s
            } else {
                s.with_client_mu(overrides)?
            }
        }
        "fedkd" if kd => {
            return Err(Error::config("strategy.fedkd.inner", "cannot nest fedkd"))
        }
        other => {
            let field = if kd { "strategy.fedkd.inner" } else { "strategy.kind" };
            return Err(Error::config(
                field,
                format!("unknown strategy `{other}` (fedavg|fedprox|fedr|fedkd)"),
            ));
        }
    };
    if !kd {
        if r.has("strategy.fedkd.alpha") || r.has("strategy.fedkd.temperature") {
            return Err(Error::config("strategy.fedkd", "set only when strategy.kind = fedkd"));
        }
        return Ok(base);
    }
    let alpha = r.real("strategy.fedkd.alpha", 0.5)?;
    let temperature = r.real("strategy.fedkd.temperature", 10.0)?;
    let personal = personal_archs(r, model, partition)?;
    StrategyConfig::fedkd(base, alpha, temperature, personal)
}

/// Personal model of each client: the shared family with a head fitted to
/// the client's own task. GIN shape keys under `strategy.fedkd.personal.`
/// override the shared ones.
fn personal_archs(
    r: &mut Reader,
    model: &ModelSpec,
    partition: &PartitionConfig,
) -> Result<Vec<ModelSpec>> {
    let k = partition.num_clients();
    let ModelSpec::Gin(shared) = model else {
        return Ok(vec![model.clone(); k]);
    };
    let layers = r.positive("strategy.fedkd.personal.layers", shared.num_layers)?;
    let width = r.positive("strategy.fedkd.personal.width", shared.width)?;
    let readout = read_readout(r, "strategy.fedkd.personal.readout", shared.readout)?;
    let tasks: Vec<TaskKind> = match partition {
        PartitionConfig::Roster { tasks, .. } => tasks.iter().map(|t| t.rule.task()).collect(),
        _ => {
            let task = match shared.head {
                Head::Classification(c) => TaskKind::Classification { classes: c },
                Head::Regression => TaskKind::Regression,
                Head::MultiTask(_) => unreachable!("multi-task heads come from rosters"),
            };
            vec![task; k]
        }
    };
    tasks
        .into_iter()
        .map(|task| {
            GinConfig::new(shared.input_dim, layers, width, readout, gin_head(task))
                .and_then(|c| c.with_head_width_multiplier(shared.head_width_multiplier))
                .map(ModelSpec::Gin)
                .map_err(|e| Error::config("strategy.fedkd.personal", e.to_string()))
        })
        .collect()
}
