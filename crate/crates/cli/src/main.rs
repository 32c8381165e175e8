use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use infodist::centrality_selector::{distill, parse_selection_tsv, Scalarization, SelectionMetric};
use infodist::community_optimizer::{detect_communities, OptimizerConfig};
use infodist::distilled_trainer::{train_on_ids, Classifier, LossConfig, NegativeHinge};
use infodist::embedding_io::{generate_fixture, write_embeddings, EmbeddingSet, FixtureSpec};
use infodist::eval_metrics::EvalReport;
use infodist::graph_builder::{build_class_graph, GraphConfig};
use infodist::map_equation::FlowParams;
use infodist::pipeline::{compare, read_pool, run, PipelineConfig, SelectionMode};

macro_rules! say {
    ($($arg:tt)*) => {
        writeln!(io::stdout().lock(), $($arg)*)?
    };
}

#[derive(Parser)]
#[command(
    name = "infodist",
    version,
    about = "Community-based dataset distillation over embedding pools"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic embedding pool.
    GenFixture {
        #[command(flatten)]
        fixture: FixtureArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate an embedding file (binary or CSV) and write it in binary form.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        l2_normalize: bool,
    },
    /// Build the graph of one class and dump its edges.
    Graph {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        class: usize,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect communities in one class graph, logging every pass.
    Detect {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        class: usize,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        teleport: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the partition as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select the distilled subset of every class.
    Select {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long)]
        teleport: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Metric::Modular)]
        metric: Metric,
        #[arg(long, value_enum, default_value_t = Scalar::L2)]
        scalarization: Scalar,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        /// Selection list; the key-value sidecar goes next to it with a `.toml` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a classifier on the items of a selection list.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[command(flatten)]
        loss: LossArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a classifier on an embedding file.
    Eval {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Full InfoDist runs over derived seeds.
    Pipeline(RunArgs),
    /// The same runs with uniformly random selection.
    Baseline {
        #[command(flatten)]
        run: RunArgs,
        /// Also run InfoDist and report per-seed accuracy deltas.
        #[arg(long)]
        paired: bool,
    },
}

#[derive(Args, Clone)]
struct FixtureArgs {
    #[arg(long, default_value_t = 0)]
    fixture_seed: u64,
    #[arg(long, default_value_t = 9)]
    classes: usize,
    #[arg(long, default_value_t = 2)]
    clusters: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
}

impl FixtureArgs {
    fn spec(&self) -> FixtureSpec {
        FixtureSpec {
            seed: self.fixture_seed,
            num_classes: self.classes,
            clusters_per_class: self.clusters,
            dim: self.dim,
            count_per_class: self.count,
            separation: self.separation,
            noise_sigma: self.sigma,
        }
    }
}

#[derive(Args, Clone, Default)]
struct GraphArgs {
    /// Softmax weight threshold.
    #[arg(long, conflicts_with = "knn")]
    eta: Option<f64>,
    /// Neighbors per node instead of a threshold.
    #[arg(long)]
    knn: Option<usize>,
}

impl GraphArgs {
    fn config(&self) -> Option<GraphConfig> {
        match (self.eta, self.knn) {
            (Some(eta), _) => Some(GraphConfig::threshold(eta)),
            (_, Some(k)) => Some(GraphConfig::knn(k)),
            _ => None,
        }
    }

    fn config_or_default(&self) -> GraphConfig {
        self.config().unwrap_or_default()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Modular,
    Enter,
    Exit,
}

impl From<Metric> for SelectionMetric {
    fn from(m: Metric) -> Self {
        match m {
            Metric::Modular => SelectionMetric::ModularCentrality,
            Metric::Enter => SelectionMetric::EnterFlow,
            Metric::Exit => SelectionMetric::ExitFlow,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scalar {
    L2,
    Sum,
}

impl From<Scalar> for Scalarization {
    fn from(s: Scalar) -> Self {
        match s {
            Scalar::L2 => Scalarization::L2,
            Scalar::Sum => Scalarization::Sum,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Hinge {
    AsPrinted,
    AgainstBn,
}

impl From<Hinge> for NegativeHinge {
    fn from(h: Hinge) -> Self {
        match h {
            Hinge::AsPrinted => NegativeHinge::AsPrinted,
            Hinge::AgainstBn => NegativeHinge::AgainstBn,
        }
    }
}

#[derive(Args, Clone, Default)]
struct LossArgs {
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    neg_hinge: Option<Hinge>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config file; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "fixture")]
    input: Option<PathBuf>,
    /// Use a generated fixture (see the fixture flags) as the pool.
    #[arg(long)]
    fixture: bool,
    #[command(flatten)]
    fixture_args: FixtureArgs,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    teleport: Option<f64>,
    #[arg(long, value_enum)]
    metric: Option<Metric>,
    #[arg(long, value_enum)]
    scalarization: Option<Scalar>,
    #[arg(long)]
    per_class: Option<usize>,
    #[command(flatten)]
    loss: LossArgs,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    l2_normalize: bool,
    #[arg(long)]
    parallel_runs: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Print only the JSON summary.
    #[arg(long)]
    json: bool,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => {
                PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(input) = &self.input {
            c.input = Some(input.clone());
            c.fixture = None;
        }
        if self.fixture {
            c.fixture = Some(self.fixture_args.spec());
            c.input = None;
        }
        if let Some(g) = self.graph.config() {
            c.graph = g;
        }
        override_with(&mut c.teleport, self.teleport);
        override_with(&mut c.metric, self.metric.map(Into::into));
        override_with(&mut c.scalarization, self.scalarization.map(Into::into));
        override_with(&mut c.per_class, self.per_class);
        override_with(&mut c.runs, self.runs);
        override_with(&mut c.seed, self.seed);
        override_with(&mut c.test_fraction, self.test_fraction);
        c.l2_normalize |= self.l2_normalize;
        c.parallel_runs |= self.parallel_runs;
        if let Some(dir) = &self.output_dir {
            c.output_dir = Some(dir.clone());
        }
        self.loss.apply(&mut c.loss);
        c.validate()?;
        Ok(c)
    }
}

impl LossArgs {
    fn apply(&self, loss: &mut LossConfig) {
        override_with(&mut loss.rho, self.rho);
        override_with(&mut loss.tau, self.tau);
        override_with(&mut loss.epochs, self.epochs);
        override_with(&mut loss.learning_rate, self.learning_rate);
        override_with(&mut loss.batch_size, self.batch_size);
        override_with(&mut loss.negative_hinge, self.neg_hinge.map(Into::into));
    }
}

fn override_with<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => Ok(io::stdout().lock().write_all(text.as_bytes())?),
    }
}

fn load(path: &Path) -> Result<EmbeddingSet> {
    read_pool(path).with_context(|| format!("reading {}", path.display()))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenFixture { fixture, out } => {
            let set = generate_fixture(&fixture.spec())?;
            write_embeddings(&set, &out)?;
            say!(
                "wrote {} items, dim {}, {} classes to {}",
                set.len(),
                set.dim,
                set.num_classes,
                out.display()
            );
        }
        Command::Ingest {
            input,
            out,
            l2_normalize,
        } => {
            let mut set = load(&input)?;
            if l2_normalize {
                set = set.l2_normalized();
            }
            say!(
                "items {} dim {} classes {}",
                set.len(),
                set.dim,
                set.num_classes
            );
            for (label, size) in set.class_sizes().iter().enumerate() {
                say!("class {label} items {size}");
            }
            if let Some(out) = out {
                write_embeddings(&set, &out)?;
            }
        }
        Command::Graph {
            input,
            class,
            graph,
            out,
        } => {
            let set = load(&input)?;
            let g = build_class_graph(&set, class, &graph.config_or_default())?;
            emit(out.as_deref(), &g.dump())?;
        }
        Command::Detect {
            input,
            class,
            graph,
            teleport,
            seed,
            out,
        } => {
            let set = load(&input)?;
            let g = build_class_graph(&set, class, &graph.config_or_default())?;
            let mut flow = FlowParams::default();
            override_with(&mut flow.teleport, teleport);
            let optimizer = OptimizerConfig {
                seed,
                ..OptimizerConfig::default()
            }
            .for_class(class);
            let detection = detect_communities(&g, &flow, &optimizer)?;
            for pass in &detection.passes {
                say!("{pass}");
            }
            say!(
                "modules {} codelength {:.12}",
                detection.partition.num_modules(),
                detection.codelength
            );
            if let Some(out) = out {
                fs::write(&out, serde_json::to_string_pretty(&detection.partition)?)?;
            }
        }
        Command::Select {
            input,
            graph,
            teleport,
            seed,
            metric,
            scalarization,
            per_class,
            out,
        } => {
            let pool = load(&input)?;
            let mut config = PipelineConfig {
                graph: graph.config_or_default(),
                metric: metric.into(),
                scalarization: scalarization.into(),
                per_class,
                ..PipelineConfig::default()
            };
            override_with(&mut config.teleport, teleport);
            let selection = distill(&pool, &config.distill_config(seed))?;
            selection.write(&out, out.with_extension("toml"))?;
            for c in &selection.classes {
                say!(
                    "class {} communities {} edges {} codelength {:.6}",
                    c.class_label,
                    c.community_sizes.len(),
                    c.edges,
                    c.codelength
                );
            }
        }
        Command::Train {
            input,
            selection,
            loss,
            seed,
            out,
        } => {
            let pool = load(&input)?;
            let text = fs::read_to_string(&selection)
                .with_context(|| format!("reading {}", selection.display()))?;
            let ids: Vec<usize> = parse_selection_tsv(&text)?
                .into_iter()
                .map(|(_, id)| id)
                .collect();
            let mut config = PipelineConfig::default().loss_config(seed);
            loss.apply(&mut config);
            let model = train_on_ids(&pool, &ids, &config)?;
            model.write(&out)?;
            say!("trained on {} items, wrote {}", ids.len(), out.display());
        }
        Command::Eval { input, model, json } => {
            let set = load(&input)?;
            let model = Classifier::read(&model)?;
            if model.dim != set.dim || model.num_classes != set.num_classes {
                bail!(
                    "model expects dim {} with {} classes, data has dim {} with {}",
                    model.dim,
                    model.num_classes,
                    set.dim,
                    set.num_classes
                );
            }
            let report = EvalReport::from_probabilities(
                &model.predict_proba(&set),
                &set.labels(),
                set.num_classes,
            )?;
            if json {
                say!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                io::stdout()
                    .lock()
                    .write_all(report.to_key_value().as_bytes())?;
            }
        }
        Command::Pipeline(args) => {
            let summary = run(&args.config()?, SelectionMode::InfoDist)?;
            if !args.json {
                say!("{}", summary.to_table());
            }
            say!("{}", summary.to_json()?);
        }
        Command::Baseline { run: args, paired } => {
            let config = args.config()?;
            if paired {
                let comparison = compare(&config)?;
                if !args.json {
                    say!("{}", comparison.to_table());
                }
                say!("{}", comparison.to_json()?);
            } else {
                let summary = run(&config, SelectionMode::Random)?;
                if !args.json {
                    say!("{}", summary.to_table());
                }
                say!("{}", summary.to_json()?);
            }
        }
    }
    Ok(())
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain()
        .filter_map(|c| c.downcast_ref::<io::Error>())
        .any(|io| io.kind() == io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
