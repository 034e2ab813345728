use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lmbench_core::datasets::{ingest, split_counts, DatasetIndex};
use lmbench_core::eval::{evaluate_net, write_per_image_csv, EvalSelection, MetricsReport};
use lmbench_core::geometry::Split;
use lmbench_core::models::{Architecture, BuildOptions, EncoderKind, LandmarkNet, Origin, Pretrained};
use lmbench_core::train::{crossval, run_id, train_on_index, RunDir};
use lmbench_core::transfer::{run_chain, ChainOptions, ChainSpec};
use log::{info, warn};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::report::{self, CheckStatus, Template};
use crate::store::{unix_now, ResultRow, ResultsStore, RunKind};

/// Loaded configuration plus the flags shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub force: bool,
}

impl Context {
    pub fn new(config: ExperimentConfig, force: bool) -> Result<Self, CliError> {
        config.validate()?;
        let config_hash = config.hash()?;
        Ok(Self {
            config,
            config_hash,
            force,
        })
    }

    pub fn out(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn store(&self) -> ResultsStore {
        ResultsStore::in_dir(self.out())
    }

    fn build_options(&self) -> BuildOptions {
        BuildOptions::default().seed(self.config.seed)
    }

    /// Refuses a rerun of an identical config unless `--force` was given.
    fn guard(&self, kind: RunKind) -> Result<(), CliError> {
        if self.store().has_config(kind, &self.config_hash)? {
            if self.force {
                warn!("config {} already ran; rerunning because of --force", &self.config_hash[..10]);
            } else {
                return Err(CliError::validation(format!(
                    "a {kind:?} run with config hash {} is already recorded in {}; pass --force to rerun",
                    self.config_hash,
                    self.store().path().display()
                )));
            }
        }
        Ok(())
    }

    fn row(
        &self,
        run_id: String,
        kind: RunKind,
        dataset: &str,
        net: &LandmarkNet,
        metrics: MetricsReport,
        started: u64,
    ) -> ResultRow {
        let spec = net.spec();
        ResultRow {
            run_id,
            kind,
            chain_start: None,
            chain: None,
            dataset: dataset.to_string(),
            architecture: spec.architecture,
            encoder: spec.encoder,
            width_divisor: spec.width_divisor,
            imagenet_init: net.origin() == Origin::Imagenet,
            config_hash: self.config_hash.clone(),
            eval_space: self.config.eval.space,
            metrics,
            started_unix: started,
            finished_unix: unix_now(),
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("create {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(format!("write {}", path.display()), e))
}

fn split_summary(index: &DatasetIndex) -> String {
    let counts = split_counts(index);
    format!(
        "{} train / {} test",
        counts.get(&Split::Train).copied().unwrap_or(0),
        counts.get(&Split::Test).copied().unwrap_or(0)
    )
}

/// Ingests a dataset root and writes `<out>/<name>.index.json`.
pub fn prepare(ctx: &Context, dataset: &str, root: Option<&Path>) -> Result<PathBuf, CliError> {
    let spec = ctx.config.dataset_spec(dataset)?;
    let root = match root {
        Some(r) => r.to_path_buf(),
        None => ctx.config.dataset_root(dataset)?,
    };
    let index = ingest(&root, &spec)?;
    let path = ctx.config.index_path(dataset);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("create {}", dir.display()), e))?;
    }
    index.save(&path)?;
    println!("{dataset}: {} -> {}", split_summary(&index), path.display());
    Ok(path)
}

fn score(ctx: &Context, net: &LandmarkNet, index: &DatasetIndex, run: &RunDir) -> Result<MetricsReport, CliError> {
    let evaluation = evaluate_net(net, index, &EvalSelection::Test, &ctx.config.eval)?;
    run.write_json("metrics.test.json", &evaluation.report)?;
    write_per_image_csv(&run.path.join("per_image.test.csv"), &evaluation)?;
    Ok(evaluation.report)
}

/// Trains on the target's training split and scores the test split.
pub fn train(ctx: &Context) -> Result<ResultRow, CliError> {
    let cfg = &ctx.config;
    let target = cfg.target()?;
    ctx.guard(RunKind::Train)?;
    let index = cfg.load_index(target)?;
    let spec = cfg.model.spec(index.spec().landmark_count);
    spec.validate()?;
    let started = unix_now();
    let id = ctx.store().free_run_id(&run_id(target, &spec, &ctx.config_hash, cfg.seed))?;
    let run = RunDir::create(ctx.out(), &id, target, Some(ctx.config_hash.clone()))?;
    run.write_json("config.json", cfg)?;
    let mut net = LandmarkNet::build(&spec, &ctx.build_options())?;
    let fit = train_on_index(&mut net, &index, &index.ids(Split::Train), &cfg.train, Some(&run))?;
    info!("{id}: best epoch {} of {}", fit.best_epoch, fit.epochs_run);
    let metrics = score(ctx, &net, &index, &run)?;
    let row = ctx.row(id, RunKind::Train, target, &net, metrics, started);
    ctx.store().append(&row)?;
    println!("{}: MRE {:.3} {}", row.run_id, row.metrics.mre, row.metrics.unit);
    Ok(row)
}

fn load_indices(cfg: &ExperimentConfig, chains: &[ChainSpec]) -> Result<BTreeMap<String, DatasetIndex>, CliError> {
    let mut out = BTreeMap::new();
    for chain in chains {
        for name in &chain.stages {
            if !out.contains_key(name) {
                out.insert(name.clone(), cfg.load_index(name)?);
            }
        }
    }
    Ok(out)
}

/// Runs every configured transfer chain and scores each final stage on
/// its target's test split.
pub fn chain(ctx: &Context) -> Result<Vec<ResultRow>, CliError> {
    let cfg = &ctx.config;
    let chains = cfg.chain_list()?;
    if chains.is_empty() {
        return Err(CliError::validation("chain selection is empty"));
    }
    for c in &chains {
        c.validate()?;
    }
    ctx.guard(RunKind::Chain)?;
    let indices = load_indices(cfg, &chains)?;
    let opts = ChainOptions {
        architecture: cfg.model.architecture,
        encoder: cfg.model.encoder,
        width_divisor: cfg.model.width_divisor,
        train: cfg.train.clone(),
        build: ctx.build_options(),
        reuse_prefixes: cfg.reuse_prefixes,
    };
    let mut rows = Vec::new();
    for c in &chains {
        let started = unix_now();
        info!("chain {c}");
        let result = run_chain(c, &indices, &opts, ctx.out())?;
        let target = c.target();
        let net = LandmarkNet::load(result.final_checkpoint(), &opts.build)?;
        let run = RunDir::create(ctx.out(), result.final_run_id(), target, Some(ctx.config_hash.clone()))?;
        run.write_json("chain.json", &result)?;
        let id = ctx.store().free_run_id(result.final_run_id())?;
        let metrics = score(ctx, &net, &indices[target], &run)?;
        let mut row = ctx.row(id, RunKind::Chain, target, &net, metrics, started);
        row.chain_start = Some(c.start);
        row.chain = Some(c.stages.clone());
        ctx.store().append(&row)?;
        println!("{c}: MRE {:.3} {}", row.metrics.mre, row.metrics.unit);
        rows.push(row);
    }
    Ok(rows)
}

/// K-fold cross-validation of the configured model, or of every valid
/// architecture and encoder pairing when `grid` is set.
pub fn crossval_cmd(ctx: &Context) -> Result<Vec<ResultRow>, CliError> {
    let cfg = &ctx.config;
    let target = cfg.target()?;
    ctx.guard(RunKind::Crossval)?;
    let index = cfg.load_index(target)?;
    let k = index.spec().landmark_count;
    let specs: Vec<_> = if cfg.grid {
        Architecture::ALL
            .iter()
            .flat_map(|a| EncoderKind::ALL.iter().map(move |e| (*a, *e)))
            .map(|(a, e)| {
                let mut m = cfg.model.clone();
                m.architecture = a;
                m.encoder = e;
                m.spec(k)
            })
            .filter(|s| match s.validate() {
                Ok(()) => true,
                Err(e) => {
                    info!("skipping {} / {}: {e}", s.architecture, s.encoder);
                    false
                }
            })
            .collect()
    } else {
        let s = cfg.model.spec(k);
        s.validate()?;
        vec![s]
    };
    let build = ctx.build_options();
    let mut rows = Vec::new();
    for spec in specs {
        let started = unix_now();
        let base = format!("cv-{}", run_id(target, &spec, &ctx.config_hash, cfg.seed));
        let id = ctx.store().free_run_id(&base)?;
        let report = crossval(&index, &spec, &cfg.train, &build, cfg.folds, &cfg.eval, Some((ctx.out(), &id)))?;
        write_text(
            &ctx.out().join("runs").join(format!("{id}.crossval.json")),
            &serde_json::to_string_pretty(&report).map_err(CliError::validation)?,
        )?;
        let row = ResultRow {
            run_id: id,
            kind: RunKind::Crossval,
            chain_start: None,
            chain: None,
            dataset: target.to_string(),
            architecture: spec.architecture,
            encoder: spec.encoder,
            width_divisor: spec.width_divisor,
            imagenet_init: spec.pretrained == Pretrained::Imagenet,
            config_hash: ctx.config_hash.clone(),
            eval_space: cfg.eval.space,
            metrics: report.aggregate,
            started_unix: started,
            finished_unix: unix_now(),
        };
        ctx.store().append(&row)?;
        println!(
            "{} / {}: MRE {:.3} ± {:.3} {}",
            spec.architecture.display_name(),
            spec.encoder.display_name(),
            row.metrics.mre,
            row.metrics.mre_std.unwrap_or(f64::NAN),
            row.metrics.unit
        );
        rows.push(row);
    }
    Ok(rows)
}

/// Scores a saved checkpoint on the target's test split.
pub fn eval(ctx: &Context) -> Result<ResultRow, CliError> {
    let cfg = &ctx.config;
    let target = cfg.target()?;
    let ckpt = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::validation("config has no `checkpoint` to evaluate"))?;
    ctx.guard(RunKind::Eval)?;
    let index = cfg.load_index(target)?;
    let net = LandmarkNet::load(ckpt, &ctx.build_options())?;
    let started = unix_now();
    let base = format!("eval-{target}-{}", &ctx.config_hash[..10]);
    let id = ctx.store().free_run_id(&base)?;
    let run = RunDir::create(ctx.out(), &id, target, Some(ctx.config_hash.clone()))?;
    let metrics = score(ctx, &net, &index, &run)?;
    let row = ctx.row(id, RunKind::Eval, target, &net, metrics, started);
    ctx.store().append(&row)?;
    println!("{}: MRE {:.3} {}", row.run_id, row.metrics.mre, row.metrics.unit);
    Ok(row)
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub templates: Vec<Template>,
    pub store: Option<PathBuf>,
    /// Dataset of the architecture/encoder table.
    pub table1_dataset: String,
    pub check: bool,
}

/// Writes Markdown, CSV and SVG for each template under `<out>/reports`.
/// With `check`, also runs the full-scale reproduction gate and fails if
/// any of its checks fail.
pub fn report_cmd(ctx: &Context, opts: &ReportOptions) -> Result<Vec<report::Table>, CliError> {
    let store = match &opts.store {
        Some(p) => ResultsStore::at(p),
        None => ctx.store(),
    };
    let rows = store.rows()?;
    if rows.is_empty() {
        warn!("results store {} is empty", store.path().display());
    }
    let dir = ctx.out().join("reports");
    let mut tables = Vec::new();
    for template in &opts.templates {
        let table = report::build(*template, &rows, &opts.table1_dataset);
        if table.is_empty() {
            warn!("{}: no matching results; every cell is empty", template.name());
        }
        let md = table.to_markdown();
        write_text(&dir.join(format!("{}.md", template.name())), &md)?;
        write_text(&dir.join(format!("{}.csv", template.name())), &table.to_csv())?;
        write_text(&dir.join(format!("{}.mre.svg", template.name())), &report::mre_bars_svg(&table))?;
        write_text(&dir.join(format!("{}.sdr.svg", template.name())), &report::sdr_curves_svg(&table))?;
        println!("{md}");
        tables.push(table);
    }
    if opts.check {
        let outcomes = report::reproduction_check(&rows);
        let mut failed = false;
        for o in &outcomes {
            let tag = match o.status {
                CheckStatus::Pass => "PASS",
                CheckStatus::Fail => {
                    failed = true;
                    "FAIL"
                }
                CheckStatus::Skip => "SKIP",
            };
            println!("{tag} {}: {}", o.name, o.detail);
        }
        if failed {
            return Err(CliError::validation("reproduction check failed"));
        }
    }
    Ok(tables)
}
