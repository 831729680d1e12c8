use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use nexica::classify::{feature_ablation, predict_batch, roc_auc, train_forest, FeatureSet, ForestModel, ForestParams};
use nexica::correspond::CorrespondenceCounts;
use nexica::events::{extract_events, read_events_csv, write_events_csv, write_profile_csv};
use nexica::groundtruth::{build_dataset, write_labels_csv, DatasetSpec, NegativeRatio};
use nexica::ingest::{align_series, filter_stations, load_drive_times, load_speed_csv, load_station_meta};
use nexica::mle::estimate;
use nexica::pipeline::{
    count_table, estimate_table, evaluate, grid_search, ground_truth, load_labeled_set, load_pairs, report,
    run_pipeline, write_pairs_csv, RunConfig,
};
use nexica::synth::{generate_network, load_truth_csv, SynthSpec};
use nexica::derive_seed;

#[derive(Parser)]
#[command(name = "nexica", version, about = "Event-based causal discovery between road sensors")]
struct Cli {
    /// Worker threads (defaults to every core).
    #[arg(long, global = true, env = "NEXICA_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect slowdown events in a speed CSV.
    Events(EventsArgs),
    /// Count lagged correspondences between every ordered station pair.
    Pairs(PairsArgs),
    /// Estimate p_s and p_c for a pairs file or a single count table.
    Mle(MleArgs),
    /// Label candidate tuples and draw a dataset.
    GroundTruth(GroundTruthArgs),
    /// Generate a synthetic network with planted edges.
    Synth(SynthArgs),
    /// Train a random forest on labelled tuples.
    Train(TrainArgs),
    /// Cross-validate, or score a trained model, on labelled tuples.
    Evaluate(EvaluateArgs),
    /// Run the pipeline over a grid of alpha and tau values.
    GridSearch(GridArgs),
    /// Cross-validated AUC for every subset of the four counts.
    Ablate(AblateArgs),
    /// Summarise a run directory.
    Report { run_dir: PathBuf },
    /// Run the full pipeline.
    Run(RunArgs),
}

#[derive(Args)]
struct EventsArgs {
    #[arg(long)]
    speeds: PathBuf,
    /// Station metadata; enables the completeness filter by station.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    min_completeness: f64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the median-week profiles.
    #[arg(long)]
    profiles: Option<PathBuf>,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    events: PathBuf,
    #[arg(long, default_value_t = 8)]
    l_max: usize,
    #[arg(long, default_value_t = 0)]
    tau: usize,
    /// Skip the estimates and write counts only.
    #[arg(long)]
    counts_only: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MleArgs {
    /// Pairs file to (re-)estimate.
    #[arg(long, conflicts_with = "counts", required_unless_present = "counts")]
    pairs: Option<PathBuf>,
    /// Single table `a00,a01,a10,a11`; prints the estimate as JSON.
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<u64>>,
    #[arg(long, requires = "pairs")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GroundTruthArgs {
    #[arg(long)]
    drive_times: PathBuf,
    /// Station metadata, for the road rules.
    #[arg(long)]
    meta: Option<PathBuf>,
    /// Planted edges; replaces the road rules.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Restrict to the stations of a pairs file.
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    l_max: usize,
    /// `k`, `1:k` or `all`.
    #[arg(long, default_value = "1")]
    ratio: NegativeRatio,
    #[arg(long, default_value_t = 20.0)]
    propagation_speed_kph: f64,
    #[arg(long, default_value_t = 100.0)]
    free_flow_speed_kph: f64,
    #[arg(long, default_value_t = 1)]
    soft_threshold: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON network description.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ForestArgs {
    #[arg(long, default_value_t = 1000)]
    n_trees: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated subset of a00,a01,a10,a11,p_c, or `counts` / `all`.
    #[arg(long, default_value = "counts")]
    features: FeatureSet,
    #[arg(long)]
    max_depth: Option<usize>,
}

impl ForestArgs {
    fn params(&self) -> ForestParams {
        ForestParams {
            max_depth: self.max_depth,
            ..ForestParams::with_trees(self.n_trees)
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Score this model instead of cross-validating a new one.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[command(flatten)]
    forest: ForestArgs,
    /// Write `metrics.json` and `roc.csv` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 1000)]
    n_trees: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config-file keys that can be set on the command line.
#[derive(Args)]
struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    speeds: Option<PathBuf>,
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    drive_times: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long)]
    min_completeness: Option<f64>,
    #[arg(long)]
    ratio: Option<NegativeRatio>,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    features: Option<FeatureSet>,
    #[arg(long)]
    top_k: Option<usize>,
}

impl Overrides {
    fn resolve(self, threads: Option<usize>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v.into();
                }
            )*};
        }
        set!(speeds, events, meta, drive_times, truth, alpha, tau, l_max, min_completeness, ratio, n_trees, folds, seed, features, top_k);
        if let Some(out) = self.out {
            cfg.out_dir = out;
        }
        if threads.is_some() {
            cfg.threads = threads;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    taus: Vec<usize>,
    /// Skip the AUC over every negative.
    #[arg(long)]
    no_full: bool,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Prefix errors with the stage they came from.
/// The error and its causes, skipping a cause whose text the previous
/// message already contains.
fn chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

trait Tag<T> {
    fn tag(self, stage: &str) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for std::result::Result<T, E> {
    fn tag(self, stage: &str) -> Result<T> {
        self.map_err(|e| {
            let e: anyhow::Error = e.into();
            if e.to_string().starts_with('[') {
                e
            } else {
                anyhow!("[{stage}] {}", chain(&e))
            }
        })
    }
}

fn cmd_events(a: EventsArgs) -> Result<()> {
    let series = align_series(&load_speed_csv(&a.speeds).tag("ingest")?).tag("ingest")?;
    let total = series.len();
    let series = match &a.meta {
        Some(meta) => {
            let meta = load_station_meta(meta).tag("ingest")?;
            filter_stations(series, &meta, a.min_completeness).tag("ingest")?.0
        }
        None => series,
    };
    info!("{} of {total} stations kept", series.len());
    let (events, profiles): (Vec<_>, Vec<_>) = series
        .iter()
        .map(|s| extract_events(s, a.alpha))
        .collect::<std::result::Result<Vec<_>, _>>()
        .tag("events")?
        .into_iter()
        .unzip();
    write_events_csv(&events, create(&a.out)?).tag("output")?;
    if let Some(p) = &a.profiles {
        write_profile_csv(&profiles, create(p)?).tag("output")?;
    }
    for e in &events {
        info!("{}: {} events", e.station_id(), e.count());
    }
    Ok(())
}

fn cmd_pairs(a: PairsArgs) -> Result<()> {
    let events = read_events_csv(BufReader::new(File::open(&a.events).tag("ingest")?)).tag("ingest")?;
    let mut table = count_table(&events, a.l_max, a.tau)?;
    if !a.counts_only {
        estimate_table(&mut table)?;
    }
    write_pairs_csv(&table, create(&a.out)?).tag("output")?;
    info!("{} tuples over {} stations", table.records.len(), table.station_ids.len());
    Ok(())
}

fn cmd_mle(a: MleArgs) -> Result<()> {
    if let Some(c) = a.counts {
        if c.len() != 4 {
            return Err(anyhow!("[config] --counts needs exactly four values, got {}", c.len()));
        }
        let counts = CorrespondenceCounts::from_cells(c[0], c[1], c[2], c[3]);
        let est = estimate(&counts).tag("mle")?;
        println!("{}", serde_json::to_string_pretty(&est)?);
        return Ok(());
    }
    let path = a.pairs.expect("clap requires pairs or counts");
    let mut table = load_pairs(&path)?;
    estimate_table(&mut table)?;
    let out = a.out.unwrap_or(path);
    write_pairs_csv(&table, create(&out)?).tag("output")?;
    for (case, n) in table.case_tally() {
        info!("{case}: {n}");
    }
    Ok(())
}

fn cmd_ground_truth(a: GroundTruthArgs) -> Result<()> {
    let drive = load_drive_times(&a.drive_times).tag("ingest")?;
    let meta = a.meta.as_ref().map(load_station_meta).transpose().tag("ingest")?;
    let truth: Option<Vec<(String, String, usize)>> = a
        .truth
        .as_ref()
        .map(|p| load_truth_csv(p).map(|t| t.into_iter().map(|e| (e.cause, e.effect, e.lag)).collect()))
        .transpose()
        .tag("ingest")?;
    let ids: Vec<String> = match (&a.pairs, &meta) {
        (Some(p), _) => load_pairs(p)?.station_ids,
        (None, Some(m)) if truth.is_none() => m.iter().map(|s| s.station_id.clone()).collect(),
        _ => drive.station_ids().to_vec(),
    };
    let spec = DatasetSpec {
        ratio: a.ratio,
        l_max: a.l_max,
        propagation_speed_kph: a.propagation_speed_kph,
        free_flow_speed_kph: a.free_flow_speed_kph,
        soft_threshold: a.soft_threshold,
    };
    let gt = ground_truth(&ids, meta.as_deref(), Some(&drive), truth.as_deref(), &spec)?
        .map_err(|reason| anyhow!("[ground_truth] {reason}"))?;
    let ds = build_dataset(&gt, a.ratio);
    write_labels_csv(&ds.pairs, create(&a.out)?).tag("output")?;
    eprintln!(
        "{} candidates: {} positive, {} negative selected (ratio {}), {} short",
        gt.candidate_count(),
        ds.n_positive,
        ds.n_negative,
        a.ratio,
        ds.shortfall
    );
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec::load(&a.spec).tag("config")?;
    let net = generate_network(&spec).tag("synth")?;
    net.write_dir(&a.out).tag("output")?;
    eprintln!(
        "{} stations, {} slots, {} planted edges -> {}",
        spec.n_stations,
        spec.n_slots,
        net.edges.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let table = load_pairs(&a.pairs)?;
    let set = load_labeled_set(&table, &a.labels)?;
    let fv: Vec<_> = set.rows.iter().map(|&k| table.feature(k)).collect();
    let model = train_forest(&fv, &set.labels, &a.forest.params(), a.forest.seed, a.forest.features).tag("train")?;
    let mut w = create(&a.out)?;
    serde_json::to_writer(&mut w, &model)?;
    w.flush()?;
    eprintln!("{} trees on {} samples, fingerprint {}", model.n_trees, fv.len(), model.fingerprint());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let table = load_pairs(&a.pairs)?;
    let set = load_labeled_set(&table, &a.labels)?;
    let (summary, curves) = if let Some(path) = &a.model {
        let model: ForestModel =
            serde_json::from_reader(BufReader::new(File::open(path).tag("ingest")?)).tag("ingest")?;
        let fv: Vec<_> = set.rows.iter().map(|&k| table.feature(k)).collect();
        let scores = predict_batch(&model, &fv).tag("evaluate")?;
        let roc = roc_auc(&scores, &set.labels).tag("evaluate")?;
        let summary = serde_json::json!({
            "model_fingerprint": model.fingerprint(),
            "features": model.feature_mask,
            "samples": fv.len(),
            "auc": roc.auc,
        });
        (summary, vec![("model", roc)])
    } else {
        let detail = evaluate(&table, &set, a.folds, &a.forest.params(), a.forest.features, a.forest.seed)?;
        (
            serde_json::to_value(&detail.summary)?,
            vec![("forest", detail.forest_roc), ("scalar_p_c", detail.scalar_roc)],
        )
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(dir) = &a.out {
        let mut w = create(&dir.join("metrics.json"))?;
        serde_json::to_writer_pretty(&mut w, &summary)?;
        w.flush()?;
        let mut csv = create(&dir.join("roc.csv"))?;
        writeln!(csv, "model,threshold,fpr,tpr")?;
        for (name, roc) in &curves {
            for k in 0..roc.thresholds.len() {
                writeln!(csv, "{name},{},{},{}", roc.thresholds[k], roc.fpr[k], roc.tpr[k])?;
            }
        }
        csv.flush()?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let table = load_pairs(&a.pairs)?;
    let set = load_labeled_set(&table, &a.labels)?;
    let fv: Vec<_> = set.rows.iter().map(|&k| table.feature(k)).collect();
    let rows = feature_ablation(
        &fv,
        &set.labels,
        a.folds,
        &ForestParams::with_trees(a.n_trees),
        derive_seed(a.seed, "cross_validation"),
    )
    .tag("evaluate")?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "features,auc,auc_std")?;
    for r in rows {
        writeln!(out, "\"{}\",{},{}", r.features, r.auc, r.auc_std)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_run(a: RunArgs, threads: Option<usize>) -> Result<()> {
    let cfg = a.overrides.resolve(threads)?;
    let run = run_pipeline(&cfg)?;
    print!("{}", report(&run.out_dir)?);
    Ok(())
}

fn cmd_grid(a: GridArgs, threads: Option<usize>) -> Result<()> {
    let cfg = a.overrides.resolve(threads)?;
    grid_search(&cfg, &a.alphas, &a.taus, !a.no_full)?;
    print!("{}", report(&cfg.out_dir)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("nexica: [config] {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Events(a) => cmd_events(a),
        Command::Pairs(a) => cmd_pairs(a),
        Command::Mle(a) => cmd_mle(a),
        Command::GroundTruth(a) => cmd_ground_truth(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GridSearch(a) => cmd_grid(a, cli.threads),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Report { run_dir } => report(&run_dir).map(|t| print!("{t}")).map_err(Into::into),
        Command::Run(a) => cmd_run(a, cli.threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nexica: {}", chain(&e));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn overrides_replace_config_keys() {
        let cli = Cli::parse_from(["nexica", "run", "--events", "e.csv", "--alpha", "0.05", "--ratio", "1:5", "--out", "x"]);
        let Command::Run(a) = cli.command else { panic!() };
        let cfg = a.overrides.resolve(Some(3)).unwrap();
        assert_eq!(cfg.alpha, 0.05);
        assert_eq!(cfg.ratio, NegativeRatio::PerPositive(5));
        assert_eq!(cfg.out_dir, PathBuf::from("x"));
        assert_eq!(cfg.threads, Some(3));
        assert_eq!(cfg.events, Some(PathBuf::from("e.csv")));
    }
}
