//! Simulation driver: dataset generation, splitting, the two trainers,
//! offline evaluation, and the communication audit.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedlft::model_file;
use fedlft::parallel::ThreadedExecutor;
use fedlft::report;
use fedlft::socket::SocketTransport;
use fedlft::synth::{self, SynthSpec};
use fedlft::triples::{self, LoadOptions};
use fedlft_core::{
    client_bytes_per_round, run_experiment, run_training, server_bytes_per_round,
    train_centralized, ClientExecutor, CommLedger, Entry, EvaluationSet, FedError, GradientMode,
    Hyperparams, InProcessTransport, RoundReport, SequentialExecutor, Shape, SparseTensor,
    SplitSpec, TrainOptions, Transport, TransportError,
};

#[derive(Parser)]
#[command(name = "fedlft", version, about = "Federated latent-factorization-of-tensors simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic low-rank tensor as a triple file.
    Generate(GenerateArgs),
    /// Split a triple file into train and test triple files.
    Split(SplitArgs),
    /// Train across per-user clients exchanging gradients over a transport.
    TrainFederated(TrainFederatedArgs),
    /// Train on the pooled tensor in one process.
    TrainCentralized(TrainCentralizedArgs),
    /// Score a saved model against a held-out triple file.
    Evaluate(EvaluateArgs),
    /// Compare measured per-round payload bytes with the declared formulas.
    AuditComm(AuditCommArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output triple file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    services: usize,
    #[arg(long, default_value_t = 16)]
    times: usize,
    /// Rank of the ground-truth factors.
    #[arg(long, default_value_t = 3)]
    true_rank: usize,
    /// Fraction of cells that get an observation, in (0, 1].
    #[arg(long, default_value_t = 0.2)]
    density: f64,
    /// Standard deviation of additive Gaussian noise; 0 disables it.
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Clamp generated values into `lo,hi`.
    #[arg(long, value_parser = parse_pair)]
    clip: Option<(f64, f64)>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    /// Input triple file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
    /// Fraction of entries that go to the training side, in (0, 1).
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args)]
struct LoadArgs {
    /// Treat file coordinates as starting at 1.
    #[arg(long)]
    one_based: bool,
    /// Override the tensor shape as `users,services,times`.
    #[arg(long, value_parser = parse_shape)]
    shape: Option<Shape>,
}

impl LoadArgs {
    fn options(&self) -> LoadOptions {
        LoadOptions {
            shape: self.shape,
            one_based: self.one_based,
        }
    }
}

#[derive(Args)]
struct HyperArgs {
    /// Latent feature dimension R.
    #[arg(long, default_value_t = 20)]
    rank: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.00038)]
    eta: f64,
    /// L2 penalty weight.
    #[arg(long, default_value_t = 0.001)]
    lambda: f64,
    #[arg(long, default_value_t = 500)]
    max_rounds: u64,
    /// Upper bound of the uniform factor initialization.
    #[arg(long, default_value_t = 0.004)]
    init_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HyperArgs {
    fn to_hyperparams(&self) -> Hyperparams {
        Hyperparams {
            rank: self.rank,
            learning_rate: self.eta,
            regularization: self.lambda,
            max_rounds: self.max_rounds,
            seed: self.seed,
            init_scale: self.init_scale,
        }
    }
}

#[derive(Args)]
struct TrainOptArgs {
    /// Passes over each client's shard per round.
    #[arg(long, default_value_t = 1)]
    local_epochs: u32,
    /// Step the user row before computing service/time gradients.
    #[arg(long)]
    sequential_user_update: bool,
    /// Apply each client's batch as it arrives instead of per-round.
    #[arg(long)]
    interleaved: bool,
    /// Early-stop threshold on |delta train RMSE|; 0 disables.
    #[arg(long, default_value_t = 1e-5)]
    convergence_threshold: f64,
    /// Consecutive below-threshold rounds required to stop.
    #[arg(long, default_value_t = 3)]
    convergence_patience: u32,
}

impl TrainOptArgs {
    fn to_options(&self) -> TrainOptions {
        TrainOptions {
            local_epochs: self.local_epochs,
            sequential_user_update: self.sequential_user_update,
            interleaved: self.interleaved,
            convergence_threshold: self.convergence_threshold,
            convergence_patience: self.convergence_patience,
        }
    }
}

#[derive(Args)]
struct RunIoArgs {
    /// Train on this triple file (single-run mode).
    #[arg(long, conflicts_with_all = ["data", "trials", "fraction"])]
    train: Option<PathBuf>,
    /// Held-out triple file scored every round (single-run mode).
    #[arg(long, requires = "train")]
    test: Option<PathBuf>,
    /// Run seeded split + train trials over this file (experiment mode).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training fraction per trial (experiment mode).
    #[arg(long, default_value_t = 0.1, requires = "data")]
    fraction: f64,
    /// Number of independent trials (experiment mode).
    #[arg(long, default_value_t = 5, requires = "data")]
    trials: u64,
    /// Base seed for the per-trial splits; defaults to --seed.
    #[arg(long, requires = "data")]
    split_seed: Option<u64>,
    /// Save the trained factors here (single-run mode only).
    #[arg(long, conflicts_with = "data")]
    model_out: Option<PathBuf>,
    /// Also export the factors as readable text.
    #[arg(long, requires = "model_out")]
    export_text: Option<PathBuf>,
    /// Write the per-round CSV report here.
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args)]
struct TrainFederatedArgs {
    #[command(flatten)]
    io: RunIoArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    opts: TrainOptArgs,
    /// Message path between clients and server.
    #[arg(long, value_enum, default_value_t = TransportKind::InProcess)]
    transport: TransportKind,
    /// Client worker threads; 1 means the reference sequential schedule.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct TrainCentralizedArgs {
    #[command(flatten)]
    io: RunIoArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    opts: TrainOptArgs,
    /// Gradient freshness: round-start snapshot or live values.
    #[arg(long, value_enum, default_value_t = CentralMode::Snapshot)]
    mode: CentralMode,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Saved model file.
    #[arg(long)]
    model: PathBuf,
    /// Held-out triple file.
    #[arg(long)]
    test: PathBuf,
    /// Training triple file, for disjointness and cold-start checks.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Skip test entries with an index unseen in training (needs --train).
    #[arg(long, requires = "train")]
    exclude_cold_start: bool,
    /// Clamp predictions into `lo,hi` before scoring.
    #[arg(long, value_parser = parse_pair)]
    clamp: Option<(f64, f64)>,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Args)]
struct AuditCommArgs {
    /// Triple file to train on while measuring traffic.
    #[arg(long)]
    data: PathBuf,
    /// Rounds to run and audit.
    #[arg(long, default_value_t = 3)]
    rounds: u64,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    load: LoadArgs,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TransportKind {
    InProcess,
    Socket,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CentralMode {
    Snapshot,
    Fresh,
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("`{s}` is not of the form lo,hi"))?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("`{lo}` is not a real"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("`{hi}` is not a real"))?;
    Ok((lo, hi))
}

fn parse_shape(s: &str) -> Result<Shape, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("`{s}` is not of the form users,services,times"));
    }
    let mut axes = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        axes[i] = p
            .trim()
            .parse()
            .map_err(|_| format!("`{p}` is not a nonnegative integer"))?;
    }
    Shape::new(axes[0], axes[1], axes[2]).map_err(|e| e.to_string())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => cmd_generate(args),
        Command::Split(args) => cmd_split(args),
        Command::TrainFederated(args) => cmd_train_federated(args),
        Command::TrainCentralized(args) => cmd_train_centralized(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::AuditComm(args) => cmd_audit_comm(args),
    }
}

fn load_tensor(path: &Path, load: &LoadArgs) -> Result<SparseTensor> {
    triples::load(path, &load.options()).with_context(|| format!("loading {}", path.display()))
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let spec = SynthSpec {
        shape: Shape::new(args.users, args.services, args.times)?,
        true_rank: args.true_rank,
        density: args.density,
        noise_std: args.noise_std,
        value_clip: args.clip,
        seed: args.seed,
    };
    let tensor = synth::generate(&spec)?;
    triples::save(&tensor, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} entries ({} x {} x {}, density {:.4}) to {}",
        tensor.len(),
        args.users,
        args.services,
        args.times,
        tensor.density(),
        args.out.display()
    );
    Ok(())
}

fn cmd_split(args: SplitArgs) -> Result<()> {
    let tensor = load_tensor(&args.data, &args.load)?;
    let spec = SplitSpec::new(args.fraction, args.seed)?;
    let (train, test) = tensor.split(&spec)?;
    triples::save(&train, &args.train_out)
        .with_context(|| format!("writing {}", args.train_out.display()))?;
    triples::save(&test, &args.test_out)
        .with_context(|| format!("writing {}", args.test_out.display()))?;
    println!(
        "split {} entries into {} train / {} test",
        tensor.len(),
        train.len(),
        test.len()
    );
    Ok(())
}

/// What a single training invocation produces, whichever trainer ran.
struct RunOutput {
    factors: Option<fedlft_core::LatentFactors>,
    rows: Vec<(u64, RoundReport)>,
    summary: Vec<String>,
}

fn write_run_output(out: RunOutput, io: &RunIoArgs) -> Result<()> {
    if let Some(path) = &io.report_out {
        let mut file = std::io::BufWriter::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        report::write_csv(&mut file, out.rows.iter().map(|(t, r)| (*t, r)))?;
    }
    if let Some(path) = &io.model_out {
        let factors = out.factors.as_ref().expect("single-run mode always has factors");
        model_file::save(factors, path).with_context(|| format!("writing {}", path.display()))?;
        if let Some(text_path) = &io.export_text {
            model_file::export_text(factors, text_path)
                .with_context(|| format!("writing {}", text_path.display()))?;
        }
    }
    let mut stdout = std::io::stdout().lock();
    for line in &out.summary {
        writeln!(stdout, "{line}")?;
    }
    Ok(())
}

fn single_run_summary(rows: &[(u64, RoundReport)]) -> Vec<String> {
    let last = &rows.last().expect("at least one round").1;
    let mut lines = vec![
        format!("rounds run: {}", rows.len()),
        format!("final train RMSE: {}", last.train_rmse),
    ];
    if let (Some(rmse), Some(mae)) = (last.test_rmse, last.test_mae) {
        lines.push(format!("final test RMSE: {rmse}"));
        lines.push(format!("final test MAE: {mae}"));
    }
    let total_bytes: u64 = rows.iter().map(|(_, r)| r.server_bytes).sum();
    lines.push(format!("total payload bytes: {total_bytes}"));
    lines
}

fn experiment_summary(report: &fedlft_core::ExperimentReport) -> Vec<String> {
    let mut lines = Vec::new();
    for t in &report.trials {
        lines.push(format!(
            "trial {}: rounds {}, test RMSE {}, test MAE {}",
            t.trial,
            t.rounds.len(),
            t.final_test_rmse,
            t.final_test_mae
        ));
    }
    lines.push(format!("mean test RMSE: {}", report.mean_test_rmse));
    lines.push(format!("mean test MAE: {}", report.mean_test_mae));
    lines
}

fn experiment_rows(report: fedlft_core::ExperimentReport) -> Vec<(u64, RoundReport)> {
    report
        .trials
        .into_iter()
        .flat_map(|t| t.rounds.into_iter().map(move |r| (t.trial, r)))
        .collect()
}

fn load_single_run_inputs(io: &RunIoArgs) -> Result<(SparseTensor, Option<EvaluationSet>)> {
    let train_path = io.train.as_ref().expect("single mode");
    let train = load_tensor(train_path, &io.load)?;
    let test = match &io.test {
        Some(path) => {
            let t = load_tensor(path, &io.load)?;
            Some(
                EvaluationSet::disjoint_from_train(t.entries().to_vec(), &train)
                    .context("test set overlaps the training set")?,
            )
        }
        None => None,
    };
    Ok((train, test))
}

fn cmd_train_federated(args: TrainFederatedArgs) -> Result<()> {
    let hp = args.hyper.to_hyperparams();
    let opts = args.opts.to_options();
    let make_transport = || -> Result<Box<dyn Transport + Sync>, FedError> {
        match args.transport {
            TransportKind::InProcess => Ok(Box::new(InProcessTransport::new())),
            TransportKind::Socket => SocketTransport::start()
                .map(|t| Box::new(t) as Box<dyn Transport + Sync>)
                .map_err(|e| TransportError::Failed(format!("socket transport: {e}")).into()),
        }
    };
    let executor: Box<dyn ClientExecutor + Sync> = if args.threads <= 1 {
        Box::new(SequentialExecutor)
    } else {
        Box::new(ThreadedExecutor::new(args.threads).context("building the thread pool")?)
    };

    let out = if io_is_experiment(&args.io)? {
        let dataset = load_tensor(args.io.data.as_ref().expect("experiment mode"), &args.io.load)?;
        let split = SplitSpec::new(args.io.fraction, args.io.split_seed.unwrap_or(hp.seed))?;
        let report = run_experiment(&dataset, &hp, &split, args.io.trials, |train, trial_hp, test| {
            let transport = make_transport()?;
            run_training(train, trial_hp, &opts, transport.as_ref(), executor.as_ref(), test)
        })?;
        RunOutput {
            factors: None,
            summary: experiment_summary(&report),
            rows: experiment_rows(report),
        }
    } else {
        let (train, test) = load_single_run_inputs(&args.io)?;
        let transport = make_transport()?;
        let (factors, rounds) =
            run_training(&train, &hp, &opts, transport.as_ref(), executor.as_ref(), test.as_ref())?;
        let rows: Vec<(u64, RoundReport)> = rounds.into_iter().map(|r| (0, r)).collect();
        RunOutput {
            factors: Some(factors),
            summary: single_run_summary(&rows),
            rows,
        }
    };
    write_run_output(out, &args.io)
}

fn cmd_train_centralized(args: TrainCentralizedArgs) -> Result<()> {
    let hp = args.hyper.to_hyperparams();
    let opts = args.opts.to_options();
    let mode = match args.mode {
        CentralMode::Snapshot => GradientMode::Snapshot,
        CentralMode::Fresh => GradientMode::Fresh,
    };

    let out = if io_is_experiment(&args.io)? {
        let dataset = load_tensor(args.io.data.as_ref().expect("experiment mode"), &args.io.load)?;
        let split = SplitSpec::new(args.io.fraction, args.io.split_seed.unwrap_or(hp.seed))?;
        let report = run_experiment(&dataset, &hp, &split, args.io.trials, |train, trial_hp, test| {
            train_centralized(train, trial_hp, mode, &opts, test)
        })?;
        RunOutput {
            factors: None,
            summary: experiment_summary(&report),
            rows: experiment_rows(report),
        }
    } else {
        let (train, test) = load_single_run_inputs(&args.io)?;
        let (factors, rounds) = train_centralized(&train, &hp, mode, &opts, test.as_ref())?;
        let rows: Vec<(u64, RoundReport)> = rounds.into_iter().map(|r| (0, r)).collect();
        RunOutput {
            factors: Some(factors),
            summary: single_run_summary(&rows),
            rows,
        }
    };
    write_run_output(out, &args.io)
}

fn io_is_experiment(io: &RunIoArgs) -> Result<bool> {
    match (&io.train, &io.data) {
        (Some(_), None) => Ok(false),
        (None, Some(_)) => Ok(true),
        (None, None) => bail!("pass either --train (single run) or --data (experiment)"),
        (Some(_), Some(_)) => unreachable!("clap conflict rules forbid this"),
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let factors =
        model_file::load(&args.model).with_context(|| format!("loading {}", args.model.display()))?;
    let test = load_tensor(&args.test, &args.load)?;
    let train = match &args.train {
        Some(path) => Some(load_tensor(path, &args.load)?),
        None => None,
    };

    let total = test.len();
    let entries: Vec<Entry> = if args.exclude_cold_start {
        let train = train.as_ref().expect("clap requires --train");
        let mut users = vec![false; train.shape().num_users];
        let mut services = vec![false; train.shape().num_services];
        let mut times = vec![false; train.shape().num_times];
        for e in train.entries() {
            users[e.user] = true;
            services[e.service] = true;
            times[e.time] = true;
        }
        let warm = |e: &Entry| {
            users.get(e.user).copied().unwrap_or(false)
                && services.get(e.service).copied().unwrap_or(false)
                && times.get(e.time).copied().unwrap_or(false)
        };
        test.entries().iter().filter(|e| warm(e)).copied().collect()
    } else {
        test.entries().to_vec()
    };
    let excluded = total - entries.len();

    let set = match &train {
        Some(train) => EvaluationSet::disjoint_from_train(entries, train)
            .context("test set overlaps the training set")?,
        None => EvaluationSet::new(entries).context("nothing left to evaluate")?,
    };
    let (rmse, mae) = match args.clamp {
        Some((lo, hi)) => set.metrics_clamped(&factors, lo, hi)?,
        None => (set.rmse(&factors)?, set.mae(&factors)?),
    };

    println!("entries evaluated: {} (excluded {excluded} cold-start)", set.len());
    println!("RMSE: {rmse}");
    println!("MAE: {mae}");
    Ok(())
}

fn cmd_audit_comm(args: AuditCommArgs) -> Result<()> {
    let tensor = load_tensor(&args.data, &args.load)?;
    let mut hp = args.hyper.to_hyperparams();
    hp.max_rounds = args.rounds;
    let opts = TrainOptions {
        convergence_threshold: 0.0,
        ..TrainOptions::default()
    };
    let transport = InProcessTransport::new();
    run_training(&tensor, &hp, &opts, &transport, &SequentialExecutor, None)?;

    let shards = tensor.partition_by_user();
    let shard_sizes: Vec<u64> = shards.iter().map(|s| s.len() as u64).collect();
    let rank = hp.rank as u64;
    let (users, services, times) = (
        tensor.shape().num_users as u64,
        tensor.shape().num_services as u64,
        tensor.shape().num_times as u64,
    );
    let declared_server = server_bytes_per_round(rank, users, services, times, &shard_sizes)?;

    let log = transport.log();
    let mut mismatches = 0u64;
    println!("round  measured_server_bytes  declared_server_bytes  clients_ok");
    for round in 0..args.rounds {
        let ledger = CommLedger::from_log(&log, round);
        let mut clients_ok = true;
        for shard in &shards {
            let declared = client_bytes_per_round(rank, services, times, shard.len() as u64);
            let measured = ledger.per_client_bytes.get(&shard.user).copied().unwrap_or(0);
            if measured != declared {
                clients_ok = false;
                println!(
                    "  client {}: measured {} declared {}",
                    shard.user, measured, declared
                );
            }
        }
        let ok = clients_ok && ledger.server_bytes == declared_server;
        if !ok {
            mismatches += 1;
        }
        println!(
            "{round:>5}  {:>21}  {:>21}  {}",
            ledger.server_bytes,
            declared_server,
            if clients_ok { "yes" } else { "NO" }
        );
    }
    if mismatches > 0 {
        bail!("{mismatches} round(s) disagree with the declared formulas");
    }
    println!("all {} rounds match the declared formulas exactly", args.rounds);
    Ok(())
}
