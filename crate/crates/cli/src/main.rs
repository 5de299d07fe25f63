use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use latentuq::baselines::{self, Ensemble, VoteResult};
use latentuq::config::{self, RunConfig};
use latentuq::dataio::{self, Dataset};
use latentuq::eval::{self, ScoredSample, ScoredSet};
use latentuq::latent_uq::{self, build_confidence_sets, LatentDensities};
use latentuq::nn::{self, Network};
use latentuq::Error;

#[derive(Parser)]
#[command(name = "latentuq", version, about = "Latent-space confidence scoring for feed-forward classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on the configured training data.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train on the split with this label removed.
        #[arg(long)]
        held_out: Option<usize>,
    },
    /// Fit latent densities and write one UQ model per percentile pair.
    FitUq {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the training split with this label removed.
        #[arg(long)]
        held_out: Option<usize>,
    },
    /// Score an IDX image file. Exactly one of --uq, --ensemble or --mc-passes selects the method.
    Score {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        uq: Option<PathBuf>,
        /// Ensemble directory (manifest.json plus member files).
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        mc_passes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        mc_seed: u64,
        #[arg(long)]
        input: PathBuf,
        /// IDX label file matching --input.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Defaults to `in` when labels are given and `ood` otherwise.
        #[arg(long, value_enum)]
        group: Option<GroupArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print TP / TN / TN-OOD rates of a scores file as JSON.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        threshold: f64,
    },
    /// Run the leave-one-label-out experiment.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        /// Overrides run.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bin a scores file into well-classified / misclassified / OOD counts.
    Histogram {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupArg {
    In,
    Ood,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {}", chain(&e));
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}

fn chain(e: &dyn std::error::Error) -> String {
    let mut msg = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        msg.push_str(&format!(": {s}"));
        cur = s.source();
    }
    msg
}

fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::Train { config, out, held_out } => train(&config, &out, held_out),
        Command::FitUq {
            model,
            config,
            out,
            held_out,
        } => fit_uq(&model, &config, &out, held_out),
        Command::Score {
            model,
            uq,
            ensemble,
            mc_passes,
            mc_seed,
            input,
            labels,
            group,
            out,
        } => score(ScoreArgs {
            model,
            uq,
            ensemble,
            mc_passes,
            mc_seed,
            input,
            labels,
            group,
            out,
        }),
        Command::Evaluate { scores, threshold } => {
            let set = ScoredSet::load(&scores)?;
            let m = eval::evaluate(&set, threshold)?;
            println!("{}", serde_json::to_string_pretty(&m).map_err(Error::from)?);
            Ok(())
        }
        Command::Experiment { config, out } => {
            let mut cfg = config::load_config(&config)?;
            if let Some(out) = out {
                cfg.run.output_dir = out;
            }
            let result = eval::run_experiment(&cfg)?;
            result.write_outputs(&cfg.run.output_dir, cfg.run.histogram_bins)?;
            log::info!(
                "wrote {} ({:.1} s)",
                cfg.run.output_dir.join("results.csv").display(),
                result.metadata.wall_clock_seconds
            );
            Ok(())
        }
        Command::Histogram { scores, bins, out } => {
            if bins == 0 {
                return Err(Failure::Usage("--bins must be at least 1".into()));
            }
            let set = ScoredSet::load(&scores)?;
            let table = eval::export_histogram(&set, bins);
            write_file(&out, table.to_csv().as_bytes())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_network(path: &Path) -> CliResult<Network> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Network::from_bytes(&bytes)?)
}

fn training_data(cfg: &RunConfig, held_out: Option<usize>) -> CliResult<Dataset> {
    let (train, test) = eval::load_data(cfg)?;
    Ok(match held_out {
        Some(h) => dataio::make_ood_split(&train, &test, h)?.train,
        None => train,
    })
}

fn train(config: &Path, out: &Path, held_out: Option<usize>) -> CliResult {
    let cfg = config::load_config(config)?;
    let data = training_data(&cfg, held_out)?;
    let hp = cfg.training.params();
    log::info!(
        "training {} on {} samples",
        nn::architecture_label(&cfg.network.hidden),
        data.len()
    );
    let trained = baselines::train_member(
        data.dim(),
        &cfg.network.layer_specs(),
        data.num_classes(),
        &data,
        &hp,
        hp.seed,
    )?;
    write_file(&out.join("network.lcn"), &trained.network.to_bytes())?;
    let history = serde_json::to_vec_pretty(&trained.history).map_err(Error::from)?;
    write_file(&out.join("history.json"), &history)
}

fn fit_uq(model: &Path, config: &Path, out: &Path, held_out: Option<usize>) -> CliResult {
    let cfg = config::load_config(config)?;
    let inf = cfg
        .inference
        .as_ref()
        .ok_or_else(|| Error::validation("inference", "fit-uq needs an [inference] section"))?;
    let net = read_network(model)?;
    let data = training_data(&cfg, held_out)?;
    let sets = build_confidence_sets(&net, &data)?;
    let dens = LatentDensities::fit(&sets, inf.ridge_scale)?;
    let fp = net.fingerprint();
    for (i, p) in inf.percentiles.iter().enumerate() {
        let uq = dens
            .calibrate(p.alpha, p.beta, fp)?
            .with_smoothstep_form(inf.smoothstep);
        let path = out.join(format!("uq-{}.luq", inf.pair_name(i)));
        write_file(&path, &uq.to_bytes())?;
        log::info!("wrote {} (alpha {}, beta {})", path.display(), p.alpha, p.beta);
    }
    Ok(())
}

struct ScoreArgs {
    model: Option<PathBuf>,
    uq: Option<PathBuf>,
    ensemble: Option<PathBuf>,
    mc_passes: Option<usize>,
    mc_seed: u64,
    input: PathBuf,
    labels: Option<PathBuf>,
    group: Option<GroupArg>,
    out: PathBuf,
}

fn score(a: ScoreArgs) -> CliResult {
    let selected = [a.uq.is_some(), a.ensemble.is_some(), a.mc_passes.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if selected != 1 {
        return Err(Failure::Usage(
            "choose exactly one of --uq, --ensemble or --mc-passes".into(),
        ));
    }
    let need_model = || {
        a.model
            .as_deref()
            .ok_or_else(|| Failure::Usage("--model is required with --uq and --mc-passes".into()))
    };
    let open = |p: &Path| fs::File::open(p).map(std::io::BufReader::new).map_err(|e| Error::io(p, e));
    let x = dataio::load_idx_images(open(&a.input)?)?;
    let labels = match &a.labels {
        Some(p) => {
            let l = dataio::load_idx_labels(open(p)?)?;
            if l.len() != x.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: x.nrows(),
                    actual: l.len(),
                }
                .into());
            }
            Some(l)
        }
        None => None,
    };
    let ood = match a.group {
        Some(GroupArg::Ood) => true,
        Some(GroupArg::In) => false,
        None => labels.is_none(),
    };
    if !ood && labels.is_none() {
        return Err(Failure::Usage("--group in needs --labels".into()));
    }

    let (predicted, confidence): (Vec<usize>, Vec<f64>) = if let Some(uq_path) = &a.uq {
        let net = read_network(need_model()?)?;
        let uq = latent_uq::load_uq_model(open(uq_path)?)?;
        latent_uq::score_batch(&uq, &net, &x)?
            .into_iter()
            .map(|r| (r.predicted_label, r.confidence))
            .unzip()
    } else {
        let votes: Vec<VoteResult> = if let Some(dir) = &a.ensemble {
            baselines::ensemble_score_batch(&Ensemble::load_dir(dir)?, &x)?
        } else {
            let net = read_network(need_model()?)?;
            baselines::mc_dropout_score_batch(&net, &x, a.mc_passes.unwrap_or(0), a.mc_seed)?
        };
        votes.into_iter().map(|v| (v.predicted_label, v.confidence)).unzip()
    };

    let samples = (0..x.nrows())
        .map(|i| {
            let y = labels.as_ref().map(|l| l[i]);
            if ood {
                ScoredSample::ood(y, predicted[i], confidence[i])
            } else {
                ScoredSample::in_dist(y.unwrap_or_default(), predicted[i], confidence[i])
            }
        })
        .collect();
    let set = ScoredSet::new(samples)?;
    let mut buf = Vec::new();
    set.write_csv(&mut buf)?;
    write_file(&a.out, &buf)?;
    log::info!("scored {} samples into {}", set.len(), a.out.display());
    Ok(())
}
