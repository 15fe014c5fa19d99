use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use elicit_core::aggregate::{
    aggregate_experts, marginals_from_moments, parse_moments_table, AggregateError, PipelineConfig, PriorSampleSet,
    SampleSidecar,
};
use elicit_core::assurance::{
    find_sample_size, write_curve_csv, AnalysisPrior, AssuranceError, DecisionRule, GridSpec, SearchTargets, TrialDesign,
    DEFAULT_GRID,
};
use elicit_core::distfit::{fit_beta_from_triplet, CiLevel, DistFitError, ElicitedTriplet};
use elicit_core::elicitation::{Round, SessionError, WorkshopSession, SCHEMA_VERSION};
use elicit_core::pearson4::PearsonError;
use elicit_core::survey::{margin_to_probability, median_margin, parse_survey, SurveyError};
use elicit_service::{ServiceConfig, StoreError};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "elicit", version, about = "Expert elicitation, prior aggregation and assurance-based sample size")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a beta distribution to a (lower, mode, upper) judgment.
    Fit {
        #[arg(long)]
        lower: f64,
        #[arg(long)]
        mode: f64,
        #[arg(long)]
        upper: f64,
        #[arg(long, default_value_t = 0.95)]
        ci: f64,
    },
    /// Pool expert judgments into a joint prior sample for (p1, p2).
    Aggregate(AggregateArgs),
    /// Fit the analysis prior (beta for p1, Pearson IV for delta) to a prior sample.
    FitDelta {
        #[arg(long)]
        samples: PathBuf,
        /// Also write the parameters to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Median of a margin survey (patients per 100).
    Margin {
        #[arg(long)]
        survey: PathBuf,
    },
    /// Assurance curve and the smallest total sample size meeting the targets.
    Assurance(AssuranceArgs),
    /// Print the bearer token for the facilitator or for one expert.
    Token {
        #[arg(long, env = "ELICIT_TOKEN_SECRET", hide_env_values = true)]
        token_secret: String,
        #[arg(long, requires = "expert")]
        session: Option<String>,
        #[arg(long, requires = "session")]
        expert: Option<String>,
    },
    /// Run the workshop HTTP service.
    Serve {
        #[arg(long, env = "ELICIT_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = "ELICIT_DATA_DIR", default_value = "sessions")]
        data_dir: PathBuf,
        #[arg(long, env = "ELICIT_TOKEN_SECRET", hide_env_values = true)]
        token_secret: String,
    },
}

#[derive(Args)]
struct AggregateArgs {
    /// Session document; supplies the expert profiles, and the judgments
    /// unless --from-moments is given.
    #[arg(long)]
    session: PathBuf,
    /// Table of per-expert beta moments (expert,round,arm,mean,sd).
    #[arg(long)]
    from_moments: Option<PathBuf>,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pseudo_samples: usize,
    #[arg(long, default_value_t = 4)]
    chains: usize,
    #[arg(long, default_value_t = 2000)]
    burn_in: usize,
    #[arg(long, default_value_t = 10_000)]
    gibbs_draws: usize,
}

#[derive(Args)]
struct AssuranceArgs {
    /// Prior sample CSV written by `aggregate`.
    #[arg(long)]
    prior: PathBuf,
    /// Analysis prior JSON written by `fit-delta`.
    #[arg(long)]
    analysis_prior: PathBuf,
    /// Margin on the risk-difference scale.
    #[arg(long)]
    margin: f64,
    #[arg(long, default_value_t = 1000)]
    sims: usize,
    #[arg(long, default_value_t = 500)]
    n_min: u64,
    #[arg(long, default_value_t = 4000)]
    n_max: u64,
    #[arg(long, default_value_t = 50)]
    n_step: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    #[arg(long, default_value_t = 0.80)]
    rel_target: f64,
    #[arg(long, default_value_t = 0.05)]
    null_cap: f64,
    /// Null-scenario Monte Carlo standard errors tolerated above --null-cap.
    #[arg(long, default_value_t = 0.0)]
    null_se_allowance: f64,
    #[arg(long, value_enum, default_value_t = Rule::PosteriorProbability)]
    rule: Rule,
    /// Posterior grid points per axis.
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    /// Curve CSV path.
    #[arg(long, default_value = "assurance_curve.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Rule {
    PosteriorProbability,
    UpperCredibleLimit,
}

impl From<Rule> for DecisionRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::PosteriorProbability => DecisionRule::PosteriorProbability,
            Rule::UpperCredibleLimit => DecisionRule::UpperCredibleLimit,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "schema_version": SCHEMA_VERSION, "error": error_code(&e), "message": format!("{e:#}") });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(d) = cause.downcast_ref::<DistFitError>() {
            return match d {
                DistFitError::DegenerateTriplet { .. } => "invalid_triplet",
                DistFitError::NonConvergence { .. } => "non_convergence",
                _ => "distfit",
            };
        }
        if cause.is::<AggregateError>() {
            return "aggregate";
        }
        if let Some(a) = cause.downcast_ref::<AssuranceError>() {
            return match a {
                AssuranceError::TargetUnreachable { .. } => "target_unreachable",
                _ => "assurance",
            };
        }
        if cause.is::<PearsonError>() {
            return "pearson";
        }
        if cause.is::<SurveyError>() {
            return "survey";
        }
        if cause.is::<SessionError>() {
            return "session";
        }
        if cause.is::<StoreError>() {
            return "storage";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn print_line(text: &str) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed pipe (`| head`) is not an error
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn print_json(value: &impl Serialize) -> Result<()> {
    print_line(&serde_json::to_string_pretty(value)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

fn load_samples(path: &Path) -> Result<PriorSampleSet> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let meta = sidecar_path(path);
    let sidecar: Option<SampleSidecar> =
        if meta.exists() { Some(serde_json::from_str(&read(&meta)?).with_context(|| format!("parsing {}", meta.display()))?) } else { None };
    Ok(PriorSampleSet::read_csv(std::io::BufReader::new(file), sidecar)
        .with_context(|| format!("parsing {}", path.display()))?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit { lower, mode, upper, ci } => {
            let t = ElicitedTriplet::new(lower, mode, upper)?;
            let fit = fit_beta_from_triplet(&t, CiLevel::new(ci)?)?;
            print_json(&json!({
                "schema_version": SCHEMA_VERSION,
                "beta_params": fit.params,
                "summary": fit.params.summary(),
                "kappa": fit.kappa,
                "residuals": { "lower": fit.residual_lower, "upper": fit.residual_upper },
            }))
        }
        Command::Aggregate(args) => aggregate(args),
        Command::FitDelta { samples, out } => {
            let set = load_samples(&samples)?;
            let prior = AnalysisPrior::from_samples(&set)?;
            let p = &prior.delta_prior;
            let body = json!({
                "schema_version": SCHEMA_VERSION,
                "p1_marginal": prior.p1_marginal,
                "delta_prior": prior.delta_prior,
                "delta_mean": p.mean(),
                "delta_sd": p.variance().map(f64::sqrt),
            });
            if let Some(path) = out {
                write_json(&path, &prior)?;
            }
            print_json(&body)
        }
        Command::Margin { survey } => {
            let responses = parse_survey(&read(&survey)?)?;
            let m = median_margin(&responses);
            eprintln!("{} responses; risk-difference margin {}", responses.len(), margin_to_probability(m));
            print_line(&m.to_string())
        }
        Command::Assurance(args) => assurance(args),
        Command::Token { token_secret, session, expert } => {
            let token = match (session, expert) {
                (Some(s), Some(e)) => elicit_service::expert_token(&token_secret, &s, &e),
                _ => elicit_service::facilitator_token(&token_secret),
            };
            print_line(&token)
        }
        Command::Serve { bind, data_dir, token_secret } => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
                )
                .with_writer(std::io::stderr)
                .init();
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(elicit_service::serve(ServiceConfig { bind, data_dir, token_secret }))?;
            Ok(())
        }
    }
}

fn aggregate(args: AggregateArgs) -> Result<()> {
    let session = WorkshopSession::import_session(&read(&args.session)?)
        .with_context(|| format!("loading session {}", args.session.display()))?;
    let profiles: Vec<_> = session.experts().iter().map(|e| e.profile.clone()).collect();
    let marginals = match &args.from_moments {
        Some(path) => marginals_from_moments(&parse_moments_table(&read(path)?)?, Round::Two)?,
        None => session
            .final_marginals()?
            .into_iter()
            .map(|m| (m.profile.expert_id, m.high_dose, m.low_dose))
            .collect(),
    };
    let cfg = PipelineConfig {
        pseudo_samples: args.pseudo_samples,
        chains: args.chains,
        burn_in: args.burn_in,
        gibbs_draws: args.gibbs_draws,
        draws: args.draws,
        seed: args.seed,
    };
    let (samples, report) = aggregate_experts(&marginals, &profiles, cfg)?;
    if !report.diagnostics.converged {
        eprintln!("warning: sampler did not converge (max R-hat {:.3})", report.diagnostics.max_rhat);
    }

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let csv_path = args.out.join("prior_samples.csv");
    let file = File::create(&csv_path).with_context(|| format!("writing {}", csv_path.display()))?;
    let mut w = BufWriter::new(file);
    samples.write_csv(&mut w)?;
    w.flush()?;
    write_json(&sidecar_path(&csv_path), &samples.sidecar())?;

    let mut summary = serde_json::to_value(&report)?;
    if let Value::Object(m) = &mut summary {
        m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    write_json(&args.out.join("aggregate_summary.json"), &summary)?;
    print_json(&summary)
}

fn assurance(args: AssuranceArgs) -> Result<()> {
    let samples = load_samples(&args.prior)?;
    let prior: AnalysisPrior = serde_json::from_str(&read(&args.analysis_prior)?)
        .with_context(|| format!("parsing {}", args.analysis_prior.display()))?;
    let mut design = TrialDesign::new(args.margin, args.n_min, args.sims, args.threshold, args.seed)?;
    design.rule = args.rule.into();
    design.grid = GridSpec { n_p1: args.grid, n_delta: args.grid };
    let targets = SearchTargets {
        rel_target: args.rel_target,
        null_cap: args.null_cap,
        null_se_allowance: args.null_se_allowance,
        n_min: args.n_min,
        n_max: args.n_max,
        n_step: args.n_step,
    };
    let write_curve = |curve: &[_]| -> Result<()> {
        let file = File::create(&args.out).with_context(|| format!("writing {}", args.out.display()))?;
        write_curve_csv(curve, BufWriter::new(file))?;
        Ok(())
    };
    match find_sample_size(&design, &samples, &prior, targets) {
        Ok(choice) => {
            write_curve(&choice.curve)?;
            print_json(&json!({
                "schema_version": SCHEMA_VERSION,
                "n_total": choice.chosen.n_total,
                "n_per_arm": choice.chosen.n_total / 2,
                "chosen": choice.chosen,
                "curve": args.out,
            }))
        }
        Err(AssuranceError::TargetUnreachable { curve }) => {
            write_curve(&curve)?;
            Err(AssuranceError::TargetUnreachable { curve }.into())
        }
        Err(e) => Err(e.into()),
    }
}
