use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rsbsim::defenses::Defense;
use rsbsim::harness::{run_matrix, selftest_all, Source};
use rsbsim::machine::{MachineConfig, Preset};
use rsbsim::pipeline::{trace_to_tsv, TraceKind};
use rsbsim::predictors::UnderfillMode;
use rsbsim::scenarios::{
    build_scenario, run_attack_with, Receiver, ScenarioId, ScenarioParams, DEFAULT_SECRET,
};

#[derive(Parser)]
#[command(
    name = "rsbsim",
    version,
    about = "Return stack buffer speculation simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one attack and print its outcome.
    Run(RunArgs),
    /// Run every attack against every defense column.
    Matrix(MatrixArgs),
    /// Demonstrate the four misspeculation sources.
    Selftest(SelftestArgs),
    /// Run one attack and print the pipeline trace.
    Trace(TraceArgs),
}

#[derive(clap::Args)]
struct AttackArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: ScenarioId,
    #[arg(long, default_value = "xeon", value_parser = parse_preset)]
    preset: Preset,
    /// Extra defenses on top of the preset, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_defense)]
    defense: Vec<Defense>,
    /// Start from no defenses instead of the preset's.
    #[arg(long)]
    bare: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Machine configuration file; replaces the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReceiverArg::FlushReload)]
    receiver: ReceiverArg,
    /// Secret to plant, as text.
    #[arg(long)]
    secret: Option<String>,
    /// attack1: read kernel memory instead of the restricted region.
    #[arg(long)]
    kernel_secret: bool,
    /// Directory of `.s` files overriding the built-in programs.
    #[arg(long)]
    assets: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RunArgs {
    #[command(flatten)]
    attack: AttackArgs,
    /// Write the pipeline trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TraceArgs {
    #[command(flatten)]
    attack: AttackArgs,
    /// Only these event kinds.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    kind: Vec<TraceKind>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MatrixArgs {
    #[arg(long, default_value = "xeon", value_parser = parse_preset)]
    preset: Preset,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct SelftestArgs {
    /// s1, s2, s3, s4 or all.
    #[arg(long, default_value = "all", value_parser = parse_source)]
    source: Sources,
    #[arg(long, value_enum, default_value_t = UnderfillArg::Both)]
    underfill: UnderfillArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReceiverArg {
    FlushReload,
    PrimeProbe,
}

#[derive(Clone, Copy, ValueEnum)]
enum UnderfillArg {
    Fallback,
    None,
    Both,
}

fn parse_scenario(s: &str) -> Result<ScenarioId, String> {
    s.parse()
        .map_err(|e: rsbsim::scenarios::ScenarioError| e.to_string())
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse()
        .map_err(|e: rsbsim::machine::ConfigError| e.to_string())
}

fn parse_defense(s: &str) -> Result<Defense, String> {
    s.parse()
        .map_err(|e: rsbsim::defenses::UnknownDefense| e.to_string())
}

#[derive(Clone)]
struct Sources(Vec<Source>);

fn parse_source(s: &str) -> Result<Sources, String> {
    if s.eq_ignore_ascii_case("all") {
        Ok(Sources(Source::ALL.to_vec()))
    } else {
        s.parse().map(|x| Sources(vec![x]))
    }
}

fn parse_kind(s: &str) -> Result<TraceKind, String> {
    s.parse()
}

fn machine_config(a: &AttackArgs) -> Result<MachineConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            MachineConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => MachineConfig::preset(a.preset),
    };
    if a.bare {
        cfg.defenses = Default::default();
    }
    for &d in &a.defense {
        cfg.defenses.set(d, true);
    }
    cfg.seed = a.seed;
    Ok(cfg)
}

fn scenario_params(a: &AttackArgs) -> ScenarioParams {
    ScenarioParams {
        secret: a
            .secret
            .as_ref()
            .map_or_else(|| DEFAULT_SECRET.to_vec(), |s| s.as_bytes().to_vec()),
        kernel_secret: a.kernel_secret,
        receiver: match a.receiver {
            ReceiverArg::FlushReload => Receiver::FlushReload,
            ReceiverArg::PrimeProbe => Receiver::PrimeProbe,
        },
        gadget: None,
        asset_dir: a.assets.clone(),
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let a = &args.attack;
    let cfg = machine_config(a)?;
    let s = build_scenario(a.scenario, &scenario_params(a))?;
    let mut trace = Vec::new();
    let o = run_attack_with(&s, &cfg, args.trace.as_ref().map(|_| &mut trace))?;
    let enabled: Vec<&str> = cfg.defenses.enabled().iter().map(|d| d.flag()).collect();
    println!("scenario  {} ({})", s.id, s.id.describe());
    println!("preset    {}", cfg.preset);
    println!(
        "defenses  {}",
        if enabled.is_empty() {
            "none".to_string()
        } else {
            enabled.join(",")
        }
    );
    println!(
        "result    {}",
        if o.success { "success" } else { "failure" }
    );
    println!("recovered {}", o.recovered_hex());
    println!("expected  {}", hex(&s.secret.bytes));
    println!("accuracy  {:.3}", o.accuracy);
    println!("cycles    {}", o.cycles);
    if let Some(path) = &args.trace {
        fs::write(path, trace_to_tsv(&trace))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_trace(args: TraceArgs) -> Result<()> {
    let a = &args.attack;
    let cfg = machine_config(a)?;
    let s = build_scenario(a.scenario, &scenario_params(a))?;
    let mut trace = Vec::new();
    run_attack_with(&s, &cfg, Some(&mut trace))?;
    if !args.kind.is_empty() {
        trace.retain(|e| args.kind.contains(&e.kind));
    }
    let text = trace_to_tsv(&trace);
    match &args.out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_matrix(args: MatrixArgs) -> Result<()> {
    let report = run_matrix(args.preset, args.seed, args.jobs as usize)?;
    match args.format {
        Format::Text => print!("{}", report.to_text()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_selftest(args: SelftestArgs) -> Result<bool> {
    let results: Vec<_> = selftest_all(&args.source.0)
        .into_iter()
        .filter(|r| match args.underfill {
            UnderfillArg::Both => true,
            UnderfillArg::Fallback => r.underfill == UnderfillMode::FallbackIndirect,
            UnderfillArg::None => r.underfill == UnderfillMode::NoPrediction,
        })
        .collect();
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    Ok(failed == 0)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Run(a) => cmd_run(a).map(|_| true),
        Cmd::Matrix(a) => cmd_matrix(a).map(|_| true),
        Cmd::Selftest(a) => cmd_selftest(a),
        Cmd::Trace(a) => cmd_trace(a).map(|_| true),
    };
    match r {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
