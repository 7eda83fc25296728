use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use leantape::gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
use leantape::layers::{convert_network, parse_layer_filter};
use leantape::memwatch::{policy_label, track_forward};
use leantape::network::{BuiltinNet, LayerTag, NetworkDescription, ProbeLayer, Scenario};
use leantape::planner::{export_dot, plan, probe_sweep, ProbeConfig};
use leantape::report::{write_csv, CsvRow};
use leantape::{Dtype, StoragePolicy};

#[derive(Parser)]
#[command(
    name = "leantape",
    version,
    about = "Tape memory sweeps, scenario runs and gradient checks"
)]
struct Cli {
    /// Seed for inputs, weights and dropout masks.
    #[arg(long, global = true, env = "MEMSAVE_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Depth sweep over a homogeneous chain of one layer kind.
    Probe(ProbeArgs),
    /// Forward and backward of one network under memory tracking.
    Scenario(ScenarioArgs),
    /// Finite-difference check of every requested gradient under both policies.
    Gradcheck(GradcheckArgs),
    /// Graphviz export of the storage plan.
    Graph(GraphArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyChoice {
    Naive,
    Memsave,
    Both,
}

impl PolicyChoice {
    fn policies(self) -> Vec<StoragePolicy> {
        match self {
            PolicyChoice::Naive => vec![StoragePolicy::Naive],
            PolicyChoice::Memsave => vec![StoragePolicy::MemSave],
            PolicyChoice::Both => vec![StoragePolicy::Naive, StoragePolicy::MemSave],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeChoice {
    F32,
    F64,
}

#[derive(Args)]
struct NetArgs {
    /// Builtin network name, e.g. deep-cnn, bottleneck, mlp, attention,
    /// probe-conv2d.
    #[arg(long, conflicts_with = "file", required_unless_present = "file")]
    net: Option<String>,
    /// JSON network description.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Depth or block count of the builtin.
    #[arg(long)]
    depth: Option<usize>,
}

impl NetArgs {
    fn load(&self, seed: u64, small: bool) -> anyhow::Result<NetworkDescription> {
        let net = match (&self.net, &self.file) {
            (Some(name), _) => {
                let b = if small {
                    BuiltinNet::small(name, self.depth)?
                } else {
                    BuiltinNet::from_name(name, self.depth)?
                };
                b.build().with_seed(seed)
            }
            (None, Some(path)) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                NetworkDescription::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            (None, None) => bail!(Usage("either --net or --file is required".into())),
        };
        Ok(net)
    }
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    layer: ProbeLayer,
    #[arg(long, default_value_t = 12)]
    max_depth: usize,
    #[arg(long, value_enum, default_value_t = PolicyChoice::Both)]
    policy: PolicyChoice,
    /// `sweep` (all, none, from-k, only-k), `paper` (all, input, norm,
    /// surgical), or a comma-separated list of scenarios.
    #[arg(long, default_value = "sweep")]
    scenario_set: String,
    /// Layer index k of the from-k and only-k curves.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Timed executions per point; 0 plans without executing.
    #[arg(long, default_value_t = 1)]
    timing_reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Comma-separated scenarios, or `paper` for all four.
    #[arg(long, default_value = "all")]
    scenario: String,
    #[arg(long, value_enum, conflicts_with = "ablate_kinds")]
    policy: Option<PolicyChoice>,
    /// Progressive swap to memsave, one layer kind at a time.
    #[arg(long, num_args = 0..=1, default_missing_value = "conv2d,relu")]
    ablate_kinds: Option<String>,
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value = "all")]
    scenario: Scenario,
    #[arg(long, value_enum, default_value_t = DtypeChoice::F64)]
    dtype: DtypeChoice,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Coordinates sampled per leaf.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Use the preset at its full desk size instead of the shrunken one.
    #[arg(long)]
    full_size: bool,
}

#[derive(Args)]
struct GraphArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value = "all")]
    scenario: Scenario,
    #[arg(long, value_enum, default_value_t = PolicyChoice::Memsave)]
    policy: PolicyChoice,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Debug)]
struct Verification(String);

impl std::fmt::Display for Verification {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Verification {}

fn parse_scenarios(spec: &str, k: usize) -> anyhow::Result<Vec<Scenario>> {
    match spec.trim() {
        "sweep" => Ok(Scenario::sweep_set(k).to_vec()),
        "paper" => Ok(Scenario::PAPER_SET.to_vec()),
        list => list
            .split(',')
            .map(|s| s.parse::<Scenario>().map_err(|e| Usage(e.to_string()).into()))
            .collect(),
    }
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => io::stdout().write_all(bytes).context("writing to stdout"),
    }
}

fn emit_csv(out: Option<&Path>, rows: &[CsvRow]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    emit(out, &buf)?;
    if let Some(path) = out {
        eprintln!("wrote {} rows to {}", rows.len(), path.display());
    }
    Ok(())
}

fn cmd_probe(args: &ProbeArgs, seed: u64) -> anyhow::Result<()> {
    if args.max_depth == 0 {
        bail!(Usage("--max-depth must be at least 1".into()));
    }
    let mut cfg = ProbeConfig::new(args.layer, args.max_depth);
    cfg.scenarios = parse_scenarios(&args.scenario_set, args.k)?;
    cfg.policies = args.policy.policies();
    cfg.reps = args.timing_reps;
    cfg.seed = seed;
    let rows: Vec<CsvRow> = probe_sweep(&cfg)?.iter().map(CsvRow::from).collect();
    emit_csv(args.out.as_deref(), &rows)
}

fn cmd_scenario(args: &ScenarioArgs, seed: u64) -> anyhow::Result<()> {
    let net = args.net.load(seed, false)?;
    let scenarios = parse_scenarios(&args.scenario, 4)?;
    let mut variants: Vec<(NetworkDescription, Option<StoragePolicy>)> = Vec::new();
    if let Some(kinds) = &args.ablate_kinds {
        let kinds = parse_layer_filter(kinds).map_err(|e| Usage(e.to_string()))?;
        let mut current = convert_network(&net, StoragePolicy::Naive, None);
        variants.push((current.clone(), None));
        let mut swapped: BTreeSet<LayerTag> = BTreeSet::new();
        for kind in [LayerTag::Conv2d, LayerTag::Relu]
            .into_iter()
            .chain(kinds.iter().copied())
        {
            if !kinds.contains(&kind) || !swapped.insert(kind) {
                continue;
            }
            current = convert_network(&current, StoragePolicy::MemSave, Some(&[kind].into_iter().collect()));
            variants.push((current.clone(), None));
        }
    } else {
        match args.policy {
            Some(choice) => variants.extend(choice.policies().into_iter().map(|p| (net.clone(), Some(p)))),
            None => variants.push((net.clone(), None)),
        }
    }
    let mut rows = Vec::new();
    for scenario in &scenarios {
        for (variant, policy) in &variants {
            let effective = match policy {
                Some(p) => convert_network(variant, *p, None),
                None => variant.clone(),
            };
            let diff = scenario.resolve(&effective);
            let report = track_forward(variant, &diff, &scenario.name(), *policy, args.reps)?;
            eprintln!(
                "{:<12} {:<24} tape {:>10} B  peak {:>10} B  fwd {:>8.2} ms  bwd {:>8.2} ms",
                scenario.name(),
                policy_label(&effective),
                report.tape_bytes,
                report.peak_bytes,
                report.forward_seconds * 1e3,
                report.backward_seconds * 1e3,
            );
            rows.push(CsvRow::from(&report));
        }
    }
    emit_csv(args.out.as_deref(), &rows)
}

fn print_gradcheck(r: &GradcheckReport) {
    println!("net {}  tolerance {:e}", r.net, r.tol);
    let leaves: Vec<String> = r.grad_leaves.iter().map(ToString::to_string).collect();
    println!("gradients: {}", leaves.join(" "));
    for p in &r.policies {
        match p.worst() {
            Some(w) => println!(
                "{:<8} max rel err {:.3e}  worst {}[{}] analytic {:.9e} numeric {:.9e}",
                p.policy.name(),
                p.max_rel_err(),
                w.leaf,
                w.worst_index,
                w.analytic,
                w.numeric
            ),
            None => println!("{:<8} nothing checked", p.policy.name()),
        }
        for l in &p.leaves {
            if l.skipped > 0 {
                println!("         {}: {} kink coordinates skipped", l.leaf, l.skipped);
            }
        }
    }
    println!("policy gap {:e}", r.policy_gap);
}

fn cmd_gradcheck(args: &GradcheckArgs, seed: u64) -> anyhow::Result<()> {
    if matches!(args.dtype, DtypeChoice::F32) {
        bail!(Usage("finite differences need --dtype f64".into()));
    }
    let net = args.net.load(seed, !args.full_size)?.with_dtype(Dtype::F64);
    let diff = args.scenario.resolve(&net);
    let cfg = GradcheckConfig {
        tol: args.tol,
        samples: args.samples,
        seed,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&net, &diff, &cfg).map_err(|e| Usage(e.to_string()))?;
    print_gradcheck(&report);
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        bail!(Verification(format!(
            "gradient check failed: max rel err {:.3e}, policy gap {:e}",
            report.max_rel_err(),
            report.policy_gap
        )))
    }
}

fn cmd_graph(args: &GraphArgs, seed: u64) -> anyhow::Result<()> {
    let policy = match args.policy {
        PolicyChoice::Naive => StoragePolicy::Naive,
        PolicyChoice::Memsave => StoragePolicy::MemSave,
        PolicyChoice::Both => bail!(Usage("graph needs a single policy".into())),
    };
    let net = convert_network(&args.net.load(seed, false)?, policy, None);
    let p = plan(&net, &args.scenario.resolve(&net))?;
    emit(args.out.as_deref(), export_dot(&net, &p).as_bytes())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    if err.downcast_ref::<Verification>().is_some() {
        return 1;
    }
    match err.downcast_ref::<leantape::Error>() {
        Some(
            leantape::Error::UnknownNet(_)
            | leantape::Error::UnknownLayerKind(_)
            | leantape::Error::InvalidConfig(_)
            | leantape::Error::ShapePropagation { .. }
            | leantape::Error::InvalidShape(_)
            | leantape::Error::Json(_),
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Probe(a) => cmd_probe(a, cli.seed),
        Command::Scenario(a) => cmd_scenario(a, cli.seed),
        Command::Gradcheck(a) => cmd_gradcheck(a, cli.seed),
        Command::Graph(a) => cmd_graph(a, cli.seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
