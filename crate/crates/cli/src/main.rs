use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use cumnet::complexity::{layer_mac, layer_zero_aware_mac, network_mac, zero_aware_mac};
use cumnet::curriculum::{accuracy, train_stage, ClassIncrementalSplit, StageData};
use cumnet::engine::{load_checkpoint, save_checkpoint, Network};
use cumnet::morph::{deepen_at, expand_output, widen_at, Site, DEFAULT_EXPAND_SCALE};
use cumnet::prune::{freeze_net2net_zero_mask, prune_filters, PruneConfig, PruneScope};
use cumnet::robustness::EnsembleSpec;
use cumnet_cli::config::{ExperimentConfig, RobustnessConfig};
use cumnet_cli::output::{num, Outputs};
use cumnet_cli::pipeline;
use cumnet_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "cumnet", version, about = "Cumulative training with function-preserving network growth")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; the config value wins when both are given.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; the config value wins when both are given.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Global,
    PerLayer,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset into nested class-incremental stages and report sizes.
    Split(ConfigArgs),
    /// Train the configured architecture on the first `classes` classes.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply morphs and grow the classifier of a checkpoint.
    Expand {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Deepen after this layer: conv:N, dense:N or layer:N. Repeatable.
        #[arg(long)]
        deepen: Vec<String>,
        /// Widen a layer: SITE=WIDTH. Repeatable.
        #[arg(long)]
        widen: Vec<String>,
        /// Total classes after expansion.
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_EXPAND_SCALE)]
        scale: f32,
        /// Freeze the zero positions created by the deepening morphs.
        #[arg(long)]
        keep_zero_mask: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero and freeze the lowest-L1 conv filters of a checkpoint.
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, value_enum, default_value_t = Scope::Global)]
        scope: Scope,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean accuracy plus noise and ablation sweeps of a checkpoint.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// FGSM accuracy table for a staged ensemble (checkpoints in stage order).
    Attack {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Baseline checkpoint attacked with its own gradients.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Rejection curves with and without mutual inference.
    Detect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
    /// Per-layer MAC accounting of a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the full configured experiment.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Validate and print the planned stages without training.
        #[arg(long)]
        dry_run: bool,
    },
}

fn load_config(a: &ConfigArgs) -> CliResult<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        if s != cfg.seed {
            eprintln!("warning: --seed {s} ignored, config sets seed {}", cfg.seed);
        }
    }
    if let Some(d) = &a.output_dir {
        if *d != cfg.output_dir {
            eprintln!(
                "warning: --output-dir {} ignored, config sets {}",
                d.display(),
                cfg.output_dir.display()
            );
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_site(s: &str) -> CliResult<Site> {
    let (kind, n) = s
        .split_once(':')
        .ok_or_else(|| CliError::Config(format!("site `{s}` should look like conv:0")))?;
    let n: usize = n.parse().map_err(|_| CliError::Config(format!("bad site index in `{s}`")))?;
    match kind {
        "conv" => Ok(Site::Conv(n)),
        "dense" => Ok(Site::Dense(n)),
        "layer" => Ok(Site::Layer(n)),
        _ => Err(CliError::Config(format!("unknown site kind `{kind}`"))),
    }
}

fn robustness(cfg: &ExperimentConfig) -> RobustnessConfig {
    cfg.robustness.clone().unwrap_or_default()
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<Network>> {
    paths.iter().map(|p| Ok(load_checkpoint(p)?)).collect()
}

/// Ensemble over checkpoints, weighted by their accuracy on the classes they know.
fn ensemble(nets: Vec<Network>, test: &cumnet::data::Dataset) -> CliResult<EnsembleSpec> {
    let mut acc = Vec::new();
    let mut members = Vec::new();
    for n in nets {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] < n.num_classes).collect();
        acc.push(accuracy(&n, test, &idx)?);
        let k = n.num_classes;
        members.push((n, k));
    }
    Ok(EnsembleSpec::weighted_by_accuracy(members, &acc)?)
}

fn save(net: &Network, out: &Path) -> CliResult<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(net, out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn execute(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Split(a) => {
            let cfg = load_config(&a)?;
            let (train, test) = cfg.load_data()?;
            let split = ClassIncrementalSplit::new(&train, &test, &cfg.curriculum.stage_classes)?;
            println!("train label histogram: {:?}", train.label_histogram());
            println!("test label histogram:  {:?}", test.label_histogram());
            for (i, k) in split.stage_classes.iter().enumerate() {
                println!("stage {} classes {k} train {} test {}", i + 1, split.train[i].len(), split.test[i].len());
            }
            let mut out = Outputs::new(&cfg.output_dir)?;
            out.text("json", "split.json", &serde_json::to_string_pretty(&split)?)?;
        }
        Command::Train { cfg: a, classes, out } => {
            let cfg = load_config(&a)?;
            let (train, test) = cfg.load_data()?;
            let k = classes.unwrap_or(train.num_classes);
            let split = ClassIncrementalSplit::new(&train, &test, &[k.min(train.num_classes), train.num_classes])
                .or_else(|_| ClassIncrementalSplit::new(&train, &test, &[train.num_classes]))?;
            let net = pipeline::arch_for(&cfg, k)?.build(cfg.seed)?;
            let t = train_stage(
                &net,
                StageData {
                    train: &train,
                    train_idx: &split.train[0],
                    test: &test,
                    test_idx: &split.test[0],
                    classes: k,
                },
                &cfg.curriculum.stages[0].train,
            )?;
            println!("classes {k} accuracy {} iterations {} epochs {}", num(t.accuracy), t.iterations, t.epochs);
            save(&t.net, &out)?;
        }
        Command::Expand { checkpoint, deepen, widen, classes, scale, keep_zero_mask, out } => {
            let mut net = load_checkpoint(&checkpoint)?;
            let first = net.morph_log.entries.len();
            for d in &deepen {
                let site = parse_site(d)?.resolve(&net)?;
                net = deepen_at(&net, site)?.0;
            }
            for w in &widen {
                let (s, width) = w
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("widen `{w}` should look like dense:0=32")))?;
                let width: usize = width.parse().map_err(|_| CliError::Config(format!("bad width in `{w}`")))?;
                let site = parse_site(s)?.resolve(&net)?;
                net = widen_at(&net, site, width)?.0;
            }
            if let Some(k) = classes {
                if k < net.num_classes {
                    return Err(CliError::Config(format!("cannot shrink {} classes to {k}", net.num_classes)));
                }
                if k > net.num_classes {
                    net = expand_output(&net, k - net.num_classes, scale)?.0;
                }
            }
            if keep_zero_mask {
                let log = cumnet::morph::MorphLog { entries: net.morph_log.entries[first..].to_vec() };
                net = freeze_net2net_zero_mask(&net, &log)?;
            }
            save(&net, &out)?;
        }
        Command::Prune { checkpoint, ratio, scope, out } => {
            let net = load_checkpoint(&checkpoint)?;
            let scope = match scope {
                Scope::Global => PruneScope::Global,
                Scope::PerLayer => PruneScope::PerLayer,
            };
            let (pruned, outcome) = prune_filters(&net, &PruneConfig { ratio, scope, keep_zero_mask: false })?;
            println!(
                "pruned {} filters; nonzero params {} of {}",
                outcome.event.filters.len(),
                outcome.nonzero_params,
                outcome.total_params
            );
            save(&pruned, &out)?;
        }
        Command::Eval { cfg: a, checkpoint } => {
            let cfg = load_config(&a)?;
            let net = load_checkpoint(&checkpoint)?;
            let (_, test) = cfg.load_data()?;
            let idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] < net.num_classes).collect();
            let test = test.subset(&idx);
            let all: Vec<usize> = (0..test.len()).collect();
            println!("accuracy {}", num(accuracy(&net, &test, &all)?));
            let mut out = Outputs::new(&cfg.output_dir)?;
            pipeline::noise_and_ablation(&mut out, &net, &test, &robustness(&cfg), cfg.seed)?;
            for f in &out.files {
                println!("wrote {}", f.path.display());
            }
        }
        Command::Attack { cfg: a, checkpoint, baseline } => {
            let cfg = load_config(&a)?;
            let (_, test) = cfg.load_data()?;
            let spec = ensemble(load_all(&checkpoint)?, &test)?;
            let base = baseline.map(|b| load_checkpoint(&b)).transpose()?;
            let idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] < spec.final_classes()).collect();
            let test = test.subset(&idx);
            let rows = pipeline::attack_table(&spec, base.as_ref(), &test, &robustness(&cfg).eps)?;
            let mut out = Outputs::new(&cfg.output_dir)?;
            pipeline::write_attack_table(&mut out, &rows)?;
            for (e, mi, nomi, b) in rows {
                println!("eps {e} mi {} nomi {} baseline {}", num(mi), num(nomi), cumnet_cli::output::opt(b));
            }
        }
        Command::Detect { cfg: a, checkpoint } => {
            let cfg = load_config(&a)?;
            let (_, test) = cfg.load_data()?;
            let spec = ensemble(load_all(&checkpoint)?, &test)?;
            let idx: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] < spec.final_classes()).collect();
            let test = test.subset(&idx);
            let mut out = Outputs::new(&cfg.output_dir)?;
            let curves = pipeline::detection(&mut out, &spec, &test, &robustness(&cfg))?;
            for (m, f) in curves.mutual.points.iter().zip(&curves.final_only.points) {
                println!(
                    "delta {} tnr_mi {} fnr_mi {} tnr_nomi {} fnr_nomi {}",
                    num(m.delta),
                    num(m.tnr),
                    num(m.fnr),
                    num(f.tnr),
                    num(f.fnr)
                );
            }
        }
        Command::Report { checkpoint } => {
            let net = load_checkpoint(&checkpoint)?;
            let shapes = net.shapes()?;
            println!("layer,kind,input_shape,macs,zero_aware_macs");
            for (i, l) in net.layers.iter().enumerate() {
                println!(
                    "{i},{},{:?},{},{}",
                    l.name(),
                    shapes[i],
                    layer_mac(l, &shapes[i])?,
                    layer_zero_aware_mac(l, &shapes[i])?
                );
            }
            println!("total,,,{},{}", network_mac(&net)?, zero_aware_mac(&net)?);
            println!("# nonzero params {} of {}", net.nonzero_param_count(), net.param_count());
        }
        Command::Run { cfg: a, dry_run } => {
            let cfg = load_config(&a)?;
            if dry_run {
                print!("{}", pipeline::plan_table(&cfg)?);
                println!("config hash {}", cfg.hash());
                return Ok(());
            }
            let art = pipeline::run(&cfg)?;
            for s in &art.manifest.steps {
                match &s.error {
                    Some(e) => println!("{:<16} {:?}: {e}", s.step, s.status),
                    None => println!("{:<16} {:?}", s.step, s.status),
                }
            }
            if let Some(r) = art.manifest.complexity_ratio {
                println!("M_cumulative / M_baseline = {}", num(r));
            }
            println!("manifest {}", art.manifest_path.display());
            if let Some(e) = art.first_error {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
