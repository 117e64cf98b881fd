mod config;
mod render;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scseg::data::{
    load_manifest, read_case, write_dataset, write_labels, zscore_normalize, CaseVolume, Split,
};
use scseg::gradcheck::{is_known_scope, run_scope, DEFAULT_STEP, TOLERANCE};
use scseg::regions::{aggregate_report, CaseDice, DiceReport};
use scseg::train::{evaluate, predict_labels, score_case, train_loop};
use scseg::unet::{build_network, Network, VariantId};
use scseg::{checkpoint::Checkpoint, Error};

use config::RunConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Volumetric tumor segmentation with self-calibrated convolutions.
#[derive(Parser, Debug)]
#[command(name = "scseg", version)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Single-threaded kernels for bitwise reproducibility.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Output directory (dataset for gen-data, run directory otherwise).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct NetFlags {
    #[arg(long)]
    variant: Option<VariantId>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    /// Pooling rate of the self-calibrated modules.
    #[arg(long)]
    sc_r: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom dataset and its manifest.
    GenData,
    /// Train a network on the dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        net: NetFlags,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_split, default_value = "val")]
        split: Split,
        /// Score the ground truth against itself instead of a network.
        #[arg(long)]
        oracle: bool,
    },
    /// Predict labels for one case.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Case header (`<id>.vol.json`).
        #[arg(long)]
        case: PathBuf,
        /// Also write axial mid-slice PNGs with the label overlay.
        #[arg(long)]
        render: bool,
    },
    /// Compare analytic gradients with finite differences in f64.
    Gradcheck {
        /// A primitive name, `scconv`, `unet-tiny`, `ops` or `all`.
        scope: String,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
    },
    /// Parameter counts of every variant.
    Params {
        #[command(flatten)]
        net: NetFlags,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        other => Err(format!("unknown split {other:?} (train, val)")),
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
            Error::InvalidArgument { .. } | Error::Phantom(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<image::ImageError> for Failure {
    fn from(e: image::ImageError) -> Self {
        Failure {
            code: EXIT_DATA,
            message: format!("render: {e}"),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    })
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: EXIT_DATA,
        message: format!("{}: {e}", dir.display()),
    })
}

fn apply_net_flags(cfg: &mut RunConfig, net: &NetFlags) {
    let n = &mut cfg.network;
    if let Some(v) = net.variant {
        n.variant = v;
    }
    if let Some(p) = net.patch {
        n.patch_size = p;
    }
    if let Some(d) = net.depth {
        n.depth = d;
    }
    if let Some(b) = net.base_channels {
        n.base_channels = b;
    }
    if let Some(r) = net.sc_r {
        n.sc.r = r;
    }
}

fn load_split(dir: &Path, split: Split) -> Result<Vec<CaseVolume>, Failure> {
    let manifest = load_manifest(dir)?;
    let cases = manifest.load_cases(dir, split)?;
    Ok(cases.iter().map(zscore_normalize).collect())
}

fn load_network(path: &Path) -> Result<Network<f32>, Failure> {
    Ok(Network::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn cmd_gen_data(cfg: &RunConfig) -> CmdResult {
    let dir = &cfg.paths.data_dir;
    let manifest = write_dataset(dir, &cfg.phantom, cfg.dataset.cases)?;
    println!(
        "wrote {} train + {} val cases to {}",
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> CmdResult {
    cfg.network.validate()?;
    let dir = &cfg.paths.data_dir;
    let train = load_split(dir, Split::Train)?;
    let val = load_split(dir, Split::Val)?;
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let resolved = toml::to_string(cfg).map_err(|e| Failure::usage(e.to_string()))?;
    write_text(&out.join("config.toml"), &resolved)?;
    let mut net = build_network::<f32>(&cfg.network, cfg.train.seed)?;
    println!(
        "training {} ({} parameters) on {} cases, validating on {}",
        cfg.network.variant,
        net.parameter_count(),
        train.len(),
        val.len()
    );
    let outcome = train_loop(&mut net, &train, &val, &cfg.train, Some(out))?;
    for r in &outcome.log {
        let dice = r
            .val_dice
            .map(|d| format!("  val ET {:.4} TC {:.4} WT {:.4}", d[0], d[1], d[2]))
            .unwrap_or_default();
        println!(
            "epoch {:>3}  loss {:.5}  lr {:.6}{dice}  ({:.1}s)",
            r.epoch, r.train_loss, r.lr, r.seconds
        );
    }
    if let Some((epoch, dice)) = outcome.best {
        println!("best mean validation Dice {dice:.4} at epoch {epoch}");
    }
    Ok(())
}

fn write_report(out: &Path, report: &DiceReport, label: &str) -> CmdResult {
    create_dir(out)?;
    write_text(&out.join("eval_report.jsonl"), &report.to_jsonl()?)?;
    let table = report.table(label);
    write_text(&out.join("eval_table.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, split: Split, oracle: bool) -> CmdResult {
    let cases = load_split(&cfg.paths.data_dir, split)?;
    if cases.is_empty() {
        return Err(Failure {
            code: EXIT_DATA,
            message: "the requested split has no cases".into(),
        });
    }
    let report = if oracle {
        let scored = cases
            .iter()
            .map(|c| score_case(&c.case_id, c.labels(), c.labels()))
            .collect::<Result<Vec<CaseDice>, _>>()?;
        aggregate_report(scored)?
    } else {
        let net = load_network(&cfg.checkpoint())?;
        evaluate(&net, &cases, cfg.train.overlap)?
    };
    let label = if oracle {
        "oracle".to_string()
    } else {
        cfg.checkpoint().display().to_string()
    };
    write_report(&cfg.paths.out_dir, &report, &label)
}

fn cmd_infer(cfg: &RunConfig, case: &Path, render: bool) -> CmdResult {
    let net = load_network(&cfg.checkpoint())?;
    let (volume, _) = read_case(case)?;
    let normalized = zscore_normalize(&volume);
    let labels = predict_labels(&net, &normalized, cfg.train.overlap)?;
    let out = &cfg.paths.out_dir;
    create_dir(out)?;
    let stem = format!("{}_pred", volume.case_id);
    let path = write_labels(out, &stem, &labels)?;
    println!(
        "{}: WT {} voxels, TC {}, ET {} -> {}",
        volume.case_id,
        labels.tumor_voxels(),
        labels.count(scseg::regions::NCR) + labels.count(scseg::regions::ET),
        labels.count(scseg::regions::ET),
        path.display()
    );
    if render {
        for p in render::render_mid_slice(&volume, &labels, out, &stem)? {
            println!("rendered {}", p.display());
        }
    }
    Ok(())
}

fn cmd_gradcheck(scope: &str, step: f64, seed: u64) -> CmdResult {
    if !is_known_scope(scope) {
        return Err(Failure::usage(format!("unknown gradcheck scope {scope:?}")));
    }
    if !(step > 0.0) {
        return Err(Failure::usage("--step must be positive"));
    }
    let reports = run_scope(scope, step, seed)?;
    let mut ok = true;
    for report in &reports {
        for g in &report.groups {
            let pass = g.max_rel_err < TOLERANCE && g.checked > 0;
            ok &= pass;
            println!(
                "{:<5} {:<22} {:<28} rel {:.3e}  elementwise {:.3e}  probes {}  skipped {}",
                if pass { "PASS" } else { "FAIL" },
                report.scope,
                g.name,
                g.max_rel_err,
                g.max_elementwise_err,
                g.checked,
                g.skipped
            );
        }
    }
    let worst = reports.iter().map(|r| r.max_rel_err()).fold(0.0, f64::max);
    println!("max relative error {worst:.3e} (tolerance {TOLERANCE:e})");
    if ok {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_NUMERIC,
            message: "gradient check failed".into(),
        })
    }
}

fn cmd_params(cfg: &RunConfig) -> CmdResult {
    let mut base = None;
    println!("{:<10} {:>12} {:>12}", "variant", "parameters", "delta");
    for v in VariantId::ALL {
        let mut n = cfg.network.clone();
        n.variant = v;
        let net = build_network::<f32>(&n, 0)?;
        let count = net.parameter_count();
        let b = *base.get_or_insert(count);
        println!(
            "{:<10} {:>12} {:>+12}",
            v.to_string(),
            count,
            count as i64 - b as i64
        );
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(Failure::usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    cfg.deterministic |= cli.deterministic;
    scseg::set_deterministic(cfg.deterministic);
    let seed = cfg.seed.unwrap_or(cfg.train.seed);

    match cli.command {
        Command::GenData => {
            if let Some(out) = cli.out {
                cfg.paths.data_dir = out;
            }
            cmd_gen_data(&cfg)
        }
        Command::Train {
            data,
            net,
            epochs,
            batches,
        } => {
            if let Some(out) = cli.out {
                cfg.paths.out_dir = out;
            }
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            apply_net_flags(&mut cfg, &net);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batches {
                cfg.train.batches_per_epoch = b;
            }
            cmd_train(&cfg)
        }
        Command::Eval {
            data,
            checkpoint,
            split,
            oracle,
        } => {
            if let Some(out) = cli.out {
                cfg.paths.out_dir = out;
            }
            if let Some(d) = data {
                cfg.paths.data_dir = d;
            }
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            cmd_eval(&cfg, split, oracle)
        }
        Command::Infer {
            checkpoint,
            case,
            render,
        } => {
            if let Some(out) = cli.out {
                cfg.paths.out_dir = out;
            }
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            cmd_infer(&cfg, &case, render)
        }
        Command::Gradcheck { scope, step } => cmd_gradcheck(&scope, step, seed),
        Command::Params { net } => {
            apply_net_flags(&mut cfg, &net);
            cmd_params(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
