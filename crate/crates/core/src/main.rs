use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use merge_surgeon::bias::LossKind;
use merge_surgeon::config::{configure_threads, RunConfig};
use merge_surgeon::pipeline::{
    run_pipeline, stage_bias, stage_eval, stage_finetune, stage_gen, stage_merge, stage_pretrain, stage_report,
    stage_surgery,
};
use merge_surgeon::report::results_csv;
use merge_surgeon::surgery::SurgeryMode;
use merge_surgeon::Error;

#[derive(Parser)]
#[command(name = "merge-surgeon", version, about = "Model merging, representation bias and surgery adapters")]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory holding every artifact.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic task suite.
    Gen(GenArgs),
    /// Train the shared backbone on the pretraining mixture.
    Pretrain(TrainArgs),
    /// Fine-tune one expert from the pretrained backbone.
    Finetune {
        #[arg(long)]
        task: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Merge the experts into one backbone.
    Merge(MergeArgs),
    /// Per-layer representation bias of the merged model against the experts.
    Bias {
        #[arg(long)]
        psi: Option<LossKind>,
        /// Correct the merged model with the stored stack of this mode.
        #[arg(long)]
        surgery: Option<SurgeryMode>,
    },
    /// Train a surgery adapter stack on unlabeled inputs.
    Surgery(SurgeryArgs),
    /// Accuracy of experts, merged model and stored stacks.
    Eval {
        /// Stored stacks to evaluate, comma separated.
        #[arg(long, value_delimiter = ',')]
        surgery: Vec<SurgeryMode>,
    },
    /// Write results.csv, bias CSVs and surgery.csv for the configured surgery modes.
    Report,
    /// Run every stage and write the manifest.
    Pipeline,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Hidden widths, comma separated.
    #[arg(long)]
    dims: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MergeArgs {
    /// avg, ta, ties or ada.
    #[arg(long)]
    algo: Option<String>,
    /// A number, or `grid` to search `merge.grid` on validation accuracy.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    keep: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ada_iters: Option<usize>,
}

#[derive(Args)]
struct SurgeryArgs {
    /// v1, v2 or block:<l>.
    #[arg(long)]
    mode: Option<SurgeryMode>,
    #[arg(long)]
    psi: Option<LossKind>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// test, wild, wild:<suite dir> or stream:<fraction>.
    #[arg(long)]
    data: Option<String>,
    /// block or full.
    #[arg(long)]
    gradient: Option<String>,
}

struct Overrides(Vec<(&'static str, String)>);

impl Overrides {
    fn opt(&mut self, key: &'static str, v: Option<impl ToString>) {
        if let Some(v) = v {
            self.0.push((key, v.to_string()));
        }
    }
}

fn train_overrides(o: &mut Overrides, t: &TrainArgs) {
    o.opt("model.dims", t.dims.as_ref());
    o.opt("train.iterations", t.iters);
    o.opt("train.lr", t.lr);
    o.opt("train.batch", t.batch);
    o.opt("seed", t.seed);
}

fn resolve(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg = RunConfig::load(path)?;
    }
    let mut o = Overrides(Vec::new());
    o.opt("run_dir", cli.run_dir.as_ref().map(|p| p.display().to_string()));
    match &cli.command {
        Command::Gen(g) => {
            o.opt("seed", g.seed);
            o.opt("suite.tasks", g.tasks);
            o.opt("suite.dim", g.dim);
            o.opt("suite.classes", g.classes);
            o.opt("suite.n_train", g.n_train);
            o.opt("suite.n_test", g.n_test);
        }
        Command::Pretrain(t) | Command::Finetune { train: t, .. } => train_overrides(&mut o, t),
        Command::Merge(m) => {
            o.opt("merge.algorithm", m.algo.as_ref());
            o.opt("merge.lambda", m.lambda.as_ref());
            o.opt("merge.keep", m.keep);
            o.opt("seed", m.seed);
            o.opt("merge.ada_iterations", m.ada_iters);
        }
        Command::Surgery(s) => {
            o.opt("surgery.psi", s.psi);
            o.opt("surgery.rank", s.rank);
            o.opt("surgery.iterations", s.iters);
            o.opt("surgery.lr", s.lr);
            o.opt("surgery.batch", s.batch);
            o.opt("surgery.data", s.data.as_ref());
            o.opt("surgery.gradient", s.gradient.as_ref());
        }
        Command::Bias { .. } | Command::Eval { .. } | Command::Report | Command::Pipeline => {}
    }
    for (k, v) in o.0 {
        cfg.set(k, &v)?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = resolve(&cli)?;
    configure_threads()?;
    match cli.command {
        Command::Gen(_) => {
            let suite = stage_gen(&cfg)?;
            println!("wrote {} tasks to {}", suite.num_tasks(), cfg.run_dir.join("suite").display());
        }
        Command::Pretrain(_) => {
            let loss = stage_pretrain(&cfg)?;
            println!("pretrained; final loss {loss:.6}");
        }
        Command::Finetune { task, .. } => {
            let acc = stage_finetune(&cfg, task)?;
            println!("expert {task}; test accuracy {:.4}", acc);
        }
        Command::Merge(_) => {
            let out = stage_merge(&cfg)?;
            print!("{}", out.recipe.to_summary().render());
        }
        Command::Bias { psi, surgery } => {
            let report = stage_bias(&cfg, psi.unwrap_or(cfg.surgery.psi), surgery)?;
            print!("{}", report.layer_means_csv());
        }
        Command::Surgery(args) => {
            let mode = args.mode.unwrap_or(SurgeryMode::AllLayers);
            let losses = stage_surgery(&cfg, mode)?;
            let first = losses.first().copied().unwrap_or(f64::NAN);
            let last = losses.last().copied().unwrap_or(f64::NAN);
            println!("surgery {mode}: {} steps, loss {first:.6} -> {last:.6}", losses.len());
        }
        Command::Eval { surgery } => {
            let results = stage_eval(&cfg, &surgery)?;
            print!("{}", results_csv(&results)?);
        }
        Command::Report => {
            for f in stage_report(&cfg, &cfg.surgery.modes)? {
                println!("{}", cfg.run_dir.join(f).display());
            }
        }
        Command::Pipeline => {
            run_pipeline(&cfg, |line| eprintln!("{line}"))?;
            println!("{}", cfg.run_dir.join(merge_surgeon::pipeline::MANIFEST).display());
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage message={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} message={}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
