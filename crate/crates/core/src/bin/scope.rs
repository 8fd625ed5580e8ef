use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use scope_lab::harness::{
    alpha_sweep, beta_sweep, classify_regime, load_report, negative_quality, split_ablation, EvalReport, HarnessError,
    PipelineConfig, Strategy, SweepRow, Workspace, CSV_METRICS,
};

#[derive(Parser)]
#[command(name = "scope", about = "Faithful data-to-text generation with self-generated negatives")]
struct Cli {
    /// TOML pipeline config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the corpus and write the split.
    GenCorpus,
    /// Pretrain the unconditional model on targets.
    Pretrain,
    /// Fine-tune on D1 (stage one) and on all of D (baseline).
    Sft,
    /// Build preference triples on D2 by noisy generation.
    GenNegatives {
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Preference tuning from the stage-one model.
    Dpo {
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Decode the held-out set with one strategy.
    Decode {
        #[arg(long, value_enum, default_value = "plain")]
        strategy: StrategyArg,
    },
    /// Run everything that is missing and evaluate all systems.
    Eval,
    /// Sweep one hyperparameter over its configured grid.
    Sweep {
        #[arg(long, value_enum)]
        param: ParamArg,
    },
    /// Print the last evaluation report.
    Report,
    /// Print the effective config as TOML.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Plain,
    Cad,
    Pmi,
    Noisy,
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Alpha,
    Beta,
    Split,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn print_report(r: &EvalReport) {
    print!("{:<10}", "system");
    for m in CSV_METRICS {
        print!(" {m:>20}");
    }
    println!(" {:>14} {:>10}", "win/tie/loss", "mcnemar_p");
    for (name, s) in &r.systems {
        print!("{name:<10}");
        for m in CSV_METRICS {
            print!(" {:>20.4}", s.metric(m).unwrap());
        }
        let judge = s.judge.map(|j| format!("{}/{}/{}", j.win, j.tie, j.loss)).unwrap_or_else(|| "-".into());
        let p =
            s.significance.and_then(|x| x.mcnemar).map(|m| format!("{:.3e}", m.p_value)).unwrap_or_else(|| "-".into());
        println!(" {judge:>14} {p:>10}");
    }
}

fn print_sweep(rows: &[SweepRow]) {
    println!(
        "{:>8} {:>10} {:>10} {:>10} {:>8} {:>12}  error",
        "value", "neg_score", "score", "halluc", "bleu", "regime"
    );
    let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for r in rows {
        let regime = r.regime.map(|g| g.to_string()).unwrap_or_else(|| "-".into());
        println!(
            "{:>8} {:>10} {:>10} {:>10} {:>8} {:>12}  {}",
            r.value,
            f(r.negative_oracle_score),
            f(r.oracle_score),
            f(r.hallucination_rate),
            f(r.bleu.map(|b| b / 100.0)),
            regime,
            r.error.as_deref().unwrap_or("")
        );
    }
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load_config(cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml_string());
        return Ok(());
    }
    if let Command::Report = cli.command {
        let r = load_report(cfg.out_dir.join("reports/eval_report.json")).map_err(|e| e.in_stage("report"))?;
        print_report(&r);
        return Ok(());
    }
    let mut ws = Workspace::open(cfg.clone())?;
    let (ratio, alpha0, beta0) = (cfg.split_ratio, cfg.noise.alpha, cfg.dpo.beta);
    match &cli.command {
        Command::GenCorpus => {
            let s = ws.corpus()?;
            println!("held-out {}  D1 {}  D2 {}", s.heldout.len(), s.d1.len(), s.d2.len());
        }
        Command::Pretrain => {
            ws.p_lm()?;
            println!("{}", ws.path("checkpoints/p_lm.ckpt").display());
        }
        Command::Sft => {
            ws.p_theta0(ratio)?;
            ws.sft_full()?;
            println!("{}", ws.path("checkpoints").display());
        }
        Command::GenNegatives { alpha } => {
            let t = ws.preferences(ratio, alpha.unwrap_or(alpha0))?;
            println!("{} preference triples", t.len());
        }
        Command::Dpo { beta, alpha } => {
            let run = ws.scope(ratio, alpha.unwrap_or(alpha0), beta.unwrap_or(beta0))?;
            let last = run.trace.last().expect("trace is never empty");
            println!(
                "regime {}  logp_preferred {:.3}  margin {:.3}",
                classify_regime(&run.trace, cfg.regime_epsilon),
                last.logp_preferred,
                last.margin.unwrap_or(0.0)
            );
        }
        Command::Decode { strategy } => {
            let s = match strategy {
                StrategyArg::Plain => Strategy::Plain,
                StrategyArg::Cad => Strategy::Cad,
                StrategyArg::Pmi => Strategy::Pmi,
                StrategyArg::Noisy => Strategy::Noisy,
            };
            let outs = ws.decode_heldout(s)?;
            println!("{} outputs -> {}", outs.len(), ws.path(&format!("reports/decode_{}.jsonl", s.name())).display());
        }
        Command::Eval => print_report(&ws.evaluate()?),
        Command::Sweep { param } => {
            let rows = match param {
                ParamArg::Alpha => {
                    let q = negative_quality(&mut ws, &cfg.alpha_grid).map_err(|e| e.in_stage("sweep"))?;
                    for n in q {
                        println!(
                            "alpha {:.2}: negatives score {:.4}, {:.2} hallucinated values",
                            n.alpha, n.oracle_score, n.hallucinated_values
                        );
                    }
                    alpha_sweep(&mut ws, &cfg.alpha_grid)
                }
                ParamArg::Beta => beta_sweep(&mut ws, &cfg.beta_grid),
                ParamArg::Split => split_ablation(&mut ws, &cfg.split_grid),
            }
            .map_err(|e| e.in_stage("sweep"))?;
            print_sweep(&rows);
        }
        Command::Report | Command::Config => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scope: {e}");
            ExitCode::FAILURE
        }
    }
}
