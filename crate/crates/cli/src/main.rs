//! `leo`: normalize code, train and evaluate OOD detectors, generate
//! synthetic corpora.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use leo_core::metrics::{score_dump_csv, Population};
use leo_core::normalize::Vocabulary;
use leo_core::objective::ContrastiveVariant;
use leo_core::pipeline::{
    evaluate, generate_synthetic, load_dataset, load_model, normalize_records, save_model, score_records,
    split_dataset, train, train_and_evaluate_repeated, write_dataset, ScoreKind, SynthSpec, TrainConfig,
};

#[derive(Parser)]
#[command(name = "leo", version, about = "Out-of-distribution detection for C/C++ functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize every function of a dataset to statement token lists (JSON lines).
    Normalize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vocabulary from the training split (one token per line).
    Vocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a model and write it to `--model`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate on ID and OOD test sets. Uses `--model`, or trains from
    /// `--data` (averaging over `--repeats` seeds).
    Eval {
        #[arg(long, required_unless_present = "data")]
        model: Option<PathBuf>,
        #[arg(long, conflicts_with = "model")]
        data: Option<PathBuf>,
        #[arg(long)]
        id_test: PathBuf,
        #[arg(long)]
        ood_test: PathBuf,
        /// Report path (`metric,value`).
        #[arg(long)]
        out: PathBuf,
        /// Score dump path (`id,population,score,decision`).
        #[arg(long)]
        dump: Option<PathBuf>,
        /// `mahalanobis` or `msp`.
        #[arg(long, default_value = "mahalanobis")]
        score: String,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a dataset with a trained model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Population label written to the dump: `id` or `ood`.
        #[arg(long, default_value = "id")]
        population: String,
        #[arg(long, default_value = "mahalanobis")]
        score: String,
    },
    /// Compare the full model against the ablation without the random-mask
    /// step and contrastive term.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id_test: PathBuf,
        #[arg(long)]
        ood_test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic corpus: id_train.jsonl, id_test.jsonl, ood_test.jsonl.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n_id: usize,
        #[arg(long, default_value_t = 250)]
        n_id_test: usize,
        #[arg(long, default_value_t = 500)]
        n_ood: usize,
    },
}

/// Configuration file plus per-flag overrides.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    /// `cluster` or `supervised-class`.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    ablate_cd: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(0);
        let mut seeded = false;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            seeded = cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            seeded = true;
        }
        if !seeded {
            bail!("a seed is required (--seed or `seed = ...` in --config)");
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.nu {
            cfg.nu = v;
        }
        if let Some(v) = &self.variant {
            cfg.variant = ContrastiveVariant::parse(v).with_context(|| format!("unknown variant `{v}`"))?;
        }
        if self.ablate_cd {
            cfg.ablate_cd = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn score_kind(s: &str) -> Result<ScoreKind> {
    ScoreKind::parse(s).with_context(|| format!("unknown score `{s}` (expected mahalanobis or msp)"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Normalize { data, out } => {
            let records = load_dataset(&data)?;
            let norm = normalize_records(&records, leo_core::pipeline::default_threads())?;
            let mut s = String::new();
            for (r, n) in records.iter().zip(&norm) {
                let obj = serde_json::json!({ "id": r.id, "label": r.label, "statements": n.statements });
                writeln!(s, "{obj}")?;
            }
            write(&out, &s)?;
        }
        Command::Vocab { data, out, cfg } => {
            let cfg = cfg.resolve()?;
            let records = load_dataset(&data)?;
            let (train_part, _) = split_dataset(&records, cfg.val_fraction, cfg.seed)?;
            let norm = normalize_records(&train_part, leo_core::pipeline::default_threads())?;
            let vocab = Vocabulary::build(&norm, cfg.vocab_max)?;
            let mut s = vocab.tokens().join("\n");
            s.push('\n');
            write(&out, &s)?;
        }
        Command::Train { data, model, cfg } => {
            let cfg = cfg.resolve()?;
            let records = load_dataset(&data)?;
            let (artifact, log) = train(&cfg, &records)?;
            save_model(&artifact, &model)?;
            eprint!("{}", log.digest());
            eprintln!("threshold {}", artifact.detector.threshold);
        }
        Command::Eval {
            model,
            data,
            id_test,
            ood_test,
            out,
            dump,
            score,
            repeats,
            cfg,
        } => {
            let kind = score_kind(&score)?;
            let artifact = model.as_deref().map(load_model).transpose()?;
            let id = load_dataset(&id_test)?;
            let ood = load_dataset(&ood_test)?;
            if let Some(artifact) = artifact {
                let (report, records) = evaluate(&artifact, &id, &ood, kind)?;
                write(&out, &report.to_csv())?;
                if let Some(d) = dump {
                    write(&d, &score_dump_csv(&records))?;
                }
                print!("{}", report.to_csv());
            } else {
                let data = data.context("--model or --data is required")?;
                let cfg = cfg.resolve()?;
                let records = load_dataset(&data)?;
                let rep = train_and_evaluate_repeated(&cfg, &records, &id, &ood, repeats, kind)?;
                let mut s = String::from("metric,value\n");
                writeln!(s, "fpr_at_tpr95,{}", rep.mean_fpr)?;
                writeln!(s, "auroc,{}", rep.mean_auroc)?;
                writeln!(s, "aupr,{}", rep.mean_aupr)?;
                writeln!(s, "repeats,{}", rep.runs.len())?;
                write(&out, &s)?;
                print!("{s}");
            }
        }
        Command::Score {
            model,
            data,
            out,
            population,
            score,
        } => {
            let pop = match population.as_str() {
                "id" => Population::Id,
                "ood" => Population::Ood,
                p => bail!("unknown population `{p}` (expected id or ood)"),
            };
            let artifact = load_model(&model)?;
            let records = load_dataset(&data)?;
            let scored = score_records(&artifact, &records, pop, score_kind(&score)?)?;
            write(&out, &score_dump_csv(&scored))?;
        }
        Command::Ablate {
            data,
            id_test,
            ood_test,
            out,
            repeats,
            cfg,
        } => {
            let cfg = cfg.resolve()?;
            let records = load_dataset(&data)?;
            let id = load_dataset(&id_test)?;
            let ood = load_dataset(&ood_test)?;
            let full = TrainConfig {
                ablate_cd: false,
                ..cfg.clone()
            };
            let ablated = TrainConfig { ablate_cd: true, ..cfg };
            let mut s = String::from("model,fpr_at_tpr95,auroc,aupr\n");
            for (name, c) in [("leo", full), ("leo-wo-cd", ablated)] {
                let r = train_and_evaluate_repeated(&c, &records, &id, &ood, repeats, ScoreKind::Mahalanobis)?;
                writeln!(s, "{name},{},{},{}", r.mean_fpr, r.mean_auroc, r.mean_aupr)?;
            }
            write(&out, &s)?;
            print!("{s}");
        }
        Command::Synth {
            out,
            seed,
            n_id,
            n_id_test,
            n_ood,
        } => {
            let corpus = generate_synthetic(&SynthSpec {
                id_per_family: n_id,
                id_test_per_family: n_id_test,
                ood: n_ood,
                seed,
            });
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_dataset(&out.join("id_train.jsonl"), &corpus.id_train)?;
            write_dataset(&out.join("id_test.jsonl"), &corpus.id_test)?;
            write_dataset(&out.join("ood_test.jsonl"), &corpus.ood_test)?;
        }
    }
    Ok(())
}

fn init_logging() {
    let mut b = env_logger::Builder::new();
    b.filter_level(log::LevelFilter::Warn);
    if let Ok(spec) = std::env::var("LEO_LOG") {
        b.parse_filters(&spec);
    }
    b.format_timestamp(None).init();
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
