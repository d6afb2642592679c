use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use mole_core::compose::{model_forward, CompositionPlan};
use mole_core::gating::{ExpertMask, Granularity, MixRule};
use mole_core::io::artifacts::{load_adapter, load_base, load_checkpoint};
use mole_core::io::config::RunConfig;
use mole_core::io::{load_model, write_atomic, Artifact, GatedModel};
use mole_core::lora::{layer_range_mask, merge_direct, merge_normalized, ExpertSet, LoraAdapter, MergeWeights};
use mole_core::model::BaseWeights;
use mole_core::tasks::{
    check_vocab, pretrain_base, standard_mixture, train_expert_lora, Dataset, Split, SyntheticTaskSpec,
};
use mole_core::training::{argmax, evaluate, temperature_sweep, GateTrainer, TrainConfig};
use mole_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mole", version, about = "Train and compose mixtures of LoRA experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a base model and pretrain it on the neutral copy task.
    PretrainBase {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one LoRA expert on a standard synthetic task.
    TrainExpert {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        task_id: usize,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn gating over frozen experts.
    TrainGate {
        #[command(flatten)]
        common: GateArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        entropy_csv: Option<PathBuf>,
        /// Write a resumable checkpoint here after training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from a checkpoint written with the same settings.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Merge experts into the base weights.
    Compose {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        experts: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mode: MergeMode,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one token sequence through a model and print logits and gates.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Token ids separated by spaces or commas.
        #[arg(long)]
        input: String,
        /// Keep-mask over experts, e.g. `1,0,1`.
        #[arg(long)]
        mask: Option<String>,
    },
    /// Keep an adapter's blocks within a depth percentage range `from:to`.
    LayerSlice {
        #[arg(long)]
        expert: PathBuf,
        #[arg(long)]
        range: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on a dataset file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value_t = Report::Overall)]
        report: Report,
    },
    /// Train one gate set per fixed temperature and report accuracy and entropy.
    SweepTau {
        #[command(flatten)]
        common: GateArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        taus: Vec<f64>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Write a synthetic mixture dataset as TSV.
    GenData {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2])]
        task_ids: Vec<usize>,
        #[arg(long, default_value_t = 192)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct GateArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    experts: Vec<PathBuf>,
    #[arg(long)]
    granularity: Option<Granularity>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mix: Option<MixRule>,
    /// Training data as TSV; a uniform mixture of the experts' tasks when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MergeMode {
    Direct,
    Nla,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Report {
    Overall,
    PerTask,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("mole: error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string(&v).expect("json value serializes"));
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PretrainBase { config, seed, out } => {
            let mut cfg = run_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.pretrain.seed = s;
            }
            let base = pretrain_base(cfg.model, &cfg.pretrain)?;
            Artifact::Base(base.clone()).save(&out, cfg.model.seed, "pretrain-copy")?;
            print_json(json!({"out": out, "fingerprint": base.fingerprint()}));
        }
        Command::TrainExpert {
            base,
            task_id,
            rank,
            steps,
            seed,
            config,
            out,
        } => {
            let cfg = run_config(config.as_deref())?;
            let base = load_base(&base)?;
            let mut fit = cfg.expert.fit.clone();
            fit.steps = steps.unwrap_or(fit.steps);
            fit.seed = seed.unwrap_or(fit.seed);
            let rank = rank.unwrap_or(cfg.expert.rank);
            let spec = SyntheticTaskSpec::standard(&base.config, task_id, fit.examples, fit.seed.wrapping_add(task_id as u64))?;
            let (adapter, accuracy) = train_expert_lora(&base, &spec, rank, &fit)?;
            Artifact::Adapter {
                config: base.config,
                adapter,
            }
            .save(&out, fit.seed, "")?;
            print_json(json!({"out": out, "task_id": task_id, "accuracy": accuracy}));
        }
        Command::TrainGate {
            common,
            out,
            entropy_csv,
            checkpoint,
            resume,
        } => {
            let setup = GateSetup::load(&common)?;
            let mut trainer = match resume {
                Some(path) => GateTrainer::from_checkpoint(&setup.base, &setup.experts, load_checkpoint(&path)?, setup.train.clone())?,
                None => GateTrainer::new(&setup.base, &setup.experts, setup.plan.clone(), setup.train.clone())?,
            };
            while trainer.steps_done() < setup.train.steps {
                trainer.step(&setup.data)?;
            }
            if let Some(path) = &entropy_csv {
                write_text(path, &trainer.log().to_csv())?;
            }
            if let Some(path) = &checkpoint {
                Artifact::Checkpoint(trainer.checkpoint()).save(path, setup.train.seed, "")?;
            }
            let gated = GatedModel {
                base: setup.base.clone(),
                experts: setup.experts.clone(),
                plan: trainer.plan().clone(),
            };
            Artifact::Gated(gated).save(&out, setup.train.seed, "")?;
            let last = trainer.log().last().map(|e| e.entropy);
            print_json(json!({"out": out, "steps": trainer.steps_done(), "final_entropy": last}));
        }
        Command::Compose {
            base,
            experts,
            mode,
            weights,
            out,
        } => {
            let base = load_base(&base)?;
            let experts = load_experts(&base, &experts)?;
            let merged = match mode {
                MergeMode::Direct => {
                    if weights.is_some() {
                        return Err(Error::Input("--weights only applies to --mode nla".into()));
                    }
                    merge_direct(&base, &experts)?
                }
                MergeMode::Nla => {
                    let w = weights.map_or_else(|| Ok(MergeWeights::uniform(experts.len())), MergeWeights::new)?;
                    merge_normalized(&base, &experts, &w)?
                }
            };
            let origin = match mode {
                MergeMode::Direct => "direct-merge",
                MergeMode::Nla => "normalized-merge",
            };
            Artifact::Base(merged).save(&out, base.config.seed, origin)?;
            print_json(json!({"out": out, "mode": origin}));
        }
        Command::Infer { model, input, mask } => {
            let m = load_model(&model)?;
            let tokens = parse_tokens(&input)?;
            let mut plan = m.plan.clone();
            if let Some(mask) = mask {
                plan = plan.with_mask(Some(mask.parse::<ExpertMask>()?));
            }
            let (logits, gates) = model_forward(&tokens, &m.base, m.experts.as_ref(), &plan)?;
            let vocab = logits.cols();
            let rows: Vec<&[f64]> = (0..tokens.len()).map(|p| &logits.data()[p * vocab..(p + 1) * vocab]).collect();
            let predictions: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
            let gates: Vec<&[f64]> = gates.iter().map(|g| g.weights()).collect();
            print_json(json!({"predictions": predictions, "gates": gates, "logits": rows}));
        }
        Command::LayerSlice { expert, range, out } => {
            let (config, adapter) = load_adapter(&expert)?;
            let (from, to) = parse_range(&range)?;
            let sliced = layer_range_mask(&adapter, config.n_blocks, from, to)?;
            Artifact::Adapter { config, adapter: sliced }.save(&out, 0, "")?;
            print_json(json!({"out": out, "range": [from, to]}));
        }
        Command::Eval { model, dataset, report } => {
            let m = load_model(&model)?;
            let data = load_dataset(&dataset, Split::Eval)?;
            check_vocab(&data, m.base.config.vocab_size)?;
            let metrics = evaluate(&m.base, m.experts.as_ref(), &m.plan, &data)?;
            let mut out = json!({
                "mode": m.plan.mode.name(),
                "accuracy": metrics.accuracy,
                "mean_domain_loss": metrics.mean_domain_loss,
                "per_expert_gate": metrics.per_expert_gate,
                "mean_gate_entropy": metrics.mean_gate_entropy,
            });
            if report == Report::PerTask {
                let per: serde_json::Map<String, serde_json::Value> =
                    metrics.per_task_accuracy.iter().map(|(k, v)| (k.to_string(), json!(v))).collect();
                out["per_task_accuracy"] = per.into();
            }
            print_json(out);
        }
        Command::SweepTau { common, taus, out_csv } => {
            let setup = GateSetup::load(&common)?;
            let rows = temperature_sweep(&setup.base, &setup.experts, &setup.data, &taus, &setup.train)?;
            let mut csv = String::from("tau,accuracy,final_entropy\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.tau, r.metrics.accuracy, r.final_entropy));
            }
            if let Some(path) = &out_csv {
                write_text(path, &csv)?;
            }
            print!("{csv}");
        }
        Command::GenData {
            base,
            task_ids,
            count,
            seed,
            out,
        } => {
            let base = load_base(&base)?;
            let data = standard_mixture(&base.config, &task_ids, count, seed)?;
            write_text(&out, &data.to_tsv())?;
            print_json(json!({"out": out, "examples": data.len()}));
        }
    }
    Ok(())
}

struct GateSetup {
    base: BaseWeights,
    experts: ExpertSet,
    plan: CompositionPlan,
    train: TrainConfig,
    data: Dataset,
}

impl GateSetup {
    fn load(args: &GateArgs) -> Result<Self> {
        let cfg = run_config(args.config.as_deref())?;
        let base = load_base(&args.base)?;
        let experts = load_experts(&base, &args.experts)?;
        let mut train = cfg.train.clone();
        train.granularity = args.granularity.unwrap_or(train.granularity);
        train.alpha = args.alpha.unwrap_or(train.alpha);
        train.steps = args.steps.unwrap_or(train.steps);
        train.seed = args.seed.unwrap_or(train.seed);
        train.validate()?;
        let mut plan_cfg = cfg.plan.clone();
        plan_cfg.granularity = train.granularity;
        plan_cfg.mix = args.mix.unwrap_or(plan_cfg.mix);
        plan_cfg.mode = mole_core::io::config::PlanMode::Mole;
        let plan = plan_cfg.build(&base, experts.len(), train.seed)?;
        let data = match &args.dataset {
            Some(p) => load_dataset(p, Split::Train)?,
            None => {
                let ids: Vec<usize> = experts
                    .adapters()
                    .iter()
                    .enumerate()
                    .map(|(i, a)| a.task_id.unwrap_or(i))
                    .collect();
                standard_mixture(&base.config, &ids, cfg.data.train_examples, train.seed)?
            }
        };
        check_vocab(&data, base.config.vocab_size)?;
        Ok(Self {
            base,
            experts,
            plan,
            train,
            data,
        })
    }
}

fn load_experts(base: &BaseWeights, paths: &[PathBuf]) -> Result<ExpertSet> {
    let adapters = paths
        .iter()
        .map(|p| {
            let (cfg, a) = load_adapter(p)?;
            if cfg != base.config {
                return Err(Error::Composition(format!(
                    "adapter '{}' was trained for a different model configuration",
                    p.display()
                )));
            }
            Ok(a)
        })
        .collect::<Result<Vec<LoraAdapter>>>()?;
    ExpertSet::new(adapters, &base.config)
}

fn load_dataset(path: &Path, split: Split) -> Result<Dataset> {
    Dataset::from_tsv(&std::fs::read_to_string(path)?, split)
}

fn parse_tokens(s: &str) -> Result<Vec<usize>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Input(format!("bad token id '{t}'"))))
        .collect()
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || Error::Input(format!("range must look like FROM:TO in percent, got '{s}'"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}
