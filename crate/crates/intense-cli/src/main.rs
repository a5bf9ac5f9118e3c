//! Command-line interface: dataset generation, training, verification,
//! and report export.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error,
//! 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use intense::analysis::{
    pearson, verify_lemmas, verify_prop3, verify_theorem1, verify_theorem2, SuiteOutcome,
};
use intense::fusion::{recover_relevance, InteractionSet, RelevanceReport};
use intense::synthdata::{
    contains_motif, generate_synthgene, generate_synthgene_tri, read_jsonl, split_dataset,
    write_jsonl, SequenceSample, SynthGeneConfig, NEGATIVE_MOTIF, POSITIVE_MOTIF,
};
use intense::training::{
    evaluate, init_model, train_full, Checkpoint, Normalization, TrainConfig,
};
use intense::{write_atomic, Error};

#[derive(Parser)]
#[command(
    name = "intense",
    about = "Interpretable tensor fusion: train multimodal classifiers with disentangled relevance scores",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sequence dataset as JSON Lines.
    Generate(GenerateArgs),
    /// Train a model and write checkpoint, history and relevance report.
    Train(TrainArgs),
    /// Run the numerical verification suites.
    Verify(VerifyArgs),
    /// Export figure data from trained artifacts.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset kind: synthgene | synthgene-tri
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample count (must be even).
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Per-modality insertion probabilities, comma separated. Defaults to
    /// the standard configuration of the chosen dataset.
    #[arg(long)]
    probs: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file written by `generate`.
    #[arg(long)]
    dataset: PathBuf,
    /// mnl (additive fusion) | intense (with interaction sets)
    #[arg(long, default_value = "mnl")]
    method: String,
    /// none | vbn | iterbn | naive. Defaults: vbn for mnl, iterbn for intense.
    #[arg(long)]
    normalization: Option<String>,
    /// Interaction sets, e.g. "12,13,123" or bracket form "[1,13]".
    #[arg(long)]
    tf_indices: Option<String>,
    #[arg(long)]
    p_norm: Option<f64>,
    #[arg(long)]
    reg_param: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    scheduler_gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    tf_latent_dim: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// JSON file with default hyperparameters; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.json, history.csv, relevance.json,
    /// eval.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// all | lemmas | prop3 | theorem1 | theorem2
    #[arg(long, default_value = "all")]
    suite: String,
    /// Interaction orders for the theorem2 suite.
    #[arg(long)]
    order: Option<usize>,
    /// Seeds; may be given multiple times.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Write the JSON summary here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of a multimodal training run (needs relevance.json).
    #[arg(long)]
    model: PathBuf,
    /// Directories of unimodal runs, ordered by modality; each needs
    /// eval.json. May be given multiple times.
    #[arg(long = "unimodal")]
    unimodal: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Hyperparameter overrides read from a JSON config file.
#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    method: Option<String>,
    normalization: Option<String>,
    tf_indices: Option<String>,
    p_norm: Option<f64>,
    reg_param: Option<f64>,
    lr: Option<f64>,
    scheduler_gamma: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    latent_dim: Option<usize>,
    tf_latent_dim: Option<usize>,
    weight_decay: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Report(args) => cmd_report(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            // input and configuration problems are usage errors; training
            // divergence and solver failures are runtime failures
            let code = match e.downcast_ref::<Error>() {
                Some(Error::TrainingDiverged { .. })
                | Some(Error::NoConvergence(_))
                | Some(Error::OracleFailure(_)) => 3,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> anyhow::Result<ExitCode> {
    let probs = match &args.probs {
        Some(spec) => Some(
            spec.split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|_| anyhow::anyhow!("bad probability {tok:?}"))
                })
                .collect::<anyhow::Result<Vec<f64>>>()?,
        ),
        None => None,
    };
    let dataset = match args.dataset.as_str() {
        "synthgene" => {
            let mut config = SynthGeneConfig::default_synthgene(args.seed);
            config.n_samples = args.n;
            if let Some(p) = probs {
                config.modality_probs = p;
            }
            generate_synthgene(&config)?
        }
        "synthgene-tri" => {
            let mut config = SynthGeneConfig::default_tri(args.seed);
            config.n_samples = args.n;
            if let Some(p) = probs {
                config.modality_probs = p;
            }
            generate_synthgene_tri(&config)?
        }
        other => anyhow::bail!("unknown dataset {other:?} (expected synthgene | synthgene-tri)"),
    };
    write_jsonl(&dataset, &args.out)?;

    let n = dataset.samples.len();
    let positives = dataset.samples.iter().filter(|s| s.label == 1).count();
    println!(
        "wrote {} samples ({} modalities) to {}",
        n,
        dataset.n_modalities(),
        args.out.display()
    );
    println!("class balance: {positives} positive / {} negative", n - positives);
    for m in 0..dataset.n_modalities() {
        let inserted = dataset.samples.iter().filter(|s| s.flags[m]).count();
        let motif_hits = dataset
            .samples
            .iter()
            .filter(|s| {
                contains_motif(&s.mods[m], POSITIVE_MOTIF)
                    || contains_motif(&s.mods[m], NEGATIVE_MOTIF)
            })
            .count();
        println!(
            "modality {}: insertion rate {:.4} (configured {}), motif present in {:.4}",
            m + 1,
            inserted as f64 / n as f64,
            dataset.config.modality_probs[m],
            motif_hits as f64 / n as f64
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_tf_indices(spec: &str) -> anyhow::Result<Vec<InteractionSet>> {
    // comma separated, but commas inside brackets belong to the bracket form
    let mut sets = Vec::new();
    let mut token = String::new();
    let mut depth = 0usize;
    for c in spec.chars() {
        match c {
            '[' => {
                depth += 1;
                token.push(c);
            }
            ']' => {
                depth = depth.saturating_sub(1);
                token.push(c);
            }
            ',' if depth == 0 => {
                if !token.trim().is_empty() {
                    sets.push(InteractionSet::parse(token.trim())?);
                }
                token.clear();
            }
            _ => token.push(c),
        }
    }
    if !token.trim().is_empty() {
        sets.push(InteractionSet::parse(token.trim())?);
    }
    if sets.is_empty() {
        anyhow::bail!("no interaction sets in {spec:?}");
    }
    Ok(sets)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<ExitCode> {
    if !args.dataset.exists() {
        anyhow::bail!("dataset file {} does not exist", args.dataset.display());
    }
    let file: FileConfig = match &args.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => FileConfig::default(),
    };
    // precedence: explicit flag, then config file, then built-in default
    let method = args
        .method_or(&file)
        .unwrap_or_else(|| "mnl".to_string());
    let dataset = read_jsonl(&args.dataset)?;
    let m = dataset.n_modalities();

    let tf_spec = args.tf_indices.clone().or(file.tf_indices.clone());
    let mut config = match method.as_str() {
        "mnl" => TrainConfig::mnl(m, 0),
        "intense" => {
            let interactions = match &tf_spec {
                Some(spec) => parse_tf_indices(spec)?,
                None => anyhow::bail!("--method intense requires --tf-indices"),
            };
            TrainConfig::intense(m, interactions, 0)
        }
        other => anyhow::bail!("unknown method {other:?} (expected mnl | intense)"),
    };
    if let Some(s) = args.normalization.clone().or(file.normalization.clone()) {
        config.normalization = s.parse::<Normalization>()?;
    }
    if let Some(v) = args.p_norm.or(file.p_norm) {
        config.p = v;
    }
    if let Some(v) = args.reg_param.or(file.reg_param) {
        config.lambda_reg = v;
    }
    if let Some(v) = args.lr.or(file.lr) {
        config.lr = v;
    }
    if let Some(v) = args.scheduler_gamma.or(file.scheduler_gamma) {
        config.scheduler_gamma = v;
    }
    if let Some(v) = args.epochs.or(file.epochs) {
        config.epochs = v;
    }
    if let Some(v) = args.batch_size.or(file.batch_size) {
        config.batch_size = v;
    }
    if let Some(v) = args.seed.or(file.seed) {
        config.seed = v;
    }
    if let Some(v) = args.latent_dim.or(file.latent_dim) {
        config.latent_dim = v;
    }
    if let Some(v) = args.tf_latent_dim.or(file.tf_latent_dim) {
        config.tf_latent_dim = v;
    }
    if let Some(v) = args.weight_decay.or(file.weight_decay) {
        config.weight_decay = v;
    }

    let split = split_dataset(&dataset);
    let model = init_model(m, &config)?;
    let (best, history, optimizer) = train_full(model, &split, &config)?;
    let test_refs: Vec<&SequenceSample> = split.test.iter().collect();
    let (test_accuracy, test_loss) = evaluate(&best, &test_refs)?;
    let relevance = recover_relevance(&best.head, config.p)?;

    std::fs::create_dir_all(&args.out)?;
    let checkpoint = Checkpoint::from_model(&best, config.config_hash(), Some(optimizer));
    checkpoint.save(&args.out.join("checkpoint.json"))?;
    write_atomic(
        &args.out.join("history.csv"),
        history.to_csv().as_bytes(),
    )?;
    write_atomic(
        &args.out.join("relevance.json"),
        serde_json::to_string_pretty(&relevance)?.as_bytes(),
    )?;
    #[derive(Serialize)]
    struct Eval {
        test_accuracy: f64,
        test_loss: f64,
        config_hash: String,
    }
    write_atomic(
        &args.out.join("eval.json"),
        serde_json::to_string_pretty(&Eval {
            test_accuracy,
            test_loss,
            config_hash: config.config_hash(),
        })?
        .as_bytes(),
    )?;

    println!(
        "trained {} on {} ({} epochs), test accuracy {:.4}, test loss {:.4}",
        method,
        args.dataset.display(),
        config.epochs,
        test_accuracy,
        test_loss
    );
    for e in &relevance.entries {
        println!("  {}: beta {:.4}, share {:.4}", e.set, e.beta, e.display_share);
    }
    println!("artifacts in {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

impl TrainArgs {
    fn method_or(&self, file: &FileConfig) -> Option<String> {
        if self.method != "mnl" {
            return Some(self.method.clone());
        }
        // "mnl" is the clap default; a config file may override it
        file.method.clone().or(Some(self.method.clone()))
    }
}

fn cmd_verify(args: VerifyArgs) -> anyhow::Result<ExitCode> {
    let seeds = if args.seeds.is_empty() {
        vec![1u64]
    } else {
        args.seeds.clone()
    };
    let orders: Vec<usize> = match args.order {
        Some(o) => vec![o],
        None => vec![2, 3, 4],
    };
    let run_suite = |name: &str, seed: u64| -> Option<SuiteOutcome> {
        match name {
            "lemmas" => Some(verify_lemmas(seed, 50)),
            "prop3" => Some(verify_prop3(seed, 100)),
            "theorem1" => Some(verify_theorem1(seed)),
            "theorem2" => Some(verify_theorem2(seed, &orders)),
            _ => None,
        }
    };
    let suite_names: Vec<&str> = match args.suite.as_str() {
        "all" => vec!["lemmas", "prop3", "theorem1", "theorem2"],
        name @ ("lemmas" | "prop3" | "theorem1" | "theorem2") => vec![name],
        other => anyhow::bail!(
            "unknown suite {other:?} (expected all | lemmas | prop3 | theorem1 | theorem2)"
        ),
    };

    let mut outcomes = Vec::new();
    for &seed in &seeds {
        for name in &suite_names {
            let outcome = run_suite(name, seed).expect("known suite");
            println!(
                "{} seed {}: {} — {}",
                outcome.suite,
                outcome.seed,
                if outcome.pass { "pass" } else { "FAIL" },
                outcome.detail
            );
            outcomes.push(outcome);
        }
    }
    let all_pass = outcomes.iter().all(|o| o.pass);
    #[derive(Serialize)]
    struct Summary {
        all_pass: bool,
        suites: Vec<SuiteOutcome>,
    }
    let summary = Summary {
        all_pass,
        suites: outcomes,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    if let Some(path) = &args.out {
        write_atomic(path, json.as_bytes())?;
    } else {
        println!("{json}");
    }
    if all_pass {
        Ok(ExitCode::SUCCESS)
    } else {
        let failures: Vec<String> = summary
            .suites
            .iter()
            .filter(|o| !o.pass)
            .map(|o| format!("{} (seed {})", o.suite, o.seed))
            .collect();
        eprintln!("verification failed: {}", failures.join(", "));
        Ok(ExitCode::from(1))
    }
}

#[derive(Deserialize)]
struct EvalFile {
    test_accuracy: f64,
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<ExitCode> {
    let relevance_path = args.model.join("relevance.json");
    if !relevance_path.exists() {
        anyhow::bail!(
            "{} has no relevance.json; train a model there first",
            args.model.display()
        );
    }
    let relevance: RelevanceReport =
        serde_json::from_str(&std::fs::read_to_string(&relevance_path)?)?;

    let mut unimodal_acc: Vec<Option<f64>> = Vec::new();
    for dir in &args.unimodal {
        let eval_path = dir.join("eval.json");
        if !eval_path.exists() {
            anyhow::bail!("{} has no eval.json", dir.display());
        }
        let eval: EvalFile = serde_json::from_str(&std::fs::read_to_string(&eval_path)?)?;
        unimodal_acc.push(Some(eval.test_accuracy));
    }

    let max_share = relevance
        .entries
        .iter()
        .map(|e| e.display_share)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut csv = String::from("set,beta,share,unimodal_accuracy,max_share\n");
    let mut acc_pairs: Vec<(f64, f64)> = Vec::new();
    for entry in &relevance.entries {
        let acc = if entry.set.order() == 1 {
            let idx = entry.set.indices()[0] - 1;
            unimodal_acc.get(idx).copied().flatten()
        } else {
            None
        };
        if let Some(a) = acc {
            acc_pairs.push((a, entry.display_share));
        }
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            entry.set,
            entry.beta,
            entry.display_share,
            acc.map(|a| a.to_string()).unwrap_or_default(),
            if entry.display_share == max_share { "*" } else { "" }
        ));
    }
    if acc_pairs.len() >= 2 {
        let accs: Vec<f64> = acc_pairs.iter().map(|(a, _)| *a).collect();
        let shares: Vec<f64> = acc_pairs.iter().map(|(_, s)| *s).collect();
        csv.push_str(&format!("# pearson,{}\n", pearson(&accs, &shares)));
    }
    write_atomic(&args.out, csv.as_bytes())?;
    println!("wrote {} rows to {}", relevance.entries.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}
