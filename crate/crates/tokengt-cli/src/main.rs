//! Command-line runner: dataset generation, constructive verification
//! sweeps, the synthetic basis-approximation study, the regression ablation,
//! and attention-distance exports.
//!
//! Exit codes: 0 when all checks pass, 1 when a verification row fails,
//! 2 for configuration or I/O problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tokengt::constructive::{
    lemma1_sweep_with_identifiers, theorem2_sweep, theorem3_sweep, VerifyRow,
};
use tokengt::identifiers::IdentifierKind;
use tokengt::experiments::{
    attention_distance_report, ba_dataset, dataset_stats, eval_basis_l2, eval_constructed_l2,
    train_regression, train_synthetic, EvalResult, Layout, NodeIdMode, RegressionConfig,
    RegressionModel, SynthModel, SyntheticConfig,
};
use tokengt::graphs::{graph_from_str, graph_to_string, Graph};
use tokengt::numerics::RngSeed;

#[derive(Parser)]
#[command(
    name = "tokengt",
    about = "Tokenized graph transformer: data generation, verification, training, and analysis",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a preferential-attachment graph corpus as one text file per
    /// graph.
    Gen(GenArgs),
    /// Run constructive verification sweeps and emit one CSV row per case.
    Verify(VerifyArgs),
    /// Train the supervised basis-approximation model and write the model,
    /// loss history, and per-head L2 results.
    Train(TrainArgs),
    /// Evaluate a trained (or explicitly constructed) model on a graph set.
    Eval(EvalArgs),
    /// Run the paired triangle-count regression ablation.
    Regress(RegressArgs),
    /// Export mean attention distances per layer and head.
    Attndist(AttndistArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory (created if missing). A relative path is rooted at
    /// $TOKENGT_OUT when that variable is set.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

impl OutArgs {
    fn resolve(&self, sub: &str) -> Result<PathBuf> {
        let mut base = self.out.clone();
        if base.is_relative() {
            if let Ok(root) = std::env::var("TOKENGT_OUT") {
                base = Path::new(&root).join(base);
            }
        }
        let dir = base.join(sub);
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    train: usize,
    #[arg(long)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Which check to run: lemma1, thm2, thm3, or all.
    #[arg(long, default_value = "all")]
    theorem: String,
    /// Tensor order (1, 2, or 3).
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Node counts, comma separated.
    #[arg(long, default_value = "3,4,5,6,7,8", value_delimiter = ',')]
    n: Vec<usize>,
    /// Sharpness values, comma separated.
    #[arg(long, default_value = "1,10,100,1000", value_delimiter = ',')]
    a: Vec<f64>,
    /// Random seeds for the layer/network checks.
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Node identifier kind for the attention-vs-basis sweep: exact, orf,
    /// lap, or random-nonorth. Non-orthonormal identifiers are expected to
    /// fail the tolerance (exit code 1); running them shows the degradation.
    #[arg(long, default_value = "exact")]
    node_ids: String,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Node identifier mode: none, random, random-first, orf, orf-first, lap.
    #[arg(long, default_value = "orf")]
    mode: String,
    /// Attach trainable type identifiers.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    type_ids: bool,
    /// Token layout: sparse or dense.
    #[arg(long, default_value = "sparse")]
    layout: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Override the default step count.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    train_graphs: Option<usize>,
    #[arg(long)]
    test_graphs: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained model file written by `train`.
    #[arg(long, required_unless_present = "constructed")]
    params: Option<PathBuf>,
    /// Directory of .graph files to evaluate on; defaults to regenerating
    /// the model's test split.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate explicitly constructed attention parameters instead of a
    /// trained model.
    #[arg(long, default_value_t = false)]
    constructed: bool,
    /// Sharpness for --constructed.
    #[arg(long, default_value_t = 1000.0)]
    a: f64,
    /// Layout for --constructed: sparse or dense.
    #[arg(long, default_value = "sparse")]
    layout: String,
    #[arg(long, default_value_t = 64)]
    test_graphs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Additionally export the per-head attention matrices of the first N
    /// evaluated graphs as CSV files (annotated with token kinds).
    #[arg(long, default_value_t = 0)]
    dump_attention: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct RegressArgs {
    /// Seeds, comma separated; each seed runs the paired ablation.
    #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct AttndistArgs {
    /// Trained regression model file.
    #[arg(long, required_unless_present = "random_init")]
    params: Option<PathBuf>,
    /// Analyze a freshly initialized (untrained) model instead.
    #[arg(long, default_value_t = false)]
    random_init: bool,
    #[arg(long, default_value_t = 32)]
    graphs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

fn write_manifest(dir: &Path, command: &str, config: serde_json::Value) -> Result<()> {
    let manifest = serde_json::json!({
        "schema_version": 1,
        "command": command,
        "config": config,
    });
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn cmd_gen(args: &GenArgs) -> Result<i32> {
    if args.train == 0 {
        bail!("--train must be at least 1");
    }
    let dir = args.out.resolve("gen")?;
    let (train, test) = ba_dataset(args.train, args.test, RngSeed(args.seed))?;
    for (i, g) in train.iter().enumerate() {
        std::fs::write(dir.join(format!("train_{i:04}.graph")), graph_to_string(g))?;
    }
    for (i, g) in test.iter().enumerate() {
        std::fs::write(dir.join(format!("test_{i:04}.graph")), graph_to_string(g))?;
    }
    let stats = dataset_stats(&train);
    write_manifest(
        &dir,
        "gen",
        serde_json::json!({
            "train": args.train,
            "test": args.test,
            "seed": args.seed,
            "train_mean_nodes": stats.mean_nodes,
            "train_mean_edges": stats.mean_edges,
        }),
    )?;
    println!(
        "wrote {} graphs to {} (train mean nodes {:.2}, mean edges {:.2})",
        args.train + args.test,
        dir.display(),
        stats.mean_nodes,
        stats.mean_edges
    );
    Ok(0)
}

fn cmd_verify(args: &VerifyArgs) -> Result<i32> {
    if args.a.iter().any(|&a| a <= 0.0 || a.is_nan()) {
        bail!("sharpness values must be positive");
    }
    if args.k == 0 || args.k > 3 {
        bail!("order k must be 1, 2, or 3");
    }
    let dir = args.out.resolve("verify")?;
    let mut rows: Vec<VerifyRow> = Vec::new();
    let max_a = args.a.iter().cloned().fold(f64::MIN, f64::max);
    let run_lemma1 = args.theorem == "lemma1" || args.theorem == "all";
    let run_thm2 = args.theorem == "thm2" || args.theorem == "all";
    let run_thm3 = args.theorem == "thm3" || args.theorem == "all";
    if !(run_lemma1 || run_thm2 || run_thm3) {
        bail!("unknown theorem {:?}; use lemma1, thm2, thm3, or all", args.theorem);
    }
    if run_lemma1 {
        let kind = IdentifierKind::parse(&args.node_ids)
            .with_context(|| format!("unknown identifier kind {:?}", args.node_ids))?;
        rows.extend(lemma1_sweep_with_identifiers(args.k, &args.n, &args.a, 1e-6, kind)?);
    }
    if run_thm2 {
        for &n in &args.n {
            rows.extend(theorem2_sweep(args.k, n, 2, max_a, &args.seeds, 1e-4)?);
        }
    }
    if run_thm3 {
        for &n in &args.n {
            rows.extend(theorem3_sweep(args.k, n, &[2, 2], max_a, &args.seeds, 1e-3)?);
        }
    }
    let mut csv = String::from(VerifyRow::csv_header());
    csv.push('\n');
    let mut failures = 0;
    for row in &rows {
        csv.push_str(&row.to_csv());
        csv.push('\n');
        if !row.pass {
            failures += 1;
        }
    }
    std::fs::write(dir.join("verify.csv"), &csv)?;
    write_manifest(
        &dir,
        "verify",
        serde_json::json!({
            "theorem": args.theorem,
            "k": args.k,
            "n": args.n,
            "a": args.a,
            "seeds": args.seeds,
            "node_ids": args.node_ids,
        }),
    )?;
    print!("{csv}");
    println!(
        "{} rows, {} failures -> {}",
        rows.len(),
        failures,
        dir.join("verify.csv").display()
    );
    Ok(if failures > 0 { 1 } else { 0 })
}

fn l2_csv(rows: &[(String, String, u64, String, EvalResult)]) -> String {
    let mut csv = String::from("mode,layout,seed,split,head,l2\n");
    for (mode, layout, seed, split, eval) in rows {
        for (h, l2) in eval.per_head.iter().enumerate() {
            csv.push_str(&format!("{mode},{layout},{seed},{split},{h},{l2:e}\n"));
        }
        csv.push_str(&format!("{mode},{layout},{seed},{split},mean,{:e}\n", eval.mean));
    }
    csv
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let mode = NodeIdMode::parse(&args.mode)
        .with_context(|| format!("unknown identifier mode {:?}", args.mode))?;
    let layout = Layout::parse(&args.layout)
        .with_context(|| format!("unknown layout {:?}", args.layout))?;
    let mut cfg = SyntheticConfig::desk_default(mode, args.type_ids, layout, args.seed);
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.train_graphs {
        cfg.train_graphs = v;
    }
    if let Some(v) = args.test_graphs {
        cfg.test_graphs = v;
    }
    let dir = args.out.resolve("train")?;
    let (model, history) = train_synthetic(&cfg)?;

    let mut hist_csv = String::from("step,loss,lr_scale\n");
    for (step, loss, lr) in &history {
        hist_csv.push_str(&format!("{step},{loss:e},{lr:e}\n"));
    }
    std::fs::write(dir.join("history.csv"), hist_csv)?;
    std::fs::write(dir.join("model.json"), serde_json::to_string(&model)?)?;

    let (train, test) = ba_dataset(cfg.train_graphs, cfg.test_graphs, RngSeed(cfg.seed).child(0))?;
    let train_eval = eval_basis_l2(&model, &train[..cfg.test_graphs.min(train.len())], RngSeed(7))?;
    let test_eval = eval_basis_l2(&model, &test, RngSeed(8))?;
    let rows = vec![
        (
            mode.name().to_string(),
            layout.name().to_string(),
            cfg.seed,
            "train".to_string(),
            train_eval,
        ),
        (
            mode.name().to_string(),
            layout.name().to_string(),
            cfg.seed,
            "test".to_string(),
            test_eval.clone(),
        ),
    ];
    std::fs::write(dir.join("l2.csv"), l2_csv(&rows))?;
    write_manifest(&dir, "train", serde_json::to_value(&cfg)?)?;
    println!(
        "trained {}/{} seed {}: final loss {:e}, test L2 {:e} -> {}",
        mode.name(),
        layout.name(),
        cfg.seed,
        history.last().map(|h| h.1).unwrap_or(f64::NAN),
        test_eval.mean,
        dir.display()
    );
    Ok(0)
}

fn load_graph_dir(dir: &Path) -> Result<Vec<Graph>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "graph").unwrap_or(false))
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            Ok(graph_from_str(&text)?)
        })
        .collect()
}

fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let dir = args.out.resolve("eval")?;
    if args.constructed {
        let layout = Layout::parse(&args.layout)
            .with_context(|| format!("unknown layout {:?}", args.layout))?;
        let graphs = match &args.data {
            Some(d) => load_graph_dir(d)?,
            None => ba_dataset(0, args.test_graphs, RngSeed(args.seed))?.1,
        };
        let l2 = eval_constructed_l2(&graphs, layout, args.a)?;
        let csv = format!(
            "mode,layout,seed,split,head,l2\nconstructed,{},{},test,mean,{l2:e}\n",
            layout.name(),
            args.seed
        );
        std::fs::write(dir.join("l2.csv"), &csv)?;
        write_manifest(
            &dir,
            "eval",
            serde_json::json!({"constructed": true, "a": args.a, "layout": layout.name()}),
        )?;
        print!("{csv}");
        return Ok(0);
    }
    let params = args.params.as_ref().expect("clap enforces presence");
    let text = std::fs::read_to_string(params)
        .with_context(|| format!("cannot read {}", params.display()))?;
    let model: SynthModel = serde_json::from_str(&text)?;
    let cfg = model.cfg.clone();
    let graphs = match &args.data {
        Some(d) => load_graph_dir(d)?,
        None => ba_dataset(cfg.train_graphs, cfg.test_graphs, RngSeed(cfg.seed).child(0))?.1,
    };
    let eval = eval_basis_l2(&model, &graphs, RngSeed(8))?;
    for (gi, g) in graphs.iter().take(args.dump_attention).enumerate() {
        let dumps = tokengt::experiments::attention_dump(&model, g, RngSeed(8).child(9000).child(gi as u64))?;
        for (h, csv) in dumps.iter().enumerate() {
            std::fs::write(dir.join(format!("attention_g{gi:03}_h{h:02}.csv")), csv)?;
        }
    }
    let rows = vec![(
        cfg.node_id_mode.name().to_string(),
        cfg.layout.name().to_string(),
        cfg.seed,
        "test".to_string(),
        eval.clone(),
    )];
    std::fs::write(dir.join("l2.csv"), l2_csv(&rows))?;
    write_manifest(&dir, "eval", serde_json::to_value(&cfg)?)?;
    println!("mean L2 {:e} over {} graphs -> {}", eval.mean, graphs.len(), dir.display());
    Ok(0)
}

fn cmd_regress(args: &RegressArgs) -> Result<i32> {
    let dir = args.out.resolve("regress")?;
    let mut csv = String::from("mode,seed,split,mse\n");
    for &seed in &args.seeds {
        let mut base = RegressionConfig::desk_default(true, seed);
        if let Some(v) = args.steps {
            base.steps = v;
        }
        let mut with = base.clone();
        with.with_identifiers = true;
        let (model_with, run_with) = train_regression(&with)?;
        let mut without = base.clone();
        without.with_identifiers = false;
        let (_, run_without) = train_regression(&without)?;
        let (train, test) = ba_dataset(base.train_graphs, base.test_graphs, RngSeed(seed).child(0))?;
        let targets = tokengt::experiments::StandardizedTargets::fit(&train);
        let bound = tokengt::experiments::conditional_variance_bound(&test, &targets);
        csv.push_str(&format!("with-ids,{seed},train,{:e}\n", run_with.train_mse));
        csv.push_str(&format!("with-ids,{seed},test,{:e}\n", run_with.test_mse));
        csv.push_str(&format!("no-ids,{seed},train,{:e}\n", run_without.train_mse));
        csv.push_str(&format!("no-ids,{seed},test,{:e}\n", run_without.test_mse));
        csv.push_str(&format!("count-bound,{seed},test,{bound:e}\n"));
        std::fs::write(
            dir.join(format!("model_seed{seed}.json")),
            serde_json::to_string(&model_with)?,
        )?;
        println!(
            "seed {seed}: with-ids {:e}, no-ids {:e}, bound {bound:e}",
            run_with.test_mse, run_without.test_mse
        );
    }
    std::fs::write(dir.join("regression.csv"), &csv)?;
    write_manifest(
        &dir,
        "regress",
        serde_json::json!({"seeds": args.seeds, "steps": args.steps}),
    )?;
    Ok(0)
}

fn cmd_attndist(args: &AttndistArgs) -> Result<i32> {
    let dir = args.out.resolve("attndist")?;
    let model: RegressionModel = if args.random_init {
        let cfg = RegressionConfig::desk_default(true, args.seed);
        RegressionModel::init(&cfg, RngSeed(args.seed).child(1))
    } else {
        let params = args.params.as_ref().expect("clap enforces presence");
        let text = std::fs::read_to_string(params)
            .with_context(|| format!("cannot read {}", params.display()))?;
        serde_json::from_str(&text)?
    };
    let (_, graphs) = ba_dataset(1, args.graphs, RngSeed(args.seed).child(5))?;
    let rows = attention_distance_report(&model, &graphs, RngSeed(args.seed).child(6))?;
    let mut csv = String::from("layer,head,mean_hops\n");
    for (layer, head, hops) in &rows {
        csv.push_str(&format!("{layer},{head},{hops}\n"));
    }
    std::fs::write(dir.join("attndist.csv"), &csv)?;
    write_manifest(
        &dir,
        "attndist",
        serde_json::json!({"random_init": args.random_init, "graphs": args.graphs, "seed": args.seed}),
    )?;
    print!("{csv}");
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Regress(args) => cmd_regress(args),
        Command::Attndist(args) => cmd_attndist(args),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
