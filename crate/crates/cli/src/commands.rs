use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde::Serialize;

use sphhn_core::eval::evaluate_checkpoint;
use sphhn_core::granger::{infer_from_dataset, FeatureReduction};
use sphhn_core::gradcheck::{self, GradcheckOptions};
use sphhn_core::metrics::{EvalConfig, DEFAULT_K, ECE_BINS};
use sphhn_core::synth::{self, SynthConfig, SynthTruth};
use sphhn_core::train::{self, history_csv, TrainError};
use sphhn_core::{CausalGraph, Checkpoint, Dataset, GrangerConfig, RunConfig};

use crate::manifest::RunManifest;
use crate::{EvalArgs, Failure, Global, GradcheckArgs, GrangerArgs, SynthArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

fn out_dir(g: &Global) -> Result<&Path, Failure> {
    g.out
        .as_deref()
        .ok_or_else(|| Failure::Usage("the following required arguments were not provided:\n  --out <OUT>".into()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn config_or<T: DeserializeOwned>(g: &Global, default: T) -> anyhow::Result<T> {
    match &g.config {
        Some(p) => read_json(p),
        None => Ok(default),
    }
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_graph(path: &Path) -> anyhow::Result<CausalGraph> {
    let g: CausalGraph = read_json(path)?;
    g.validate()
        .map_err(|e| anyhow!("invalid causal graph {}: {e}", path.display()))?;
    Ok(g)
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("serializable")
}

pub fn synth(g: &Global, a: &SynthArgs) -> CmdResult {
    let out = out_dir(g)?;
    let start = Instant::now();
    let mut cfg: SynthConfig = match (&g.config, &a.preset) {
        (Some(p), _) => read_json(p)?,
        (None, Some(name)) => synth::preset(name).map_err(|e| Failure::Usage(e.to_string()))?,
        (None, None) => return Err(Failure::Usage("one of --preset or --config is required".into())),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if cfg.planted_cycle() {
        eprintln!("warning: planted edges contain a directed cycle");
    }
    let (ds, truth) = synth::generate(&cfg).map_err(|e| Failure::Input(e.into()))?;

    let mut m = RunManifest::new("synth", &cfg, cfg.seed);
    if let Some(p) = &g.config {
        m.input(p)?;
    }
    m.output(out, "dataset.json", ds.to_json().as_bytes())?;
    m.output(out, "truth.json", truth.to_json().as_bytes())?;
    m.finish(out, start.elapsed().as_millis())?;
    println!(
        "synth: {} nodes, {} hyperedges, {} planted edges -> {}",
        ds.nodes.len(),
        ds.hyperedges.len(),
        truth.true_edges.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GrangerRun {
    #[serde(flatten)]
    cfg: GrangerConfig,
    reduction: FeatureReduction,
}

pub fn granger(g: &Global, a: &GrangerArgs) -> CmdResult {
    let out = out_dir(g)?;
    let start = Instant::now();
    let mut cfg: GrangerConfig = config_or(g, GrangerConfig::default())?;
    if let Some(lag) = a.lag {
        cfg.lag = lag as usize;
    }
    if let Some(alpha) = a.alpha {
        cfg.alpha = alpha;
    }
    cfg.bonferroni |= a.bonferroni;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let reduction: FeatureReduction = a.reduction.parse().map_err(Failure::Usage)?;

    let ds = load_dataset(&a.dataset)?;
    let graph = infer_from_dataset(&ds, &cfg, reduction).map_err(|e| Failure::Input(e.into()))?;

    let run = GrangerRun { cfg, reduction };
    let mut m = RunManifest::new("granger", &run, g.seed.unwrap_or(0));
    m.input(&a.dataset)?;
    if let Some(p) = &g.config {
        m.input(p)?;
    }
    m.output(out, "causal.json", graph.to_json().as_bytes())?;
    m.finish(out, start.elapsed().as_millis())?;
    println!(
        "granger: {} edges at alpha {} (lag {}) -> {}",
        graph.edges.len(),
        graph.alpha,
        graph.lag,
        out.display()
    );
    Ok(())
}

pub fn train(g: &Global, a: &TrainArgs) -> CmdResult {
    let out = out_dir(g)?;
    let start = Instant::now();
    let mut run: RunConfig = config_or(g, RunConfig::default())?;
    if let Some(seed) = g.seed {
        run.train.seed = seed;
    }
    if let Some(v) = a.lambda1 {
        run.train.lambda1 = v;
    }
    if let Some(v) = a.lambda2 {
        run.train.lambda2 = v;
    }
    if let Some(v) = a.max_epochs {
        run.train.max_epochs = v;
    }
    if a.no_entropy {
        run.train.lambda1 = 0.0;
    }
    run.model.euclidean |= a.euclidean;
    run.ablation.no_causal |= a.no_causal;
    run.ablation.pairwise |= a.pairwise;

    let ds = load_dataset(&a.dataset)?;
    let causal = match (&a.causal, run.ablation.no_causal) {
        (Some(p), _) => load_graph(p)?,
        (None, true) => CausalGraph::empty(0.0, 0),
        (None, false) => {
            return Err(Failure::Usage("--causal is required unless --no-causal is set".into()))
        }
    };

    let mut m = RunManifest::new("train", &run, run.train.seed);
    m.input(&a.dataset)?;
    if let Some(p) = &a.causal {
        m.input(p)?;
    }
    if let Some(p) = &g.config {
        m.input(p)?;
    }

    match train::train(&ds, &causal, &run) {
        Ok(outcome) => {
            let ck = &outcome.checkpoint;
            m.output(out, "checkpoint.json", ck.to_json().as_bytes())?;
            m.output(out, "history.csv", history_csv(&outcome.history).as_bytes())?;
            m.finish(out, start.elapsed().as_millis())?;
            println!(
                "train: {} epochs, best epoch {} (val loss {:.6}) -> {}",
                outcome.history.len(),
                ck.best_epoch,
                ck.best_val_loss,
                out.display()
            );
            Ok(())
        }
        Err(TrainError::Diverged {
            epoch,
            reason,
            last_good,
            history,
        }) => {
            m.output(out, "checkpoint_last_good.json", last_good.to_json().as_bytes())?;
            m.output(out, "history.csv", history_csv(&history).as_bytes())?;
            m.finish(out, start.elapsed().as_millis())?;
            Err(Failure::Diverged(format!(
                "epoch {epoch}: {reason}; last good parameters in {}",
                out.join("checkpoint_last_good.json").display()
            )))
        }
        Err(e) => Err(Failure::Input(e.into())),
    }
}

pub fn eval(g: &Global, a: &EvalArgs) -> CmdResult {
    let out = out_dir(g)?;
    let start = Instant::now();
    let mut cfg: EvalConfig = config_or(
        g,
        EvalConfig {
            ece_bins: ECE_BINS,
            k: DEFAULT_K,
            dropout_rate: 0.0,
        },
    )?;
    if let Some(r) = a.dropout_rate {
        cfg.dropout_rate = r;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(b) = a.bins {
        cfg.ece_bins = b;
    }
    if !(0.0..1.0).contains(&cfg.dropout_rate) {
        return Err(Failure::Usage("--dropout-rate must lie in [0, 1)".into()));
    }
    if cfg.k == 0 || cfg.ece_bins == 0 {
        return Err(Failure::Usage("--k and --bins must be positive".into()));
    }
    let seed = g.seed.unwrap_or(0);

    let text = fs::read_to_string(&a.checkpoint)
        .with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let ck = Checkpoint::from_json(&text)
        .map_err(|e| anyhow!("invalid checkpoint {}: {e}", a.checkpoint.display()))?;
    let ds = load_dataset(&a.dataset)?;
    let causal = match &a.causal {
        Some(p) => load_graph(p)?,
        None => CausalGraph::empty(0.0, 0),
    };
    let truth = match &a.truth {
        Some(p) => Some(read_json::<SynthTruth>(p)?.edge_set()),
        None => None,
    };
    let report = evaluate_checkpoint(&ck, &ds, &causal, truth.as_ref(), &cfg, seed)
        .map_err(|e| Failure::Input(e.into()))?;

    let mut m = RunManifest::new("eval", &cfg, seed);
    for p in [Some(&a.checkpoint), Some(&a.dataset), a.causal.as_ref(), a.truth.as_ref(), g.config.as_ref()]
        .into_iter()
        .flatten()
    {
        m.input(p)?;
    }
    m.output(out, "report.json", &pretty(&report))?;
    m.finish(out, start.elapsed().as_millis())?;
    let p_at_k = report
        .p_at_k
        .get(&cfg.k)
        .map_or("n/a".to_string(), |p| format!("{p:.3}"));
    println!(
        "eval: accuracy {:.4}, macro-F1 {:.4}, ECE {:.4}, P@{} {} ({} nodes) -> {}",
        report.accuracy,
        report.macro_f1,
        report.ece,
        cfg.k,
        p_at_k,
        report.n_eval,
        out.display()
    );
    Ok(())
}

pub fn gradcheck(g: &Global, a: &GradcheckArgs) -> CmdResult {
    let start = Instant::now();
    let opts = GradcheckOptions {
        seed: g.seed.unwrap_or(0),
        euclidean: a.euclidean,
        corrupt: a.corrupt,
    };
    let report = gradcheck::run(&opts);
    for grp in &report.groups {
        println!(
            "{:<16} entries {:>4}  max rel error {:.3e}",
            grp.name, grp.entries, grp.max_rel_error
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.0e}): {}",
        report.max_rel_error,
        report.tolerance,
        if report.passed { "pass" } else { "FAIL" }
    );
    if let Some(out) = &g.out {
        #[derive(Serialize)]
        struct Run {
            seed: u64,
            euclidean: bool,
        }
        let mut m = RunManifest::new("gradcheck", &Run { seed: opts.seed, euclidean: opts.euclidean }, opts.seed);
        m.output(out, "gradcheck.json", &pretty(&report))?;
        m.finish(out, start.elapsed().as_millis())?;
    }
    if report.passed {
        return Ok(());
    }
    let mut worst: Vec<_> = report
        .groups
        .iter()
        .filter(|grp| grp.max_rel_error > report.tolerance)
        .collect();
    worst.sort_by(|x, y| y.max_rel_error.total_cmp(&x.max_rel_error));
    let listing: Vec<String> = worst
        .iter()
        .map(|grp| {
            format!(
                "{}[{}] rel {:.3e} (analytic {:.6e}, numeric {:.6e})",
                grp.name, grp.worst_index, grp.max_rel_error, grp.analytic, grp.numeric
            )
        })
        .collect();
    Err(Failure::Gradcheck(listing.join("; ")))
}
