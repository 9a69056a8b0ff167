//! The `uda` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Every subcommand writes `invocation.json` into its output directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::curriculum::PriorScoreTable;
use crate::data_domains::{load_manifest, Domain, DomainManifest, WeatherCondition};
use crate::error::Error;
use crate::eval_report::{self, EvalResult};
use crate::rng;
use crate::synthetic::{self, ToyConfig};
use crate::trainer::{self, Ablation, TrainConfig};
use crate::vlm_bridge::{self, EmbeddingCache};

#[derive(Parser, Debug)]
#[command(
    name = "uda",
    version,
    about = "Domain adaptation training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Directory for outputs and the invocation record.
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes a two-domain manifest: the synthetic benchmark or a merge.
    PrepareManifest {
        #[command(flatten)]
        common: Common,
        /// Generate the rendered-shape benchmark.
        #[arg(long, conflicts_with_all = ["source", "target"])]
        synthetic: bool,
        #[arg(long, default_value_t = 1000)]
        n_source: usize,
        #[arg(long, default_value_t = 1000)]
        n_target: usize,
        #[arg(long, requires = "target")]
        source: Option<PathBuf>,
        #[arg(long, requires = "source")]
        target: Option<PathBuf>,
    },
    /// Precomputes text and source image embeddings into a cache file.
    EmbedCache {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Writes a manifest copy with weather-weighted prior scores.
    ScorePrior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// e.g. `sunny=5,cloudy=4,foggy=3.5,rainstorm=3,sunset_night=4.5`.
        #[arg(long)]
        weights: Option<String>,
    },
    /// Runs the adversarial training loop for one ablation row.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores a checkpoint on the target domain.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Side-by-side comparison of evaluation results.
    Report {
        #[command(flatten)]
        common: Common,
        /// `name=path/to/eval.json`, in display order.
        #[arg(long = "result", value_name = "NAME=PATH", required = true)]
        results: Vec<String>,
    },
}

impl clap::ValueEnum for Ablation {
    fn value_variants<'a>() -> &'a [Self] {
        &Ablation::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.tag()))
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: Error,
}

fn usage(error: Error) -> Failure {
    Failure { code: 2, error }
}

fn runtime(error: Error) -> Failure {
    Failure { code: 1, error }
}

type CmdResult = std::result::Result<(), Failure>;

fn write_invocation(out_dir: &Path, record: serde_json::Value) -> CmdResult {
    std::fs::create_dir_all(out_dir).map_err(|e| runtime(e.into()))?;
    let text = serde_json::to_string_pretty(&record).map_err(|e| runtime(e.into()))?;
    std::fs::write(out_dir.join("invocation.json"), text).map_err(|e| runtime(e.into()))
}

fn sub_seeds(seed: u64) -> serde_json::Value {
    let m: serde_json::Map<String, serde_json::Value> = rng::STREAM_NAMES
        .iter()
        .map(|n| (n.to_string(), json!(rng::sub_seed(seed, n))))
        .collect();
    serde_json::Value::Object(m)
}

/// Loads a config and applies `--set`, `--seed` and `--ablation`. A relative
/// manifest path in the file resolves against the file's directory; one
/// given through `--set` stays relative to the working directory.
fn resolve_config(
    path: &Path,
    seed: Option<u64>,
    ablation: Option<Ablation>,
    overrides: &[String],
) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::load(path).map_err(usage)?;
    if let Some(m) = &cfg.manifest {
        let p = Path::new(m);
        if p.is_relative() {
            let base = path.parent().unwrap_or(Path::new(""));
            cfg.manifest = Some(base.join(p).to_string_lossy().into_owned());
        }
    }
    for o in overrides {
        cfg.apply_override(o).map_err(usage)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn config_manifest(cfg: &TrainConfig) -> std::result::Result<DomainManifest, Failure> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| usage(Error::Config("config does not name a manifest".into())))?;
    load_manifest(Path::new(path)).map_err(usage)
}

fn parse_weights(spec: &str) -> crate::Result<PriorScoreTable> {
    let pairs = spec
        .split(',')
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("weight `{kv}` is not weather=value")))?;
            let w: WeatherCondition = k.trim().parse()?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("weight `{v}` is not a number")))?;
            Ok((w, v))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    PriorScoreTable::with_weights(&pairs)
}

fn prepare_manifest(
    common: &Common,
    synthetic_flag: bool,
    n_source: usize,
    n_target: usize,
    source: Option<&Path>,
    target: Option<&Path>,
) -> CmdResult {
    let seed = common.seed.unwrap_or(0);
    let path = if synthetic_flag {
        let cfg = ToyConfig {
            n_source,
            n_target,
            seed,
            ..Default::default()
        };
        write_invocation(
            &common.out_dir,
            json!({ "command": "prepare-manifest", "synthetic": cfg, "seed": seed }),
        )?;
        synthetic::write_toy_benchmark(&common.out_dir, &cfg).map_err(runtime)?
    } else {
        let (Some(s), Some(t)) = (source, target) else {
            return Err(usage(Error::Config(
                "give --synthetic or both --source and --target".into(),
            )));
        };
        let s_m = load_manifest(s)
            .map_err(usage)?
            .absolutized()
            .map_err(runtime)?;
        let t_m = load_manifest(t)
            .map_err(usage)?
            .absolutized()
            .map_err(runtime)?;
        let merged = s_m
            .subset(Domain::Source)
            .merge(&t_m.subset(Domain::Target))
            .map_err(usage)?;
        write_invocation(
            &common.out_dir,
            json!({ "command": "prepare-manifest", "source": s, "target": t }),
        )?;
        let path = common.out_dir.join("manifest.jsonl");
        merged.write(&path).map_err(runtime)?;
        path
    };
    let m = load_manifest(&path).map_err(runtime)?;
    println!(
        "wrote {} ({} source, {} target)",
        path.display(),
        m.n_source(),
        m.n_target()
    );
    Ok(())
}

fn embed_cache(common: &Common, config: &Path, overrides: &[String]) -> CmdResult {
    let cfg = resolve_config(config, common.seed, None, overrides)?;
    let manifest = config_manifest(&cfg)?;
    let provider = trainer::build_provider(&cfg).map_err(usage)?;
    let path = cfg
        .embedding_cache
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| common.out_dir.join("embeddings.jsonl"));
    write_invocation(
        &common.out_dir,
        json!({ "command": "embed-cache", "config": cfg, "cache": path }),
    )?;
    let cache = EmbeddingCache::open(&path, &provider.id(), provider.dim()).map_err(runtime)?;
    vlm_bridge::text_embedding_table(
        provider.as_ref(),
        manifest.label_space(),
        &WeatherCondition::ALL,
        &cfg.prompt_template,
        Some(&cache),
    )
    .map_err(runtime)?;
    let spec = cfg
        .model_config(manifest.num_classes())
        .map_err(usage)?
        .image_spec();
    let loader = crate::data_domains::ImageLoader::new(spec, manifest.base_dir());
    for r in manifest.subset(Domain::Source).records() {
        let key = format!("image:{}", r.id());
        if cache.get(&key).is_none() {
            let px = loader.load(r.image()).map_err(runtime)?;
            let v = vlm_bridge::image_embedding(provider.as_ref(), &px, spec).map_err(runtime)?;
            cache.insert(key, &v);
        }
    }
    cache.save(&path).map_err(runtime)?;
    println!("wrote {} entries to {}", cache.len(), path.display());
    Ok(())
}

fn score_prior(common: &Common, manifest_path: &Path, weights: Option<&str>) -> CmdResult {
    let manifest = load_manifest(manifest_path).map_err(usage)?;
    let table = match weights {
        Some(w) => parse_weights(w).map_err(usage)?,
        None => PriorScoreTable::default(),
    };
    if let Some(r) = manifest
        .records()
        .iter()
        .find(|r| r.domain() == Domain::Source && r.prior_quality().is_none())
    {
        return Err(usage(Error::Manifest(format!(
            "source record {} has no prior_quality and no IQA provider is configured",
            r.id()
        ))));
    }
    let mut failure = None;
    let scored = manifest
        .absolutized()
        .and_then(|m| {
            m.map_records(|r| match (r.prior_quality(), r.weather()) {
                (Some(q), Some(w)) if r.domain() == Domain::Source => match table.prior_score(q, w)
                {
                    Ok(s) => r.with_prior_score(Some(s)),
                    Err(e) => {
                        failure.get_or_insert(e);
                        r
                    }
                },
                _ => r,
            })
        })
        .map_err(runtime)?;
    if let Some(e) = failure {
        return Err(usage(e));
    }
    write_invocation(
        &common.out_dir,
        json!({ "command": "score-prior", "manifest": manifest_path, "weights": weights }),
    )?;
    let out = common.out_dir.join("manifest.scored.jsonl");
    scored.write(&out).map_err(runtime)?;
    load_manifest(&out).map_err(runtime)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn train(
    common: &Common,
    config: &Path,
    ablation: Option<Ablation>,
    overrides: &[String],
    resume: Option<&Path>,
) -> CmdResult {
    let cfg = resolve_config(config, common.seed, ablation, overrides)?;
    let manifest = config_manifest(&cfg)?;
    write_invocation(
        &common.out_dir,
        json!({
            "command": "train",
            "config": cfg,
            "seed": cfg.seed,
            "sub_seeds": sub_seeds(cfg.seed),
            "components": cfg.resolved_flags(),
            "resume": resume,
        }),
    )?;
    let outcome = trainer::fit(&cfg, &manifest, &common.out_dir, resume).map_err(|e| match e {
        Error::Config(_) => usage(e),
        other => runtime(other),
    })?;
    println!(
        "trained {} epochs; checkpoint {}; metrics {}",
        outcome.epochs.len(),
        outcome.final_checkpoint.display(),
        outcome.metrics_log.display()
    );
    Ok(())
}

fn evaluate(common: &Common, checkpoint: &Path, manifest_path: &Path) -> CmdResult {
    let manifest = load_manifest(manifest_path).map_err(usage)?;
    let (model, state) = trainer::load_checkpoint(checkpoint).map_err(runtime)?;
    write_invocation(
        &common.out_dir,
        json!({
            "command": "evaluate",
            "checkpoint": checkpoint,
            "manifest": manifest_path,
            "train_config": state.config,
        }),
    )?;
    let result = eval_report::evaluate(&model, &manifest).map_err(runtime)?;
    let out = common.out_dir.join("eval.json");
    result.write(&out).map_err(runtime)?;
    println!(
        "overall accuracy {:.4} ({} records)",
        result.overall_acc, result.n_eval
    );
    Ok(())
}

fn report(common: &Common, results: &[String]) -> CmdResult {
    let mut named = Vec::new();
    for spec in results {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(Error::Config(format!("result `{spec}` is not NAME=PATH"))))?;
        let r = EvalResult::read(Path::new(path)).map_err(usage)?;
        named.push((name.to_string(), r));
    }
    let cmp = eval_report::compare_runs(&named).map_err(usage)?;
    write_invocation(
        &common.out_dir,
        json!({ "command": "report", "results": results }),
    )?;
    std::fs::write(common.out_dir.join("comparison.csv"), cmp.to_csv())
        .map_err(|e| runtime(e.into()))?;
    std::fs::write(common.out_dir.join("comparison.json"), cmp.to_json())
        .map_err(|e| runtime(e.into()))?;
    print!("{}", cmp.to_csv());
    Ok(())
}

pub fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::PrepareManifest {
            common,
            synthetic,
            n_source,
            n_target,
            source,
            target,
        } => prepare_manifest(
            common,
            *synthetic,
            *n_source,
            *n_target,
            source.as_deref(),
            target.as_deref(),
        ),
        Command::EmbedCache {
            common,
            config,
            overrides,
        } => embed_cache(common, config, overrides),
        Command::ScorePrior {
            common,
            manifest,
            weights,
        } => score_prior(common, manifest, weights.as_deref()),
        Command::Train {
            common,
            config,
            ablation,
            overrides,
            resume,
        } => train(common, config, *ablation, overrides, resume.as_deref()),
        Command::Evaluate {
            common,
            checkpoint,
            manifest,
        } => evaluate(common, checkpoint, manifest),
        Command::Report { common, results } => report(common, results),
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.error);
            f.code
        }
    }
}
