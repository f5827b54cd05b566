use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use conspar::consistency::{pair_consistency, relevant_actions};
use conspar::eval::{builtin_probe_cases, evaluate, language_consistency_probe};
use conspar::executor::execute;
use conspar::experiment::{run_ablation, AblationConfig, Arm};
use conspar::generator::{builtin_utterance_templates, generate_corpus};
use conspar::language::{parse_text, Grammar, Variant};
use conspar::model::load_checkpoint;
use conspar::pairing::{build_pairs, builtin_templates, load_pairs, save_pairs};
use conspar::scene::{load_corpus, save_corpus};
use conspar::search::{
    beam_search, enumerate, index_scenes, is_correct, renormalize_log_probs, BeamConfig, MAX_ENUMERATION_LEN,
};
use conspar::training::{candidate_consistency, iterative_train, write_outcome, NeighborBeam, TrainConfig};

/// Weakly supervised semantic parsing with a consistency reward.
#[derive(Parser)]
#[command(name = "conspar", version, about)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for search, training and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic corpus.
    Gen {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair utterances that share an equivalent phrase.
    Pair {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List every program up to a length, optionally only those correct for one utterance.
    Enumerate {
        #[arg(long, default_value = "new")]
        grammar: Variant,
        #[arg(long)]
        max_actions: usize,
        /// Corpus holding the utterance whose scenes filter the programs.
        #[arg(long, requires = "id")]
        scenes: Option<PathBuf>,
        /// Utterance id inside `--scenes`.
        #[arg(long, requires = "scenes")]
        id: Option<String>,
        /// Stop after this many programs.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run one program on every scene of a corpus.
    Execute {
        #[arg(long, default_value = "new")]
        grammar: Variant,
        #[arg(long)]
        program: String,
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Train a parser; writes checkpoints and metrics.jsonl into `--out`.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Needed when the configuration enables the consistency reward.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// JSON training configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint's top-1 programs; prints the report as JSON.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        beam: BeamArgs,
        /// Include one record per utterance.
        #[arg(long)]
        per_utterance: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show relevant actions, per-neighbor F1 and the consistency reward for one pair.
    Reward {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Index of the pair in the pairs file.
        #[arg(long)]
        pair: usize,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = conspar::consistency::DEFAULT_TAU)]
        tau: f64,
        #[command(flatten)]
        beam: BeamArgs,
    },
    /// Train every language and reward setting over several seeds and tabulate the results.
    Ablation {
        /// JSON ablation configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// F1 of the shared phrase's actions in the gold programs of the probe pairs.
    Probe,
}

#[derive(Args, Clone, Copy)]
struct BeamArgs {
    #[arg(long, default_value_t = 10)]
    beam_size: usize,
    #[arg(long, default_value_t = 40)]
    max_len: usize,
}

impl From<BeamArgs> for BeamConfig {
    fn from(b: BeamArgs) -> Self {
        BeamConfig { beam_size: b.beam_size, max_len: b.max_len }
    }
}

/// Problems with the invocation itself rather than with the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

#[derive(Serialize)]
struct RunManifest {
    command: Vec<String>,
    config_hash: String,
    seed: u64,
    version: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: String,
    finished: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

struct Run {
    argv: Vec<String>,
    seed: u64,
    started: String,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
}

impl Run {
    /// Writes the manifest next to `anchor` (inside it when it is a directory).
    fn finish(self, outputs: &[PathBuf], anchor: &Path) -> Result<()> {
        let digests = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths.iter().map(|p| Ok((p.display().to_string(), digest_file(p)?))).collect()
        };
        let manifest = RunManifest {
            command: self.argv,
            config_hash: sha256_hex(self.config.to_string().as_bytes()),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            inputs: digests(&self.inputs)?,
            outputs: digests(outputs)?,
            started: self.started,
            finished: now(),
        };
        let path = if anchor.is_dir() {
            anchor.join("manifest.json")
        } else {
            let mut name = anchor.as_os_str().to_owned();
            name.push(".manifest.json");
            PathBuf::from(name)
        };
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let mut manifest =
        Run { argv, seed: cli.seed, started: now(), config: serde_json::Value::Null, inputs: Vec::new() };
    match cli.command {
        Command::Gen { n, out } => {
            if n == 0 {
                return Err(UsageError("--n must be positive".into()).into());
            }
            let corpus = generate_corpus(cli.seed, n, &builtin_utterance_templates())?;
            save_corpus(&out, &corpus)?;
            manifest.config = serde_json::json!({ "n": n });
            manifest.finish(std::slice::from_ref(&out), &out)?;
            eprintln!("wrote {} utterances to {}", corpus.len(), out.display());
        }
        Command::Pair { corpus, out } => {
            let examples = load_corpus(&corpus)?;
            let pairs = build_pairs(&examples, &builtin_templates(), cli.seed);
            save_pairs(&out, &pairs)?;
            manifest.inputs.push(corpus);
            manifest.finish(std::slice::from_ref(&out), &out)?;
            eprintln!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::Enumerate { grammar, max_actions, scenes, id, limit } => {
            if max_actions > MAX_ENUMERATION_LEN {
                return Err(UsageError(format!("--max-actions is at most {MAX_ENUMERATION_LEN}")).into());
            }
            let g = Grammar::build(grammar);
            let filter = match (scenes, id) {
                (Some(path), Some(id)) => {
                    let corpus = load_corpus(&path)?;
                    let ex = corpus.iter().find(|e| e.id == id).ok_or_else(|| {
                        anyhow!(conspar::Error::Invariant {
                            id: id.clone(),
                            message: format!("no such utterance in {}", path.display()),
                        })
                    })?;
                    Some(index_scenes(&ex.scenes))
                }
                _ => None,
            };
            let mut shown = 0usize;
            for p in enumerate(&g, max_actions) {
                if limit.is_some_and(|l| shown >= l) {
                    break;
                }
                if filter.as_ref().is_some_and(|s| !is_correct(&p, s)) {
                    continue;
                }
                println!("{p}");
                shown += 1;
            }
        }
        Command::Execute { grammar, program, scenes } => {
            let g = Grammar::build(grammar);
            let p = parse_text(&g, &program).map_err(|e| UsageError(format!("--program: {e}")))?;
            for ex in load_corpus(&scenes)? {
                for (scene, _) in &ex.scenes {
                    println!("{}\t{}", scene.id, execute(&p, scene));
                }
            }
        }
        Command::Train { corpus, pairs, config, out } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    TrainConfig::from_json(&text)?
                }
                None => TrainConfig::default(),
            };
            cfg.seed = cli.seed;
            if cfg.consistency_reward && pairs.is_none() {
                return Err(UsageError("the consistency reward needs --pairs".into()).into());
            }
            let examples = load_corpus(&corpus)?;
            let pair_list = match &pairs {
                Some(p) => load_pairs(p)?,
                None => Vec::new(),
            };
            let outcome = iterative_train(&cfg, &examples, &pair_list)?;
            write_outcome(&out, &Grammar::build(cfg.grammar), &outcome)?;
            manifest.inputs.push(corpus);
            manifest.inputs.extend(pairs);
            manifest.inputs.extend(config);
            manifest.config = serde_json::to_value(&cfg)?;
            let mut written: Vec<PathBuf> =
                fs::read_dir(&out)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
            written.retain(|p| p.file_name().is_some_and(|n| n != "manifest.json"));
            written.sort();
            manifest.finish(&written, &out)?;
            if let Some(last) = outcome.metrics.last() {
                eprintln!(
                    "training accuracy {:.3}, consistency {:.3}; checkpoints in {}",
                    last.accuracy,
                    last.consistency,
                    out.display()
                );
            }
        }
        Command::Eval { corpus, checkpoint, beam, per_utterance, out } => {
            let (variant, params) = load_checkpoint(&checkpoint)?;
            let examples = load_corpus(&corpus)?;
            let mut report = evaluate(&params, &examples, &Grammar::build(variant), beam.into());
            if !per_utterance {
                report = report.without_records();
            }
            let text = serde_json::to_string_pretty(&report)? + "\n";
            print!("{text}");
            if let Some(out) = out {
                write_text(&out, &text)?;
                manifest.inputs = vec![corpus, checkpoint];
                manifest.config = serde_json::json!({ "beam_size": beam.beam_size, "max_len": beam.max_len });
                manifest.finish(std::slice::from_ref(&out), &out)?;
            }
        }
        Command::Reward { corpus, pairs, pair, checkpoint, tau, beam } => {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(UsageError("--tau must lie in (0, 1]".into()).into());
            }
            let (variant, params) = load_checkpoint(&checkpoint)?;
            let g = Grammar::build(variant);
            let examples = load_corpus(&corpus)?;
            let list = load_pairs(&pairs)?;
            let p = list
                .get(pair)
                .ok_or_else(|| UsageError(format!("--pair {pair}: the file holds {} pairs", list.len())))?;
            let find = |id: &str| {
                examples.iter().find(|e| e.id == id).ok_or_else(|| {
                    anyhow!(conspar::Error::Invariant {
                        id: id.to_string(),
                        message: "pair refers to an utterance missing from the corpus".into(),
                    })
                })
            };
            let (x, xp) = (find(&p.x)?, find(&p.x_prime)?);
            let bx = beam_search(&params, &g, &x.tokens, beam.into()).candidates;
            let bxp = beam_search(&params, &g, &xp.tokens, beam.into()).candidates;
            let nb = NeighborBeam::from_beam(&bxp, &index_scenes(&xp.scenes), p.span_x, p.span_x_prime);
            let names = |set: &conspar::consistency::RelevantActionSet| -> Vec<String> {
                set.iter().map(|a| g.action(*a).text().to_string()).collect()
            };
            let mut neighbors = Vec::new();
            let mut theirs = Vec::new();
            for (c, w) in nb.candidates.iter().zip(&nb.weights) {
                let a = relevant_actions(&c.attention, &c.program, p.span_x_prime, tau)?;
                neighbors
                    .push(serde_json::json!({ "program": c.program.to_string(), "weight": w, "relevant": names(&a) }));
                theirs.push(a);
            }
            let lps: Vec<f64> = bx.iter().map(|c| c.log_prob).collect();
            let weights = if lps.is_empty() { vec![] } else { renormalize_log_probs(&lps)? };
            let scenes = index_scenes(&x.scenes);
            let mut candidates = Vec::new();
            for (c, w) in bx.iter().zip(&weights) {
                let a = relevant_actions(&c.attention, &c.program, p.span_x, tau)?;
                let s: Vec<f64> = theirs.iter().map(|t| pair_consistency(&a, t)).collect();
                candidates.push(serde_json::json!({
                    "program": c.program.to_string(),
                    "weight": w,
                    "correct": is_correct(&c.program, &scenes),
                    "relevant": names(&a),
                    "f1_per_neighbor": s,
                    "consistency": candidate_consistency(c, std::slice::from_ref(&nb), tau)?,
                }));
            }
            let report = serde_json::json!({
                "x": x.text, "x_prime": xp.text, "phrase": p.phrase,
                "span_x": p.span_x, "span_x_prime": p.span_x_prime, "tau": tau,
                "neighbors": neighbors, "candidates": candidates,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablation { config, out } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str::<AblationConfig>(&text).map_err(|e| {
                        anyhow!(conspar::Error::Invariant { id: path.display().to_string(), message: e.to_string() })
                    })?
                }
                None => AblationConfig::default(),
            };
            if config.is_none() {
                cfg.train.seed = cli.seed;
            }
            cfg.train.validate()?;
            let report = run_ablation(&cfg, &Arm::all())?;
            print!("{}", report.table());
            if let Some(out) = out {
                write_text(&out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
                manifest.inputs.extend(config);
                manifest.config = serde_json::to_value(&cfg)?;
                manifest.finish(std::slice::from_ref(&out), &out)?;
            }
        }
        Command::Probe => {
            for r in language_consistency_probe(&builtin_probe_cases())? {
                println!("{}\tNEW {:.2}\tOLD {:.2}", r.name, r.f1_new, r.f1_old);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
