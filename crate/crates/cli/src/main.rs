use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use bsg::detection::IOU_THRESHOLDS;
use bsg::harness::{
    ablation_rows, ablation_table, agent_corpora, category_names, evaluate, evaluate_detector, grad_check_suite,
    held_out_scenes, load_agent, load_detector, save_agent_run, save_detector_run, save_evaluation, train_agent,
    train_detector, write_artifact, BevCache, EpisodeTrace, Manifest, RolloutMode, RunConfig,
};
use bsg::numcore::Checkpoint;
use bsg::synthworld::{generate_world, Corpus, SizeClass};

#[derive(Parser)]
#[command(name = "bsg", version, about = "BEV scene-graph navigation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Size {
    Small,
    Medium,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Greedy,
    Random,
    Expert,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one world and write it as JSON.
    GenWorld {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "medium")]
        size: Size,
    },
    /// Generate the train/val/test episode corpora.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the BEV encoder and detection head.
    TrainDetector {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a detector checkpoint on held-out scenes.
    DetectEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the navigation agent by imitation.
    TrainAgent {
        #[command(flatten)]
        common: Common,
        /// Detector checkpoint whose BEV encoder the agent uses.
        #[arg(long)]
        detector: Option<PathBuf>,
        /// Corpus directory written by gen-corpus; regenerated from the seed when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Roll out an agent checkpoint on a corpus split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: EvalMode,
        /// Also run the fusion-weight and neighborhood sweeps.
        #[arg(long)]
        ablation: bool,
    },
    /// Finite-difference check of every differentiable block.
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Scale the analytic gradient of this block to simulate a bug.
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Print the steps of recorded episode traces.
    TraceDump {
        /// traces.jsonl written by eval.
        #[arg(long)]
        traces: PathBuf,
        /// Only this episode (line index).
        #[arg(long)]
        episode: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest_for(command: &str, common: &Common, cfg: &RunConfig) -> Result<Manifest> {
    std::fs::create_dir_all(&common.out)?;
    let mut m = Manifest::new(command, cfg)?;
    if let Some(p) = &common.config {
        m.input(p)?;
    }
    Ok(m)
}

fn load_split(cfg: &RunConfig, dir: Option<&Path>, split: Split) -> Result<Corpus> {
    let name = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    match dir {
        Some(d) => Ok(Corpus::load(&d.join(name)).with_context(|| format!("loading corpus {}", d.display()))?),
        None => {
            let c = agent_corpora(cfg)?;
            Ok(match split {
                Split::Train => c.train,
                Split::Val => c.val,
                Split::Test => c.test,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenWorld { common, size } => {
            let cfg = load_config(&common)?;
            let size = match size {
                Size::Small => SizeClass::Small,
                Size::Medium => SizeClass::Medium,
            };
            let world = generate_world(cfg.seed, size);
            world.validate()?;
            let mut m = manifest_for("gen-world", &common, &cfg)?;
            write_artifact(&mut m, &common.out, &format!("world_{}.json", cfg.seed), world.to_json()?.as_bytes())?;
            m.save(&common.out)?;
            println!("world {} with {} nodes, {} objects", cfg.seed, world.node_count(), world.objects.len());
        }
        Command::GenCorpus { common } => {
            let cfg = load_config(&common)?;
            let c = agent_corpora(&cfg)?;
            let mut m = manifest_for("gen-corpus", &common, &cfg)?;
            for (name, corpus) in [("train", &c.train), ("val", &c.val), ("test", &c.test)] {
                corpus.save(&common.out.join(name))?;
                let bytes = std::fs::read(common.out.join(name).join("episodes.json"))?;
                m.artifacts.insert(format!("{name}/episodes.json"), bsg::harness::sha256_hex(&bytes));
                println!("{name}: {} worlds, {} episodes", corpus.worlds.len(), corpus.episodes.len());
            }
            m.save(&common.out)?;
        }
        Command::TrainDetector { common } => {
            let cfg = load_config(&common)?;
            let run = train_detector(&cfg, |r| {
                if r.iteration == 1 || r.iteration % 100 == 0 {
                    info!("iteration {} loss {:.4} lr {:.2e}", r.iteration, r.loss, r.learning_rate);
                }
            })?;
            let mut m = save_detector_run(&cfg, &run, &common.out)?;
            let report = evaluate_detector(&run.store, &run.detector, &held_out_scenes(&cfg)?)?;
            write_artifact(&mut m, &common.out, "detection_metrics.csv", report.to_csv(&category_names()).as_bytes())?;
            m.note("mAP50", report.map_at(0.5));
            m.note("mAR50", report.mar_at(0.5));
            m.save(&common.out)?;
            println!(
                "trained {} iterations in {:.1}s; held-out mAP50 {:.3} mAR50 {:.3}",
                cfg.detector.iterations,
                run.seconds,
                report.map_at(0.5).unwrap_or(0.0),
                report.mar_at(0.5).unwrap_or(0.0)
            );
        }
        Command::DetectEval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let (store, det) = load_detector(&cfg, &checkpoint)?;
            let report = evaluate_detector(&store, &det, &held_out_scenes(&cfg)?)?;
            let mut m = manifest_for("detect-eval", &common, &cfg)?;
            m.input(&checkpoint)?;
            write_artifact(&mut m, &common.out, "detection_metrics.csv", report.to_csv(&category_names()).as_bytes())?;
            m.save(&common.out)?;
            for t in IOU_THRESHOLDS {
                println!(
                    "IoU {t}: mAP {:.3} mAR {:.3}",
                    report.map_at(t).unwrap_or(0.0),
                    report.mar_at(t).unwrap_or(0.0)
                );
            }
        }
        Command::TrainAgent { common, detector, corpus } => {
            let cfg = load_config(&common)?;
            let ckpt = match &detector {
                Some(p) => Some(Checkpoint::read(std::fs::File::open(p)?)?),
                None => None,
            };
            let mut corpora = agent_corpora(&cfg)?;
            if let Some(dir) = &corpus {
                corpora.train = load_split(&cfg, Some(dir), Split::Train)?;
                corpora.val = load_split(&cfg, Some(dir), Split::Val)?;
            }
            let run = train_agent(&cfg, ckpt.as_ref(), &corpora, |r| {
                if let Some(sr) = r.val_sr {
                    info!("iteration {} loss {:.4} val SR {:.3}", r.iteration, r.loss, sr);
                } else if r.iteration % 100 == 0 {
                    info!("iteration {} loss {:.4}", r.iteration, r.loss);
                }
            })?;
            save_agent_run(&cfg, &run, detector.as_deref(), &common.out)?;
            let val = run.log.iter().rev().find_map(|r| r.val_sr).unwrap_or(0.0);
            println!("trained {} iterations in {:.1}s; validation SR {val:.3}", cfg.agent.iterations, run.seconds);
        }
        Command::Eval { common, checkpoint, corpus, split, mode, ablation } => {
            let cfg = load_config(&common)?;
            let (store, agent) = load_agent(&cfg, &checkpoint)?;
            let corpus = load_split(&cfg, corpus.as_deref(), split)?;
            let mode = match mode {
                EvalMode::Greedy => RolloutMode::Greedy,
                EvalMode::Random => RolloutMode::Random,
                EvalMode::Expert => RolloutMode::Expert,
            };
            let cache = BevCache::new();
            let eval = evaluate(&store, &agent, &corpus, mode, cfg.seed, Some(&cache))?;
            let mut m = manifest_for("eval", &common, &cfg)?;
            m.input(&checkpoint)?;
            let label = format!("{mode:?}").to_lowercase();
            let mut rows = vec![(label, eval.report)];
            if ablation {
                let (fusion, neighborhood) = ablation_rows(&store, &agent, &corpus, &cfg)?;
                let report = format!(
                    "{}\n{}",
                    ablation_table("Fusion weight", &fusion),
                    ablation_table("Grid neighborhood size", &neighborhood)
                );
                write_artifact(&mut m, &common.out, "ablation.md", report.as_bytes())?;
                print!("{report}");
                rows.extend(fusion);
                rows.extend(neighborhood);
            }
            save_evaluation(&mut m, &common.out, &rows, &eval)?;
            m.save(&common.out)?;
            let r = eval.report;
            println!(
                "{} episodes: SR {:.3} OSR {:.3} SPL {:.3} NE {:.2} TL {:.2} nDTW {:.3}",
                eval.traces.len(),
                r.sr,
                r.osr,
                r.spl,
                r.ne,
                r.tl,
                r.ndtw
            );
        }
        Command::GradCheck { common, inject_fault } => {
            let cfg = load_config(&common)?;
            let suite = grad_check_suite(cfg.seed, inject_fault.as_deref())?;
            print!("{}", suite.render());
            let mut m = manifest_for("grad-check", &common, &cfg)?;
            write_artifact(&mut m, &common.out, "grad_check.json", serde_json::to_string_pretty(&suite)?.as_bytes())?;
            m.save(&common.out)?;
            if !suite.passed() {
                bail!("gradient check failed for {}", suite.failed_blocks().join(", "));
            }
            println!("{} blocks passed in {:.1}s", suite.blocks.len(), suite.seconds);
        }
        Command::TraceDump { traces, episode } => {
            let text = std::fs::read_to_string(&traces).with_context(|| format!("reading {}", traces.display()))?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            let picked: Vec<(usize, &str)> = match episode {
                Some(i) => vec![(i, *lines.get(i).with_context(|| format!("no episode {i} in {}", lines.len()))?)],
                None => lines.iter().copied().enumerate().collect(),
            };
            for (i, line) in picked {
                let t: EpisodeTrace = serde_json::from_str(line).with_context(|| format!("parsing trace {i}"))?;
                print_trace(i, &t);
            }
        }
    }
    Ok(())
}

fn print_trace(i: usize, t: &EpisodeTrace) {
    println!(
        "episode {i}: world {} start {} goal {} | SR {} SPL {:.3} NE {:.2}",
        t.world_id, t.start, t.goal, t.metrics.sr, t.metrics.spl, t.metrics.ne
    );
    for s in &t.steps {
        let action = match &s.action {
            bsg::policy::Action::Stop => "stop".to_string(),
            bsg::policy::Action::Move { target, route } => format!("move {target} via {route:?}"),
        };
        let forced = if s.forced_stop { " (forced stop)" } else { "" };
        println!("  t={} node {} candidates {:?} -> {action}{forced}", s.t, s.node, s.candidates);
    }
    println!("  trajectory {:?}", t.trajectory);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
