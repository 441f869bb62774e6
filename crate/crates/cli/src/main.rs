use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use groundseg::harness::bench::{bench_pruning, pruning_ablation};
use groundseg::harness::checkpoint;
use groundseg::harness::eval::{evaluate, evaluate_scene, EvalReport};
use groundseg::harness::export::{frame_pgm, mask_pgm, RleMasks};
use groundseg::harness::gradcheck::{box_feedback, run_checks};
use groundseg::harness::model::MASK_FACTOR;
use groundseg::harness::scene::{describe, generate_scene};
use groundseg::harness::train::{geometry, scene_set};
use groundseg::harness::{ForwardOptions, Model, Prepared, RunConfig, Split, Suite, Trainer};

#[derive(Parser)]
#[command(name = "groundseg", version, about = "Grounded video object segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config, writing checkpoints and the loss curve to DIR.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on held-out scenes of one suite.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "standard")]
        suite: Suite,
        #[arg(long)]
        report: PathBuf,
        /// Number of held-out scenes.
        #[arg(long, default_value_t = 50)]
        scenes: usize,
        /// Skip the temporal enhancer.
        #[arg(long)]
        bypass_temporal: bool,
    },
    /// Finite-difference checks against the reverse sweep.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
    },
    /// Decoder cost with and without query pruning.
    BenchPruning {
        #[arg(long, default_value_t = 900)]
        n: usize,
        #[arg(long, default_value_t = 6)]
        layers: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        k: Vec<usize>,
        /// Also compare confidence and random pruning J&F with this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render one scene, run the model on it and export frames and masks.
    Demo {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Trained weights; an untrained default model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "standard")]
        suite: Suite,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, out } => train(&config, &out),
        Command::Eval {
            checkpoint,
            suite,
            report,
            scenes,
            bypass_temporal,
        } => eval(&checkpoint, suite, &report, scenes, bypass_temporal),
        Command::Gradcheck { module, seeds } => gradcheck(module.as_deref(), seeds),
        Command::BenchPruning {
            n,
            layers,
            dim,
            k,
            checkpoint,
            seed,
        } => bench(n, layers, dim, &k, checkpoint.as_deref(), seed),
        Command::Demo {
            seed,
            out,
            checkpoint,
            suite,
        } => demo(seed, &out, checkpoint.as_deref(), suite),
    }
}

fn prepared(cfg: &RunConfig, suite: Suite, split: Split, count: usize) -> Result<Vec<Prepared>> {
    Ok(scene_set(cfg, suite, split, count)?.into_iter().map(Prepared::new).collect())
}

fn summary(label: &str, r: &EvalReport) -> String {
    format!(
        "{label}: J={:.4} F={:.4} J&F={:.4} correct={:.2}",
        r.result.j_mean,
        r.result.f_mean,
        r.result.jf_mean,
        r.accuracy()
    )
}

fn train(config: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = RunConfig::parse(&text)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let started = Instant::now();
    let every = cfg.checkpoint_every.clamp(1, 50);
    trainer.run(Some(out), |step, loss| {
        if step % every == 0 || step == cfg.steps {
            eprintln!("step {step:>5}  loss {loss:.5}  {:.0}s", started.elapsed().as_secs_f64());
        }
    })?;
    let train_report = evaluate(&trainer.model, trainer.fixed_scenes(), ForwardOptions::default())?;
    let held_out = prepared(&cfg, cfg.suite, Split::HeldOut, cfg.scenes.max(8))?;
    let held_report = evaluate(&trainer.model, &held_out, ForwardOptions::default())?;
    let lines = format!("{}\n{}\n", summary("train", &train_report), summary("held-out", &held_report));
    print!("{lines}");
    fs::write(out.join("summary.txt"), lines)?;
    Ok(())
}

fn eval(ckpt: &Path, suite: Suite, report: &Path, scenes: usize, bypass_temporal: bool) -> Result<()> {
    let (model, step) = checkpoint::load(ckpt)?;
    let clips = prepared(&model.config, suite, Split::HeldOut, scenes)?;
    let opts = ForwardOptions {
        bypass_temporal,
        ..ForwardOptions::default()
    };
    let r = evaluate(&model, &clips, opts)?;
    fs::write(report, r.result.to_csv()).with_context(|| format!("writing {}", report.display()))?;
    println!("checkpoint step {step}, suite {}, {} scenes", suite.name(), clips.len());
    println!("{}", summary("eval", &r));
    Ok(())
}

fn gradcheck(module: Option<&str>, seeds: u64) -> Result<()> {
    let started = Instant::now();
    let mut failed = 0;
    for o in run_checks(module, 0..seeds)? {
        let verdict = if o.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!o.passed());
        println!(
            "{verdict:<4} {:<18} {:<28} worst {:.3e} (seed {}) tol {:.0e}",
            o.module, o.name, o.worst, o.worst_seed, o.tolerance
        );
    }
    if module.map_or(true, |m| m == "mask_decoder") {
        let hits = (0..seeds).filter(|&s| box_feedback(s)).count();
        println!("box-head gradients from a mask-only loss: {hits}/{seeds}");
    }
    println!("{:.1}s", started.elapsed().as_secs_f64());
    if failed > 0 {
        bail!("{failed} check(s) above tolerance");
    }
    Ok(())
}

fn bench(n: usize, layers: usize, dim: usize, ks: &[usize], ckpt: Option<&Path>, seed: u64) -> Result<()> {
    let started = Instant::now();
    let b = bench_pruning(n, layers, dim, ks, seed)?;
    print!("{}", b.to_text());
    println!("{:.2}s", started.elapsed().as_secs_f64());
    if let Some(dir) = ckpt {
        let (model, _) = checkpoint::load(dir)?;
        let clips = prepared(&model.config, Suite::Standard, Split::HeldOut, 8)?;
        let a = pruning_ablation(&model, &clips, seed)?;
        println!(
            "J&F unpruned {:.4}, confidence pruning {:.4}, random pruning {:.4}",
            a.jf_unpruned, a.jf_confidence, a.jf_random
        );
    }
    Ok(())
}

fn demo(seed: u64, out: &Path, ckpt: Option<&Path>, suite: Suite) -> Result<()> {
    let model = match ckpt {
        Some(dir) => checkpoint::load(dir)?.0,
        None => Model::new(RunConfig::default())?,
    };
    let scene = generate_scene(seed, suite.difficulty(), geometry(&model.config))?;
    let clip = Prepared::new(scene);
    let outcome = evaluate_scene(&model, &clip, ForwardOptions::default())?;
    let (h, w) = (clip.scene.height, clip.scene.width);
    let (mh, mw) = (h / MASK_FACTOR, w / MASK_FACTOR);
    fs::create_dir_all(out)?;
    for (t, frame) in clip.frames.iter().enumerate() {
        fs::write(out.join(format!("frame_{t}.pgm")), frame_pgm(&frame.pixels, h, w))?;
        fs::write(out.join(format!("mask_{t}.pgm")), mask_pgm(&outcome.masks[t], mh, mw, MASK_FACTOR))?;
    }
    let rle = |masks: Vec<Vec<bool>>| RleMasks {
        height: mh,
        width: mw,
        frames: masks.into_iter().enumerate().collect(),
    };
    let truth = (0..clip.frames.len()).map(|t| clip.scene.target_mask_at(t, MASK_FACTOR)).collect();
    fs::write(out.join("pred.rle"), rle(outcome.masks.clone()).to_text())?;
    fs::write(out.join("truth.rle"), rle(truth).to_text())?;
    println!("program: {}", describe(&clip.scene.program));
    println!(
        "selected slots {:?}, J={:.4} F={:.4}, referred object {}",
        outcome.selected,
        outcome.score.j,
        outcome.score.f,
        if outcome.correct { "found" } else { "missed" }
    );
    println!("wrote {}", out.display());
    Ok(())
}
