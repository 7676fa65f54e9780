use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mimicdiff::attack::{self, LabeledSet};
use mimicdiff::guidance::{self, PurifyOptions};
use mimicdiff::harness::{self, ExperimentConfig, Lab};
use mimicdiff::par::Execution;
use mimicdiff::score::AnyScoreModel;
use mimicdiff::tensor_io;

#[derive(Parser)]
#[command(name = "mimicdiff", version, about = "Guided diffusion purification lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (overrides `experiment.out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build or train the score model and save it.
    TrainScore(Common),
    /// Train the toy classifier and save it.
    TrainClf(Common),
    /// PGD-attack the evaluation set.
    Attack(Common),
    /// Purify the first `purify.count` attacked samples.
    Purify(Common),
    /// Check sign equality of L1 gradients under bounded perturbations.
    VerifyLemma(Common),
    /// Run the ablation grid over all replicate seeds.
    Ablate(Common),
    /// Guided-step counts and guidance-phase timing, gated vs full interval.
    Bench(Common),
    /// Mimic deviation of the configured guidance and the L2 leak diagnostic.
    Mimic(Common),
}

struct Ctx {
    config: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    exec: Execution,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let config = match &c.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        let out = c.out.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        let exec = if c.sequential { Execution::Sequential } else { Execution::Parallel };
        let ctx = Self { config, seed: c.seed, out, exec };
        harness::write_output(&ctx.out, "config.txt", &ctx.config.to_text())?;
        Ok(ctx)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        harness::write_json(&self.out, name, v)?;
        Ok(())
    }

    fn text(&self, name: &str, s: &str) -> Result<()> {
        harness::write_output(&self.out, name, s)?;
        Ok(())
    }

    fn lab(&self) -> Result<Lab> {
        Ok(Lab::prepare(&self.config, self.seed, self.exec)?)
    }
}

fn save_set(path: &Path, set: &LabeledSet) -> Result<()> {
    tensor_io::save(path, &set.to_tensors()?)?;
    Ok(())
}

#[derive(Serialize)]
struct ScoreSummary {
    kind: &'static str,
    dim: usize,
    initial_holdout_loss: Option<f64>,
    final_holdout_loss: Option<f64>,
}

fn train_score(ctx: &Ctx) -> Result<()> {
    let schedule = ctx.config.make_schedule()?;
    let (train, _) = ctx.config.make_datasets(ctx.seed)?;
    let (model, report) = ctx.config.score_model(&train, &schedule, ctx.seed)?;
    tensor_io::save(&ctx.path("score.mpt"), &model.to_tensors())?;
    tensor_io::save(&ctx.path("schedule.mpt"), &[schedule.to_tensor()])?;
    if let Some(r) = &report {
        let mut csv = String::from("step,train_loss\n");
        for (i, l) in r.curve.iter().enumerate() {
            csv.push_str(&format!("{},{}\n", i * mimicdiff::score::LOSS_LOG_EVERY, l));
        }
        ctx.text("train_curve.csv", &csv)?;
    }
    let summary = ScoreSummary {
        kind: match model {
            AnyScoreModel::Gmm(_) => "analytic",
            AnyScoreModel::Net(_) => "net",
        },
        dim: model.as_model().dim(),
        initial_holdout_loss: report.as_ref().map(|r| r.initial_holdout_loss),
        final_holdout_loss: report.as_ref().map(|r| r.final_holdout_loss),
    };
    ctx.json("score.json", &summary)?;
    println!("score model ({}) written to {}", summary.kind, ctx.path("score.mpt").display());
    Ok(())
}

#[derive(Serialize)]
struct ClassifierSummary {
    train_accuracy: f64,
    eval_accuracy: f64,
    classes: usize,
}

fn train_clf(ctx: &Ctx) -> Result<()> {
    let (train, eval) = ctx.config.make_datasets(ctx.seed)?;
    let clf = ctx.config.train_classifier(&train, ctx.seed)?;
    tensor_io::save(&ctx.path("classifier.mpt"), &clf.to_tensors())?;
    let summary = ClassifierSummary {
        train_accuracy: attack::accuracy(&clf, &train.xs, &train.labels)?,
        eval_accuracy: attack::accuracy(&clf, &eval.xs, &eval.labels)?,
        classes: clf.classes(),
    };
    ctx.json("classifier.json", &summary)?;
    println!("eval accuracy {:.4}", summary.eval_accuracy);
    Ok(())
}

#[derive(Serialize)]
struct AttackSummary {
    epsilon: f64,
    steps: usize,
    step_size: f64,
    samples: usize,
    clean_accuracy: f64,
    attacked_accuracy: f64,
    max_perturbation: f64,
}

fn run_attack(ctx: &Ctx) -> Result<()> {
    let lab = ctx.lab()?;
    save_set(&ctx.path("eval.mpt"), &lab.eval)?;
    save_set(&ctx.path("adversarial.mpt"), &lab.adversarial)?;
    tensor_io::save(&ctx.path("classifier.mpt"), &lab.classifier.to_tensors())?;
    let s = AttackSummary {
        epsilon: ctx.config.attack.epsilon,
        steps: ctx.config.attack.steps,
        step_size: ctx.config.attack.step_size,
        samples: lab.eval.len(),
        clean_accuracy: lab.clean_accuracy()?,
        attacked_accuracy: lab.attacked_accuracy()?,
        max_perturbation: lab.max_perturbation(),
    };
    ctx.json("attack.json", &s)?;
    println!("clean {:.4} attacked {:.4}", s.clean_accuracy, s.attacked_accuracy);
    Ok(())
}

#[derive(Serialize)]
struct PurifySummary {
    samples: usize,
    guided_steps: usize,
    standard_accuracy: f64,
    robust_accuracy: f64,
    unpurified_robust_accuracy: f64,
}

fn purify(ctx: &Ctx) -> Result<()> {
    let lab = ctx.lab()?;
    let cfg = ctx.config.guidance_config()?;
    let n = ctx.config.purify_count.min(lab.eval.len()).max(1);
    let subset = lab.eval.take(n);
    let adv = lab.adversarial.take(n);
    let seeds = &lab.sample_seeds(ctx.config.seeds[0])[..n];
    let clock = Instant::now();
    let clean = guidance::purify_batch(lab.model(), &lab.schedule, &subset.xs, &cfg, seeds, ctx.exec)?;
    let purified = guidance::purify_batch(lab.model(), &lab.schedule, &adv.xs, &cfg, seeds, ctx.exec)?;
    let elapsed = clock.elapsed();
    let first = guidance::purify_with(
        lab.model(),
        &lab.schedule,
        &adv.xs[0],
        &cfg,
        seeds[0],
        &PurifyOptions { record_trajectory: true, clean_reference: Some(&subset.xs[0]) },
    )?;
    ctx.text("guidance_log.csv", &first.log_csv())?;
    ctx.text("trajectory.csv", &first.trajectory.to_csv())?;
    save_set(&ctx.path("purified.mpt"), &LabeledSet { xs: purified.clone(), ..adv.clone() })?;
    let s = PurifySummary {
        samples: n,
        guided_steps: first.guidance_evaluations,
        standard_accuracy: attack::accuracy(&lab.classifier, &clean, &subset.labels)?,
        robust_accuracy: attack::accuracy(&lab.classifier, &purified, &adv.labels)?,
        unpurified_robust_accuracy: attack::accuracy(&lab.classifier, &adv.xs, &adv.labels)?,
    };
    ctx.json("purify.json", &s)?;
    println!(
        "standard {:.4} robust {:.4} (unpurified {:.4}); {} purifications in {:.2?}",
        s.standard_accuracy,
        s.robust_accuracy,
        s.unpurified_robust_accuracy,
        2 * n,
        elapsed
    );
    Ok(())
}

fn verify_lemma(ctx: &Ctx) -> Result<()> {
    let l = ctx.config.lemma;
    let rep = harness::verify_lemma1(l.trials, l.dim, l.xi, mimicdiff::rng::derive_seed(ctx.seed, 5))?;
    ctx.json("lemma1.json", &rep)?;
    println!(
        "long-range equality {}/{}; counterexample differs: {}; short-range disagreement rate {:.4}",
        rep.long_range_equal, rep.trials, rep.counterexample.differs, rep.short_range_disagreement_rate
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationSummary {
    clean_accuracy: f64,
    unpurified_robust_accuracy: f64,
    rows: Vec<harness::AblationRow>,
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let lab = ctx.lab()?;
    let rows = harness::run_ablation(&lab, ctx.exec)?;
    ctx.text("ablation.csv", &harness::ablation_csv(&rows))?;
    ctx.text("ablation_seeds.csv", &harness::ablation_seed_csv(&rows))?;
    for r in &rows {
        println!(
            "{:18} standard {:.4} robust {:.4} +- {:.4} deviation {:.5} failures {} ({:.2?})",
            r.name,
            r.standard.mean,
            r.robust.mean,
            r.robust.std,
            r.deviation.mean,
            r.failures.len(),
            r.wall_time
        );
    }
    let summary = AblationSummary {
        clean_accuracy: lab.clean_accuracy()?,
        unpurified_robust_accuracy: lab.attacked_accuracy()?,
        rows,
    };
    ctx.json("ablation.json", &summary)?;
    Ok(())
}

fn bench(ctx: &Ctx) -> Result<()> {
    let lab = ctx.lab()?;
    let cfg = ctx.config.guidance_config()?;
    let n = ctx.config.purify_count.min(lab.eval.len()).max(1);
    let seeds = &lab.sample_seeds(ctx.config.seeds[0])[..n];
    let rep = harness::timing_report(lab.model(), &lab.schedule, &lab.adversarial.xs[..n], &cfg, seeds)?;
    ctx.json("timing.json", &rep)?;
    println!(
        "guided steps {} of {} (ratio {}); full interval {}",
        rep.gated_guided_steps, rep.steps, rep.guided_step_ratio, rep.full_guided_steps
    );
    println!(
        "guidance phase: gated {:.3?}, full {:.3?} ({:.1}% less); total: gated {:.3?}, full {:.3?}",
        rep.gated_guidance,
        rep.full_guidance,
        100.0 * rep.guidance_time_reduction(),
        rep.gated_total,
        rep.full_total
    );
    Ok(())
}

#[derive(Serialize)]
struct MimicSummary {
    samples: usize,
    deviation_mean: f64,
    zero_deviation_samples: usize,
}

fn mimic(ctx: &Ctx) -> Result<()> {
    let lab = ctx.lab()?;
    let cfg = ctx.config.guidance_config()?;
    let n = ctx.config.purify_count.min(lab.eval.len()).max(1);
    let seeds = lab.sample_seeds(ctx.config.seeds[0]);
    let devs = mimicdiff::par::try_map_indexed(ctx.exec, n, |i| {
        harness::mimic_deviation(lab.model(), &lab.schedule, &lab.eval.xs[i], &lab.adversarial.xs[i], &cfg, seeds[i])
    })?;
    let mut csv = String::from("sample,label,deviation\n");
    for (i, d) in devs.iter().enumerate() {
        csv.push_str(&format!("{},{},{}\n", i, lab.eval.labels[i], d));
    }
    ctx.text("mimic.csv", &csv)?;
    let phi: Vec<f64> = lab.adversarial.xs[0].iter().zip(&lab.eval.xs[0]).map(|(a, o)| a - o).collect();
    let leak = harness::diagnose_l2_leak(lab.model(), &lab.schedule, &lab.eval.xs[0], &phi, &cfg, seeds[0])?;
    ctx.text("l2_leak.csv", &harness::leak_csv(&leak))?;
    let s = MimicSummary {
        samples: n,
        deviation_mean: devs.iter().sum::<f64>() / n as f64,
        zero_deviation_samples: devs.iter().filter(|d| **d == 0.0).count(),
    };
    ctx.json("mimic.json", &s)?;
    println!("mean deviation {:.6} over {} samples ({} exactly zero)", s.deviation_mean, n, s.zero_deviation_samples);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let (common, run): (&Common, fn(&Ctx) -> Result<()>) = match &cli.command {
        Command::TrainScore(c) => (c, train_score),
        Command::TrainClf(c) => (c, train_clf),
        Command::Attack(c) => (c, run_attack),
        Command::Purify(c) => (c, purify),
        Command::VerifyLemma(c) => (c, verify_lemma),
        Command::Ablate(c) => (c, ablate),
        Command::Bench(c) => (c, bench),
        Command::Mimic(c) => (c, mimic),
    };
    let ctx = Ctx::new(common)?;
    run(&ctx)
}
