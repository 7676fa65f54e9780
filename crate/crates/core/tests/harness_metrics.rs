use mimicdiff::guidance::{GuidanceConfig, Norm};
use mimicdiff::harness::{
    ablation_csv, ablation_seed_csv, mimic_deviation, purify_pair, run_ablation, timing_report, ExperimentConfig, Lab,
    ABLATION_COLUMNS,
};
use mimicdiff::operators::Operator;
use mimicdiff::par::Execution;
use mimicdiff::rng;
use mimicdiff::schedule::{NoiseSchedule, ScheduleKind};
use mimicdiff::score::GmmScoreModel;

fn sched() -> NoiseSchedule {
    NoiseSchedule::new(100, ScheduleKind::LinearBeta).unwrap()
}

/// Data far from the clean input, so every estimate stays in the long range.
fn far_setup(n: usize) -> (GmmScoreModel, Vec<f64>) {
    let model = GmmScoreModel::gaussian(vec![10.0; n], vec![0.5; n]).unwrap();
    (model, vec![0.0; n])
}

fn long_only(norm: Norm) -> GuidanceConfig {
    GuidanceConfig { use_short: false, norm, scale: 2e-3, ..GuidanceConfig::mimic(100, Operator::Identity) }
}

#[test]
fn deviation_is_zero_without_a_perturbation() {
    let (model, x_ori) = far_setup(4);
    for norm in [Norm::L1, Norm::L2] {
        let d = mimic_deviation(&model, &sched(), &x_ori, &x_ori, &long_only(norm), 3).unwrap();
        assert_eq!(d, 0.0);
    }
}

#[test]
fn l1_deviation_vanishes_in_the_long_range_but_l2_does_not() {
    let n = 4;
    let (model, x_ori) = far_setup(n);
    let s = sched();
    let mut r = rng::stream(1, 0);
    let mut l2_positive = 0;
    for seed in 0..100 {
        let phi = rng::uniform_vec(&mut r, n, -0.1, 0.1);
        let x_adv: Vec<f64> = x_ori.iter().zip(&phi).map(|(o, p)| o + p).collect();
        let pair = purify_pair(&model, &s, &x_ori, &x_adv, &long_only(Norm::L1), seed).unwrap();
        assert_eq!(pair.deviation, 0.0, "seed {seed}");
        assert_eq!(pair.adversarial.x0, pair.clean.x0);
        if mimic_deviation(&model, &s, &x_ori, &x_adv, &long_only(Norm::L2), seed).unwrap() > 0.0 {
            l2_positive += 1;
        }
    }
    assert!(l2_positive >= 95, "{l2_positive} of 100");
}

#[test]
fn unguided_runs_have_zero_deviation() {
    let (model, x_ori) = far_setup(3);
    let cfg = GuidanceConfig::disabled(100);
    let d = mimic_deviation(&model, &sched(), &x_ori, &[0.1, -0.1, 0.05], &cfg, 4).unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn middle_phase_guides_31_of_100_steps() {
    let (model, x_ori) = far_setup(4);
    let targets = vec![x_ori.clone(); 3];
    let rep = timing_report(&model, &sched(), &targets, &long_only(Norm::L1), &[1, 2, 3]).unwrap();
    assert_eq!(rep.gated_guided_steps, 31);
    assert_eq!(rep.full_guided_steps, 100);
    assert_eq!(rep.disabled_guided_steps, 0);
    assert_eq!(rep.guided_step_ratio, 0.31);
    assert_eq!(rep.runs, 3);
    assert!(timing_report(&model, &sched(), &[], &long_only(Norm::L1), &[]).is_err());
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig::parse_str(
        "data.train = 200\n\
         data.eval = 8\n\
         classifier.epochs = 5\n\
         attack.steps = 10\n\
         experiment.seeds = 0..2\n",
    )
    .unwrap()
}

#[test]
fn small_ablation_is_reproducible() {
    let cfg = small_config();
    let lab = Lab::prepare(&cfg, 7, Execution::Parallel).unwrap();
    assert!(lab.max_perturbation() <= cfg.attack.epsilon + 1e-12);
    let a = run_ablation(&lab, Execution::Parallel).unwrap();
    let b = run_ablation(&lab, Execution::Sequential).unwrap();
    assert_eq!(ablation_csv(&a), ablation_csv(&b));
    assert_eq!(ablation_seed_csv(&a), ablation_seed_csv(&b));

    let names: Vec<&str> = a.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["unguided", "gl-l2", "gs-l2", "gl-l1", "gs-l1", "both-l2", "both-l1", "both-l1-sampling"]);
    assert_eq!(a[0].guided_steps, 0);
    assert_eq!(a[1].guided_steps, 100);
    assert_eq!(a[7].guided_steps, 31);
    assert!(ablation_csv(&a).starts_with(ABLATION_COLUMNS));
    let sampled = &a[7];
    assert_eq!(sampled.per_seed.len() + sampled.failures.len(), 2);
}

#[test]
fn config_files_load_and_reject_typos() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("exp.cfg");
    std::fs::write(&p, small_config().to_text()).unwrap();
    let back = ExperimentConfig::load(&p).unwrap();
    assert_eq!(back.to_text(), small_config().to_text());

    std::fs::write(&p, "guidance.nrom = l1\n").unwrap();
    assert!(ExperimentConfig::load(&p).is_err());
    assert!(ExperimentConfig::load(&dir.path().join("missing.cfg")).is_err());
}
