use std::f64::consts::LN_2;

use proptest::prelude::*;

use super::*;
use crate::datagen::{make_splits, DomainSpec, SplitPlan};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        classes: 4,
        feature_channels: 8,
        stride: 4,
        generator_widths: [4, 8, 8],
        global_widths: [4, 8],
        semantic_hidden: 16,
    }
}

fn tiny_data(labeled: usize) -> DatasetBundle {
    let plan = SplitPlan { n_source: 6, n_target_labeled: labeled, n_target_unlabeled: 5, n_target_val: 3, seed: 1 };
    make_splits(&plan, &DomainSpec::toy_source(), &DomainSpec::toy_target(), (16, 16)).unwrap()
}

fn config(mode: Mode) -> TrainConfig {
    TrainConfig { mode, max_iterations: 6, eval_every: Some(3), audit: true, ..TrainConfig::default() }
}

fn batch(data: &DatasetBundle) -> GeneratorBatch<'_> {
    GeneratorBatch {
        source: Some((&data.source_train[0].image, data.source_train[0].label().unwrap())),
        labeled_target: data.target_labeled.first().map(|s| (&s.image, s.label().unwrap())),
        unlabeled_target: Some(&data.target_unlabeled[0].image),
    }
}

fn term_names(l: &StepLosses) -> Vec<&str> {
    l.terms.iter().map(|(n, _)| n.as_str()).collect()
}

#[test]
fn mode_names_round_trip() {
    for m in Mode::ALL {
        assert_eq!(Mode::parse(m.name()), Some(m));
    }
    assert_eq!(Mode::parse("GA-CSA"), Some(Mode::GaCsa));
    assert_eq!(Mode::parse("GA+FCSA"), Some(Mode::GaFcsa));
    assert_eq!(Mode::parse("nope"), None);
}

#[test]
fn budget_rules() {
    assert!(config(Mode::GaCsa).check_budget(0).is_err());
    assert!(config(Mode::GaFcsa).check_budget(0).is_err());
    assert!(config(Mode::Oracle).check_budget(0).is_err());
    assert!(config(Mode::Ga).check_budget(0).is_ok());
    assert!(config(Mode::SourceOnly).check_budget(0).is_ok());
    let err = train::<f32>(&config(Mode::GaCsa), &tiny_model(), &tiny_data(0), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = config(Mode::Ga);
    c.weights.lambda_gd = -1.0;
    assert!(c.validate().is_err());
    let c = TrainConfig { max_iterations: 0, ..config(Mode::Ga) };
    assert!(c.validate().is_err());
    let c = TrainConfig { eval_every: Some(0), ..config(Mode::Ga) };
    assert!(c.validate().is_err());
}

#[test]
fn resolved_config_fills_defaults() {
    let c = TrainConfig { mode: Mode::GaCsa, max_iterations: 3000, ..TrainConfig::default() }.resolved();
    assert_eq!(c.weights.lambda_sadv, Some(0.01));
    assert_eq!(c.eval_every, Some(150));
    let f = TrainConfig { mode: Mode::GaFcsa, ..TrainConfig::default() }.resolved();
    assert_eq!(f.weights.lambda_sadv, Some(1.0));
}

#[test]
fn source_only_step_uses_source_segmentation_only() {
    let data = tiny_data(2);
    let mut s = TrainState::<f64>::new(&config(Mode::SourceOnly), &tiny_model()).unwrap();
    let disc = s.global_disc.clone();
    let (l, d) = s.generator_step(&batch(&data), 0.01).unwrap();
    assert_eq!(term_names(&l), ["seg_source"]);
    assert!(d.p_source.is_none() && d.p_target_unlabeled.is_none());
    let dl = s.discriminator_step(&d, 1e-4).unwrap();
    assert!(dl.terms.is_empty());
    assert_eq!(s.global_disc, disc);
}

#[test]
fn oracle_step_uses_labeled_target_only() {
    let data = tiny_data(2);
    let mut s = TrainState::<f64>::new(&config(Mode::Oracle), &tiny_model()).unwrap();
    let (l, _) = s.generator_step(&batch(&data), 0.01).unwrap();
    assert_eq!(term_names(&l), ["seg_target"]);
    assert!((l.total - l.term("seg_target").unwrap()).abs() < 1e-12);
}

#[test]
fn ga_discriminator_step_has_only_global_terms() {
    let data = tiny_data(0);
    let mut s = TrainState::<f64>::new(&config(Mode::Ga), &tiny_model()).unwrap();
    let (l, d) = s.generator_step(&batch(&data), 0.01).unwrap();
    assert_eq!(term_names(&l), ["seg_source", "gadv"]);
    let dl = s.discriminator_step(&d, 1e-4).unwrap();
    assert_eq!(term_names(&dl), ["gd_source", "gd_target"]);
}

#[test]
fn term_counts_form_a_lattice() {
    let data = tiny_data(2);
    let count = |mode| {
        let mut s = TrainState::<f64>::new(&config(mode), &tiny_model()).unwrap();
        let (g, d) = s.generator_step(&batch(&data), 0.01).unwrap();
        g.terms.len() + s.discriminator_step(&d, 1e-4).unwrap().terms.len()
    };
    let (so, ga, fcsa, csa) = (count(Mode::SourceOnly), count(Mode::Ga), count(Mode::GaFcsa), count(Mode::GaCsa));
    assert!(so < ga && ga < fcsa && ga < csa, "{so} {ga} {fcsa} {csa}");
}

#[test]
fn zero_weights_leave_only_weight_decay() {
    let data = tiny_data(2);
    let mut cfg = config(Mode::GaCsa);
    cfg.weights = LossWeights { lambda_seg: 0.0, lambda_gadv: 0.0, lambda_sadv: Some(0.0), lambda_gd: 0.0, lambda_sd: 0.0 };
    let mut s = TrainState::<f64>::new(&cfg, &tiny_model()).unwrap();
    let before = (s.generator.clone(), s.head.clone());
    let lr = 0.5;
    s.generator_step(&batch(&data), lr).unwrap();
    let factor = 1.0 - lr * cfg.generator_optimizer.weight_decay;
    let pairs = before.0.params().into_iter().zip(s.generator.params());
    let head_pairs = before.1.params().into_iter().zip(s.head.params());
    for ((_, old), (_, new)) in pairs.chain(head_pairs) {
        for (o, n) in old.data().iter().zip(new.data()) {
            assert!((o * factor - n).abs() < 1e-15);
        }
    }
}

#[test]
fn uniform_discriminators_compose_log_terms() {
    let data = tiny_data(2);
    let mut cfg = config(Mode::GaCsa);
    cfg.weights.lambda_gd = 0.7;
    cfg.weights.lambda_sd = 1.3;
    let mut s = TrainState::<f64>::new(&cfg, &tiny_model()).unwrap();
    s.global_disc.params_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
    if let Some(d) = &mut s.semantic_disc {
        d.params_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
    }
    let (_, d) = s.generator_step(&batch(&data), 0.0).unwrap();
    let dl = s.discriminator_step(&d, 0.0).unwrap();
    let want = 2.0 * LN_2 * 0.7 + 2.0 * 8f64.ln() * 1.3;
    assert!((dl.total - want).abs() < 1e-9, "{} vs {want}", dl.total);
}

#[test]
fn steps_only_touch_their_own_parameters() {
    let data = tiny_data(2);
    for mode in [Mode::Ga, Mode::GaFcsa, Mode::GaCsa] {
        let (state, report) = train::<f64>(&config(mode), &tiny_model(), &data, None).unwrap();
        let a = &report.audit;
        assert_eq!(a.generator_steps, 6);
        assert_eq!(a.discriminator_steps, 6);
        assert_eq!(a.discriminator_changed_in_generator_step, 0);
        assert_eq!(a.generator_changed_in_discriminator_step, 0);
        assert_eq!(state.iteration, 6);
    }
    assert_eq!(data.sealed_reads(), 0);
}

#[test]
fn training_is_deterministic_and_resumes_bit_identically() {
    let data = tiny_data(2);
    let cfg = config(Mode::GaCsa);
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let (a, _) = train::<f32>(&cfg, &tiny_model(), &data, Some(&full)).unwrap();
    let (b, _) = train::<f32>(&cfg, &tiny_model(), &data, None).unwrap();
    assert_eq!(a.generator, b.generator);

    let part = dir.path().join("part");
    train::<f32>(&cfg, &tiny_model(), &data, Some(&part)).unwrap();
    let mut early = TrainState::<f32>::new(&cfg, &tiny_model()).unwrap();
    early.run_until(&data, None, 3).unwrap();
    early.to_checkpoint().save(&part.join(CHECKPOINT_LAST)).unwrap();

    let (resumed, report) = resume::<f32>(&part, &cfg, &tiny_model(), &data).unwrap();
    assert_eq!(resumed.iteration, 6);
    assert_eq!(report.records.iter().map(|r| r.iteration).collect::<Vec<_>>(), [3, 6]);
    assert_eq!(resumed.generator, a.generator);
    assert_eq!(resumed.global_disc, a.global_disc);
    assert_eq!(resumed.semantic_disc, a.semantic_disc);
    assert_eq!(read_metrics(&part.join(METRICS_FILE)).unwrap(), read_metrics(&full.join(METRICS_FILE)).unwrap());
}

#[test]
fn checkpoint_round_trip_preserves_state() {
    let data = tiny_data(2);
    let cfg = config(Mode::GaFcsa);
    let mut s = TrainState::<f32>::new(&cfg, &tiny_model()).unwrap();
    s.run(&data, None).unwrap();
    let back = TrainState::<f32>::from_checkpoint(&s.to_checkpoint(), &cfg, &tiny_model()).unwrap();
    assert_eq!(back.iteration, s.iteration);
    assert_eq!(back.semantic_disc, s.semantic_disc);
    assert_eq!(back.head, s.head);
    let other = TrainConfig { seed: 99, ..cfg };
    assert!(TrainState::<f32>::from_checkpoint(&s.to_checkpoint(), &other, &tiny_model()).is_err());
}

#[test]
fn metrics_records_follow_eval_cadence() {
    let data = tiny_data(2);
    let (_, report) = train::<f32>(&config(Mode::GaCsa), &tiny_model(), &data, None).unwrap();
    let its: Vec<usize> = report.records.iter().map(|r| r.iteration).collect();
    assert_eq!(its, [3, 6]);
    let r = &report.records[1];
    assert!(r.val_miou.is_some());
    assert!(r.losses.contains_key("sd_target") && r.losses.contains_key("sadv"));
    assert!(r.lr_generator > 0.0 && r.lr_generator < TrainConfig::default().generator_optimizer.lr);
    assert_eq!(report.final_miou, r.val_miou);
}

#[test]
fn non_finite_loss_aborts() {
    let data = tiny_data(2);
    let mut s = TrainState::<f64>::new(&config(Mode::Ga), &tiny_model()).unwrap();
    s.head.conv.bias.data_mut()[0] = f64::NAN;
    let err = s.run(&data, None).unwrap_err();
    assert!(matches!(err, Error::NonFinite { iteration: 0, .. }), "{err}");
}

#[test]
fn ga_runs_without_labeled_targets() {
    let data = tiny_data(0);
    let (_, report) = train::<f32>(&config(Mode::Ga), &tiny_model(), &data, None).unwrap();
    assert_eq!(report.records.len(), 2);
}

proptest! {
    #[test]
    fn each_epoch_visits_every_sample_once(seed in 0u64..1000, stream in 0u64..3, n in 1usize..20, epoch in 0usize..4) {
        let mut seen: Vec<usize> = (0..n).map(|k| sample_index(seed, stream, n, epoch * n + k)).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }
}
