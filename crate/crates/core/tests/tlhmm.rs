mod common;

use std::sync::OnceLock;

use common::*;
use proptest::prelude::*;
use tlhmm_scene::hmm::{self, FitConfig, HmmParams, ObservationSequence};
use tlhmm_scene::random::rng_from_seed;
use tlhmm_scene::scenario::{extract_features, generate_dataset, Event, GeneratorParams, Situation, Stage};
use tlhmm_scene::tlhmm::{
    build_meta_features, softmax_posterior, train, transfer, MetaMode, Roster, StateCount, TlhmmModel, TrainConfig,
    TrainReport, TransferMode,
};
use tlhmm_scene::Error;

fn small_config() -> TrainConfig {
    TrainConfig {
        t1: 5,
        t2: 5,
        layer1_states: StateCount {
            fixed: Some(2),
            ..Default::default()
        },
        layer2_states: StateCount {
            fixed: Some(2),
            ..Default::default()
        },
        seed: 4,
        ..TrainConfig::default()
    }
}

fn events() -> &'static Vec<Event> {
    static E: OnceLock<Vec<Event>> = OnceLock::new();
    E.get_or_init(|| generate_dataset(24, &GeneratorParams::default(), 500).unwrap())
}

fn trained() -> &'static (TlhmmModel, TrainReport) {
    static M: OnceLock<(TlhmmModel, TrainReport)> = OnceLock::new();
    M.get_or_init(|| train(events(), &Roster::merging(), &small_config()).unwrap())
}

fn raw(ev: &Event) -> ObservationSequence {
    extract_features(ev).unwrap().raw
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn meta_rows_are_normalized_window_likelihoods(seed in any::<u64>(), t1 in 1usize..=4, len in 4usize..=9) {
        prop_assume!(len >= t1);
        let mut rng = rng_from_seed(seed);
        let models: Vec<HmmParams> = (0..3).map(|_| random_hmm(&mut rng, 2, 2)).collect();
        let seq = random_sequence(&mut rng, len, 2);
        let vec_meta = build_meta_features(&models, &seq, t1, MetaMode::Vector).unwrap();
        let mat_meta = build_meta_features(&models, &seq, t1, MetaMode::Matrix).unwrap();
        prop_assert_eq!(vec_meta.len(), len - t1 + 1);
        prop_assert_eq!(vec_meta.origin_offset, t1 - 1);
        prop_assert_eq!(mat_meta.values.ncols(), 3 * t1);
        for i in 0..vec_meta.len() {
            for (j, m) in models.iter().enumerate() {
                let w = seq.slice(i, i + t1).unwrap();
                let expect = hmm::forward_log_likelihood(m, &w).unwrap() / t1 as f64;
                prop_assert!(relative_error(vec_meta.values.row(i)[j], expect) < 1e-12);
                // matrix rows hold trailing windows of length t1, t1 - 1, ..., 1
                for (c, l) in (1..=t1).rev().enumerate() {
                    let w = seq.slice(i + t1 - l, i + t1).unwrap();
                    let expect = hmm::forward_log_likelihood(m, &w).unwrap() / l as f64;
                    prop_assert!(relative_error(mat_meta.values.row(i)[j * t1 + c], expect) < 1e-12);
                }
            }
        }
    }
}

#[test]
fn meta_features_reject_bad_shapes() {
    let mut rng = rng_from_seed(1);
    let models = vec![random_hmm(&mut rng, 2, 2)];
    let seq = random_sequence(&mut rng, 3, 2);
    assert!(matches!(
        build_meta_features(&models, &seq, 4, MetaMode::Vector),
        Err(Error::TooShort { min: 4, got: 3 })
    ));
    assert!(build_meta_features(&models, &seq, 0, MetaMode::Vector).is_err());
    assert!(build_meta_features(&[], &seq, 1, MetaMode::Vector).is_err());
    let wide = random_sequence(&mut rng, 5, 3);
    assert!(matches!(
        build_meta_features(&models, &wide, 2, MetaMode::Vector),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn softmax_examples() {
    let p = softmax_posterior(&[2f64.ln(), 0.0], &[0.5, 0.5]);
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-12 && (p[1] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(softmax_posterior(&[1e4, -1e4], &[0.5, 0.5]), vec![1.0, 0.0]);
    assert_eq!(softmax_posterior(&[-1e300, -1.0001e300], &[0.5, 0.5])[1], 0.0);
    let p = softmax_posterior(&[0.0, 0.0], &[0.25, 0.75]);
    assert!((p[1] - 0.75).abs() < 1e-15);
    // non-finite scores drop out; all non-finite falls back to the prior
    assert_eq!(softmax_posterior(&[f64::NAN, -3.0], &[0.5, 0.5]), vec![0.0, 1.0]);
    assert_eq!(softmax_posterior(&[f64::NEG_INFINITY; 2], &[0.4, 0.6]), vec![0.4, 0.6]);
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant_and_normalized(a in -500.0f64..500.0, b in -500.0f64..500.0, c in -50.0f64..50.0) {
        let p = softmax_posterior(&[a, b], &[0.3, 0.7]);
        let q = softmax_posterior(&[a + c, b + c], &[0.3, 0.7]);
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        prop_assert!((p[0] - q[0]).abs() < 1e-9);
    }
}

#[test]
fn trained_cascade_matches_the_roster() {
    let (model, report) = trained();
    assert_eq!(model.layer1.len(), 7);
    assert_eq!(model.layer2.len(), 2);
    assert_eq!(report.layer1.len(), 7);
    assert_eq!(report.layer1[0].label, "HMM-1-1");
    assert_eq!(report.layer2[1].label, "HMM-2-2");
    assert_eq!(model.meta_dim(), 7);
    assert_eq!(model.raw_dim(), 7);
    assert_eq!(model.labels(), vec!["main_yields", "merge_yields"]);
    assert_eq!(model.prior, vec![0.5, 0.5]);
    for r in report.layer1.iter().chain(&report.layer2) {
        assert!(r.fit.max_decrease() <= 1e-8, "{} decreased", r.label);
        assert_eq!(r.n_states, 2);
    }
    // the shared ambiguity model sees both situations' segments
    assert_eq!(report.layer1[0].n_sequences, 24);
    assert_eq!(report.layer1[1].n_sequences, 12);
    assert_eq!(model.roster.layer1[3].stage, Stage::CarFollowing);
}

#[test]
fn posterior_rows_have_the_expected_shape() {
    let (model, _) = trained();
    let seq = raw(&events()[0]);
    let post = model.infer(&seq).unwrap();
    assert_eq!(model.min_length(), 9);
    assert_eq!(post.len(), seq.len() - model.min_length() + 1);
    assert_eq!(post.steps[0], 8);
    assert_eq!(*post.steps.last().unwrap(), seq.len() - 1);
    for (row, t) in post.probabilities.iter().zip(&post.times) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(t.is_finite());
    }
    let short = seq.slice(0, 8).unwrap();
    assert!(matches!(model.infer(&short), Err(Error::TooShort { min: 9, got: 8 })));
    let exact = seq.slice(0, 9).unwrap();
    assert_eq!(model.infer(&exact).unwrap().len(), 1);
}

#[test]
fn identical_situation_models_return_the_prior() {
    let (model, _) = trained();
    let mut m = model.clone();
    m.layer2[1] = m.layer2[0].clone();
    m.prior = vec![0.2, 0.8];
    let post = m.infer(&raw(&events()[3])).unwrap();
    for row in &post.probabilities {
        assert!((row[0] - 0.2).abs() < 1e-12);
    }
}

#[test]
fn reordering_situations_permutes_the_posterior() {
    let (model, _) = trained();
    let mut swapped = model.clone();
    swapped.roster.layer2.reverse();
    swapped.layer2.reverse();
    swapped.prior.reverse();
    swapped.validate().unwrap();
    let seq = raw(&events()[5]);
    let a = model.infer(&seq).unwrap();
    let b = swapped.infer(&seq).unwrap();
    assert_eq!(b.labels, vec!["merge_yields", "main_yields"]);
    for (ra, rb) in a.probabilities.iter().zip(&b.probabilities) {
        assert_eq!(ra[0], rb[1]);
        assert_eq!(ra[1], rb[0]);
    }
}

#[test]
fn training_events_are_mostly_recognized_by_the_end() {
    let (model, _) = trained();
    let correct = events()
        .iter()
        .filter(|ev| {
            let post = model.infer(&raw(ev)).unwrap();
            let idx = post.final_label_index().unwrap();
            model.situations()[idx] == ev.situation
        })
        .count();
    assert!(correct >= 20, "{correct}/24");
}

#[test]
fn training_is_deterministic() {
    let again = train(events(), &Roster::merging(), &small_config()).unwrap();
    assert_eq!(&again, trained());
}

#[test]
fn bundles_round_trip_exactly() {
    let (model, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    let files = model.save_bundle(dir.path()).unwrap();
    assert!(files.iter().any(|f| f == "manifest.json"));
    assert_eq!(files.iter().filter(|f| f.starts_with("HMM-")).count(), 9);
    let back = TlhmmModel::load_bundle(dir.path()).unwrap();
    assert_eq!(&back, model);
    let seq = raw(&events()[1]);
    assert_eq!(back.infer(&seq).unwrap(), model.infer(&seq).unwrap());
}

#[test]
fn broken_bundles_are_rejected() {
    let (model, _) = trained();
    let dir = tempfile::tempdir().unwrap();
    model.save_bundle(dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("HMM-2-1.json")).unwrap();
    assert!(TlhmmModel::load_bundle(dir.path()).is_err());
}

#[test]
fn training_needs_both_situations() {
    let only_main: Vec<Event> = events()
        .iter()
        .filter(|e| e.situation == Situation::MainYields)
        .cloned()
        .collect();
    assert!(train(&only_main, &Roster::merging(), &small_config()).is_err());
}

fn target_events() -> Vec<Event> {
    generate_dataset(12, &GeneratorParams::transfer_target(), 9000).unwrap()
}

#[test]
fn frozen_transfer_keeps_layer_two() {
    let (model, _) = trained();
    let (t, report) = transfer(model, &target_events(), TransferMode::Frozen, &small_config()).unwrap();
    assert_eq!(t.layer2, model.layer2);
    assert_ne!(t.layer1, model.layer1);
    // the target carries a leading vehicle, so layer 1 widens while layer 2 does not
    assert_eq!(t.raw_dim(), 9);
    assert_eq!(t.meta_dim(), model.meta_dim());
    assert_eq!(report.layer2_iterations(), 0);
}

#[test]
fn finetuning_without_budget_keeps_layer_two() {
    let (model, _) = trained();
    let cfg = TrainConfig {
        fit: FitConfig {
            max_iter: 0,
            ..FitConfig::default()
        },
        ..small_config()
    };
    let (t, report) = transfer(model, &target_events(), TransferMode::Finetune, &cfg).unwrap();
    assert_eq!(t.layer2, model.layer2);
    assert_eq!(report.layer2_total_iterations(), 0);
}

#[test]
fn finetuning_starts_from_the_pretrained_likelihood() {
    let (model, _) = trained();
    let (_, fine) = transfer(model, &target_events(), TransferMode::Finetune, &small_config()).unwrap();
    let (_, scratch) = transfer(model, &target_events(), TransferMode::Scratch, &small_config()).unwrap();
    for r in fine.layer2.iter().chain(&scratch.layer2) {
        assert!(r.fit.max_decrease() <= 1e-8);
    }
    assert!(fine.layer2.iter().all(|r| r.fit.init_iterations == 0));
    assert!(scratch.layer2.iter().all(|r| r.fit.init_iterations > 0));
}

#[test]
fn transfer_refuses_a_changed_meta_width() {
    let (model, _) = trained();
    let cfg = TrainConfig {
        meta_mode: MetaMode::Matrix,
        ..small_config()
    };
    assert!(transfer(model, &target_events(), TransferMode::Finetune, &cfg).is_err());
    // scratch rebuilds layer 2 and may change the width
    let (t, _) = transfer(model, &target_events(), TransferMode::Scratch, &cfg).unwrap();
    assert_eq!(t.meta_dim(), 7 * 5);
}
