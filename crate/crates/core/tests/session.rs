use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use flower_core::autodiff::{Partition, Tensor};
use flower_core::ball::TransformModule;
use flower_core::data::{generate_stream, LabeledBatch, Stream, StreamSpec};
use flower_core::flat::FlatWideRegion;
use flower_core::harness::eval::evaluate;
use flower_core::protonet::{PrototypeTable, ProtoNet};
use flower_core::session::{
    clamp_feature_extractor, run_base, run_session, run_stream, run_stream_observed, ContinualState, Method, RunnerConfig,
    SessionObjective,
};
use flower_core::{ClassId, FlowerError};

fn small_spec(sessions: usize, spread: f64) -> StreamSpec {
    StreamSpec {
        input_dim: 6,
        base_classes: 3,
        base_samples_per_class: 20,
        sessions,
        ways: 2,
        shots: 3,
        test_per_class: 10,
        cluster_spread: spread,
        seed: 3,
    }
}

fn small_runner(method: Method) -> RunnerConfig {
    let mut cfg = RunnerConfig { method, ..RunnerConfig::default() };
    cfg.model.input_dim = 6;
    cfg.model.hidden = vec![8, 8];
    cfg.model.embedding_dim = 4;
    cfg.base.epochs = 4;
    cfg.base.batch_size = 20;
    cfg.session.epochs = 3;
    cfg.ball.transform_hidden = vec![6, 6];
    cfg
}

fn base_state(method: Method, stream: &Stream) -> (ProtoNet, RunnerConfig, ContinualState) {
    let cfg = small_runner(method);
    let net = ProtoNet::new(cfg.model.clone()).unwrap();
    let state = run_base(&net, &TransformModule::new(), &stream.base, &cfg, 5).unwrap();
    (net, cfg, state)
}

#[test]
fn clamp_holds_after_every_update() {
    let stream = generate_stream(&small_spec(3, 0.3)).unwrap();
    let mut steps = 0;
    let mut worst: f64 = 0.0;
    let mut bound = 0.0;
    run_stream_observed(&stream, &small_runner(Method::Flower), 2, &mut |e| {
        steps += 1;
        bound = e.region.bound;
        worst = worst.max(e.region.max_deviation(e.params));
    })
    .unwrap();
    assert_eq!(steps, 3 * 3);
    assert!(worst <= bound + 1e-12, "{worst} > {bound}");
}

#[test]
fn clamp_examples() {
    let stream = generate_stream(&small_spec(0, 0.3)).unwrap();
    let (_, _, state) = base_state(Method::Flower, &stream);
    let b = state.region.bound;

    let mut inside = state.params.clone();
    clamp_feature_extractor(&mut inside, &state.region);
    assert_eq!(inside.fingerprint(), state.params.fingerprint());

    let mut moved = state.params.clone();
    let (fe_id, head_id) = {
        let fe = moved.iter().find(|(_, p)| p.partition == Partition::FeatureExtractor).unwrap().0.to_string();
        let head = moved.iter().find(|(_, p)| p.partition == Partition::ClassifierHead).unwrap().0.to_string();
        (fe, head)
    };
    let anchor = state.region.anchor.get(&fe_id).unwrap().data()[0];
    moved.get_mut(&fe_id).unwrap().data_mut()[0] = anchor + 2.0 * b;
    moved.get_mut(&head_id).unwrap().data_mut()[0] = 1e6;
    clamp_feature_extractor(&mut moved, &state.region);
    assert_eq!(moved.get(&fe_id).unwrap().data()[0], anchor + b);
    assert_eq!(moved.get(&head_id).unwrap().data()[0], 1e6);
}

#[test]
fn baseline_sessions_leave_parameters_bit_identical() {
    let stream = generate_stream(&small_spec(3, 0.3)).unwrap();
    let (net, cfg, mut state) = base_state(Method::BaselineProtoOnly, &stream);
    let hash = state.params.fingerprint();
    for data in &stream.sessions {
        let before = state.prototypes.len();
        state = run_session(&net, &TransformModule::new(), state, data, &cfg, 5, &mut |_| panic!("no updates expected")).unwrap();
        assert_eq!(state.params.fingerprint(), hash);
        assert_eq!(state.prototypes.len(), before + 2);
    }
}

#[test]
fn overlapping_classes_are_rejected() {
    let stream = generate_stream(&small_spec(1, 0.3)).unwrap();
    let (net, cfg, state) = base_state(Method::Flower, &stream);
    let err = run_session(&net, &TransformModule::new(), state, &stream.base, &cfg, 5, &mut |_| {}).unwrap_err();
    assert!(matches!(err, FlowerError::ClassOverlap(ref c) if c.len() == 3), "{err}");
}

#[test]
fn sessions_need_a_base_phase() {
    let stream = generate_stream(&small_spec(1, 0.3)).unwrap();
    let (net, cfg, mut state) = base_state(Method::Flower, &stream);
    state.session = 0;
    let err = run_session(&net, &TransformModule::new(), state, &stream.sessions[0], &cfg, 5, &mut |_| {}).unwrap_err();
    assert!(matches!(err, FlowerError::Precondition(_)), "{err}");
}

#[test]
fn zero_epochs_still_add_prototypes() {
    let stream = generate_stream(&small_spec(1, 0.3)).unwrap();
    let (net, mut cfg, state) = base_state(Method::Flower, &stream);
    cfg.session.epochs = 0;
    let hash = state.params.fingerprint();
    let next = run_session(&net, &TransformModule::new(), state, &stream.sessions[0], &cfg, 5, &mut |_| {}).unwrap();
    assert_eq!(next.params.fingerprint(), hash);
    assert_eq!(next.prototypes.len(), 5);
    assert_eq!(next.session, 2);
}

#[test]
fn without_ball_the_loss_is_ce_plus_pmas() {
    let stream = generate_stream(&small_spec(1, 0.3)).unwrap();
    let (net, cfg, state) = base_state(Method::NoBall, &stream);
    let transform = TransformModule::new();
    let obj = SessionObjective {
        net: &net,
        transform: &transform,
        data: &stream.sessions[0],
        old: &state.prototypes,
        ball: None,
        pmas: Some((&state.snapshot, &state.importance, cfg.pmas)),
    };
    let t = obj.terms(&state.params).unwrap();
    assert_eq!(t.ball, 0.0);
    assert!((t.total - (t.ce + t.projection + t.anchoring)).abs() <= 1e-12);
}

#[test]
fn zero_sessions_give_only_the_base_result() {
    let stream = generate_stream(&small_spec(0, 0.3)).unwrap();
    let r = run_stream(&stream, &small_runner(Method::Flower), 1).unwrap();
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].session, 1);
    assert_eq!(r[0].seen_classes, 3);
}

#[test]
fn same_seed_same_results() {
    let stream = generate_stream(&small_spec(2, 0.3)).unwrap();
    let cfg = small_runner(Method::Flower);
    let strip = |mut v: Vec<flower_core::harness::eval::SessionResult>| {
        v.iter_mut().for_each(|r| r.wall_time_s = 0.0);
        v
    };
    let a = strip(run_stream(&stream, &cfg, 9).unwrap());
    let b = strip(run_stream(&stream, &cfg, 9).unwrap());
    assert_eq!(a, b);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.accuracy.to_bits(), y.accuracy.to_bits());
    }
}

#[test]
fn evaluation_coverage_grows_and_keeps_base_classes() {
    let stream = generate_stream(&small_spec(3, 0.3)).unwrap();
    let r = run_stream(&stream, &small_runner(Method::Flower), 4).unwrap();
    let base = stream.base.classes();
    for w in r.windows(2) {
        let prev: Vec<_> = w[0].per_class.keys().collect();
        let next: Vec<_> = w[1].per_class.keys().collect();
        assert!(next.len() > prev.len());
        assert!(prev.iter().all(|c| next.contains(c)));
    }
    for s in &r {
        assert!(base.iter().all(|c| s.per_class.contains_key(c)));
    }
}

#[test]
fn zero_spread_is_perfectly_classified() {
    let stream = generate_stream(&small_spec(0, 0.0)).unwrap();
    let (net, _, state) = base_state(Method::BaselineProtoOnly, &stream);
    let r = evaluate(&net, &state, &stream.test, Method::BaselineProtoOnly, 5).unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn one_seen_class_is_always_right() {
    let stream = generate_stream(&small_spec(0, 2.0)).unwrap();
    let (net, _, mut state) = base_state(Method::BaselineProtoOnly, &stream);
    let mut only = PrototypeTable::new(4);
    only.insert(ClassId(1), vec![50.0, -50.0, 3.0, 0.0]).unwrap();
    state.prototypes = only;
    let r = evaluate(&net, &state, &stream.test, Method::BaselineProtoOnly, 5).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.test_samples, 10);
}

#[test]
fn random_prototypes_score_at_chance() {
    let stream = generate_stream(&small_spec(0, 0.3)).unwrap();
    let (net, _, mut state) = base_state(Method::BaselineProtoOnly, &stream);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 10_000;
    // class means 0.1 apart under unit-100 spread: labels carry almost no signal
    let noise = Normal::new(0.0, 100.0).unwrap();
    let mut x = Vec::with_capacity(n * 6);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i % 2) as u32;
        for _ in 0..6 {
            x.push(0.1 * c as f64 + noise.sample(&mut rng));
        }
        labels.push(ClassId(c));
    }
    let test = LabeledBatch::new(Tensor::new(vec![n, 6], x).unwrap(), labels).unwrap();
    let mut table = PrototypeTable::new(4);
    for c in 0..2 {
        table.insert(ClassId(c), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    }
    state.prototypes = table;
    let r = evaluate(&net, &state, &test, Method::BaselineProtoOnly, 5).unwrap();
    assert!((r.accuracy - 0.5).abs() <= 0.05, "{}", r.accuracy);
}

#[test]
fn evaluation_needs_test_samples_of_seen_classes() {
    let stream = generate_stream(&small_spec(1, 0.3)).unwrap();
    let (net, _, state) = base_state(Method::Flower, &stream);
    let others = stream.test.restrict(&stream.sessions[0].classes()).unwrap().unwrap();
    assert!(evaluate(&net, &state, &others, Method::Flower, 5).is_err());
}

#[test]
fn region_anchor_covers_only_the_feature_extractor() {
    let stream = generate_stream(&small_spec(0, 0.3)).unwrap();
    let (_, _, state) = base_state(Method::Flower, &stream);
    let region: &FlatWideRegion = &state.region;
    assert!(!region.anchor.is_empty());
    for (id, _) in region.anchor.iter() {
        assert_eq!(state.params.partition_of(id), Some(Partition::FeatureExtractor));
    }
}

#[test]
fn flower_beats_finetune_on_the_final_session() {
    let spec = StreamSpec::default();
    let mut flower = 0.0;
    let mut finetune = 0.0;
    for seed in 1..=5u64 {
        let stream = generate_stream(&StreamSpec { seed: spec.seed.wrapping_add(seed), ..spec.clone() }).unwrap();
        let cfg = RunnerConfig::default();
        flower += run_stream(&stream, &cfg, seed).unwrap().last().unwrap().accuracy;
        let cfg = RunnerConfig { method: Method::Finetune, ..cfg };
        finetune += run_stream(&stream, &cfg, seed).unwrap().last().unwrap().accuracy;
    }
    assert!(flower > finetune, "{flower} <= {finetune}");
}
