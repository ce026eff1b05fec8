use glyphnet::graph::GraphOp;
use glyphnet::layers::LayerKind;
use glyphnet::models::{
    average_probabilities, build_model_a, build_model_b, build_model_c, ensemble_predict, Classifier, ModelGraph,
};
use glyphnet::{ArchSpec, Ensemble, InputSpec, ModelKind, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn conv(cin: usize, cout: usize, k: usize, bias: bool) -> usize {
    cin * cout * k * k + if bias { cout } else { 0 }
}

fn bn(c: usize) -> usize {
    2 * c
}

fn dense(i: usize, o: usize) -> usize {
    i * o + o
}

fn residual(cin: usize, f: usize) -> usize {
    let shortcut = if cin != f { conv(cin, f, 1, true) } else { 0 };
    conv(cin, f, 3, false) + bn(f) + 2 * (conv(f, f, 3, false) + bn(f)) + shortcut
}

#[test]
fn model_a_parameter_count_matches_hand_count() {
    let stem = conv(1, 32, 3, false) + bn(32);
    let inception = conv(32, 16, 1, false)
        + bn(16)
        + conv(16, 32, 3, false)
        + bn(32)
        + conv(32, 16, 1, false)
        + bn(16)
        + conv(16, 32, 5, false)
        + bn(32)
        + conv(32, 16, 1, false)
        + bn(16);
    let blocks = residual(80, 64) + residual(64, 128) + residual(128, 256);
    // 32 → 16 → 8 → 4 after three downsamplings
    let head = dense(256 * 4 * 4, 1024) + dense(1024, 512) + dense(512, 10);
    let expected = stem + inception + blocks + head;
    let m = build_model_a::<f32>(10, InputSpec::default(), 1).unwrap();
    assert_eq!(m.param_count(), expected);
    assert_eq!(expected, 6_757_002);
}

#[test]
fn model_b_parameter_count_matches_hand_count() {
    let blocks = residual(1, 32) + residual(32, 64) + residual(64, 128) + residual(128, 256) + residual(256, 512);
    // 32 → 16 → 8 → 4 → 2 after four downsamplings
    let head = dense(512 * 2 * 2, 1024) + dense(1024, 512) + dense(512, 10);
    let m = build_model_b::<f32>(10, InputSpec::default(), 1).unwrap();
    assert_eq!(m.param_count(), blocks + head);
}

#[test]
fn forward_shapes_and_probability_rows() {
    for kind in ModelKind::ALL {
        let input = InputSpec::grayscale(16, 16);
        let m = ModelGraph::<f32>::build(ArchSpec::new(kind, 7, input), 3).unwrap();
        let p = m.predict_proba(&random_batch(&[4, 1, 16, 16], 4)).unwrap();
        assert_eq!(p.shape(), &[4, 7], "model {kind}");
        for row in p.data().chunks(7) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() <= 1e-6, "model {kind} row sums to {s}");
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    for kind in ModelKind::ALL {
        let spec = ArchSpec::new(kind, 5, InputSpec::grayscale(16, 16));
        let a = ModelGraph::<f32>::build(spec.clone(), 11).unwrap();
        let b = ModelGraph::<f32>::build(spec.clone(), 11).unwrap();
        let c = ModelGraph::<f32>::build(spec, 12).unwrap();
        let pa = a.graph().params();
        let pb = b.graph().params();
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na} differs");
        }
        let differs = pa
            .iter()
            .zip(c.graph().params())
            .any(|((_, x), (_, y))| x.data() != y.data());
        assert!(differs, "model {kind} ignores its seed");
    }
}

#[test]
fn model_c_channel_audit() {
    let m = build_model_c::<f32>(10, InputSpec::default(), 2).unwrap();
    let g = m.graph();
    let transition_in = g.layer("transition.bn").unwrap();
    match &transition_in.kind {
        LayerKind::BatchNorm(b) => assert_eq!(b.channels(), 64 + 6 * 32),
        other => panic!("unexpected {other:?}"),
    }
    let conv = g.node_of("transition.conv").unwrap();
    assert_eq!(g.nodes()[conv].shape[0], 128);
    let gap = g.node_of("gap").unwrap();
    let gap_in = g.nodes()[gap].inputs[0];
    assert_eq!(g.nodes()[gap_in].shape[0], 128 + 12 * 32);
    assert_eq!(g.nodes()[gap].shape, vec![512]);
    assert_eq!(m.dropout_count(), 0);
}

#[test]
fn model_b_residual_filters() {
    let m = build_model_b::<f32>(10, InputSpec::default(), 2).unwrap();
    let g = m.graph();
    let filters: Vec<usize> = (1..=5)
        .map(|i| match &g.layer(&format!("res{i}.stage3.conv")).unwrap().kind {
            LayerKind::Conv2d(c) => c.out_channels(),
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    assert_eq!(filters, vec![32, 64, 128, 256, 512]);
    assert!(g.layer("res1.pool").is_none());
    for i in 2..=5 {
        assert!(g.layer(&format!("res{i}.pool")).is_some());
    }
    // two per residual block plus one per hidden dense layer
    assert_eq!(m.dropout_count(), 5 * 2 + 2);
    let adds = g.nodes().iter().filter(|n| matches!(n.op, GraphOp::Add)).count();
    assert_eq!(adds, 5);
}

#[test]
fn model_a_topology() {
    let m = build_model_a::<f32>(10, InputSpec::default(), 2).unwrap();
    let g = m.graph();
    assert!(g.layer("stem.conv").is_some());
    assert!(g.layer("inception.b5.conv.conv").is_some());
    for (i, f) in [64, 128, 256].into_iter().enumerate() {
        match &g.layer(&format!("res{}.stage1.conv", i + 1)).unwrap().kind {
            LayerKind::Conv2d(c) => assert_eq!(c.out_channels(), f),
            other => panic!("unexpected {other:?}"),
        }
        match g.layer(&format!("res{}.stage1.dropout", i + 1)).unwrap().kind {
            LayerKind::Dropout { rate } => assert_eq!(rate, 0.2),
            _ => panic!("expected dropout"),
        }
    }
    assert_eq!(m.dropout_count(), 3 * 2 + 2);
}

#[test]
fn inputs_too_small_are_rejected() {
    assert!(build_model_a::<f32>(10, InputSpec::grayscale(7, 32), 0).is_err());
    assert!(build_model_a::<f32>(10, InputSpec::grayscale(8, 8), 0).is_ok());
    assert!(build_model_b::<f32>(10, InputSpec::grayscale(15, 15), 0).is_err());
    assert!(build_model_c::<f32>(10, InputSpec::grayscale(1, 4), 0).is_err());
    assert!(build_model_a::<f32>(1, InputSpec::default(), 0).is_err());
}

#[test]
fn arch_spec_roundtrips_through_json() {
    for kind in ModelKind::ALL {
        let spec = ArchSpec::new(kind, 12, InputSpec::grayscale(28, 28));
        let json = serde_json::to_string(&spec).unwrap();
        let back: ArchSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }
    assert_eq!("c".parse::<ModelKind>().unwrap(), ModelKind::C);
    assert!("D".parse::<ModelKind>().is_err());
}

#[test]
fn single_member_ensemble_is_identity() {
    let m = build_model_b::<f32>(4, InputSpec::grayscale(16, 16), 5).unwrap();
    let x = random_batch(&[3, 1, 16, 16], 6);
    let p = m.predict_proba(&x).unwrap();
    let e = Ensemble::new(vec![m.clone()]).unwrap();
    assert_eq!(e.predict_proba(&x).unwrap(), p);
}

#[test]
fn ensemble_of_copies_is_exact() {
    let m = build_model_a::<f32>(4, InputSpec::grayscale(16, 16), 5).unwrap();
    let x = random_batch(&[3, 1, 16, 16], 6);
    let p = m.predict_proba(&x).unwrap();
    let e = Ensemble::new(vec![m.clone(), m.clone(), m]).unwrap();
    assert_eq!(e.predict_proba(&x).unwrap(), p);
}

#[test]
fn two_opposite_members_average_to_half() {
    let a = Tensor::<f64>::from_f64([1, 2], &[1.0, 0.0]).unwrap();
    let b = Tensor::<f64>::from_f64([1, 2], &[0.0, 1.0]).unwrap();
    let m = average_probabilities(&[a, b]).unwrap();
    assert_eq!(m.data(), &[0.5, 0.5]);
}

#[test]
fn ensemble_rejects_class_mismatch() {
    let a = build_model_b::<f32>(4, InputSpec::grayscale(16, 16), 5).unwrap();
    let b = build_model_b::<f32>(5, InputSpec::grayscale(16, 16), 5).unwrap();
    assert!(Ensemble::new(vec![a.clone(), b.clone()]).is_err());
    let members: [&dyn Classifier<f32>; 2] = [&a, &b];
    assert!(ensemble_predict(&members, &random_batch(&[1, 1, 16, 16], 1)).is_err());
    assert!(average_probabilities::<f32>(&[]).is_err());
}

#[test]
fn three_members_match_brute_force_mean() {
    let input = InputSpec::grayscale(16, 16);
    let members: Vec<ModelGraph<f32>> = ModelKind::ALL
        .iter()
        .map(|&k| ModelGraph::build(ArchSpec::new(k, 6, input), 9).unwrap())
        .collect();
    let x = random_batch(&[2, 1, 16, 16], 10);
    let outs: Vec<Tensor<f32>> = members.iter().map(|m| m.predict_proba(&x).unwrap()).collect();
    let refs: Vec<&dyn Classifier<f32>> = members.iter().map(|m| m as &dyn Classifier<f32>).collect();
    let e = ensemble_predict(&refs, &x).unwrap();
    for i in 0..e.len() {
        let mean = outs.iter().map(|o| o.data()[i] as f64).sum::<f64>() / 3.0;
        assert!((e.data()[i] as f64 - mean).abs() < 1e-7);
    }
}

fn distribution(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn ensemble_is_permutation_invariant(
        rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 5), 2..6),
        rot in 0usize..6,
    ) {
        let members: Vec<Tensor<f64>> = rows
            .iter()
            .map(|r| Tensor::new([1, 5], distribution(r)).unwrap())
            .collect();
        let mut shuffled = members.clone();
        shuffled.rotate_left(rot % members.len());
        shuffled.reverse();
        let a = average_probabilities(&members).unwrap();
        let b = average_probabilities(&shuffled).unwrap();
        prop_assert_eq!(&a, &b);
        let s: f64 = a.data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        prop_assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn ensemble_cross_entropy_obeys_jensen(
        rows in prop::collection::vec(prop::collection::vec(1e-6f64..1.0, 4), 1..5),
        label in 0usize..4,
    ) {
        let members: Vec<Tensor<f64>> = rows
            .iter()
            .map(|r| Tensor::new([1, 4], distribution(r)).unwrap())
            .collect();
        let mean = average_probabilities(&members).unwrap();
        let ce = |p: f64| -p.max(1e-12).ln();
        let member_mean = members.iter().map(|m| ce(m.data()[label])).sum::<f64>() / members.len() as f64;
        prop_assert!(ce(mean.data()[label]) <= member_mean + 1e-12);
    }
}
