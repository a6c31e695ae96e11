use proptest::prelude::*;
use querymix::decoder::{decoder_forward, init_queries, DecoderConfig, DecoderParams, StageOutput};
use querymix::feature_space::{gauss_z_weights, sample_point_3d, FeatureLevel, FeaturePyramid};
use querymix::geometry::{box_to_pos, decode_box, giou, iof_bias, update_pos, BoxXYXY, QueryPos, IOF_EPS};
use querymix::matching::{set_loss, GroundTruth, LossConfig};
use querymix::scene::{gen_pyramid, SceneSpec, SyntheticScene};
use querymix::tensor::{RngState, Tensor};

fn arb_box() -> impl Strategy<Value = BoxXYXY> {
    (0.0f64..100.0, 0.0f64..100.0, 0.5f64..60.0, 0.5f64..60.0).prop_map(|(x, y, w, h)| BoxXYXY::new(x, y, x + w, y + h))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn box_position_round_trip(b in arb_box(), s in prop::sample::select(vec![1.0, 4.0, 8.0])) {
        let back = decode_box(box_to_pos(b, s).unwrap(), s).unwrap();
        for (u, v) in back.to_array().iter().zip(b.to_array()) {
            prop_assert!(close(*u, v, 1e-12));
        }
    }

    #[test]
    fn zero_update_is_identity(x in -10.0f64..10.0, y in -10.0f64..10.0, z in -2.0f64..6.0, r in -2.0f64..2.0) {
        let p = QueryPos::new(x, y, z, r);
        prop_assert_eq!(update_pos(p, [0.0; 4]), p);
    }

    #[test]
    fn gauss_weights_are_a_distribution(z in -6.0f64..9.0, tau in 0.1f64..8.0, n in 1usize..6) {
        let zs: Vec<f64> = (0..n).map(|j| j as f64).collect();
        let w = gauss_z_weights(z, &zs, tau);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(w.iter().all(|v| *v > 0.0 && *v <= 1.0));
    }

    #[test]
    fn constant_pyramid_samples_are_constant(
        c in -3.0f64..3.0, x in -50.0f64..100.0, y in -50.0f64..100.0, z in -3.0f64..6.0,
    ) {
        let levels = [4u32, 8, 16]
            .iter()
            .map(|&s| {
                let n = (64 / s) as usize;
                FeatureLevel::new(s, n, n, Tensor::new(vec![n, n, 2], vec![c; n * n * 2]).unwrap()).unwrap()
            })
            .collect();
        let pyr = FeaturePyramid::new(4, levels).unwrap();
        for v in sample_point_3d(&pyr, x, y, z, 2.0, 0..2) {
            prop_assert!(close(v, c, 1e-14));
        }
    }

    #[test]
    fn iof_bias_bounds(boxes in prop::collection::vec(arb_box(), 1..6)) {
        let b = iof_bias(&boxes, IOF_EPS);
        let lo = IOF_EPS.ln() - 1e-12;
        for i in 0..boxes.len() {
            prop_assert!(b.get2(i, i).abs() <= 1e-6);
            for j in 0..boxes.len() {
                prop_assert!(b.get2(i, j) >= lo && b.get2(i, j) <= 1e-6);
            }
        }
    }

    #[test]
    fn giou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (x, y) = (giou(&a, &b).value, giou(&b, &a).value);
        prop_assert!(close(x, y, 1e-14));
        prop_assert!((-1.0..=1.0).contains(&x));
        prop_assert!(close(giou(&a, &a).value, 1.0, 1e-14));
    }
}

fn permute_output(o: &StageOutput, perm: &[usize]) -> StageOutput {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| o.logits.row(i).to_vec()).collect();
    StageOutput {
        logits: Tensor::from_rows(&rows).unwrap(),
        boxes: perm.iter().map(|&i| o.boxes[i]).collect(),
        states: perm.iter().map(|&i| o.states[i].clone()).collect(),
        offsets: perm.iter().map(|&i| o.offsets[i].clone()).collect(),
        trace: perm.iter().map(|&i| o.trace[i].clone()).collect(),
    }
}

fn shuffled(n: usize, rng: &mut RngState) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.int_range(0, i));
    }
    perm
}

struct Fixture {
    cfg: DecoderConfig,
    params: DecoderParams,
    pyr: FeaturePyramid,
    scene: SyntheticScene,
}

fn fixture(seed: u64) -> Fixture {
    let mut cfg = DecoderConfig::toy();
    cfg.num_queries = 7;
    let mut rng = RngState::new(seed);
    let spec = SceneSpec::default();
    let scene = SyntheticScene::random(&spec, cfg.num_classes, &mut rng).unwrap();
    let pyr = gen_pyramid(
        &scene,
        cfg.d_feat,
        cfg.num_classes,
        &spec.strides,
        cfg.s_base,
        spec.noise,
        &mut rng,
    )
    .unwrap();
    let mut params = DecoderParams::init(&cfg, &mut rng).unwrap();
    for st in &mut params.stages {
        for v in st.reg2.weight.data_mut() {
            *v = rng.uniform(-0.05, 0.05);
        }
        for v in st.offsets.weight.data_mut() {
            *v = rng.uniform(-0.05, 0.05);
        }
    }
    Fixture {
        cfg,
        params,
        pyr,
        scene,
    }
}

#[test]
fn set_loss_ignores_prediction_order() {
    for seed in 0..5 {
        let f = fixture(seed);
        let (w, h) = f.scene.image_size();
        let outs = decoder_forward(
            &init_queries(&f.cfg, w, h, &f.params).unwrap(),
            &f.pyr,
            &f.params,
            &f.cfg,
        )
        .unwrap();
        let gt: GroundTruth = f.scene.ground_truth();
        let cfg = LossConfig::default();
        let base = set_loss(&outs, &gt, (w, h), &cfg).unwrap().breakdown;
        let perm = shuffled(f.cfg.num_queries, &mut RngState::new(seed + 100));
        let permuted: Vec<StageOutput> = outs.iter().map(|o| permute_output(o, &perm)).collect();
        let again = set_loss(&permuted, &gt, (w, h), &cfg).unwrap().breakdown;
        assert!(
            close(base.total, again.total, 1e-12),
            "{} vs {}",
            base.total,
            again.total
        );
    }
}

#[test]
fn decoder_is_permutation_equivariant() {
    for seed in 0..3 {
        let f = fixture(seed);
        let (w, h) = f.scene.image_size();
        let perm = shuffled(f.cfg.num_queries, &mut RngState::new(seed + 7));
        let mut permuted = f.params.clone();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| f.params.query_content.row(i).to_vec()).collect();
        permuted.query_content = Tensor::from_rows(&rows).unwrap();
        let a = decoder_forward(
            &init_queries(&f.cfg, w, h, &f.params).unwrap(),
            &f.pyr,
            &f.params,
            &f.cfg,
        )
        .unwrap();
        let b = decoder_forward(
            &init_queries(&f.cfg, w, h, &permuted).unwrap(),
            &f.pyr,
            &permuted,
            &f.cfg,
        )
        .unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            for (k, &i) in perm.iter().enumerate() {
                for (u, v) in sa.boxes[i].to_array().iter().zip(sb.boxes[k].to_array()) {
                    assert!(close(*u, v, 1e-9));
                }
                for (u, v) in sa.logits.row(i).iter().zip(sb.logits.row(k)) {
                    assert!(close(*u, *v, 1e-9));
                }
            }
        }
    }
}
