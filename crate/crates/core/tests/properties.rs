use std::sync::OnceLock;

use avit_core::checkpoint::Checkpoint;
use avit_core::corpus::grammar::{expected_actions, parse_instruction, render_instruction, Emotion};
use avit_core::diffusion::{diffusion_loss, forward_marginal, NoiseSchedule};
use avit_core::face_model::*;
use avit_core::metrics::{bleu_n, diversity, rouge_l};
use avit_core::motion_prior::{MotionPrior, MotionPriorConfig};
use avit_core::trainkit::{randn, rng_from, shuffled};
use avit_core::{autodiff::Graph, Mat};
use proptest::prelude::*;

fn template() -> &'static HeadTemplate<f64> {
    static T: OnceLock<HeadTemplate<f64>> = OnceLock::new();
    T.get_or_init(|| make_synthetic_template(11, 300, DEFAULT_DIM_BETA, DEFAULT_DIM_PSI).unwrap())
}

fn mesh(psi: &[f64], pose: PoseParams<f64>) -> Mat<f64> {
    flame_forward(template(), &ShapeParams::default(), &pose, &ExpressionParams { psi: psi.to_vec() }).unwrap().vertices
}

fn psi_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, DEFAULT_DIM_PSI)
}

fn dist(m: &Mat<f64>, a: usize, b: usize) -> f64 {
    (0..3).map(|k| (m.get(a, k) - m.get(b, k)).powi(2)).sum::<f64>().sqrt()
}

fn words(pool: &'static [&'static str], len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(pool), len)
}

const POOL: &[&str] = &["the", "speaker", "smiles", "softly", "brows", "raised", "a", "b"];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn blendshapes_are_linear_at_zero_pose(a in psi_strategy(), b in psi_strategy()) {
        let zero = vec![0.0; DEFAULT_DIM_PSI];
        let base = mesh(&zero, PoseParams::neutral());
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ma, mb, ms) = (mesh(&a, PoseParams::neutral()), mesh(&b, PoseParams::neutral()), mesh(&sum, PoseParams::neutral()));
        for i in 0..base.len() {
            let lhs = ms.data()[i] - base.data()[i];
            let rhs = (ma.data()[i] - base.data()[i]) + (mb.data()[i] - base.data()[i]);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn global_rotation_preserves_distances(psi in psi_strategy(), w in prop::array::uniform3(-1.8f64..1.8), jaw in -0.3f64..0.3) {
        let still = PoseParams { jaw_rot: [jaw, 0.0, 0.0], ..PoseParams::neutral() };
        let turned = PoseParams { global_rot: w, ..still };
        let (a, b) = (mesh(&psi, still), mesh(&psi, turned));
        let n = a.rows();
        for i in (0..n).step_by(7) {
            for j in (i + 1..n).step_by(13) {
                prop_assert!((dist(&a, i, j) - dist(&b, i, j)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn jaw_rotation_moves_only_the_jaw(psi in psi_strategy(), jaw in prop::array::uniform3(-0.4f64..0.4)) {
        let a = mesh(&psi, PoseParams::neutral());
        let b = mesh(&psi, PoseParams { jaw_rot: jaw, ..PoseParams::neutral() });
        let in_jaw = template().region(Region::Jaw);
        for v in 0..a.rows() {
            if !in_jaw.contains(&v) {
                prop_assert_eq!(a.row(v), b.row(v));
            }
        }
        prop_assert_eq!(b, mesh(&psi, PoseParams { jaw_rot: jaw, ..PoseParams::neutral() }));
    }

    #[test]
    fn obj_round_trip_keeps_geometry(psi in psi_strategy()) {
        let m = flame_forward(template(), &ShapeParams::default(), &PoseParams::neutral(), &ExpressionParams { psi }).unwrap();
        let back = parse_obj(&export_obj(&m)).unwrap();
        prop_assert_eq!(&back.faces, &m.faces);
        for (x, y) in back.vertices.data().iter().zip(m.vertices.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn linear_schedules_decrease_alpha_bar(steps in 2usize..200, start in 1e-5f64..1e-2, span in 1e-3f64..0.5) {
        let s = NoiseSchedule::linear(steps, start, start + span).unwrap();
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn oracle_denoiser_has_zero_loss(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let s = NoiseSchedule::default();
        let mut rng = rng_from(seed);
        let x0 = Mat::from_fn(rows, cols, |_, _| randn(&mut rng));
        let mut g = Graph::new();
        let target = x0.clone();
        let l = diffusion_loss(&mut g, &x0, &s, &mut rng, |g, _, _| g.constant(target.clone())).unwrap();
        prop_assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn marginal_with_zero_noise_scales_by_root_alpha_bar(x in prop::collection::vec(-3.0f64..3.0, 1..8), t in 0usize..=100) {
        let s = NoiseSchedule::default();
        let out = forward_marginal(&x, t, &vec![0.0; x.len()], &s).unwrap();
        for (o, v) in out.iter().zip(&x) {
            prop_assert!((o - s.alpha_bar(t).sqrt() * v).abs() < 1e-12);
        }
    }

    #[test]
    fn diversity_ignores_translation_and_scales_linearly(
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 2..6),
        shift in prop::collection::vec(-5.0f64..5.0, 4),
        k in 0.1f64..10.0,
    ) {
        let d = diversity(&rows).unwrap();
        let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|a| a * k).collect()).collect();
        prop_assert!((diversity(&moved).unwrap() - d).abs() < 1e-9);
        prop_assert!((diversity(&scaled).unwrap() - k * d).abs() < 1e-9 * (1.0 + k * d));
        prop_assert!(d >= 0.0);
    }

    #[test]
    fn bleu_falls_with_higher_orders(cand in words(POOL, 1..12), r in words(POOL, 1..12)) {
        let refs = vec![r];
        let b1 = bleu_n(&cand, &refs, 1).unwrap();
        let b4 = bleu_n(&cand, &refs, 4).unwrap();
        prop_assert!(b1 + 1e-12 >= b4, "{b1} < {b4}");
        prop_assert!((0.0..=1.0).contains(&b1) && (0.0..=1.0).contains(&b4));
        prop_assert_eq!(bleu_n(&cand, &refs, 4).unwrap(), b4);
    }

    #[test]
    fn rouge_is_bounded_and_one_on_identity(cand in words(POOL, 1..12), r in words(POOL, 1..12)) {
        let v = rouge_l(&cand, &r).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((rouge_l(&r, &r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoints_are_byte_stable(mats in prop::collection::vec((1usize..5, 1usize..5, any::<u64>()), 1..4)) {
        let mut c = Checkpoint::new("props", &serde_json::json!({"n": mats.len()})).unwrap();
        for (i, (r, k, seed)) in mats.iter().enumerate() {
            let mut rng = rng_from(*seed);
            c.put(format!("m{i}"), &Mat::<f32>::from_fn(*r, *k, |_, _| randn(&mut rng) as f32));
        }
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, "props").unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn grammar_renders_parse_back(e in 0usize..8, level in 1u8..=3, seed in any::<u64>()) {
        let emotion = Emotion::from_index(e).unwrap();
        let text = render_instruction(emotion, level, &mut rng_from(seed));
        let p = parse_instruction(&text).unwrap();
        prop_assert_eq!(p.emotion, emotion);
        prop_assert_eq!(p.intensity, Some(level));
        prop_assert_eq!(p.actions, expected_actions(emotion));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn style_code_ignores_reference_order(seed in any::<u64>(), n in 2usize..10) {
        static M: OnceLock<MotionPrior<f64>> = OnceLock::new();
        let m = M.get_or_init(|| MotionPrior::new(MotionPriorConfig::default()).unwrap());
        let mut rng = rng_from(seed);
        let cols = m.config.coeff_dim();
        let frames = Mat::from_fn(n, cols, |_, _| randn(&mut rng));
        let perm = shuffled(n, &mut rng);
        let permuted = Mat::from_fn(n, cols, |r, c| frames.get(perm[r], c));
        let (a, b) = (m.encode_style(&frames).unwrap(), m.encode_style(&permuted).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
