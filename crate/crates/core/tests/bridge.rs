use avit_core::autodiff::Graph;
use avit_core::bridge::*;
use avit_core::checkpoint::Checkpoint;
use avit_core::diffusion::{draw_t_eps, NoiseSchedule, ScheduleConfig};
use avit_core::metrics::diversity;
use avit_core::tensor::Mat;
use avit_core::trainkit::{grad_check_graph, randn, rng_from, shuffled};
use proptest::prelude::*;

fn mini() -> BridgeConfig {
    BridgeConfig {
        l: 6,
        d_s: 4,
        hidden: 8,
        width: 8,
        heads: 2,
        blocks: 1,
        schedule: ScheduleConfig { steps: 10, ..ScheduleConfig::default() },
        batch: 3,
        ..BridgeConfig::default()
    }
}

fn randm(r: usize, c: usize, seed: u64) -> Mat<f64> {
    let mut rng = rng_from(seed);
    Mat::from_fn(r, c, |_, _| randn(&mut rng))
}

/// Unit vectors `c_i`, `z_j` with `c_i · z_j = sims[i][j]`.
fn pairs_with_cosines(sims: &[[f64; 2]; 2]) -> (Mat<f64>, Mat<f64>) {
    let c = Mat::from_fn(2, 4, |r, k| if r == k { 1.0 } else { 0.0 });
    let z = Mat::from_fn(2, 4, |j, k| match k {
        0 | 1 => sims[k][j],
        _ if k == 2 + j => (1.0 - sims[0][j].powi(2) - sims[1][j].powi(2)).sqrt(),
        _ => 0.0,
    });
    (c, z)
}

fn i2s(c: &Mat<f64>, z: &Mat<f64>, log_scale: f64) -> avit_core::Result<f64> {
    let mut g = Graph::new();
    let (c, z) = (g.constant(c.clone()), g.constant(z.clone()));
    let s = g.constant(Mat::scalar(log_scale));
    let l = contrastive_i2s_loss(&mut g, c, z, s)?;
    Ok(g.scalar(l))
}

#[test]
fn i2s_loss_matches_hand_softmax() {
    let s = [[0.9, 0.1], [0.2, 0.8]];
    let (c, z) = pairs_with_cosines(&s);
    let nll = |pos: f64, neg: f64| -(pos.exp() / (pos.exp() + neg.exp())).ln();
    // instruction→style rows, then style→instruction columns
    let rows = (nll(0.9, 0.1) + nll(0.8, 0.2)) / 2.0;
    let cols = (nll(0.9, 0.2) + nll(0.8, 0.1)) / 2.0;
    assert!((rows - 0.40430).abs() < 1e-4);
    let got = i2s(&c, &z, 0.0).unwrap();
    assert!((got - (rows + cols) / 2.0).abs() < 1e-10, "{got}");

    let (c, z) = pairs_with_cosines(&[[0.3, 0.3], [0.3, 0.3]]);
    assert!((i2s(&c, &z, 0.0).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!(i2s(&Mat::from_fn(1, 4, |_, _| 1.0), &Mat::from_fn(1, 4, |_, _| 1.0), 0.0).is_err());
}

#[test]
fn loss_composition_uses_lambda() {
    assert_eq!(compose_loss(0.5, 0.1, DEFAULT_LAMBDA), 3.5);
    assert_eq!(compose_loss(0.5, 0.1, 0.0), 0.5);
}

#[test]
fn config_rejects_inconsistent_settings() {
    let bad = [
        BridgeConfig { no_diffusion: true, no_cont_align: true, ..mini() },
        BridgeConfig { batch: 1, ..mini() },
        BridgeConfig { width: 7, ..mini() },
        BridgeConfig { lambda: -1.0, ..mini() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
        assert!(Bridge::<f64>::new(c).is_err());
    }
    assert!(mini().validate().is_ok());
}

#[test]
fn joint_loss_passes_gradient_check() {
    let sched = NoiseSchedule::from_config(&mini().schedule).unwrap();
    let (ts, eps) = draw_t_eps(3, 4, &sched, &mut rng_from(2));
    let batch = BridgeBatch { f_i: randm(3, 6, 1), z: randm(3, 4, 3), ts, eps };
    for cfg in [mini(), BridgeConfig { no_diffusion: true, ..mini() }, BridgeConfig { no_cont_align: true, ..mini() }] {
        let b = Bridge::<f64>::new(cfg.clone()).unwrap();
        let err = grad_check_graph(&b.params, 1e-5, |g, p| bridge_loss(&b.net, &cfg, g, p, &batch, &sched)).unwrap();
        assert!(err < 1e-4, "{cfg:?}: {err}");
    }
}

#[test]
fn sampler_diversity_depends_on_diffusion() {
    let f = randm(1, 6, 9).data().to_vec();
    let plain = Bridge::<f64>::new(BridgeConfig { no_diffusion: true, ..mini() }).unwrap();
    let s = plain.sample_from_embedding(&f, 4, 0).unwrap();
    assert_eq!(diversity(&s).unwrap(), 0.0);

    let b = Bridge::<f64>::new(mini()).unwrap();
    let s = b.sample_from_embedding(&f, 4, 0).unwrap();
    assert!(diversity(&s).unwrap() > 0.0);
    assert_eq!(b.sample_from_embedding(&f, 4, 0).unwrap(), s);
    assert_ne!(b.sample_from_embedding(&f, 4, 1).unwrap(), s);
    // sample k is independent of how many are drawn
    assert_eq!(b.sample_from_embedding(&f, 2, 0).unwrap()[..], s[..2]);
    assert!(b.sample_from_embedding(&f, 0, 0).is_err());
    assert!(b.sample_from_embedding(&f[..5], 1, 0).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let mut b = Bridge::<f32>::new(BridgeConfig { seed: 4, ..mini() }).unwrap();
    b.z_mean = vec![0.5, -1.0, 2.0, 0.0];
    b.z_std = vec![1.5, 0.25, 1.0, 3.0];
    let bytes = b.to_checkpoint().unwrap().to_bytes();
    let back = Bridge::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes, TAG).unwrap()).unwrap();
    assert_eq!(back.to_checkpoint().unwrap().to_bytes(), bytes);
    assert_eq!(back.z_std, b.z_std);
    let f = vec![0.1f32; 6];
    assert_eq!(back.sample_from_embedding(&f, 2, 5).unwrap(), b.sample_from_embedding(&f, 2, 5).unwrap());
    assert!(Checkpoint::from_bytes(&bytes, "motion_prior").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn i2s_loss_is_invariant_to_pair_order(seed in 0u64..500, b in 2usize..6, log_scale in -1.0f64..3.0) {
        let c = randm(b, 5, seed);
        let z = randm(b, 5, seed + 1000);
        let perm = shuffled(b, &mut rng_from(seed));
        let pc = Mat::from_fn(b, 5, |r, k| c.get(perm[r], k));
        let pz = Mat::from_fn(b, 5, |r, k| z.get(perm[r], k));
        let a = i2s(&c, &z, log_scale).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - i2s(&pc, &pz, log_scale).unwrap()).abs() < 1e-10);
    }

}
