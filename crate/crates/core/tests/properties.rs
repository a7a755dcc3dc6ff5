//! Invariants of the diffusion and evaluation primitives.

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use neurorecon::decoders::{latent_stats, momentum_align};
use neurorecon::diffusion::{blend_weighted_at, cfg_epsilon, forward_diffuse_at, make_schedule, tweedie_at, ScheduleKind};
use neurorecon::eval::{
    pixcorr, repeat_consistency, retrieval, ssim_gray, two_way_identification, vote, MetricReport, ReportMeta, ReportSummary,
};
use neurorecon::tensors::{Image, Latent, IMAGE_LEN};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_abs(a: &Latent, b: &Latent) -> f64 {
    (&a.0 - &b.0).iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn image(seed: u64) -> Image {
    use rand::Rng;
    let mut r = rng(seed);
    Image::from_vec((0..IMAGE_LEN).map(|_| r.random::<f64>()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedules_decrease_strictly_inside_the_unit_interval(
        t in 2usize..1500,
        lo in 1e-5f64..1e-2,
        span in 0.0f64..0.5,
        cosine in any::<bool>(),
    ) {
        let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear };
        let s = make_schedule(t, lo, lo + span, kind).unwrap();
        let ab = s.alpha_bars();
        prop_assert_eq!(ab.len(), t);
        prop_assert!(ab[0] < 1.0 && ab[t - 1] > 0.0);
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
        let steps = 1 + t / 3;
        let ts = s.ddim_timesteps(steps).unwrap();
        prop_assert_eq!(ts.len(), steps);
        prop_assert!(ts.windows(2).all(|w| w[0] < w[1]) && *ts.last().unwrap() < t);
    }

    #[test]
    fn tweedie_inverts_forward_diffusion(seed in any::<u64>(), ab in 1e-3f64..0.9999) {
        let mut r = rng(seed);
        let z0 = Latent::randn(&mut r);
        let eps = Latent::randn(&mut r);
        let zt = forward_diffuse_at(&z0, &eps, ab).unwrap();
        let back = tweedie_at(&zt, &eps, ab, 0).unwrap();
        prop_assert!(max_abs(&back, &z0) < 1e-9 / ab.sqrt());
    }

    #[test]
    fn blend_and_cfg_reduce_to_endpoints(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = Latent::randn(&mut r);
        let b = Latent::randn(&mut r);
        prop_assert_eq!(blend_weighted_at(&a, &b, 1.0).unwrap(), b.clone());
        prop_assert!(max_abs(&blend_weighted_at(&a, &b, 0.0).unwrap(), &a) < 1e-15);
        prop_assert_eq!(cfg_epsilon(&a, &b, 0.0).unwrap(), b.clone());
        prop_assert!(max_abs(&cfg_epsilon(&a, &b, 1.0).unwrap(), &a) < 1e-12);
    }

    #[test]
    fn momentum_alignment_is_idempotent(seed in any::<u64>(), n in 2usize..12, scale in 0.01f64..50.0, mu in -2.0f64..2.0, sd in 0.1f64..3.0) {
        let mut r = rng(seed);
        let batch: Vec<Latent> = (0..n).map(|_| Latent(Latent::randn(&mut r).0 * scale)).collect();
        let once = momentum_align(&batch, mu, sd).unwrap();
        let (m, s) = latent_stats(&once);
        prop_assert!((m - mu).abs() < 1e-9 && (s - sd).abs() < 1e-9);
        let twice = momentum_align(&once, mu, sd).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!(max_abs(a, b) < 1e-9);
        }
    }

    #[test]
    fn identification_is_a_fraction_and_perfect_on_truth(seed in any::<u64>(), n in 2usize..12) {
        use rand::Rng;
        let mut r = rng(seed);
        let truths: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| r.random::<f64>()).collect()).collect();
        let noise: Vec<Vec<f64>> = (0..n).map(|_| (0..16).map(|_| r.random::<f64>()).collect()).collect();
        let ids = two_way_identification(&noise, &truths).unwrap();
        prop_assert!(ids.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let own = two_way_identification(&truths, &truths).unwrap();
        prop_assert!(own.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unanimous_votes_win_regardless_of_order(seed in any::<u64>(), n in 2usize..10, layers in 1usize..5) {
        use rand::Rng;
        let mut r = rng(seed);
        let pick = r.random_range(0..n);
        let rows: Vec<Vec<f64>> = (0..layers)
            .map(|_| (0..n).map(|c| if c == pick { 2.0 } else { r.random::<f64>() }).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|v| v.as_slice()).collect();
        prop_assert_eq!(vote(&refs), pick);
        let rev: Vec<&[f64]> = refs.iter().rev().copied().collect();
        prop_assert_eq!(vote(&rev), pick);
    }

    #[test]
    fn image_similarities_are_symmetric_and_self_maximal(a in any::<u64>(), b in any::<u64>(), gain in 0.1f64..5.0, offset in -1.0f64..1.0) {
        let (x, y) = (image(a), image(b));
        prop_assert!((pixcorr(&x, &y).unwrap() - pixcorr(&y, &x).unwrap()).abs() < 1e-12);
        let moved = Image(x.0.mapv(|v| gain * v + offset));
        prop_assert!((pixcorr(&x, &moved).unwrap() - 1.0).abs() < 1e-9);
        let gx = neurorecon::eval::grayscale(&x);
        let gy = neurorecon::eval::grayscale(&y);
        prop_assert!((ssim_gray(gx.view(), gx.view()) - 1.0).abs() < 1e-12);
        prop_assert!((ssim_gray(gx.view(), gy.view()) - ssim_gray(gy.view(), gx.view())).abs() < 1e-12);
        prop_assert!((repeat_consistency(&[x.clone(), x.clone(), x]).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn identity_similarity_retrieves_everything() {
    let sim: Vec<Vec<f64>> = (0..7).map(|i| (0..7).map(|j| if i == j { 1.0 } else { 0.5 }).collect()).collect();
    assert!(retrieval(&sim).iter().all(|&h| h == 1.0));
    let shifted: Vec<Vec<f64>> = (0..7).map(|i| (0..7).map(|j| if (i + 1) % 7 == j { 1.0 } else { 0.0 }).collect()).collect();
    assert!(retrieval(&shifted).iter().all(|&h| h == 0.0));
}

#[test]
fn reports_round_trip_through_disk() {
    let meta = ReportMeta {
        label: "probe".into(),
        subject: Some(2),
        kappa: 0.125,
        kappa_op: Some(0.5),
        eta: 0.2,
        seed: 9,
        guidance_source: "ground-truth-features".into(),
        distractors: "all".into(),
        retrieval_chance: 0.01,
    };
    let mut r = MetricReport::new(meta, &["a", "b"]);
    let values = Array2::from_shape_fn((5, 2), |(i, j)| (i as f64 + 1.0) / (j as f64 + 3.0));
    for row in values.rows() {
        r.push_item(row.to_vec()).unwrap();
    }
    r.scores.insert("brain_v1".into(), 0.3);
    let dir = tempfile::tempdir().unwrap();
    r.save(dir.path(), "probe").unwrap();
    let s = ReportSummary::load(&dir.path().join("probe.json")).unwrap();
    assert_eq!(s, r.summary());
    assert_eq!(s.items, 5);
    assert!((s.aggregate["a"] - values.column(0).mean().unwrap()).abs() < 1e-15);
    let csv = std::fs::read_to_string(dir.path().join("probe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 + 1);
    assert!(r.push_item(vec![1.0]).is_err());
}
