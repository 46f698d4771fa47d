use depthseg::metrics::IGNORE;
use depthseg::pseudolabel::{DepthMap, Polarity};
use depthseg::raster::Grid;
use depthseg::selftrain::{
    build_trimap, masked_bce_loss, run_two_stage, train_toy_model, PixelFeatures, SelfTrainError, SelfTrainOptions,
    TrainOptions, TrainingSample, Trimap,
};
use depthseg::synth::{generate_scene, write_corpus, CorpusOptions, SceneParams};
use depthseg::BinaryMask;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pair(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (Grid<f64>, Trimap) {
    let probs = Grid::from_fn(w, h, |_, _| rng.random_range(0.01..0.99));
    let t = Grid::from_fn(w, h, |_, _| [0u8, 1, IGNORE][rng.random_range(0..3)]);
    (probs, Trimap::new(t).unwrap())
}

fn oracle_loss(p: &Grid<f64>, t: &Trimap) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for y in 0..p.height() {
        for x in 0..p.width() {
            let tv = t.grid().get(x, y);
            if tv == IGNORE {
                continue;
            }
            let pv = p.get(x, y);
            sum += if tv == 1 { -pv.ln() } else { -(1.0 - pv).ln() };
            n += 1;
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

#[test]
fn loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let (p, t) = random_pair(&mut rng, w, h);
        let (l, _) = masked_bce_loss(&p, &t).unwrap();
        let o = oracle_loss(&p, &t);
        assert!((l - o).abs() <= 1e-12 * o.max(1.0), "{l} vs {o}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (p, t) = random_pair(&mut rng, 7, 5);
    let (_, g) = masked_bce_loss(&p, &t).unwrap();
    let eps = 1e-6;
    for i in 0..p.len() {
        let mut plus = p.clone();
        plus.data_mut()[i] += eps;
        let mut minus = p.clone();
        minus.data_mut()[i] -= eps;
        let num = (masked_bce_loss(&plus, &t).unwrap().0 - masked_bce_loss(&minus, &t).unwrap().0) / (2.0 * eps);
        let a = g.data()[i];
        if t.grid().data()[i] == IGNORE {
            assert_eq!(a, 0.0);
            assert!(num.abs() < 1e-9);
        } else {
            assert!((a - num).abs() <= 1e-6 * a.abs().max(num.abs()), "pixel {i}: {a} vs {num}");
        }
    }
}

#[test]
fn trimap_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let (w, h) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let a = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(0.5));
        let b = BinaryMask::from_fn(w, h, |_, _| rng.random_bool(0.5));
        let t = build_trimap(&a, &b).unwrap();
        let mut disagree = 0;
        for y in 0..h {
            for x in 0..w {
                let v = t.grid().get(x, y);
                if a.get(x, y) == b.get(x, y) {
                    assert_eq!(v, u8::from(a.get(x, y)));
                } else {
                    assert_eq!(v, IGNORE);
                    disagree += 1;
                }
            }
        }
        assert_eq!(t.ignore_fraction(), disagree as f64 / (w * h) as f64);
    }
    assert!(build_trimap(&BinaryMask::zeros(2, 2), &BinaryMask::zeros(2, 3)).is_err());
}

fn scene_sample(seed: u64, flip: f64) -> TrainingSample {
    let p = SceneParams { width: 48, height: 48, ..Default::default() };
    let s = generate_scene(seed, &p);
    let depth = DepthMap::new(s.depth.map(|v| v.clamp(0.0, 1.0)), Polarity::CloserIsLarger).unwrap();
    let features = PixelFeatures::new(&s.rgb, &depth).unwrap();
    let target = depthseg::synth::flip_pixels(&s.truth, flip, seed);
    TrainingSample { features, target: Trimap::from_mask(&target) }
}

#[test]
fn training_loss_never_increases_and_is_deterministic() {
    let data: Vec<_> = (0..3).map(|s| scene_sample(s, 0.1)).collect();
    let opts = TrainOptions { epochs: 60, max_pixels_per_image: Some(500), seed: 4, ..Default::default() };
    let a = train_toy_model(&data, &opts).unwrap();
    assert_eq!(a.loss_curve.len(), 61);
    assert_eq!(a.pixels, 1500);
    assert!(a.loss_curve.windows(2).all(|w| w[1] <= w[0]));
    assert!(a.loss_curve.last().unwrap() < &a.loss_curve[0]);
    assert!((a.loss_curve[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(a, train_toy_model(&data, &opts).unwrap());
    let other = train_toy_model(&data, &TrainOptions { seed: 5, ..opts }).unwrap();
    assert_ne!(a.model, other.model);
}

#[test]
fn all_ignored_targets_are_an_error() {
    let mut s = scene_sample(0, 0.0);
    s.target = Trimap::new(Grid::filled(48, 48, IGNORE)).unwrap();
    let r = train_toy_model(&[s], &TrainOptions { epochs: 0, ..Default::default() });
    assert!(matches!(r, Err(SelfTrainError::NoSupervision)));
}

#[test]
fn two_stages_on_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let opts = CorpusOptions {
        train: 4,
        test: 2,
        seed: 1,
        flip_fraction: 0.2,
        scene: SceneParams { width: 64, height: 64, ..Default::default() },
    };
    let m = write_corpus(dir.path(), &opts).unwrap();
    let st = SelfTrainOptions { train: TrainOptions { epochs: 100, ..Default::default() }, ..Default::default() };
    let [s1, s2] = run_two_stage(&m, &st).unwrap();
    assert_eq!((s1.stage, s2.stage), (1, 2));
    assert_eq!(s1.ignore_fraction, 0.0);
    assert!(s2.ignore_fraction > 0.1 && s2.ignore_fraction < 0.4, "{}", s2.ignore_fraction);
    assert!(s1.eval_miou > 50.0 && s2.eval_miou >= s1.eval_miou, "{} {}", s1.eval_miou, s2.eval_miou);
    assert_eq!(run_two_stage(&m, &st).unwrap()[1], s2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative_and_ignore_invariant(seed in any::<u64>(), w in 1usize..10, h in 1usize..10, fill in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, t) = random_pair(&mut rng, w, h);
        let (l, _) = masked_bce_loss(&p, &t).unwrap();
        prop_assert!(l >= 0.0);
        // Probabilities on ignored pixels do not matter.
        let mut q = p.clone();
        for (v, &tv) in q.data_mut().iter_mut().zip(t.grid().data()) {
            if tv == IGNORE {
                *v = fill;
            }
        }
        prop_assert_eq!(masked_bce_loss(&q, &t).unwrap().0, l);
    }
}
