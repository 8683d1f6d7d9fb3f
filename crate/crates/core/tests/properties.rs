use bigraphdiff::data::normalize_sequence;
use bigraphdiff::denoiser::{efficient_attention, DenoiserConfig, DenoiserWeights, NoiseBatch};
use bigraphdiff::metrics::{feature_stats, frechet_distance, multimodality};
use bigraphdiff::{MotionSequence, NoisePredictor, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::OnceLock;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn raw_sequence(n: usize, k: usize, torso: usize, seed: u64) -> MotionSequence {
    let frames = Tensor::randn(&[n, k, 3, 2], 1.5, &mut rng(seed));
    MotionSequence::new(frames, "x", 30, torso % k, false).unwrap()
}

fn features(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
}

fn small_model() -> &'static DenoiserWeights {
    static MODEL: OnceLock<DenoiserWeights> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = DenoiserConfig {
            num_layers: 2,
            num_heads: 2,
            d_l: 8,
            text_layers: 1,
            text_heads: 2,
            vocab: vec!["hug".into(), "push".into()],
            max_len: 6,
            joints: 3,
            graph_len: 6,
            graph_channels: 4,
            diffusion_steps: 10,
            ..DenoiserConfig::desk()
        };
        let mut w = DenoiserWeights::new(&cfg, &mut rng(3)).unwrap();
        // Leave the zero-initialized start so every path contributes.
        let mut r = rng(4);
        for p in w.store.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.3 * r.random_range(-1.0..1.0);
            }
        }
        w
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalization_ignores_translation_and_scale(
        n in 1usize..8, k in 2usize..6, torso in 0usize..6, seed in any::<u64>(),
        shift in prop::array::uniform3(-50.0f64..50.0), c in 0.01f64..100.0,
    ) {
        let seq = raw_sequence(n, k, torso, seed);
        let base = normalize_sequence(&seq).unwrap();
        let mut moved = seq.clone();
        moved.frames.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += shift[(i / 2) % 3]);
        let mut scaled = seq.clone();
        scaled.frames.data_mut().iter_mut().for_each(|v| *v *= c);
        prop_assert!(max_diff(normalize_sequence(&moved).unwrap().frames.data(), base.frames.data()) < 1e-12);
        prop_assert!(max_diff(normalize_sequence(&scaled).unwrap().frames.data(), base.frames.data()) < 1e-12);
        prop_assert!(normalize_sequence(&base).is_err());
    }

    #[test]
    fn frechet_is_symmetric_and_non_negative(
        na in 2usize..20, nb in 2usize..20, d in 1usize..6, seed in any::<u64>(),
    ) {
        let a = feature_stats(&features(na, d, seed)).unwrap();
        let b = feature_stats(&features(nb, d, seed ^ 1)).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8, "{} vs {}", ab, ba);
    }

    #[test]
    fn multimodality_of_a_set_against_itself_is_zero(
        sizes in prop::collection::vec(2usize..12, 1..4), seed in any::<u64>(),
    ) {
        let groups: Vec<Vec<Vec<f64>>> = sizes.iter().enumerate().map(|(i, &n)| features(n, 4, seed ^ i as u64)).collect();
        let m = multimodality(&groups, &groups, &mut rng(seed)).unwrap();
        prop_assert_eq!(m.score, 0.0);
    }

    #[test]
    fn efficient_attention_rows_are_convex_combinations_of_values(
        nq in 1usize..6, nk in 1usize..6, heads in 1usize..3, dh in 1usize..4, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let d = heads * dh;
        let q = Tensor::randn(&[2, nq, d], 2.0, &mut r);
        let k = Tensor::randn(&[2, nk, d], 2.0, &mut r);
        let v = Tensor::randn(&[2, nk, d], 1.0, &mut r);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v.clone()));
        let out = efficient_attention(&mut tape, qv, kv, vv, heads, None).unwrap();
        prop_assert_eq!(tape.shape(out), &[2, nq, d]);
        // Each output coordinate lies within the range of its value column.
        for b in 0..2 {
            for c in 0..d {
                let col: Vec<f64> = (0..nk).map(|j| v.data()[(b * nk + j) * d + c]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..nq {
                    let y = tape.value(out)[(b * nq + i) * d + c];
                    prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn predict_noise_preserves_shape_and_batches_consistently(
        n in 1usize..=6, t1 in 1usize..=10, t2 in 1usize..=10, seed in any::<u64>(),
    ) {
        let m = small_model();
        let mut r = rng(seed);
        let x1 = Tensor::randn(&[n, 3, 3, 2], 1.0, &mut r);
        let x2 = Tensor::randn(&[n, 3, 3, 2], 1.0, &mut r);
        let (tok1, tok2) = (vec![0], vec![1, 0]);
        let y1 = m.predict_noise(&x1, t1, &tok1).unwrap();
        let y2 = m.predict_noise(&x2, t2, &tok2).unwrap();
        prop_assert_eq!(y1.shape(), x1.shape());
        prop_assert!(y1.is_finite());

        let mut both = x1.data().to_vec();
        both.extend_from_slice(x2.data());
        let xb = Tensor::new(vec![2, n, 3, 3, 2], both).unwrap();
        let tokens = [tok1, tok2];
        let yb = m.predict_noise_batch(NoiseBatch { x_t: &xb, frame_keep: None, steps: &[t1, t2], tokens: &tokens }).unwrap();
        let per = x1.numel();
        prop_assert!(max_diff(&yb.data()[..per], y1.data()) < 1e-12);
        prop_assert!(max_diff(&yb.data()[per..], y2.data()) < 1e-12);
    }

    #[test]
    fn padded_frames_do_not_reach_real_frames(
        n in 1usize..=5, pad in 1usize..=3, t in 1usize..=10, seed in any::<u64>(),
    ) {
        let m = small_model();
        let total = (n + pad).min(6);
        prop_assume!(total > n);
        let mut r = rng(seed);
        let x = Tensor::randn(&[n, 3, 3, 2], 1.0, &mut r);
        let y = m.predict_noise(&x, t, &[1]).unwrap();

        let junk = Tensor::randn(&[total - n, 3, 3, 2], 10.0, &mut r);
        let mut padded = x.data().to_vec();
        padded.extend_from_slice(junk.data());
        let xp = Tensor::new(vec![1, total, 3, 3, 2], padded).unwrap();
        let keep: Vec<bool> = (0..total).map(|i| i < n).collect();
        let yp = m.predict_noise_batch(NoiseBatch { x_t: &xp, frame_keep: Some(&keep), steps: &[t], tokens: &[vec![1]] }).unwrap();
        prop_assert!(max_diff(&yp.data()[..y.numel()], y.data()) < 1e-12);
    }
}
