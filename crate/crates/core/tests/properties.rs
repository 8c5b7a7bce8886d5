use mddm::layers::{pixel_shuffle, pixel_unshuffle};
use mddm::network::{charbonnier_loss, LossConfig, Model, ModelConfig};
use mddm::synth::{synth_pair, SynthSpec};
use mddm::train::{infer, psnr, reflect_pad, ssim};
use mddm::{Fill, Tensor};
use proptest::prelude::*;

fn toy() -> Model {
    Model::new(&ModelConfig::toy()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn infer_keeps_size_and_range(h in 1usize..20, w in 1usize..20, seed in 0u64..50) {
        let m = toy();
        let img = Tensor::new([1, 3, h, w], Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap();
        let out = infer(&m, &img).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn reflect_pad_keeps_top_left(h in 2usize..12, w in 2usize..12, ph in 0usize..6, pw in 0usize..6, seed in 0u64..50) {
        let img = Tensor::new([1, 3, h, w], Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap();
        let (th, tw) = (h + ph.min(h - 1), w + pw.min(w - 1));
        let p = reflect_pad(&img, th, tw).unwrap();
        prop_assert_eq!(p.shape().dims(), [1, 3, th, tw]);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    prop_assert_eq!(p.at(0, c, y, x), img.at(0, c, y, x));
                }
            }
            for y in h..th {
                prop_assert_eq!(p.at(0, c, y, 0), img.at(0, c, 2 * h - 2 - y, 0));
            }
        }
    }

    #[test]
    fn shuffle_round_trips(r in 1usize..4, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..100) {
        let x = Tensor::new([1, c * r * r, h, w], Fill::Uniform { lo: -1.0, hi: 1.0, seed }).unwrap();
        prop_assert_eq!(pixel_unshuffle(&pixel_shuffle(&x, r).unwrap(), r).unwrap(), x);
    }

    #[test]
    fn loss_is_symmetric_and_at_least_eps(seed in 0u64..200, eps in 1e-4f64..1e-1) {
        let a = Tensor::new([1, 3, 4, 4], Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap();
        let b = Tensor::new([1, 3, 4, 4], Fill::Uniform { lo: 0.0, hi: 1.0, seed: seed + 1000 }).unwrap();
        let cfg = LossConfig { eps };
        let (ab, ba) = (charbonnier_loss(&a, &b, &cfg).unwrap(), charbonnier_loss(&b, &a, &cfg).unwrap());
        prop_assert!((ab - ba).abs() < 1e-15);
        prop_assert!(ab >= eps);
    }

    #[test]
    fn moire_pairs_stay_in_range(angle in -10.0f64..10.0, intensity in 0.1f64..0.6, seed in 0u64..20) {
        let clean = Tensor::new([1, 3, 16, 16], Fill::Uniform { lo: 0.0, hi: 1.0, seed }).unwrap();
        let spec = SynthSpec { angle, intensity, ..SynthSpec::default() };
        let pair = synth_pair(&clean, &spec).unwrap();
        prop_assert_eq!(pair.moire.shape(), pair.clean.shape());
        prop_assert!(pair.moire.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(psnr(&pair.moire, &pair.clean).unwrap() < 100.0);
        prop_assert!(ssim(&pair.clean, &pair.clean).unwrap() > 0.999_999);
    }
}
