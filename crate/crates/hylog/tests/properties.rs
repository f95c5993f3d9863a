//! Property tests for the crate's structural invariants.

use proptest::prelude::*;

use hylog::blocks::{window_merge, window_partition, BlockKind};
use hylog::flops::{attention_macs, local_macs_by_window_enumeration, FlopModel};
use hylog::tensor::Tensor;
use hylog::vit::{detokenize, tokenize};

fn map_strategy(max_side: usize, max_c: usize) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_side, 1..=max_side, 1..=max_c, any::<u64>()).prop_map(|(h, w, c, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, c], |_| rng.random::<f64>() * 2.0 - 1.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Gradient of a broadcast operand equals the sum over broadcast axes
    /// of the unbroadcast gradient, checked against explicit tiling.
    #[test]
    fn broadcast_backward_matches_explicit_tiling(
        (h, w, c, seed) in (1usize..5, 1usize..5, 1usize..5, any::<u64>()),
        keep_h in any::<bool>(),
        keep_w in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let small_shape = [if keep_h { h } else { 1 }, if keep_w { w } else { 1 }, c];
        let small = Tensor::from_fn(&small_shape, |_| rng.random::<f64>() - 0.5)
            .with_requires_grad(true);
        let big = Tensor::from_fn(&[h, w, c], |_| rng.random::<f64>() - 0.5);

        let loss = small.mul(&big).unwrap().sum().unwrap();
        loss.backward().unwrap();
        let got = small.grad().unwrap();

        // explicit tiling of the small operand
        let mut want = vec![0.0f64; small.numel()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let sy = if keep_h { y } else { 0 };
                    let sx = if keep_w { x } else { 0 };
                    want[(sy * small_shape[1] + sx) * c + ch] += big.at(&[y, x, ch]);
                }
            }
        }
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    /// detokenize(tokenize(x)) is the identity, bit for bit.
    #[test]
    fn tokenize_roundtrip(map in map_strategy(8, 6)) {
        let back = detokenize(&tokenize(&map).unwrap()).unwrap();
        prop_assert_eq!(back.data(), map.data());
    }

    /// window merge is the exact inverse of window partition.
    #[test]
    fn window_roundtrip(
        (gh, gw, m, c, seed) in (1usize..4, 1usize..4, 1usize..4, 1usize..4, any::<u64>()),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let map = Tensor::<f64>::from_fn(&[gh * m, gw * m, c], |_| rng.random());
        let windows = window_partition(&map, m).unwrap();
        prop_assert_eq!(windows.len(), gh * gw);
        let back = window_merge(&windows, (gh, gw)).unwrap();
        prop_assert_eq!(back.data(), map.data());
    }

    /// softmax rows are probability simplices for any finite input.
    #[test]
    fn softmax_rows_normalize(
        (rows, cols, seed) in (1usize..6, 1usize..8, any::<u64>()),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[rows, cols], |_| rng.random::<f64>() * 20.0 - 10.0);
        let y = x.softmax(1).unwrap();
        for r in 0..rows {
            let mut sum = 0.0;
            for j in 0..cols {
                let v = y.at(&[r, j]);
                prop_assert!(v >= 0.0);
                sum += v;
            }
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    /// PPM round trips stay within the 8-bit quantization bound.
    #[test]
    fn ppm_quantization_bound(
        (h, w, seed) in (1usize..8, 1usize..8, any::<u64>()),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::from_fn(&[h, w, 3], |_| rng.random());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        hylog::data::save_image(&path, &img).unwrap();
        let back = hylog::data::load_image(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    /// The closed-form local MAC count always equals brute-force window
    /// enumeration, and the hybrid/standard ratio is 1/g^2 + 1/N_g^2.
    #[test]
    fn mac_counts_match_enumeration(
        (gh, m, c, s) in (1usize..6, 1usize..6, 1usize..32, 1usize..4),
    ) {
        let side = gh * m * 2 * s; // divisible by grid and reduction
        let fm = FlopModel {
            h: side,
            w: side,
            c,
            grid_per_side: gh,
            token_reduction: s * s,
            heads: 4,
        };
        let local = attention_macs(BlockKind::Local, &fm).unwrap();
        prop_assert_eq!(local, local_macs_by_window_enumeration(&fm).unwrap());

        let hybrid = attention_macs(BlockKind::Hybrid, &fm).unwrap();
        let standard = attention_macs(BlockKind::Vit, &fm).unwrap();
        let g2 = (gh * gh) as u128;
        let ng2 = (s * s * s * s) as u128;
        // hybrid / standard == 1/g^2 + 1/N_g^2, cross-multiplied
        prop_assert_eq!(hybrid * g2 * ng2, standard * (ng2 + g2));
    }
}
