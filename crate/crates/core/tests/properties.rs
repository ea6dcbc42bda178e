mod common;

use common::*;
use geoloc::eval::{fit_whitening, recall_at_k};
use geoloc::mining::{hardest_negative_region, k_reciprocal, GallerySet};
use geoloc::regions::RegionMode;
use geoloc::supervision::hard_loss;
use geoloc::tensor::{entropy, soft_cross_entropy, softmax_temp};
use geoloc::vlad::VladParams;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logits(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution_with_the_same_argmax(v in logits(1..20), tau in 0.03f64..2.0) {
        let p = softmax_temp(&v, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(argmax(&p), argmax(&v));
    }

    #[test]
    fn lower_temperature_never_raises_entropy(v in logits(2..12), a in 0.03f64..1.0, b in 0.03f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let h_lo = entropy(&softmax_temp(&v, lo).unwrap());
        let h_hi = entropy(&softmax_temp(&v, hi).unwrap());
        prop_assert!(h_lo <= h_hi + 1e-12);
    }

    #[test]
    fn cross_entropy_is_at_least_target_entropy(
        (p, t) in (2usize..12).prop_flat_map(|n| (distribution(n), distribution(n)))
    ) {
        let ce = soft_cross_entropy(&p, &t).unwrap();
        prop_assert!(ce >= entropy(&t) - 1e-12);
        prop_assert!((soft_cross_entropy(&t, &t).unwrap() - entropy(&t)).abs() < 1e-12);
    }

    #[test]
    fn hard_loss_matches_likelihood_form(seed in any::<u64>(), n in 1usize..12, d in 2usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_unit(&mut rng, d);
        let p = random_unit(&mut rng, d);
        let negs: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let l = hard_loss(&q, &p, &negs).unwrap();
        prop_assert!((l - hard_loss_direct(&q, &p, &negs)).abs() < 1e-9);
        prop_assert!(l > 0.0);
    }

    #[test]
    fn hard_loss_rises_with_negative_similarity(seed in any::<u64>(), step in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_unit(&mut rng, 6);
        let p = random_unit(&mut rng, 6);
        let n = random_unit(&mut rng, 6);
        let closer: Vec<f64> = n.iter().zip(&q).map(|(a, b)| a + step * b).collect();
        let base = hard_loss(&q, &p, std::slice::from_ref(&n)).unwrap();
        prop_assert!(hard_loss(&q, &p, &[closer]).unwrap() > base);
        let better_p: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a + step * b).collect();
        prop_assert!(hard_loss(&q, &better_p, &[n]).unwrap() < base);
    }

    #[test]
    fn k_reciprocal_matches_brute_force(seed in any::<u64>(), n in 2usize..40, d in 1usize..5, k in 1usize..11) {
        prop_assume!(k < n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // coarse grid values create distance ties
        let grid = |v: Vec<f64>| v.into_iter().map(|x| (x * 3.0).round() / 3.0).collect::<Vec<_>>();
        let gallery: Vec<Vec<f64>> = (0..n).map(|_| grid(random_vec(&mut rng, d))).collect();
        let query = grid(random_vec(&mut rng, d));
        let got = k_reciprocal(&query, &gallery, k).unwrap();
        prop_assert_eq!(got.len(), k);
        prop_assert_eq!(got, brute_k_reciprocal(&query, &gallery, k));
    }

    #[test]
    fn hardest_region_matches_exhaustive_search(seed in any::<u64>(), h in 2usize..6, w in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = VladParams::from_centers(random_vec(&mut rng, 3 * 4), 3, 4, 1.0).unwrap();
        let fm = random_map(&mut rng, 4, h, w);
        let q = random_unit(&mut rng, 12);
        let (id, _, sim) = hardest_negative_region(&q, &fm, &params, RegionMode::All).unwrap();
        let (bid, bsim) = brute_hardest_region(&q, &fm, &params);
        prop_assert_eq!(id, bid);
        prop_assert!((sim - bsim).abs() < 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gallery = GallerySet {
            ids: (0..30).collect(),
            positions: (0..30).map(|i| i as f64 * 10.0).collect(),
            descriptors: (0..30).map(|_| random_unit(&mut rng, 5)).collect(),
        };
        let queries: Vec<Vec<f64>> = (0..20).map(|_| random_unit(&mut rng, 5)).collect();
        let pos: Vec<f64> = (0..20).map(|i| i as f64 * 14.0).collect();
        let r = recall_at_k(&pos, &queries, &gallery, &[1, 3, 5, 10, 30], 25.0).unwrap();
        prop_assert!(r.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(r[4], 1.0);
    }

    #[test]
    fn whitened_covariance_is_identity(seed in any::<u64>(), d in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<Vec<f64>> = (0..(4 * d + 10)).map(|_| random_vec(&mut rng, d)).collect();
        let w = fit_whitening(&xs, d).unwrap();
        let projected: Vec<Vec<f64>> = xs.iter().map(|x| w.project(x).unwrap()).collect();
        let cov = geoloc::eval::covariance(&projected);
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((cov[i][j] - want).abs() < 1e-6);
            }
        }
    }
}
