mod common;

use common::{brute_force_sq_edt, random_mask};
use consent::image::GrayImage;
use consent::morphology::{
    distance_transform, skeletonize, squared_distance_transform, thickness, vote, BinaryMask, ImageThicknessStats,
    SigmaMode, ThicknessProfile,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn edt_matches_brute_force_on_100_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let w = rng.random_range(1..=32);
        let h = rng.random_range(1..=32);
        let density = rng.random_range(0.3..0.98);
        let mask = random_mask(&mut rng, w, h, density);
        assert_eq!(squared_distance_transform(&mask), brute_force_sq_edt(&mask));
    }
}

#[test]
fn edt_of_3x3_block() {
    let full = BinaryMask::from_ascii(&["###", "###", "###"]);
    let d = distance_transform(&full);
    assert_eq!(d.data, vec![1., 1., 1., 1., 2., 1., 1., 1., 1.]);
}

/// Textbook Zhang-Suen over a zero-padded integer grid, written independently of
/// the library routine.
fn textbook_zhang_suen(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut img = vec![vec![0u8; w + 2]; h + 2];
    for y in 0..h {
        for x in 0..w {
            img[y + 1][x + 1] = mask.get(x as u32, y as u32) as u8;
        }
    }
    loop {
        let mut changed = false;
        for step in 0..2 {
            let mut marked = Vec::new();
            for i in 1..=h {
                for j in 1..=w {
                    if img[i][j] != 1 {
                        continue;
                    }
                    let p2 = img[i - 1][j];
                    let p3 = img[i - 1][j + 1];
                    let p4 = img[i][j + 1];
                    let p5 = img[i + 1][j + 1];
                    let p6 = img[i + 1][j];
                    let p7 = img[i + 1][j - 1];
                    let p8 = img[i][j - 1];
                    let p9 = img[i - 1][j - 1];
                    let seq = [p2, p3, p4, p5, p6, p7, p8, p9, p2];
                    let b = p2 + p3 + p4 + p5 + p6 + p7 + p8 + p9;
                    let a = seq.windows(2).filter(|s| s[0] == 0 && s[1] == 1).count();
                    let (c1, c2) = if step == 0 {
                        (p2 * p4 * p6, p4 * p6 * p8)
                    } else {
                        (p2 * p4 * p8, p2 * p6 * p8)
                    };
                    if (2..=6).contains(&b) && a == 1 && c1 == 0 && c2 == 0 {
                        marked.push((i, j));
                    }
                }
            }
            changed |= !marked.is_empty();
            for (i, j) in marked {
                img[i][j] = 0;
            }
        }
        if !changed {
            break;
        }
    }
    let bits = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| img[y + 1][x + 1] == 1)
        .collect();
    BinaryMask::from_bits(mask.width, mask.height, bits).unwrap()
}

fn bar_mask() -> BinaryMask {
    // 3-wide x 10-tall bar inside a 2-pixel background margin
    let mut m = BinaryMask::new(7, 14);
    for y in 2..12 {
        for x in 2..5 {
            m.bits[y * 7 + x] = true;
        }
    }
    m
}

#[test]
fn bar_skeleton_matches_textbook_oracle() {
    let bar = bar_mask();
    let skel = skeletonize(&bar);
    assert_eq!(skel, textbook_zhang_suen(&bar));
    assert!(skel.count() > 0);
}

#[test]
fn random_masks_match_textbook_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..40 {
        let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
        let m = random_mask(&mut rng, w, h, 0.6);
        assert_eq!(skeletonize(&m), textbook_zhang_suen(&m));
    }
}

#[test]
fn bar_thickness_is_two() {
    let bar = bar_mask();
    // the oracle distance at every oracle-skeleton pixel
    let sq = brute_force_sq_edt(&bar);
    let skel = textbook_zhang_suen(&bar);
    let expected: Vec<f64> = skel
        .bits
        .iter()
        .zip(&sq)
        .filter(|(&s, _)| s)
        .map(|(_, &d)| (d as f64).sqrt())
        .collect();
    assert!(expected.iter().all(|&d| d == 2.0), "oracle samples {expected:?}");

    let patch = GrayImage::from_raw(7, 14, bar.bits.iter().map(|&b| if b { 10 } else { 240 }).collect()).unwrap();
    let p = thickness(&patch);
    assert_eq!(p.samples, expected);
    assert_eq!(p.mean(), Some(2.0));
}

#[test]
fn blank_patch_gives_empty_profile() {
    assert!(thickness(&GrayImage::filled(12, 9, 255)).is_empty());
}

fn profile(word: usize, samples: Vec<f64>) -> ThicknessProfile {
    ThicknessProfile {
        word,
        samples,
        degenerate: false,
    }
}

#[test]
fn one_thick_word_among_nine_thin_is_bold() {
    let mut profiles: Vec<_> = (0..9).map(|i| profile(i, vec![2.0; 10])).collect();
    profiles.push(profile(9, vec![5.0; 10]));
    let stats = ImageThicknessStats::new(profiles, SigmaMode::Pooled).unwrap();
    // pooled: ninety 2s and ten 5s -> median 2, mean 2.3, population sigma 0.9
    assert_eq!(stats.median, 2.0);
    assert!((stats.sigma - 0.9).abs() < 1e-12);
    let labels = vote(&stats, 1.0);
    assert_eq!(labels, [vec![0; 9], vec![1]].concat());
}

fn arb_profiles() -> impl Strategy<Value = Vec<Vec<f64>>> {
    // samples on a 1/4 grid keep sums exact
    proptest::collection::vec(
        proptest::collection::vec((4u32..40).prop_map(|q| q as f64 / 4.0), 1..12),
        1..10,
    )
}

fn stats_of(words: &[Vec<f64>]) -> ImageThicknessStats {
    let profiles = words.iter().enumerate().map(|(i, s)| profile(i, s.clone())).collect();
    ImageThicknessStats::new(profiles, SigmaMode::Pooled).unwrap()
}

proptest! {
    #[test]
    fn edt_property_matches_oracle(w in 1u32..=20, h in 1u32..=20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, w, h, 0.7);
        prop_assert_eq!(squared_distance_transform(&m), brute_force_sq_edt(&m));
    }

    #[test]
    fn skeleton_subset_and_idempotent(w in 1u32..=20, h in 1u32..=20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, w, h, 0.65);
        let s = skeletonize(&m);
        prop_assert!(s.is_subset_of(&m));
        prop_assert_eq!(skeletonize(&s), s);
    }

    #[test]
    fn vote_shift_invariant(words in arb_profiles(), shift in 0u32..16) {
        let c = shift as f64 / 4.0;
        let base = stats_of(&words);
        let shifted_words: Vec<Vec<f64>> = words.iter().map(|w| w.iter().map(|v| v + c).collect()).collect();
        let shifted = stats_of(&shifted_words);
        // skip draws that sit on the decision boundary up to rounding
        let thr = base.threshold(1.0);
        prop_assume!(base.profiles.iter().all(|p| (p.mean().unwrap() - thr).abs() > 1e-9));
        prop_assert_eq!(vote(&base, 1.0), vote(&shifted, 1.0));
    }

    #[test]
    fn alpha_zero_is_mean_above_median(words in arb_profiles()) {
        let stats = stats_of(&words);
        let expected: Vec<u8> = stats.profiles.iter().map(|p| (p.mean().unwrap() > stats.median) as u8).collect();
        prop_assert_eq!(vote(&stats, 0.0), expected);
    }

    #[test]
    fn raising_alpha_never_adds_bold(words in arb_profiles(), a in 0.0f64..3.0, da in 0.0f64..3.0) {
        let stats = stats_of(&words);
        let lo = vote(&stats, a);
        let hi = vote(&stats, a + da);
        prop_assert!(lo.iter().zip(&hi).all(|(l, h)| h <= l));
        prop_assert!(vote(&stats, f64::INFINITY).iter().all(|&l| l == 0));
    }
}
