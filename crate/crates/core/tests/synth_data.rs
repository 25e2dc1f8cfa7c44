use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use consent::synth::{
    generate_dataset, generate_images, generate_rps, load_dataset, plan_dataset, render_view, rps_targets, NoiseConfig,
    Pose, RpsConfig, Split, SynthConfig,
};
use consent::Error;

fn small(images: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        images,
        words_mean: 10.0,
        words_std: 5.0,
        words_max: 24,
        glyphs_per_word: [3, 6],
        line_width: [400.0, 700.0],
        ..SynthConfig::default()
    }
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn same_seed_gives_identical_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small(8, 5), a.path()).unwrap();
    generate_dataset(&small(8, 5), b.path()).unwrap();
    let (x, y) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(x.len(), 9);
    assert_eq!(x, y);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&small(8, 6), c.path()).unwrap();
    assert_ne!(x, dir_bytes(c.path()));
}

#[test]
fn serial_rendering_matches_parallel_generation() {
    let cfg = small(5, 9);
    let all = generate_images(&cfg).unwrap();
    let plan = plan_dataset(&cfg).unwrap();
    for i in (0..5).rev() {
        assert_eq!(render_view(&cfg, &plan, i), all[i]);
    }
}

#[test]
fn bold_ratio_over_a_thousand_images() {
    let plan = plan_dataset(&SynthConfig {
        images: 1000,
        ..SynthConfig::default()
    })
    .unwrap();
    let (mut bold, mut total) = (0usize, 0usize);
    for v in &plan.views {
        let g = &plan.groups[v.group];
        bold += g.words.iter().filter(|w| w.bold).count();
        total += g.words.len();
    }
    let ratio = bold as f64 / total as f64;
    assert!((ratio - 0.10).abs() <= 0.02, "bold ratio {ratio}");
}

#[test]
fn zero_bold_ratio_gives_only_plain_words() {
    let imgs = generate_images(&SynthConfig {
        bold_ratio: 0.0,
        ..small(6, 1)
    })
    .unwrap();
    assert!(imgs.iter().all(|i| i.labels().iter().all(|&l| l == 0)));
}

#[test]
fn split_shares_within_two_percent() {
    let plan = plan_dataset(&SynthConfig {
        images: 600,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut counts = [0usize; 3];
    for v in &plan.views {
        counts[match plan.groups[v.group].split {
            Split::Train => 0,
            Split::Test => 1,
            Split::Val => 2,
        }] += 1;
    }
    for (n, share) in counts.iter().zip([0.80, 0.15, 0.05]) {
        let got = *n as f64 / 600.0;
        assert!((got - share).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn bold_words_are_locally_thicker_but_not_globally() {
    let plan = plan_dataset(&SynthConfig {
        images: 300,
        ..SynthConfig::default()
    })
    .unwrap();
    let mut thickest_plain: f64 = 0.0;
    let mut thinnest_bold = f64::INFINITY;
    for g in &plan.groups {
        // strokes in pixels
        let px = |w: &consent::synth::WordPlan| w.stroke * g.scale;
        let plain = g.words.iter().filter(|w| !w.bold).map(px).fold(0.0, f64::max);
        let bold = g.words.iter().filter(|w| w.bold).map(px).fold(f64::INFINITY, f64::min);
        assert!(bold > plain, "group {}: bold {bold} <= plain {plain}", g.index);
        thickest_plain = thickest_plain.max(plain);
        thinnest_bold = thinnest_bold.min(bold);
    }
    assert!(thickest_plain > thinnest_bold);
}

#[test]
fn labels_follow_the_midpoint_rule() {
    for img in generate_images(&small(10, 3)).unwrap() {
        let base = img.base_stroke.unwrap();
        let m = img.bold_multiplier.unwrap();
        for w in &img.words {
            let bold = w.stroke.unwrap() > base * (1.0 + m) / 2.0;
            assert_eq!(bold, w.label == 1);
        }
    }
}

#[test]
fn views_of_a_group_share_a_split() {
    let imgs = generate_images(&small(40, 2)).unwrap();
    let mut split_of: BTreeMap<usize, Split> = BTreeMap::new();
    for i in &imgs {
        let s = *split_of.entry(i.group.unwrap()).or_insert(i.split);
        assert_eq!(s, i.split);
    }
    assert!(split_of.len() < imgs.len(), "some group has several views");
}

#[test]
fn round_trip_and_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        noise: NoiseConfig::none(),
        ..small(3, 4)
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    let originals = generate_images(&cfg).unwrap();
    let reader = load_dataset(dir.path()).unwrap();
    let loaded = reader.load_all().unwrap();
    assert_eq!(loaded, originals);

    let manifest = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();

    fs::remove_file(dir.path().join("img_00001.ppm")).unwrap();
    let reader = load_dataset(dir.path()).unwrap();
    assert!(matches!(reader.load(1), Err(Error::MissingFile(_))));

    fs::write(&manifest, "{\"images\": [").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Json { .. })));

    let mut json: serde_json::Value = serde_json::from_str(&text).unwrap();
    json["images"][0]["words"][0]["box"][2] = serde_json::json!(100_000);
    fs::write(&manifest, json.to_string()).unwrap();
    let reader = load_dataset(dir.path()).unwrap();
    assert!(matches!(reader.load(0), Err(Error::BoxOutOfBounds { .. })));

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(empty.path()), Err(Error::MissingFile(_))));
}

#[test]
fn rps_outcome_table() {
    use Pose::*;
    let table = [
        (Rock, Rock, [0, 0]),
        (Rock, Paper, [0, 1]),
        (Rock, Scissors, [1, 0]),
        (Paper, Rock, [1, 0]),
        (Paper, Paper, [0, 0]),
        (Paper, Scissors, [0, 1]),
        (Scissors, Rock, [0, 1]),
        (Scissors, Paper, [1, 0]),
        (Scissors, Scissors, [0, 0]),
    ];
    for (a, b, want) in table {
        assert_eq!(rps_targets(a, b), want, "{a:?} vs {b:?}");
    }
}

#[test]
fn rps_games_are_labeled_two_element_sequences() {
    let games = generate_rps(&RpsConfig {
        sequences: 100,
        ..RpsConfig::default()
    })
    .unwrap();
    assert_eq!(games.len(), 100);
    let mut seen = std::collections::BTreeSet::new();
    for g in &games {
        assert_eq!(g.words.len(), 2);
        let (a, b) = (g.words[0].pose.unwrap(), g.words[1].pose.unwrap());
        assert_eq!(g.labels(), rps_targets(a, b).to_vec());
        seen.insert(format!("{a:?}{b:?}"));
    }
    assert_eq!(seen.len(), 9);
    let again = generate_rps(&RpsConfig {
        sequences: 100,
        ..RpsConfig::default()
    })
    .unwrap();
    assert_eq!(games, again);
}
