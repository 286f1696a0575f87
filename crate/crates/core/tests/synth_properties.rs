use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use consvqa::synth::{
    build_qa, generate_scene, grade_scene, rasterize, region_contains_exudate, GenConfig, QType, QaConfig,
    Region, Scene, BACKGROUND_CEILING, EXUDATE_FLOOR,
};

fn within(scene: &Scene, cx: f64, cy: f64, r: f64) -> bool {
    scene.exudates.iter().any(|b| (b.center.x - cx).powi(2) + (b.center.y - cy).powi(2) <= r * r)
}

fn oracle_grade(scene: &Scene) -> u8 {
    match (scene.exudates.is_empty(), within(scene, scene.fovea_center.x, scene.fovea_center.y, scene.macula_radius)) {
        (true, _) => 0,
        (false, true) => 2,
        (false, false) => 1,
    }
}

#[test]
fn balanced_grades_over_many_draws() {
    let cfg = GenConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let mut counts = [0usize; 3];
    for id in 0..10_000 {
        let scene = generate_scene(&cfg, id, &mut rng).unwrap();
        let g = oracle_grade(&scene);
        assert_eq!(g, grade_scene(&scene));
        counts[g as usize] += 1;
    }
    for c in counts {
        let pct = c as f64 / 100.0;
        assert!((28.3..=38.3).contains(&pct), "{counts:?}");
    }
}

#[test]
fn skewed_targets_are_followed() {
    let cfg = GenConfig { grade_targets: [0.6, 0.3, 0.1], ..GenConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut counts = [0usize; 3];
    for id in 0..4000 {
        counts[grade_scene(&generate_scene(&cfg, id, &mut rng).unwrap()) as usize] += 1;
    }
    for (c, t) in counts.iter().zip(cfg.grade_targets) {
        assert!((*c as f64 / 4000.0 - t).abs() < 0.05, "{counts:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grading_agrees_with_region_answers(seed in any::<u64>(), size in prop::sample::select(vec![32u32, 64, 96])) {
        let cfg = GenConfig { width: size, height: size, ..GenConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = generate_scene(&cfg, seed % 1000, &mut rng).unwrap();
        scene.validate().unwrap();
        let grade = grade_scene(&scene);
        prop_assert_eq!(grade, oracle_grade(&scene));
        prop_assert_eq!(grade == 2, region_contains_exudate(&scene, &Region::macula(&scene)));
        prop_assert_eq!(grade == 0, !region_contains_exudate(&scene, &Region::whole(size, size)));
    }

    #[test]
    fn questions_follow_geometry(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = generate_scene(&GenConfig::default(), 7, &mut rng).unwrap();
        let mut next = 100;
        let recs = build_qa(&scene, &QaConfig::default(), &mut next, &mut rng).unwrap();
        prop_assert_eq!(next, 100 + recs.len() as u64);
        let main = recs.iter().find(|r| r.qtype == QType::Main).unwrap();
        prop_assert_eq!(recs.iter().filter(|r| r.qtype == QType::Main).count(), 1);
        prop_assert_eq!(main.answer, 2 + oracle_grade(&scene) as usize);
        for r in &recs {
            prop_assert_eq!(r.scene_id, scene.scene_id);
            prop_assert_eq!(r.related_main.is_some(), r.qtype.is_sub());
            if let Some(m) = r.related_main {
                prop_assert_eq!(m, main.qa_id);
            }
            if !matches!(r.qtype, QType::Main | QType::SubWhole) {
                let yes = within(&scene, r.region.center.x, r.region.center.y, r.region.radius);
                prop_assert_eq!(r.answer, usize::from(yes));
            }
        }
    }

    #[test]
    fn exudates_outshine_background(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = generate_scene(&GenConfig::default(), 3, &mut rng).unwrap();
        let img = rasterize(&scene, 1);
        for b in &scene.exudates {
            let (x, y) = (b.center.x.round() as u32, b.center.y.round() as u32);
            prop_assert!(f64::from(img.get(0, x, y)) >= EXUDATE_FLOOR);
        }
        if scene.exudates.is_empty() {
            let disc = scene.disc_center;
            let r = scene.disc_diameter / 2.0 + 1.0;
            for y in 0..img.height {
                for x in 0..img.width {
                    let d2 = (f64::from(x) - disc.x).powi(2) + (f64::from(y) - disc.y).powi(2);
                    if d2 > r * r {
                        prop_assert!(f64::from(img.get(0, x, y)) <= BACKGROUND_CEILING + 1e-6);
                    }
                }
            }
        }
    }
}
