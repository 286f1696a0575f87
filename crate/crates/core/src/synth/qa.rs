use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{grade_scene, region_contains_exudate, Point, Region, RegionKind, Scene};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QType {
    Main,
    SubWhole,
    SubMacula,
    SubRegion,
    IndRegion,
}

impl QType {
    pub const ALL: [QType; 5] = [
        QType::Main,
        QType::SubWhole,
        QType::SubMacula,
        QType::SubRegion,
        QType::IndRegion,
    ];

    pub fn is_sub(self) -> bool {
        matches!(self, QType::SubWhole | QType::SubMacula | QType::SubRegion)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QType::Main => "main",
            QType::SubWhole => "sub_whole",
            QType::SubMacula => "sub_macula",
            QType::SubRegion => "sub_region",
            QType::IndRegion => "ind_region",
        }
    }
}

/// Answer set, in index order.
pub const ANSWERS: [&str; 5] = ["no", "yes", "grade0", "grade1", "grade2"];
pub const ANSWER_NO: usize = 0;
pub const ANSWER_YES: usize = 1;

pub fn grade_answer(grade: u8) -> usize {
    2 + grade as usize
}

pub fn yes_no(b: bool) -> usize {
    if b {
        ANSWER_YES
    } else {
        ANSWER_NO
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub qa_id: u64,
    pub scene_id: u64,
    pub question_tokens: Vec<String>,
    pub qtype: QType,
    pub region: Region,
    pub answer: usize,
    pub related_main: Option<u64>,
}

/// Per-scene question counts. One main, one whole and one macula question
/// are always emitted; region counts are drawn as `floor(mean)` plus a
/// Bernoulli draw on the fractional part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaConfig {
    pub sub_region_mean: f64,
    pub ind_region_mean: f64,
    /// Region radius range as a multiple of the macular radius.
    pub region_radius_factor: (f64, f64),
}

impl Default for QaConfig {
    // Per scene: 1 main, 2 + 2.864 sub, 16.864 ind  ->  4.4% / 21.4% / 74.2%.
    fn default() -> Self {
        let per_scene = 1.0 / 0.044;
        Self {
            sub_region_mean: 0.214 * per_scene - 2.0,
            ind_region_mean: 0.742 * per_scene,
            region_radius_factor: (0.6, 2.0),
        }
    }
}

impl QaConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.region_radius_factor;
        if !(self.sub_region_mean >= 0.0 && self.ind_region_mean >= 0.0) {
            return Err(Error::Config("region question means must be non-negative".into()));
        }
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config("region_radius_factor must satisfy 0 < min <= max".into()));
        }
        Ok(())
    }
}

pub fn question_tokens(qtype: QType) -> Vec<String> {
    let text = match qtype {
        QType::Main => "what is the dme risk grade",
        QType::SubWhole => "are there hard exudates in this image",
        QType::SubMacula => "are there hard exudates in the macula",
        QType::SubRegion | QType::IndRegion => "are there hard exudates in this region",
    };
    text.split_whitespace().map(str::to_string).collect()
}

/// Recomputes the ground-truth answer of a question from scene geometry.
pub fn answer_for(scene: &Scene, qtype: QType, region: &Region) -> usize {
    match qtype {
        QType::Main => grade_answer(grade_scene(scene)),
        _ => yes_no(region_contains_exudate(scene, region)),
    }
}

fn draw_count<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> usize {
    let base = mean.floor();
    base as usize + usize::from(rng.random::<f64>() < mean - base)
}

/// Questions for one scene; `next_id` supplies consecutive qa ids.
pub fn build_qa<R: Rng + ?Sized>(
    scene: &Scene,
    config: &QaConfig,
    next_id: &mut u64,
    rng: &mut R,
) -> Result<Vec<QARecord>> {
    config.validate()?;
    let mut records = Vec::new();
    let mut push = |qtype: QType, region: Region, related_main: Option<u64>| {
        let qa_id = *next_id;
        *next_id += 1;
        records.push(QARecord {
            qa_id,
            scene_id: scene.scene_id,
            question_tokens: question_tokens(qtype),
            qtype,
            region,
            answer: answer_for(scene, qtype, &region),
            related_main,
        });
        qa_id
    };
    let whole = Region::whole(scene.width, scene.height);
    let main_id = push(QType::Main, whole, None);
    push(QType::SubWhole, whole, Some(main_id));
    push(QType::SubMacula, Region::macula(scene), Some(main_id));

    let (flo, fhi) = config.region_radius_factor;
    let r = scene.macula_radius;
    let radius = |rng: &mut R| {
        if fhi > flo {
            r * rng.random_range(flo..=fhi)
        } else {
            r * flo
        }
    };
    for _ in 0..draw_count(rng, config.sub_region_mean) {
        let rad = radius(rng);
        push(QType::SubRegion, Region::custom(scene.fovea_center, rad), Some(main_id));
    }
    for _ in 0..draw_count(rng, config.ind_region_mean) {
        let center = Point::new(
            rng.random_range(0..scene.width) as f64,
            rng.random_range(0..scene.height) as f64,
        );
        let rad = radius(rng);
        push(QType::IndRegion, Region::custom(center, rad), None);
    }
    Ok(records)
}

/// Checks a record against its scene: answer, region kind, relation link.
pub fn verify_record(scene: &Scene, rec: &QARecord, main_scene: Option<u64>) -> Result<()> {
    let fail = |reason: String| {
        Err(Error::Integrity {
            qa_id: rec.qa_id,
            reason,
        })
    };
    if rec.scene_id != scene.scene_id {
        return fail(format!("record scene {} != {}", rec.scene_id, scene.scene_id));
    }
    let expected = answer_for(scene, rec.qtype, &rec.region);
    if rec.answer != expected {
        return fail(format!("stored answer {} but geometry gives {}", rec.answer, expected));
    }
    match rec.qtype {
        QType::Main | QType::SubWhole if rec.region.kind != RegionKind::Whole => {
            return fail("question over the whole image has a non-whole region".into());
        }
        QType::SubMacula
            if rec.region.kind != RegionKind::Macula
                || rec.region.center != scene.fovea_center
                || rec.region.radius != scene.macula_radius =>
        {
            return fail("macula question region differs from the macular circle".into());
        }
        _ => {}
    }
    match (rec.qtype.is_sub(), rec.related_main, main_scene) {
        (true, Some(_), Some(s)) if s == rec.scene_id => Ok(()),
        (true, Some(m), Some(s)) => fail(format!("related main {m} belongs to scene {s}")),
        (true, Some(m), None) => fail(format!("related main {m} is not a main question")),
        (true, None, _) => fail("sub-question without related main".into()),
        (false, Some(m), _) => fail(format!("{} record linked to main {m}", rec.qtype.as_str())),
        (false, None, _) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::super::scene::{generate_scene, Blob, GenConfig};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grade_zero_scene_answers() {
        let cfg = GenConfig {
            exudate_count: (0, 0),
            ..GenConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scene = generate_scene(&cfg, 0, &mut rng).unwrap();
        let mut id = 0;
        let recs = build_qa(&scene, &QaConfig::default(), &mut id, &mut rng).unwrap();
        assert_eq!(recs[0].answer, grade_answer(0));
        assert!(recs.iter().filter(|r| r.qtype != QType::Main).all(|r| r.answer == ANSWER_NO));
    }

    #[test]
    fn grade_two_scene_macula_yes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = GenConfig {
            grade_targets: [0.0, 0.0, 1.0],
            ..GenConfig::default()
        };
        for k in 0..20 {
            let scene = generate_scene(&cfg, k, &mut rng).unwrap();
            let mut id = 0;
            let recs = build_qa(&scene, &QaConfig::default(), &mut id, &mut rng).unwrap();
            let mac = recs.iter().find(|r| r.qtype == QType::SubMacula).unwrap();
            assert_eq!(mac.answer, ANSWER_YES);
            assert_eq!(recs[0].answer, grade_answer(2));
        }
    }

    #[test]
    fn structure_of_scene_questions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = generate_scene(&GenConfig::default(), 5, &mut rng).unwrap();
        let mut id = 100;
        let recs = build_qa(&scene, &QaConfig::default(), &mut id, &mut rng).unwrap();
        assert_eq!(recs.iter().filter(|r| r.qtype == QType::Main).count(), 1);
        assert_eq!(recs.iter().filter(|r| r.qtype == QType::SubWhole).count(), 1);
        assert_eq!(recs.iter().filter(|r| r.qtype == QType::SubMacula).count(), 1);
        let main_id = recs[0].qa_id;
        assert_eq!(main_id, 100);
        for r in &recs {
            verify_record(&scene, r, Some(scene.scene_id)).unwrap();
            match r.qtype {
                QType::Main | QType::IndRegion => assert!(r.related_main.is_none()),
                _ => assert_eq!(r.related_main, Some(main_id)),
            }
            if r.qtype == QType::SubRegion {
                assert_eq!(r.region.center, scene.fovea_center);
            }
        }
        assert_eq!(id, 100 + recs.len() as u64);
    }

    #[test]
    fn tampered_answer_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut scene = generate_scene(&GenConfig::default(), 5, &mut rng).unwrap();
        scene.exudates = vec![Blob {
            center: Point::new(1.0, 1.0),
            radius: 1.0,
            intensity: 0.9,
        }];
        let mut id = 0;
        let mut recs = build_qa(&scene, &QaConfig::default(), &mut id, &mut rng).unwrap();
        recs[1].answer = ANSWER_NO;
        let err = verify_record(&scene, &recs[1], Some(5)).unwrap_err();
        assert!(matches!(err, Error::Integrity { qa_id: 1, .. }));
    }
}
