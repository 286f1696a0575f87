use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel coordinate; pixel `(x, y)` sits at exactly `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(self, other: Point) -> f64 {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy
    }

    pub fn dist(self, other: Point) -> f64 {
        self.dist2(other).sqrt()
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// A hard exudate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: Point,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub width: u32,
    pub height: u32,
    pub fovea_center: Point,
    pub disc_center: Point,
    pub disc_diameter: f64,
    /// Radius of the macular circle; always equal to `disc_diameter`.
    pub macula_radius: f64,
    pub exudates: Vec<Blob>,
    pub background_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Whole,
    Macula,
    Custom,
}

/// Circular image region a question refers to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: Point,
    pub radius: f64,
    pub kind: RegionKind,
}

impl Region {
    /// Circle around the image center reaching every corner.
    pub fn whole(width: u32, height: u32) -> Self {
        let (w, h) = (f64::from(width), f64::from(height));
        Self {
            center: Point::new((w - 1.0) / 2.0, (h - 1.0) / 2.0),
            radius: w.hypot(h),
            kind: RegionKind::Whole,
        }
    }

    pub fn macula(scene: &Scene) -> Self {
        Self {
            center: scene.fovea_center,
            radius: scene.macula_radius,
            kind: RegionKind::Macula,
        }
    }

    pub fn custom(center: Point, radius: f64) -> Self {
        Self {
            center,
            radius,
            kind: RegionKind::Custom,
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        self.kind == RegionKind::Whole || p.dist2(self.center) <= self.radius * self.radius
    }
}

/// Procedural scene parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    /// Optic-disc diameter range as a fraction of the image width.
    pub disc_diameter_frac: (f64, f64),
    /// Inclusive exudate count range for grade 1 and 2 scenes.
    pub exudate_count: (u32, u32),
    /// Target probabilities of grades 0, 1, 2.
    pub grade_targets: [f64; 3],
    pub blob_radius: (f64, f64),
    pub blob_intensity: (f64, f64),
    /// Exudate centers avoid the band `R +- margin` around the macular circle.
    pub boundary_margin: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            channels: 1,
            disc_diameter_frac: (0.125, 0.1875),
            exudate_count: (1, 5),
            grade_targets: [1.0 / 3.0; 3],
            blob_radius: (1.0, 2.5),
            blob_intensity: (0.75, 1.0),
            boundary_margin: 1.5,
        }
    }
}

/// Brightest possible background pixel.
pub const BACKGROUND_CEILING: f64 = 0.4;
/// Dimmest possible exudate pixel.
pub const EXUDATE_FLOOR: f64 = 0.7;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width < 16 || self.height < 16 || self.channels == 0 {
            return bad("image must be at least 16x16 with a positive channel count");
        }
        let (dmin, dmax) = self.disc_diameter_frac;
        if !(dmin > 0.0 && dmin <= dmax && dmax < 0.5) {
            return bad("disc_diameter_frac must satisfy 0 < min <= max < 0.5");
        }
        if self.exudate_count.0 > self.exudate_count.1 {
            return bad("exudate_count range is empty");
        }
        if self.grade_targets.iter().any(|&t| !(t >= 0.0) || !t.is_finite())
            || self.grade_targets.iter().sum::<f64>() <= 0.0
        {
            return bad("grade_targets must be non-negative with a positive sum");
        }
        let (rmin, rmax) = self.blob_radius;
        if !(rmin >= 1.0 && rmin <= rmax) {
            return bad("blob_radius must satisfy 1 <= min <= max");
        }
        let (imin, imax) = self.blob_intensity;
        if !(imin >= EXUDATE_FLOOR && imin <= imax && imax <= 1.0) {
            return bad("blob_intensity must lie in [0.7, 1]");
        }
        if !(self.boundary_margin >= 0.0) {
            return bad("boundary_margin must be non-negative");
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn int_in<R: Rng + ?Sized>(rng: &mut R, lo: i64, hi: i64) -> f64 {
    rng.random_range(lo..=hi) as f64
}

fn sample_grade<R: Rng + ?Sized>(rng: &mut R, targets: &[f64; 3]) -> u8 {
    let total: f64 = targets.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (g, &t) in targets.iter().enumerate() {
        if u < t {
            return g as u8;
        }
        u -= t;
    }
    targets.iter().rposition(|&t| t > 0.0).unwrap_or(0) as u8
}

/// Draws a scene whose grade is sampled from `grade_targets`; blob placement
/// then realizes that grade exactly.
pub fn generate_scene<R: Rng + ?Sized>(config: &GenConfig, scene_id: u64, rng: &mut R) -> Result<Scene> {
    config.validate()?;
    let (w, h) = (i64::from(config.width), i64::from(config.height));
    let disc_diameter = (uniform(rng, config.disc_diameter_frac) * w as f64).round().max(2.0);
    let r = disc_diameter;
    let ri = r.ceil() as i64;
    let offset = (2.0 * disc_diameter).round() as i64;
    let half_disc = (disc_diameter / 2.0).ceil() as i64;

    // Fovea x range such that the disc (offset horizontally by 2 D) stays inside.
    let side_range = |side: i64| {
        let (mut lo, mut hi) = (ri, w - 1 - ri);
        if side > 0 {
            hi = hi.min(w - 1 - half_disc - offset);
        } else {
            lo = lo.max(half_disc + offset);
        }
        (lo <= hi).then_some((lo, hi))
    };
    let first = if rng.random::<bool>() { 1 } else { -1 };
    let (side, (xlo, xhi)) = side_range(first)
        .map(|rg| (first, rg))
        .or_else(|| side_range(-first).map(|rg| (-first, rg)))
        .ok_or_else(|| Error::Config("image too small for fovea and optic disc".into()))?;
    if ri > h - 1 - ri {
        return Err(Error::Config("image too small for the macular circle".into()));
    }
    let fovea = Point::new(int_in(rng, xlo, xhi), int_in(rng, ri, h - 1 - ri));
    let dy = (disc_diameter / 4.0).floor() as i64;
    let disc_y = (fovea.y as i64 + rng.random_range(-dy..=dy)).clamp(half_disc, h - 1 - half_disc);
    let disc_center = Point::new(fovea.x + (side * offset) as f64, disc_y as f64);

    let grade = if config.exudate_count.1 == 0 {
        0
    } else {
        sample_grade(rng, &config.grade_targets)
    };
    let margin = config.boundary_margin;
    let inside_limit2 = (r - margin).max(0.0).powi(2);
    let outside_limit2 = (r + margin).powi(2);
    let mut exudates = Vec::new();
    if grade > 0 {
        let (cmin, cmax) = config.exudate_count;
        let count = rng.random_range(cmin.max(1)..=cmax.max(1));
        let mut placed = 0;
        let mut attempts = 0;
        while placed < count {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config("could not place exudates; image too small".into()));
            }
            let center = Point::new(int_in(rng, 1, w - 2), int_in(rng, 1, h - 2));
            let d2 = center.dist2(fovea);
            let ok = match (grade, placed) {
                (2, 0) => d2 <= inside_limit2,
                (2, _) => d2 <= inside_limit2 || d2 > outside_limit2,
                _ => d2 > outside_limit2,
            };
            if !ok {
                continue;
            }
            exudates.push(Blob {
                center,
                radius: uniform(rng, config.blob_radius),
                intensity: uniform(rng, config.blob_intensity),
            });
            placed += 1;
        }
    }

    let scene = Scene {
        scene_id,
        width: config.width,
        height: config.height,
        fovea_center: fovea,
        disc_center,
        disc_diameter,
        macula_radius: r,
        exudates,
        background_seed: rng.random(),
    };
    debug_assert_eq!(grade_scene(&scene), grade);
    Ok(scene)
}

/// DME grade: 0 without exudates, 2 if any exudate center lies within the
/// macular circle, 1 otherwise.
pub fn grade_scene(scene: &Scene) -> u8 {
    if scene.exudates.is_empty() {
        0
    } else if region_contains_exudate(scene, &Region::macula(scene)) {
        2
    } else {
        1
    }
}

/// Whether any exudate center lies inside `region`.
pub fn region_contains_exudate(scene: &Scene, region: &Region) -> bool {
    scene.exudates.iter().any(|b| region.contains(b.center))
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Config(format!("scene {}: {reason}", self.scene_id)));
        if self.macula_radius != self.disc_diameter {
            return fail("macula radius differs from disc diameter".into());
        }
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        let f = self.fovea_center;
        let r = self.macula_radius;
        if f.x < r || f.y < r || w - 1.0 - f.x < r || h - 1.0 - f.y < r {
            return fail(format!("fovea {f:?} closer than {r} to a border"));
        }
        for b in &self.exudates {
            let c = b.center;
            if c.x < 0.0 || c.y < 0.0 || c.x > w - 1.0 || c.y > h - 1.0 {
                return fail(format!("exudate center {c:?} out of bounds"));
            }
            if b.radius < 1.0 {
                return fail(format!("exudate radius {} below 1", b.radius));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scene_with(blobs: &[(f64, f64)]) -> Scene {
        Scene {
            scene_id: 0,
            width: 64,
            height: 64,
            fovea_center: Point::new(32.0, 32.0),
            disc_center: Point::new(12.0, 32.0),
            disc_diameter: 10.0,
            macula_radius: 10.0,
            exudates: blobs
                .iter()
                .map(|&(x, y)| Blob {
                    center: Point::new(x, y),
                    radius: 1.5,
                    intensity: 0.9,
                })
                .collect(),
            background_seed: 0,
        }
    }

    #[test]
    fn grading_rule() {
        assert_eq!(grade_scene(&scene_with(&[])), 0);
        assert_eq!(grade_scene(&scene_with(&[(47.0, 32.0)])), 1);
        assert_eq!(grade_scene(&scene_with(&[(47.0, 32.0), (37.0, 32.0)])), 2);
        // exactly on the circle counts as inside
        assert_eq!(grade_scene(&scene_with(&[(42.0, 32.0)])), 2);
    }

    #[test]
    fn region_queries() {
        let empty = scene_with(&[]);
        let whole = Region::whole(64, 64);
        assert!(!region_contains_exudate(&empty, &whole));
        assert!(!region_contains_exudate(&empty, &Region::custom(Point::new(5.0, 5.0), 60.0)));
        let one = scene_with(&[(60.0, 50.0)]);
        assert!(region_contains_exudate(&one, &whole));
        assert!(region_contains_exudate(&one, &Region::custom(Point::new(50.0, 50.0), 20.0)));
        assert!(!region_contains_exudate(&one, &Region::custom(Point::new(50.0, 50.0), 9.9)));
    }

    #[test]
    fn zero_exudate_config() {
        let cfg = GenConfig {
            exudate_count: (0, 0),
            ..GenConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in 0..50 {
            assert!(generate_scene(&cfg, id, &mut rng).unwrap().exudates.is_empty());
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = GenConfig::default();
        let a = generate_scene(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = generate_scene(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generated_scenes_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (id, size) in [(0, 64), (1, 32), (2, 128), (3, 64)] {
            let cfg = GenConfig {
                width: size,
                height: size,
                ..GenConfig::default()
            };
            for k in 0..100 {
                generate_scene(&cfg, id * 1000 + k, &mut rng).unwrap().validate().unwrap();
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cases = [
            GenConfig { width: 0, ..GenConfig::default() },
            GenConfig { exudate_count: (3, 1), ..GenConfig::default() },
            GenConfig { grade_targets: [0.0; 3], ..GenConfig::default() },
            GenConfig { channels: 0, ..GenConfig::default() },
        ];
        for cfg in cases {
            assert!(matches!(generate_scene(&cfg, 0, &mut rng), Err(Error::Config(_))));
        }
    }
}
