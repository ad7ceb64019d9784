//! Procedural person and garment sprites.

use serde::{Deserialize, Serialize};
use vton_tensor::GaussianRng;

use crate::error::{Error, Result};
use crate::image::{quantize_rgb, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Silhouette {
    TShirt,
    LongSleeve,
    Vest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pose {
    ArmsDown,
    ArmsOut,
    ArmsRaised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Plain,
    Gradient,
    TwoTone,
}

/// Ranges accepted for [`PersonSpec`] geometry, as fractions of the image.
pub const BODY_WIDTH_RANGE: (f64, f64) = (0.30, 0.44);
pub const BODY_HEIGHT_RANGE: (f64, f64) = (0.28, 0.38);

/// Neutral backdrop of the flat garment image.
pub const GARMENT_BACKDROP: [f64; 3] = [230.0 / 255.0, 230.0 / 255.0, 230.0 / 255.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarmentSpec {
    pub silhouette: Silhouette,
    pub base_color: [f64; 3],
    pub pattern: Pattern,
    pub pattern_color: [f64; 3],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonSpec {
    /// Torso width as a fraction of image width.
    pub body_width: f64,
    /// Torso height as a fraction of image height.
    pub body_height: f64,
    pub pose: Pose,
    pub skin_tone: [f64; 3],
    pub background: Background,
    pub seed: u64,
}

fn color_ok(c: &[f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

impl GarmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !color_ok(&self.base_color) || !color_ok(&self.pattern_color) {
            return Err(Error::Config(format!("garment colors out of [0,1]: {self:?}")));
        }
        Ok(())
    }

    /// Same visual garment: everything except the seed for solid garments,
    /// everything for patterned ones.
    pub fn same_garment(&self, other: &GarmentSpec) -> bool {
        self.silhouette == other.silhouette
            && self.base_color == other.base_color
            && self.pattern == other.pattern
            && (self.pattern == Pattern::Solid || (self.pattern_color == other.pattern_color && self.seed == other.seed))
    }

    pub fn random(rng: &mut GaussianRng) -> Self {
        let silhouette = [Silhouette::TShirt, Silhouette::LongSleeve, Silhouette::Vest][rng.below(3)];
        let pattern = [Pattern::Solid, Pattern::Stripes, Pattern::Dots][rng.below(3)];
        let base_color = quantize_rgb([0.1 + 0.8 * rng.uniform(), 0.1 + 0.8 * rng.uniform(), 0.1 + 0.8 * rng.uniform()]);
        // pattern color contrasts with the base
        let pattern_color = quantize_rgb(base_color.map(|v| if v > 0.5 { v - 0.4 } else { v + 0.4 }));
        Self {
            silhouette,
            base_color,
            pattern,
            pattern_color,
            seed: rng.below(1 << 30) as u64,
        }
    }
}

impl PersonSpec {
    pub fn validate(&self) -> Result<()> {
        let inr = |v: f64, r: (f64, f64)| v >= r.0 && v <= r.1;
        if !inr(self.body_width, BODY_WIDTH_RANGE) || !inr(self.body_height, BODY_HEIGHT_RANGE) {
            return Err(Error::Config(format!(
                "person geometry outside documented ranges: width {} height {}",
                self.body_width, self.body_height
            )));
        }
        if !color_ok(&self.skin_tone) {
            return Err(Error::Config("skin tone out of [0,1]".into()));
        }
        Ok(())
    }

    pub fn random(rng: &mut GaussianRng) -> Self {
        let lerp = |r: (f64, f64), u: f64| r.0 + (r.1 - r.0) * u;
        let tone = 0.35 + 0.55 * rng.uniform();
        Self {
            body_width: lerp(BODY_WIDTH_RANGE, rng.uniform()),
            body_height: lerp(BODY_HEIGHT_RANGE, rng.uniform()),
            pose: [Pose::ArmsDown, Pose::ArmsOut, Pose::ArmsRaised][rng.below(3)],
            skin_tone: quantize_rgb([tone, tone * 0.78, tone * 0.62]),
            background: [Background::Plain, Background::Gradient, Background::TwoTone][rng.below(3)],
            seed: rng.below(1 << 30) as u64,
        }
    }

    fn hair_color(&self) -> [f64; 3] {
        let mut rng = GaussianRng::new(self.seed);
        let v = 0.05 + 0.35 * rng.uniform();
        quantize_rgb([v, v * 0.8, v * 0.6])
    }

    fn pants_color(&self) -> [f64; 3] {
        let mut rng = GaussianRng::with_stream(self.seed, 1);
        quantize_rgb([0.15 + 0.2 * rng.uniform(), 0.15 + 0.2 * rng.uniform(), 0.3 + 0.3 * rng.uniform()])
    }

    fn background_color(&self, y: usize, x: usize, h: usize, w: usize) -> [f64; 3] {
        let mut rng = GaussianRng::with_stream(self.seed, 2);
        let base = [0.55 + 0.4 * rng.uniform(), 0.55 + 0.4 * rng.uniform(), 0.55 + 0.4 * rng.uniform()];
        let c = match self.background {
            Background::Plain => base,
            Background::Gradient => {
                let f = 1.0 - 0.35 * y as f64 / h as f64;
                base.map(|v| v * f)
            }
            Background::TwoTone => {
                if x < w / 2 {
                    base
                } else {
                    base.map(|v| v * 0.8)
                }
            }
        };
        quantize_rgb(c)
    }
}

/// What is visible at a pixel of a rendered person.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Background,
    Legs,
    Skin,
    Hair,
    Garment,
}

#[derive(Clone, Copy, Debug)]
struct Capsule {
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    r: f64,
}

impl Capsule {
    /// Position along the segment in `[0, 1]` if the point is inside.
    fn hit(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (self.bx - self.ax, self.by - self.ay);
        let len2 = dx * dx + dy * dy;
        let t = (((x - self.ax) * dx + (y - self.ay) * dy) / len2).clamp(0.0, 1.0);
        let (px, py) = (self.ax + t * dx, self.ay + t * dy);
        ((x - px).powi(2) + (y - py).powi(2) <= self.r * self.r).then_some(t)
    }
}

/// Pixel-space body geometry derived from a [`PersonSpec`].
#[derive(Clone, Debug)]
struct Layout {
    torso: (f64, f64, f64, f64),
    head: (f64, f64, f64),
    neck: (f64, f64, f64, f64),
    legs: (f64, f64, f64, f64),
    arms: [Capsule; 2],
}

fn layout(p: &PersonSpec, h: usize, w: usize) -> Layout {
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf / 2.0;
    let bw = p.body_width * wf;
    let top = 0.30 * hf;
    let bottom = top + p.body_height * hf;
    let torso = (cx - bw / 2.0, top, cx + bw / 2.0, bottom);
    let head_r = 0.085 * hf;
    let head = (cx, top - 0.045 * hf - head_r, head_r);
    let neck = (cx - 0.05 * wf, top - 0.06 * hf, cx + 0.05 * wf, top + 1.0);
    let legs = (cx - bw * 0.42, bottom, cx + bw * 0.42, 0.97 * hf);
    let r = 0.055 * wf.max(hf * 0.75);
    let arm = |side: f64| {
        let ax = cx + side * (bw / 2.0 - r * 0.5);
        let ay = top + r;
        let (bx, by) = match p.pose {
            Pose::ArmsDown => (ax + side * 0.07 * wf, bottom - 0.02 * hf),
            Pose::ArmsOut => (ax + side * 0.26 * wf, top + 0.16 * hf),
            Pose::ArmsRaised => (ax + side * 0.16 * wf, 0.06 * hf),
        };
        Capsule { ax, ay, bx, by, r }
    };
    Layout {
        torso,
        head,
        neck,
        legs,
        arms: [arm(-1.0), arm(1.0)],
    }
}

fn in_rect(r: (f64, f64, f64, f64), x: f64, y: f64) -> bool {
    x >= r.0 && x < r.2 && y >= r.1 && y < r.3
}

fn sleeve_extent(s: Silhouette) -> f64 {
    match s {
        Silhouette::TShirt => 0.38,
        Silhouette::LongSleeve => 1.0,
        Silhouette::Vest => -1.0,
    }
}

/// Per-pixel labels of `person` wearing a garment of the given silhouette
/// (`None` renders the bare body).
pub fn label_map(person: &PersonSpec, silhouette: Option<Silhouette>, h: usize, w: usize) -> Vec<Label> {
    let lay = layout(person, h, w);
    let sleeve = silhouette.map(sleeve_extent).unwrap_or(-1.0);
    let mut out = vec![Label::Background; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut label = Label::Background;
            if in_rect(lay.legs, px, py) {
                label = Label::Legs;
            }
            if in_rect(lay.torso, px, py) {
                label = if silhouette.is_some() { Label::Garment } else { Label::Skin };
            }
            for arm in &lay.arms {
                if let Some(t) = arm.hit(px, py) {
                    label = if t <= sleeve { Label::Garment } else { Label::Skin };
                }
            }
            if in_rect(lay.neck, px, py) && !(label == Label::Garment && py > lay.torso.1) {
                label = Label::Skin;
            }
            let (hx, hy, hr) = lay.head;
            if (px - hx).powi(2) + (py - hy).powi(2) <= hr * hr {
                label = if py < hy - hr * 0.35 { Label::Hair } else { Label::Skin };
            }
            out[y * w + x] = label;
        }
    }
    out
}

/// Garment color at a pixel, with the pattern anchored at `origin`.
fn garment_color(g: &GarmentSpec, x: usize, y: usize, origin: (usize, usize)) -> [f64; 3] {
    let (lx, ly) = (x as i64 - origin.0 as i64, y as i64 - origin.1 as i64);
    let phase = (g.seed % 4) as i64;
    let on = match g.pattern {
        Pattern::Solid => false,
        Pattern::Stripes => (ly + phase).rem_euclid(6) < 2,
        Pattern::Dots => (lx + phase).rem_euclid(5) < 2 && (ly + phase).rem_euclid(5) < 2,
    };
    if on {
        g.pattern_color
    } else {
        g.base_color
    }
}

fn torso_origin(person: &PersonSpec, h: usize, w: usize) -> (usize, usize) {
    let lay = layout(person, h, w);
    (lay.torso.0.max(0.0) as usize, lay.torso.1 as usize)
}

/// Person wearing `garment`, plus the garment-region mask of that render.
pub fn render_person(person: &PersonSpec, garment: &GarmentSpec, h: usize, w: usize) -> (Image, Vec<bool>) {
    let labels = label_map(person, Some(garment.silhouette), h, w);
    let origin = torso_origin(person, h, w);
    let (skin, hair, pants) = (person.skin_tone, person.hair_color(), person.pants_color());
    let mut img = Image::new(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let c = match labels[y * w + x] {
                Label::Background => person.background_color(y, x, h, w),
                Label::Legs => pants,
                Label::Skin => skin,
                Label::Hair => hair,
                Label::Garment => garment_color(garment, x, y, origin),
            };
            img.set(y, x, c);
        }
    }
    let mask = labels.iter().map(|&l| l == Label::Garment).collect();
    (img, mask)
}

/// Canonical mannequin used for the flat garment image.
fn flat_mannequin() -> PersonSpec {
    PersonSpec {
        body_width: 0.40,
        body_height: 0.36,
        pose: Pose::ArmsOut,
        skin_tone: [0.0; 3],
        background: Background::Plain,
        seed: 0,
    }
}

/// The garment laid flat on a neutral backdrop. Independent of any person.
pub fn render_garment(garment: &GarmentSpec, h: usize, w: usize) -> Image {
    let m = flat_mannequin();
    let labels = label_map(&m, Some(garment.silhouette), h, w);
    let origin = torso_origin(&m, h, w);
    let mut img = Image::new(h, w, GARMENT_BACKDROP);
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] == Label::Garment {
                img.set(y, x, garment_color(garment, x, y, origin));
            }
        }
    }
    img
}

/// Renders the target person `P` wearing `garment` and the flat garment `G`.
pub fn render_pair(person: &PersonSpec, garment: &GarmentSpec, h: usize, w: usize) -> Result<(Image, Image)> {
    person.validate()?;
    garment.validate()?;
    let (p, _) = render_person(person, garment, h, w);
    Ok((p, render_garment(garment, h, w)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> (PersonSpec, GarmentSpec) {
        let mut rng = GaussianRng::new(42);
        let mut p = PersonSpec::random(&mut rng);
        p.pose = Pose::ArmsOut;
        let mut g = GarmentSpec::random(&mut rng);
        g.pattern = Pattern::Solid;
        g.silhouette = Silhouette::TShirt;
        (p, g)
    }

    #[test]
    fn render_is_deterministic() {
        let (p, g) = specs();
        assert_eq!(render_pair(&p, &g, 64, 48).unwrap(), render_pair(&p, &g, 64, 48).unwrap());
    }

    #[test]
    fn solid_garment_pixels_equal_base_color() {
        let (p, g) = specs();
        let (img, mask) = render_person(&p, &g, 64, 48);
        let n = mask.iter().filter(|&&m| m).count();
        assert!(n > 100, "garment region too small: {n}");
        for y in 0..64 {
            for x in 0..48 {
                if mask[y * 48 + x] {
                    assert_eq!(img.get(y, x), g.base_color);
                }
            }
        }
    }

    #[test]
    fn garment_image_ignores_pose() {
        let (mut p, g) = specs();
        let (_, g1) = render_pair(&p, &g, 64, 48).unwrap();
        p.pose = Pose::ArmsRaised;
        let (_, g2) = render_pair(&p, &g, 64, 48).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn sleeves_follow_silhouette() {
        let (p, mut g) = specs();
        let count = |g: &GarmentSpec| render_person(&p, g, 64, 48).1.iter().filter(|&&m| m).count();
        g.silhouette = Silhouette::Vest;
        let vest = count(&g);
        g.silhouette = Silhouette::TShirt;
        let tee = count(&g);
        g.silhouette = Silhouette::LongSleeve;
        let long = count(&g);
        assert!(vest < tee && tee < long, "{vest} {tee} {long}");
    }

    #[test]
    fn invalid_geometry_rejected() {
        let (mut p, g) = specs();
        p.body_width = 0.9;
        assert!(render_pair(&p, &g, 64, 48).is_err());
    }
}
