//! Procedural HOI scenes: stick-figure humans, flat-colored objects and
//! geometric interaction rules.
//!
//! Generation and checking are deliberately separate code paths. The checker
//! sees only the annotation record and the rendered pixels.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{save_annotations, AnnotationRecord, DataError, DatasetManifest, Image, Sample, SYNTHETIC_PREFIX};
use crate::geometry::BBox;
use crate::matching::GroundTruthHoi;

const BACKGROUND: [f64; 3] = [0.1, 0.1, 0.15];
const HEAD: [f64; 3] = [0.95, 0.78, 0.6];
const BODY: [f64; 3] = [0.55, 0.35, 0.75];
const TETHER: [f64; 3] = [0.95, 0.95, 0.25];
const NOISE: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Ball,
    Block,
    Bar,
}

impl ObjectShape {
    pub const ALL: [ObjectShape; 3] = [ObjectShape::Ball, ObjectShape::Block, ObjectShape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            ObjectShape::Ball => "ball",
            ObjectShape::Block => "block",
            ObjectShape::Bar => "bar",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    fn color(self) -> [f64; 3] {
        match self {
            ObjectShape::Ball => [0.9, 0.2, 0.2],
            ObjectShape::Block => [0.2, 0.35, 0.95],
            ObjectShape::Bar => [0.2, 0.85, 0.3],
        }
    }

    /// Box `(w, h)` for a nominal size `s` in pixels.
    fn extent(self, s: f64) -> (f64, f64) {
        match self {
            ObjectShape::Ball | ObjectShape::Block => (s, s),
            ObjectShape::Bar => (1.8 * s, 0.6 * s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionRule {
    /// Object overlaps the human box at torso height.
    Hold,
    /// Object sits next to the human's feet.
    Kick,
    /// Object is far away and joined to the human by a drawn line.
    FarInteract,
}

impl InteractionRule {
    pub const ALL: [InteractionRule; 3] = [InteractionRule::Hold, InteractionRule::Kick, InteractionRule::FarInteract];

    pub fn name(self) -> &'static str {
        match self {
            InteractionRule::Hold => "hold",
            InteractionRule::Kick => "kick",
            InteractionRule::FarInteract => "far_interact",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Generator settings. Sizes are fractions of the image height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub num_images: usize,
    pub min_hois: usize,
    pub max_hois: usize,
    pub objects: Vec<ObjectShape>,
    pub interactions: Vec<InteractionRule>,
    pub human_height: [f64; 2],
    pub object_size: [f64; 2],
    /// Minimum distance, in object diameters, between a far object and the human box.
    pub far_diameters: f64,
    /// Categories with fewer training instances than this go in the rare list.
    pub rare_below: usize,
    /// Placement retries per scene before giving up.
    pub max_attempts: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_images: 20,
            min_hois: 1,
            max_hois: 3,
            objects: ObjectShape::ALL.to_vec(),
            interactions: InteractionRule::ALL.to_vec(),
            human_height: [0.32, 0.45],
            object_size: [0.11, 0.16],
            far_diameters: 1.5,
            rare_below: 3,
            max_attempts: 200,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1] < 1.0;
        if self.width < 16 || self.height < 16 {
            return Err(format!("image size {}x{} is below 16 pixels", self.width, self.height));
        }
        if self.min_hois > self.max_hois {
            return Err("min_hois exceeds max_hois".into());
        }
        if self.objects.is_empty() || self.interactions.is_empty() {
            return Err("objects and interactions must be non-empty".into());
        }
        if !range_ok(self.human_height) || !range_ok(self.object_size) {
            return Err("human_height and object_size must be increasing ranges inside (0, 1)".into());
        }
        if !(self.far_diameters > 0.0) {
            return Err("far_diameters must be positive".into());
        }
        if self.max_attempts == 0 {
            return Err("max_attempts must be positive".into());
        }
        Ok(())
    }

    pub fn manifest_tables(&self) -> DatasetManifest {
        DatasetManifest::dense(
            self.objects.iter().map(|o| o.name().to_string()).collect(),
            self.interactions.iter().map(|r| r.name().to_string()).collect(),
        )
    }
}

/// Vocabulary needed to draw a scene from annotations alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneStyle {
    pub objects: Vec<ObjectShape>,
    pub interactions: Vec<InteractionRule>,
}

impl SceneStyle {
    pub fn from_manifest(m: &DatasetManifest) -> Result<Self, String> {
        let objects = m
            .objects
            .iter()
            .map(|n| ObjectShape::parse(n).ok_or_else(|| format!("object '{n}' has no synthetic shape")))
            .collect::<Result<_, _>>()?;
        let interactions = m
            .interactions
            .iter()
            .map(|n| InteractionRule::parse(n).ok_or_else(|| format!("interaction '{n}' has no synthetic rule")))
            .collect::<Result<_, _>>()?;
        Ok(Self { objects, interactions })
    }
}

/// FNV-1a of the synthetic id; seeds the background noise.
pub fn noise_seed(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Pixel-space rectangle.
#[derive(Debug, Clone, Copy)]
struct Rect {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Rect {
    fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Rect {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    fn of(b: &BBox, width: f64, height: f64) -> Self {
        Rect::centered(b.cx * width, b.cy * height, b.w * width, b.h * height)
    }

    fn w(&self) -> f64 {
        self.x2 - self.x1
    }

    fn h(&self) -> f64 {
        self.y2 - self.y1
    }

    fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    fn to_bbox(self, width: f64, height: f64) -> BBox {
        BBox::from_corners(self.x1 / width, self.y1 / height, self.x2 / width, self.y2 / height)
    }

    fn inflate(&self, m: f64) -> Rect {
        Rect {
            x1: self.x1 - m,
            y1: self.y1 - m,
            x2: self.x2 + m,
            y2: self.y2 + m,
        }
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.x1 < o.x2 && o.x1 < self.x2 && self.y1 < o.y2 && o.y1 < self.y2
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    fn inside(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    /// Euclidean distance from a point to the rectangle (0 inside).
    fn distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.x1 - x).max(0.0).max(x - self.x2);
        let dy = (self.y1 - y).max(0.0).max(y - self.y2);
        dx.hypot(dy)
    }
}

fn segment_points(a: (f64, f64), b: (f64, f64), step: f64) -> impl Iterator<Item = (f64, f64)> {
    let n = ((b.0 - a.0).hypot(b.1 - a.1) / step).ceil().max(1.0) as usize;
    (0..=n).map(move |i| {
        let t = i as f64 / n as f64;
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    })
}

/// Draw a scene. Pixels are quantized to 8 bits so PNG round-trips are exact.
pub fn render_scene(width: usize, height: usize, hois: &[GroundTruthHoi], style: &SceneStyle, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(width, height, BACKGROUND);
    for px in img.pixels_mut() {
        *px = (*px + rng.gen_range(-NOISE..=NOISE)).clamp(0.0, 1.0);
    }
    let (wf, hf) = (width as f64, height as f64);
    let fill = |img: &mut Image, r: &Rect, color: [f64; 3], inside: &dyn Fn(f64, f64) -> bool| {
        let x0 = r.x1.floor().max(0.0) as usize;
        let y0 = r.y1.floor().max(0.0) as usize;
        let x1 = (r.x2.ceil().max(0.0) as usize).min(width);
        let y1 = (r.y2.ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if r.contains(px, py) && inside(px, py) {
                    img.set(x, y, color);
                }
            }
        }
    };
    for h in hois {
        if style.interactions.get(h.interaction_class) == Some(&InteractionRule::FarInteract) {
            let a = Rect::of(&h.human_box, wf, hf).center();
            let b = Rect::of(&h.object_box, wf, hf).center();
            for (x, y) in segment_points(a, b, 0.1) {
                if x >= 0.0 && y >= 0.0 && (x as usize) < width && (y as usize) < height {
                    img.set(x as usize, y as usize, TETHER);
                }
            }
        }
    }
    for h in hois {
        let r = Rect::of(&h.human_box, wf, hf);
        let head_r = r.w() / 2.0;
        let (hcx, hcy) = (r.x1 + head_r, r.y1 + head_r);
        fill(&mut img, &r, HEAD, &|x, y| (x - hcx).hypot(y - hcy) <= head_r);
        let body = Rect {
            x1: r.x1 + 0.2 * r.w(),
            y1: r.y1 + 1.8 * head_r,
            x2: r.x2 - 0.2 * r.w(),
            y2: r.y2,
        };
        fill(&mut img, &body, BODY, &|_, _| true);
        // arms span the full box width
        let arms = Rect {
            x1: r.x1,
            y1: r.y1 + 2.3 * head_r,
            x2: r.x2,
            y2: r.y1 + 2.3 * head_r + (0.08 * r.h()).max(1.0),
        };
        fill(&mut img, &arms, BODY, &|_, _| true);

        let o = Rect::of(&h.object_box, wf, hf);
        let shape = style.objects.get(h.object_class).copied().unwrap_or(ObjectShape::Block);
        let (ocx, ocy) = o.center();
        let rad = o.w().min(o.h()) / 2.0;
        match shape {
            ObjectShape::Ball => fill(&mut img, &o, shape.color(), &|x, y| (x - ocx).hypot(y - ocy) <= rad),
            _ => fill(&mut img, &o, shape.color(), &|_, _| true),
        }
    }
    let q = img.to_rgb8();
    Image::from_rgb8(width, height, &q)
}

/// Output of [`generate`]: records use `synthetic:<id>` image names.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    pub records: Vec<AnnotationRecord>,
    pub samples: Vec<Sample>,
}

impl SynthDataset {
    /// Write `manifest.json`, `annotations.jsonl` and, if `with_images`,
    /// one PNG per record under `images/` (records then point at the files).
    pub fn write(&self, dir: &Path, with_images: bool) -> Result<(), DataError> {
        let io = |e: std::io::Error| DataError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        };
        fs::create_dir_all(dir).map_err(io)?;
        let mut records = self.records.clone();
        if with_images {
            fs::create_dir_all(dir.join("images")).map_err(io)?;
            for (rec, sample) in records.iter_mut().zip(&self.samples) {
                let id = rec.synthetic_id().expect("generated ids are synthetic").to_string();
                let rel = format!("images/{id}.png");
                sample.image.save_png(&dir.join(&rel))?;
                rec.image = rel;
            }
        }
        self.manifest.save(&dir.join("manifest.json"))?;
        save_annotations(&dir.join("annotations.jsonl"), &records)
    }
}

/// Deterministic scene set for `seed`.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthDataset, DataError> {
    spec.validate().map_err(DataError::Synth)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = spec.manifest_tables();
    let style = SceneStyle {
        objects: spec.objects.clone(),
        interactions: spec.interactions.clone(),
    };
    let mut records = Vec::with_capacity(spec.num_images);
    let mut samples = Vec::with_capacity(spec.num_images);
    for i in 0..spec.num_images {
        let id = format!("s{seed}-{i:05}");
        let n = rng.gen_range(spec.min_hois..=spec.max_hois);
        let hois = place_scene(spec, n, &mut rng)
            .ok_or_else(|| DataError::Synth(format!("scene {id}: no placement for {n} HOIs after {} attempts", spec.max_attempts)))?;
        let image = render_scene(spec.width, spec.height, &hois, &style, noise_seed(&id));
        records.push(AnnotationRecord {
            image: format!("{SYNTHETIC_PREFIX}{id}"),
            width: spec.width,
            height: spec.height,
            hois: hois.clone(),
        });
        samples.push(Sample {
            id: format!("{SYNTHETIC_PREFIX}{id}"),
            image,
            hois,
        });
    }
    let mut counts = vec![0usize; manifest.hoi_categories.len()];
    for h in records.iter().flat_map(|r| &r.hois) {
        counts[manifest.category_id(h.object_class, h.interaction_class).expect("dense table")] += 1;
    }
    manifest.rare = (0..counts.len()).filter(|&c| counts[c] < spec.rare_below).collect();
    Ok(SynthDataset {
        manifest,
        records,
        samples,
    })
}

/// One human/object pair in pixel space plus the area it claims.
struct Placed {
    human: Rect,
    object: Rect,
    tether: Option<((f64, f64), (f64, f64))>,
}

impl Placed {
    fn collides(&self, other: &Placed) -> bool {
        let mine = [self.human.inflate(1.0), self.object.inflate(1.0)];
        let theirs = [other.human.inflate(1.0), other.object.inflate(1.0)];
        let rect_hit = mine.iter().any(|a| theirs.iter().any(|b| a.overlaps(b)));
        let tether_hit = |p: &Placed, rects: &[Rect; 2]| {
            p.tether
                .is_some_and(|(a, b)| segment_points(a, b, 0.25).any(|(x, y)| rects.iter().any(|r| r.contains(x, y))))
        };
        rect_hit || tether_hit(self, &theirs) || tether_hit(other, &mine)
    }
}

fn place_scene(spec: &SynthSpec, n: usize, rng: &mut ChaCha8Rng) -> Option<Vec<GroundTruthHoi>> {
    let (wf, hf) = (spec.width as f64, spec.height as f64);
    let classes: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.gen_range(0..spec.objects.len()), rng.gen_range(0..spec.interactions.len())))
        .collect();
    const PAIR_TRIES: usize = 50;
    'attempt: for _ in 0..spec.max_attempts {
        let mut placed: Vec<Placed> = Vec::with_capacity(n);
        for &(o, r) in &classes {
            let fits = (0..PAIR_TRIES).find_map(|_| {
                place_pair(spec, spec.objects[o], spec.interactions[r], rng)
                    .filter(|p| !placed.iter().any(|q| q.collides(p)))
            });
            match fits {
                Some(p) => placed.push(p),
                None => continue 'attempt,
            }
        }
        return Some(
            placed
                .iter()
                .zip(&classes)
                .map(|(p, &(o, r))| GroundTruthHoi {
                    human_box: p.human.to_bbox(wf, hf),
                    object_box: p.object.to_bbox(wf, hf),
                    object_class: o,
                    interaction_class: r,
                })
                .collect(),
        );
    }
    None
}

fn place_pair(spec: &SynthSpec, shape: ObjectShape, rule: InteractionRule, rng: &mut ChaCha8Rng) -> Option<Placed> {
    let (wf, hf) = (spec.width as f64, spec.height as f64);
    let hh = hf * rng.gen_range(spec.human_height[0]..=spec.human_height[1]);
    let hw = 0.4 * hh;
    let human = Rect::centered(
        rng.gen_range(hw / 2.0..=wf - hw / 2.0),
        rng.gen_range(hh / 2.0..=hf - hh / 2.0),
        hw,
        hh,
    );
    let (ow, oh) = shape.extent(hf * rng.gen_range(spec.object_size[0]..=spec.object_size[1]));
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let (hcx, _) = human.center();
    let (object, tether) = match rule {
        InteractionRule::Hold => {
            let ocy = human.y1 + hh * rng.gen_range(0.35..=0.5);
            let edge = hcx + side * hw / 2.0;
            let ocx = edge + side * ow * rng.gen_range(-0.1..=0.3);
            (Rect::centered(ocx, ocy, ow, oh), None)
        }
        InteractionRule::Kick => {
            let oy2 = human.y2 - hh * rng.gen_range(0.0..=0.05);
            let edge = hcx + side * hw / 2.0;
            let ocx = edge + side * ow * (0.5 + rng.gen_range(0.05..=0.5));
            (Rect::centered(ocx, oy2 - oh / 2.0, ow, oh), None)
        }
        InteractionRule::FarInteract => {
            let diam = ow.max(oh);
            let ocx = rng.gen_range(ow / 2.0..=wf - ow / 2.0);
            let ocy = rng.gen_range(oh / 2.0..=hf - oh / 2.0);
            if human.distance(ocx, ocy) < spec.far_diameters * diam + 1.0 {
                return None;
            }
            (Rect::centered(ocx, ocy, ow, oh), Some((human.center(), (ocx, ocy))))
        }
    };
    if !object.inside(wf, hf) || !human.inside(wf, hf) {
        return None;
    }
    Some(Placed { human, object, tether })
}

/// Independent validation of one generated record against its own rules.
///
/// Returns every violated rule; empty means the scene is consistent.
pub fn check_scene(rec: &AnnotationRecord, image: &Image, manifest: &DatasetManifest, spec: &SynthSpec) -> Vec<String> {
    let mut problems = Vec::new();
    let (wf, hf) = (rec.width as f64, rec.height as f64);
    if rec.hois.len() > spec.max_hois || rec.hois.len() < spec.min_hois {
        problems.push(format!("{} HOIs outside [{}, {}]", rec.hois.len(), spec.min_hois, spec.max_hois));
    }
    if (image.width(), image.height()) != (rec.width, rec.height) {
        problems.push("image size disagrees with the record".into());
    }
    for (k, h) in rec.hois.iter().enumerate() {
        if !h.human_box.is_normalized() || !h.object_box.is_normalized() {
            problems.push(format!("hois[{k}]: box leaves the image"));
            continue;
        }
        let Some(rule) = manifest.interactions.get(h.interaction_class).and_then(|n| InteractionRule::parse(n)) else {
            problems.push(format!("hois[{k}]: unknown interaction {}", h.interaction_class));
            continue;
        };
        let hr = Rect::of(&h.human_box, wf, hf);
        let or = Rect::of(&h.object_box, wf, hf);
        let (ocx, ocy) = or.center();
        let ok = match rule {
            InteractionRule::Hold => {
                let torso = ocy >= hr.y1 + 0.3 * hr.h() && ocy <= hr.y1 + 0.55 * hr.h();
                hr.overlaps(&or) && torso
            }
            InteractionRule::Kick => {
                let gap = (or.x1 - hr.x2).max(hr.x1 - or.x2);
                (or.y2 - hr.y2).abs() <= 0.1 * hr.h() && gap > 0.0 && gap <= or.w()
            }
            InteractionRule::FarInteract => {
                let far = hr.distance(ocx, ocy) >= spec.far_diameters * or.w().max(or.h());
                far && tether_visible(image, &hr, &or)
            }
        };
        if !ok {
            problems.push(format!("hois[{k}]: geometry violates the '{}' rule", rule.name()));
        }
    }
    problems
}

fn tether_visible(image: &Image, hr: &Rect, or: &Rect) -> bool {
    let is_tether = |x: i64, y: i64| {
        if x < 0 || y < 0 || x >= image.width() as i64 || y >= image.height() as i64 {
            return false;
        }
        let p = image.get(x as usize, y as usize);
        p.iter().zip(TETHER).all(|(a, b)| (a - b).abs() < 0.05)
    };
    let (a, b) = (hr.center(), or.center());
    let mut checked = 0;
    for i in 0..32 {
        let t = (i as f64 + 0.5) / 32.0;
        let (x, y) = (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1));
        if hr.inflate(1.0).contains(x, y) || or.inflate(1.0).contains(x, y) {
            continue;
        }
        checked += 1;
        let (px, py) = (x.floor() as i64, y.floor() as i64);
        let near = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]
            .iter()
            .any(|(dx, dy)| is_tether(px + dx, py + dy));
        if !near {
            return false;
        }
    }
    checked > 0
}
