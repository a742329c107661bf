//! Procedural, landmark-annotated cartoon faces for desk-scale training.
//!
//! Faces are drawn from a 12-point template given in 64ths of the unit
//! square (so `template · (size − 1)` is exact in binary floating point):
//!
//! ```text
//!  idx  point            template (x, y)/64   mirror
//!   0   contour top      (32, 14)              0
//!   1   contour left     (16, 32)              2
//!   2   contour right    (48, 32)              1
//!   3   chin             (32, 50)              3
//!   4   left eye outer   (21, 27)              7
//!   5   left eye inner   (29, 27)              6
//!   6   right eye inner  (35, 27)              5
//!   7   right eye outer  (43, 27)              4
//!   8   nose tip         (32, 34)              8
//!   9   mouth left       (26, 42)             10
//!  10   mouth right      (38, 42)              9
//!  11   mouth center     (32, 43)             11
//! ```
//!
//! Every shape is placed relative to these points in template space and
//! the whole face is moved by a similarity transform about the image
//! centre. Edges get a one-pixel linear coverage ramp. Landmarks are
//! snapped to 1/1024 px, which keeps mirroring exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::landmarks::{LandmarkSet, Point};
use crate::tensor::{Shape, Tensor};

pub const NUM_LANDMARKS: usize = 12;

pub const TEMPLATE: [(f64, f64); NUM_LANDMARKS] = [
    (32.0, 14.0),
    (16.0, 32.0),
    (48.0, 32.0),
    (32.0, 50.0),
    (21.0, 27.0),
    (29.0, 27.0),
    (35.0, 27.0),
    (43.0, 27.0),
    (32.0, 34.0),
    (26.0, 42.0),
    (38.0, 42.0),
    (32.0, 43.0),
];

/// Landmark index each point maps to under a horizontal flip.
pub const MIRROR: [usize; NUM_LANDMARKS] = [0, 2, 1, 3, 7, 6, 5, 4, 8, 10, 9, 11];

pub const NOSE: usize = 8;

const LANDMARK_GRID: f64 = 1024.0;

/// Which local attribute the band represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    #[default]
    Mustache,
    Eyeglasses,
    Goatee,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Mustache, Attribute::Eyeglasses, Attribute::Goatee];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Mustache => "mustache",
            Attribute::Eyeglasses => "eyeglasses",
            Attribute::Goatee => "goatee",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// Landmarks whose bounding box defines the attribute crop.
    pub fn crop_landmarks(self) -> &'static [usize] {
        match self {
            Attribute::Mustache => &[8, 9, 10, 11],
            Attribute::Eyeglasses => &[4, 5, 6, 7],
            Attribute::Goatee => &[3, 9, 10, 11],
        }
    }

    /// Band centre `(x, y)`, half-length and half-thickness range, in
    /// template 64ths.
    fn band(self) -> ((f64, f64), f64, (f64, f64)) {
        match self {
            Attribute::Mustache => ((32.0, 38.5), 7.0, (1.0, 1.8)),
            Attribute::Eyeglasses => ((32.0, 27.0), 13.0, (0.8, 1.4)),
            Attribute::Goatee => ((32.0, 47.0), 3.5, (1.2, 2.0)),
        }
    }
}

/// Similarity transform about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: f64,
    pub scale: f64,
    /// Fractions of the image size.
    pub tx: f64,
    pub ty: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeStyle {
    pub hue: f64,
    /// In [0, 1], interpolating the attribute's thickness range.
    pub width: f64,
    /// Sag of the band, in template 64ths; positive bends down at the ends.
    pub curvature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceSpec {
    pub pose: Pose,
    pub skin_tint: [f64; 3],
    pub brightness: f64,
    pub has_attribute: bool,
    pub attribute: Attribute,
    pub style: AttributeStyle,
}

impl FaceSpec {
    pub fn neutral(has_attribute: bool) -> Self {
        FaceSpec {
            pose: Pose::IDENTITY,
            skin_tint: [1.0; 3],
            brightness: 0.0,
            has_attribute,
            attribute: Attribute::Mustache,
            style: AttributeStyle {
                hue: 0.08,
                width: 0.5,
                curvature: 0.0,
            },
        }
    }

    /// Draws every field uniformly from its documented range.
    pub fn sample(rng: &mut impl Rng, has_attribute: bool, attribute: Attribute) -> Self {
        FaceSpec {
            pose: Pose {
                rotation: rng.gen_range(-0.35..=0.35),
                scale: rng.gen_range(0.8..=1.2),
                tx: rng.gen_range(-0.1..=0.1),
                ty: rng.gen_range(-0.1..=0.1),
            },
            skin_tint: [
                rng.gen_range(0.7..=1.0),
                rng.gen_range(0.7..=1.0),
                rng.gen_range(0.7..=1.0),
            ],
            brightness: rng.gen_range(-0.2..=0.2),
            has_attribute,
            attribute,
            style: AttributeStyle {
                hue: rng.gen_range(0.0..1.0),
                width: rng.gen_range(0.0..=1.0),
                curvature: rng.gen_range(-2.0..=2.0),
            },
        }
    }

    /// The same face seen in a mirror.
    pub fn mirrored(&self) -> Self {
        let mut s = *self;
        s.pose.rotation = -s.pose.rotation;
        s.pose.tx = -s.pose.tx;
        s
    }

    /// Largest per-channel skin tint difference.
    pub fn tint_gap(&self, other: &FaceSpec) -> f64 {
        (0..3)
            .map(|c| (self.skin_tint[c] - other.skin_tint[c]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 1×3×H×W in [−1, 1].
    pub image: Tensor<f32>,
    pub landmarks: LandmarkSet,
    pub label: u8,
    pub spec: FaceSpec,
}

/// Template-space (64ths scaled to pixels) → image-space affine map.
#[derive(Debug, Clone, Copy)]
struct Affine {
    a: [[f64; 2]; 2],
    b: [f64; 2],
    inv: [[f64; 2]; 2],
}

impl Affine {
    fn new(pose: &Pose, size: usize) -> Self {
        let (sin, cos) = pose.rotation.sin_cos();
        let s = pose.scale;
        let a = [[s * cos, -s * sin], [s * sin, s * cos]];
        let c = (size - 1) as f64 / 2.0;
        let n = size as f64;
        let b = [
            c - (a[0][0] * c + a[0][1] * c) + pose.tx * n,
            c - (a[1][0] * c + a[1][1] * c) + pose.ty * n,
        ];
        let inv = [[cos / s, sin / s], [-sin / s, cos / s]];
        Affine { a, b, inv }
    }

    fn forward(&self, p: (f64, f64)) -> (f64, f64) {
        (
            self.a[0][0] * p.0 + self.a[0][1] * p.1 + self.b[0],
            self.a[1][0] * p.0 + self.a[1][1] * p.1 + self.b[1],
        )
    }

    fn inverse(&self, q: (f64, f64)) -> (f64, f64) {
        let (x, y) = (q.0 - self.b[0], q.1 - self.b[1]);
        (
            self.inv[0][0] * x + self.inv[0][1] * y,
            self.inv[1][0] * x + self.inv[1][1] * y,
        )
    }
}

fn template_px(k: usize, size: usize) -> (f64, f64) {
    let u = (size - 1) as f64 / 64.0;
    (TEMPLATE[k].0 * u, TEMPLATE[k].1 * u)
}

/// Landmark positions of a face rendered at `size`.
pub fn face_landmarks(pose: &Pose, size: usize) -> LandmarkSet {
    let t = Affine::new(pose, size);
    let snap = |v: f64| (v * LANDMARK_GRID).round() / LANDMARK_GRID;
    LandmarkSet::new(
        (0..NUM_LANDMARKS)
            .map(|k| {
                let (x, y) = t.forward(template_px(k, size));
                Point::new(snap(x), snap(y))
            })
            .collect(),
    )
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

fn ellipse_sdf(p: (f64, f64), c: (f64, f64), r: (f64, f64)) -> f64 {
    let (x, y) = ((p.0 - c.0) / r.0, (p.1 - c.1) / r.1);
    let k0 = x.hypot(y);
    let k1 = (x / r.0).hypot(y / r.1);
    if k1 == 0.0 {
        -r.0.min(r.1)
    } else {
        k0 * (k0 - 1.0) / k1
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const SEGMENTS: usize = 8;

/// Polyline of the attribute band in template pixels plus its half-thickness.
fn band_polyline(attr: Attribute, style: &AttributeStyle, size: usize) -> (Vec<(f64, f64)>, f64) {
    let u = (size - 1) as f64 / 64.0;
    let ((cx, cy), half_len, (t0, t1)) = attr.band();
    let pts = (0..=SEGMENTS)
        .map(|i| {
            let s = 2.0 * i as f64 / SEGMENTS as f64 - 1.0;
            let x = cx + s * half_len;
            let y = cy + style.curvature * (s * s - 0.5);
            (x * u, y * u)
        })
        .collect();
    let half = (t0 + (t1 - t0) * style.width.clamp(0.0, 1.0)) * u;
    (pts, half)
}

/// Image-space box `(x0, y0, x1, y1)` outside of which the attribute band
/// contributes nothing.
pub fn attribute_bbox(spec: &FaceSpec, size: usize) -> (f64, f64, f64, f64) {
    let t = Affine::new(&spec.pose, size);
    let (pts, half) = band_polyline(spec.attribute, &spec.style, size);
    // coverage reaches zero half a pixel beyond the stroke edge
    let reach = half * spec.pose.scale + 0.5;
    pts.iter().map(|&p| t.forward(p)).fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(x0, y0, x1, y1), (x, y)| (x0.min(x - reach), y0.min(y - reach), x1.max(x + reach), y1.max(y + reach)),
    )
}

fn coverage(sdf_px: f64) -> f64 {
    (0.5 - sdf_px).clamp(0.0, 1.0)
}

fn over(dst: &mut [f64; 3], color: [f64; 3], alpha: f64) {
    if alpha > 0.0 {
        for c in 0..3 {
            dst[c] += (color[c] - dst[c]) * alpha;
        }
    }
}

const SKIN: [f64; 3] = [0.88, 0.70, 0.56];
const EYE: [f64; 3] = [0.12, 0.10, 0.10];
const LIPS: [f64; 3] = [0.62, 0.22, 0.24];

/// Renders one face. Pure in `(spec, size)`.
pub fn render_face(spec: &FaceSpec, size: usize) -> Sample {
    assert!(size >= 16, "render size {size} below 16");
    let t = Affine::new(&spec.pose, size);
    let s = spec.pose.scale;
    let u = (size - 1) as f64 / 64.0;
    let lm = |k| template_px(k, size);
    let mid = |a: (f64, f64), b: (f64, f64)| ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);

    let head_c = mid(lm(0), lm(3));
    let head_r = ((lm(2).0 - lm(1).0) / 2.0, (lm(3).1 - lm(0).1) / 2.0);
    let eyes = [mid(lm(4), lm(5)), mid(lm(6), lm(7))];
    let eye_r = 2.5 * u;
    let nose_r = (2.0 * u, 2.5 * u);
    let mouth = [lm(9), lm(11), lm(10)];
    let lip_half = 0.9 * u;
    let band = spec.has_attribute.then(|| band_polyline(spec.attribute, &spec.style, size));
    let band_color = hsv(spec.style.hue, 0.55, 0.22);

    let mut data = vec![0f32; 3 * size * size];
    let plane = size * size;
    for i in 0..size {
        for j in 0..size {
            let q = t.inverse((j as f64, i as f64));
            let v = i as f64 / (size - 1) as f64;
            let mut px = [0.30 + 0.10 * v, 0.36 + 0.08 * v, 0.46 - 0.06 * v];

            let d_head = ellipse_sdf(q, head_c, head_r);
            // soft radial shading so the skin is not flat
            let r = ((q.0 - head_c.0) / head_r.0).hypot((q.1 - head_c.1) / head_r.1);
            let shade = 1.0 - 0.12 * r * r;
            over(&mut px, SKIN.map(|c| c * shade), coverage(d_head * s));

            for e in eyes {
                let d = (q.0 - e.0).hypot(q.1 - e.1) - eye_r;
                over(&mut px, EYE, coverage(d * s));
            }
            let d_nose = ellipse_sdf(q, lm(NOSE), nose_r);
            over(&mut px, SKIN.map(|c| c * 0.78), coverage(d_nose * s));
            let d_mouth = seg_dist(q, mouth[0], mouth[1]).min(seg_dist(q, mouth[1], mouth[2])) - lip_half;
            over(&mut px, LIPS, coverage(d_mouth * s));

            if let Some((pts, half)) = &band {
                let d = pts
                    .windows(2)
                    .map(|w| seg_dist(q, w[0], w[1]))
                    .fold(f64::INFINITY, f64::min)
                    - half;
                over(&mut px, band_color, coverage(d * s));
            }

            for c in 0..3 {
                let val = (px[c] * spec.skin_tint[c] + spec.brightness).clamp(0.0, 1.0);
                data[c * plane + i * size + j] = (2.0 * val - 1.0) as f32;
            }
        }
    }
    Sample {
        image: Tensor::from_vec(Shape::new(1, 3, size, size), data).expect("sized buffer"),
        landmarks: face_landmarks(&spec.pose, size),
        label: spec.has_attribute as u8,
        spec: *spec,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Index range of this split among `n` samples (80/10/10 by index).
    pub fn range(self, n: usize) -> std::ops::Range<usize> {
        let train = n * 8 / 10;
        let val = train + n / 10;
        match self {
            Split::Train => 0..train,
            Split::Val => train..val,
            Split::Test => val..n,
        }
    }
}

/// Unpaired domains: A without the attribute, B with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub a: Vec<Sample>,
    pub b: Vec<Sample>,
}

impl Dataset {
    pub fn domain(&self, label: u8) -> &[Sample] {
        if label == 0 {
            &self.a
        } else {
            &self.b
        }
    }

    pub fn split(&self, label: u8, split: Split) -> &[Sample] {
        let d = self.domain(label);
        &d[split.range(d.len())]
    }
}

/// Seeded stream for sample `index` of domain `label`; samples are
/// independent so generation order does not matter.
pub fn sample_rng(seed: u64, label: u8, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((label as u64) << 40) | index as u64);
    rng
}

pub fn generate_dataset(seed: u64, n_per_domain: usize, size: usize) -> Dataset {
    generate_dataset_with(seed, n_per_domain, size, Attribute::Mustache)
}

pub fn generate_dataset_with(seed: u64, n_per_domain: usize, size: usize, attribute: Attribute) -> Dataset {
    let domain = |label: u8| {
        (0..n_per_domain)
            .map(|i| {
                let spec = FaceSpec::sample(&mut sample_rng(seed, label, i), label == 1, attribute);
                render_face(&spec, size)
            })
            .collect()
    };
    Dataset {
        a: domain(0),
        b: domain(1),
    }
}

/// Mirrors a sample left-right, re-indexing landmarks through [`MIRROR`].
pub fn hflip_augment(sample: &Sample) -> Sample {
    let s = sample.image.shape();
    let (h, w) = (s.h(), s.w());
    let src = sample.image.data();
    let mut data = vec![0f32; src.len()];
    for row in 0..s.n() * s.c() * h {
        let base = row * w;
        for j in 0..w {
            data[base + j] = src[base + w - 1 - j];
        }
    }
    let last = (w - 1) as f64;
    let pts = &sample.landmarks.points;
    let points = if pts.len() == NUM_LANDMARKS {
        (0..NUM_LANDMARKS)
            .map(|k| {
                let p = pts[MIRROR[k]];
                Point::new(last - p.x, p.y)
            })
            .collect()
    } else {
        pts.iter().map(|p| Point::new(last - p.x, p.y)).collect()
    };
    Sample {
        image: Tensor::from_vec(s, data).expect("same shape"),
        landmarks: LandmarkSet::new(points),
        label: sample.label,
        spec: sample.spec.mirrored(),
    }
}
