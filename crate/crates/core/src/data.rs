//! Procedural two-domain scene generator.
//!
//! Every scene has a layout (a road band plus a few boxes, disks and
//! triangles over a background) that depends only on the scene seed, and an
//! appearance that depends on the seed and the domain's style parameters. The
//! two domains therefore share pixel-identical label maps and differ only in
//! low-level appearance.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{math, rng, Error, Result, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;
pub const BACKGROUND: u8 = 0;
pub const ROAD: u8 = 1;
pub const BOX: u8 = 2;
pub const DISK: u8 = 3;
pub const TRIANGLE: u8 = 4;
pub const CLASS_NAMES: [&str; 5] = ["background", "road", "box", "disk", "triangle"];
/// Smallest canvas side that can hold a shape.
pub const MIN_CANVAS: usize = 32;

/// Per-pixel class indices, [`IGNORE`] for unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height * width != data.len() || height == 0 || width == 0 {
            return Err(Error::shape("label_map", &[height, width], &[data.len()]));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Checks every value is a class below `k` or [`IGNORE`].
    pub fn validate(&self, k: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= k) {
            Some(v) => Err(Error::invalid(
                "label_map",
                alloc::format!("label {v} outside [0, {k})"),
            )),
            None => Ok(()),
        }
    }

    /// Pixel count per class; ignored pixels are not counted.
    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for &v in &self.data {
            if (v as usize) < k {
                h[v as usize] += 1;
            }
        }
        h
    }

    /// Crop `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> LabelMap {
        let mut data = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        LabelMap {
            height: h,
            width: w,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        LabelMap { data, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Low-level appearance of one domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StyleParams {
    /// Hue rotation of the palette about the gray axis, in radians.
    pub palette_rotation: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Standard deviation of additive per-pixel Gaussian noise.
    pub noise_sigma: f64,
    /// Spatial frequency of the luminance stripe texture, cycles per pixel.
    pub texture_freq: f64,
    pub texture_amp: f64,
}

impl StyleParams {
    pub fn source_default() -> Self {
        StyleParams {
            palette_rotation: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.02,
            texture_freq: 0.04,
            texture_amp: 0.04,
        }
    }

    pub fn target_default() -> Self {
        StyleParams {
            palette_rotation: 0.5,
            brightness: -0.1,
            contrast: 0.6,
            noise_sigma: 0.1,
            texture_freq: 0.3,
            texture_amp: 0.12,
        }
    }
}

impl Default for StyleParams {
    fn default() -> Self {
        Self::source_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub source: StyleParams,
    pub target: StyleParams,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            height: 128,
            width: 128,
            num_classes: 5,
            source: StyleParams::source_default(),
            target: StyleParams::target_default(),
        }
    }
}

impl SceneSpec {
    pub fn style(&self, domain: Domain) -> &StyleParams {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    /// The same spec with the seed of the `index`-th scene of a set.
    pub fn nth(&self, index: u64) -> SceneSpec {
        SceneSpec {
            seed: splitmix(self.seed ^ splitmix(index.wrapping_add(1))),
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < MIN_CANVAS || self.width < MIN_CANVAS {
            return Err(Error::invalid(
                "gen_scene",
                alloc::format!(
                    "canvas {}x{} cannot hold a shape (minimum {MIN_CANVAS}x{MIN_CANVAS})",
                    self.height,
                    self.width
                ),
            ));
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::invalid("gen_scene", "class count must be in [2, 5]"));
        }
        Ok(())
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Band {
        top: f64,
        thickness: f64,
        slope: f64,
        mid: f64,
    },
    Box {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
    },
    Disk {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Triangle {
        cx: f64,
        cy: f64,
        s: f64,
    },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Band {
                top,
                thickness,
                slope,
                mid,
            } => {
                let t = top + slope * (x - mid);
                y >= t && y < t + thickness
            }
            Shape::Box { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Shape::Disk { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
            Shape::Triangle { cx, cy, s } => {
                let top = cy - s;
                let bottom = cy + s;
                y >= top && y <= bottom && (x - cx).abs() <= (y - top) * 0.5 * 1.15
            }
        }
    }
}

/// Layout: the shapes and their classes, painted in order.
fn layout(spec: &SceneSpec) -> Vec<(u8, Shape)> {
    let mut r = rng::derived(spec.seed, 1);
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut shapes = Vec::new();
    if spec.num_classes > ROAD as usize {
        shapes.push((
            ROAD,
            Shape::Band {
                top: r.gen_range(0.55..0.72) * h,
                thickness: r.gen_range(0.16..0.26) * h,
                slope: r.gen_range(-0.15..0.15),
                mid: w / 2.0,
            },
        ));
    }
    let object_classes: Vec<u8> = (BOX..spec.num_classes as u8).collect();
    if object_classes.is_empty() {
        return shapes;
    }
    let n = r.gen_range(1..=3);
    let side = h.min(w);
    for _ in 0..n {
        let class = object_classes[r.gen_range(0..object_classes.len())];
        let s = r.gen_range(0.13..0.22) * side;
        let cx = r.gen_range(s..w - s);
        let cy = r.gen_range(s..h - s);
        let shape = match class {
            BOX => Shape::Box {
                cx,
                cy,
                hw: s * r.gen_range(0.75..1.0),
                hh: s * r.gen_range(0.75..1.0),
            },
            DISK => Shape::Disk { cx, cy, r: s },
            _ => Shape::Triangle { cx, cy, s },
        };
        shapes.push((class, shape));
    }
    shapes
}

/// Base RGB colour per class.
const PALETTE: [[f64; 3]; 5] = [
    [0.55, 0.70, 0.85],
    [0.35, 0.33, 0.32],
    [0.80, 0.25, 0.20],
    [0.25, 0.65, 0.30],
    [0.85, 0.75, 0.20],
];

/// Rotates an RGB colour about the gray diagonal (Rodrigues' formula).
fn rotate_hue(c: [f64; 3], angle: f64) -> [f64; 3] {
    if angle == 0.0 {
        return c;
    }
    let k = 1.0 / math::sqrt(3.0);
    let (s, co) = (math::sin(angle), math::cos(angle));
    let dot = (c[0] + c[1] + c[2]) * k;
    let cross = [k * (c[2] - c[1]), k * (c[0] - c[2]), k * (c[1] - c[0])];
    let mut out = [0.0; 3];
    for i in 0..3 {
        out[i] = c[i] * co + cross[i] * s + k * dot * (1.0 - co);
    }
    out
}

/// Renders one scene in `domain`'s style.
///
/// Returns a `[3,H,W]` image with values in `[0,1]` and its label map. The
/// label map depends only on the seed.
pub fn gen_scene(spec: &SceneSpec, domain: Domain) -> Result<(Tensor, LabelMap)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let shapes = layout(spec);
    let style = spec.style(domain);
    let mut r = rng::derived(spec.seed, 2 + domain as u64);

    // Per-region colours: jittered class colour, then the domain's palette.
    let jitter = |r: &mut rng::Rng, base: [f64; 3], amount: f64| {
        let mut c = base;
        for v in &mut c {
            *v += r.gen_range(-amount..amount);
        }
        rotate_hue(c, style.palette_rotation)
    };
    let bg_top = jitter(&mut r, PALETTE[0], 0.08);
    let bg_bottom = jitter(&mut r, [PALETTE[0][0] * 0.8, PALETTE[0][1], PALETTE[0][2] * 0.7], 0.08);
    let colors: Vec<[f64; 3]> = shapes
        .iter()
        .map(|(class, _)| jitter(&mut r, PALETTE[*class as usize], 0.1))
        .collect();
    let theta = r.gen_range(0.0..core::f64::consts::PI);
    let phase = r.gen_range(0.0..2.0 * core::f64::consts::PI);
    let noise =
        Normal::new(0.0, style.noise_sigma.max(0.0)).map_err(|_| Error::invalid("gen_scene", "bad noise sigma"))?;

    let mut labels = vec![BACKGROUND; h * w];
    let mut image = vec![0.0; 3 * h * w];
    let two_pi = 2.0 * core::f64::consts::PI;
    for y in 0..h {
        let fy = y as f64 + 0.5;
        let t = fy / h as f64;
        for x in 0..w {
            let fx = x as f64 + 0.5;
            let mut label = BACKGROUND;
            let mut color = [0.0; 3];
            for i in 0..3 {
                color[i] = bg_top[i] * (1.0 - t) + bg_bottom[i] * t;
            }
            for ((class, shape), c) in shapes.iter().zip(&colors) {
                if shape.contains(fy, fx) {
                    label = *class;
                    color = *c;
                }
            }
            labels[y * w + x] = label;
            let tex = style.texture_amp
                * math::sin(two_pi * style.texture_freq * (fx * math::cos(theta) + fy * math::sin(theta)) + phase);
            for (ch, &c) in color.iter().enumerate() {
                let v = (c + tex - 0.5) * style.contrast + 0.5 + style.brightness + noise.sample(&mut r);
                image[ch * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok((Tensor::new([3, h, w], image)?, LabelMap::new(h, w, labels)?))
}

/// A labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub labels: LabelMap,
}

/// Scenes `first..first + n` of `spec`, rendered in `domain`.
pub fn gen_set(spec: &SceneSpec, domain: Domain, first: u64, n: usize) -> Result<Vec<Sample>> {
    (first..first + n as u64)
        .map(|i| {
            let (image, labels) = gen_scene(&spec.nth(i), domain)?;
            Ok(Sample { image, labels })
        })
        .collect()
}

/// Crops a `[C,H,W]` image.
pub fn crop_image(image: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let &[c, ih, iw] = image.shape() else {
        return Err(Error::invalid("crop", "expected [C,H,W]"));
    };
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::invalid("crop", "window exceeds image"));
    }
    let src = image.data();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in y0..y0 + h {
            let row = ch * ih * iw + y * iw;
            data.extend_from_slice(&src[row + x0..row + x0 + w]);
        }
    }
    Tensor::new([c, h, w], data)
}

pub fn flip_image(image: &Tensor) -> Tensor {
    let w = *image.shape().last().expect("image has a width");
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_canvas() {
        let spec = SceneSpec {
            height: 16,
            ..SceneSpec::default()
        };
        assert!(gen_scene(&spec, Domain::Source).is_err());
    }

    #[test]
    fn hue_rotation_preserves_gray() {
        let g = rotate_hue([0.4, 0.4, 0.4], 1.2);
        for v in g {
            assert!((v - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn crop_and_flip() {
        let t = Tensor::from_fn([1, 2, 3], |i| i as f64);
        assert_eq!(crop_image(&t, 1, 1, 1, 2).unwrap().data(), &[4.0, 5.0]);
        assert_eq!(flip_image(&t).data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        let l = LabelMap::new(2, 3, vec![0, 1, 2, 3, 4, 255]).unwrap();
        assert_eq!(l.crop(1, 1, 1, 2).data(), &[4, 255]);
        assert_eq!(l.flip_horizontal().data(), &[2, 1, 0, 255, 4, 3]);
    }

    #[test]
    fn nth_seeds_differ() {
        let s = SceneSpec::default();
        assert_ne!(s.nth(0).seed, s.nth(1).seed);
        assert_eq!(s.nth(3).seed, s.nth(3).seed);
    }
}
