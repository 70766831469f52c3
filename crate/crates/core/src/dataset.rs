//! Synthetic moving-shape videos with analytically exact depth, sketch and RGB conditions.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::VideoTensor;
use crate::error::{ensure, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::vocab::{self, TokenId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Modality {
    Sketch,
    Depth,
    Rgb,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Sketch, Modality::Depth, Modality::Rgb];

    /// Channels of the condition map this modality produces.
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth | Modality::Sketch => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Sketch => "sketch",
            Modality::Depth => "depth",
            Modality::Rgb => "rgb",
        }
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sketch" => Ok(Modality::Sketch),
            "depth" => Ok(Modality::Depth),
            "rgb" => Ok(Modality::Rgb),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

impl core::fmt::Display for Modality {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ShapeKind {
    Circle,
    Square,
}

/// A palette colour. Each colour renders at a fixed depth, which makes colour an
/// exact depth oracle on in-domain frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PaletteEntry {
    pub word: &'static str,
    pub rgb: [f64; 3],
    pub depth: f64,
}

pub const PALETTE: [PaletteEntry; 6] = [
    PaletteEntry { word: "red", rgb: [0.90, 0.10, 0.10], depth: 0.20 },
    PaletteEntry { word: "green", rgb: [0.10, 0.80, 0.20], depth: 0.32 },
    PaletteEntry { word: "blue", rgb: [0.15, 0.20, 0.95], depth: 0.44 },
    PaletteEntry { word: "yellow", rgb: [0.95, 0.85, 0.10], depth: 0.56 },
    PaletteEntry { word: "cyan", rgb: [0.10, 0.85, 0.90], depth: 0.68 },
    PaletteEntry { word: "magenta", rgb: [0.85, 0.15, 0.85], depth: 0.80 },
];

pub const BACKGROUND_RGB: [f64; 3] = [0.45, 0.45, 0.45];
pub const BACKGROUND_DEPTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneObject {
    pub kind: ShapeKind,
    /// Colour in `[0, 1]³`.
    pub color: [f64; 3],
    /// Centre at frame 0, in normalized image coordinates.
    pub start: [f64; 2],
    /// Centre displacement per frame.
    pub velocity: [f64; 2],
    /// Radius (circle) or half-width (square) as a fraction of the image side.
    pub size: f64,
    /// Smaller is closer; in `(0, 1]`.
    pub depth: f64,
}

impl SceneObject {
    pub fn center(&self, frame: usize) -> [f64; 2] {
        [self.start[0] + self.velocity[0] * frame as f64, self.start[1] + self.velocity[1] * frame as f64]
    }

    fn covers(&self, frame: usize, x: f64, y: f64) -> bool {
        let [cx, cy] = self.center(frame);
        match self.kind {
            ShapeKind::Circle => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= self.size * self.size,
            ShapeKind::Square => (x - cx).abs() <= self.size && (y - cy).abs() <= self.size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background_depth: f64,
    pub prompt: Vec<TokenId>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self, frames: usize) -> Result<()> {
        ensure!(frames >= 1, "need at least one frame");
        for (i, o) in self.objects.iter().enumerate() {
            ensure!(o.depth > 0.0 && o.depth <= 1.0, "object {i}: depth {} outside (0, 1]", o.depth);
            ensure!(o.depth < self.background_depth, "object {i}: depth not in front of background");
            ensure!(o.size > 0.0, "object {i}: size must be positive");
            for j in 0..i {
                ensure!(self.objects[j].depth != o.depth, "objects {j} and {i} share depth {}", o.depth);
            }
            for f in [0, frames - 1] {
                let [cx, cy] = o.center(f);
                ensure!(
                    (0.0..=1.0).contains(&cx) && (0.0..=1.0).contains(&cy),
                    "object {i} leaves the frame by frame {f}"
                );
            }
        }
        Ok(())
    }
}

/// Renders `(rgb [N,3,H,W] in [-1,1], depth [N,1,H,W])`.
pub fn render_scene<T: Real>(
    spec: &SceneSpec,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<(VideoTensor<T>, Tensor<T>)> {
    spec.validate(frames)?;
    ensure!(height > 0 && width > 0, "empty image size");
    let mut rgb = Tensor::zeros(&[frames, 3, height, width]);
    let mut depth = Tensor::zeros(&[frames, 1, height, width]);
    let plane = height * width;
    for n in 0..frames {
        for py in 0..height {
            let y = (py as f64 + 0.5) / height as f64;
            for px in 0..width {
                let x = (px as f64 + 0.5) / width as f64;
                let mut best: Option<&SceneObject> = None;
                for o in &spec.objects {
                    if o.covers(n, x, y) && best.is_none_or(|b| o.depth < b.depth) {
                        best = Some(o);
                    }
                }
                let (color, d) = match best {
                    Some(o) => (o.color, o.depth),
                    None => (BACKGROUND_RGB, spec.background_depth),
                };
                let idx = py * width + px;
                depth.slab_mut(n)[idx] = T::lit(d);
                let frame = rgb.slab_mut(n);
                for c in 0..3 {
                    frame[c * plane + idx] = T::lit(2.0 * color[c] - 1.0);
                }
            }
        }
    }
    Ok((rgb, depth))
}

/// Binary edge map of a `[3,H,W]` frame in `[-1,1]`: 3×3 Sobel gradient magnitude of
/// the `[0,1]` luminance, with replicated borders, compared against `threshold`.
pub fn sketch<T: Real>(rgb_frame: &Tensor<T>, threshold: f64) -> Tensor<T> {
    let (h, w) = (rgb_frame.shape()[1], rgb_frame.shape()[2]);
    let plane = h * w;
    let d = rgb_frame.data();
    let gray: Vec<f64> = (0..plane)
        .map(|i| {
            let c = |k: usize| (d[k * plane + i].as_f64() + 1.0) * 0.5;
            0.299 * c(0) + 0.587 * c(1) + 0.114 * c(2)
        })
        .collect();
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[yy * w + xx]
    };
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        if libm::sqrt(gx * gx + gy * gy) > threshold {
            T::one()
        } else {
            T::zero()
        }
    })
}

pub const DEFAULT_SKETCH_THRESHOLD: f64 = 0.2;

/// Condition map `[C_cond, H, W]` for one frame.
pub fn extract_condition<T: Real>(
    rgb_frame: &Tensor<T>,
    depth_frame: &Tensor<T>,
    modality: Modality,
    sketch_threshold: f64,
) -> Tensor<T> {
    match modality {
        Modality::Rgb => rgb_frame.clone(),
        Modality::Depth => depth_frame.clone(),
        Modality::Sketch => sketch(rgb_frame, sketch_threshold),
    }
}

/// One frame `i` of a rank-4 tensor, as `[C, H, W]`.
pub fn frame<T: Real>(video: &Tensor<T>, i: usize) -> Tensor<T> {
    let (_, c, h, w) = video.dims4();
    Tensor::from_vec(&[c, h, w], video.slab(i).to_vec()).expect("frame size")
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord<T> {
    pub spec: SceneSpec,
    pub rgb: VideoTensor<T>,
    pub depth: Tensor<T>,
}

impl<T: Real> VideoRecord<T> {
    pub fn frames(&self) -> usize {
        self.rgb.shape()[0]
    }

    /// Condition maps for every frame, `[N, C_cond, H, W]`.
    pub fn conditions(&self, modality: Modality, sketch_threshold: f64) -> Tensor<T> {
        let (n, _, h, w) = self.rgb.dims4();
        let c = modality.channels();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            let m = extract_condition(&frame(&self.rgb, i), &frame(&self.depth, i), modality, sketch_threshold);
            out.slab_mut(i).copy_from_slice(m.data());
        }
        out
    }
}

fn direction_word(v: [f64; 2]) -> &'static str {
    if v[0] == 0.0 && v[1] == 0.0 {
        "still"
    } else if v[0].abs() >= v[1].abs() {
        if v[0] > 0.0 { "right" } else { "left" }
    } else if v[1] > 0.0 {
        "down"
    } else {
        "up"
    }
}

fn shape_word(k: ShapeKind) -> &'static str {
    match k {
        ShapeKind::Circle => "circle",
        ShapeKind::Square => "square",
    }
}

/// Random scene with one or two objects whose prompt describes colour, shape and motion.
pub fn random_scene(seed: u64, frames: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(1..=2);
    let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
    colors.shuffle(&mut rng);
    let span = frames.saturating_sub(1).max(1) as f64;
    let mut objects = Vec::with_capacity(count);
    let mut prompt = Vec::new();
    for &ci in colors.iter().take(count) {
        let kind = if rng.random_bool(0.5) { ShapeKind::Circle } else { ShapeKind::Square };
        let size: f64 = rng.random_range(0.14..0.24);
        let travel: f64 = rng.random_range(0.25..0.5);
        let dir: [f64; 2] = match rng.random_range(0..5) {
            0 => [1.0, 0.0],
            1 => [-1.0, 0.0],
            2 => [0.0, 1.0],
            3 => [0.0, -1.0],
            _ => [0.0, 0.0],
        };
        let velocity = [dir[0] * travel / span, dir[1] * travel / span];
        let mut start = [0.0; 2];
        for a in 0..2 {
            let end_shift = velocity[a] * (frames.saturating_sub(1)) as f64;
            let lo = size.max(size - end_shift);
            let hi = (1.0 - size).min(1.0 - size - end_shift);
            start[a] = if hi > lo { rng.random_range(lo..hi) } else { 0.5 - end_shift / 2.0 };
        }
        let entry = PALETTE[ci];
        objects.push(SceneObject { kind, color: entry.rgb, start, velocity, size, depth: entry.depth });
        for w in [entry.word, shape_word(kind), direction_word(velocity)] {
            prompt.push(vocab::token(w).expect("scene words are in the vocabulary"));
        }
    }
    SceneSpec { objects, background_depth: BACKGROUND_DEPTH, prompt, seed }
}

/// Seed of scene `index` in a dataset generated from `base_seed`.
pub fn scene_seed(base_seed: u64, index: usize) -> u64 {
    let mut z = base_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset<T: Real>(
    base_seed: u64,
    count: usize,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<VideoRecord<T>>> {
    (0..count)
        .map(|i| {
            let spec = random_scene(scene_seed(base_seed, i), frames);
            let (rgb, depth) = render_scene(&spec, frames, height, width)?;
            Ok(VideoRecord { spec, rgb, depth })
        })
        .collect()
}
