//! Procedural sprite videos: textured shapes composited over a moving
//! background, each following a smooth random walk of affine transforms.
//!
//! All randomness comes from [`SynthRng`] (xoshiro256++ seeded with
//! `seed_from_u64`). [`sample_transform`] draws one `f64` in `[0, 1)` per
//! component in the order rotation, scale, shear, dx, dy and maps it
//! linearly onto the component's range.

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::backbone::STRIDE;
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, LabelMap, ObjectId};
use crate::tensor::Tensor;

pub type SynthRng = Xoshiro256PlusPlus;

pub fn rng(seed: u64) -> SynthRng {
    SynthRng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    /// Radians.
    pub rotation: f64,
    pub scale: f64,
    pub shear: f64,
    /// Pixels.
    pub dx: f64,
    pub dy: f64,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        rotation: 0.0,
        scale: 1.0,
        shear: 0.0,
        dx: 0.0,
        dy: 0.0,
    };

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            dx,
            dy,
            ..Self::IDENTITY
        }
    }

    /// Linear part `R(θ)·[[1, shear], [0, 1]]·scale`.
    fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotation.sin_cos();
        let k = self.scale;
        [[c * k, (c * self.shear - s) * k], [s * k, (s * self.shear + c) * k]]
    }

    pub fn determinant(&self) -> f64 {
        self.scale * self.scale
    }

    /// Maps an image point back to object coordinates, for an object whose
    /// reference position is `center`.
    fn inverse_map(&self, inv: &[[f64; 2]; 2], center: (f64, f64), x: f64, y: f64) -> (f64, f64) {
        let (a, b) = ((x - self.dx) - center.0, (y - self.dy) - center.1);
        (inv[0][0] * a + inv[0][1] * b, inv[1][0] * a + inv[1][1] * b)
    }

    fn inverse_linear(&self) -> [[f64; 2]; 2] {
        let [[a, b], [c, d]] = self.linear();
        let det = a * d - b * c;
        [[d / det, -b / det], [-c / det, a / det]]
    }
}

/// Closed interval `[lo, hi]` per transform component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    pub rotation: (f64, f64),
    pub scale: (f64, f64),
    pub shear: (f64, f64),
    pub dx: (f64, f64),
    pub dy: (f64, f64),
}

impl TransformRanges {
    pub const IDENTITY: Self = Self {
        rotation: (0.0, 0.0),
        scale: (1.0, 1.0),
        shear: (0.0, 0.0),
        dx: (0.0, 0.0),
        dy: (0.0, 0.0),
    };

    /// Rotation ±30°, scale 0.5–2, shear ±0.2, translation ±20% of the frame.
    pub fn default_for(height: usize, width: usize) -> Self {
        let (tx, ty) = (0.2 * width as f64, 0.2 * height as f64);
        Self {
            rotation: (-30f64.to_radians(), 30f64.to_radians()),
            scale: (0.5, 2.0),
            shear: (-0.2, 0.2),
            dx: (-tx, tx),
            dy: (-ty, ty),
        }
    }

    fn components(&self) -> [(&'static str, (f64, f64)); 5] {
        [
            ("rotation", self.rotation),
            ("scale", self.scale),
            ("shear", self.shear),
            ("dx", self.dx),
            ("dy", self.dy),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in self.components() {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::contract(format!("degenerate {name} range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut SynthRng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

pub fn sample_transform(rng: &mut SynthRng, ranges: &TransformRanges) -> Result<AffineTransform> {
    ranges.validate()?;
    if ranges.scale.0 <= 0.0 {
        return Err(Error::contract("scale range must be positive"));
    }
    Ok(AffineTransform {
        rotation: draw(rng, ranges.rotation),
        scale: draw(rng, ranges.scale),
        shear: draw(rng, ranges.shear),
        dx: draw(rng, ranges.dx),
        dy: draw(rng, ranges.dy),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Ring];

    /// Exact support test in object coordinates for a shape of radius `r`.
    pub fn contains(self, r: f64, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Disk => u * u + v * v <= r * r,
            ShapeKind::Rectangle => u.abs() <= r && v.abs() <= 0.6 * r,
            ShapeKind::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            ShapeKind::Triangle => {
                // vertices (0, −r), (±r·√3/2, r/2)
                let h = 3f64.sqrt();
                v <= 0.5 * r && h * u - v <= r && -h * u - v <= r
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sprite {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Radius in pixels at scale 1.
    pub size: f64,
    pub texture_seed: u64,
    /// Reference position in pixels (x, y).
    pub center: (f64, f64),
}

/// Cheap stateless hash to `[0, 1)`.
fn hash01(seed: u64, a: i64, b: i64) -> f64 {
    let mut z = seed ^ (a as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (b as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

impl Sprite {
    fn shade(&self, u: f64, v: f64, tint: [f64; 3]) -> [f64; 3] {
        let phase = hash01(self.texture_seed, 0, 0) * std::f64::consts::TAU;
        let freq = 0.3 + 0.4 * hash01(self.texture_seed, 1, 0);
        let t = 0.85 + 0.15 * (freq * (u + 0.7 * v) + phase).sin();
        std::array::from_fn(|c| ((self.color[c] + tint[c]) * t).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Wave {
    freq: (f64, f64),
    phase: f64,
    amp: [f64; 3],
}

/// Smooth procedural backdrop: a colour gradient plus low-frequency waves
/// and fine hashed noise, defined on the whole plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub seed: u64,
    base: [f64; 3],
    gradient: [[f64; 3]; 2],
    waves: Vec<Wave>,
    noise: f64,
}

impl Background {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed ^ 0x6267_5f73_6565_64);
        let mut unit = || -> f64 { r.random() };
        let base = [0.3 + 0.4 * unit(), 0.3 + 0.4 * unit(), 0.3 + 0.4 * unit()];
        let gradient = [
            [0.004 * (unit() - 0.5), 0.004 * (unit() - 0.5), 0.004 * (unit() - 0.5)],
            [0.004 * (unit() - 0.5), 0.004 * (unit() - 0.5), 0.004 * (unit() - 0.5)],
        ];
        let waves = (0..3)
            .map(|_| Wave {
                freq: (0.3 * (unit() - 0.5), 0.3 * (unit() - 0.5)),
                phase: unit() * std::f64::consts::TAU,
                amp: [0.1 * unit(), 0.1 * unit(), 0.1 * unit()],
            })
            .collect();
        Self {
            seed,
            base,
            gradient,
            waves,
            noise: 0.04,
        }
    }

    fn value(&self, u: f64, v: f64) -> [f64; 3] {
        let n = self.noise * (hash01(self.seed, u.floor() as i64, v.floor() as i64) - 0.5);
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let mut x = self.base[c] + self.gradient[0][c] * u + self.gradient[1][c] * v + n;
            for w in &self.waves {
                x += w.amp[c] * (w.freq.0 * u + w.freq.1 * v + w.phase).sin();
            }
            *o = x.clamp(0.0, 1.0);
        }
        out
    }
}

/// Background and per-sprite transforms for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTransforms {
    pub background: AffineTransform,
    pub sprites: Vec<AffineTransform>,
    /// Additive colour offset per sprite; empty means none.
    #[serde(default)]
    pub tints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct Clip {
    /// `3×h×w`, values in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    /// Visible pixels per object id (ids count from 1 in sprite order);
    /// objects with no visible pixel are absent from that frame's map.
    pub masks: Vec<BTreeMap<ObjectId, BinaryMask>>,
    pub seed: u64,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[1], s[2])
    }

    pub fn label_map(&self, t: usize) -> LabelMap {
        let (h, w) = self.dims();
        LabelMap::from_masks(h, w, &self.masks[t]).expect("masks share the frame size")
    }

    /// Mask of `id` in frame `t`, empty when the object is not visible.
    pub fn mask(&self, t: usize, id: ObjectId) -> BinaryMask {
        let (h, w) = self.dims();
        self.masks[t].get(&id).cloned().unwrap_or_else(|| BinaryMask::empty(h, w))
    }

    pub fn object_ids(&self) -> Vec<ObjectId> {
        self.masks[0].keys().copied().collect()
    }

    /// Frames `indices` as a new clip.
    pub fn select(&self, indices: &[usize]) -> Clip {
        Clip {
            frames: indices.iter().map(|&i| self.frames[i].clone()).collect(),
            masks: indices.iter().map(|&i| self.masks[i].clone()).collect(),
            seed: self.seed,
        }
    }
}

fn check_frame_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % STRIDE != 0 || width % STRIDE != 0 {
        return Err(Error::contract(format!(
            "frame size {height}×{width} must be a positive multiple of {STRIDE}"
        )));
    }
    Ok(())
}

/// Composites the sprites, in order, over the background for every frame.
pub fn render_clip(
    background: &Background,
    sprites: &[Sprite],
    transforms: &[FrameTransforms],
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Clip> {
    check_frame_size(height, width)?;
    if sprites.len() > ObjectId::MAX as usize {
        return Err(Error::contract("too many sprites for 8-bit object ids"));
    }
    let bg_center = (width as f64 / 2.0, height as f64 / 2.0);
    let plane = height * width;
    let mut frames = Vec::with_capacity(transforms.len());
    let mut masks = Vec::with_capacity(transforms.len());
    for ft in transforms {
        if ft.sprites.len() != sprites.len() || !(ft.tints.is_empty() || ft.tints.len() == sprites.len()) {
            return Err(Error::contract(format!(
                "{} sprite transforms for {} sprites",
                ft.sprites.len(),
                sprites.len()
            )));
        }
        for t in std::iter::once(&ft.background).chain(&ft.sprites) {
            if !(t.determinant().abs() > 1e-12) {
                return Err(Error::contract("transform is not invertible"));
            }
        }
        let mut data = vec![0f32; 3 * plane];
        let mut owner = vec![0 as ObjectId; plane];
        let bg_inv = ft.background.inverse_linear();
        let sprite_inv: Vec<_> = ft.sprites.iter().map(|t| t.inverse_linear()).collect();
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                let (u, v) = ft.background.inverse_map(&bg_inv, bg_center, xf, yf);
                let mut rgb = background.value(u + bg_center.0, v + bg_center.1);
                let mut id = 0;
                for (k, (s, t)) in sprites.iter().zip(&ft.sprites).enumerate() {
                    let (u, v) = t.inverse_map(&sprite_inv[k], s.center, xf, yf);
                    if s.kind.contains(s.size, u, v) {
                        rgb = s.shade(u, v, ft.tints.get(k).copied().unwrap_or_default());
                        id = k as ObjectId + 1;
                    }
                }
                let i = y * width + x;
                owner[i] = id;
                for c in 0..3 {
                    data[c * plane + i] = rgb[c] as f32;
                }
            }
        }
        frames.push(Tensor::new([3, height, width], data)?);
        let labels = LabelMap::new(height, width, owner)?;
        masks.push(labels.masks());
    }
    Ok(Clip { frames, masks, seed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Sprite radius range in pixels.
    pub sprite_size: (f64, f64),
    /// Distribution of each sprite's transform in the first frame.
    pub initial: TransformRanges,
    /// Per-frame increments of each sprite's transform.
    pub walk: TransformRanges,
    /// Per-frame increments of the background transform.
    pub background_walk: TransformRanges,
    /// Smallest visible area, in pixels, of every object in the first frame.
    pub min_visible: usize,
    /// Per-frame bound on each sprite's colour drift, per channel.
    pub color_walk: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_size(64, 64)
    }
}

impl SynthConfig {
    pub fn for_size(height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        let step = side / 32.0;
        Self {
            height,
            width,
            sprite_size: (side / 8.0, side / 4.5),
            initial: TransformRanges {
                rotation: (-30f64.to_radians(), 30f64.to_radians()),
                scale: (0.75, 1.25),
                shear: (-0.2, 0.2),
                dx: (0.0, 0.0),
                dy: (0.0, 0.0),
            },
            walk: TransformRanges {
                rotation: (-0.12, 0.12),
                scale: (-0.04, 0.04),
                shear: (-0.03, 0.03),
                dx: (-step, step),
                dy: (-step, step),
            },
            background_walk: TransformRanges {
                rotation: (-0.02, 0.02),
                scale: (0.0, 0.0),
                shear: (0.0, 0.0),
                dx: (-step / 2.0, step / 2.0),
                dy: (-step / 2.0, step / 2.0),
            },
            min_visible: (height * width) / 100,
            color_walk: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_frame_size(self.height, self.width)?;
        self.initial.validate()?;
        self.walk.validate()?;
        self.background_walk.validate()?;
        let (lo, hi) = self.sprite_size;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::contract(format!("sprite size range [{lo}, {hi}] is degenerate")));
        }
        if !(self.color_walk >= 0.0) {
            return Err(Error::contract("color_walk must be non-negative"));
        }
        Ok(())
    }
}

/// Scale bounds kept by the random walk.
const SCALE_BOUNDS: (f64, f64) = (0.5, 2.0);
const MAX_PLACEMENT_ATTEMPTS: usize = 64;

fn random_sprite(rng: &mut SynthRng, cfg: &SynthConfig) -> Sprite {
    let kind = ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())];
    let color = loop {
        let c: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let (mx, mn) = (c.iter().cloned().fold(0.0, f64::max), c.iter().cloned().fold(1.0, f64::min));
        // saturated colours stand out from the muted background
        if mx - mn > 0.4 {
            break c;
        }
    };
    let size = draw(rng, cfg.sprite_size);
    let texture_seed = rng.random();
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let center = (draw(rng, (0.25 * w, 0.75 * w)), draw(rng, (0.25 * h, 0.75 * h)));
    Sprite {
        kind,
        color,
        size,
        texture_seed,
        center,
    }
}

/// Adds `step` to `state`, keeping scale in bounds and the sprite centre
/// inside the frame by reflection.
fn walk_step(state: &AffineTransform, step: &AffineTransform, center: (f64, f64), dims: (f64, f64)) -> AffineTransform {
    let reflect = |pos: f64, delta: f64, extent: f64| -> f64 {
        let p = pos + delta;
        if p < 0.0 {
            -p
        } else if p > extent - 1.0 {
            2.0 * (extent - 1.0) - p
        } else {
            p
        }
    };
    let (w, h) = dims;
    AffineTransform {
        rotation: state.rotation + step.rotation,
        scale: (state.scale + step.scale).clamp(SCALE_BOUNDS.0, SCALE_BOUNDS.1),
        shear: (state.shear + step.shear).clamp(-0.5, 0.5),
        dx: reflect(center.0 + state.dx, step.dx, w) - center.0,
        dy: reflect(center.1 + state.dy, step.dy, h) - center.1,
    }
}

/// A `length`-frame video of `num_objects` sprites following independent
/// random walks over a drifting background.
pub fn make_sequence(seed: u64, length: usize, num_objects: usize, cfg: &SynthConfig) -> Result<Clip> {
    make_occluded_sequence(seed, length, num_objects, 0, cfg)
}

/// Like [`make_sequence`], with `occluders` extra sprites composited on top
/// of the objects. Occluders are not annotated: their pixels are background
/// in the masks, so objects can be hidden partly or entirely.
pub fn make_occluded_sequence(
    seed: u64,
    length: usize,
    num_objects: usize,
    occluders: usize,
    cfg: &SynthConfig,
) -> Result<Clip> {
    cfg.validate()?;
    if length == 0 {
        return Err(Error::contract("sequence length must be positive"));
    }
    if num_objects == 0 || num_objects + occluders > ObjectId::MAX as usize {
        return Err(Error::contract(format!("object count {num_objects} is out of range")));
    }
    let mut rng = rng(seed);
    let background = Background::new(rng.random());
    let dims = (cfg.width as f64, cfg.height as f64);
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let sprites: Vec<Sprite> = (0..num_objects + occluders).map(|_| random_sprite(&mut rng, cfg)).collect();
        let mut frame = FrameTransforms {
            background: AffineTransform::IDENTITY,
            sprites: sprites
                .iter()
                .map(|_| sample_transform(&mut rng, &cfg.initial))
                .collect::<Result<_>>()?,
            tints: Vec::new(),
        };
        let first = render_clip(&background, &sprites, std::slice::from_ref(&frame), cfg.height, cfg.width, seed)?;
        let visible = (1..=num_objects as ObjectId)
            .all(|id| first.masks[0].get(&id).is_some_and(|m| m.count() >= cfg.min_visible.max(1)));
        if !visible {
            continue;
        }
        let mut transforms = vec![frame.clone()];
        for _ in 1..length {
            let bg_step = sample_transform_unchecked(&mut rng, &cfg.background_walk);
            frame.background = walk_step(&frame.background, &bg_step, (dims.0 / 2.0, dims.1 / 2.0), (f64::INFINITY, f64::INFINITY));
            for (state, sprite) in frame.sprites.iter_mut().zip(&sprites) {
                let step = sample_transform_unchecked(&mut rng, &cfg.walk);
                *state = walk_step(state, &step, sprite.center, dims);
            }
            if cfg.color_walk > 0.0 {
                frame.tints.resize(sprites.len(), [0.0; 3]);
                for (tint, sprite) in frame.tints.iter_mut().zip(&sprites) {
                    for c in 0..3 {
                        let next = tint[c] + draw(&mut rng, (-cfg.color_walk, cfg.color_walk));
                        tint[c] = next.clamp(-sprite.color[c], 1.0 - sprite.color[c]);
                    }
                }
            }
            transforms.push(frame.clone());
        }
        let mut clip = render_clip(&background, &sprites, &transforms, cfg.height, cfg.width, seed)?;
        for m in &mut clip.masks {
            m.retain(|&id, _| id as usize <= num_objects);
        }
        return Ok(clip);
    }
    Err(Error::contract(format!(
        "could not place {num_objects} visible sprites in {MAX_PLACEMENT_ATTEMPTS} attempts"
    )))
}

/// Draws increments, which may be negative or zero for every component.
fn sample_transform_unchecked(rng: &mut SynthRng, ranges: &TransformRanges) -> AffineTransform {
    AffineTransform {
        rotation: draw(rng, ranges.rotation),
        scale: draw(rng, ranges.scale),
        shear: draw(rng, ranges.shear),
        dx: draw(rng, ranges.dx),
        dy: draw(rng, ranges.dy),
    }
}

/// Three frame indices `(i, i+d, i+2d)` with `d` uniform in
/// `[0, min(interval_max, (length−1)/2)]`.
pub fn sample_triple(rng: &mut SynthRng, length: usize, interval_max: usize) -> Result<[usize; 3]> {
    if length == 0 {
        return Err(Error::contract("cannot sample from an empty sequence"));
    }
    let d = rng.random_range(0..=interval_max.min((length - 1) / 2));
    let i = rng.random_range(0..=length - 1 - 2 * d);
    Ok([i, i + d, i + 2 * d])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kind: ShapeKind, size: f64, center: (f64, f64)) -> Sprite {
        Sprite {
            kind,
            color: [1.0, 0.0, 0.0],
            size,
            texture_seed: 1,
            center,
        }
    }

    fn frames(n: usize, sprites: &[AffineTransform]) -> Vec<FrameTransforms> {
        (0..n)
            .map(|_| FrameTransforms {
                background: AffineTransform::IDENTITY,
                sprites: sprites.to_vec(),
                tints: Vec::new(),
            })
            .collect()
    }

    #[test]
    fn identity_ranges_give_identity() {
        let t = sample_transform(&mut rng(5), &TransformRanges::IDENTITY).unwrap();
        assert_eq!(t, AffineTransform::IDENTITY);
    }

    #[test]
    fn transform_reproduces_rng_stream() {
        let ranges = TransformRanges::default_for(64, 64);
        let t = sample_transform(&mut rng(42), &ranges).unwrap();
        let mut r = Xoshiro256PlusPlus::seed_from_u64(42);
        let mut u = || -> f64 { r.random() };
        let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
        let want = AffineTransform {
            rotation: lerp(ranges.rotation, u()),
            scale: lerp(ranges.scale, u()),
            shear: lerp(ranges.shear, u()),
            dx: lerp(ranges.dx, u()),
            dy: lerp(ranges.dy, u()),
        };
        assert_eq!(t, want);
        assert_eq!(t, sample_transform(&mut rng(42), &ranges).unwrap());
    }

    #[test]
    fn degenerate_ranges_rejected() {
        let mut r = TransformRanges::IDENTITY;
        r.shear = (0.1, -0.1);
        assert!(sample_transform(&mut rng(0), &r).is_err());
        r = TransformRanges::IDENTITY;
        r.scale = (0.0, 1.0);
        assert!(sample_transform(&mut rng(0), &r).is_err());
        r = TransformRanges::IDENTITY;
        r.dx = (f64::NAN, 1.0);
        assert!(sample_transform(&mut rng(0), &r).is_err());
    }

    #[test]
    fn shapes_have_exact_support() {
        assert!(ShapeKind::Disk.contains(5.0, 3.0, 4.0));
        assert!(!ShapeKind::Disk.contains(5.0, 3.0, 4.1));
        assert!(!ShapeKind::Ring.contains(4.0, 0.0, 0.0));
        assert!(ShapeKind::Ring.contains(4.0, 3.0, 0.0));
        assert!(ShapeKind::Rectangle.contains(4.0, 4.0, 2.4));
        assert!(!ShapeKind::Rectangle.contains(4.0, 4.0, 2.5));
        assert!(ShapeKind::Triangle.contains(4.0, 0.0, -3.9));
        assert!(!ShapeKind::Triangle.contains(4.0, 1.0, -3.9));
        assert!(ShapeKind::Triangle.contains(4.0, 3.4, 2.0));
    }

    #[test]
    fn identity_transforms_repeat_frames() {
        let s = [single(ShapeKind::Disk, 6.0, (20.0, 20.0))];
        let clip = render_clip(&Background::new(3), &s, &frames(3, &[AffineTransform::IDENTITY]), 32, 48, 0).unwrap();
        assert_eq!(clip.len(), 3);
        for t in 1..3 {
            assert_eq!(clip.frames[t], clip.frames[0]);
            assert_eq!(clip.masks[t], clip.masks[0]);
        }
        assert!(clip.frames[0].data().iter().all(|v| (0.0..=1.0).contains(v)));
        let m = &clip.masks[0][&1];
        let want = BinaryMask::from_fn(32, 48, |y, x| (x as f64 - 20.0).powi(2) + (y as f64 - 20.0).powi(2) <= 36.0);
        assert_eq!(m, &want);
    }

    #[test]
    fn translation_shifts_mask() {
        let s = [single(ShapeKind::Triangle, 9.0, (40.3, 17.6))];
        let mut tf = frames(2, &[AffineTransform::IDENTITY]);
        tf[1].sprites[0] = AffineTransform::translation(5.0, 0.0);
        let clip = render_clip(&Background::new(1), &s, &tf, 32, 48, 0).unwrap();
        let m0 = clip.mask(0, 1);
        assert!(m0.count() > 50);
        assert_eq!(clip.mask(1, 1), m0.shifted(5, 0));
        // cropped at the border: the shifted triangle loses pixels
        assert!(clip.mask(1, 1).count() < m0.count());
    }

    #[test]
    fn later_sprite_owns_overlap() {
        let s = [
            single(ShapeKind::Disk, 8.0, (16.0, 16.0)),
            single(ShapeKind::Rectangle, 6.0, (20.0, 16.0)),
        ];
        let clip = render_clip(&Background::new(1), &s, &frames(1, &[AffineTransform::IDENTITY; 2]), 32, 32, 0).unwrap();
        let (a, b) = (clip.mask(0, 1), clip.mask(0, 2));
        assert!(a.data().iter().zip(b.data()).all(|(&x, &y)| !(x && y)));
        assert!(b.get(16, 20) && !a.get(16, 20));
        assert!(a.get(16, 10));
    }

    #[test]
    fn out_of_frame_sprite_is_dropped() {
        let s = [single(ShapeKind::Disk, 4.0, (16.0, 16.0))];
        let mut tf = frames(2, &[AffineTransform::IDENTITY]);
        tf[1].sprites[0] = AffineTransform::translation(100.0, 0.0);
        let clip = render_clip(&Background::new(1), &s, &tf, 32, 32, 0).unwrap();
        assert_eq!(clip.masks[0].len(), 1);
        assert!(clip.masks[1].is_empty());
    }

    #[test]
    fn rejects_bad_sizes() {
        let s = [single(ShapeKind::Disk, 4.0, (16.0, 16.0))];
        assert!(render_clip(&Background::new(1), &s, &frames(1, &[AffineTransform::IDENTITY]), 30, 32, 0).is_err());
        assert!(make_sequence(0, 3, 1, &SynthConfig::for_size(40, 32)).is_err());
    }

    #[test]
    fn zero_walk_gives_constant_clip() {
        let mut cfg = SynthConfig::default();
        cfg.walk = TransformRanges {
            scale: (0.0, 0.0),
            ..TransformRanges::IDENTITY
        };
        cfg.background_walk = cfg.walk;
        let clip = make_sequence(9, 3, 2, &cfg).unwrap();
        assert_eq!(clip.frames[1], clip.frames[0]);
        assert_eq!(clip.frames[2], clip.frames[0]);
        assert_eq!(clip.masks[2], clip.masks[0]);
    }

    #[test]
    fn sequences_are_deterministic_and_move() {
        let cfg = SynthConfig::default();
        let a = make_sequence(11, 12, 2, &cfg).unwrap();
        let b = make_sequence(11, 12, 2, &cfg).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.masks, b.masks);
        assert_eq!(a.object_ids(), vec![1, 2]);
        assert_ne!(a.frames[0], a.frames[11]);
        let c = make_sequence(12, 12, 2, &cfg).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn triple_indices_stay_in_bounds() {
        let mut r = rng(3);
        for _ in 0..500 {
            let [a, b, c] = sample_triple(&mut r, 60, 25).unwrap();
            assert!(a <= b && b <= c && c < 60);
            assert_eq!(b - a, c - b);
            assert!(b - a <= 25);
        }
        let [a, b, c] = sample_triple(&mut rng(0), 1, 25).unwrap();
        assert_eq!((a, b, c), (0, 0, 0));
    }
}
