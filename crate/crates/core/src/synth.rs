//! Deterministic synthetic sequences: a textured target moving over a
//! textured background, with optional look-alike distractors, occluding
//! bars and scale schedules. Written to disk in the OTB layout so the
//! evaluation loader reads them unchanged.

use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Attribute;
use crate::sampling::BBox;

/// A value pinned at a frame (0-based); linear in between, held constant
/// outside the first and last keys.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Key<T> {
    pub frame: usize,
    pub value: T,
}

fn interp<T: Copy>(keys: &[Key<T>], frame: usize, lerp: impl Fn(T, T, f64) -> T) -> Option<T> {
    let first = keys.first()?;
    if frame <= first.frame {
        return Some(first.value);
    }
    for pair in keys.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if frame <= b.frame {
            let span = (b.frame - a.frame).max(1) as f64;
            return Some(lerp(a.value, b.value, (frame - a.frame) as f64 / span));
        }
    }
    keys.last().map(|k| k.value)
}

fn lerp2(a: (f64, f64), b: (f64, f64), s: f64) -> (f64, f64) {
    (a.0 + (b.0 - a.0) * s, a.1 + (b.1 - a.1) * s)
}

fn lerp1(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

/// A textured rectangle following a centre path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    /// Extents at scale 1.
    pub size: (f64, f64),
    pub path: Vec<Key<(f64, f64)>>,
    /// Multiplier on both extents; empty means constant 1.
    #[serde(default)]
    pub scale: Vec<Key<f64>>,
    pub texture_seed: u64,
}

impl ObjectSpec {
    pub fn rect(&self, frame: usize) -> Result<BBox> {
        let (cx, cy) = interp(&self.path, frame, lerp2)
            .ok_or_else(|| Error::InvalidArgument("object path has no waypoints".into()))?;
        let s = interp(&self.scale, frame, lerp1).unwrap_or(1.0);
        Ok(BBox::from_center(cx, cy, self.size.0 * s, self.size.1 * s))
    }
}

/// An opaque bar, drawn on top of everything while active.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OccluderSpec {
    pub size: (f64, f64),
    pub path: Vec<Key<(f64, f64)>>,
    /// Active for frames in `[start, end)`.
    pub start: usize,
    pub end: usize,
    pub color: [u8; 3],
}

impl OccluderSpec {
    pub fn rect(&self, frame: usize) -> Option<BBox> {
        if !(self.start..self.end).contains(&frame) {
            return None;
        }
        let (cx, cy) = interp(&self.path, frame, lerp2)?;
        Some(BBox::from_center(cx, cy, self.size.0, self.size.1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub length: usize,
    pub target: ObjectSpec,
    pub distractors: Vec<ObjectSpec>,
    pub occluders: Vec<OccluderSpec>,
    /// Per-pixel Gaussian noise std, in intensity levels.
    pub noise_std: f64,
    /// Per-frame global brightness factor drawn from `1 ± brightness_jitter`.
    pub brightness_jitter: f64,
    /// Clip the ground truth to the frame instead of rejecting the spec.
    pub clip_to_frame: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            length: 60,
            target: ObjectSpec {
                size: (64.0, 64.0),
                path: vec![Key {
                    frame: 0,
                    value: (160.0, 120.0),
                }],
                scale: Vec::new(),
                texture_seed: 1,
            },
            distractors: Vec::new(),
            occluders: Vec::new(),
            noise_std: 0.0,
            brightness_jitter: 0.0,
            clip_to_frame: false,
            seed: 0,
        }
    }
}

/// Texture cells per object side.
const TEXTURE_CELLS: usize = 5;
/// Background block size in pixels.
const BACKGROUND_BLOCK: u32 = 16;

fn texture(seed: u64) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..TEXTURE_CELLS * TEXTURE_CELLS)
        .map(|_| {
            std::array::from_fn(|_| {
                if rng.random_bool(0.5) {
                    rng.random_range(170.0..255.0)
                } else {
                    rng.random_range(0.0..80.0)
                }
            })
        })
        .collect()
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

impl SceneSpec {
    /// Same scene with fresh textures, noise and jitter. Distractors that
    /// shared the target's texture keep sharing it.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut s = self.clone();
        let old = s.target.texture_seed;
        let new = mix_seed(seed, 1);
        s.seed = seed;
        s.target.texture_seed = new;
        for (i, d) in s.distractors.iter_mut().enumerate() {
            d.texture_seed = if d.texture_seed == old {
                new
            } else {
                mix_seed(seed, 100 + i as u64)
            };
        }
        s
    }

    /// Challenge tags implied by the enabled mechanisms.
    pub fn attributes(&self) -> Vec<Attribute> {
        let mut tags = Vec::new();
        if self.brightness_jitter >= 0.1 {
            tags.push(Attribute::IV);
        }
        let scales: Vec<f64> = (0..self.length)
            .filter_map(|f| interp(&self.target.scale, f, lerp1))
            .collect();
        if let (Some(lo), Some(hi)) = (
            scales.iter().copied().reduce(f64::min),
            scales.iter().copied().reduce(f64::max),
        ) {
            if hi / lo >= 1.3 {
                tags.push(Attribute::SV);
            }
        }
        if !self.occluders.is_empty() {
            tags.push(Attribute::OCC);
        }
        if !self.distractors.is_empty() {
            tags.push(Attribute::BC);
        }
        tags
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(
                "scene needs positive length and frame size".into(),
            ));
        }
        let objects = std::iter::once(&self.target).chain(&self.distractors);
        for o in objects {
            if o.path.is_empty() || !(o.size.0 > 0.0 && o.size.1 > 0.0) {
                return Err(Error::InvalidArgument(
                    "objects need a waypoint and positive size".into(),
                ));
            }
            if o.scale.iter().any(|k| k.value.is_nan() || k.value <= 0.0) {
                return Err(Error::InvalidArgument("scale keys must be positive".into()));
            }
        }
        let frame = BBox::new(0.0, 0.0, self.width as f64, self.height as f64);
        let inside =
            |b: &BBox| b.x >= 0.0 && b.y >= 0.0 && b.right() <= frame.w && b.bottom() <= frame.h;
        if !inside(&self.target.rect(0)?) {
            return Err(Error::InvalidArgument(
                "target must start inside the frame".into(),
            ));
        }
        if !self.clip_to_frame {
            for f in 0..self.length {
                if !inside(&self.target.rect(f)?) {
                    return Err(Error::InvalidArgument(format!(
                        "target leaves the frame at frame {f}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Frames, ground truth (0-based pixel boxes) and challenge tags.
#[derive(Clone, Debug)]
pub struct SynthSequence {
    pub frames: Vec<RgbImage>,
    pub gt: Vec<BBox>,
    pub attributes: Vec<Attribute>,
}

fn background(spec: &SceneSpec) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 2));
    let bw = spec.width.div_ceil(BACKGROUND_BLOCK) as usize;
    let bh = spec.height.div_ceil(BACKGROUND_BLOCK) as usize;
    let blocks: Vec<[f64; 3]> = (0..bw * bh)
        .map(|_| {
            let base = rng.random_range(90.0..150.0);
            std::array::from_fn(|_| base + rng.random_range(-15.0..15.0))
        })
        .collect();
    let mut out = Vec::with_capacity((spec.width * spec.height) as usize);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let b = (y / BACKGROUND_BLOCK) as usize * bw + (x / BACKGROUND_BLOCK) as usize;
            out.push(blocks[b]);
        }
    }
    out
}

/// Pixel range whose centres fall inside `[lo, hi)`.
fn pixel_span(lo: f64, hi: f64, limit: u32) -> std::ops::Range<u32> {
    let a = (lo - 0.5).ceil().max(0.0) as u32;
    let b = ((hi - 0.5).ceil().max(0.0) as u32).min(limit);
    a.min(b)..b
}

fn paint_object(buf: &mut [[f64; 3]], width: u32, height: u32, r: &BBox, tex: &[[f64; 3]]) {
    for y in pixel_span(r.y, r.bottom(), height) {
        let v = ((y as f64 + 0.5 - r.y) / r.h * TEXTURE_CELLS as f64) as usize;
        for x in pixel_span(r.x, r.right(), width) {
            let u = ((x as f64 + 0.5 - r.x) / r.w * TEXTURE_CELLS as f64) as usize;
            let cell = v.min(TEXTURE_CELLS - 1) * TEXTURE_CELLS + u.min(TEXTURE_CELLS - 1);
            buf[(y * width + x) as usize] = tex[cell];
        }
    }
}

/// Renders every frame of `spec`.
pub fn generate(spec: &SceneSpec) -> Result<SynthSequence> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let bg = background(spec);
    let target_tex = texture(spec.target.texture_seed);
    let distractor_tex: Vec<_> = spec
        .distractors
        .iter()
        .map(|d| texture(d.texture_seed))
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
    let frame_box = BBox::new(0.0, 0.0, w as f64, h as f64);

    let mut frames = Vec::with_capacity(spec.length);
    let mut gt = Vec::with_capacity(spec.length);
    for f in 0..spec.length {
        let mut buf = bg.clone();
        for (d, tex) in spec.distractors.iter().zip(&distractor_tex) {
            paint_object(&mut buf, w, h, &d.rect(f)?, tex);
        }
        let target = spec.target.rect(f)?;
        paint_object(&mut buf, w, h, &target, &target_tex);
        for o in &spec.occluders {
            if let Some(r) = o.rect(f) {
                let c = o.color.map(f64::from);
                for y in pixel_span(r.y, r.bottom(), h) {
                    for x in pixel_span(r.x, r.right(), w) {
                        buf[(y * w + x) as usize] = c;
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 1000 + f as u64));
        let gain = if spec.brightness_jitter > 0.0 {
            1.0 + rng.random_range(-spec.brightness_jitter..spec.brightness_jitter)
        } else {
            1.0
        };
        let img = RgbImage::from_fn(w, h, |x, y| {
            let p = buf[(y * w + x) as usize];
            Rgb(p.map(|v| {
                let n = if spec.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (v * gain + n).round().clamp(0.0, 255.0) as u8
            }))
        });
        frames.push(img);
        let b = if spec.clip_to_frame {
            clip_box(&target, &frame_box)
        } else {
            target
        };
        gt.push(b);
    }
    Ok(SynthSequence {
        frames,
        gt,
        attributes: spec.attributes(),
    })
}

fn clip_box(b: &BBox, frame: &BBox) -> BBox {
    let x0 = b.x.clamp(0.0, frame.w - 1.0);
    let y0 = b.y.clamp(0.0, frame.h - 1.0);
    let x1 = b.right().clamp(x0 + 1.0, frame.w);
    let y1 = b.bottom().clamp(y0 + 1.0, frame.h);
    BBox::new(x0, y0, x1 - x0, y1 - y0)
}

/// Frames in which occluders hide at least `min_cover` of the target.
pub fn occluded_frames(spec: &SceneSpec, min_cover: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for f in 0..spec.length {
        let t = spec.target.rect(f)?;
        // occluders may overlap each other; count covered target pixels once
        let covered = occluded_fraction(&t, spec.occluders.iter().filter_map(|o| o.rect(f)));
        if covered >= min_cover {
            out.push(f);
        }
    }
    Ok(out)
}

fn occluded_fraction(t: &BBox, bars: impl Iterator<Item = BBox>) -> f64 {
    let bars: Vec<BBox> = bars.collect();
    let (xs, ys) = (
        pixel_span(t.x, t.right(), u32::MAX),
        pixel_span(t.y, t.bottom(), u32::MAX),
    );
    let total = xs.len() * ys.len();
    if total == 0 {
        return 0.0;
    }
    let mut hidden = 0usize;
    for y in ys {
        for x in xs.clone() {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if bars
                .iter()
                .any(|b| px >= b.x && px < b.right() && py >= b.y && py < b.bottom())
            {
                hidden += 1;
            }
        }
    }
    hidden as f64 / total as f64
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 4] = [
    "easy_translation",
    "distractor",
    "occlusion",
    "scale_change",
];

fn key<T>(frame: usize, value: T) -> Key<T> {
    Key { frame, value }
}

/// Built-in scenes, all 320×240 and 60 frames:
///
/// * `easy_translation`: a 64×64 target sweeping right then down-left.
/// * `distractor`: the target moves right while an identically textured
///   twin moves up through its path, passing about 30 px away at frame 30.
/// * `occlusion`: a static grey bar 48 px wide appears over the middle of
///   the slowly moving target for frames 25..35, hiding at least 60% of it.
/// * `scale_change`: a near-static target growing to 1.5× and back.
pub fn preset(name: &str) -> Result<SceneSpec> {
    let base = SceneSpec {
        noise_std: 2.0,
        brightness_jitter: 0.05,
        ..SceneSpec::default()
    };
    let spec = match name {
        "easy_translation" => SceneSpec {
            target: ObjectSpec {
                path: vec![
                    key(0, (90.0, 110.0)),
                    key(30, (220.0, 120.0)),
                    key(59, (180.0, 150.0)),
                ],
                ..base.target.clone()
            },
            ..base
        },
        "distractor" => {
            let target = ObjectSpec {
                path: vec![key(0, (70.0, 90.0)), key(59, (250.0, 90.0))],
                ..base.target.clone()
            };
            let twin = ObjectSpec {
                path: vec![key(0, (175.0, 200.0)), key(59, (175.0, 20.0))],
                ..target.clone()
            };
            SceneSpec {
                target,
                distractors: vec![twin],
                ..base
            }
        }
        "occlusion" => SceneSpec {
            target: ObjectSpec {
                path: vec![key(0, (100.0, 120.0)), key(60, (220.0, 120.0))],
                ..base.target.clone()
            },
            occluders: vec![OccluderSpec {
                size: (48.0, 100.0),
                path: vec![key(0, (160.0, 120.0))],
                start: 25,
                end: 35,
                color: [128, 128, 128],
            }],
            ..base
        },
        "scale_change" => SceneSpec {
            target: ObjectSpec {
                size: (56.0, 56.0),
                path: vec![key(0, (150.0, 115.0)), key(59, (170.0, 125.0))],
                scale: vec![key(0, 1.0), key(30, 1.5), key(59, 1.0)],
                ..base.target.clone()
            },
            ..base
        },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(spec)
}

/// Writes `img/0001.ppm…`, `groundtruth_rect.txt` (1-based, comma
/// separated) and `attributes.txt`.
pub fn write_sequence(seq: &SynthSequence, dir: &Path) -> Result<()> {
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir)?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save_with_format(img_dir.join(format!("{:04}.ppm", i + 1)), ImageFormat::Pnm)?;
    }
    let mut gt = String::new();
    for b in &seq.gt {
        gt.push_str(&format!("{},{},{},{}\n", b.x + 1.0, b.y + 1.0, b.w, b.h));
    }
    std::fs::write(dir.join("groundtruth_rect.txt"), gt)?;
    let tags: Vec<&str> = seq.attributes.iter().map(|a| a.code()).collect();
    std::fs::write(dir.join("attributes.txt"), tags.join(",") + "\n")?;
    Ok(())
}
