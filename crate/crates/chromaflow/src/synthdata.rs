//! Deterministic synthetic moving-shape clips with ground-truth color, flow,
//! and occlusion — the desk-scale stand-in for natural training footage.
//!
//! Shapes translate by integer per-frame velocities and carry a seeded noise
//! texture that moves with them, so the ground-truth flow warps one frame
//! onto the next essentially exactly away from occlusions. Shape colors come
//! from a fixed saturated palette keyed to shape kind and size, making the
//! gray-to-color mapping learnable from geometry and texture cues alone.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::{write_flo, FlowField, OcclusionMask};
use crate::imagecore::{save_png, to_grayscale, Image, VideoClip};
use crate::{Error, Result};

/// Fixed saturated palette; indexed by [`palette_index`].
///
/// The eight colors have distinct, well-spaced Rec.601 lumas (0.20–0.69,
/// minimum gap ≈ 0.06) that stay below the background band drawn by
/// [`random_scene`], so the gray→color mapping is recoverable from the
/// grayscale track even under the default texture noise — colorization stays
/// learnable at desk scale while the colors remain strongly saturated.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.20, 0.05, 0.95], // blue-violet, luma 0.20
    [0.78, 0.05, 0.15], // red,         luma 0.28
    [0.75, 0.05, 0.75], // magenta,     luma 0.34
    [0.05, 0.57, 0.55], // teal,        luma 0.41
    [1.00, 0.30, 0.08], // orange,      luma 0.48
    [0.10, 0.85, 0.20], // green,       luma 0.55
    [0.90, 0.45, 0.72], // pink,        luma 0.62
    [0.95, 0.68, 0.10], // amber,       luma 0.69
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disk,
}

/// Deterministic palette slot for a shape's observable gray-level cues.
pub fn palette_index(kind: ShapeKind, size: usize) -> usize {
    let k = match kind {
        ShapeKind::Rectangle => 0,
        ShapeKind::Disk => 1,
    };
    (k * 4 + size % 4) % PALETTE.len()
}

/// One moving shape: `start` is the top-left of its size×size bounding box
/// at frame 0 and `velocity` is in integer pixels per frame.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub size: usize,
    pub color: [f32; 3],
    pub start: (i32, i32),
    pub velocity: (i32, i32),
}

impl ShapeSpec {
    fn position(&self, frame: usize) -> (i32, i32) {
        (
            self.start.0 + self.velocity.0 * frame as i32,
            self.start.1 + self.velocity.1 * frame as i32,
        )
    }

    /// Whether the shape covers canvas pixel (y, x) at the given frame;
    /// on hit, returns the local texture coordinate inside the bounding box.
    fn covers(&self, frame: usize, y: i32, x: i32) -> Option<(usize, usize)> {
        let (py, px) = self.position(frame);
        let (ly, lx) = (y - py, x - px);
        let s = self.size as i32;
        if ly < 0 || lx < 0 || ly >= s || lx >= s {
            return None;
        }
        match self.kind {
            ShapeKind::Rectangle => Some((ly as usize, lx as usize)),
            ShapeKind::Disk => {
                // inscribed disk of the bounding box
                let c = (s as f32 - 1.0) / 2.0;
                let (dy, dx) = (ly as f32 - c, lx as f32 - c);
                if dy * dy + dx * dx <= c * c {
                    Some((ly as usize, lx as usize))
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Solid([f32; 3]),
    /// Vertical gradient from the top color to the bottom color.
    Gradient([f32; 3], [f32; 3]),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub shapes: Vec<ShapeSpec>,
    pub background: Background,
    pub frames: usize,
    /// Amplitude of seeded per-pixel luminance noise: background noise is
    /// static, shape noise rides along with the shape.
    pub texture_noise: f32,
    pub seed: u64,
    /// When false, a shape whose bounding box exits the canvas mid-clip is
    /// an error instead of an occlusion source.
    pub allow_exit: bool,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::InvalidParameter("empty canvas or clip".into()));
        }
        if !(0.0..=0.2).contains(&self.texture_noise) {
            return Err(Error::InvalidParameter(
                "texture_noise must lie in [0, 0.2]".into(),
            ));
        }
        let vmax = (self.height.min(self.width) / self.frames) as i32;
        for (i, s) in self.shapes.iter().enumerate() {
            if s.size == 0 {
                return Err(Error::InvalidParameter(format!("shape {i} has size 0")));
            }
            let (y, x) = s.start;
            if y < 0
                || x < 0
                || y + s.size as i32 > self.height as i32
                || x + s.size as i32 > self.width as i32
            {
                return Err(Error::InvalidParameter(format!(
                    "shape {i} does not fit the canvas at frame 0"
                )));
            }
            if s.velocity.0.abs() >= vmax || s.velocity.1.abs() >= vmax {
                return Err(Error::InvalidParameter(format!(
                    "shape {i} velocity too large for the clip length"
                )));
            }
            if s.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(Error::InvalidParameter(format!(
                    "shape {i} color out of [0, 1]"
                )));
            }
            if !self.allow_exit {
                for t in 1..self.frames {
                    let (py, px) = s.position(t);
                    if py < 0
                        || px < 0
                        || py + s.size as i32 > self.height as i32
                        || px + s.size as i32 > self.width as i32
                    {
                        return Err(Error::InvalidParameter(format!(
                            "shape {i} leaves the canvas at frame {t}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// A generated clip with its ground truth. Flow and occlusion come in both
/// directions for each consecutive pair: `flows_fwd[t]` lives on the frame-t
/// grid and points into frame t+1; `flows_bwd[t]` lives on the frame-t+1
/// grid and points back into frame t.
#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub color: VideoClip,
    pub gray: VideoClip,
    pub flows_fwd: Vec<FlowField>,
    pub flows_bwd: Vec<FlowField>,
    pub occ_fwd: Vec<OcclusionMask>,
    pub occ_bwd: Vec<OcclusionMask>,
}

/// Seeded noise texture of `n` luminance offsets in [-amp, amp].
fn noise_texture(seed: u64, salt: u64, n: usize, amp: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    (0..n).map(|_| rng.gen_range(-amp..=amp)).collect()
}

/// Topmost shape index covering (y, x) at `frame`, with its local texture
/// coordinate; None means background.
fn top_layer(spec: &SceneSpec, frame: usize, y: i32, x: i32) -> Option<(usize, (usize, usize))> {
    spec.shapes
        .iter()
        .enumerate()
        .rev()
        .find_map(|(i, s)| s.covers(frame, y, x).map(|local| (i, local)))
}

pub fn generate_clip(spec: &SceneSpec) -> Result<GeneratedClip> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let bg_noise = noise_texture(spec.seed, 0, h * w, spec.texture_noise);
    let shape_noise: Vec<Vec<f32>> = spec
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| noise_texture(spec.seed, 1 + i as u64, s.size * s.size, spec.texture_noise))
        .collect();

    let mut color_frames = Vec::with_capacity(spec.frames);
    // layer index visible per pixel (usize::MAX = background), per frame
    let mut layers: Vec<Vec<usize>> = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut data = Vec::with_capacity(h * w * 3);
        let mut layer = vec![usize::MAX; h * w];
        for y in 0..h {
            for x in 0..w {
                let (base, noise, lay) = match top_layer(spec, t, y as i32, x as i32) {
                    Some((i, (ly, lx))) => (
                        spec.shapes[i].color,
                        shape_noise[i][ly * spec.shapes[i].size + lx],
                        i,
                    ),
                    None => {
                        let base = match spec.background {
                            Background::Solid(c) => c,
                            Background::Gradient(top, bottom) => {
                                let a = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
                                [
                                    top[0] + a * (bottom[0] - top[0]),
                                    top[1] + a * (bottom[1] - top[1]),
                                    top[2] + a * (bottom[2] - top[2]),
                                ]
                            }
                        };
                        (base, bg_noise[y * w + x], usize::MAX)
                    }
                };
                layer[y * w + x] = lay;
                for c in 0..3 {
                    data.push((base[c] + noise).clamp(0.0, 1.0));
                }
            }
        }
        color_frames.push(Image::new(h, w, 3, data)?);
        layers.push(layer);
    }

    let mut flows_fwd = Vec::with_capacity(spec.frames - 1);
    let mut flows_bwd = Vec::with_capacity(spec.frames - 1);
    let mut occ_fwd = Vec::with_capacity(spec.frames - 1);
    let mut occ_bwd = Vec::with_capacity(spec.frames - 1);
    for t in 0..spec.frames.saturating_sub(1) {
        let (flow_f, occ_f) = pair_ground_truth(spec, &layers, t, t + 1);
        let (flow_b, occ_b) = pair_ground_truth(spec, &layers, t + 1, t);
        flows_fwd.push(flow_f);
        occ_fwd.push(occ_f);
        flows_bwd.push(flow_b);
        occ_bwd.push(occ_b);
    }

    let gray_frames: Vec<Image> = color_frames
        .iter()
        .map(to_grayscale)
        .collect::<Result<_>>()?;
    Ok(GeneratedClip {
        color: VideoClip::new(color_frames)?,
        gray: VideoClip::new(gray_frames)?,
        flows_fwd,
        flows_bwd,
        occ_fwd,
        occ_bwd,
    })
}

/// Ground-truth flow on the `from` grid pointing into `to`, with the
/// matching occlusion mask (1 = the same surface is visible at the
/// correspondence, 0 = covered, uncovered, or out of bounds).
fn pair_ground_truth(
    spec: &SceneSpec,
    layers: &[Vec<usize>],
    from: usize,
    to: usize,
) -> (FlowField, OcclusionMask) {
    let (h, w) = (spec.height, spec.width);
    let dir = to as i32 - from as i32;
    let mut vectors = Vec::with_capacity(h * w * 2);
    let mut visible = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let lay = layers[from][y * w + x];
            let (vy, vx) = if lay == usize::MAX {
                (0, 0)
            } else {
                let v = spec.shapes[lay].velocity;
                (v.0 * dir, v.1 * dir)
            };
            // flow is (u, v) = (x-displacement, y-displacement)
            vectors.push(vx as f32);
            vectors.push(vy as f32);
            let (ty, tx) = (y as i32 + vy, x as i32 + vx);
            let ok = ty >= 0
                && tx >= 0
                && (ty as usize) < h
                && (tx as usize) < w
                && layers[to][ty as usize * w + tx as usize] == lay;
            visible.push(ok as u8);
        }
    }
    (
        FlowField::new(h, w, vectors).expect("constructed with matching size"),
        OcclusionMask::new(h, w, visible).expect("constructed with matching size"),
    )
}

/// Seeded random scene on the default desk-scale canvas.
pub fn random_scene(height: usize, width: usize, frames: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Backgrounds live in a light achromatic band above every palette luma
    // (even after ±texture_noise), so gray level separates background from
    // shape and identifies the shape's palette color.
    let background = if rng.gen_bool(0.5) {
        let v = rng.gen_range(0.82..0.95f32);
        Background::Solid([v, v, v])
    } else {
        let a = rng.gen_range(0.80..0.86f32);
        let b = rng.gen_range(0.90..0.97f32);
        Background::Gradient([a, a, a], [b, b, b])
    };
    let n_shapes = rng.gen_range(2..=4usize);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let kind = if rng.gen_bool(0.5) {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Disk
        };
        let size = rng.gen_range(8..=15usize);
        let start = (
            rng.gen_range(0..=(height - size) as i32),
            rng.gen_range(0..=(width - size) as i32),
        );
        let vmax = (height.min(width) / frames) as i32;
        let span = 2.min(vmax - 1).max(0);
        let velocity = (rng.gen_range(-span..=span), rng.gen_range(-span..=span));
        shapes.push(ShapeSpec {
            kind,
            size,
            color: PALETTE[palette_index(kind, size)],
            start,
            velocity,
        });
    }
    SceneSpec {
        height,
        width,
        shapes,
        background,
        frames,
        texture_noise: 0.05,
        seed: seed ^ 0x5eed,
        allow_exit: true,
    }
}

pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_VAL: &str = "val";
pub const SPLIT_TEST: &str = "test";

/// 80/10/10 split by clip index.
pub fn split_of(index: usize, n_clips: usize) -> &'static str {
    if index * 10 < n_clips * 8 {
        SPLIT_TRAIN
    } else if index * 10 < n_clips * 9 {
        SPLIT_VAL
    } else {
        SPLIT_TEST
    }
}

/// One clip's files, paths relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub seed: u64,
    pub split: String,
    pub color_frames: Vec<String>,
    pub gray_frames: Vec<String>,
    pub flows_fwd: Vec<String>,
    pub flows_bwd: Vec<String>,
    pub occ_fwd: Vec<String>,
    pub occ_bwd: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub base_seed: u64,
    pub canvas: [usize; 2],
    pub frames: usize,
    pub clips: Vec<ClipRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("bad manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn clips_in_split(&self, split: &str) -> Vec<&ClipRecord> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }
}

fn save_mask(mask: &OcclusionMask, path: &Path) -> Result<()> {
    let data: Vec<f32> = mask.values().iter().map(|&v| v as f32).collect();
    save_png(&Image::new(mask.height(), mask.width(), 1, data)?, path)
}

/// Generates `n_clips` random clips under `out_dir`, writes PNG frames,
/// `.flo` flows, occlusion masks, and `manifest.json`; returns the manifest.
/// Regeneration with the same `base_seed` is byte-identical.
pub fn make_dataset(
    n_clips: usize,
    base_seed: u64,
    out_dir: &Path,
    canvas: (usize, usize),
    frames: usize,
) -> Result<Manifest> {
    if n_clips == 0 {
        return Err(Error::InvalidParameter("n_clips must be >= 1".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let seed = base_seed.wrapping_add(i as u64);
        let spec = random_scene(canvas.0, canvas.1, frames, seed);
        let clip = generate_clip(&spec)?;
        let clip_id = format!("clip_{i:04}");
        let dir = out_dir.join(&clip_id);
        clip.color.save_dir(&dir.join("color"))?;
        clip.gray.save_dir(&dir.join("gray"))?;
        let mut rec = ClipRecord {
            clip_id: clip_id.clone(),
            seed,
            split: split_of(i, n_clips).to_string(),
            color_frames: Vec::new(),
            gray_frames: Vec::new(),
            flows_fwd: Vec::new(),
            flows_bwd: Vec::new(),
            occ_fwd: Vec::new(),
            occ_bwd: Vec::new(),
        };
        for t in 0..frames {
            rec.color_frames.push(format!("{clip_id}/color/{t:06}.png"));
            rec.gray_frames.push(format!("{clip_id}/gray/{t:06}.png"));
        }
        let flow_dir = dir.join("flow");
        std::fs::create_dir_all(&flow_dir).map_err(|e| Error::io(&flow_dir, e))?;
        let occ_dir = dir.join("occ");
        std::fs::create_dir_all(&occ_dir).map_err(|e| Error::io(&occ_dir, e))?;
        for t in 0..frames - 1 {
            let ff = format!("{clip_id}/flow/fwd_{t:06}.flo");
            let fb = format!("{clip_id}/flow/bwd_{t:06}.flo");
            let of = format!("{clip_id}/occ/fwd_{t:06}.png");
            let ob = format!("{clip_id}/occ/bwd_{t:06}.png");
            write_flo(&clip.flows_fwd[t], &out_dir.join(&ff))?;
            write_flo(&clip.flows_bwd[t], &out_dir.join(&fb))?;
            save_mask(&clip.occ_fwd[t], &out_dir.join(&of))?;
            save_mask(&clip.occ_bwd[t], &out_dir.join(&ob))?;
            rec.flows_fwd.push(ff);
            rec.flows_bwd.push(fb);
            rec.occ_fwd.push(of);
            rec.occ_bwd.push(ob);
        }
        clips.push(rec);
    }
    let manifest = Manifest {
        base_seed,
        canvas: [canvas.0, canvas.1],
        frames,
        clips,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::backward_warp;
    use crate::imagecore::mean_l1;

    fn static_spec() -> SceneSpec {
        SceneSpec {
            height: 32,
            width: 32,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Rectangle,
                size: 10,
                color: PALETTE[0],
                start: (4, 4),
                velocity: (0, 0),
            }],
            background: Background::Solid([0.5, 0.5, 0.5]),
            frames: 4,
            texture_noise: 0.05,
            seed: 11,
            allow_exit: true,
        }
    }

    #[test]
    fn static_scene_is_constant_with_clear_occlusion() {
        let clip = generate_clip(&static_spec()).unwrap();
        let first = clip.color.frames()[0].data();
        for f in &clip.color.frames()[1..] {
            assert_eq!(f.data(), first);
        }
        for (flow, occ) in clip.flows_fwd.iter().zip(&clip.occ_fwd) {
            assert_eq!(flow.mean_magnitude(), 0.0);
            assert_eq!(occ.coverage(), 1.0);
        }
    }

    #[test]
    fn moving_rectangle_flow_by_construction() {
        let mut spec = static_spec();
        spec.shapes[0].velocity = (0, 2); // +2 px/frame in x
        let clip = generate_clip(&spec).unwrap();
        let flow = &clip.flows_fwd[0];
        // interior of the rectangle at frame 0
        for y in 4..14 {
            for x in 4..14 {
                assert_eq!(flow.get(y, x), (2.0, 0.0));
            }
        }
        assert_eq!(flow.get(0, 0), (0.0, 0.0));
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = random_scene(64, 64, 8, 123);
        let a = generate_clip(&spec).unwrap();
        let b = generate_clip(&spec).unwrap();
        for (fa, fb) in a.color.frames().iter().zip(b.color.frames()) {
            assert_eq!(fa.data(), fb.data());
        }
    }

    #[test]
    fn warp_invariant_on_nonoccluded_pixels() {
        for seed in 0..8u64 {
            let spec = random_scene(64, 64, 8, seed);
            let clip = generate_clip(&spec).unwrap();
            for t in 0..clip.color.frames().len() - 1 {
                let (warped, validity) =
                    backward_warp(&clip.color.frames()[t + 1], &clip.flows_fwd[t]).unwrap();
                let joint = clip.occ_fwd[t].and(&validity).unwrap();
                let mut total = 0.0f64;
                let mut count = 0usize;
                for y in 0..64 {
                    for x in 0..64 {
                        if joint.get(y, x) == 0 {
                            continue;
                        }
                        count += 1;
                        for c in 0..3 {
                            total += (clip.color.frames()[t].get(y, x, c)
                                - warped.get(y, x, c))
                            .abs() as f64;
                        }
                    }
                }
                assert!(count > 0);
                let err = total / (count * 3) as f64;
                assert!(err < 0.02, "seed {seed} pair {t}: warp error {err}");
            }
        }
    }

    #[test]
    fn occlusion_marks_covered_pixels() {
        // a moving shape drawn over a static one occludes the static one's
        // newly covered pixels
        let spec = SceneSpec {
            height: 32,
            width: 32,
            shapes: vec![
                ShapeSpec {
                    kind: ShapeKind::Rectangle,
                    size: 8,
                    color: PALETTE[1],
                    start: (12, 4),
                    velocity: (0, 0),
                },
                ShapeSpec {
                    kind: ShapeKind::Rectangle,
                    size: 8,
                    color: PALETTE[2],
                    start: (12, 16),
                    velocity: (0, -3),
                },
            ],
            background: Background::Solid([0.5, 0.5, 0.5]),
            frames: 3,
            texture_noise: 0.0,
            seed: 0,
            allow_exit: true,
        };
        let clip = generate_clip(&spec).unwrap();
        assert!(clip.occ_fwd[0].coverage() < 1.0);
        // static shape pixel that gets covered in frame 1: x in [13,16) was
        // shape 0, becomes shape 1 territory
        assert_eq!(clip.occ_fwd[0].get(12, 13), 0);
    }

    #[test]
    fn exit_disallowed_errors() {
        let mut spec = static_spec();
        spec.shapes[0].start = (4, 20);
        spec.shapes[0].velocity = (0, 3);
        spec.allow_exit = false;
        assert!(generate_clip(&spec).is_err());
        spec.allow_exit = true;
        assert!(generate_clip(&spec).is_ok());
    }

    #[test]
    fn grayscale_track_matches_color() {
        let spec = random_scene(64, 64, 4, 5);
        let clip = generate_clip(&spec).unwrap();
        for (g, c) in clip.gray.frames().iter().zip(clip.color.frames()) {
            assert_eq!(g.channels(), 1);
            assert!(mean_l1(g, &to_grayscale(c).unwrap()).unwrap() < 1e-7);
        }
    }

    #[test]
    fn dataset_split_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(10, 7, dir.path(), (32, 32), 3).unwrap();
        assert_eq!(m.clips_in_split(SPLIT_TRAIN).len(), 8);
        assert_eq!(m.clips_in_split(SPLIT_VAL).len(), 1);
        assert_eq!(m.clips_in_split(SPLIT_TEST).len(), 1);
        let loaded = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m);
        // every referenced file exists
        for c in &m.clips {
            for p in c
                .color_frames
                .iter()
                .chain(&c.gray_frames)
                .chain(&c.flows_fwd)
                .chain(&c.flows_bwd)
                .chain(&c.occ_fwd)
                .chain(&c.occ_bwd)
            {
                assert!(dir.path().join(p).exists(), "missing {p}");
            }
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_dataset(3, 99, d1.path(), (32, 32), 3).unwrap();
        make_dataset(3, 99, d2.path(), (32, 32), 3).unwrap();
        let m = Manifest::load(&d1.path().join("manifest.json")).unwrap();
        for c in &m.clips {
            for p in c.color_frames.iter().chain(&c.flows_fwd).chain(&c.occ_bwd) {
                let a = std::fs::read(d1.path().join(p)).unwrap();
                let b = std::fs::read(d2.path().join(p)).unwrap();
                assert_eq!(a, b, "file {p} differs between runs");
            }
        }
    }
}
