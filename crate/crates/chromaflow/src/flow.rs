//! Optical flow: field representation, Middlebury `.flo` I/O, backward
//! warping with validity masks, forward-backward occlusion detection, and a
//! pyramidal Horn-Schunck estimator.
//!
//! Flow convention, used everywhere in this crate: a `FlowField` lives on the
//! TARGET grid and stores per-pixel displacements into the source frame. To
//! warp source frame `s` onto target grid `t`, sample `s` at `p + flow(p)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::imagecore::Image;
use crate::{Error, Result};

const FLO_MAGIC: &[u8; 4] = b"PIEH";

/// Per-pixel 2D displacement field on a target grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Interleaved (u, v) pairs, row-major. u is the x-displacement.
    vectors: Vec<f32>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != height * width * 2 {
            return Err(Error::ShapeMismatch(format!(
                "flow vector count {} does not match {height}x{width}x2",
                vectors.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFlow("non-finite flow value".into()));
        }
        Ok(FlowField {
            height,
            width,
            vectors,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            vectors: vec![0.0; height * width * 2],
        }
    }

    /// Constant displacement everywhere.
    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        let mut vectors = Vec::with_capacity(height * width * 2);
        for _ in 0..height * width {
            vectors.push(u);
            vectors.push(v);
        }
        FlowField {
            height,
            width,
            vectors,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// (u, v) at (row, col).
    pub fn get(&self, y: usize, x: usize) -> (f32, f32) {
        let i = (y * self.width + x) * 2;
        (self.vectors[i], self.vectors[i + 1])
    }

    /// Bilinearly sampled (u, v) at a real-valued position; clamps to border.
    pub fn sample(&self, y: f32, x: f32) -> (f32, f32) {
        let u = bilinear_sample_clamped(&self.vectors, self.height, self.width, 2, 0, y, x);
        let v = bilinear_sample_clamped(&self.vectors, self.height, self.width, 2, 1, y, x);
        (u, v)
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = (self.height * self.width) as f64;
        self.vectors
            .chunks_exact(2)
            .map(|p| ((p[0] as f64).powi(2) + (p[1] as f64).powi(2)).sqrt())
            .sum::<f64>()
            / n
    }
}

/// Binary per-pixel mask; 1 marks usable (non-occluded, in-bounds) pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl OcclusionMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch("mask size mismatch".into()));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::InvalidParameter("mask values must be 0/1".into()));
        }
        Ok(OcclusionMask {
            height,
            width,
            values,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        OcclusionMask {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    /// Fraction of pixels marked usable.
    pub fn coverage(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// Pixel-wise AND.
    pub fn and(&self, other: &OcclusionMask) -> Result<OcclusionMask> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch("mask AND size mismatch".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a & b)
            .collect();
        OcclusionMask::new(self.height, self.width, values)
    }
}

/// Reads a Middlebury `.flo` file.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != FLO_MAGIC {
        return Err(Error::InvalidFlow(format!(
            "{}: missing PIEH magic",
            path.display()
        )));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + height * width * 2 * 4;
    if bytes.len() != expected {
        return Err(Error::InvalidFlow(format!(
            "{}: expected {expected} bytes for {width}x{height}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let vectors: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FlowField::new(height, width, vectors)
        .map_err(|_| Error::InvalidFlow(format!("{}: non-finite flow values", path.display())))
}

/// Writes a Middlebury `.flo` file (bit-exact round trip with [`read_flo`]).
pub fn write_flo(field: &FlowField, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(12 + field.vectors.len() * 4);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(field.width as u32).to_le_bytes());
    out.extend_from_slice(&(field.height as u32).to_le_bytes());
    for v in &field.vectors {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

fn bilinear_sample_clamped(
    data: &[f32],
    height: usize,
    width: usize,
    stride: usize,
    offset: usize,
    y: f32,
    x: f32,
) -> f32 {
    let yc = y.clamp(0.0, (height - 1) as f32);
    let xc = x.clamp(0.0, (width - 1) as f32);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let fy = yc - y0 as f32;
    let fx = xc - x0 as f32;
    let at = |yy: usize, xx: usize| data[(yy * width + xx) * stride + offset];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Warps `source` onto the flow's target grid by bilinear sampling at
/// `p + flow(p)`. Returns the warped image and the validity mask; samples
/// whose 2x2 footprint leaves the source are zero-filled and flagged 0.
pub fn backward_warp(source: &Image, flow: &FlowField) -> Result<(Image, OcclusionMask)> {
    if source.height() != flow.height || source.width() != flow.width {
        return Err(Error::ShapeMismatch(
            "backward_warp: flow grid does not match source size".into(),
        ));
    }
    let (h, w, c) = (flow.height, flow.width, source.channels());
    let mut out = vec![0.0f32; h * w * c];
    let mut valid = vec![0u8; h * w];
    let src = source.data();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(y, x);
            let sx = x as f32 + u;
            let sy = y as f32 + v;
            // zero flow must be the bit-exact identity, so integer positions
            // bypass interpolation arithmetic
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                continue;
            }
            valid[y * w + x] = 1;
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            if fx == 0.0 && fy == 0.0 {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = src[(y0 * w + x0) * c + ch];
                }
            } else {
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    out[(y * w + x) * c + ch] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok((
        Image::new(h, w, c, out)?,
        OcclusionMask::new(h, w, valid)?,
    ))
}

/// Forward-backward consistency occlusion test.
///
/// `flow_fwd` lives on the reference grid and points into the other frame;
/// `flow_bwd` lives on the other frame's grid and points back. A pixel is
/// non-occluded iff its round trip error passes
/// `|fwd + bwd|^2 < 0.01 (|fwd|^2 + |bwd|^2) + 0.5` and its forward target
/// stays in bounds.
pub fn occlusion_mask(flow_fwd: &FlowField, flow_bwd: &FlowField) -> Result<OcclusionMask> {
    if flow_fwd.height != flow_bwd.height || flow_fwd.width != flow_bwd.width {
        return Err(Error::ShapeMismatch("occlusion_mask size mismatch".into()));
    }
    let (h, w) = (flow_fwd.height, flow_fwd.width);
    let mut values = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fu, fv) = flow_fwd.get(y, x);
            let tx = x as f32 + fu;
            let ty = y as f32 + fv;
            if tx < 0.0 || ty < 0.0 || tx > (w - 1) as f32 || ty > (h - 1) as f32 {
                continue;
            }
            let (bu, bv) = flow_bwd.sample(ty, tx);
            let round_trip = (fu + bu).powi(2) + (fv + bv).powi(2);
            let budget = 0.01 * (fu * fu + fv * fv + bu * bu + bv * bv) + 0.5;
            if (round_trip as f64) < budget as f64 {
                values[y * w + x] = 1;
            }
        }
    }
    OcclusionMask::new(h, w, values)
}

/// Configuration for the pyramidal Horn-Schunck estimator.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Pyramid levels; each level halves the resolution.
    pub levels: usize,
    /// Fixed-point iterations per level.
    pub iterations: usize,
    /// Horn-Schunck smoothness weight.
    pub smoothness: f32,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            levels: 3,
            iterations: 100,
            smoothness: 0.1,
        }
    }
}

/// Estimates flow on `a`'s grid pointing into `b` (directly usable to
/// backward-warp `b` onto `a`), by coarse-to-fine Horn-Schunck.
pub fn estimate_flow(a: &Image, b: &Image, cfg: &FlowConfig) -> Result<FlowField> {
    if a.channels() != 1 || b.channels() != 1 {
        return Err(Error::InvalidImage("estimate_flow needs grayscale frames".into()));
    }
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("estimate_flow frame size mismatch".into()));
    }
    let levels = cfg.levels.max(1);
    let min_side = a.height().min(a.width()) >> (levels - 1);
    if min_side < 8 {
        return Err(Error::InvalidParameter(format!(
            "frames too small for {levels} pyramid levels (coarsest side {min_side} < 8)"
        )));
    }

    // build pyramids, index 0 = coarsest
    let mut pyr_a = vec![gray_plane(a)];
    let mut pyr_b = vec![gray_plane(b)];
    for _ in 1..levels {
        pyr_a.push(downsample_half(pyr_a.last().unwrap()));
        pyr_b.push(downsample_half(pyr_b.last().unwrap()));
    }
    pyr_a.reverse();
    pyr_b.reverse();

    let (ch, cw) = (pyr_a[0].0, pyr_a[0].1);
    let mut u = vec![0.0f32; ch * cw];
    let mut v = vec![0.0f32; ch * cw];
    for (lvl, (pa, pb)) in pyr_a.iter().zip(&pyr_b).enumerate() {
        if lvl > 0 {
            let (h, w) = (pa.0, pa.1);
            u = upsample_double(&u, pyr_a[lvl - 1].0, pyr_a[lvl - 1].1, h, w, 2.0);
            v = upsample_double(&v, pyr_a[lvl - 1].0, pyr_a[lvl - 1].1, h, w, 2.0);
        }
        horn_schunck_level(pa, pb, &mut u, &mut v, cfg.iterations, cfg.smoothness);
    }

    let (h, w) = (a.height(), a.width());
    let mut vectors = Vec::with_capacity(h * w * 2);
    for i in 0..h * w {
        vectors.push(u[i]);
        vectors.push(v[i]);
    }
    FlowField::new(h, w, vectors)
}

type Plane = (usize, usize, Vec<f32>);

fn gray_plane(img: &Image) -> Plane {
    (img.height(), img.width(), img.data().to_vec())
}

fn downsample_half(p: &Plane) -> Plane {
    let (h, w, data) = p;
    let (nh, nw) = (h / 2, w / 2);
    let mut out = vec![0.0f32; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            let mut s = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    s += data[(2 * y + dy) * w + 2 * x + dx];
                }
            }
            out[y * nw + x] = s / 4.0;
        }
    }
    (nh, nw, out)
}

fn upsample_double(
    data: &[f32],
    h: usize,
    w: usize,
    nh: usize,
    nw: usize,
    scale: f32,
) -> Vec<f32> {
    let mut out = vec![0.0f32; nh * nw];
    for y in 0..nh {
        for x in 0..nw {
            let sy = y as f32 * (h as f32 - 1.0) / ((nh as f32 - 1.0).max(1.0));
            let sx = x as f32 * (w as f32 - 1.0) / ((nw as f32 - 1.0).max(1.0));
            out[y * nw + x] = bilinear_sample_clamped(data, h, w, 1, 0, sy, sx) * scale;
        }
    }
    out
}

fn horn_schunck_level(
    a: &Plane,
    b: &Plane,
    u: &mut Vec<f32>,
    v: &mut Vec<f32>,
    iterations: usize,
    smoothness: f32,
) {
    let (h, w, pa) = a;
    let (h, w) = (*h, *w);
    let pb = &b.2;

    // warp b toward a by the current flow, then solve for the increment
    let mut warped = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let sx = x as f32 + u[y * w + x];
            let sy = y as f32 + v[y * w + x];
            warped[y * w + x] = bilinear_sample_clamped(pb, h, w, 1, 0, sy, sx);
        }
    }

    let at = |d: &[f32], y: i64, x: i64| -> f32 {
        let yy = y.clamp(0, h as i64 - 1) as usize;
        let xx = x.clamp(0, w as i64 - 1) as usize;
        d[yy * w + xx]
    };

    // central-difference gradients of the warped target; It from the residual
    let mut ix = vec![0.0f32; h * w];
    let mut iy = vec![0.0f32; h * w];
    let mut it = vec![0.0f32; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            ix[i] = 0.5 * (at(&warped, y, x + 1) - at(&warped, y, x - 1));
            iy[i] = 0.5 * (at(&warped, y + 1, x) - at(&warped, y - 1, x));
            it[i] = warped[i] - pa[i];
        }
    }

    let alpha2 = smoothness * smoothness;
    let mut du = vec![0.0f32; h * w];
    let mut dv = vec![0.0f32; h * w];
    for _ in 0..iterations {
        let mut ndu = vec![0.0f32; h * w];
        let mut ndv = vec![0.0f32; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let i = y as usize * w + x as usize;
                let ubar = 0.25
                    * (at(&du, y - 1, x) + at(&du, y + 1, x) + at(&du, y, x - 1)
                        + at(&du, y, x + 1));
                let vbar = 0.25
                    * (at(&dv, y - 1, x) + at(&dv, y + 1, x) + at(&dv, y, x - 1)
                        + at(&dv, y, x + 1));
                let t = (ix[i] * ubar + iy[i] * vbar + it[i])
                    / (alpha2 + ix[i] * ix[i] + iy[i] * iy[i]);
                ndu[i] = ubar - ix[i] * t;
                ndv[i] = vbar - iy[i] * t;
            }
        }
        du = ndu;
        dv = ndv;
    }
    for i in 0..h * w {
        u[i] += du[i];
        v[i] += dv[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn flo_round_trip_bit_exact() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("f.flo");
        let vectors: Vec<f32> = (0..3 * 4 * 2).map(|i| i as f32 * 0.37 - 2.0).collect();
        let field = FlowField::new(3, 4, vectors).unwrap();
        write_flo(&field, &p).unwrap();
        let back = read_flo(&p).unwrap();
        assert_eq!(field, back);
    }

    #[test]
    fn flo_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.flo");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(read_flo(&p).is_err());

        let mut good = Vec::new();
        good.extend_from_slice(b"PIEH");
        good.extend_from_slice(&2u32.to_le_bytes());
        good.extend_from_slice(&2u32.to_le_bytes());
        good.extend_from_slice(&1.0f32.to_le_bytes()); // truncated payload
        std::fs::write(&p, &good).unwrap();
        assert!(read_flo(&p).is_err());
    }

    #[test]
    fn flo_hand_built_single_vector() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("one.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"PIEH");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let f = read_flo(&p).unwrap();
        assert_eq!((f.height(), f.width()), (1, 1));
        assert_eq!(f.get(0, 0), (2.0, -1.0));
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let data: Vec<f32> = (0..5 * 4 * 3).map(|i| (i as f32 * 0.13).fract()).collect();
        let img = Image::new(5, 4, 3, data).unwrap();
        let (out, valid) = backward_warp(&img, &FlowField::zeros(5, 4)).unwrap();
        assert_eq!(out.data(), img.data());
        assert!(valid.values().iter().all(|&v| v == 1));
    }

    #[test]
    fn warp_integer_shift_on_ramp() {
        // 1x4 ramp, flow (-1, 0): out(x) = src(x-1), leftmost invalid
        let img = Image::new(1, 4, 1, vec![0.0, 0.25, 0.5, 0.75]).unwrap();
        let (out, valid) = backward_warp(&img, &FlowField::constant(1, 4, -1.0, 0.0)).unwrap();
        assert_eq!(valid.values(), &[0, 1, 1, 1]);
        assert_eq!(&out.data()[1..], &[0.0, 0.25, 0.5]);
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn warp_bilinear_midpoint() {
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let (out, valid) = backward_warp(&img, &FlowField::constant(1, 2, 0.5, 0.0)).unwrap();
        assert!((out.data()[0] - 0.5).abs() < 1e-6);
        assert_eq!(valid.values()[0], 1);
        // x=1 samples at 1.5, footprint leaves the frame
        assert_eq!(valid.values()[1], 0);
    }

    #[test]
    fn warp_is_linear_in_source() {
        let d1: Vec<f32> = (0..6 * 6).map(|i| (i as f32 * 0.17).fract() * 0.5).collect();
        let d2: Vec<f32> = (0..6 * 6).map(|i| (i as f32 * 0.29).fract() * 0.5).collect();
        let s1 = Image::new(6, 6, 1, d1.clone()).unwrap();
        let s2 = Image::new(6, 6, 1, d2.clone()).unwrap();
        let mix = Image::new(6, 6, 1, d1.iter().zip(&d2).map(|(a, b)| 0.3 * a + 0.7 * b).collect())
            .unwrap();
        let flow = FlowField::constant(6, 6, 0.4, -0.7);
        let (w1, _) = backward_warp(&s1, &flow).unwrap();
        let (w2, _) = backward_warp(&s2, &flow).unwrap();
        let (wm, _) = backward_warp(&mix, &flow).unwrap();
        for i in 0..36 {
            let lin = 0.3 * w1.data()[i] + 0.7 * w2.data()[i];
            assert!((wm.data()[i] - lin).abs() < 1e-6);
        }
    }

    #[test]
    fn occlusion_consistent_flows_pass() {
        // fwd = (1,0), bwd = (-1,0): perfect round trip away from the border
        let fwd = FlowField::constant(4, 6, 1.0, 0.0);
        let bwd = FlowField::constant(4, 6, -1.0, 0.0);
        let m = occlusion_mask(&fwd, &bwd).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(m.get(y, x), 1);
            }
            // forward target of the last column leaves the frame
            assert_eq!(m.get(y, 5), 0);
        }
    }

    #[test]
    fn occlusion_inconsistent_flow_fails_threshold() {
        // fwd (2,0), bwd (0,0): |2|^2 = 4 >= 0.01*4 + 0.5
        let fwd = FlowField::constant(4, 8, 2.0, 0.0);
        let bwd = FlowField::zeros(4, 8);
        let m = occlusion_mask(&fwd, &bwd).unwrap();
        assert!(m.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn estimate_flow_identical_frames_near_zero() {
        let data: Vec<f32> = (0..32 * 32)
            .map(|i| ((i * 2654435761usize) % 997) as f32 / 997.0)
            .collect();
        let img = Image::new(32, 32, 1, data).unwrap();
        let flow = estimate_flow(&img, &img, &FlowConfig::default()).unwrap();
        assert!(flow.mean_magnitude() < 0.05);
    }

    #[test]
    fn estimate_flow_zero_iterations_gives_zero_flow() {
        let img = Image::constant(32, 32, 1, 0.5).unwrap();
        let cfg = FlowConfig {
            iterations: 0,
            ..FlowConfig::default()
        };
        let flow = estimate_flow(&img, &img, &cfg).unwrap();
        assert!(flow.vectors().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimate_flow_rejects_tiny_frames() {
        let img = Image::constant(16, 16, 1, 0.5).unwrap();
        let cfg = FlowConfig {
            levels: 3,
            ..FlowConfig::default()
        };
        assert!(estimate_flow(&img, &img, &cfg).is_err());
    }
}
