//! Fixed perceptual feature extractor: a 3-stage random convolutional bank
//! whose weights are drawn once from a seeded Gaussian and never trained.
//! The hypercolumn output concatenates the raw input (stage 0, an exact
//! color/intensity anchor) with all conv stages, bilinearly upsampled to the
//! input size, after per-pixel channel normalization.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::imagecore::Image;
use crate::neural::tape::{NodeId, Tape};
use crate::neural::tensor::image_to_planar;
use crate::neural::{NetworkWeights, Tensor};
use crate::{Error, Result};

/// Stage widths of the fixed bank.
pub const FEATURE_WIDTHS: [usize; 3] = [16, 32, 64];

/// Total hypercolumn channels (raw RGB input + sum of stage widths).
pub const HYPERCOLUMN_CHANNELS: usize = 3 + 112;

/// Channel ranges of the four hypercolumn stages (raw RGB, then the three
/// conv stages).
pub const STAGE_BOUNDS: [(usize, usize); 4] = [(0, 3), (3, 19), (19, 51), (51, 115)];

/// Per-stage weights of the feature distance. The conv stages are channel
/// normalized and carry no absolute color, so the raw color stage dominates;
/// a flat mean over the 115 channels would leave it with under 3% of the
/// weight and the distance could not drive colorization fidelity.
pub const STAGE_WEIGHTS: [f32; 4] = [0.75, 1.0 / 12.0, 1.0 / 12.0, 1.0 / 12.0];

const LEAKY_SLOPE: f32 = 0.2;

/// Configuration of the fixed feature bank.
#[derive(Debug, Clone, Copy)]
pub struct FeatureParams {
    pub seed: u64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams { seed: 0x9e3779b9 }
    }
}

/// Seeded Gaussian samples via Box-Muller, deterministic per seed.
pub(crate) fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    use rand::Rng;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push((r * theta.cos()) as f32 * std);
        if out.len() < n {
            out.push((r * theta.sin()) as f32 * std);
        }
    }
    out
}

fn he_conv3x3(rng: &mut ChaCha8Rng, cout: usize, cin: usize) -> Tensor {
    let std = (2.0 / (cin * 9) as f32).sqrt();
    Tensor::new(vec![cout, cin, 3, 3], gaussian_vec(rng, cout * cin * 9, std)).unwrap()
}

/// The frozen extractor. Cloning is cheap (weights behind an `Arc`).
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    weights: Arc<NetworkWeights>,
    pub params: FeatureParams,
}

impl FeatureExtractor {
    pub fn new(params: FeatureParams) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut w = NetworkWeights::new();
        let chans = [3, FEATURE_WIDTHS[0], FEATURE_WIDTHS[1], FEATURE_WIDTHS[2]];
        for stage in 0..3 {
            w.insert(
                &format!("stage{}.weight", stage + 1),
                he_conv3x3(&mut rng, chans[stage + 1], chans[stage]),
            )
            .unwrap();
            w.insert(
                &format!("stage{}.bias", stage + 1),
                Tensor::zeros(vec![chans[stage + 1]]),
            )
            .unwrap();
        }
        FeatureExtractor {
            weights: Arc::new(w),
            params,
        }
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }

    pub fn fingerprint(&self) -> String {
        self.weights.fingerprint()
    }

    /// Replaces the bank weights (e.g. externally trained ones in the same
    /// file format). Shapes must match the built-in architecture.
    pub fn with_weights(params: FeatureParams, weights: NetworkWeights) -> Result<Self> {
        let template = FeatureExtractor::new(params);
        if weights.fingerprint() != template.fingerprint() {
            return Err(Error::InvalidWeights(
                "feature bank weights do not match the expected architecture".into(),
            ));
        }
        Ok(FeatureExtractor {
            weights: Arc::new(weights),
            params,
        })
    }

    fn bind(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        let t = self
            .weights
            .get(name)
            .ok_or_else(|| Error::InvalidWeights(format!("missing feature weight {name}")))?;
        tape.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    /// Per-stage normalized feature maps of an RGB `[3,H,W]` node.
    pub fn stages(&self, tape: &mut Tape, rgb: NodeId) -> Result<[NodeId; 3]> {
        let mut x = rgb;
        let mut out = [rgb; 3];
        for stage in 0..3 {
            if stage > 0 {
                x = tape.downsample_avg2(x)?;
            }
            let w = self.bind(tape, &format!("stage{}.weight", stage + 1))?;
            let b = self.bind(tape, &format!("stage{}.bias", stage + 1))?;
            let c = tape.conv3x3(x, w, b)?;
            x = tape.leaky_relu(c, LEAKY_SLOPE);
            out[stage] = tape.channel_norm(x)?;
        }
        Ok(out)
    }

    /// Hypercolumn of an RGB `[3,H,W]` node: the raw input plus all stages
    /// upsampled to input size, concatenated (115 channels). H and W must be
    /// divisible by 4.
    pub fn hypercolumn_node(&self, tape: &mut Tape, rgb: NodeId) -> Result<NodeId> {
        match tape.shape(rgb) {
            &[3, h, w] if h % 4 == 0 && w % 4 == 0 => {}
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "hypercolumn input must be [3,H,W] with H,W divisible by 4, found {s:?}"
                )))
            }
        }
        let [s1, s2, s3] = self.stages(tape, rgb)?;
        let s2u = tape.upsample_bilinear2(s2)?;
        let s3u = tape.upsample_bilinear2(s3)?;
        let s3u = tape.upsample_bilinear2(s3u)?;
        tape.concat(&[rgb, s1, s2u, s3u])
    }

    /// Inserts a grayscale image (replicated to RGB) and returns its
    /// hypercolumn node.
    pub fn hypercolumn_of_gray(&self, tape: &mut Tape, gray: &Image) -> Result<NodeId> {
        if gray.channels() != 1 {
            return Err(Error::InvalidImage("hypercolumn input must be grayscale".into()));
        }
        let rgb = gray.replicate_to_rgb()?;
        let (shape, data) = image_to_planar(&rgb);
        let node = tape.leaf(shape, data, false)?;
        self.hypercolumn_node(tape, node)
    }

    /// Standalone hypercolumn evaluation of a grayscale image.
    pub fn hypercolumn(&self, gray: &Image) -> Result<(Vec<usize>, Vec<f32>)> {
        let mut tape = Tape::new();
        let node = self.hypercolumn_of_gray(&mut tape, gray)?;
        Ok((tape.shape(node).to_vec(), tape.value(node).to_vec()))
    }

    /// Inserts an RGB image as a constant and returns its hypercolumn node.
    pub fn hypercolumn_of_rgb(&self, tape: &mut Tape, rgb: &Image) -> Result<NodeId> {
        if rgb.channels() != 3 {
            return Err(Error::InvalidImage("expected an RGB image".into()));
        }
        let (shape, data) = image_to_planar(rgb);
        let node = tape.leaf(shape, data, false)?;
        self.hypercolumn_node(tape, node)
    }
}

/// Stage-weighted L1 feature distance between two hypercolumn value buffers
/// of `hw` pixels: the mean absolute difference is taken per stage, then
/// combined with [`STAGE_WEIGHTS`].
pub fn stage_weighted_l1(fa: &[f32], fb: &[f32], hw: usize) -> f64 {
    debug_assert_eq!(fa.len(), HYPERCOLUMN_CHANNELS * hw);
    debug_assert_eq!(fb.len(), fa.len());
    let mut total = 0.0f64;
    for (&(s, e), &w) in STAGE_BOUNDS.iter().zip(&STAGE_WEIGHTS) {
        let r = s * hw..e * hw;
        let sum: f64 = fa[r.clone()]
            .iter()
            .zip(&fb[r])
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        total += w as f64 * sum / ((e - s) * hw) as f64;
    }
    total
}

/// Tape form of [`stage_weighted_l1`] over two hypercolumn nodes.
pub fn stage_weighted_l1_node(tape: &mut Tape, fa: NodeId, fb: NodeId) -> Result<NodeId> {
    let diff = tape.sub(fa, fb)?;
    let adiff = tape.abs(diff);
    let mut acc: Option<NodeId> = None;
    for (&(s, e), &w) in STAGE_BOUNDS.iter().zip(&STAGE_WEIGHTS) {
        let sl = tape.slice_channels(adiff, s, e - s)?;
        let m = tape.mean(sl);
        let m = tape.mul_scalar(m, w);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, m)?,
            None => m,
        });
    }
    Ok(acc.expect("at least one stage"))
}
