//! The colorizer `f` and refiner `g`: small 3-level U-Nets sharing one
//! skeleton. `f` takes the grayscale frame plus reduced hypercolumn features
//! and emits `d` RGB candidates through a bounded activation; `g` takes a
//! candidate, a flow-warped neighbor candidate, and two confidence maps, and
//! applies a residual correction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::imagecore::Image;
use crate::neural::features::{gaussian_vec, FeatureExtractor, HYPERCOLUMN_CHANNELS};
use crate::neural::tape::{NodeId, Tape};
use crate::neural::tensor::{image_to_planar, planar_to_image};
use crate::neural::{NetworkWeights, Tensor};
use crate::{Error, Result};

/// Encoder widths of both U-Nets.
pub const UNET_WIDTHS: [usize; 3] = [16, 32, 64];

const LEAKY_SLOPE: f32 = 0.2;

fn he_conv3x3(rng: &mut ChaCha8Rng, cout: usize, cin: usize) -> Tensor {
    let std = (2.0 / (cin * 9) as f32).sqrt();
    Tensor::new(vec![cout, cin, 3, 3], gaussian_vec(rng, cout * cin * 9, std)).unwrap()
}

fn he_conv1x1(rng: &mut ChaCha8Rng, cout: usize, cin: usize) -> Tensor {
    let std = (2.0 / cin as f32).sqrt();
    Tensor::new(vec![cout, cin], gaussian_vec(rng, cout * cin, std)).unwrap()
}

/// U-Net layer table: (name, cout, cin) for the 3x3 convolutions.
fn unet_layers(in_ch: usize) -> Vec<(&'static str, usize, usize)> {
    let [w1, w2, w3] = UNET_WIDTHS;
    vec![
        ("enc1a", w1, in_ch),
        ("enc1b", w1, w1),
        ("enc2a", w2, w1),
        ("enc2b", w2, w2),
        ("bot_a", w3, w2),
        ("bot_b", w3, w3),
        ("dec2a", w2, w3 + w2),
        ("dec2b", w2, w2),
        ("dec1a", w1, w2 + w1),
        ("dec1b", w1, w1),
    ]
}

fn init_unet(
    w: &mut NetworkWeights,
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
    zero_head: bool,
    head_bias: f32,
) -> Result<()> {
    for (name, cout, cin) in unet_layers(in_ch) {
        w.insert(&format!("unet.{name}.weight"), he_conv3x3(rng, cout, cin))?;
        w.insert(&format!("unet.{name}.bias"), Tensor::zeros(vec![cout]))?;
    }
    // the head reads the decoder output concatenated with the raw input, so
    // a per-pixel readout of the input features is a single linear layer
    let head = if zero_head {
        Tensor::zeros(vec![out_ch, UNET_WIDTHS[0] + in_ch])
    } else {
        he_conv1x1(rng, out_ch, UNET_WIDTHS[0] + in_ch)
    };
    w.insert("unet.head.weight", head)?;
    w.insert(
        "unet.head.bias",
        Tensor::new(vec![out_ch], vec![head_bias; out_ch])?,
    )?;
    Ok(())
}

/// Binds every tensor of a weight set to tape leaves, keeping the binding
/// order so gradients can be copied back after `backward`.
pub(crate) struct BoundWeights {
    pub names: Vec<String>,
    pub ids: Vec<NodeId>,
}

pub(crate) fn bind_weights(
    tape: &mut Tape,
    weights: &NetworkWeights,
    trainable: bool,
) -> Result<BoundWeights> {
    let mut names = Vec::with_capacity(weights.len());
    let mut ids = Vec::with_capacity(weights.len());
    for (name, tensor) in weights.entries() {
        names.push(name.to_string());
        ids.push(tape.leaf(tensor.shape().to_vec(), tensor.data().to_vec(), trainable)?);
    }
    Ok(BoundWeights { names, ids })
}

impl BoundWeights {
    pub fn node(&self, name: &str) -> NodeId {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("unbound weight {name}"));
        self.ids[i]
    }

    /// Copies tape gradients back into the weight set's accumulators.
    pub fn pull_grads(&self, tape: &Tape, weights: &mut NetworkWeights) -> Result<()> {
        for (name, id) in self.names.iter().zip(&self.ids) {
            let g = tape.grad(*id);
            if g.is_empty() {
                continue;
            }
            weights
                .get_mut(name)
                .ok_or_else(|| Error::InvalidWeights(format!("missing weight {name}")))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn conv_block(
    tape: &mut Tape,
    bound: &BoundWeights,
    name: &str,
    x: NodeId,
) -> Result<NodeId> {
    let w = bound.node(&format!("unet.{name}.weight"));
    let b = bound.node(&format!("unet.{name}.bias"));
    let c = tape.conv3x3(x, w, b)?;
    Ok(tape.leaky_relu(c, LEAKY_SLOPE))
}

/// Shared U-Net forward; returns the raw head output (no activation).
fn unet_forward(tape: &mut Tape, bound: &BoundWeights, x: NodeId) -> Result<NodeId> {
    let s1 = {
        let a = conv_block(tape, bound, "enc1a", x)?;
        conv_block(tape, bound, "enc1b", a)?
    };
    let d1 = tape.downsample_avg2(s1)?;
    let s2 = {
        let a = conv_block(tape, bound, "enc2a", d1)?;
        conv_block(tape, bound, "enc2b", a)?
    };
    let d2 = tape.downsample_avg2(s2)?;
    let bottom = {
        let a = conv_block(tape, bound, "bot_a", d2)?;
        conv_block(tape, bound, "bot_b", a)?
    };
    let u2 = tape.upsample_bilinear2(bottom)?;
    let c2 = tape.concat(&[u2, s2])?;
    let r2 = {
        let a = conv_block(tape, bound, "dec2a", c2)?;
        conv_block(tape, bound, "dec2b", a)?
    };
    let u1 = tape.upsample_bilinear2(r2)?;
    let c1 = tape.concat(&[u1, s1])?;
    let r1 = {
        let a = conv_block(tape, bound, "dec1a", c1)?;
        conv_block(tape, bound, "dec1b", a)?
    };
    let hw = bound.node("unet.head.weight");
    let hb = bound.node("unet.head.bias");
    let with_input = tape.concat(&[r1, x])?;
    tape.conv1x1(with_input, hw, hb)
}

/// Construction parameters of the colorizer.
#[derive(Debug, Clone, Copy)]
pub struct ColorizerParams {
    /// Number of candidate heads.
    pub d: usize,
    /// Output width of the 1x1 feature-reduction convolution.
    pub reduce_ch: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ColorizerParams {
    fn default() -> Self {
        ColorizerParams {
            d: 4,
            reduce_ch: 32,
            seed: 1,
        }
    }
}

/// The colorization network `f`: grayscale + reduced hypercolumn features in,
/// `d` RGB candidates out.
#[derive(Debug, Clone)]
pub struct ColorizerNet {
    pub weights: NetworkWeights,
    pub d: usize,
    pub reduce_ch: usize,
}

impl ColorizerNet {
    pub fn new(params: ColorizerParams) -> Result<Self> {
        if params.d < 1 {
            return Err(Error::InvalidParameter("d must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut w = NetworkWeights::new();
        w.insert(
            "reduce.weight",
            he_conv1x1(&mut rng, params.reduce_ch, HYPERCOLUMN_CHANNELS),
        )?;
        w.insert("reduce.bias", Tensor::zeros(vec![params.reduce_ch]))?;
        // bias 0.5 puts the squashed output at mid-gray initially; a raw
        // he-init head would start every candidate near black (σ(-2))
        init_unet(&mut w, &mut rng, 1 + params.reduce_ch, 3 * params.d, false, 0.5)?;
        Ok(ColorizerNet {
            weights: w,
            d: params.d,
            reduce_ch: params.reduce_ch,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.weights.fingerprint()
    }

    /// Wraps loaded weights, verifying they come from this architecture.
    pub fn from_weights(params: ColorizerParams, weights: NetworkWeights) -> Result<Self> {
        let template = ColorizerNet::new(params)?;
        if weights.fingerprint() != template.fingerprint() {
            return Err(Error::InvalidWeights(
                "colorizer weights do not match the configured architecture".into(),
            ));
        }
        Ok(ColorizerNet {
            weights,
            d: params.d,
            reduce_ch: params.reduce_ch,
        })
    }

    /// Tape forward from bound weights; returns `d` candidate nodes in
    /// `[3,H,W]`, each squashed into (0,1).
    pub(crate) fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundWeights,
        gray: NodeId,
        hyper: NodeId,
    ) -> Result<Vec<NodeId>> {
        match tape.shape(gray) {
            &[1, h, w] if h % 4 == 0 && w % 4 == 0 => {}
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "colorizer input must be [1,H,W] with H,W divisible by 4, found {s:?}"
                )))
            }
        }
        let rw = bound.node("reduce.weight");
        let rb = bound.node("reduce.bias");
        let red = tape.conv1x1(hyper, rw, rb)?;
        let red = tape.leaky_relu(red, LEAKY_SLOPE);
        let input = tape.concat(&[gray, red])?;
        let head = unet_forward(tape, bound, input)?;
        let mut candidates = Vec::with_capacity(self.d);
        for i in 0..self.d {
            let s = tape.slice_channels(head, 3 * i, 3)?;
            candidates.push(tape.smooth_clamp01(s));
        }
        Ok(candidates)
    }

    /// Tape forward, binding weights as constants or trainables.
    pub fn forward(
        &self,
        tape: &mut Tape,
        gray: NodeId,
        hyper: NodeId,
        trainable: bool,
    ) -> Result<(Vec<NodeId>, BoundWeightsHandle)> {
        let bound = bind_weights(tape, &self.weights, trainable)?;
        let candidates = self.forward_bound(tape, &bound, gray, hyper)?;
        Ok((candidates, BoundWeightsHandle(bound)))
    }

    /// Inference: `d` candidate colorizations of a grayscale frame.
    pub fn colorize(&self, phi: &FeatureExtractor, gray: &Image) -> Result<Vec<Image>> {
        if gray.channels() != 1 {
            return Err(Error::InvalidImage("colorize input must be grayscale".into()));
        }
        let mut tape = Tape::new();
        let (shape, data) = image_to_planar(gray);
        let gnode = tape.leaf(shape, data, false)?;
        let hyper = phi.hypercolumn_of_gray(&mut tape, gray)?;
        let bound = bind_weights(&mut tape, &self.weights, false)?;
        let candidates = self.forward_bound(&mut tape, &bound, gnode, hyper)?;
        candidates
            .iter()
            .map(|&c| planar_to_image(tape.shape(c), tape.value(c)))
            .collect()
    }
}

/// Opaque handle over bound weights, exposed so callers outside the crate
/// can run forward passes without touching binding internals.
pub struct BoundWeightsHandle(pub(crate) BoundWeights);

impl BoundWeightsHandle {
    pub fn pull_grads(&self, tape: &Tape, weights: &mut NetworkWeights) -> Result<()> {
        self.0.pull_grads(tape, weights)
    }
}

/// The refinement network `g`: residual correction of a candidate frame from
/// a warped neighbor candidate and two confidence maps.
#[derive(Debug, Clone)]
pub struct RefinerNet {
    pub weights: NetworkWeights,
}

/// g input channels: candidate (3) + warped neighbor (3) + color confidence
/// (1) + grayscale confidence (1).
pub const REFINER_IN_CHANNELS: usize = 8;

impl RefinerNet {
    /// The correction head starts at zero, so an untrained refiner is the
    /// identity on its candidate input.
    pub fn new(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = NetworkWeights::new();
        init_unet(&mut w, &mut rng, REFINER_IN_CHANNELS, 3, true, 0.0)?;
        Ok(RefinerNet { weights: w })
    }

    pub fn fingerprint(&self) -> String {
        self.weights.fingerprint()
    }

    pub fn from_weights(weights: NetworkWeights) -> Result<Self> {
        let template = RefinerNet::new(0)?;
        if weights.fingerprint() != template.fingerprint() {
            return Err(Error::InvalidWeights(
                "refiner weights do not match the expected architecture".into(),
            ));
        }
        Ok(RefinerNet { weights })
    }

    pub(crate) fn forward_bound(
        &self,
        tape: &mut Tape,
        bound: &BoundWeights,
        c_s: NodeId,
        warped_c_t: NodeId,
        w_color: NodeId,
        w_gray: NodeId,
    ) -> Result<NodeId> {
        for (&id, want) in [c_s, warped_c_t, w_color, w_gray]
            .iter()
            .zip([3usize, 3, 1, 1])
        {
            match tape.shape(id) {
                &[c, h, w] if c == want && h % 4 == 0 && w % 4 == 0 => {}
                s => {
                    return Err(Error::ShapeMismatch(format!(
                        "refiner input expected [{want},H,W], found {s:?}"
                    )))
                }
            }
        }
        let input = tape.concat(&[c_s, warped_c_t, w_color, w_gray])?;
        let correction = unet_forward(tape, bound, input)?;
        let sum = tape.add(c_s, correction)?;
        Ok(tape.hard_clamp01(sum))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        c_s: NodeId,
        warped_c_t: NodeId,
        w_color: NodeId,
        w_gray: NodeId,
        trainable: bool,
    ) -> Result<(NodeId, BoundWeightsHandle)> {
        let bound = bind_weights(tape, &self.weights, trainable)?;
        let out = self.forward_bound(tape, &bound, c_s, warped_c_t, w_color, w_gray)?;
        Ok((out, BoundWeightsHandle(bound)))
    }

    /// Inference: refine one frame from one warped neighbor.
    pub fn refine(
        &self,
        c_s: &Image,
        warped_c_t: &Image,
        w_color: &Image,
        w_gray: &Image,
    ) -> Result<Image> {
        let mut tape = Tape::new();
        let mut put = |img: &Image| -> Result<NodeId> {
            let (shape, data) = image_to_planar(img);
            tape.leaf(shape, data, false)
        };
        let a = put(c_s)?;
        let b = put(warped_c_t)?;
        let wc = put(w_color)?;
        let wg = put(w_gray)?;
        let bound = bind_weights(&mut tape, &self.weights, false)?;
        let out = self.forward_bound(&mut tape, &bound, a, b, wc, wg)?;
        planar_to_image(tape.shape(out), tape.value(out))
    }
}
