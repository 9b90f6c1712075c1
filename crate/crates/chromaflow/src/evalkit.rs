//! Quantitative evaluation: PSNR over videos, flow-warp temporal-consistency
//! error, and a feature-space perceptual distance built on the fixed random
//! feature bank (a stand-in for learned perceptual metrics — the numbers are
//! not comparable to LPIPS).

use std::path::Path;

use crate::flow::{backward_warp, FlowField, OcclusionMask};
use crate::imagecore::{psnr, to_grayscale, Image, VideoClip};
use crate::neural::{stage_weighted_l1, FeatureExtractor, Tape};
use crate::{Error, Result};

/// Masked warp error with its support statistic: `coverage` is the fraction
/// of frame pairs that had any non-occluded pixels (empty pairs contribute 0
/// to the mean).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WarpErrorStat {
    pub mean: f64,
    pub coverage: f64,
}

/// Mean over consecutive pairs of the masked mean L1 between frame t and the
/// flow-warped frame t+1.
pub fn warp_error(
    video: &VideoClip,
    flows: &[FlowField],
    masks: &[OcclusionMask],
) -> Result<WarpErrorStat> {
    let pairs = video.len().saturating_sub(1);
    if flows.len() != pairs || masks.len() != pairs {
        return Err(Error::ShapeMismatch(format!(
            "expected {pairs} flows/masks for {} frames, got {}/{}",
            video.len(),
            flows.len(),
            masks.len()
        )));
    }
    if pairs == 0 {
        return Ok(WarpErrorStat { mean: 0.0, coverage: 0.0 });
    }
    let frames = video.frames();
    let ch = frames[0].channels();
    let mut total = 0.0f64;
    let mut nonempty = 0usize;
    for t in 0..pairs {
        let (warped, validity) = backward_warp(&frames[t + 1], &flows[t])?;
        let joint = masks[t].and(&validity)?;
        let count: usize = joint.values().iter().map(|&v| v as usize).sum();
        if count == 0 {
            continue; // contributes 0
        }
        nonempty += 1;
        let mut pair_total = 0.0f64;
        for y in 0..frames[t].height() {
            for x in 0..frames[t].width() {
                if joint.get(y, x) == 0 {
                    continue;
                }
                for c in 0..ch {
                    pair_total += (frames[t].get(y, x, c) - warped.get(y, x, c)).abs() as f64;
                }
            }
        }
        total += pair_total / (count * ch) as f64;
    }
    Ok(WarpErrorStat {
        mean: total / pairs as f64,
        coverage: nonempty as f64 / pairs as f64,
    })
}

/// Stage-weighted mean absolute difference of hypercolumn features; a
/// pseudo-metric on images (non-negative, symmetric, zero on identical
/// inputs).
pub fn phi_distance(a: &Image, b: &Image, phi: &FeatureExtractor) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch("phi_distance inputs must match".into()));
    }
    let feats = |img: &Image| -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let node = match img.channels() {
            3 => phi.hypercolumn_of_rgb(&mut tape, img)?,
            1 => phi.hypercolumn_of_gray(&mut tape, img)?,
            c => {
                return Err(Error::InvalidImage(format!(
                    "phi_distance needs 1 or 3 channels, got {c}"
                )))
            }
        };
        Ok(tape.value(node).to_vec())
    };
    let fa = feats(a)?;
    let fb = feats(b)?;
    Ok(stage_weighted_l1(&fa, &fb, a.height() * a.width()))
}

/// Per-clip metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClipEval {
    pub clip_id: String,
    /// Candidate stream the metrics were computed on for this clip.
    pub candidate_index: usize,
    /// Mean over frames of PSNR against the reference, dB (capped at 99).
    pub psnr_mean: f64,
    /// PSNR of the gray baseline (reference luminance replicated to RGB).
    pub psnr_gray_baseline: f64,
    pub warp_error: f64,
    pub warp_coverage: f64,
    /// Mean over frames of the feature distance against the reference.
    pub phi_distance: f64,
}

/// Aggregate metrics: arithmetic means of the per-clip values.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AggregateEval {
    pub psnr_mean: f64,
    pub psnr_gray_baseline: f64,
    pub warp_error: f64,
    pub warp_coverage: f64,
    pub phi_distance: f64,
}

/// Full evaluation report. Deliberately carries no timing information so
/// identical runs serialize byte-identically.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Most frequent per-clip candidate index (ties to the lowest index).
    pub candidate_index: usize,
    /// "phi" marks the fixed-random-bank feature distance (not LPIPS).
    pub perceptual_metric: String,
    pub per_clip: Vec<ClipEval>,
    pub aggregate: AggregateEval,
    /// Run configuration echoed for provenance.
    pub config_echo: serde_json::Value,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("report serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("bad report {}: {e}", path.display())))
    }
}

/// One clip's evaluation inputs: the colorized stream, the color reference,
/// and flows/masks for each consecutive reference pair.
pub struct EvalInput<'a> {
    pub clip_id: String,
    pub candidate_index: usize,
    pub colorized: &'a VideoClip,
    pub reference: &'a VideoClip,
    pub flows: &'a [FlowField],
    pub masks: &'a [OcclusionMask],
}

fn eval_clip(input: &EvalInput, phi: &FeatureExtractor) -> Result<ClipEval> {
    let col = input.colorized.frames();
    let refr = input.reference.frames();
    if col.len() != refr.len() {
        return Err(Error::ShapeMismatch(format!(
            "clip {}: colorized has {} frames, reference {}",
            input.clip_id,
            col.len(),
            refr.len()
        )));
    }
    let n = col.len() as f64;
    let mut psnr_sum = 0.0f64;
    let mut gray_sum = 0.0f64;
    let mut phi_sum = 0.0f64;
    for (c, r) in col.iter().zip(refr) {
        psnr_sum += psnr(c, r)?;
        let gray = to_grayscale(r)?.replicate_to_rgb()?;
        gray_sum += psnr(&gray, r)?;
        phi_sum += phi_distance(c, r, phi)?;
    }
    let we = warp_error(input.colorized, input.flows, input.masks)?;
    Ok(ClipEval {
        clip_id: input.clip_id.clone(),
        candidate_index: input.candidate_index,
        psnr_mean: psnr_sum / n,
        psnr_gray_baseline: gray_sum / n,
        warp_error: we.mean,
        warp_coverage: we.coverage,
        phi_distance: phi_sum / n,
    })
}

/// Evaluates the selected candidate streams against their references and
/// aggregates per-clip metrics into a report.
pub fn evaluate(
    inputs: &[EvalInput],
    phi: &FeatureExtractor,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("nothing to evaluate".into()));
    }
    let per_clip: Vec<ClipEval> = inputs
        .iter()
        .map(|i| eval_clip(i, phi))
        .collect::<Result<_>>()?;
    let candidate_index = {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for c in &per_clip {
            match counts.iter_mut().find(|(i, _)| *i == c.candidate_index) {
                Some((_, n)) => *n += 1,
                None => counts.push((c.candidate_index, 1)),
            }
        }
        counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        counts[0].0
    };
    let n = per_clip.len() as f64;
    let agg = AggregateEval {
        psnr_mean: per_clip.iter().map(|c| c.psnr_mean).sum::<f64>() / n,
        psnr_gray_baseline: per_clip.iter().map(|c| c.psnr_gray_baseline).sum::<f64>() / n,
        warp_error: per_clip.iter().map(|c| c.warp_error).sum::<f64>() / n,
        warp_coverage: per_clip.iter().map(|c| c.warp_coverage).sum::<f64>() / n,
        phi_distance: per_clip.iter().map(|c| c.phi_distance).sum::<f64>() / n,
    };
    if per_clip.iter().any(|c| {
        !(c.psnr_mean.is_finite()
            && c.psnr_gray_baseline.is_finite()
            && c.warp_error.is_finite()
            && c.phi_distance.is_finite())
    }) {
        return Err(Error::Numeric("non-finite evaluation metric".into()));
    }
    Ok(EvalReport {
        candidate_index,
        perceptual_metric: "phi".into(),
        per_clip,
        aggregate: agg,
        config_echo,
    })
}
