//! Loss terms beyond the bilateral module: the temporal loss on the
//! colorizer, flow-confidence maps, the refiner loss, the combined
//! self-regularization total, and the ranked diversity loss.
//!
//! Each loss has a plain value-level form (used by evaluation and tests) and,
//! where training needs gradients, a tape builder producing the same scalar
//! as a differentiable node. All sums are normalized to means so the loss
//! weights are resolution-independent.

use std::sync::Arc;

use crate::flow::{backward_warp, FlowField, OcclusionMask};
use crate::imagecore::Image;
use crate::neural::{
    stage_weighted_l1, stage_weighted_l1_node, FeatureExtractor, NodeId, Tape,
};
use crate::{Error, Result};

/// Confidence-map parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceParams {
    /// Sensitivity of confidence to warped color difference.
    pub alpha: f32,
    /// When true, occluded pixels get confidence 0; when false the formula
    /// is applied verbatim and yields 1 there (the masked difference is 0).
    pub zero_confidence_at_occlusion: bool,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        ConfidenceParams {
            alpha: 15.0,
            zero_confidence_at_occlusion: true,
        }
    }
}

impl ConfidenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidParameter("alpha must be > 0".into()));
        }
        Ok(())
    }
}

/// Diversity-loss parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversityParams {
    /// Number of candidate colorizations.
    pub d: usize,
    /// Length-d strictly decreasing positive weights.
    pub betas: Vec<f32>,
    /// Pair betas with candidates sorted by ascending distance instead of
    /// fixed head order.
    pub rank_sorted: bool,
}

impl Default for DiversityParams {
    fn default() -> Self {
        DiversityParams {
            d: 4,
            betas: vec![0.30, 0.15, 0.075, 0.0375],
            rank_sorted: false,
        }
    }
}

impl DiversityParams {
    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::InvalidParameter("d must be >= 1".into()));
        }
        if self.betas.len() != self.d {
            return Err(Error::InvalidParameter(format!(
                "expected {} betas, got {}",
                self.d,
                self.betas.len()
            )));
        }
        for w in self.betas.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::InvalidParameter(
                    "betas must be strictly decreasing".into(),
                ));
            }
        }
        if self.betas.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::InvalidParameter("betas must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel confidence weights in [0, 1], single channel.
#[derive(Debug, Clone)]
pub struct ConfidenceMap {
    height: usize,
    width: usize,
    weights: Vec<f32>,
}

impl ConfidenceMap {
    pub fn new(height: usize, width: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::ShapeMismatch("confidence map size mismatch".into()));
        }
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) {
            return Err(Error::InvalidParameter(
                "confidence weights must lie in [0, 1]".into(),
            ));
        }
        Ok(ConfidenceMap { height, width, weights })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.weights[y * self.width + x]
    }

    /// The map as a per-pixel tape mask (broadcast over channels by
    /// [`Tape::mul_mask`]).
    pub fn to_mask(&self) -> Arc<Vec<f32>> {
        Arc::new(self.weights.clone())
    }

    /// Single-channel image view (for inspection and overlays).
    pub fn to_image(&self) -> Image {
        Image::new(self.height, self.width, 1, self.weights.clone())
            .expect("weights already validated in [0,1]")
    }
}

/// W = max(1 − α·diff, 0) with diff the channel-mean absolute color
/// difference between a frame and its warped neighbor, masked by M.
pub fn confidence_map(
    c_s: &Image,
    warped_c_t: &Image,
    mask: &OcclusionMask,
    params: &ConfidenceParams,
) -> Result<ConfidenceMap> {
    params.validate()?;
    if c_s.height() != warped_c_t.height()
        || c_s.width() != warped_c_t.width()
        || c_s.channels() != warped_c_t.channels()
        || c_s.height() != mask.height()
        || c_s.width() != mask.width()
    {
        return Err(Error::ShapeMismatch(
            "confidence_map inputs must share dimensions".into(),
        ));
    }
    let (h, w, ch) = (c_s.height(), c_s.width(), c_s.channels());
    let mut weights = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let m = mask.get(y, x) as f32;
            if m == 0.0 && params.zero_confidence_at_occlusion {
                weights.push(0.0);
                continue;
            }
            let mut diff = 0.0f32;
            for c in 0..ch {
                diff += (c_s.get(y, x, c) - warped_c_t.get(y, x, c)).abs();
            }
            diff = m * diff / ch as f32;
            weights.push((1.0 - params.alpha * diff).max(0.0));
        }
    }
    ConfidenceMap::new(h, w, weights)
}

/// A scalar loss together with an empty-support indicator: `value` is 0 and
/// `empty_support` is true when no pixel survived the mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    pub empty_support: bool,
}

/// Combines an occlusion mask with the warp validity of `flow` and returns
/// the joint mask.
fn combined_mask(source: &Image, flow: &FlowField, mask: &OcclusionMask) -> Result<OcclusionMask> {
    let (_, validity) = backward_warp(source, flow)?;
    mask.and(&validity)
}

/// Temporal loss on the colorizer: mean over masked pixels and channels of
/// |cand_t − warp(cand_t1)|. Value-level form.
pub fn temporal_loss_f(
    cand_t: &Image,
    cand_t1: &Image,
    flow: &FlowField,
    mask: &OcclusionMask,
) -> Result<MaskedLoss> {
    if cand_t.height() != cand_t1.height()
        || cand_t.width() != cand_t1.width()
        || cand_t.channels() != cand_t1.channels()
    {
        return Err(Error::ShapeMismatch(
            "temporal_loss_f candidates must share dimensions".into(),
        ));
    }
    let (warped, validity) = backward_warp(cand_t1, flow)?;
    let joint = mask.and(&validity)?;
    let count: usize = joint.values().iter().map(|&v| v as usize).sum();
    if count == 0 {
        return Ok(MaskedLoss { value: 0.0, empty_support: true });
    }
    let (h, w, ch) = (cand_t.height(), cand_t.width(), cand_t.channels());
    let mut total = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if joint.get(y, x) == 0 {
                continue;
            }
            for c in 0..ch {
                total += (cand_t.get(y, x, c) - warped.get(y, x, c)).abs() as f64;
            }
        }
    }
    Ok(MaskedLoss {
        value: total / (count * ch) as f64,
        empty_support: false,
    })
}

/// Tape form of [`temporal_loss_f`]: builds a differentiable scalar node
/// over candidate nodes `cand_t` and `cand_t1` (planar [C,H,W]). Returns the
/// node and the empty-support flag; on empty support the node is a constant
/// zero.
pub fn temporal_loss_f_node(
    tape: &mut Tape,
    cand_t: NodeId,
    cand_t1: NodeId,
    flow: &Arc<FlowField>,
    mask: &OcclusionMask,
) -> Result<(NodeId, bool)> {
    let shape = tape.shape(cand_t).to_vec();
    if shape.len() != 3 || tape.shape(cand_t1) != shape.as_slice() {
        return Err(Error::ShapeMismatch(
            "temporal_loss_f_node expects matching [C,H,W] nodes".into(),
        ));
    }
    let (ch, h, w) = (shape[0], shape[1], shape[2]);
    let ones = Image::constant(h, w, 1, 1.0)?;
    let joint = combined_mask(&ones, flow, mask)?;
    let count: usize = joint.values().iter().map(|&v| v as usize).sum();
    if count == 0 {
        return Ok((tape.scalar_leaf(0.0), true));
    }
    let mask_f: Vec<f32> = joint.values().iter().map(|&v| v as f32).collect();
    let warped = tape.warp(cand_t1, Arc::clone(flow))?;
    let diff = tape.sub(cand_t, warped)?;
    let adiff = tape.abs(diff);
    let masked = tape.mul_mask(adiff, Arc::new(mask_f))?;
    let total = tape.sum(masked);
    Ok((tape.mul_scalar(total, 1.0 / (count * ch) as f32), false))
}

/// Refiner loss: mean |refined − Y| over all pixels and channels.
pub fn temporal_loss_g(refined: &Image, y: &Image) -> Result<f64> {
    if refined.height() != y.height()
        || refined.width() != y.width()
        || refined.channels() != y.channels()
    {
        return Err(Error::ShapeMismatch(
            "temporal_loss_g inputs must share dimensions".into(),
        ));
    }
    let total: f64 = refined
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok(total / refined.data().len() as f64)
}

/// Tape form of [`temporal_loss_g`] with an optional confidence mask applied
/// to the per-entry differences; the mean stays over all entries so the
/// confidence downweights rather than renormalizes.
pub fn temporal_loss_g_node(
    tape: &mut Tape,
    refined: NodeId,
    target: NodeId,
    confidence: Option<&ConfidenceMap>,
) -> Result<NodeId> {
    let shape = tape.shape(refined).to_vec();
    if tape.shape(target) != shape.as_slice() {
        return Err(Error::ShapeMismatch(
            "temporal_loss_g_node expects matching nodes".into(),
        ));
    }
    let diff = tape.sub(refined, target)?;
    let adiff = tape.abs(diff);
    let weighted = match confidence {
        Some(cmap) => {
            if shape.len() != 3 || cmap.height() != shape[1] || cmap.width() != shape[2] {
                return Err(Error::ShapeMismatch(
                    "confidence map does not match node dimensions".into(),
                ));
            }
            tape.mul_mask(adiff, cmap.to_mask())?
        }
        None => adiff,
    };
    Ok(tape.mean(weighted))
}

/// The ranked combination of Eq. 7: min_i D_i + Σ_i β_i·D_i. With the
/// default head-order pairing β_i weights candidate i; with `rank_sorted`
/// the betas pair with candidates sorted by ascending distance (ties to the
/// lower index).
pub fn ranked_combination(d_values: &[f64], params: &DiversityParams) -> Result<f64> {
    params.validate()?;
    if d_values.len() != params.d {
        return Err(Error::InvalidParameter(format!(
            "expected {} distances, got {}",
            params.d,
            d_values.len()
        )));
    }
    if d_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite diversity distance".into()));
    }
    let order = pairing_order(d_values, params);
    let min = d_values.iter().cloned().fold(f64::INFINITY, f64::min);
    let weighted: f64 = order
        .iter()
        .enumerate()
        .map(|(rank, &i)| params.betas[rank] as f64 * d_values[i])
        .sum();
    Ok(min + weighted)
}

/// Candidate order that betas pair against, by rank position.
fn pairing_order(d_values: &[f64], params: &DiversityParams) -> Vec<usize> {
    let mut order: Vec<usize> = (0..d_values.len()).collect();
    if params.rank_sorted {
        order.sort_by(|&a, &b| {
            d_values[a]
                .partial_cmp(&d_values[b])
                .unwrap()
                .then(a.cmp(&b))
        });
    }
    order
}

/// Per-candidate feature distances D_i between φ(C_i) and φ(Y): mean
/// absolute difference per hypercolumn stage, combined with the stage
/// weights (the raw color stage carries most of the total weight).
/// Value-level form.
pub fn diversity_terms(
    candidates: &[Image],
    y: &Image,
    phi: &FeatureExtractor,
) -> Result<Vec<f64>> {
    let (y_shape, y_feat) = {
        let mut tape = Tape::new();
        let node = phi.hypercolumn_of_rgb(&mut tape, y)?;
        (tape.shape(node).to_vec(), tape.value(node).to_vec())
    };
    let mut out = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let mut tape = Tape::new();
        let node = phi.hypercolumn_of_rgb(&mut tape, cand)?;
        if tape.shape(node) != y_shape.as_slice() {
            return Err(Error::ShapeMismatch(
                "candidate and reference features differ in shape".into(),
            ));
        }
        let hw = y_shape[1] * y_shape[2];
        out.push(stage_weighted_l1(tape.value(node), &y_feat, hw));
    }
    Ok(out)
}

/// Value-level diversity loss over d candidate colorizations.
pub fn diversity_loss(
    candidates: &[Image],
    y: &Image,
    phi: &FeatureExtractor,
    params: &DiversityParams,
) -> Result<f64> {
    params.validate()?;
    if candidates.len() != params.d {
        return Err(Error::InvalidParameter(format!(
            "expected {} candidates, got {}",
            params.d,
            candidates.len()
        )));
    }
    ranked_combination(&diversity_terms(candidates, y, phi)?, params)
}

/// Tape form of [`diversity_loss`] over candidate nodes (planar [3,H,W]).
/// The reference features φ(Y) enter as a constant leaf, so gradients flow
/// only into the candidates. The min term is realized by selecting the
/// argmin branch (ties to the lower index), a valid subgradient.
pub fn diversity_loss_node(
    tape: &mut Tape,
    candidates: &[NodeId],
    y: &Image,
    phi: &FeatureExtractor,
    params: &DiversityParams,
) -> Result<NodeId> {
    params.validate()?;
    if candidates.len() != params.d {
        return Err(Error::InvalidParameter(format!(
            "expected {} candidates, got {}",
            params.d,
            candidates.len()
        )));
    }
    let y_node = phi.hypercolumn_of_rgb(tape, y)?;
    let y_shape = tape.shape(y_node).to_vec();
    let y_leaf = tape.leaf(y_shape, tape.value(y_node).to_vec(), false)?;
    let mut d_nodes = Vec::with_capacity(params.d);
    let mut d_values = Vec::with_capacity(params.d);
    for &cand in candidates {
        let feat = phi.hypercolumn_node(tape, cand)?;
        let d = stage_weighted_l1_node(tape, feat, y_leaf)?;
        d_values.push(tape.value(d)[0] as f64);
        d_nodes.push(d);
    }
    let argmin = d_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("d >= 1 enforced above");
    let mut loss = d_nodes[argmin];
    for (rank, &i) in pairing_order(&d_values, params).iter().enumerate() {
        let term = tape.mul_scalar(d_nodes[i], params.betas[rank]);
        loss = tape.add(loss, term)?;
    }
    Ok(loss)
}

/// Weighted self-regularization total L = w_b·L_b + w_tf·L_f + w_tg·L_g.
pub fn self_reg_total(
    bilateral: f64,
    temporal_f: f64,
    temporal_g: f64,
    weights: [f64; 3],
) -> Result<f64> {
    let terms = [bilateral, temporal_f, temporal_g];
    if terms.iter().chain(&weights).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite self-regularization input".into()));
    }
    Ok(weights[0] * bilateral + weights[1] * temporal_f + weights[2] * temporal_g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{image_to_planar, FeatureParams};

    fn full_mask(h: usize, w: usize) -> OcclusionMask {
        OcclusionMask::new(h, w, vec![1; h * w]).unwrap()
    }

    fn zero_flow(h: usize, w: usize) -> FlowField {
        FlowField::new(h, w, vec![0.0; h * w * 2]).unwrap()
    }

    #[test]
    fn confidence_identical_frames_is_one() {
        let img = Image::constant(4, 4, 3, 0.5).unwrap();
        let m = confidence_map(&img, &img, &full_mask(4, 4), &ConfidenceParams::default())
            .unwrap();
        assert!(m.weights().iter().all(|&w| w == 1.0));
    }

    #[test]
    fn confidence_closed_forms() {
        let a = Image::constant(2, 2, 3, 0.5).unwrap();
        let p = ConfidenceParams::default();
        // per-channel diff 1/15 with alpha 15 saturates to 0 (up to the f32
        // rounding of 0.5 + 1/15)
        let b = Image::constant(2, 2, 3, 0.5 + 1.0 / 15.0).unwrap();
        let m = confidence_map(&a, &b, &full_mask(2, 2), &p).unwrap();
        assert!(m.weights().iter().all(|&w| w < 1e-5));
        // diff 0.04 gives 1 - 0.6 = 0.4
        let c = Image::constant(2, 2, 3, 0.54).unwrap();
        let m = confidence_map(&a, &c, &full_mask(2, 2), &p).unwrap();
        for &w in m.weights() {
            assert!((w - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn confidence_occlusion_flag() {
        let a = Image::constant(2, 2, 3, 0.2).unwrap();
        let b = Image::constant(2, 2, 3, 0.9).unwrap();
        let mask = OcclusionMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        let zeroed =
            confidence_map(&a, &b, &mask, &ConfidenceParams::default()).unwrap();
        assert_eq!(zeroed.get(0, 0), 0.0);
        let verbatim = confidence_map(
            &a,
            &b,
            &mask,
            &ConfidenceParams { zero_confidence_at_occlusion: false, ..Default::default() },
        )
        .unwrap();
        // verbatim formula: masked difference is 0 at occlusion, so W = 1
        assert_eq!(verbatim.get(0, 0), 1.0);
        assert_eq!(verbatim.get(0, 1), zeroed.get(0, 1));
    }

    #[test]
    fn temporal_f_constant_offset() {
        let a = Image::constant(4, 4, 3, 0.2).unwrap();
        let b = Image::constant(4, 4, 3, 0.5).unwrap();
        let l = temporal_loss_f(&a, &b, &zero_flow(4, 4), &full_mask(4, 4)).unwrap();
        assert!(!l.empty_support);
        assert!((l.value - 0.3).abs() < 1e-6);
    }

    #[test]
    fn temporal_f_empty_mask_flags() {
        let a = Image::constant(4, 4, 3, 0.2).unwrap();
        let empty = OcclusionMask::new(4, 4, vec![0; 16]).unwrap();
        let l = temporal_loss_f(&a, &a, &zero_flow(4, 4), &empty).unwrap();
        assert_eq!(l, MaskedLoss { value: 0.0, empty_support: true });
    }

    #[test]
    fn temporal_f_node_matches_value_form() {
        let mut data = Vec::new();
        for i in 0..4 * 4 * 3 {
            data.push((i as f32 * 0.37).fract());
        }
        let a = Image::new(4, 4, 3, data.clone()).unwrap();
        let b = Image::new(4, 4, 3, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let flow = Arc::new(zero_flow(4, 4));
        let mask = full_mask(4, 4);
        let want = temporal_loss_f(&a, &b, &flow, &mask).unwrap().value;

        let mut tape = Tape::new();
        let (sa, da) = image_to_planar(&a);
        let (sb, db) = image_to_planar(&b);
        let na = tape.leaf(sa, da, true).unwrap();
        let nb = tape.leaf(sb, db, true).unwrap();
        let (loss, empty) = temporal_loss_f_node(&mut tape, na, nb, &flow, &mask).unwrap();
        assert!(!empty);
        assert!((tape.value(loss)[0] as f64 - want).abs() < 1e-6);
        tape.backward(loss).unwrap();
        assert!(tape.grad(na).iter().any(|&g| g != 0.0));
        assert!(tape.grad(nb).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn temporal_g_offset_and_symmetry() {
        let a = Image::constant(3, 3, 3, 0.3).unwrap();
        let b = Image::constant(3, 3, 3, 0.4).unwrap();
        let ab = temporal_loss_g(&a, &b).unwrap();
        assert!((ab - 0.1).abs() < 1e-6);
        assert_eq!(ab, temporal_loss_g(&b, &a).unwrap());
        assert_eq!(temporal_loss_g(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn temporal_g_node_confidence_downweights() {
        let a = Image::constant(2, 2, 3, 0.1).unwrap();
        let b = Image::constant(2, 2, 3, 0.6).unwrap();
        let cmap = ConfidenceMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let (sa, da) = image_to_planar(&a);
        let (sb, db) = image_to_planar(&b);
        let na = tape.leaf(sa, da, true).unwrap();
        let nb = tape.leaf(sb, db, false).unwrap();
        let plain = temporal_loss_g_node(&mut tape, na, nb, None).unwrap();
        let weighted = temporal_loss_g_node(&mut tape, na, nb, Some(&cmap)).unwrap();
        assert!((tape.value(plain)[0] - 0.5).abs() < 1e-6);
        // only 1 of 4 pixels keeps weight
        assert!((tape.value(weighted)[0] - 0.125).abs() < 1e-6);
    }

    #[test]
    fn ranked_combination_closed_forms() {
        let p1 = DiversityParams { d: 1, betas: vec![0.5], rank_sorted: false };
        assert!((ranked_combination(&[2.0], &p1).unwrap() - 3.0).abs() < 1e-12);

        let p2 = DiversityParams { d: 2, betas: vec![0.5, 0.25], rank_sorted: false };
        assert!((ranked_combination(&[2.0, 5.0], &p2).unwrap() - 4.25).abs() < 1e-12);

        // rank-sorted pairing puts the larger beta on the smaller distance
        let p2r = DiversityParams { rank_sorted: true, ..p2.clone() };
        let head = ranked_combination(&[5.0, 2.0], &p2).unwrap(); // 2 + 2.5 + 0.5
        let rank = ranked_combination(&[5.0, 2.0], &p2r).unwrap(); // 2 + 1.0 + 1.25
        assert!((head - 5.0).abs() < 1e-12);
        assert!((rank - 4.25).abs() < 1e-12);
    }

    #[test]
    fn diversity_params_validation() {
        assert!(DiversityParams::default().validate().is_ok());
        let bad = DiversityParams { d: 2, betas: vec![0.1, 0.1], rank_sorted: false };
        assert!(bad.validate().is_err());
        let neg = DiversityParams { d: 1, betas: vec![-0.1], rank_sorted: false };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn diversity_exact_candidate_zeroes_min_term() {
        let phi = FeatureExtractor::new(FeatureParams::default());
        let mut data = Vec::new();
        for i in 0..8 * 8 * 3 {
            data.push((i as f32 * 0.173).fract());
        }
        let y = Image::new(8, 8, 3, data).unwrap();
        let other = Image::constant(8, 8, 3, 0.5).unwrap();
        let params = DiversityParams { d: 2, betas: vec![0.5, 0.25], rank_sorted: false };
        let terms = diversity_terms(&[y.clone(), other.clone()], &y, &phi).unwrap();
        assert_eq!(terms[0], 0.0);
        assert!(terms[1] > 0.0);
        let loss = diversity_loss(&[y.clone(), other], &y, &phi, &params).unwrap();
        // min term vanished: loss is exactly the beta-weighted sum
        assert!((loss - 0.25 * terms[1]).abs() < 1e-9);
    }

    #[test]
    fn diversity_node_matches_value_form() {
        let phi = FeatureExtractor::new(FeatureParams::default());
        let mut d0 = Vec::new();
        let mut d1 = Vec::new();
        for i in 0..8 * 8 * 3 {
            d0.push((i as f32 * 0.211).fract());
            d1.push((i as f32 * 0.377).fract());
        }
        let c0 = Image::new(8, 8, 3, d0).unwrap();
        let c1 = Image::new(8, 8, 3, d1).unwrap();
        let y = Image::constant(8, 8, 3, 0.4).unwrap();
        let params = DiversityParams { d: 2, betas: vec![0.5, 0.25], rank_sorted: false };
        let want = diversity_loss(&[c0.clone(), c1.clone()], &y, &phi, &params).unwrap();

        let mut tape = Tape::new();
        let (s0, v0) = image_to_planar(&c0);
        let (s1, v1) = image_to_planar(&c1);
        let n0 = tape.leaf(s0, v0, true).unwrap();
        let n1 = tape.leaf(s1, v1, true).unwrap();
        let loss = diversity_loss_node(&mut tape, &[n0, n1], &y, &phi, &params).unwrap();
        assert!((tape.value(loss)[0] as f64 - want).abs() < 1e-5);
        tape.backward(loss).unwrap();
        assert!(tape.grad(n0).iter().any(|&g| g != 0.0));
        assert!(tape.grad(n1).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn self_reg_total_sums() {
        assert_eq!(self_reg_total(0.0, 0.0, 0.0, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(self_reg_total(1.0, 2.0, 3.0, [1.0; 3]).unwrap(), 6.0);
        assert_eq!(self_reg_total(1.0, 2.0, 3.0, [2.0, 0.0, 1.0]).unwrap(), 5.0);
        assert!(self_reg_total(f64::NAN, 0.0, 0.0, [1.0; 3]).is_err());
    }
}
