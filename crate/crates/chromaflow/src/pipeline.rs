//! Two-phase training schedule and the inference procedure: phase one trains
//! the colorizer `f` on single frames and frame pairs; phase two trains the
//! refiner `g` jointly with `f` on temporal pairs; inference colorizes each
//! frame into `d` candidate streams and iteratively refines them from flow-
//! warped neighbors, selecting one stream by average saturation.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bilateral::{build_knn_graph, KnnParams};
use crate::flow::{
    backward_warp, estimate_flow, occlusion_mask, read_flo, FlowConfig, FlowField, OcclusionMask,
};
use crate::imagecore::{load_png, replace_luminance, saturation_map, Image, VideoClip};
use crate::losses::{
    confidence_map, diversity_loss_node, temporal_loss_f_node, temporal_loss_g_node,
    ConfidenceParams, DiversityParams,
};
use crate::neural::{
    adam_step, image_to_planar, planar_to_image, save_weights, AdamParams, AdamState,
    ColorizerNet, ColorizerParams, FeatureExtractor, FeatureParams, NodeId, RefinerNet, Tape,
};
use crate::synthdata::{ClipRecord, Manifest, SPLIT_TRAIN};
use crate::{Error, Result};

/// Network construction and loss-structure parameters shared by training and
/// inference.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Candidate count of the colorizer (must match `diversity.d`).
    pub d: usize,
    /// Width of the hypercolumn reduction in `f`.
    pub reduce_ch: usize,
    pub colorizer_seed: u64,
    pub refiner_seed: u64,
    pub feature_seed: u64,
    pub knn: KnnParams,
    pub confidence: ConfidenceParams,
    pub diversity: DiversityParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 4,
            reduce_ch: 32,
            colorizer_seed: 1,
            refiner_seed: 2,
            feature_seed: FeatureParams::default().seed,
            knn: KnnParams::default(),
            confidence: ConfidenceParams::default(),
            diversity: DiversityParams::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.knn.validate()?;
        self.confidence.validate()?;
        self.diversity.validate()?;
        if self.diversity.d != self.d {
            return Err(Error::InvalidConfig(format!(
                "model.d = {} but diversity.d = {}",
                self.d, self.diversity.d
            )));
        }
        Ok(())
    }

    pub fn colorizer_params(&self) -> ColorizerParams {
        ColorizerParams {
            d: self.d,
            reduce_ch: self.reduce_ch,
            seed: self.colorizer_seed,
        }
    }

    pub fn feature_params(&self) -> FeatureParams {
        FeatureParams { seed: self.feature_seed }
    }
}

/// Training schedule parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Single-frame steps per epoch (phase one).
    pub images_per_epoch: usize,
    /// Frame-pair steps per epoch (both phases).
    pub pairs_per_epoch: usize,
    pub lr: f32,
    /// Learning-rate multiplier on `f` during the joint phase.
    pub joint_f_lr_scale: f32,
    pub w_b: f32,
    pub w_tf: f32,
    pub w_tg: f32,
    pub w_div: f32,
    /// Temporal radius for joint-phase pair sampling.
    pub lambda_t: usize,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0 = only
    /// final weights).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            images_per_epoch: 25,
            pairs_per_epoch: 5,
            lr: 2e-3,
            joint_f_lr_scale: 0.1,
            w_b: 1.0,
            w_tf: 1.0,
            w_tg: 1.0,
            w_div: 1.0,
            lambda_t: 1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images_per_epoch == 0 && self.pairs_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "at least one of images_per_epoch / pairs_per_epoch must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.joint_f_lr_scale >= 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.lambda_t == 0 {
            return Err(Error::InvalidConfig("lambda_t must be >= 1".into()));
        }
        Ok(())
    }
}

/// One epoch of the loss curve; serialized as a JSON line.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossRecord {
    pub phase: String,
    pub epoch: usize,
    pub l_bilateral: f64,
    pub l_temporal_f: f64,
    pub l_temporal_g: f64,
    pub l_diversity: f64,
    pub total: f64,
    pub wall_time_s: f64,
}

/// Appends records as JSON lines.
pub fn write_loss_jsonl(records: &[LossRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::InvalidConfig(format!("loss record serialization: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One training clip held in memory.
struct LoadedClip {
    color: Vec<Image>,
    gray: Vec<Image>,
    flows_fwd: Vec<FlowField>,
    flows_bwd: Vec<FlowField>,
    occ_fwd: Vec<OcclusionMask>,
    occ_bwd: Vec<OcclusionMask>,
}

fn load_mask(path: &Path) -> Result<OcclusionMask> {
    let img = load_png(path)?;
    if img.channels() != 1 {
        return Err(Error::InvalidImage(format!(
            "occlusion mask {} must be single-channel",
            path.display()
        )));
    }
    let values: Vec<u8> = img.data().iter().map(|&v| (v > 0.5) as u8).collect();
    OcclusionMask::new(img.height(), img.width(), values)
}

fn load_clip(root: &Path, rec: &ClipRecord) -> Result<LoadedClip> {
    let imgs = |paths: &[String]| -> Result<Vec<Image>> {
        paths.iter().map(|p| load_png(&root.join(p))).collect()
    };
    let flows = |paths: &[String]| -> Result<Vec<FlowField>> {
        paths.iter().map(|p| read_flo(&root.join(p))).collect()
    };
    let masks = |paths: &[String]| -> Result<Vec<OcclusionMask>> {
        paths.iter().map(|p| load_mask(&root.join(p))).collect()
    };
    Ok(LoadedClip {
        color: imgs(&rec.color_frames)?,
        gray: imgs(&rec.gray_frames)?,
        flows_fwd: flows(&rec.flows_fwd)?,
        flows_bwd: flows(&rec.flows_bwd)?,
        occ_fwd: masks(&rec.occ_fwd)?,
        occ_bwd: masks(&rec.occ_bwd)?,
    })
}

fn load_split(root: &Path, manifest: &Manifest, split: &str) -> Result<Vec<LoadedClip>> {
    manifest
        .clips_in_split(split)
        .into_iter()
        .map(|rec| load_clip(root, rec))
        .collect()
}

/// Per-frame KNN edge lists, built lazily and reused across epochs.
struct EdgeCache {
    params: KnnParams,
    cache: HashMap<(usize, usize), Arc<Vec<(u32, u32)>>>,
}

impl EdgeCache {
    fn new(params: KnnParams) -> Self {
        EdgeCache { params, cache: HashMap::new() }
    }

    fn edges(&mut self, clip: usize, frame: usize, gt: &Image) -> Result<Arc<Vec<(u32, u32)>>> {
        if let Some(e) = self.cache.get(&(clip, frame)) {
            return Ok(Arc::clone(e));
        }
        let graph = build_knn_graph(gt, &self.params)?;
        let e = graph.edge_pixel_pairs();
        self.cache.insert((clip, frame), Arc::clone(&e));
        Ok(e)
    }
}

/// Mean of scalar nodes. Requires a non-empty list.
fn mean_of_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(tape.mul_scalar(acc, 1.0 / nodes.len() as f32))
}

fn leaf_of_image(tape: &mut Tape, img: &Image, needs_grad: bool) -> Result<NodeId> {
    let (shape, data) = image_to_planar(img);
    tape.leaf(shape, data, needs_grad)
}

fn finite_or_err(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// Forward `f` on one gray frame and return the candidate nodes plus the
/// bound-weights handle for gradient pullback.
fn forward_f(
    tape: &mut Tape,
    net: &ColorizerNet,
    phi: &FeatureExtractor,
    gray: &Image,
    trainable: bool,
) -> Result<(Vec<NodeId>, crate::neural::BoundWeightsHandle)> {
    let gnode = leaf_of_image(tape, gray, false)?;
    let hyper = phi.hypercolumn_of_gray(tape, gray)?;
    net.forward(tape, gnode, hyper, trainable)
}

/// Self-regularization terms of one frame's candidates: mean bilateral edge
/// loss over candidates and the ranked diversity loss.
fn frame_losses(
    tape: &mut Tape,
    candidates: &[NodeId],
    gt: &Image,
    edges: &Arc<Vec<(u32, u32)>>,
    phi: &FeatureExtractor,
    diversity: &DiversityParams,
) -> Result<(NodeId, NodeId)> {
    let b_terms: Vec<NodeId> = candidates
        .iter()
        .map(|&c| tape.edge_diff_l1(c, Arc::clone(edges)))
        .collect::<Result<_>>()?;
    let l_b = mean_of_nodes(tape, &b_terms)?;
    let l_div = diversity_loss_node(tape, candidates, gt, phi, diversity)?;
    Ok((l_b, l_div))
}

/// Phase one: trains the colorizer on single frames (bilateral + diversity)
/// and frame pairs (adds the temporal term), in the configured ratio.
pub fn train_colorizer(
    root: &Path,
    manifest: &Manifest,
    model: &ModelConfig,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> Result<(ColorizerNet, Vec<LossRecord>)> {
    model.validate()?;
    cfg.validate()?;
    let clips = load_split(root, manifest, SPLIT_TRAIN)?;
    if clips.is_empty() {
        return Err(Error::InvalidConfig("manifest has no train clips".into()));
    }
    let mut net = ColorizerNet::new(model.colorizer_params())?;
    let phi = FeatureExtractor::new(model.feature_params());
    let mut edge_cache = EdgeCache::new(model.knn);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::default();
    let adam = AdamParams { lr: cfg.lr, ..AdamParams::default() };
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut sum_b, mut sum_tf, mut sum_div, mut sum_total) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let steps = cfg.images_per_epoch + cfg.pairs_per_epoch;
        for step in 0..steps {
            let pair_step = step >= cfg.images_per_epoch;
            let ci = rng.gen_range(0..clips.len());
            let clip = &clips[ci];
            let mut tape = Tape::new();
            let (loss, b_v, tf_v, div_v) = if !pair_step || clip.color.len() < 2 {
                let fi = rng.gen_range(0..clip.color.len());
                let (cands, handle) = forward_f(&mut tape, &net, &phi, &clip.gray[fi], true)?;
                let edges = edge_cache.edges(ci, fi, &clip.color[fi])?;
                let (l_b, l_div) =
                    frame_losses(&mut tape, &cands, &clip.color[fi], &edges, &phi, &model.diversity)?;
                let wb = tape.mul_scalar(l_b, cfg.w_b);
                let wd = tape.mul_scalar(l_div, cfg.w_div);
                let total = tape.add(wb, wd)?;
                tape.backward(total)?;
                handle.pull_grads(&tape, &mut net.weights)?;
                (
                    tape.value(total)[0] as f64,
                    tape.value(l_b)[0] as f64,
                    0.0,
                    tape.value(l_div)[0] as f64,
                )
            } else {
                let t = rng.gen_range(0..clip.color.len() - 1);
                let flow = Arc::new(clip.flows_fwd[t].clone());
                let (cands_t, h_t) = forward_f(&mut tape, &net, &phi, &clip.gray[t], true)?;
                let (cands_t1, h_t1) = forward_f(&mut tape, &net, &phi, &clip.gray[t + 1], true)?;
                let edges = edge_cache.edges(ci, t, &clip.color[t])?;
                let (l_b, l_div) =
                    frame_losses(&mut tape, &cands_t, &clip.color[t], &edges, &phi, &model.diversity)?;
                let mut tf_terms = Vec::with_capacity(net.d);
                for i in 0..net.d {
                    let (term, _) = temporal_loss_f_node(
                        &mut tape,
                        cands_t[i],
                        cands_t1[i],
                        &flow,
                        &clip.occ_fwd[t],
                    )?;
                    tf_terms.push(term);
                }
                let l_tf = mean_of_nodes(&mut tape, &tf_terms)?;
                let wb = tape.mul_scalar(l_b, cfg.w_b);
                let wd = tape.mul_scalar(l_div, cfg.w_div);
                let wt = tape.mul_scalar(l_tf, cfg.w_tf);
                let part = tape.add(wb, wd)?;
                let total = tape.add(part, wt)?;
                tape.backward(total)?;
                h_t.pull_grads(&tape, &mut net.weights)?;
                h_t1.pull_grads(&tape, &mut net.weights)?;
                (
                    tape.value(total)[0] as f64,
                    tape.value(l_b)[0] as f64,
                    tape.value(l_tf)[0] as f64,
                    tape.value(l_div)[0] as f64,
                )
            };
            finite_or_err(loss, "phase-one training loss")?;
            adam_step(&mut net.weights, &mut state, &adam)?;
            sum_b += b_v;
            sum_tf += tf_v;
            sum_div += div_v;
            sum_total += loss;
        }
        let n = steps as f64;
        records.push(LossRecord {
            phase: "f".into(),
            epoch,
            l_bilateral: sum_b / n,
            l_temporal_f: sum_tf / n,
            l_temporal_g: 0.0,
            l_diversity: sum_div / n,
            total: sum_total / n,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if let (Some(dir), true) = (ckpt_dir, cfg.checkpoint_every > 0) {
            if (epoch + 1) % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_weights(&net.weights, &dir.join(format!("f_epoch_{epoch:03}.cwf")))?;
            }
        }
    }
    Ok((net, records))
}

/// Picks an ordered pair (s, t) with 0 < |s − t| ≤ lambda_t, both in range.
fn sample_pair(rng: &mut ChaCha8Rng, frames: usize, lambda_t: usize) -> (usize, usize) {
    let s = rng.gen_range(0..frames);
    let lo = s.saturating_sub(lambda_t);
    let hi = (s + lambda_t).min(frames - 1);
    loop {
        let t = rng.gen_range(lo..=hi);
        if t != s {
            return (s, t);
        }
    }
}

/// Ground-truth flow on the `s` grid into `t` for adjacent pairs, if stored.
fn stored_flow<'a>(clip: &'a LoadedClip, s: usize, t: usize) -> Option<(&'a FlowField, &'a OcclusionMask)> {
    if t == s + 1 && s < clip.flows_fwd.len() {
        Some((&clip.flows_fwd[s], &clip.occ_fwd[s]))
    } else if s == t + 1 && t < clip.flows_bwd.len() {
        Some((&clip.flows_bwd[t], &clip.occ_bwd[t]))
    } else {
        None
    }
}

/// Flow on the `s` grid into `t` plus its occlusion mask: ground truth when
/// stored (synthetic adjacent pairs), estimated otherwise.
fn pair_flow(
    clip: &LoadedClip,
    s: usize,
    t: usize,
    flow_cfg: &FlowConfig,
) -> Result<(FlowField, OcclusionMask)> {
    if let Some((flow, occ)) = stored_flow(clip, s, t) {
        return Ok((flow.clone(), occ.clone()));
    }
    let fwd = estimate_flow(&clip.gray[s], &clip.gray[t], flow_cfg)?;
    let bwd = estimate_flow(&clip.gray[t], &clip.gray[s], flow_cfg)?;
    let occ = occlusion_mask(&fwd, &bwd)?;
    Ok((fwd, occ))
}

/// Phase two: trains the refiner `g` on every candidate pair while fine-
/// tuning `f` at a reduced learning rate.
pub fn train_joint(
    root: &Path,
    manifest: &Manifest,
    f_net: ColorizerNet,
    model: &ModelConfig,
    cfg: &TrainConfig,
    flow_cfg: &FlowConfig,
    ckpt_dir: Option<&Path>,
) -> Result<(ColorizerNet, RefinerNet, Vec<LossRecord>)> {
    model.validate()?;
    cfg.validate()?;
    if cfg.pairs_per_epoch == 0 {
        return Err(Error::InvalidConfig(
            "joint phase needs pairs_per_epoch > 0".into(),
        ));
    }
    let clips = load_split(root, manifest, SPLIT_TRAIN)?;
    if clips.iter().all(|c| c.color.len() < 2) {
        return Err(Error::InvalidConfig("manifest has no frame pairs".into()));
    }
    let mut f_net = f_net;
    let mut g_net = RefinerNet::new(model.refiner_seed)?;
    let phi = FeatureExtractor::new(model.feature_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6a09_e667);
    let mut f_state = AdamState::default();
    let mut g_state = AdamState::default();
    let f_adam = AdamParams { lr: cfg.lr * cfg.joint_f_lr_scale, ..AdamParams::default() };
    let g_adam = AdamParams { lr: cfg.lr, ..AdamParams::default() };
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut sum_tg = 0.0f64;
        for _ in 0..cfg.pairs_per_epoch {
            let ci = loop {
                let c = rng.gen_range(0..clips.len());
                if clips[c].color.len() >= 2 {
                    break c;
                }
            };
            let clip = &clips[ci];
            let (s, t) = sample_pair(&mut rng, clip.color.len(), cfg.lambda_t);
            let (flow, occ) = pair_flow(clip, s, t, flow_cfg)?;
            let flow = Arc::new(flow);

            let mut tape = Tape::new();
            let (cands_s, h_s) = forward_f(&mut tape, &f_net, &phi, &clip.gray[s], true)?;
            let (cands_t, h_t) = forward_f(&mut tape, &f_net, &phi, &clip.gray[t], true)?;
            // grayscale confidence is shared by all candidates
            let (warped_gray, validity) = backward_warp(&clip.gray[t], &flow)?;
            let joint_mask = occ.and(&validity)?;
            let w_gray =
                confidence_map(&clip.gray[s], &warped_gray, &joint_mask, &model.confidence)?;
            let w_gray_node = tape.leaf(
                vec![1, w_gray.height(), w_gray.width()],
                w_gray.weights().to_vec(),
                false,
            )?;
            let y_s = leaf_of_image(&mut tape, &clip.color[s], false)?;

            let mut g_terms = Vec::with_capacity(f_net.d);
            let mut g_handles = Vec::with_capacity(f_net.d);
            for i in 0..f_net.d {
                let warped_t = tape.warp(cands_t[i], Arc::clone(&flow))?;
                // color confidence from the current candidate values (as
                // constants: confidence gates g's trust, it is not trained)
                let c_s_img = planar_to_image(tape.shape(cands_s[i]), tape.value(cands_s[i]))?;
                let w_t_img = planar_to_image(tape.shape(warped_t), tape.value(warped_t))?;
                let w_color = confidence_map(&c_s_img, &w_t_img, &joint_mask, &model.confidence)?;
                let w_color_node = tape.leaf(
                    vec![1, w_color.height(), w_color.width()],
                    w_color.weights().to_vec(),
                    false,
                )?;
                let (refined, g_handle) = g_net.forward(
                    &mut tape,
                    cands_s[i],
                    warped_t,
                    w_color_node,
                    w_gray_node,
                    true,
                )?;
                g_terms.push(temporal_loss_g_node(&mut tape, refined, y_s, None)?);
                g_handles.push(g_handle);
            }
            let l_tg = mean_of_nodes(&mut tape, &g_terms)?;
            let total = tape.mul_scalar(l_tg, cfg.w_tg);
            tape.backward(total)?;
            h_s.pull_grads(&tape, &mut f_net.weights)?;
            h_t.pull_grads(&tape, &mut f_net.weights)?;
            for h in &g_handles {
                h.pull_grads(&tape, &mut g_net.weights)?;
            }
            let v = finite_or_err(tape.value(l_tg)[0] as f64, "joint training loss")?;
            adam_step(&mut f_net.weights, &mut f_state, &f_adam)?;
            adam_step(&mut g_net.weights, &mut g_state, &g_adam)?;
            sum_tg += v;
        }
        let n = cfg.pairs_per_epoch as f64;
        records.push(LossRecord {
            phase: "joint".into(),
            epoch,
            l_bilateral: 0.0,
            l_temporal_f: 0.0,
            l_temporal_g: sum_tg / n,
            l_diversity: 0.0,
            total: sum_tg / n * cfg.w_tg as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if let (Some(dir), true) = (ckpt_dir, cfg.checkpoint_every > 0) {
            if (epoch + 1) % cfg.checkpoint_every == 0 {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                save_weights(&f_net.weights, &dir.join(format!("f_joint_epoch_{epoch:03}.cwf")))?;
                save_weights(&g_net.weights, &dir.join(format!("g_epoch_{epoch:03}.cwf")))?;
            }
        }
    }
    Ok((f_net, g_net, records))
}

/// Candidate selection rule at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    MaxSaturation,
    Index(usize),
    All,
}

/// Inference parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Temporal radius of the refinement window.
    pub lambda_t: usize,
    /// Refinement repetitions (0 skips `g` entirely).
    pub passes: usize,
    pub select_mode: SelectMode,
    pub replace_luminance: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            lambda_t: 1,
            passes: 2,
            select_mode: SelectMode::MaxSaturation,
            replace_luminance: true,
        }
    }
}

/// Externally supplied adjacent-pair flows (e.g. synthetic ground truth):
/// `fwd[t]` on the frame-t grid into t+1, `bwd[t]` on the t+1 grid into t.
#[derive(Debug, Clone)]
pub struct PairFlows {
    pub fwd: Vec<FlowField>,
    pub bwd: Vec<FlowField>,
}

/// The `d` refined candidate streams plus the selected index.
#[derive(Debug, Clone)]
pub struct ColorizeOutput {
    pub candidates: Vec<VideoClip>,
    pub selected: usize,
}

/// Flow and occlusion between every ordered neighbor pair within ±lambda_t.
fn neighbor_flows(
    gray: &[Image],
    lambda_t: usize,
    flow_cfg: &FlowConfig,
    supplied: Option<&PairFlows>,
) -> Result<HashMap<(usize, usize), (Arc<FlowField>, OcclusionMask)>> {
    let n = gray.len();
    let mut flows: HashMap<(usize, usize), Arc<FlowField>> = HashMap::new();
    let mut pairs = Vec::new();
    for s in 0..n {
        for t in s.saturating_sub(lambda_t)..=(s + lambda_t).min(n - 1) {
            if t != s {
                pairs.push((s, t));
            }
        }
    }
    for &(s, t) in &pairs {
        let flow = match supplied {
            Some(pf) if t == s + 1 && s < pf.fwd.len() => pf.fwd[s].clone(),
            Some(pf) if s == t + 1 && t < pf.bwd.len() => pf.bwd[t].clone(),
            _ => estimate_flow(&gray[s], &gray[t], flow_cfg)?,
        };
        flows.insert((s, t), Arc::new(flow));
    }
    let mut out = HashMap::new();
    for &(s, t) in &pairs {
        let fwd = &flows[&(s, t)];
        let bwd = &flows[&(t, s)];
        let occ = occlusion_mask(fwd, bwd)?;
        out.insert((s, t), (Arc::clone(fwd), occ));
    }
    Ok(out)
}

/// Colorizes a grayscale clip into `d` candidate streams, refines each
/// stream for `passes` rounds from its flow-warped neighbors, and selects a
/// stream by average saturation.
pub fn colorize_video(
    x: &VideoClip,
    f_net: &ColorizerNet,
    g_net: &RefinerNet,
    phi: &FeatureExtractor,
    model: &ModelConfig,
    infer: &InferConfig,
    flow_cfg: &FlowConfig,
    supplied_flows: Option<&PairFlows>,
) -> Result<ColorizeOutput> {
    let gray = x.frames();
    if gray.iter().any(|g| g.channels() != 1) {
        return Err(Error::InvalidImage("colorize_video input must be grayscale".into()));
    }
    if gray[0].height() % 4 != 0 || gray[0].width() % 4 != 0 {
        return Err(Error::ShapeMismatch(
            "frame size must be divisible by 4".into(),
        ));
    }
    // d candidate streams from f
    let mut streams: Vec<Vec<Image>> = vec![Vec::with_capacity(gray.len()); f_net.d];
    for g in gray {
        for (i, cand) in f_net.colorize(phi, g)?.into_iter().enumerate() {
            streams[i].push(cand);
        }
    }

    if infer.passes > 0 && gray.len() > 1 {
        let flows = neighbor_flows(gray, infer.lambda_t, flow_cfg, supplied_flows)?;
        // grayscale confidences are pass-invariant
        let mut w_grays = HashMap::new();
        for (&(s, t), (flow, occ)) in &flows {
            let (warped_gray, validity) = backward_warp(&gray[t], flow)?;
            let joint = occ.and(&validity)?;
            let wg = confidence_map(&gray[s], &warped_gray, &joint, &model.confidence)?;
            w_grays.insert((s, t), (wg, joint));
        }
        for _ in 0..infer.passes {
            for stream in streams.iter_mut() {
                let prev = stream.clone(); // pass boundary: refine from last pass
                for s in 0..gray.len() {
                    let mut refined = Vec::new();
                    for t in s.saturating_sub(infer.lambda_t)..=(s + infer.lambda_t).min(gray.len() - 1)
                    {
                        if t == s {
                            continue;
                        }
                        let (flow, _) = &flows[&(s, t)];
                        let (w_gray, joint) = &w_grays[&(s, t)];
                        let (warped_t, _) = backward_warp(&prev[t], flow)?;
                        let w_color =
                            confidence_map(&prev[s], &warped_t, joint, &model.confidence)?;
                        refined.push(g_net.refine(
                            &prev[s],
                            &warped_t,
                            &w_color.to_image(),
                            &w_gray.to_image(),
                        )?);
                    }
                    if refined.is_empty() {
                        continue;
                    }
                    // average the per-neighbor refinements
                    let mut acc = vec![0.0f32; refined[0].data().len()];
                    for r in &refined {
                        for (a, v) in acc.iter_mut().zip(r.data()) {
                            *a += v;
                        }
                    }
                    let k = refined.len() as f32;
                    for a in acc.iter_mut() {
                        *a /= k;
                    }
                    stream[s] = Image::new(gray[0].height(), gray[0].width(), 3, acc)?;
                }
            }
        }
    }

    if infer.replace_luminance {
        for stream in streams.iter_mut() {
            for (img, g) in stream.iter_mut().zip(gray) {
                *img = replace_luminance(img, g)?;
            }
        }
    }

    let candidates: Vec<VideoClip> = streams
        .into_iter()
        .map(VideoClip::new)
        .collect::<Result<_>>()?;
    let selected = match infer.select_mode {
        SelectMode::Index(k) if k < candidates.len() => k,
        SelectMode::Index(k) => {
            return Err(Error::InvalidConfig(format!(
                "selected index {k} out of range for d = {}",
                candidates.len()
            )))
        }
        _ => select_by_saturation(&candidates)?,
    };
    Ok(ColorizeOutput { candidates, selected })
}

/// Index of the candidate stream with the highest mean saturation over all
/// pixels and frames; ties go to the lowest index.
pub fn select_by_saturation(candidates: &[VideoClip]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no candidates to select from".into()));
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, clip) in candidates.iter().enumerate() {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for frame in clip.frames() {
            let s = saturation_map(frame)?;
            total += s.data().iter().map(|&v| v as f64).sum::<f64>();
            count += s.data().len();
        }
        let mean = total / count as f64;
        if mean > best.1 {
            best = (i, mean);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::make_dataset;

    fn tiny_dataset(dir: &Path) -> Manifest {
        make_dataset(3, 41, dir, (32, 32), 3).unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            images_per_epoch: 2,
            pairs_per_epoch: 1,
            ..TrainConfig::default()
        }
    }

    fn small_model() -> ModelConfig {
        ModelConfig {
            d: 2,
            diversity: DiversityParams { d: 2, betas: vec![0.3, 0.15], rank_sorted: false },
            knn: KnnParams { sample_size: 128, ..KnnParams::default() },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(dir.path());
        let cfg = TrainConfig { epochs: 0, ..quick_cfg() };
        let model = small_model();
        let (net, records) = train_colorizer(dir.path(), &m, &model, &cfg, None).unwrap();
        let fresh = ColorizerNet::new(model.colorizer_params()).unwrap();
        assert_eq!(net.weights, fresh.weights);
        assert!(records.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(dir.path());
        let cfg = quick_cfg();
        let model = small_model();
        let (a, ra) = train_colorizer(dir.path(), &m, &model, &cfg, None).unwrap();
        let (b, rb) = train_colorizer(dir.path(), &m, &model, &cfg, None).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(ra[0].total, rb[0].total);
    }

    #[test]
    fn overfit_single_frame_reduces_loss() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(1, 17, dir.path(), (32, 32), 1).unwrap();
        // 1 clip, 1 frame: every step hits the same frame
        let cfg = TrainConfig {
            epochs: 10,
            images_per_epoch: 20,
            pairs_per_epoch: 0,
            ..TrainConfig::default()
        };
        let model = small_model();
        let (_, records) = train_colorizer(dir.path(), &m, &model, &cfg, None).unwrap();
        let first = records.first().unwrap().total;
        let last = records.last().unwrap().total;
        assert!(
            last <= first * 0.5,
            "loss did not halve: first {first}, last {last}"
        );
    }

    #[test]
    fn joint_initial_loss_matches_identity_refiner() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_dataset(dir.path());
        let model = small_model();
        let f_net = ColorizerNet::new(model.colorizer_params()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            pairs_per_epoch: 1,
            lr: 1e-9, // effectively frozen: epoch mean reflects the start
            ..quick_cfg()
        };
        let (_, g_net, records) = train_joint(
            dir.path(),
            &m,
            f_net.clone(),
            &model,
            &cfg,
            &FlowConfig::default(),
            None,
        )
        .unwrap();
        // zero-initialized head: g starts as the identity on its candidate
        let fresh = RefinerNet::new(model.refiner_seed).unwrap();
        assert_eq!(
            g_net.weights.fingerprint(),
            fresh.weights.fingerprint()
        );
        assert!(records[0].l_temporal_g > 0.0);
    }

    #[test]
    fn sample_pair_respects_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let (s, t) = sample_pair(&mut rng, 8, 1);
            assert_ne!(s, t);
            assert_eq!(s.abs_diff(t), 1);
        }
    }

    #[test]
    fn select_by_saturation_rules() {
        let gray = VideoClip::new(vec![Image::constant(4, 4, 3, 0.5).unwrap()]).unwrap();
        let red = VideoClip::new(vec![Image::new(
            4,
            4,
            3,
            [1.0, 0.0, 0.0].repeat(16),
        )
        .unwrap()])
        .unwrap();
        assert_eq!(select_by_saturation(&[gray.clone(), red.clone()]).unwrap(), 1);
        assert_eq!(select_by_saturation(&[red.clone(), red.clone()]).unwrap(), 0);
        assert!(select_by_saturation(&[]).is_err());
    }

    #[test]
    fn colorize_passes_zero_equals_raw_candidates() {
        let model = small_model();
        let f_net = ColorizerNet::new(model.colorizer_params()).unwrap();
        let g_net = RefinerNet::new(model.refiner_seed).unwrap();
        let phi = FeatureExtractor::new(model.feature_params());
        let frames: Vec<Image> = (0..2)
            .map(|k| {
                let data: Vec<f32> = (0..16 * 16)
                    .map(|i| ((i + k * 31) as f32 * 0.137).fract())
                    .collect();
                Image::new(16, 16, 1, data).unwrap()
            })
            .collect();
        let clip = VideoClip::new(frames).unwrap();
        let infer0 = InferConfig {
            passes: 0,
            replace_luminance: false,
            ..InferConfig::default()
        };
        let out = colorize_video(
            &clip,
            &f_net,
            &g_net,
            &phi,
            &model,
            &infer0,
            &FlowConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.candidates.len(), 2);
        for (i, stream) in out.candidates.iter().enumerate() {
            for (frame, g) in stream.frames().iter().zip(clip.frames()) {
                let raw = &f_net.colorize(&phi, g).unwrap()[i];
                assert_eq!(frame.data(), raw.data());
            }
        }
    }

    #[test]
    fn colorize_single_frame_refinement_is_noop() {
        let model = small_model();
        let f_net = ColorizerNet::new(model.colorizer_params()).unwrap();
        let g_net = RefinerNet::new(model.refiner_seed).unwrap();
        let phi = FeatureExtractor::new(model.feature_params());
        let data: Vec<f32> = (0..16 * 16).map(|i| (i as f32 * 0.219).fract()).collect();
        let clip = VideoClip::new(vec![Image::new(16, 16, 1, data).unwrap()]).unwrap();
        let mk = |passes| InferConfig {
            passes,
            replace_luminance: false,
            ..InferConfig::default()
        };
        let a = colorize_video(&clip, &f_net, &g_net, &phi, &model, &mk(2), &FlowConfig::default(), None)
            .unwrap();
        let b = colorize_video(&clip, &f_net, &g_net, &phi, &model, &mk(0), &FlowConfig::default(), None)
            .unwrap();
        for (x, y) in a.candidates.iter().zip(&b.candidates) {
            assert_eq!(x.frames()[0].data(), y.frames()[0].data());
        }
    }

    #[test]
    fn replace_luminance_preserves_input_luma() {
        let model = small_model();
        let f_net = ColorizerNet::new(model.colorizer_params()).unwrap();
        let g_net = RefinerNet::new(model.refiner_seed).unwrap();
        let phi = FeatureExtractor::new(model.feature_params());
        let data: Vec<f32> = (0..16 * 16).map(|i| 0.2 + 0.6 * (i as f32 / 255.0)).collect();
        let gray = Image::new(16, 16, 1, data).unwrap();
        let clip = VideoClip::new(vec![gray.clone()]).unwrap();
        let infer = InferConfig { passes: 0, ..InferConfig::default() };
        let out = colorize_video(
            &clip,
            &f_net,
            &g_net,
            &phi,
            &model,
            &infer,
            &FlowConfig::default(),
            None,
        )
        .unwrap();
        let frame = &out.candidates[out.selected].frames()[0];
        let luma = crate::imagecore::to_grayscale(frame).unwrap();
        for (a, b) in luma.data().iter().zip(gray.data()) {
            assert!((a - b).abs() < 1e-3);
        }
    }
}
