//! Command-line surface: dataset generation, flow tools, training,
//! inference, evaluation, and KNN-graph inspection.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 I/O error, 3 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chromaflow::bilateral::build_knn_graph;
use chromaflow::config::RunConfig;
use chromaflow::evalkit::{evaluate, EvalInput};
use chromaflow::flow::{estimate_flow, read_flo, write_flo, FlowField, OcclusionMask};
use chromaflow::imagecore::{load_png, save_png, to_grayscale, Image, VideoClip};
use chromaflow::neural::{
    load_weights, save_weights, ColorizerNet, FeatureExtractor, RefinerNet,
};
use chromaflow::pipeline::{
    colorize_video, train_colorizer, train_joint, write_loss_jsonl, PairFlows, SelectMode,
};
use chromaflow::synthdata::{make_dataset, ClipRecord, Manifest};
use chromaflow::Error;

#[derive(Parser)]
#[command(name = "chromaflow", about = "Self-regularized automatic video colorization")]
struct Cli {
    /// Path to a JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on data-parallel worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic moving-shape dataset with ground truth.
    SynthGen(SynthGenArgs),
    /// Estimate optical flow between two frames and write a .flo file.
    FlowEstimate(FlowEstimateArgs),
    /// Train the colorizer and/or the refiner.
    Train(TrainArgs),
    /// Colorize a directory of grayscale frames.
    Colorize(ColorizeArgs),
    /// Evaluate trained weights on a manifest split.
    Eval(EvalArgs),
    /// Dump the bilateral KNN graph of one frame plus an overlay image.
    InspectKnn(InspectKnnArgs),
}

#[derive(Args)]
struct SynthGenArgs {
    /// Number of clips (overrides config data.clips).
    #[arg(long)]
    clips: Option<usize>,
    /// Base seed (overrides config data.base_seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides config data.root).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlowEstimateArgs {
    in_a: PathBuf,
    in_b: PathBuf,
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training phase.
    #[arg(long, default_value = "both", value_parser = ["f", "joint", "both"])]
    phase: String,
    /// Checkpoint output directory.
    #[arg(long)]
    out: PathBuf,
    /// Dataset root (overrides config data.root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Phase-one weights to start from when --phase joint.
    #[arg(long)]
    f_weights: Option<PathBuf>,
}

#[derive(Args)]
struct ColorizeArgs {
    /// Checkpoint directory holding f.cwf (and g.cwf unless passes = 0).
    #[arg(long)]
    weights: PathBuf,
    /// Directory of grayscale PNG frames.
    #[arg(long)]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Write every candidate stream, not just the selected one.
    #[arg(long)]
    all_candidates: bool,
    /// Refinement passes (overrides config infer.passes).
    #[arg(long)]
    passes: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory holding f.cwf and g.cwf.
    #[arg(long)]
    weights: PathBuf,
    /// Dataset root (overrides config data.root).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectKnnArgs {
    /// Color frame to build the graph on.
    #[arg(long)]
    frame: PathBuf,
    /// Output directory for edges.json and overlay.png.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Codec(_) => 2,
        Error::Numeric(_) => 3,
        Error::InvalidImage(_)
        | Error::InvalidFlow(_)
        | Error::InvalidWeights(_) => 2,
        Error::InvalidParameter(_) | Error::InvalidConfig(_) | Error::ShapeMismatch(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        // ignore failure: the global pool may already exist
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = match load_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code_for(&e));
        }
    };
    let result = match cli.command {
        Command::SynthGen(a) => cmd_synth_gen(cfg, a),
        Command::FlowEstimate(a) => cmd_flow_estimate(cfg, a),
        Command::Train(a) => cmd_train(cfg, a),
        Command::Colorize(a) => cmd_colorize(cfg, a),
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::InspectKnn(a) => cmd_inspect_knn(cfg, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> chromaflow::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env_seed()?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_echo(cfg: &RunConfig, dir: &Path) -> chromaflow::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("config_echo.json");
    let text = serde_json::to_string_pretty(&cfg.echo())
        .map_err(|e| Error::InvalidConfig(format!("config echo: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn cmd_synth_gen(mut cfg: RunConfig, a: SynthGenArgs) -> chromaflow::Result<()> {
    if let Some(c) = a.clips {
        cfg.data.clips = c;
    }
    if let Some(s) = a.seed {
        cfg.data.base_seed = s;
    }
    if let Some(o) = a.out {
        cfg.data.root = o.to_string_lossy().into_owned();
    }
    let out = PathBuf::from(&cfg.data.root);
    let m = make_dataset(
        cfg.data.clips,
        cfg.data.base_seed,
        &out,
        (cfg.data.canvas[0], cfg.data.canvas[1]),
        cfg.data.frames,
    )?;
    write_echo(&cfg, &out)?;
    println!("wrote {} clips to {}", m.clips.len(), out.display());
    Ok(())
}

fn cmd_flow_estimate(cfg: RunConfig, a: FlowEstimateArgs) -> chromaflow::Result<()> {
    let gray = |p: &Path| -> chromaflow::Result<Image> {
        let img = load_png(p)?;
        if img.channels() == 1 {
            Ok(img)
        } else {
            to_grayscale(&img)
        }
    };
    let flow = estimate_flow(&gray(&a.in_a)?, &gray(&a.in_b)?, &cfg.flow)?;
    write_flo(&flow, &a.out)?;
    println!(
        "wrote {} ({}x{}, mean |v| = {:.4})",
        a.out.display(),
        flow.width(),
        flow.height(),
        flow.mean_magnitude()
    );
    Ok(())
}

fn cmd_train(mut cfg: RunConfig, a: TrainArgs) -> chromaflow::Result<()> {
    if let Some(d) = &a.data {
        cfg.data.root = d.to_string_lossy().into_owned();
    }
    let root = PathBuf::from(&cfg.data.root);
    let manifest = Manifest::load(&root.join("manifest.json"))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_echo(&cfg, &a.out)?;

    let f_net = match a.phase.as_str() {
        "f" | "both" => {
            let (net, records) =
                train_colorizer(&root, &manifest, &cfg.model, &cfg.train, Some(&a.out))?;
            save_weights(&net.weights, &a.out.join("f.cwf"))?;
            write_loss_jsonl(&records, &a.out.join("loss_f.jsonl"))?;
            println!(
                "phase f done: {} epochs, final loss {:.5}",
                records.len(),
                records.last().map(|r| r.total).unwrap_or(f64::NAN)
            );
            net
        }
        _ => {
            let path = a
                .f_weights
                .clone()
                .unwrap_or_else(|| a.out.join("f.cwf"));
            let template = ColorizerNet::new(cfg.model.colorizer_params())?;
            ColorizerNet::from_weights(
                cfg.model.colorizer_params(),
                load_weights(&path, &template.fingerprint())?,
            )?
        }
    };
    if a.phase == "joint" || a.phase == "both" {
        let (f2, g_net, records) = train_joint(
            &root,
            &manifest,
            f_net,
            &cfg.model,
            &cfg.train,
            &cfg.flow,
            Some(&a.out),
        )?;
        save_weights(&f2.weights, &a.out.join("f.cwf"))?;
        save_weights(&g_net.weights, &a.out.join("g.cwf"))?;
        write_loss_jsonl(&records, &a.out.join("loss_joint.jsonl"))?;
        println!(
            "joint phase done: {} epochs, final loss {:.5}",
            records.len(),
            records.last().map(|r| r.total).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn load_nets(
    cfg: &RunConfig,
    dir: &Path,
    need_g: bool,
) -> chromaflow::Result<(ColorizerNet, RefinerNet)> {
    let f_template = ColorizerNet::new(cfg.model.colorizer_params())?;
    let f_net = ColorizerNet::from_weights(
        cfg.model.colorizer_params(),
        load_weights(&dir.join("f.cwf"), &f_template.fingerprint())?,
    )?;
    let g_net = if need_g {
        let g_template = RefinerNet::new(cfg.model.refiner_seed)?;
        RefinerNet::from_weights(load_weights(
            &dir.join("g.cwf"),
            &g_template.fingerprint(),
        )?)?
    } else {
        RefinerNet::new(cfg.model.refiner_seed)?
    };
    Ok((f_net, g_net))
}

#[derive(serde::Serialize)]
struct Selection {
    selected: usize,
    mode: SelectMode,
    candidates_written: Vec<String>,
    config_echo: serde_json::Value,
}

fn cmd_colorize(mut cfg: RunConfig, a: ColorizeArgs) -> chromaflow::Result<()> {
    if let Some(p) = a.passes {
        cfg.infer.passes = p;
    }
    let (f_net, g_net) = load_nets(&cfg, &a.weights, cfg.infer.passes > 0)?;
    let phi = FeatureExtractor::new(cfg.model.feature_params());
    let clip = VideoClip::load_dir(&a.input)?;
    let gray_frames: Vec<Image> = clip
        .frames()
        .iter()
        .map(|f| {
            if f.channels() == 1 {
                Ok(f.clone())
            } else {
                to_grayscale(f)
            }
        })
        .collect::<chromaflow::Result<_>>()?;
    let gray = VideoClip::new(gray_frames)?;
    let out = colorize_video(
        &gray, &f_net, &g_net, &phi, &cfg.model, &cfg.infer, &cfg.flow, None,
    )?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut written = Vec::new();
    if a.all_candidates || cfg.infer.select_mode == SelectMode::All {
        for (i, cand) in out.candidates.iter().enumerate() {
            let dir = a.out.join(format!("cand_{i}"));
            cand.save_dir(&dir)?;
            written.push(format!("cand_{i}"));
        }
    } else {
        out.candidates[out.selected].save_dir(&a.out.join("frames"))?;
        written.push("frames".into());
    }
    let sel = Selection {
        selected: out.selected,
        mode: cfg.infer.select_mode,
        candidates_written: written,
        config_echo: cfg.echo(),
    };
    let sel_path = a.out.join("selection.json");
    let text = serde_json::to_string_pretty(&sel)
        .map_err(|e| Error::InvalidConfig(format!("selection serialization: {e}")))?;
    std::fs::write(&sel_path, text).map_err(|e| Error::io(&sel_path, e))?;
    println!("selected candidate {}", out.selected);
    Ok(())
}

fn load_clip_flows(
    root: &Path,
    rec: &ClipRecord,
) -> chromaflow::Result<(PairFlows, Vec<OcclusionMask>)> {
    let flo = |paths: &[String]| -> chromaflow::Result<Vec<FlowField>> {
        paths.iter().map(|p| read_flo(&root.join(p))).collect()
    };
    let masks: Vec<OcclusionMask> = rec
        .occ_fwd
        .iter()
        .map(|p| {
            let img = load_png(&root.join(p))?;
            let values: Vec<u8> = img.data().iter().map(|&v| (v > 0.5) as u8).collect();
            OcclusionMask::new(img.height(), img.width(), values)
        })
        .collect::<chromaflow::Result<_>>()?;
    Ok((
        PairFlows {
            fwd: flo(&rec.flows_fwd)?,
            bwd: flo(&rec.flows_bwd)?,
        },
        masks,
    ))
}

fn cmd_eval(mut cfg: RunConfig, a: EvalArgs) -> chromaflow::Result<()> {
    if let Some(d) = &a.data {
        cfg.data.root = d.to_string_lossy().into_owned();
    }
    let root = PathBuf::from(&cfg.data.root);
    let manifest = Manifest::load(&root.join("manifest.json"))?;
    let records = manifest.clips_in_split(&cfg.eval.split);
    if records.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "split {:?} has no clips",
            cfg.eval.split
        )));
    }
    let (f_net, g_net) = load_nets(&cfg, &a.weights, cfg.infer.passes > 0)?;
    let phi = FeatureExtractor::new(cfg.model.feature_params());

    struct ClipData {
        id: String,
        selected: usize,
        colorized: VideoClip,
        reference: VideoClip,
        flows: Vec<FlowField>,
        masks: Vec<OcclusionMask>,
    }
    let mut data = Vec::with_capacity(records.len());
    for rec in records {
        let load_frames = |paths: &[String]| -> chromaflow::Result<Vec<Image>> {
            paths.iter().map(|p| load_png(&root.join(p))).collect()
        };
        let gray = VideoClip::new(load_frames(&rec.gray_frames)?)?;
        let reference = VideoClip::new(load_frames(&rec.color_frames)?)?;
        let (pair_flows, masks) = load_clip_flows(&root, rec)?;
        let supplied = cfg.eval.use_gt_flow.then_some(&pair_flows);
        let out = colorize_video(
            &gray, &f_net, &g_net, &phi, &cfg.model, &cfg.infer, &cfg.flow, supplied,
        )?;
        data.push(ClipData {
            id: rec.clip_id.clone(),
            selected: out.selected,
            colorized: out.candidates[out.selected].clone(),
            reference,
            flows: pair_flows.fwd,
            masks,
        });
    }
    let inputs: Vec<EvalInput> = data
        .iter()
        .map(|c| EvalInput {
            clip_id: c.id.clone(),
            candidate_index: c.selected,
            colorized: &c.colorized,
            reference: &c.reference,
            flows: &c.flows,
            masks: &c.masks,
        })
        .collect();
    let report = evaluate(&inputs, &phi, cfg.echo())?;
    report.save(&a.out)?;
    println!(
        "psnr {:.2} dB (gray baseline {:.2}), warp error {:.4}, phi {:.4}",
        report.aggregate.psnr_mean,
        report.aggregate.psnr_gray_baseline,
        report.aggregate.warp_error,
        report.aggregate.phi_distance
    );
    Ok(())
}

fn draw_line(img: &mut Vec<f32>, w: usize, from: (usize, usize), to: (usize, usize)) {
    // Bresenham over the red channel
    let (mut y0, mut x0) = (from.0 as i64, from.1 as i64);
    let (y1, x1) = (to.0 as i64, to.1 as i64);
    let dy = (y1 - y0).abs();
    let dx = (x1 - x0).abs();
    let sy = if y0 < y1 { 1 } else { -1 };
    let sx = if x0 < x1 { 1 } else { -1 };
    let mut err = dx - dy;
    loop {
        let i = (y0 as usize * w + x0 as usize) * 3;
        img[i] = 1.0;
        if y0 == y1 && x0 == x1 {
            break;
        }
        let e2 = 2 * err;
        if e2 > -dy {
            err -= dy;
            x0 += sx;
        }
        if e2 < dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn cmd_inspect_knn(cfg: RunConfig, a: InspectKnnArgs) -> chromaflow::Result<()> {
    let frame = load_png(&a.frame)?;
    let frame = if frame.channels() == 3 {
        frame
    } else {
        frame.replicate_to_rgb()?
    };
    let graph = build_knn_graph(&frame, &cfg.model.knn)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let w = frame.width();
    let edges = graph.edge_pixel_pairs();
    let dump: Vec<serde_json::Value> = edges
        .iter()
        .map(|&(p, q)| {
            serde_json::json!({
                "p": [p as usize / w, p as usize % w],
                "q": [q as usize / w, q as usize % w],
            })
        })
        .collect();
    let edges_path = a.out.join("edges.json");
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "k": graph.k(),
        "nodes": graph.node_count(),
        "edges": dump,
        "config_echo": cfg.echo(),
    }))
    .map_err(|e| Error::InvalidConfig(format!("edge dump: {e}")))?;
    std::fs::write(&edges_path, text).map_err(|e| Error::io(&edges_path, e))?;

    // overlay: dimmed frame with edges in red
    let mut overlay: Vec<f32> = frame.data().iter().map(|v| v * 0.4).collect();
    for &(p, q) in edges.iter() {
        draw_line(
            &mut overlay,
            w,
            (p as usize / w, p as usize % w),
            (q as usize / w, q as usize % w),
        );
    }
    save_png(
        &Image::new(frame.height(), w, 3, overlay)?,
        &a.out.join("overlay.png"),
    )?;
    println!(
        "wrote {} edges over {} nodes to {}",
        edges.len(),
        graph.node_count(),
        a.out.display()
    );
    Ok(())
}
