//! Temporary diagnostic: loss breakdown and a direct-L1 capacity ceiling.

use chromaflow::imagecore::{load_png, psnr, saturation_map, to_grayscale};
use chromaflow::neural::{
    adam_step, image_to_planar, AdamParams, AdamState, ColorizerNet, FeatureExtractor, Tape,
};
use chromaflow::pipeline::{train_colorizer, ModelConfig, TrainConfig};
use chromaflow::synthdata::make_dataset;

#[test]
fn direct_l1_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(2, 17, dir.path(), (64, 64), 1).unwrap();
    let gt = load_png(&dir.path().join(&m.clips[0].color_frames[0])).unwrap();
    let gray = to_grayscale(&gt).unwrap();
    let model = ModelConfig::default();
    let phi = FeatureExtractor::new(model.feature_params());
    let mut net = ColorizerNet::new(model.colorizer_params()).unwrap();
    let mut state = AdamState::default();
    let adam = AdamParams { lr: 2e-3, ..AdamParams::default() };
    let (gshape, gdata) = image_to_planar(&gray);
    let (yshape, ydata) = image_to_planar(&gt);
    for step in 0..1000 {
        let mut tape = Tape::new();
        let gnode = tape.leaf(gshape.clone(), gdata.clone(), false).unwrap();
        let hyper = phi.hypercolumn_of_gray(&mut tape, &gray).unwrap();
        let (cands, handle) = net.forward(&mut tape, gnode, hyper, true).unwrap();
        let y = tape.leaf(yshape.clone(), ydata.clone(), false).unwrap();
        let diff = tape.sub(cands[0], y).unwrap();
        let adiff = tape.abs(diff);
        let loss = tape.mean(adiff);
        tape.backward(loss).unwrap();
        handle.pull_grads(&tape, &mut net.weights).unwrap();
        adam_step(&mut net.weights, &mut state, &adam).unwrap();
        if step % 100 == 0 {
            println!("step {step}: l1 {:.5}", tape.value(loss)[0]);
        }
    }
    let cand = &net.colorize(&phi, &gray).unwrap()[0];
    let gray3 = gray.replicate_to_rgb().unwrap();
    println!(
        "direct-L1 cand0 psnr {:.2} vs gray baseline {:.2}",
        psnr(cand, &gt).unwrap(),
        psnr(&gray3, &gt).unwrap()
    );
}

#[test]
fn direct_l1_generalization() {
    use chromaflow::synthdata::{Manifest, SPLIT_TEST, SPLIT_TRAIN};
    use rand::{Rng, SeedableRng};
    let root = std::path::Path::new("/tmp/ac5/data2");
    let m = if root.join("manifest.json").exists() {
        Manifest::load(&root.join("manifest.json")).unwrap()
    } else {
        make_dataset(200, 7, root, (64, 64), 8).unwrap()
    };
    let train = m.clips_in_split(SPLIT_TRAIN);
    let model = ModelConfig::default();
    let phi = FeatureExtractor::new(model.feature_params());
    let mut net = ColorizerNet::new(model.colorizer_params()).unwrap();
    let mut state = AdamState::default();
    let adam = AdamParams { lr: 2e-3, ..AdamParams::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let split_psnr = |net: &ColorizerNet, split: &str, limit: usize| -> (f64, f64, usize) {
        let (mut p_sum, mut g_sum, mut n) = (0.0f64, 0.0f64, 0usize);
        for rec in m.clips_in_split(split).iter().take(limit) {
            for fi in (0..rec.gray_frames.len()).step_by(4) {
                let gt = load_png(&root.join(&rec.color_frames[fi])).unwrap();
                let gray = load_png(&root.join(&rec.gray_frames[fi])).unwrap();
                let cand = &net.colorize(&phi, &gray).unwrap()[0];
                p_sum += psnr(cand, &gt).unwrap();
                g_sum += psnr(&gray.replicate_to_rgb().unwrap(), &gt).unwrap();
                n += 1;
            }
        }
        (p_sum / n as f64, g_sum / n as f64, n)
    };
    for step in 0..1000 {
        let rec = train[rng.gen_range(0..train.len())];
        let fi = rng.gen_range(0..rec.gray_frames.len());
        let gt = load_png(&root.join(&rec.color_frames[fi])).unwrap();
        let gray = load_png(&root.join(&rec.gray_frames[fi])).unwrap();
        let mut tape = Tape::new();
        let (gshape, gdata) = image_to_planar(&gray);
        let gnode = tape.leaf(gshape, gdata, false).unwrap();
        let hyper = phi.hypercolumn_of_gray(&mut tape, &gray).unwrap();
        let (cands, handle) = net.forward(&mut tape, gnode, hyper, true).unwrap();
        let (yshape, ydata) = image_to_planar(&gt);
        let y = tape.leaf(yshape, ydata, false).unwrap();
        let diff = tape.sub(cands[0], y).unwrap();
        let adiff = tape.abs(diff);
        let loss = tape.mean(adiff);
        tape.backward(loss).unwrap();
        handle.pull_grads(&tape, &mut net.weights).unwrap();
        adam_step(&mut net.weights, &mut state, &adam).unwrap();
        if step % 100 == 0 {
            println!("step {step}: l1 {:.5}", tape.value(loss)[0]);
        }
        if (step + 1) % 250 == 0 {
            let (tp, tg, tn) = split_psnr(&net, SPLIT_TEST, 10);
            let (rp, rg, _) = split_psnr(&net, SPLIT_TRAIN, 10);
            println!(
                "step {}: test psnr {:.2} (gray {:.2}, {} frames) | train psnr {:.2} (gray {:.2})",
                step + 1,
                tp,
                tg,
                tn,
                rp,
                rg
            );
        }
    }
}

#[test]
fn collapse_diag() {
    use chromaflow::synthdata::{Manifest, SPLIT_TEST, SPLIT_TRAIN};
    use rand::{Rng, SeedableRng};
    let root = std::path::Path::new("/tmp/ac5/data2");
    let m = Manifest::load(&root.join("manifest.json")).unwrap();
    let train = m.clips_in_split(SPLIT_TRAIN);
    let probe_rec = m.clips_in_split(SPLIT_TEST)[0];
    let probe_gray = load_png(&root.join(&probe_rec.gray_frames[0])).unwrap();
    let probe_gt = load_png(&root.join(&probe_rec.color_frames[0])).unwrap();
    let model = ModelConfig::default();
    let phi = FeatureExtractor::new(model.feature_params());
    let mut net = ColorizerNet::new(model.colorizer_params()).unwrap();
    let mut state = AdamState::default();
    let lr: f32 = std::env::var("DIAG_LR").ok().and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let adam = AdamParams { lr, ..AdamParams::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    println!("lr {lr}");
    for step in 0..300 {
        let rec = train[rng.gen_range(0..train.len())];
        let fi = rng.gen_range(0..rec.gray_frames.len());
        let gt = load_png(&root.join(&rec.color_frames[fi])).unwrap();
        let gray = load_png(&root.join(&rec.gray_frames[fi])).unwrap();
        let mut tape = Tape::new();
        let (gshape, gdata) = image_to_planar(&gray);
        let gnode = tape.leaf(gshape, gdata, false).unwrap();
        let hyper = phi.hypercolumn_of_gray(&mut tape, &gray).unwrap();
        let (cands, handle) = net.forward(&mut tape, gnode, hyper, true).unwrap();
        let (yshape, ydata) = image_to_planar(&gt);
        let y = tape.leaf(yshape, ydata, false).unwrap();
        let diff = tape.sub(cands[0], y).unwrap();
        let adiff = tape.abs(diff);
        let loss = tape.mean(adiff);
        tape.backward(loss).unwrap();
        handle.pull_grads(&tape, &mut net.weights).unwrap();
        if step % 50 == 0 {
            let mut gmax = 0.0f32;
            let mut gname = String::new();
            for (name, t) in net.weights.entries() {
                if let Some(g) = t.grad() {
                    let m = g.iter().fold(0.0f32, |a, &v| a.max(v.abs()));
                    if m > gmax {
                        gmax = m;
                        gname = name.to_string();
                    }
                }
            }
            let out = &net.colorize(&phi, &probe_gray).unwrap()[0];
            let d = out.data();
            let mean = d.iter().sum::<f32>() / d.len() as f32;
            let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d.len() as f32;
            println!(
                "step {step}: l1 {:.4} out mean {:.3} std {:.3} psnr {:.2} | gmax {:.3e} at {}",
                tape.value(loss)[0],
                mean,
                var.sqrt(),
                psnr(out, &probe_gt).unwrap(),
                gmax,
                gname
            );
        }
        adam_step(&mut net.weights, &mut state, &adam).unwrap();
    }
}

#[test]
fn overfit_color_diag() {
    let dir = tempfile::tempdir().unwrap();
    let m = make_dataset(2, 17, dir.path(), (64, 64), 1).unwrap();
    let model = ModelConfig::default();
    let cfg = TrainConfig {
        epochs: 30,
        images_per_epoch: 20,
        pairs_per_epoch: 0,
        seed: 7,
        ..TrainConfig::default()
    };
    let (f_net, recs) = train_colorizer(dir.path(), &m, &model, &cfg, None).unwrap();
    for r in recs.iter().step_by(5).chain(recs.last()) {
        println!(
            "epoch {}: total {:.5} bilateral {:.5} diversity {:.5}",
            r.epoch, r.total, r.l_bilateral, r.l_diversity
        );
    }
    let phi = FeatureExtractor::new(model.feature_params());
    let gt = load_png(&dir.path().join(&m.clips[0].color_frames[0])).unwrap();
    let gray = to_grayscale(&gt).unwrap();
    let gt_sat: f64 = {
        let s = saturation_map(&gt).unwrap();
        s.data().iter().map(|&v| v as f64).sum::<f64>() / s.data().len() as f64
    };
    for (i, cand) in f_net.colorize(&phi, &gray).unwrap().iter().enumerate() {
        let s = saturation_map(cand).unwrap();
        let sat = s.data().iter().map(|&v| v as f64).sum::<f64>() / s.data().len() as f64;
        println!(
            "cand {i}: psnr {:.2} sat {:.4} (gt sat {:.4})",
            psnr(cand, &gt).unwrap(),
            sat,
            gt_sat
        );
    }
    let gray3 = gray.replicate_to_rgb().unwrap();
    println!("gray baseline psnr {:.2}", psnr(&gray3, &gt).unwrap());
}
