use std::fs;
use std::path::{Path, PathBuf};

use msf_core::data::layout::{scene_dir_name, scene_dirs};
use msf_core::data::{build_sequences, synth_scene, write_disparity_png, write_flow_png, write_scene, SceneConfig, SceneData};
use msf_core::data::{read_disparity_png, read_flow_png, EvalTriplet};
use msf_core::eval::{evaluate, frame_outliers, render_error_map, GroundTruth, MetricsReport, Prediction};
use msf_core::{Camera32, MsfError, Result, RunConfig, Tensor, Trainer32};

use crate::{EvalArgs, RunOverrides, SynthArgs, TrainArgs, VizArgs};

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(MsfError::Config("--count must be at least 1".into()));
    }
    fs::create_dir_all(&a.out)?;
    for i in 0..a.count {
        let seed = a.seed + i as u64;
        let mut cfg = if a.still { SceneConfig::static_scene(seed) } else { SceneConfig { seed, ..SceneConfig::default() } };
        cfg.height = a.height.unwrap_or(cfg.height);
        cfg.width = a.width.unwrap_or(cfg.width);
        cfg.boxes = a.boxes.unwrap_or(cfg.boxes);
        let scene = synth_scene(&cfg)?;
        let dir = a.out.join(scene_dir_name(i));
        write_scene(&dir, &scene)?;
        log::info!("wrote {} (seed {seed})", dir.display());
    }
    Ok(())
}

fn run_config(o: &RunOverrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &o.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| MsfError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(t) = o.occ_timing {
        cfg.occ_timing = t;
    }
    if let Some(c) = o.combiner {
        cfg.combiner = c;
    }
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = run_config(&a.run)?;
    if let Some(n) = a.iters {
        cfg.iterations = n;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let seqs = build_sequences(&a.data)?;
    let ckpt = a.out.join("checkpoint.json");
    let mut trainer = if a.resume && ckpt.exists() {
        let mut t = Trainer32::load(&ckpt)?;
        // Only the step budget may change on resume.
        t.config.steps = cfg.steps;
        log::info!("resuming from step {}", t.step);
        t
    } else {
        Trainer32::new(cfg)?
    };
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.txt"), trainer.config.to_text())?;
    let every = trainer.config.log_every;
    trainer.run(&seqs.batches, Some(&a.out), |l| {
        if l.step % every == 0 {
            log::info!("step {} loss {:.5} lr {:.2e} |g| {:.3}", l.step, l.report.total, l.lr, l.grad_norm);
        }
    })?;
    trainer.save(&ckpt)?;
    Ok(())
}

fn pred_path(dir: &Path, scene: &str, prefix: &str, k: usize) -> PathBuf {
    dir.join(scene).join(format!("{prefix}_{k:02}.png"))
}

fn write_prediction(dir: &Path, scene: &str, k: usize, p: &Prediction<f64>) -> Result<()> {
    fs::create_dir_all(dir.join(scene))?;
    // Clamp into the storable ranges; a stored 0 disparity reads back as invalid.
    let disp = |d: &Tensor<f64>| d.map(|v| v.clamp(0.0, 255.0));
    let flow = p.flow.map(|v| v.clamp(-511.0, 511.0));
    write_disparity_png(&pred_path(dir, scene, "disp", k), &disp(&p.d1), None)?;
    write_disparity_png(&pred_path(dir, scene, "disp2", k), &disp(&p.d2), None)?;
    write_flow_png(&pred_path(dir, scene, "flow", k), &flow, None)
}

fn read_prediction(dir: &Path, scene: &str, k: usize) -> Result<Option<Prediction<f64>>> {
    let paths = ["disp", "disp2", "flow"].map(|p| pred_path(dir, scene, p, k));
    if paths.iter().any(|p| !p.exists()) {
        return Ok(None);
    }
    Ok(Some(Prediction {
        d1: read_disparity_png(&paths[0])?.values,
        d2: read_disparity_png(&paths[1])?.values,
        flow: read_flow_png(&paths[2])?.values,
    }))
}

fn write_report(out: &Path, stem: &str, report: &MetricsReport) -> Result<()> {
    fs::write(out.join(format!("{stem}.txt")), report.to_text())?;
    fs::write(out.join(format!("{stem}.json")), report.to_json() + "\n")?;
    Ok(())
}

/// Ground truth for every triplet center that has it.
fn labelled(triplets: &[EvalTriplet], scenes: &[SceneData]) -> Result<Vec<(usize, GroundTruth<f64>)>> {
    let mut out = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        let scene = scenes.iter().find(|s| s.name == t.scene).expect("triplet scene is loaded");
        if let Some(gt) = scene.ground_truth(t.center)? {
            out.push((i, gt));
        }
    }
    Ok(out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let seqs = build_sequences(&a.data)?;
    let gts = labelled(&seqs.triplets, &seqs.scenes)?;
    if gts.is_empty() {
        return Err(MsfError::Dataset(format!("no frames with ground truth under {}", a.data.display())));
    }
    fs::create_dir_all(&a.out)?;
    if let Some(dir) = &a.predictions {
        let combiner = a.combiner.unwrap_or_default();
        let mut frames = Vec::new();
        for (i, gt) in gts {
            let t = &seqs.triplets[i];
            match read_prediction(dir, &t.scene, t.center)? {
                Some(p) => frames.push((p, gt)),
                None => return Err(MsfError::Dataset(format!("missing prediction for {} frame {}", t.scene, t.center))),
            }
        }
        let (_, report) = evaluate(&frames, combiner)?;
        write_report(&a.out, "metrics", &report)?;
        print!("{}", report.to_text());
        return Ok(());
    }

    let ckpt = a.checkpoint.as_ref().expect("clap requires a source");
    let trainer = Trainer32::load(ckpt)?;
    let combiner = a.combiner.unwrap_or(trainer.config.combiner);
    let iters = if a.iters.is_empty() { vec![trainer.config.iterations] } else { a.iters.clone() };
    if iters.contains(&0) {
        return Err(MsfError::Config("iteration counts must be at least 1".into()));
    }
    let max = *iters.iter().max().expect("non-empty");
    let mut per_n: Vec<Vec<(Prediction<f64>, GroundTruth<f64>)>> = iters.iter().map(|_| Vec::new()).collect();
    for (i, gt) in gts {
        let t = &seqs.triplets[i];
        let frames: Vec<Tensor<f32>> = t.frames.iter().map(|f| f.cast()).collect();
        let cam: Camera32 = t.cam.cast();
        let trace = trainer.net.run_iterations([&frames[0], &frames[1], &frames[2]], &cam, max)?;
        for (slot, &n) in iters.iter().enumerate() {
            let (d, s) = trace.prediction(n - 1);
            let pred = Prediction::from_fields(&d.cast(), &s.cast(), &t.cam)?;
            write_prediction(&a.out.join(format!("predictions_n{n}")), &t.scene, t.center, &pred)?;
            per_n[slot].push((pred, gt.clone()));
        }
    }
    for (frames, n) in per_n.iter().zip(&iters) {
        let (_, report) = evaluate(frames, combiner)?;
        write_report(&a.out, &format!("metrics_n{n}"), &report)?;
        println!("# iterations = {n}");
        print!("{}", report.to_text());
    }
    Ok(())
}

pub fn viz(a: &VizArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let mut written = 0;
    for dir in scene_dirs(&a.data)? {
        let scene = SceneData::load(&dir)?;
        for k in 0..scene.frames() {
            let (Some(gt), Some(pred)) = (scene.ground_truth(k)?, read_prediction(&a.predictions, &scene.name, k)?) else {
                continue;
            };
            let o = frame_outliers(&pred, &gt, a.combiner)?;
            let maps = [("d1", &o.d1, &gt.noc.d1), ("d2", &o.d2, &gt.noc.d2), ("fl", &o.fl, &gt.noc.fl), ("sf", &o.sf, &o.noc_set)];
            for (tag, outliers, shown) in maps {
                let path = a.out.join(format!("{}_{k:02}_{tag}.png", scene.name));
                render_error_map(outliers, shown)?.save(&path)?;
            }
            written += 1;
        }
    }
    if written == 0 {
        return Err(MsfError::Dataset("no frame has both a prediction and ground truth".into()));
    }
    log::info!("rendered error maps for {written} frame(s)");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use msf_core::eval::Combiner;

    #[test]
    fn set_overrides_apply_in_order() {
        let o = RunOverrides { config: None, seed: Some(7), occ_timing: None, combiner: Some(Combiner::Or), set: vec!["zeta=0.5".into(), "seed=3".into()] };
        let c = run_config(&o).unwrap();
        assert_eq!((c.zeta, c.seed, c.combiner), (0.5, 7, Combiner::Or));
        let bad = RunOverrides { set: vec!["zeta".into()], ..o };
        assert!(run_config(&bad).is_err());
    }
}
