use msf_core::data::sequences::synthetic_batches;
use msf_core::data::{synth_scene, SceneConfig};
use msf_core::{Camera32, RunConfig, Tensor, Trainer32};

/// Mean `|s|` (meters) of the final iteration over the first triplet.
fn mean_flow(trainer: &Trainer32, frames: &[Tensor<f32>], cam: &Camera32) -> f64 {
    let trace = trainer.net.run_iterations([&frames[0], &frames[1], &frames[2]], cam, trainer.config.iterations).unwrap();
    let (_, s) = trace.prediction(trainer.config.iterations - 1);
    let n = s.dim(1) * s.dim(2);
    (0..n).map(|i| (0..3).map(|c| (s.data()[c * n + i] as f64).powi(2)).sum::<f64>().sqrt()).sum::<f64>() / n as f64
}

#[test]
fn trained_model_keeps_a_static_scene_still() {
    let scene = synth_scene(&SceneConfig { height: 32, width: 64, focal: 55.0, ..SceneConfig::static_scene(3) }).unwrap();
    let batches = synthetic_batches("still", &scene);
    let mut cfg = RunConfig::default();
    cfg.set("model", "tiny").unwrap();
    cfg.iterations = 4;
    cfg.steps = 60;
    let mut trainer = Trainer32::new(cfg).unwrap();
    let frames: Vec<Tensor<f32>> = scene.left[0..3].iter().map(|t| t.cast()).collect();
    let cam: Camera32 = scene.camera().cast();
    let logs = trainer.run(&batches, None, |_| {}).unwrap();
    let (first, last) = (logs[0].report.total, logs.last().unwrap().report.total);
    assert!(last < first, "loss {first} -> {last}");
    let after = mean_flow(&trainer, &frames, &cam);
    println!("mean |s| after training on a static scene: {after:.5} m");
    // Measured about 0.5 mm; the wall sits at 20 m.
    assert!(after < 0.01, "mean |s| = {after}");
}
