//! Acceptance criteria, one `PASS`/`FAIL` line each. Runs without the test
//! harness so the lines always reach stdout; exits non-zero on any failure.

use std::time::{Duration, Instant};

use msf_autograd::gradcheck::check_gradients;
use msf_autograd::nn::{Init, ParamStore};
use msf_core::camera::*;
use msf_core::data::kitti::{decode_disparity, decode_flow, DISPARITY_SCALE, FLOW_OFFSET, FLOW_SCALE};
use msf_core::data::{read_disparity_png, read_flow_png, synth_scene, write_disparity_png, write_flow_png, SceneConfig, SyntheticScene};
use msf_core::eval::*;
use msf_core::features::Direction;
use msf_core::gmf::{positional_embedding, PositionalAttention, TemporalFusion};
use msf_core::losses::rigid::{fit_regions, occlusion_loss, occlusion_regularization, rigid_fit_svd, FitError, RegionFits};
use msf_core::losses::stack::{iteration_losses, target_points, IterationMasks};
use msf_core::losses::*;
use msf_core::model::SceneFlowNet;
use msf_core::update::{convex_upsample, FieldUnit, UpsampleMask};
use msf_core::*;
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> std::result::Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || format!("took {:.1}s, budget {limit_s}s", elapsed.as_secs_f64()))
}

fn camera(f: f64, w: usize, h: usize, b: f64) -> Camera64 {
    CameraModel::from_focal(f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, b).unwrap()
}

// 1

fn geometry_roundtrips() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (100, 100);
    let cam = camera(720.0, 1242, 375, 0.54);
    let d = DisparityField::new(Tensor::from_fn(&[1, h, w], |_| rng.gen_range(0.5..250.0)), 1).unwrap();
    let depth = disparity_to_depth(&d, &cam).unwrap();
    let back = depth_to_disparity(&depth, &cam, 1).unwrap();
    let mut worst_d = 0.0f64;
    for (a, b) in d.values().data().iter().zip(back.values().data()) {
        worst_d = worst_d.max((a - b).abs() / a.max(1.0));
    }
    // Arbitrary sub-pixel positions: back-project along the ray, then project.
    let mut worst_p = 0.0f64;
    for _ in 0..h * w {
        let (u, v, z) = (rng.gen_range(-50.0..1300.0), rng.gen_range(-50.0..400.0), rng.gen_range(0.5..120.0));
        let r = cam.ray(u, v);
        let p = [r[0] * z, r[1] * z, r[2] * z];
        let [pu, pv] = cam.project_point(p).ok_or("point behind camera")?;
        worst_p = worst_p.max((pu - u).abs()).max((pv - v).abs());
    }
    // Grid pixels through the field-level operators.
    let pts = backproject(&depth, &cam);
    let pos = project(&pts, &cam);
    let grid = pixel_grid::<f64>(h, w);
    for i in 0..2 * h * w {
        worst_p = worst_p.max((pos.coords.data()[i] - grid.data()[i]).abs());
    }
    ensure(worst_d < 1e-9, || format!("disparity roundtrip error {worst_d:e}"))?;
    ensure(worst_p < 1e-9, || format!("projection roundtrip error {worst_p:e}"))?;
    within(t0.elapsed(), 1.0)?;
    Ok(format!("2x10^4 samples, max errors {worst_d:.1e} / {worst_p:.1e}"))
}

// 2

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    Rotation3::from_axis_angle(&axis, rng.gen_range(-3.1..3.1)).into_inner()
}

fn rigid_fit_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_r, mut worst_t) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let r = random_rotation(&mut rng);
        let t = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let src: Vec<[f64; 3]> = (0..10).map(|_| [0; 3].map(|_| rng.gen_range(-10.0..10.0))).collect();
        let dst: Vec<[f64; 3]> = src
            .iter()
            .map(|p| {
                let q = r * Vector3::from(*p) + t;
                [q.x, q.y, q.z]
            })
            .collect();
        let fit = rigid_fit_svd(&src, &dst).map_err(|e| format!("fit failed: {e}"))?;
        worst_r = worst_r.max((fit.r - r).norm());
        worst_t = worst_t.max((fit.t - t).norm());
    }
    ensure(worst_r < 1e-8 && worst_t < 1e-8, || format!("errors R {worst_r:e}, T {worst_t:e}"))?;
    let line: Vec<[f64; 3]> = (0..10).map(|i| [i as f64, 2.0 * i as f64 - 1.0, 0.5 * i as f64]).collect();
    let shifted: Vec<[f64; 3]> = line.iter().map(|p| [p[0] + 1.0, p[1], p[2]]).collect();
    ensure(rigid_fit_svd(&line, &shifted) == Err(FitError::Degenerate), || "collinear points were accepted".into())?;
    within(t0.elapsed(), 5.0)?;
    Ok(format!("100 transforms, max |dR|_F {worst_r:.1e}, |dT| {worst_t:.1e}; collinear input rejected"))
}

// 3

struct RigidSetup {
    scene: SyntheticScene,
    regions: Vec<RegionMask>,
    occ: OcclusionMasks<f64>,
    p_tgt: PointMap<f64>,
}

fn rigid_setup() -> RigidSetup {
    let scene = synth_scene(&SceneConfig { seed: 3, ..SceneConfig::default() }).unwrap();
    let t = &scene.truth[1];
    let occ = OcclusionMasks { disparity: t.occ_stereo.clone(), scene_flow: t.occ_fwd.clone() };
    let d_t = DisparityField::new(t.disparity.clone(), 1).unwrap();
    let d_t1 = DisparityField::new(scene.truth[2].disparity.clone(), 1).unwrap();
    let s = SceneFlowField::new(t.sf_fwd.clone()).unwrap();
    let p_tgt = target_points(&d_t, &s, &d_t1, scene.camera()).unwrap();
    let regions = scene.regions(1);
    RigidSetup { scene, regions, occ, p_tgt }
}

/// `(L_occ, gradient w.r.t. s)` with the fits recomputed (`None`) or frozen.
fn occ_loss_at(st: &RigidSetup, s: &Tensor<f64>, frozen: Option<&RegionFits>) -> (f64, Tensor<f64>, RegionFits) {
    let tape = Tape::new();
    let depth = tape.constant(st.scene.truth[1].depth.clone());
    let sv = tape.var(s.clone());
    let cam = st.scene.camera();
    let (loss, fits) = match frozen {
        Some(f) => (occlusion_loss(f, depth, sv, cam), f.clone()),
        None => occlusion_regularization(&st.regions, depth, sv, &st.occ, &st.p_tgt, cam, &ReliableParams::default()).unwrap(),
    };
    let grads = tape.backward(loss.value);
    (loss.value.item(), grads.wrt(sv), fits)
}

fn occlusion_loss_correctness() -> Outcome {
    let t0 = Instant::now();
    let st = rigid_setup();
    let gt_s = st.scene.truth[1].sf_fwd.clone();
    let (l_gt, _, fits) = occ_loss_at(&st, &gt_s, None);
    ensure(!fits.fits.is_empty(), || format!("no region kept: {:?}", fits.skipped))?;
    ensure(l_gt < 1e-10, || format!("L_occ on rigid ground truth is {l_gt:e}"))?;

    // Away from the optimum the refit moves with s; the analytic gradient
    // must match the loss with the fits frozen, i.e. carry nothing through
    // the fitted transform.
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let noisy = Tensor::from_fn(gt_s.shape(), |i| gt_s.data()[i] + rng.gen_range(-0.02..0.02));
    let (_, grad, fits) = occ_loss_at(&st, &noisy, None);
    ensure(!fits.fits.is_empty(), || "no region kept for the perturbed field".into())?;
    let n = st.scene.height() * st.scene.width();
    let fit = &fits.fits[0];
    let occluded: Vec<usize> = fit.pixels.iter().copied().filter(|&i| st.occ.is_occluded(i)).collect();
    let visible: Vec<usize> = fit.pixels.iter().copied().filter(|&i| !st.occ.is_occluded(i)).collect();
    let probes: Vec<usize> = occluded.iter().take(4).chain(visible.iter().take(4)).copied().collect();
    let eps = 1e-6;
    let (mut frozen_err, mut refit_gap, mut occ_grad) = (0.0f64, 0.0f64, 0.0f64);
    for &px in &probes {
        for c in 0..3 {
            let k = c * n + px;
            let at = |delta: f64, frozen: Option<&RegionFits>| {
                let mut s = noisy.clone();
                s.data_mut()[k] += delta;
                occ_loss_at(&st, &s, frozen).0
            };
            let fd_frozen = (at(eps, Some(&fits)) - at(-eps, Some(&fits))) / (2.0 * eps);
            let fd_refit = (at(eps, None) - at(-eps, None)) / (2.0 * eps);
            frozen_err = frozen_err.max((grad.data()[k] - fd_frozen).abs());
            refit_gap = refit_gap.max((fd_refit - fd_frozen).abs());
            if occluded.contains(&px) {
                occ_grad = occ_grad.max(grad.data()[k].abs().min(fd_frozen.abs()));
            }
        }
    }
    ensure(frozen_err < 1e-8, || format!("analytic gradient differs from the frozen-fit probe by {frozen_err:e}"))?;
    ensure(occ_grad > 1e-6, || format!("occluded-pixel gradient is {occ_grad:e}"))?;
    within(t0.elapsed(), 30.0)?;
    Ok(format!(
        "L_occ(gt) {l_gt:.1e}; |grad - FD(frozen fit)| {frozen_err:.1e} while refitting moves FD by {refit_gap:.1e}; \
         occluded |grad| up to {occ_grad:.1e} ({} occluded pixels)",
        occluded.len()
    ))
}

// 4

const GC: usize = 8;

struct GradInstance {
    cam: Camera64,
    images: [Tensor<f64>; 4],
    regions: Vec<RegionMask>,
    fields: Vec<Tensor<f64>>,
    masks: Vec<IterationMasks<f64>>,
    cfg: LossConfig,
}

fn smooth_image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let waves: Vec<[f64; 4]> =
        (0..9).map(|_| [rng.gen_range(0.3..1.4), rng.gen_range(0.3..1.4), rng.gen_range(0.0..6.3), rng.gen_range(0.05..0.15)]).collect();
    let n = GC * GC;
    Tensor::from_fn(&[3, GC, GC], |i| {
        let (c, p) = (i / n, i % n);
        let (x, y) = ((p % GC) as f64, (p / GC) as f64);
        let w = &waves[3 * c..3 * c + 3];
        0.5 + w.iter().map(|w| w[3] * (w[0] * x + w[1] * y + w[2]).sin()).sum::<f64>()
    })
}

const ITERS: usize = 2;

fn grad_instance() -> GradInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cam = camera(8.0, GC, GC, 0.5);
    let images = [0; 4].map(|_| smooth_image(&mut rng));
    let n = GC * GC;
    let ids: Vec<u32> = (0..n).map(|i| if i % GC < GC / 2 { 1 } else { 2 }).collect();
    let regions = msf_core::data::regions_from_ids(&ids, GC, GC, None);
    let mut fields = Vec::new();
    for _ in 0..ITERS {
        fields.push(Tensor::from_fn(&[1, GC, GC], |_| rng.gen_range(0.8..1.6)));
        fields.push(Tensor::from_fn(&[3, GC, GC], |_| rng.gen_range(-0.08..0.08)));
        fields.push(Tensor::from_fn(&[1, GC, GC], |_| rng.gen_range(0.8..1.6)));
        fields.push(Tensor::from_fn(&[3, GC, GC], |_| rng.gen_range(-0.08..0.08)));
    }
    // Every region keeps its pixels so the occlusion term participates.
    let cfg = LossConfig { reliable: ReliableParams { theta: 1e3, min_points: 3, ..ReliableParams::default() }, ..LossConfig::default() };
    let occ_pattern = |salt: usize| {
        let m = Tensor::from_fn(&[GC, GC], |i| if (i * 7 + salt) % 5 == 0 { 1.0 } else { 0.0 });
        OcclusionMasks { disparity: m.map(|v| v * 0.0), scene_flow: m }
    };
    let masks = (0..ITERS)
        .map(|it| {
            let f = &fields[4 * it..4 * it + 4];
            let d_t = DisparityField::new(f[0].clone(), 1).unwrap();
            let s_f = SceneFlowField::new(f[1].clone()).unwrap();
            let d_t1 = DisparityField::new(f[2].clone(), 1).unwrap();
            let occ_t = occ_pattern(it);
            let fits = if it + 1 == ITERS {
                let p_tgt = target_points(&d_t, &s_f, &d_t1, &cam).unwrap();
                let depth = disparity_to_depth(&d_t, &cam).unwrap();
                Some(fit_regions(&regions, &occ_t, &depth, &s_f, &p_tgt, &cam, &cfg.reliable))
            } else {
                None
            };
            IterationMasks { occ_t, occ_t1: occ_pattern(it + 3), fits }
        })
        .collect();
    GradInstance { cam, images, regions, fields, masks, cfg }
}

fn full_loss<'t>(g: &GradInstance, vars: &[Var<'t, f64>]) -> Var<'t, f64> {
    let views = LossViews {
        t: StereoFrame { left: &g.images[0], right: &g.images[1] },
        t1: StereoFrame { left: &g.images[2], right: &g.images[3] },
        cam: &g.cam,
        regions: &g.regions,
    };
    let (mut l_d, mut l_sf, mut l_occ) = (Vec::new(), Vec::new(), Vec::new());
    for it in 0..ITERS {
        let v = &vars[4 * it..4 * it + 4];
        let fields = IterationFields { d_t: v[0], s_f: v[1], d_t1: v[2], s_b: v[3] };
        let terms = iteration_losses(&fields, &g.masks[it], &views, &g.cfg);
        l_d.push(terms.l_d);
        l_sf.push(terms.l_sf);
        l_occ.extend(terms.l_occ);
    }
    let weights = LossWeights { iterations: ITERS, ..g.cfg.weights };
    total_loss(&l_d, &l_sf, &l_occ, &weights, true).unwrap().0
}

/// Bilinear sampling and the in-bounds test both break at integer
/// coordinates, the image border included.
fn near_kink(x: f64, margin: f64) -> bool {
    let frac = x - x.floor();
    frac.min(1.0 - frac) < margin
}

/// True when input coordinate `k` of field `fi` moves a bilinear sample
/// within `margin` of a grid line or the image border.
fn kink_coordinate(g: &GradInstance, fi: usize, k: usize, margin: f64) -> bool {
    let n = GC * GC;
    let it = fi / 4;
    let f = &g.fields[4 * it..4 * it + 4];
    let px = k % n;
    let (x, y) = ((px % GC) as f64, (px / GC) as f64);
    let positions = |d: &Tensor<f64>, s: &Tensor<f64>| {
        let dd = DisparityField::new(d.clone(), 1).unwrap();
        let ss = SceneFlowField::new(s.clone()).unwrap();
        let fl = flow_from_sceneflow(&dd, &ss, &g.cam).unwrap().coords;
        [x - d.data()[px], y, x + fl.data()[px], y + fl.data()[n + px]]
    };
    let pos = match fi % 4 {
        0 | 1 => positions(&f[0], &f[1]),
        _ => positions(&f[2], &f[3]),
    };
    // Stereo samples depend on the disparity inputs only.
    let relevant: &[usize] = if fi % 2 == 0 { &[0, 2, 3] } else { &[2, 3] };
    relevant.iter().any(|&j| near_kink(pos[j], margin))
}

fn full_loss_gradient() -> Outcome {
    let t0 = Instant::now();
    let g = grad_instance();
    let kept = g.masks[ITERS - 1].fits.as_ref().map_or(0, |f| f.fits.len());
    ensure(kept == 2, || format!("expected both regions in the occlusion term, got {kept}"))?;
    let skip = |fi: usize, k: usize| kink_coordinate(&g, fi, k, 1e-3);
    let check = check_gradients(&|_, v| full_loss(&g, v), &g.fields, 1e-5, 1e-6, &skip);
    let total: usize = g.fields.iter().map(|t| t.numel()).sum();
    if std::env::var("GC_DEBUG").is_ok() {
        for (fi, (a, n)) in check.analytic.iter().zip(&check.numeric).enumerate() {
            for k in 0..a.numel() {
                let (av, nv) = (a.data()[k], n.data()[k]);
                if !skip(fi, k) && (av - nv).abs() > 1e-3 * av.abs().max(nv.abs()).max(1e-6) {
                    println!("field {fi} k {k} analytic {av:e} numeric {nv:e}");
                }
            }
        }
    }
    ensure(check.checked * 10 >= total * 8, || format!("only {} of {total} coordinates checked", check.checked))?;
    ensure(check.max_rel_error < 1e-3, || format!("max relative error {:e}", check.max_rel_error))?;
    within(t0.elapsed(), 120.0)?;
    Ok(format!("{} of {total} coordinates, max rel error {:.1e}, {ITERS} iterations with L_occ", check.checked, check.max_rel_error))
}

// 5

struct Brute {
    d1: Counts,
    d2: Counts,
    fl: Counts,
    sf: [Counts; 3],
}

fn brute_force(p: &Prediction<f64>, g: &GroundTruth<f64>, combiner: Combiner) -> Brute {
    let n = g.occ.d1.len();
    let out = |err: f64, mag: f64| match combiner {
        Combiner::And => err > 3.0 && err > 0.05 * mag,
        Combiner::Or => err > 3.0 || err > 0.05 * mag,
    };
    let zero = Counts::default();
    let mut b = Brute { d1: zero, d2: zero, fl: zero, sf: [zero; 3] };
    let bump = |c: &mut Counts, o: bool| {
        c.total += 1;
        c.outliers += o as usize;
    };
    for i in 0..n {
        let o1 = out((p.d1.data()[i] - g.d1.data()[i]).abs(), g.d1.data()[i].abs());
        let o2 = out((p.d2.data()[i] - g.d2.data()[i]).abs(), g.d2.data()[i].abs());
        let (ex, ey) = (p.flow.data()[i] - g.flow.data()[i], p.flow.data()[n + i] - g.flow.data()[n + i]);
        let ofl = out(ex.hypot(ey), g.flow.data()[i].hypot(g.flow.data()[n + i]));
        let (v1, v2, vf) = (g.occ.d1.data[i], g.occ.d2.data[i], g.occ.fl.data[i]);
        if v1 {
            bump(&mut b.d1, o1);
        }
        if v2 {
            bump(&mut b.d2, o2);
        }
        if vf {
            bump(&mut b.fl, ofl);
        }
        if v1 && v2 && vf {
            let o = (o1 && v1) || (o2 && v2) || (ofl && vf);
            bump(&mut b.sf[0], o);
            let noc = g.noc.d1.data[i] && g.noc.d2.data[i] && g.noc.fl.data[i];
            bump(&mut b.sf[if noc { 1 } else { 2 }], o);
        }
    }
    b
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Prediction<f64>, GroundTruth<f64>) {
    let (h, w) = (16, 32);
    let gt_d1 = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(1.0..120.0));
    let gt_d2 = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(1.0..120.0));
    let gt_fl = Tensor::from_fn(&[2, h, w], |_| rng.gen_range(-100.0..100.0));
    // Errors straddle both thresholds, with some exactly on them.
    let noise = |t: &Tensor<f64>, rng: &mut ChaCha8Rng| {
        Tensor::from_fn(t.shape(), |i| {
            let v = t.data()[i];
            match rng.gen_range(0..6) {
            0 => v,
            1 => v + 3.0,
            2 => v * 1.05,
            3 => v + rng.gen_range(-2.0..2.0),
            _ => v + rng.gen_range(-12.0..12.0),
            }
        })
    };
    let pred = Prediction { d1: noise(&gt_d1, rng), d2: noise(&gt_d2, rng), flow: noise(&gt_fl, rng) };
    let mut mask = |p: f64| BoolMap::from_fn(h, w, |_| rng.gen_bool(p));
    let occ = ComponentValidity { d1: mask(0.95), d2: mask(0.85), fl: mask(0.85) };
    let keep = |m: &BoolMap, rng: &mut ChaCha8Rng| BoolMap::from_fn(h, w, |i| m.data[i] && rng.gen_bool(0.8));
    let noc = ComponentValidity { d1: keep(&occ.d1, rng), d2: keep(&occ.d2, rng), fl: keep(&occ.fl, rng) };
    (pred, GroundTruth { d1: gt_d1, d2: gt_d2, flow: gt_fl, occ, noc })
}

fn metrics_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut frames = Vec::new();
    let mut total = [Counts::default(); 6];
    for case in 0..50 {
        let (p, g) = random_instance(&mut rng);
        for combiner in [Combiner::And, Combiner::Or] {
            let c = evaluate_frame(&p, &g, combiner).map_err(|e| e.to_string())?;
            let b = brute_force(&p, &g, combiner);
            let expected = [b.d1, b.d2, b.fl, b.sf[0], b.sf[1], b.sf[2]];
            let got = [c.d1, c.d2, c.fl, c.sf_all, c.sf_noc, c.sf_occ];
            ensure(got == expected, || format!("case {case} {combiner:?}: {got:?} != {expected:?}"))?;
            if combiner == Combiner::And {
                for (t, e) in total.iter_mut().zip(expected) {
                    t.outliers += e.outliers;
                    t.total += e.total;
                }
            }
        }
        frames.push((p, g));
    }
    let (_, report) = evaluate(&frames, Combiner::And).map_err(|e| e.to_string())?;
    // Round half up in hundredths of a percent, in integers.
    let pct = |c: Counts| ((20000 * c.outliers + c.total) / (2 * c.total)) as f64 / 100.0;
    let got = report.entries().map(|(_, v)| v);
    let want = total.map(pct);
    ensure(got == want, || format!("aggregate {got:?} != {want:?}"))?;
    within(t0.elapsed(), 10.0)?;
    Ok(format!("50 instances x 2 combiners match the per-pixel loop; SF-all {:.2}", report.sf_all))
}

// 6

fn attention_and_fusion() -> Outcome {
    let t0 = Instant::now();
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (h, w) = (6, 8);
    let (attn, fusion) = {
        let mut init = Init { store: &mut store, rng: &mut rng };
        (PositionalAttention::new(&mut init, 5, 4, 3, (h, w)), TemporalFusion::new(&mut init, 2))
    };
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let g = tape.constant(Tensor::from_fn(&[5, h, w], |_| rng.gen_range(-2.0..2.0)));
    let a = attn.attention_map(&p, g).value();
    let s = h * w;
    let mut row_err = 0.0f64;
    for r in 0..s {
        let sum: f64 = a.data()[r * s..(r + 1) * s].iter().sum();
        row_err = row_err.max((sum - 1.0).abs());
    }
    ensure(row_err < 1e-6, || format!("attention row sums off by {row_err:e}"))?;

    let m = tape.constant(Tensor::from_fn(&[4, h, w], |_| rng.gen_range(-1.0..1.0)));
    let mp = attn.aggregate(&p, m, tape.constant((*a).clone())).value();
    ensure(*mp == *m.value(), || "alpha = 0 changed the motion feature".into())?;

    let fwd = tape.constant(Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0)));
    let bwd = tape.constant(Tensor::from_fn(&[2, 3, 3], |_| rng.gen_range(-1.0..1.0)));
    let cat = |a: &Tensor<f64>, b: &Tensor<f64>| {
        let mut d = a.data().to_vec();
        d.extend(b.data().iter().map(|v| -v));
        Tensor::new(&[4, 3, 3], d)
    };
    let (fv, bv) = (fwd.value(), bwd.value());
    let f_in = fusion.forward(&p, fwd, bwd, Direction::Forward, true).map_err(|e| e.to_string())?.input.value();
    let b_in = fusion.forward(&p, fwd, bwd, Direction::Backward, true).map_err(|e| e.to_string())?.input.value();
    ensure(*f_in == cat(&fv, &bv) && *b_in == cat(&bv, &fv), || "fusion input is not [own, -other]".into())?;

    let (ph, pw) = (store.get(attn.p_h), store.get(attn.p_w));
    let emb = positional_embedding(ph, pw, h, w);
    let d = attn.dim;
    let mut by_offset = std::collections::HashMap::new();
    let mut pairs = 0usize;
    for q in 0..s {
        for k in 0..s {
            let off = ((k / w) as i64 - (q / w) as i64, (k % w) as i64 - (q % w) as i64);
            let v = emb.data()[(q * s + k) * d..(q * s + k + 1) * d].to_vec();
            let first = by_offset.entry(off).or_insert_with(|| v.clone());
            ensure(*first == v, || format!("embedding differs within offset {off:?}"))?;
            pairs += 1;
        }
    }
    ensure(by_offset.len() == (2 * h - 1) * (2 * w - 1), || "unexpected offset count".into())?;
    within(t0.elapsed(), 10.0)?;
    Ok(format!("row sums within {row_err:.1e}; alpha=0 exact; fusion wiring exact; {pairs} pairs over {} offsets", by_offset.len()))
}

// 7

fn recurrent_contracts() -> Outcome {
    let t0 = Instant::now();
    let net = SceneFlowNet::<f64>::new(model::ModelConfig::tiny(), 7);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let (h, w) = (32, 64);
    let frames: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.0..1.0))).collect();
    let cam = camera(50.0, w, h, 0.5);
    let tape = Tape::new();
    let p = net.params.bind(&tape, true);
    let vars = [0, 1, 2].map(|i| tape.constant(frames[i].clone()));
    let iters = 4;
    let pass = net.forward(&p, vars, &cam, iters).map_err(|e| e.to_string())?;
    let floor = DISPARITY_FLOOR;
    let (mut tele, mut hmax, mut convex) = (0.0f64, 0.0f64, 0.0f64);
    for (k, dir) in [Direction::Forward, Direction::Backward].into_iter().enumerate() {
        let steps = pass.steps(dir);
        let init = &pass.initial[k];
        let mut s_sum = (*init.s.value()).clone();
        let mut d_prev = (*init.d.value()).clone();
        for st in steps {
            s_sum = s_sum.zip_map(&st.ds.value(), |a, b| a + b);
            let d_expect = d_prev.zip_map(&st.dd.value(), |a, b| (a + b).max(floor));
            for (a, b) in st.s_low.value().data().iter().zip(s_sum.data()) {
                tele = tele.max((a - b).abs());
            }
            for (a, b) in st.d_low.value().data().iter().zip(d_expect.data()) {
                tele = tele.max((a - b).abs());
            }
            d_prev = (*st.d_low.value()).clone();
            for &v in st.hidden.value().data() {
                hmax = hmax.max(v.abs());
            }
            // Each full-res value lies within its 3x3 low-res neighborhood.
            let (lo, up) = (st.s_low.value(), st.s.value());
            let (lh, lw) = (lo.dim(1), lo.dim(2));
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let (cy, cx) = (y / 8, x / 8);
                        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (yy, xx) = (cy as i64 + dy, cx as i64 + dx);
                                // Border cells replicate their edge.
                                let (yy, xx) = (yy.clamp(0, lh as i64 - 1) as usize, xx.clamp(0, lw as i64 - 1) as usize);
                                let v = lo.data()[(c * lh + yy) * lw + xx];
                                mn = mn.min(v);
                                mx = mx.max(v);
                            }
                        }
                        let v = up.data()[(c * h + y) * w + x];
                        convex = convex.max(mn - v).max(v - mx);
                    }
                }
            }
            let wmin = st.upsample_weights.value().data().iter().fold(f64::INFINITY, |a, &b| a.min(b));
            ensure(wmin >= 0.0, || "negative upsampling weight".into())?;
        }
    }
    let last = |dir| pass.steps(dir).last().expect("iterations ran").hidden;
    let grads = tape.backward(
        convex_upsample(
            pass.forward[iters - 1].s_low.detach(),
            pass.forward[iters - 1].upsample_weights,
            FieldUnit::Metric,
        )
        .sum(),
    );
    let hidden_grad = grads.wrt(last(Direction::Forward));
    let hg = hidden_grad.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));

    // Standalone upsampler: the weights see a detached copy of the hidden state.
    let mut store = ParamStore::<f64>::new();
    let mask = UpsampleMask::new(&mut Init { store: &mut store, rng: &mut ChaCha8Rng::seed_from_u64(71) }, 4, 6);
    let t2 = Tape::new();
    let p2 = store.bind(&t2, true);
    let hidden = t2.var(Tensor::from_fn(&[4, 3, 5], |_| rng.gen_range(-1.0..1.0)));
    let field = t2.var(Tensor::from_fn(&[1, 3, 5], |_| rng.gen_range(0.5..2.0)));
    let out = convex_upsample(field, mask.weights(&p2, hidden), FieldUnit::Pixels);
    let g2 = t2.backward(out.square().sum());
    let standalone = g2.wrt(hidden).data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let field_grad = g2.wrt(field).data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let mask_grad = g2.wrt(p2.vars()[0]).data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));

    ensure(tele < 1e-12, || format!("telescoping error {tele:e}"))?;
    ensure(hmax < 1.0, || format!("hidden magnitude {hmax}"))?;
    ensure(convex <= 1e-12, || format!("upsampled value leaves its neighborhood range by {convex:e}"))?;
    ensure(hg == 0.0 && standalone == 0.0, || format!("upsampler passes gradient to hidden: {hg:e} / {standalone:e}"))?;
    ensure(field_grad > 0.0 && mask_grad > 0.0, || "upsampler gradients vanished entirely".into())?;
    within(t0.elapsed(), 30.0)?;
    Ok(format!("telescoping {tele:.1e}; max |h| {hmax:.3}; convexity slack {convex:.1e}; hidden gradient exactly 0"))
}

// 8

fn weight_arithmetic() -> Outcome {
    let t0 = Instant::now();
    let w1 = iteration_weight(0.8, 10, 0);
    let e = (w1 - 0.134_217_728).abs();
    ensure(e < 1e-12, || format!("first-iteration weight {w1}"))?;
    let tape = Tape::<f64>::new();
    let n = 10;
    let l_d: Vec<_> = (0..n).map(|i| tape.scalar(1.0 + i as f64 * 0.1)).collect();
    let l_sf: Vec<_> = (0..n).map(|i| tape.scalar(0.5 - i as f64 * 0.02)).collect();
    let l_occ: Vec<_> = (0..n).map(|i| tape.scalar(0.3 + i as f64 * 0.05)).collect();
    let base = LossWeights::default();
    let all = LossWeights { timing: OccTiming::All, ..base };
    let (tf, rf) = total_loss(&l_d, &l_sf, &l_occ[n - 1..], &base, true).map_err(|e| e.to_string())?;
    let (ta, ra) = total_loss(&l_d, &l_sf, &l_occ, &all, true).map_err(|e| e.to_string())?;
    let shared: f64 = (0..n).map(|i| 0.8f64.powi((n - 1 - i) as i32) * (l_d[i].item() + 0.1 * l_sf[i].item())).sum();
    let occ_all: f64 = (0..n).map(|i| 0.8f64.powi((n - 1 - i) as i32) * l_occ[i].item()).sum();
    let occ_final = l_occ[n - 1].item();
    ensure((tf.item() - shared - occ_final).abs() < 1e-12, || "final timing total does not decompose".into())?;
    ensure((ta.item() - shared - occ_all).abs() < 1e-12, || "all timing total does not decompose".into())?;
    ensure(rf.l_d == ra.l_d && rf.l_sf == ra.l_sf, || "timing changed the shared terms".into())?;
    ensure(rf.l_occ.len() == 1 && ra.l_occ.len() == n, || "unexpected occlusion term counts".into())?;
    ensure((rf.recompute_total() - tf.item()).abs() < 1e-12 && (ra.recompute_total() - ta.item()).abs() < 1e-12, || "reports do not reproduce totals".into())?;
    within(t0.elapsed(), 1.0)?;
    Ok(format!("w_1 = {w1:.12}; final {:.6} = shared {shared:.6} + {occ_final:.6}; all adds {occ_all:.6}", tf.item()))
}

// 10

fn codec_exactness() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (h, w) = (6, 10);
    let (dp, fp) = (dir.path().join("d.png"), dir.path().join("f.png"));
    for case in 0..1000 {
        let valid = BoolMap::from_fn(h, w, |_| rng.gen_bool(0.8));
        let d = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(1..=65535u32) as f64 / DISPARITY_SCALE);
        let f = Tensor::from_fn(&[2, h, w], |_| (rng.gen_range(0..=65535u32) as f64 - FLOW_OFFSET) / FLOW_SCALE);
        write_disparity_png(&dp, &d, Some(&valid)).map_err(|e| e.to_string())?;
        write_flow_png(&fp, &f, Some(&valid)).map_err(|e| e.to_string())?;
        let rd = read_disparity_png(&dp).map_err(|e| e.to_string())?;
        let rf = read_flow_png(&fp).map_err(|e| e.to_string())?;
        ensure(rd.valid == valid && rf.valid == valid, || format!("case {case}: validity changed"))?;
        let n = h * w;
        for i in 0..n {
            if valid.data[i] {
                ensure(rd.values.data()[i] == d.data()[i], || format!("case {case}: disparity {i}"))?;
                ensure(rf.values.data()[i] == f.data()[i] && rf.values.data()[n + i] == f.data()[n + i], || format!("case {case}: flow {i}"))?;
            }
        }
    }
    ensure(decode_disparity(0).is_none() && decode_flow(32768) == 0.0, || "sentinel decoding".into())?;
    within(t0.elapsed(), 5.0)?;
    Ok("1000 disparity and flow fields roundtrip exactly".into())
}

// 9

fn sf_rates(net: &Net32, scene: &SyntheticScene, iters: &[usize]) -> std::result::Result<Vec<f64>, String> {
    let frames: Vec<Tensor<f32>> = scene.left[0..3].iter().map(|t| t.cast()).collect();
    let cam: Camera32 = scene.camera().cast();
    let max = *iters.iter().max().expect("non-empty");
    let trace = net.run_iterations([&frames[0], &frames[1], &frames[2]], &cam, max).map_err(|e| e.to_string())?;
    let gt = scene.ground_truth(1);
    iters
        .iter()
        .map(|&n| {
            let (d, s) = trace.prediction(n - 1);
            let pred = Prediction::from_fields(&d.cast::<f64>(), &s.cast::<f64>(), scene.camera()).map_err(|e| e.to_string())?;
            Ok(evaluate_frame(&pred, &gt, Combiner::And).map_err(|e| e.to_string())?.report().sf_all)
        })
        .collect()
}

/// Consecutive rate increases; the trend holds with at most one, of at most
/// one point.
fn inversions(rates: &[f64]) -> Vec<f64> {
    rates.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect()
}

fn training_trend() -> Outcome {
    let t0 = Instant::now();
    let scene = synth_scene(&SceneConfig::default()).map_err(|e| e.to_string())?;
    ensure(scene.left[0].dim(1) == 64 && scene.left[0].dim(2) == 128, || "default scene is not 64x128".into())?;
    let batches = msf_core::data::sequences::synthetic_batches("scene", &scene);
    let mut cfg = RunConfig::default();
    cfg.set("model", "tiny").map_err(|e| e.to_string())?;
    // Desk-scale occlusion weight: the regularizer's disparity gradient grows
    // as 1/f, and this camera's focal length is ~0.15 of a full-size one.
    cfg.lambda_occ = 0.1;
    cfg.steps = 300;
    let mut trainer = Trainer32::new(cfg).map_err(|e| e.to_string())?;
    let iters = [1, 2, 4, 8, 10];
    let before = sf_rates(&trainer.net, &scene, &iters)?;
    let logs = trainer.run(&batches, None, |_| {}).map_err(|e| e.to_string())?;
    ensure(logs.len() == 300, || format!("{} steps logged", logs.len()))?;
    ensure(logs.iter().all(|l| l.report.total.is_finite() && l.grad_norm.is_finite()), || "non-finite loss or gradient".into())?;
    let (first, last) = (logs[0].report.total, logs[299].report.total);
    let after = sf_rates(&trainer.net, &scene, &iters)?;
    let elapsed = t0.elapsed();
    let detail = format!("loss {first:.4} -> {last:.4}; SF-all untrained {before:.2?}, trained {after:.2?} at N = {iters:?}");
    ensure(last < 0.5 * first, || format!("final loss not below half the initial; {detail}"))?;
    ensure(after[iters.len() - 1] < before[iters.len() - 1], || format!("training did not lower SF-all; {detail}"))?;
    let inv = inversions(&after);
    ensure(inv.len() <= 1 && inv.iter().all(|&d| d <= 1.0), || format!("SF-all rises with N ({inv:.2?}); {detail}"))?;
    ensure(elapsed < Duration::from_secs(15 * 60), || format!("took {elapsed:?}; {detail}"))?;
    Ok(detail)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("geometry roundtrips", geometry_roundtrips),
        ("rigid-fit oracle", rigid_fit_oracle),
        ("occlusion loss correctness", occlusion_loss_correctness),
        ("full-loss gradient check", full_loss_gradient),
        ("metrics oracle", metrics_oracle),
        ("attention and fusion contracts", attention_and_fusion),
        ("recurrent contracts", recurrent_contracts),
        ("loss-weight arithmetic", weight_arithmetic),
        ("training smoke and iteration trend", training_trend),
        ("codec exactness", codec_exactness),
    ];
    let only: Option<usize> = std::env::var("MSF_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let k = k + 1;
        if only.is_some_and(|o| o != k) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {k}: {name} ({secs:.1}s) {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {k}: {name} ({secs:.1}s) {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
