//! Per-iteration self-supervised terms for a pair of consecutive triplets.

use msf_autograd::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::occlusion::{occlusion_masks_with, ConsistencyThresholds, OcclusionMasks};
use super::photometric::{photometric_loss, smoothness_loss};
use super::rigid::{fit_regions, occlusion_loss, RegionFits, RegionMask, ReliableParams};
use super::total::{total_loss, LossReport, LossWeights, OccTiming};
use crate::camera::{
    backproject, diff, disparity_to_depth, flow_from_sceneflow, warp_bilinear, CameraModel, DisparityField, PointMap,
    SceneFlowField,
};
use crate::error::Result;
use crate::model::ForwardPass;

/// Weights of the terms inside `L_d` and `L_sf`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub disparity_smooth: f64,
    pub point: f64,
    pub flow_smooth: f64,
}

impl Default for TermWeights {
    fn default() -> Self {
        Self { disparity_smooth: 0.1, point: 0.2, flow_smooth: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub terms: TermWeights,
    pub thresholds: ConsistencyThresholds,
    pub reliable: ReliableParams,
}

/// Left and right images of one time step, `[3, H, W]`.
#[derive(Clone, Copy)]
pub struct StereoFrame<'a, T> {
    pub left: &'a Tensor<T>,
    pub right: &'a Tensor<T>,
}

/// Observations of frames `t` and `t+1`.
#[derive(Clone, Copy)]
pub struct LossViews<'a, T> {
    pub t: StereoFrame<'a, T>,
    pub t1: StereoFrame<'a, T>,
    /// Full-resolution camera.
    pub cam: &'a CameraModel<T>,
    /// Segmentation of frame `t`.
    pub regions: &'a [RegionMask],
}

/// Full-resolution predictions entering one iteration's loss: disparity and
/// forward scene flow of `t`, disparity and backward scene flow of `t+1`.
#[derive(Clone, Copy)]
pub struct IterationFields<'t, T> {
    pub d_t: Var<'t, T>,
    pub s_f: Var<'t, T>,
    pub d_t1: Var<'t, T>,
    pub s_b: Var<'t, T>,
}

impl<'t, T: Scalar> IterationFields<'t, T> {
    /// Fields of iteration `i` from the triplets centered at `t` and `t+1`.
    pub fn from_passes(at_t: &ForwardPass<'t, T>, at_t1: &ForwardPass<'t, T>, i: usize) -> Self {
        Self { d_t: at_t.disparity(i), s_f: at_t.forward[i].s, d_t1: at_t1.disparity(i), s_b: at_t1.backward[i].s }
    }
}

/// Masks and region fits, computed from current values and held constant.
#[derive(Clone, Debug)]
pub struct IterationMasks<T> {
    pub occ_t: OcclusionMasks<T>,
    pub occ_t1: OcclusionMasks<T>,
    pub fits: Option<RegionFits>,
}

fn plain_fields<T: Scalar>(f: &IterationFields<'_, T>) -> Result<[(DisparityField<T>, SceneFlowField<T>); 2]> {
    Ok([
        (DisparityField::new((*f.d_t.value()).clone(), 1)?, SceneFlowField::new((*f.s_f.value()).clone())?),
        (DisparityField::new((*f.d_t1.value()).clone(), 1)?, SceneFlowField::new((*f.s_b.value()).clone())?),
    ])
}

/// Point cloud of `t+1` sampled where the pixels of `t` land.
pub fn target_points<T: Scalar>(
    d_t: &DisparityField<T>,
    s_f: &SceneFlowField<T>,
    d_t1: &DisparityField<T>,
    cam: &CameraModel<T>,
) -> Result<PointMap<T>> {
    let flow = flow_from_sceneflow(d_t, s_f, cam)?;
    let p_t1 = backproject(&disparity_to_depth(d_t1, cam)?, cam);
    let (sampled, _) = warp_bilinear(p_t1.values(), &flow.coords)?;
    PointMap::new(sampled)
}

pub fn iteration_masks<T: Scalar>(
    fields: &IterationFields<'_, T>,
    views: &LossViews<'_, T>,
    cfg: &LossConfig,
    with_fits: bool,
) -> Result<IterationMasks<T>> {
    let [(d_t, s_f), (d_t1, s_b)] = plain_fields(fields)?;
    let th = cfg.thresholds;
    let occ_t = occlusion_masks_with(&d_t, &d_t1, &s_f, &s_b, views.cam, th)?;
    let occ_t1 = occlusion_masks_with(&d_t1, &d_t, &s_b, &s_f, views.cam, th)?;
    let fits = if with_fits {
        let depth = disparity_to_depth(&d_t, views.cam)?;
        let p_tgt = target_points(&d_t, &s_f, &d_t1, views.cam)?;
        Some(fit_regions(views.regions, &occ_t, &depth, &s_f, &p_tgt, views.cam, &cfg.reliable))
    } else {
        None
    };
    Ok(IterationMasks { occ_t, occ_t1, fits })
}

/// Scalar terms of one iteration.
pub struct IterationLosses<'t, T> {
    pub l_d: Var<'t, T>,
    pub l_sf: Var<'t, T>,
    pub l_occ: Option<Var<'t, T>>,
    /// Photometric terms whose mask selected nothing.
    pub empty_masks: usize,
}

fn visible<T: Scalar>(occ: &Tensor<T>, valid: &Tensor<T>) -> Tensor<T> {
    occ.zip_map(valid, |o, v| (T::one() - o) * v)
}

fn stereo_term<'t, T: Scalar>(d: Var<'t, T>, frame: StereoFrame<'_, T>, occ: &Tensor<T>, terms: &TermWeights, empty: &mut usize) -> Var<'t, T> {
    let tape = d.tape();
    let zeros = tape.constant(Tensor::zeros(&d.shape()));
    let flow = Var::concat(&[d.neg(), zeros], 0);
    let (warped, inb) = diff::warp(tape.constant(frame.right.clone()), flow);
    let photo = photometric_loss(tape.constant(frame.left.clone()), warped, &visible(occ, &inb));
    *empty += photo.empty_mask as usize;
    let normalized = d / d.mean();
    photo.value + smoothness_loss(normalized, frame.left).scale(T::lit(terms.disparity_smooth))
}

#[allow(clippy::too_many_arguments)]
fn temporal_term<'t, T: Scalar>(
    d_src: Var<'t, T>,
    s: Var<'t, T>,
    d_tgt: Var<'t, T>,
    src: &Tensor<T>,
    tgt: &Tensor<T>,
    occ: &Tensor<T>,
    cam: &CameraModel<T>,
    terms: &TermWeights,
    empty: &mut usize,
) -> Var<'t, T> {
    let tape = d_src.tape();
    let (flow, valid) = diff::flow_from_sceneflow(d_src, s, cam);
    let (warped, inb) = diff::warp(tape.constant(tgt.clone()), flow);
    let mask = visible(occ, &inb.zip_map(&valid, |a, b| a * b));
    let photo = photometric_loss(tape.constant(src.clone()), warped, &mask);
    *empty += photo.empty_mask as usize;
    let p_src = diff::backproject(diff::depth_from_disparity(d_src, cam), cam);
    let p_tgt = diff::backproject(diff::depth_from_disparity(d_tgt, cam), cam);
    let (p_warp, _) = diff::warp(p_tgt, flow);
    let rel = (p_src + s - p_warp).norm_axis0() / p_src.norm_axis0().clamp_min(T::lit(1e-6));
    let point = if mask.sum() > T::zero() { rel.masked_mean(&mask) } else { tape.scalar(T::zero()) };
    photo.value + point.scale(T::lit(terms.point)) + smoothness_loss(s, src).scale(T::lit(terms.flow_smooth))
}

pub fn iteration_losses<'t, T: Scalar>(
    fields: &IterationFields<'t, T>,
    masks: &IterationMasks<T>,
    views: &LossViews<'_, T>,
    cfg: &LossConfig,
) -> IterationLosses<'t, T> {
    let terms = &cfg.terms;
    let mut empty = 0;
    let f = fields;
    let l_d = stereo_term(f.d_t, views.t, &masks.occ_t.disparity, terms, &mut empty)
        + stereo_term(f.d_t1, views.t1, &masks.occ_t1.disparity, terms, &mut empty);
    let (it, it1) = (views.t.left, views.t1.left);
    let l_sf = temporal_term(f.d_t, f.s_f, f.d_t1, it, it1, &masks.occ_t.scene_flow, views.cam, terms, &mut empty)
        + temporal_term(f.d_t1, f.s_b, f.d_t, it1, it, &masks.occ_t1.scene_flow, views.cam, terms, &mut empty);
    let l_occ = masks.fits.as_ref().map(|fits| {
        let depth = diff::depth_from_disparity(f.d_t, views.cam);
        occlusion_loss(fits, depth, f.s_f, views.cam).value
    });
    IterationLosses { l_d, l_sf, l_occ, empty_masks: empty }
}

pub struct SequenceLoss<'t, T> {
    pub total: Var<'t, T>,
    pub report: LossReport,
    pub empty_masks: usize,
    /// Regions kept by the final (or every) rigid fit.
    pub regions_kept: usize,
}

/// Total loss over all iterations of the triplets centered at `t` and `t+1`.
pub fn sequence_loss<'t, T: Scalar>(
    at_t: &ForwardPass<'t, T>,
    at_t1: &ForwardPass<'t, T>,
    views: &LossViews<'_, T>,
    cfg: &LossConfig,
    occ_active: bool,
) -> Result<SequenceLoss<'t, T>> {
    let n = at_t.iterations().min(at_t1.iterations());
    let (mut l_d, mut l_sf, mut l_occ) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::new());
    let (mut empty, mut kept) = (0, 0);
    for i in 0..n {
        let fields = IterationFields::from_passes(at_t, at_t1, i);
        let with_fits = occ_active
            && match cfg.weights.timing {
                OccTiming::Final => i + 1 == n,
                OccTiming::All => true,
            };
        let masks = iteration_masks(&fields, views, cfg, with_fits)?;
        kept += masks.fits.as_ref().map_or(0, |f| f.fits.len());
        let terms = iteration_losses(&fields, &masks, views, cfg);
        empty += terms.empty_masks;
        l_d.push(terms.l_d);
        l_sf.push(terms.l_sf);
        l_occ.extend(terms.l_occ);
    }
    let weights = LossWeights { iterations: n, ..cfg.weights };
    let (total, report) = total_loss(&l_d, &l_sf, &l_occ, &weights, occ_active)?;
    Ok(SequenceLoss { total, report, empty_masks: empty, regions_kept: kept })
}
