//! Outlier metrics for disparity, flow and scene flow, with the noc/occ split.

use std::str::FromStr;

use image::{Rgb, RgbImage};
use msf_autograd::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MsfError, Result};

pub const ABS_THRESHOLD: f64 = 3.0;
pub const REL_THRESHOLD: f64 = 0.05;

/// How the absolute and relative thresholds combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combiner {
    /// Outlier only when both thresholds are exceeded.
    #[default]
    And,
    Or,
}

impl FromStr for Combiner {
    type Err = MsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "and" => Ok(Self::And),
            "or" => Ok(Self::Or),
            other => Err(MsfError::Config(format!("unknown combiner '{other}' (expected and or or)"))),
        }
    }
}

impl Combiner {
    pub fn is_outlier(self, err: f64, magnitude: f64) -> bool {
        let (abs, rel) = (err > ABS_THRESHOLD, err > REL_THRESHOLD * magnitude);
        match self {
            Self::And => abs && rel,
            Self::Or => abs || rel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Scalar `[H, W]` or `[1, H, W]` field.
    Disparity,
    /// `[2, H, W]` field, endpoint error.
    Flow,
}

/// Boolean map over an `H x W` grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoolMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl BoolMap {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize) -> bool) -> Self {
        Self { height, width, data: (0..height * width).map(f).collect() }
    }

    /// Nonzero entries of a `[H, W]` or `[1, H, W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let (h, w) = (t.dim(t.rank() - 2), t.dim(t.rank() - 1));
        Self::from_fn(h, w, |i| t.data()[i] != T::zero())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width], |i| if self.data[i] { T::one() } else { T::zero() })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn check(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(MsfError::Shape(format!(
                "maps {}x{} and {}x{} differ",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn zip(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.check(other)?;
        Ok(Self { height: self.height, width: self.width, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a && b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a || b)
    }

    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn not(&self) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&b| !b).collect() }
    }

    /// Entries set in both maps.
    pub fn count_within(&self, set: &Self) -> Result<usize> {
        self.check(set)?;
        Ok(self.data.iter().zip(&set.data).filter(|(&a, &b)| a && b).count())
    }
}

fn plane_dims<T: Scalar>(t: &Tensor<T>, channels: usize, what: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    match (s.len(), channels) {
        (2, 1) => Ok((s[0], s[1])),
        (3, c) if s[0] == c => Ok((s[1], s[2])),
        _ => Err(MsfError::Shape(format!("{what} has shape {s:?}, expected {channels} channel(s)"))),
    }
}

/// Outliers among `valid` pixels.
pub fn outlier_map<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valid: &BoolMap,
    kind: ErrorKind,
    combiner: Combiner,
) -> Result<BoolMap> {
    let c = match kind {
        ErrorKind::Disparity => 1,
        ErrorKind::Flow => 2,
    };
    let (h, w) = plane_dims(gt, c, "ground truth")?;
    if plane_dims(pred, c, "prediction")? != (h, w) || (valid.height, valid.width) != (h, w) {
        return Err(MsfError::Shape(format!("prediction, ground truth and validity disagree on {h}x{w}")));
    }
    let n = h * w;
    let (p, g) = (pred.data(), gt.data());
    Ok(BoolMap::from_fn(h, w, |i| {
        if !valid.data[i] {
            return false;
        }
        let (err, mag) = match kind {
            ErrorKind::Disparity => ((p[i] - g[i]).as_f64().abs(), g[i].as_f64().abs()),
            ErrorKind::Flow => {
                let (dx, dy) = ((p[i] - g[i]).as_f64(), (p[n + i] - g[n + i]).as_f64());
                let (gx, gy) = (g[i].as_f64(), g[n + i].as_f64());
                (dx.hypot(dy), gx.hypot(gy))
            }
        };
        combiner.is_outlier(err, mag)
    }))
}

/// Union of component outliers, restricted to `joint_valid`.
pub fn sceneflow_outliers(d1: &BoolMap, d2: &BoolMap, fl: &BoolMap, joint_valid: &BoolMap) -> Result<BoolMap> {
    d1.or(d2)?.or(fl)?.and(joint_valid)
}

/// Per-component validity masks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentValidity {
    pub d1: BoolMap,
    pub d2: BoolMap,
    pub fl: BoolMap,
}

impl ComponentValidity {
    pub fn joint(&self) -> Result<BoolMap> {
        self.d1.and(&self.d2)?.and(&self.fl)
    }
}

/// `(noc set, occ set)`: pixels noc-valid in all components, and pixels
/// occ-valid in all components but noc-invalid in at least one.
pub fn occlusion_split(occ: &ComponentValidity, noc: &ComponentValidity) -> Result<(BoolMap, BoolMap)> {
    let all = occ.joint()?;
    let noc_set = noc.joint()?.and(&all)?;
    let occ_set = all.and_not(&noc_set)?;
    Ok((noc_set, occ_set))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth<T> {
    /// `[1, H, W]` disparity of frame `t`.
    pub d1: Tensor<T>,
    /// `[1, H, W]` disparity of the `t` pixels moved to `t+1`.
    pub d2: Tensor<T>,
    /// `[2, H, W]` optical flow.
    pub flow: Tensor<T>,
    /// Validity including occluded pixels.
    pub occ: ComponentValidity,
    /// Validity restricted to non-occluded pixels.
    pub noc: ComponentValidity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub d1: Tensor<T>,
    pub d2: Tensor<T>,
    pub flow: Tensor<T>,
}

impl<T: Scalar> Prediction<T> {
    /// Evaluated quantities from a disparity `[1, H, W]` and forward scene
    /// flow `[3, H, W]`: the flow they induce and the disparity of the moved
    /// points (0 where a point leaves the front of the camera).
    pub fn from_fields(d: &Tensor<T>, s: &Tensor<T>, cam: &crate::camera::CameraModel<T>) -> Result<Self> {
        use crate::camera::{apply_scene_flow, backproject, disparity_to_depth, flow_from_sceneflow, DisparityField, SceneFlowField};
        let d_field = DisparityField::new(d.clone(), 1)?;
        let s_field = SceneFlowField::new(s.clone())?;
        let flow = flow_from_sceneflow(&d_field, &s_field, cam)?.coords;
        let moved = apply_scene_flow(&backproject(&disparity_to_depth(&d_field, cam)?, cam), &s_field)?;
        let n = d.numel();
        let fb = cam.fb();
        let d2 = Tensor::from_fn(d.shape(), |i| {
            let z = moved.values().data()[2 * n + i];
            if z > T::zero() {
                fb / z
            } else {
                T::zero()
            }
        });
        Ok(Self { d1: d.clone(), d2, flow })
    }
}

/// Outlier and support counts backing a report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub outliers: usize,
    pub total: usize,
}

impl Counts {
    fn add(self, o: Self) -> Self {
        Self { outliers: self.outliers + o.outliers, total: self.total + o.total }
    }

    /// Percentage in hundredths, rounded half up.
    pub fn hundredths(&self) -> u64 {
        if self.total == 0 {
            return 0;
        }
        let (o, t) = (self.outliers as u128, self.total as u128);
        ((20000 * o + t) / (2 * t)) as u64
    }

    pub fn percent(&self) -> f64 {
        self.hundredths() as f64 / 100.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub d1: Counts,
    pub d2: Counts,
    pub fl: Counts,
    pub sf_all: Counts,
    pub sf_noc: Counts,
    pub sf_occ: Counts,
}

impl FrameCounts {
    pub fn add(self, o: Self) -> Self {
        Self {
            d1: self.d1.add(o.d1),
            d2: self.d2.add(o.d2),
            fl: self.fl.add(o.fl),
            sf_all: self.sf_all.add(o.sf_all),
            sf_noc: self.sf_noc.add(o.sf_noc),
            sf_occ: self.sf_occ.add(o.sf_occ),
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            d1_all: self.d1.percent(),
            d2_all: self.d2.percent(),
            fl_all: self.fl.percent(),
            sf_all: self.sf_all.percent(),
            sf_noc: self.sf_noc.percent(),
            sf_occ: self.sf_occ.percent(),
        }
    }
}

/// Outlier percentages with two decimals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "D1-all")]
    pub d1_all: f64,
    #[serde(rename = "D2-all")]
    pub d2_all: f64,
    #[serde(rename = "Fl-all")]
    pub fl_all: f64,
    #[serde(rename = "SF-all")]
    pub sf_all: f64,
    #[serde(rename = "SF-noc")]
    pub sf_noc: f64,
    #[serde(rename = "SF-occ")]
    pub sf_occ: f64,
}

impl MetricsReport {
    pub fn entries(&self) -> [(&'static str, f64); 6] {
        [
            ("D1-all", self.d1_all),
            ("D2-all", self.d2_all),
            ("Fl-all", self.fl_all),
            ("SF-all", self.sf_all),
            ("SF-noc", self.sf_noc),
            ("SF-occ", self.sf_occ),
        ]
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v:.2}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// All outlier maps of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutliers {
    pub d1: BoolMap,
    pub d2: BoolMap,
    pub fl: BoolMap,
    pub sf: BoolMap,
    pub joint: BoolMap,
    pub noc_set: BoolMap,
    pub occ_set: BoolMap,
}

pub fn frame_outliers<T: Scalar>(pred: &Prediction<T>, gt: &GroundTruth<T>, combiner: Combiner) -> Result<FrameOutliers> {
    let d1 = outlier_map(&pred.d1, &gt.d1, &gt.occ.d1, ErrorKind::Disparity, combiner)?;
    let d2 = outlier_map(&pred.d2, &gt.d2, &gt.occ.d2, ErrorKind::Disparity, combiner)?;
    let fl = outlier_map(&pred.flow, &gt.flow, &gt.occ.fl, ErrorKind::Flow, combiner)?;
    let joint = gt.occ.joint()?;
    let sf = sceneflow_outliers(&d1, &d2, &fl, &joint)?;
    let (noc_set, occ_set) = occlusion_split(&gt.occ, &gt.noc)?;
    Ok(FrameOutliers { d1, d2, fl, sf, joint, noc_set, occ_set })
}

impl FrameOutliers {
    /// Counts with component supports taken from `occ`.
    pub fn counts(&self, occ: &ComponentValidity) -> FrameCounts {
        let c = |m: &BoolMap, set: &BoolMap| Counts { outliers: m.count_within(set).expect("same grid"), total: set.count() };
        FrameCounts {
            d1: c(&self.d1, &occ.d1),
            d2: c(&self.d2, &occ.d2),
            fl: c(&self.fl, &occ.fl),
            sf_all: c(&self.sf, &self.joint),
            sf_noc: c(&self.sf, &self.noc_set),
            sf_occ: c(&self.sf, &self.occ_set),
        }
    }
}

pub fn evaluate_frame<T: Scalar>(pred: &Prediction<T>, gt: &GroundTruth<T>, combiner: Combiner) -> Result<FrameCounts> {
    Ok(frame_outliers(pred, gt, combiner)?.counts(&gt.occ))
}

/// Thread budget from `MSF_NUM_THREADS`, defaulting to the available cores.
pub fn num_threads() -> usize {
    std::env::var("MSF_NUM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Evaluates frames on up to [`num_threads`] workers; per-frame counts come
/// back in input order and are summed in that order.
pub fn evaluate<T: Scalar>(frames: &[(Prediction<T>, GroundTruth<T>)], combiner: Combiner) -> Result<(Vec<FrameCounts>, MetricsReport)> {
    let threads = num_threads().min(frames.len()).max(1);
    let chunk = frames.len().div_ceil(threads).max(1);
    let per_frame: Vec<Result<FrameCounts>> = if threads == 1 {
        frames.iter().map(|(p, g)| evaluate_frame(p, g, combiner)).collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = frames
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|(p, g)| evaluate_frame(p, g, combiner)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    let counts: Vec<FrameCounts> = per_frame.into_iter().collect::<Result<_>>()?;
    let total = counts.iter().fold(FrameCounts::default(), |acc, c| acc.add(*c));
    Ok((counts, total.report()))
}

pub const INLIER_COLOR: Rgb<u8> = Rgb([40, 90, 230]);
pub const OUTLIER_COLOR: Rgb<u8> = Rgb([230, 40, 40]);
pub const DARK_COLOR: Rgb<u8> = Rgb([16, 16, 16]);

/// Blue inliers, red outliers; pixels outside `shown` are dark.
pub fn render_error_map(outliers: &BoolMap, shown: &BoolMap) -> Result<RgbImage> {
    outliers.check(shown)?;
    let w = outliers.width;
    Ok(RgbImage::from_fn(w as u32, outliers.height as u32, |x, y| {
        let i = y as usize * w + x as usize;
        match (shown.data[i], outliers.data[i]) {
            (false, _) => DARK_COLOR,
            (true, true) => OUTLIER_COLOR,
            (true, false) => INLIER_COLOR,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow1(x: f64) -> Tensor<f64> {
        Tensor::from_f64(&[2, 1, 1], &[x, 0.0])
    }

    #[test]
    fn threshold_examples() {
        let all = BoolMap::filled(1, 1, true);
        let o = |p, g, c| outlier_map(&flow1(p), &flow1(g), &all, ErrorKind::Flow, c).unwrap().data[0];
        assert!(o(14.0, 10.0, Combiner::And));
        assert!(!o(104.0, 100.0, Combiner::And));
        assert!(o(104.0, 100.0, Combiner::Or));
        assert!(!o(100.0, 100.0, Combiner::Or));
    }

    #[test]
    fn union_rule() {
        let (f, t) = (BoolMap::filled(1, 2, false), BoolMap::filled(1, 2, true));
        let one = BoolMap { height: 1, width: 2, data: vec![true, false] };
        assert_eq!(sceneflow_outliers(&f, &f, &f, &t).unwrap().count(), 0);
        assert_eq!(sceneflow_outliers(&f, &one, &f, &t).unwrap(), one);
    }

    #[test]
    fn split_examples() {
        let all = BoolMap::filled(2, 2, true);
        let v = ComponentValidity { d1: all.clone(), d2: all.clone(), fl: all.clone() };
        let (noc, occ) = occlusion_split(&v, &v).unwrap();
        assert_eq!(occ.count(), 0);
        assert_eq!(noc.count(), 4);
        let mut fl = all.clone();
        fl.data[3] = false;
        let n = ComponentValidity { fl, ..v.clone() };
        let (noc, occ) = occlusion_split(&v, &n).unwrap();
        assert!(occ.data[3] && !noc.data[3]);
        assert_eq!(noc.count() + occ.count(), 4);
    }

    #[test]
    fn round_half_up() {
        assert_eq!(Counts { outliers: 1, total: 8 }.hundredths(), 1250);
        // 1/16 = 6.25 exactly; 1/3 = 33.333..
        assert_eq!(Counts { outliers: 1, total: 16 }.hundredths(), 625);
        assert_eq!(Counts { outliers: 1, total: 3 }.hundredths(), 3333);
        assert_eq!(Counts { outliers: 2, total: 3 }.hundredths(), 6667);
        // 1/80000 = 0.00125 -> 0.00; 1/40000 = 0.0025 -> 0.00; 1/20000 = 0.005 -> 0.01
        assert_eq!(Counts { outliers: 1, total: 20000 }.hundredths(), 1);
        assert_eq!(Counts { outliers: 0, total: 0 }.hundredths(), 0);
    }

    #[test]
    fn error_map_colors() {
        let t = BoolMap::filled(2, 3, true);
        let f = BoolMap::filled(2, 3, false);
        assert!(render_error_map(&f, &t).unwrap().pixels().all(|p| *p == INLIER_COLOR));
        assert!(render_error_map(&t, &t).unwrap().pixels().all(|p| *p == OUTLIER_COLOR));
        assert!(render_error_map(&t, &f).unwrap().pixels().all(|p| *p == DARK_COLOR));
    }

    #[test]
    fn report_keys() {
        let r = MetricsReport { sf_all: 1.5, ..Default::default() };
        assert!(r.to_text().contains("SF-all = 1.50"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["SF-all"], 1.5);
        assert_eq!(v.as_object().unwrap().len(), 6);
    }
}
