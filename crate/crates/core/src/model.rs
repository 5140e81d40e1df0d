//! The complete bidirectional recurrent scene flow network.

use msf_autograd::nn::{Bound, Init, ParamId, ParamStore};
use msf_autograd::{Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{diff, pixel_grid, CameraModel};
use crate::error::{MsfError, Result};
use crate::features::{build_corr_pyramid, CorrelationPyramid, ContextEncoder, Direction, FeatureEncoder, FEATURE_STRIDE};
use crate::gmf::{GmfProjection, MotionEncoder, MotionInputs, PositionalAttention, TemporalFusion};
use crate::update::{apply_residuals, average_disparity, convex_upsample, ConvGru, DisparityHead, FieldUnit, ResidualHeads, SceneFlowState, UpsampleMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_widths: [usize; 3],
    pub feature_dim: usize,
    pub context_dim: usize,
    pub hidden_dim: usize,
    pub gmf_dim: usize,
    pub motion_dim: usize,
    pub attention_dim: usize,
    pub head_dim: usize,
    pub mask_dim: usize,
    pub corr_radius: usize,
    /// Low-resolution grid the positional tables are sized for.
    pub grid: (usize, usize),
    /// Low-resolution disparity of the untrained initializer on zero features.
    pub init_disparity: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [32, 48, 64],
            feature_dim: 64,
            context_dim: 48,
            hidden_dim: 48,
            gmf_dim: 64,
            motion_dim: 64,
            attention_dim: 32,
            head_dim: 64,
            mask_dim: 64,
            corr_radius: 3,
            grid: (8, 16),
            init_disparity: 1.0,
        }
    }
}

impl ModelConfig {
    /// Narrow variant used for CPU training runs.
    pub fn tiny() -> Self {
        Self {
            encoder_widths: [16, 24, 32],
            feature_dim: 32,
            context_dim: 24,
            hidden_dim: 32,
            gmf_dim: 24,
            motion_dim: 40,
            attention_dim: 16,
            head_dim: 32,
            mask_dim: 32,
            corr_radius: 3,
            grid: (8, 16),
            init_disparity: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Layers {
    features: FeatureEncoder,
    context: ContextEncoder,
    disparity_init: DisparityHead,
    gmf_init: ParamId,
    projection: GmfProjection,
    fusion: TemporalFusion,
    motion: MotionEncoder,
    attention: PositionalAttention,
    gru: ConvGru,
    heads: ResidualHeads,
    mask: UpsampleMask,
}

#[derive(Clone, Debug)]
pub struct SceneFlowNet<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Tape-level record of one refinement step in one direction.
#[derive(Clone, Copy)]
pub struct StepRecord<'t, T> {
    pub s_low: Var<'t, T>,
    pub d_low: Var<'t, T>,
    pub hidden: Var<'t, T>,
    pub ds: Var<'t, T>,
    pub dd: Var<'t, T>,
    pub upsample_weights: Var<'t, T>,
    /// Full-resolution scene flow (meters) and disparity (pixels).
    pub s: Var<'t, T>,
    pub d: Var<'t, T>,
}

pub struct ForwardPass<'t, T> {
    pub initial: [SceneFlowState<'t, T>; 2],
    pub forward: Vec<StepRecord<'t, T>>,
    pub backward: Vec<StepRecord<'t, T>>,
    pub attention: Var<'t, T>,
}

impl<'t, T: Scalar> ForwardPass<'t, T> {
    pub fn iterations(&self) -> usize {
        self.forward.len()
    }

    pub fn steps(&self, direction: Direction) -> &[StepRecord<'t, T>] {
        match direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }

    /// Full-resolution disparity averaged over both directions at step `i`.
    pub fn disparity(&self, i: usize) -> Var<'t, T> {
        average_disparity(self.forward[i].d, self.backward[i].d).expect("directions share a shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub s_low: Tensor<T>,
    pub d_low: Tensor<T>,
    pub s: Tensor<T>,
    pub d: Tensor<T>,
}

/// Per-iteration, per-direction outputs of an inference run.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace<T> {
    pub forward: Vec<Snapshot<T>>,
    pub backward: Vec<Snapshot<T>>,
}

impl<T: Scalar> IterationTrace<T> {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Averaged full-resolution disparity and forward scene flow at step `i`.
    pub fn prediction(&self, i: usize) -> (Tensor<T>, Tensor<T>) {
        let (f, b) = (&self.forward[i], &self.backward[i]);
        (f.d.zip_map(&b.d, |x, y| (x + y) * T::lit(0.5)), f.s.clone())
    }
}

fn to_snapshot<T: Scalar>(r: &StepRecord<'_, T>) -> Snapshot<T> {
    Snapshot {
        s_low: (*r.s_low.value()).clone(),
        d_low: (*r.d_low.value()).clone(),
        s: (*r.s.value()).clone(),
        d: (*r.d.value()).clone(),
    }
}

impl<T: Scalar> SceneFlowNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut params, rng: &mut rng };
        let c = &config;
        let corr_ch = CorrelationPyramid::<T>::lookup_channels(c.corr_radius);
        let layers = Layers {
            features: FeatureEncoder::new(&mut init, "fenc", c.encoder_widths, c.feature_dim),
            context: ContextEncoder::new(&mut init, "cenc", c.encoder_widths, c.context_dim, c.hidden_dim),
            disparity_init: DisparityHead::new(&mut init, c.feature_dim, c.head_dim, c.init_disparity),
            gmf_init: init.uniform("gmf.init".into(), &[c.gmf_dim, 1, 1], 0.1),
            projection: GmfProjection::new(&mut init, c.hidden_dim, c.gmf_dim),
            fusion: TemporalFusion::new(&mut init, c.gmf_dim),
            motion: MotionEncoder::new(&mut init, corr_ch, c.gmf_dim, c.motion_dim),
            attention: PositionalAttention::new(&mut init, c.context_dim, c.motion_dim, c.attention_dim, c.grid),
            gru: ConvGru::new(&mut init, c.hidden_dim, 2 * c.motion_dim + c.context_dim),
            heads: ResidualHeads::new(&mut init, c.hidden_dim, c.head_dim),
            mask: UpsampleMask::new(&mut init, c.hidden_dim, c.mask_dim),
        };
        Self { config, params, layers }
    }

    pub fn attention(&self) -> &PositionalAttention {
        &self.layers.attention
    }

    pub fn gru(&self) -> &ConvGru {
        &self.layers.gru
    }

    pub fn feature_encoder(&self) -> &FeatureEncoder {
        &self.layers.features
    }

    pub fn context_encoder(&self) -> &ContextEncoder {
        &self.layers.context
    }

    pub fn cast<U: Scalar>(&self) -> SceneFlowNet<U> {
        SceneFlowNet { config: self.config.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }

    /// Replaces all parameter values; names and shapes must match.
    pub fn load_params(&mut self, named: &[(String, Tensor<T>)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(MsfError::Checkpoint(format!("expected {} tensors, found {}", self.params.len(), named.len())));
        }
        for (name, value) in named {
            let id = self.params.find(name).ok_or_else(|| MsfError::Checkpoint(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != value.shape() {
                return Err(MsfError::Checkpoint(format!("shape mismatch for {name}")));
            }
            *self.params.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// Initial state of one direction.
    fn init_state<'t>(
        &self,
        p: &Bound<'t, T>,
        feat_ref: Var<'t, T>,
        h0: Var<'t, T>,
        direction: Direction,
    ) -> SceneFlowState<'t, T> {
        let tape = p.tape();
        let s = feat_ref.shape();
        let (h, w) = (s[1], s[2]);
        let d = self.layers.disparity_init.forward(p, feat_ref);
        let gmf = tape.constant(Tensor::zeros(&[self.config.gmf_dim, h, w])) + p.get(self.layers.gmf_init);
        SceneFlowState { s: tape.constant(Tensor::zeros(&[3, h, w])), d, hidden: h0, gmf, direction, iteration: 0 }
    }

    /// Runs `iters` refinement steps on `(I_{t-1}, I_t, I_{t+1})`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t, T>,
        frames: [Var<'t, T>; 3],
        cam: &CameraModel<T>,
        iters: usize,
    ) -> Result<ForwardPass<'t, T>> {
        if iters == 0 {
            return Err(MsfError::Config("iteration count must be at least 1".into()));
        }
        let shape = frames[1].shape();
        for f in &frames {
            if f.shape() != shape {
                return Err(MsfError::Shape(format!("frame shapes {:?} and {shape:?} differ", f.shape())));
            }
        }
        let l = &self.layers;
        let tape = p.tape();
        let feats = [
            l.features.forward(p, frames[0])?,
            l.features.forward(p, frames[1])?,
            l.features.forward(p, frames[2])?,
        ];
        let (g, h0) = l.context.forward(p, frames[1])?;
        let pyramids = [
            build_corr_pyramid(feats[1], feats[2], Direction::Forward)?,
            build_corr_pyramid(feats[1], feats[0], Direction::Backward)?,
        ];
        let low_cam = cam.downsampled(FEATURE_STRIDE);
        let (h, w) = (shape[1] / FEATURE_STRIDE, shape[2] / FEATURE_STRIDE);
        let grid = tape.constant(pixel_grid(h, w));
        let attention = l.attention.attention_map(p, g);

        let initial = [
            self.init_state(p, feats[1], h0, Direction::Forward),
            self.init_state(p, feats[1], h0, Direction::Backward),
        ];
        let mut states = initial;
        let mut records: [Vec<StepRecord<'t, T>>; 2] = [Vec::with_capacity(iters), Vec::with_capacity(iters)];
        for _ in 0..iters {
            let (gmf_f, gmf_b) = (states[0].gmf, states[1].gmf);
            let mut next = states;
            for (k, dir) in [Direction::Forward, Direction::Backward].into_iter().enumerate() {
                let st = states[k];
                let (flow, _) = diff::flow_from_sceneflow(st.d, st.s, &low_cam);
                let corr = pyramids[k].lookup(grid + flow.detach(), self.config.corr_radius);
                let fused = l.fusion.forward(p, gmf_f, gmf_b, dir, true)?.output;
                let inputs = MotionInputs { scene_flow: st.s, optical_flow: flow, disparity: st.d, correlation: corr, gmf: fused };
                let m = l.motion.forward(p, &inputs)?;
                let m_p = l.attention.aggregate(p, m, attention);
                let hidden = l.gru.update(p, st.hidden, m_p, m, g);
                let (ds, dd) = l.heads.decode(p, hidden);
                let mut updated = apply_residuals(&SceneFlowState { hidden, ..st }, ds, dd);
                updated.gmf = l.projection.forward(p, hidden);
                let weights = l.mask.weights(p, hidden);
                records[k].push(StepRecord {
                    s_low: updated.s,
                    d_low: updated.d,
                    hidden,
                    ds,
                    dd,
                    upsample_weights: weights,
                    s: convex_upsample(updated.s, weights, FieldUnit::Metric),
                    d: convex_upsample(updated.d, weights, FieldUnit::Pixels),
                });
                next[k] = updated;
            }
            states = next;
        }
        let [forward, backward] = records;
        Ok(ForwardPass { initial, forward, backward, attention })
    }

    /// Inference without gradients.
    pub fn run_iterations(&self, frames: [&Tensor<T>; 3], cam: &CameraModel<T>, iters: usize) -> Result<IterationTrace<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let vars = frames.map(|f| tape.constant(f.clone()));
        let pass = self.forward(&p, vars, cam, iters)?;
        Ok(IterationTrace {
            forward: pass.forward.iter().map(to_snapshot).collect(),
            backward: pass.backward.iter().map(to_snapshot).collect(),
        })
    }
}
