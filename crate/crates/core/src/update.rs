//! Recurrent refinement pieces: state, GRU, residual heads, disparity
//! initialization and convex upsampling.

use msf_autograd::nn::{Bound, Conv2d, Init, ParamId};
use msf_autograd::{Scalar, Tensor, Var};

use crate::camera::DISPARITY_FLOOR;
use crate::error::{MsfError, Result};
use crate::features::{Direction, FEATURE_STRIDE};

/// Per-direction iterate at 1/8 resolution. Disparity is in low-resolution
/// pixels; scene flow is metric.
#[derive(Clone, Copy)]
pub struct SceneFlowState<'t, T> {
    pub s: Var<'t, T>,
    pub d: Var<'t, T>,
    pub hidden: Var<'t, T>,
    pub gmf: Var<'t, T>,
    pub direction: Direction,
    pub iteration: usize,
}

/// Convolutional GRU with `h' = (1 - z) h + z h~`.
#[derive(Clone, Debug)]
pub struct ConvGru {
    z: Conv2d,
    r: Conv2d,
    q: Conv2d,
}

impl ConvGru {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, hidden_dim: usize, input_dim: usize) -> Self {
        let cin = hidden_dim + input_dim;
        Self {
            z: Conv2d::new(init, "gru.z", cin, hidden_dim, 3, 1, 1.0),
            r: Conv2d::new(init, "gru.r", cin, hidden_dim, 3, 1, 1.0),
            q: Conv2d::new(init, "gru.q", cin, hidden_dim, 3, 1, 1.0),
        }
    }

    pub fn weights(&self) -> [ParamId; 3] {
        [self.z.weight, self.r.weight, self.q.weight]
    }

    pub fn step<'t, T: Scalar>(&self, p: &Bound<'t, T>, h: Var<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        let hx = Var::concat(&[h, x], 0);
        let z = self.z.forward(p, hx).sigmoid();
        let r = self.r.forward(p, hx).sigmoid();
        let q = self.q.forward(p, Var::concat(&[r * h, x], 0)).tanh();
        let one_minus_z = z.neg().add_scalar(T::one());
        one_minus_z * h + z * q
    }

    /// Runs the GRU on the input `[M_p, M, g]`.
    pub fn update<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        h: Var<'t, T>,
        m_p: Var<'t, T>,
        m: Var<'t, T>,
        g: Var<'t, T>,
    ) -> Var<'t, T> {
        self.step(p, h, Var::concat(&[m_p, m, g], 0))
    }
}

fn three_layer_head<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, mid: usize, cout: usize, gain: f64) -> [Conv2d; 3] {
    let g = 2f64.sqrt();
    [
        Conv2d::new(init, &format!("{name}0"), cin, mid, 3, 1, g),
        Conv2d::new(init, &format!("{name}1"), mid, mid, 3, 1, g),
        Conv2d::new(init, &format!("{name}2"), mid, cout, 3, 1, gain),
    ]
}

fn run_head<'t, T: Scalar>(layers: &[Conv2d; 3], p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
    let x = layers[0].forward(p, x).relu();
    let x = layers[1].forward(p, x).relu();
    layers[2].forward(p, x)
}

/// Scene flow and disparity residual heads, three convolutions each.
#[derive(Clone, Debug)]
pub struct ResidualHeads {
    sf: [Conv2d; 3],
    disp: [Conv2d; 3],
}

impl ResidualHeads {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, hidden_dim: usize, mid: usize) -> Self {
        Self {
            sf: three_layer_head(init, "head.sf", hidden_dim, mid, 3, 0.0),
            disp: three_layer_head(init, "head.disp", hidden_dim, mid, 1, 0.05),
        }
    }

    pub fn decode<'t, T: Scalar>(&self, p: &Bound<'t, T>, hidden: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        (run_head(&self.sf, p, hidden), run_head(&self.disp, p, hidden))
    }
}

/// Positive initial disparity from the reference feature map.
#[derive(Clone, Debug)]
pub struct DisparityHead {
    c1: Conv2d,
    c2: Conv2d,
}

impl DisparityHead {
    /// `init_disparity` is the low-resolution disparity produced for an all-zero
    /// feature map.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, feature_dim: usize, mid: usize, init_disparity: f64) -> Self {
        let c1 = Conv2d::new(init, "dinit0", feature_dim, mid, 3, 1, 2f64.sqrt());
        let c2 = Conv2d::new(init, "dinit1", mid, 1, 3, 1, 0.1);
        let inv_softplus = (init_disparity.exp() - 1.0).ln();
        if let Some(b) = c2.bias {
            *init.store.get_mut(b) = Tensor::full(&[1], T::lit(inv_softplus));
        }
        Self { c1, c2 }
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, feat: Var<'t, T>) -> Var<'t, T> {
        self.c2.forward(p, self.c1.forward(p, feat).relu()).softplus().clamp_min(T::lit(DISPARITY_FLOOR))
    }
}

/// Predicts convex-combination weights `[9, 64, h, w]` from the hidden state.
#[derive(Clone, Debug)]
pub struct UpsampleMask {
    c1: Conv2d,
    c2: Conv2d,
}

impl UpsampleMask {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, hidden_dim: usize, mid: usize) -> Self {
        let ff = FEATURE_STRIDE * FEATURE_STRIDE;
        Self {
            c1: Conv2d::new(init, "mask0", hidden_dim, mid, 3, 1, 2f64.sqrt()),
            c2: Conv2d::new(init, "mask1", mid, 9 * ff, 1, 1, 0.25),
        }
    }

    /// Weights from a gradient-detached copy of `hidden`.
    pub fn weights<'t, T: Scalar>(&self, p: &Bound<'t, T>, hidden: Var<'t, T>) -> Var<'t, T> {
        let s = hidden.shape();
        let ff = FEATURE_STRIDE * FEATURE_STRIDE;
        let logits = self.c2.forward(p, self.c1.forward(p, hidden.detach()).relu());
        logits.reshape(&[9, ff, s[1], s[2]]).softmax(0)
    }
}

/// `s + ds` and `max(d + dd, floor)` for the given state.
pub fn apply_residuals<'t, T: Scalar>(state: &SceneFlowState<'t, T>, ds: Var<'t, T>, dd: Var<'t, T>) -> SceneFlowState<'t, T> {
    SceneFlowState {
        s: state.s + ds,
        d: (state.d + dd).clamp_min(T::lit(DISPARITY_FLOOR)),
        iteration: state.iteration + 1,
        ..*state
    }
}

pub fn average_disparity<'t, T: Scalar>(d_f: Var<'t, T>, d_b: Var<'t, T>) -> Result<Var<'t, T>> {
    if d_f.shape() != d_b.shape() {
        return Err(MsfError::Shape(format!("disparities {:?} and {:?} differ", d_f.shape(), d_b.shape())));
    }
    Ok((d_f + d_b).scale(T::lit(0.5)))
}

/// Which unit a field carries through upsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldUnit {
    /// Pixel-valued (disparity, optical flow): multiplied by the stride.
    Pixels,
    /// Metric (scene flow): unchanged.
    Metric,
}

/// Convex upsampling by the feature stride with unit rescaling.
pub fn convex_upsample<'t, T: Scalar>(field: Var<'t, T>, weights: Var<'t, T>, unit: FieldUnit) -> Var<'t, T> {
    let up = field.convex_upsample(weights, FEATURE_STRIDE);
    match unit {
        FieldUnit::Pixels => up.scale(T::from_usize_lossy(FEATURE_STRIDE)),
        FieldUnit::Metric => up,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use msf_autograd::nn::ParamStore;
    use msf_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_halves_unit_state() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = ConvGru::new(&mut Init { store: &mut store, rng: &mut rng }, 2, 3);
        for v in store.values_mut() {
            *v = Tensor::zeros(v.shape());
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let h = tape.constant(Tensor::ones(&[2, 2, 2]));
        let x = tape.constant(Tensor::zeros(&[3, 2, 2]));
        let out = gru.step(&p, h, x).value();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn residual_rules() {
        let tape = Tape::<f64>::new();
        let state = SceneFlowState {
            s: tape.constant(Tensor::full(&[3, 1, 1], 0.3)),
            d: tape.constant(Tensor::full(&[1, 1, 1], 0.002)),
            hidden: tape.constant(Tensor::zeros(&[1, 1, 1])),
            gmf: tape.constant(Tensor::zeros(&[1, 1, 1])),
            direction: Direction::Forward,
            iteration: 0,
        };
        let next = apply_residuals(&state, tape.constant(Tensor::full(&[3, 1, 1], 0.1)), tape.constant(Tensor::full(&[1, 1, 1], -0.01)));
        assert!(next.s.value().data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert_eq!(next.d.value().item(), 1e-3);
        let same = apply_residuals(&state, tape.constant(Tensor::zeros(&[3, 1, 1])), tape.constant(Tensor::zeros(&[1, 1, 1])));
        assert_eq!(*same.s.value(), *state.s.value());
        assert_eq!(*same.d.value(), *state.d.value());
    }

    #[test]
    fn averaging() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[1, 2, 2], 2.0));
        let b = tape.constant(Tensor::full(&[1, 2, 2], 4.0));
        assert!(average_disparity(a, b).unwrap().value().data().iter().all(|&v| v == 3.0));
        assert_eq!(*average_disparity(a, b).unwrap().value(), *average_disparity(b, a).unwrap().value());
        assert_eq!(*average_disparity(a, a).unwrap().value(), *a.value());
        assert!(average_disparity(a, tape.constant(Tensor::zeros(&[1, 2, 3]))).is_err());
    }
}
