//! Iteration-weighted total loss.

use msf_autograd::{Scalar, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MsfError, Result};

/// Where the occlusion term is applied along the refinement sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OccTiming {
    /// Once, on the final iteration.
    #[default]
    Final,
    /// On every iteration with the sequence weights.
    All,
}

impl std::str::FromStr for OccTiming {
    type Err = MsfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Self::Final),
            "all" => Ok(Self::All),
            other => Err(MsfError::Config(format!("unknown occlusion timing '{other}' (expected final or all)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub zeta: f64,
    pub lambda_occ: f64,
    pub lambda_sf: f64,
    pub iterations: usize,
    pub timing: OccTiming,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { zeta: 0.8, lambda_occ: 1.0, lambda_sf: 0.1, iterations: 10, timing: OccTiming::Final }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(MsfError::Config("iteration count must be at least 1".into()));
        }
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return Err(MsfError::Config(format!("decay {} outside (0, 1]", self.zeta)));
        }
        Ok(())
    }

    /// Sequence weights, index 0 being the first iteration.
    pub fn sequence(&self) -> Vec<f64> {
        (0..self.iterations).map(|i| iteration_weight(self.zeta, self.iterations, i)).collect()
    }
}

/// `zeta^(n - 1 - i)` for the zero-based iteration `i`; the last one gets 1.
pub fn iteration_weight(zeta: f64, n: usize, i: usize) -> f64 {
    zeta.powi((n - 1 - i) as i32)
}

/// Scalar breakdown of one total-loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_d: Vec<f64>,
    pub l_sf: Vec<f64>,
    /// One entry for final timing, one per iteration for all-iteration timing.
    pub l_occ: Vec<f64>,
    pub weights: LossWeights,
    pub occ_active: bool,
    pub total: f64,
}

impl LossReport {
    /// Recomputes the total from the stored parts.
    pub fn recompute_total(&self) -> f64 {
        let w = self.weights;
        let seq = w.sequence();
        let data: f64 = seq.iter().zip(self.l_d.iter().zip(&self.l_sf)).map(|(k, (d, s))| k * (d + w.lambda_sf * s)).sum();
        data + w.lambda_occ * self.occ_sum()
    }

    /// The occlusion contribution before `lambda_occ`.
    pub fn occ_sum(&self) -> f64 {
        if !self.occ_active {
            return 0.0;
        }
        match self.weights.timing {
            OccTiming::Final => self.l_occ.last().copied().unwrap_or(0.0),
            OccTiming::All => self.weights.sequence().iter().zip(&self.l_occ).map(|(k, l)| k * l).sum(),
        }
    }
}

/// Combines per-iteration terms. `l_occ` holds either the final-iteration
/// term (one entry) or one entry per iteration, depending on the timing.
pub fn total_loss<'t, T: Scalar>(
    l_d: &[Var<'t, T>],
    l_sf: &[Var<'t, T>],
    l_occ: &[Var<'t, T>],
    weights: &LossWeights,
    occ_active: bool,
) -> Result<(Var<'t, T>, LossReport)> {
    weights.validate()?;
    let n = weights.iterations;
    if l_d.len() != n || l_sf.len() != n {
        return Err(MsfError::Shape(format!(
            "expected {n} iteration terms, got {} disparity and {} scene-flow terms",
            l_d.len(),
            l_sf.len()
        )));
    }
    let occ_len = match weights.timing {
        OccTiming::Final => 1,
        OccTiming::All => n,
    };
    if occ_active && l_occ.len() != occ_len {
        return Err(MsfError::Shape(format!("expected {occ_len} occlusion terms, got {}", l_occ.len())));
    }
    let tape = l_d[0].tape();
    let seq = weights.sequence();
    let mut total = tape.scalar(T::zero());
    for i in 0..n {
        total = total + (l_d[i] + l_sf[i].scale(T::lit(weights.lambda_sf))).scale(T::lit(seq[i]));
    }
    if occ_active {
        let mut occ = tape.scalar(T::zero());
        for (k, l) in l_occ.iter().enumerate() {
            let w = match weights.timing {
                OccTiming::Final => 1.0,
                OccTiming::All => seq[k],
            };
            occ = occ + l.scale(T::lit(w));
        }
        total = total + occ.scale(T::lit(weights.lambda_occ));
    }
    let scalars = |v: &[Var<'t, T>]| v.iter().map(|x| x.item().as_f64()).collect::<Vec<_>>();
    let report = LossReport {
        l_d: scalars(l_d),
        l_sf: scalars(l_sf),
        l_occ: if occ_active { scalars(l_occ) } else { Vec::new() },
        weights: *weights,
        occ_active,
        total: total.item().as_f64(),
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use msf_autograd::Tape;

    #[test]
    fn single_iteration_has_unit_weight() {
        assert_eq!(iteration_weight(0.8, 1, 0), 1.0);
    }

    #[test]
    fn first_of_ten() {
        assert!((iteration_weight(0.8, 10, 0) - 0.134217728).abs() < 1e-12);
        assert_eq!(iteration_weight(0.8, 10, 9), 1.0);
    }

    #[test]
    fn mismatched_lengths_fail() {
        let tape = Tape::<f64>::new();
        let x = vec![tape.scalar(1.0); 3];
        let w = LossWeights { iterations: 4, ..Default::default() };
        assert!(total_loss(&x, &x, &[], &w, false).is_err());
    }

    #[test]
    fn report_reproduces_total() {
        let tape = Tape::<f64>::new();
        let d: Vec<_> = (0..4).map(|i| tape.scalar(0.3 + i as f64)).collect();
        let s: Vec<_> = (0..4).map(|i| tape.scalar(1.7 * i as f64)).collect();
        for timing in [OccTiming::Final, OccTiming::All] {
            let w = LossWeights { iterations: 4, timing, ..Default::default() };
            let occ: Vec<_> = match timing {
                OccTiming::Final => vec![tape.scalar(0.9)],
                OccTiming::All => (0..4).map(|i| tape.scalar(0.2 * i as f64)).collect(),
            };
            let (v, r) = total_loss(&d, &s, &occ, &w, true).unwrap();
            assert!((v.item() - r.recompute_total()).abs() < 1e-12);
        }
    }
}
