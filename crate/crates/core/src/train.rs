//! AdamW training on sequence batches with JSON checkpoints.

use std::io::Write;
use std::path::Path;

use msf_autograd::{Scalar, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::config::RunConfig;
use crate::data::{Augment, SequenceBatch};
use crate::error::{MsfError, Result};
use crate::losses::stack::{sequence_loss, LossViews, StereoFrame};
use crate::losses::LossReport;
use crate::model::SceneFlowNet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// Decoupled weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, shapes: &[&[usize]]) -> Self {
        let zeros: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) {
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.t as i32));
        let (lr_t, eps, decay) = (T::lit(lr), T::lit(c.eps), T::lit(1.0 - lr * c.weight_decay));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                md[i] = b1 * md[i] + (T::one() - b1) * gd[i];
                vd[i] = b2 * vd[i] + (T::one() - b2) * gd[i] * gd[i];
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + eps);
                pd[i] = pd[i] * decay - lr_t * update;
            }
        }
    }
}

/// Linear warmup followed by cosine decay to `lr * min_ratio`.
pub fn cosine_lr(base: f64, min_ratio: f64, warmup: usize, total: usize, step: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    let min = base * min_ratio;
    min + 0.5 * (base - min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` so their joint norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub report: LossReport,
}

impl StepLog {
    pub const HEADER: &'static str = "step batch total l_d l_sf l_occ lr grad_norm";

    /// Summed per-term values (unweighted over iterations) in one row.
    pub fn row(&self) -> String {
        let r = &self.report;
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        format!(
            "{} {} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e} {:.9e}",
            self.step,
            self.batch,
            r.total,
            sum(&r.l_d),
            sum(&r.l_sf),
            sum(&r.l_occ),
            self.lr,
            self.grad_norm
        )
    }
}

pub struct Trainer<T> {
    pub config: RunConfig,
    pub net: SceneFlowNet<T>,
    pub opt: AdamW<T>,
    /// Steps completed.
    pub step: usize,
}

/// Serialized trainer state. Values are stored as `f64`, which holds `f32`
/// exactly, so a resumed run continues bit-for-bit.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: RunConfig,
    step: usize,
    adam_t: u64,
    params: Vec<(String, Vec<usize>, Vec<f64>)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let net = SceneFlowNet::new(config.model.clone(), config.seed);
        let shapes: Vec<&[usize]> = net.params.values().iter().map(|t| t.shape()).collect();
        let adam = AdamWConfig { weight_decay: config.weight_decay, ..Default::default() };
        let opt = AdamW::new(adam, &shapes);
        Ok(Self { config, net, opt, step: 0 })
    }

    pub fn occ_active(&self, step: usize) -> bool {
        step as f64 >= self.config.occ_activation * self.config.steps as f64
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.config;
        cosine_lr(c.lr, c.lr_min_ratio, c.warmup, c.steps, step)
    }

    /// Loss and parameter gradients for one batch at the current parameters.
    pub fn loss_and_gradients(&self, batch: &SequenceBatch, occ_active: bool) -> Result<(LossReport, Vec<Tensor<T>>)> {
        let tape = Tape::<T>::new();
        let p = self.net.params.bind(&tape, true);
        let cam: CameraModel<T> = batch.cam.cast();
        let left: Vec<Tensor<T>> = batch.left.iter().map(|t| t.cast()).collect();
        let right: Vec<Tensor<T>> = batch.right.iter().map(|t| t.cast()).collect();
        let vars: Vec<_> = left.iter().map(|t| tape.constant(t.clone())).collect();
        let n = self.config.iterations;
        let at_t = self.net.forward(&p, [vars[0], vars[1], vars[2]], &cam, n)?;
        let at_t1 = self.net.forward(&p, [vars[1], vars[2], vars[3]], &cam, n)?;
        let views = LossViews {
            t: StereoFrame { left: &left[1], right: &right[1] },
            t1: StereoFrame { left: &left[2], right: &right[2] },
            cam: &cam,
            regions: &batch.regions[0],
        };
        let loss = sequence_loss(&at_t, &at_t1, &views, &self.config.loss_config(), occ_active)?;
        let report = loss.report;
        if !report.total.is_finite() {
            return Ok((report, Vec::new()));
        }
        let grads = tape.backward(loss.total);
        Ok((report, p.vars().iter().map(|&v| grads.wrt(v)).collect()))
    }

    /// Runs one optimizer step on `batch`.
    pub fn train_step(&mut self, batch: &SequenceBatch, batch_index: usize) -> Result<StepLog> {
        let step = self.step;
        let (report, mut grads) = self.loss_and_gradients(batch, self.occ_active(step))?;
        if !report.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            log::error!("non-finite loss at step {step}, batch {batch_index} ({} start {}): {report:?}", batch.scene, batch.start);
            return Err(MsfError::NonFiniteLoss { step, batch: batch_index });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip);
        let lr = self.lr_at(step);
        self.opt.step(self.net.params.values_mut(), &grads, lr);
        self.step += 1;
        Ok(StepLog { step, batch: batch_index, lr, grad_norm, report })
    }

    /// Trains until `config.steps`, cycling through `batches` in order.
    /// `on_step` sees every step; checkpoints go to `out` when given.
    pub fn run(&mut self, batches: &[SequenceBatch], out: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        if batches.is_empty() {
            return Err(MsfError::Dataset("no training batches (need scenes with at least four frames)".into()));
        }
        let augment = self.config.augment.then_some(Augment { seed: self.config.seed, ..Augment::default() });
        let mut curve = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join("loss_curve.txt");
                let fresh = self.step == 0 || !path.exists();
                let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(path)?;
                if fresh {
                    writeln!(f, "{}", StepLog::HEADER)?;
                }
                Some(f)
            }
            None => None,
        };
        let mut logs = Vec::new();
        while self.step < self.config.steps {
            let index = self.step % batches.len();
            let epoch = (self.step / batches.len()) as u64;
            let log = match &augment {
                Some(a) => self.train_step(&a.apply(&batches[index], epoch, index), index)?,
                None => self.train_step(&batches[index], index)?,
            };
            if let Some(f) = curve.as_mut() {
                if log.step % self.config.log_every == 0 {
                    writeln!(f, "{}", log.row())?;
                }
            }
            on_step(&log);
            if let Some(dir) = out {
                if self.step % self.config.checkpoint_every == 0 || self.step == self.config.steps {
                    self.save(&dir.join("checkpoint.json"))?;
                }
            }
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            config: self.config.clone(),
            step: self.step,
            adam_t: self.opt.t,
            params: self.net.params.iter().map(|(_, name, t)| (name.to_string(), t.shape().to_vec(), to_f64(t))).collect(),
            m: self.opt.m.iter().map(to_f64).collect(),
            v: self.opt.v.iter().map(to_f64).collect(),
        };
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_vec(&ck)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| MsfError::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut trainer = Self::new(ck.config)?;
        let named: Vec<(String, Tensor<T>)> = ck
            .params
            .into_iter()
            .map(|(name, shape, data)| (name, Tensor::from_f64(&shape, &data)))
            .collect();
        trainer.net.load_params(&named)?;
        let restore = |dst: &mut Vec<Tensor<T>>, src: Vec<Vec<f64>>| -> Result<()> {
            if src.len() != dst.len() {
                return Err(MsfError::Checkpoint("optimizer state does not match the model".into()));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                if s.len() != d.numel() {
                    return Err(MsfError::Checkpoint("optimizer moment has the wrong size".into()));
                }
                *d = Tensor::from_f64(d.shape(), &s);
            }
            Ok(())
        };
        restore(&mut trainer.opt.m, ck.m)?;
        restore(&mut trainer.opt.v, ck.v)?;
        trainer.opt.t = ck.adam_t;
        trainer.step = ck.step;
        Ok(trainer)
    }
}
