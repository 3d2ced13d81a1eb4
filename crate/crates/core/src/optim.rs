//! Optimizers, EMA shadow weights, losses and learning-rate schedules.
//!
//! Hyperparameters use the decay convention throughout: `β` is the weight
//! kept from the previous moment, so `m ← β·m + (1 − β)·g`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::autodiff::{GradMap, Graph, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Mean absolute error.
    L1,
    /// Mean squared error.
    L2,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::L2 => "l2",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" => Ok(LossKind::L1),
            "l2" | "mse" => Ok(LossKind::L2),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

pub fn loss<T: Scalar, G: Graph<T>>(
    g: &mut G,
    pred: &G::Value,
    target: &Tensor<T>,
    kind: LossKind,
) -> Result<G::Value> {
    match kind {
        LossKind::L1 => g.l1_loss(pred, target),
        LossKind::L2 => g.mse_loss(pred, target),
    }
}

/// Checks that every parameter has a finite gradient of its own shape.
fn validate_grads<T: Scalar>(params: &[&mut Param<T>], grads: &GradMap<T>) -> Result<()> {
    for p in params {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
        if g.shape() != p.value.shape() {
            return Err(Error::Usage(format!(
                "gradient for `{}` has shape {}, parameter has {}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
    }
    Ok(())
}

fn take_slot<T: Scalar>(
    state: &mut BTreeMap<String, Tensor<T>>,
    key: String,
    like: &Tensor<T>,
) -> Tensor<T> {
    state
        .remove(&key)
        .unwrap_or_else(|| Tensor::zeros(like.shape()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdanConfig {
    pub betas: (f64, f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdanConfig {
    fn default() -> Self {
        AdanConfig {
            betas: (0.98, 0.92, 0.99),
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive Nesterov momentum.
///
/// With `d_k = g_k − g_{k−1}` (`d_1 = 0`):
///
/// ```text
/// m_k = β1·m + (1 − β1)·g_k
/// v_k = β2·v + (1 − β2)·d_k
/// n_k = β3·n + (1 − β3)·(g_k + β2·d_k)²
/// θ_k = (θ − η·(m̂_k + β2·v̂_k) / (√n̂_k + ε)) / (1 + λη)
/// ```
///
/// where `x̂_k = x_k / (1 − β^k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adan<T = f32> {
    pub config: AdanConfig,
    step: u64,
    state: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adan<T> {
    pub const SLOTS: [&'static str; 4] = ["m", "v", "n", "prev"];

    pub fn new(config: AdanConfig) -> Self {
        Adan {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &GradMap<T>, lr: f64) -> Result<()> {
        validate_grads(params, grads)?;
        let k = self.step + 1;
        let (b1, b2, b3) = self.config.betas;
        let bc1 = 1.0 - libm::pow(b1, k as f64);
        let bc2 = 1.0 - libm::pow(b2, k as f64);
        let bc3 = 1.0 - libm::pow(b3, k as f64);
        let decay = T::from_f64(1.0 / (1.0 + self.config.weight_decay * lr));
        let [b1, b2, b3, bc1, bc2, bc3, lr, eps] =
            [b1, b2, b3, bc1, bc2, bc3, lr, self.config.eps].map(T::from_f64);
        let one = T::one();
        for p in params.iter_mut() {
            let g = grads.get(&p.name).expect("validated");
            let mut m = take_slot(&mut self.state, format!("m.{}", p.name), g);
            let mut v = take_slot(&mut self.state, format!("v.{}", p.name), g);
            let mut n = take_slot(&mut self.state, format!("n.{}", p.name), g);
            let mut prev = take_slot(&mut self.state, format!("prev.{}", p.name), g);
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                let d = if k == 1 { T::zero() } else { gi - prev.data()[i] };
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * d;
                let c = gi + b2 * d;
                let ni = b3 * n.data()[i] + (one - b3) * c * c;
                let update = (mi / bc1 + b2 * (vi / bc2)) / ((ni / bc3).sqrt() + eps);
                theta[i] = (theta[i] - lr * update) * decay;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                n.data_mut()[i] = ni;
                prev.data_mut()[i] = gi;
            }
            for (slot, t) in Self::SLOTS.iter().zip([m, v, n, prev]) {
                self.state.insert(format!("{slot}.{}", p.name), t);
            }
        }
        self.step = k;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    step: u64,
    state: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub const SLOTS: [&'static str; 2] = ["m", "v"];

    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &GradMap<T>, lr: f64) -> Result<()> {
        validate_grads(params, grads)?;
        let k = self.step + 1;
        let (b1, b2) = self.config.betas;
        let bc1 = 1.0 - libm::pow(b1, k as f64);
        let bc2 = 1.0 - libm::pow(b2, k as f64);
        let [b1, b2, bc1, bc2, lr, eps] = [b1, b2, bc1, bc2, lr, self.config.eps].map(T::from_f64);
        let one = T::one();
        for p in params.iter_mut() {
            let g = grads.get(&p.name).expect("validated");
            let mut m = take_slot(&mut self.state, format!("m.{}", p.name), g);
            let mut v = take_slot(&mut self.state, format!("v.{}", p.name), g);
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                theta[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
            }
            self.state.insert(format!("m.{}", p.name), m);
            self.state.insert(format!("v.{}", p.name), v);
        }
        self.step = k;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adan,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adan => "adan",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adan" => Ok(OptimizerKind::Adan),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Either optimizer, with a uniform interface for the training loop and
/// checkpointing.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer<T = f32> {
    Adan(Adan<T>),
    Adam(Adam<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adan => Optimizer::Adan(Adan::new(AdanConfig::default())),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamConfig::default())),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adan(_) => OptimizerKind::Adan,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &GradMap<T>, lr: f64) -> Result<()> {
        match self {
            Optimizer::Adan(o) => o.step(params, grads, lr),
            Optimizer::Adam(o) => o.step(params, grads, lr),
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            Optimizer::Adan(o) => o.step,
            Optimizer::Adam(o) => o.step,
        }
    }

    /// Moment tensors keyed `"{slot}.{param}"`, empty before the first step.
    pub fn state(&self) -> &BTreeMap<String, Tensor<T>> {
        match self {
            Optimizer::Adan(o) => &o.state,
            Optimizer::Adam(o) => &o.state,
        }
    }

    /// Restores moments previously returned by [`Optimizer::state`].
    pub fn load_state(&mut self, step: u64, state: BTreeMap<String, Tensor<T>>) -> Result<()> {
        let slots: &[&str] = match self {
            Optimizer::Adan(_) => &Adan::<T>::SLOTS,
            Optimizer::Adam(_) => &Adam::<T>::SLOTS,
        };
        for key in state.keys() {
            if !slots.iter().any(|s| key.strip_prefix(s).is_some_and(|r| r.starts_with('.'))) {
                return Err(Error::Config(format!("unexpected optimizer state `{key}`")));
            }
        }
        match self {
            Optimizer::Adan(o) => {
                o.step = step;
                o.state = state;
            }
            Optimizer::Adam(o) => {
                o.step = step;
                o.state = state;
            }
        }
        Ok(())
    }
}

pub const EMA_DECAY: f64 = 0.999;

/// Exponential moving average of the parameters, used only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema<T = f32> {
    pub decay: f64,
    shadow: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Ema<T> {
    /// Starts the shadow as an exact copy of `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Param<T>>, decay: f64) -> Self {
        Ema {
            decay,
            shadow: params
                .into_iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn from_shadow(shadow: BTreeMap<String, Tensor<T>>, decay: f64) -> Self {
        Ema { decay, shadow }
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.shadow
    }

    /// `shadow ← decay·shadow + (1 − decay)·param`.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a Param<T>>) -> Result<()> {
        let d = T::from_f64(self.decay);
        let e = T::from_f64(1.0 - self.decay);
        for p in params {
            let s = self
                .shadow
                .get_mut(&p.name)
                .ok_or_else(|| Error::Usage(format!("EMA has no shadow for `{}`", p.name)))?;
            if s.shape() != p.value.shape() {
                return Err(Error::Usage(format!("EMA shadow of `{}` has the wrong shape", p.name)));
            }
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.value.data()) {
                *sv = d * *sv + e * pv;
            }
        }
        Ok(())
    }

    /// Overwrites `params` with their shadows.
    pub fn copy_to(&self, params: &mut [&mut Param<T>]) -> Result<()> {
        for p in params.iter_mut() {
            let s = self
                .shadow
                .get(&p.name)
                .ok_or_else(|| Error::Usage(format!("EMA has no shadow for `{}`", p.name)))?;
            p.value = s.clone();
        }
        Ok(())
    }
}

/// A constant-rate training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage {
    pub steps: u64,
    pub lr: f64,
    pub loss: LossKind,
}

/// Piecewise-constant learning-rate plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub stages: Vec<Stage>,
}

impl Schedule {
    pub fn constant(lr: f64, steps: u64, loss: LossKind) -> Self {
        Schedule {
            stages: vec![Stage { steps, lr, loss }],
        }
    }

    /// 5e-3 for 1e6 steps under L1.
    pub fn lkdn() -> Self {
        Self::constant(5e-3, 1_000_000, LossKind::L1)
    }

    /// 5e-3 under L1 for 9.5e5 steps, then 2e-5 under L2 for 5e4 steps.
    pub fn lkdn_s() -> Self {
        Schedule {
            stages: vec![
                Stage {
                    steps: 950_000,
                    lr: 5e-3,
                    loss: LossKind::L1,
                },
                Stage {
                    steps: 50_000,
                    lr: 2e-5,
                    loss: LossKind::L2,
                },
            ],
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// The stage containing zero-based `step`.
    pub fn stage_at(&self, step: u64) -> Result<&Stage> {
        let mut start = 0;
        for s in &self.stages {
            if step < start + s.steps {
                return Ok(s);
            }
            start += s.steps;
        }
        Err(Error::ScheduleExhausted {
            step,
            total: self.total_steps(),
        })
    }
}

pub fn lr_schedule(schedule: &Schedule, step: u64) -> Result<f64> {
    schedule.stage_at(step).map(|s| s.lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar(name: &str, v: f64) -> Param<f64> {
        Param::new(name, Tensor::full(Shape::new(1, 1, 1, 1), v))
    }

    #[test]
    fn missing_gradient_leaves_params_untouched() {
        let mut a = scalar("a", 1.0);
        let mut b = scalar("b", 2.0);
        let grads = GradMap::from_entries([(String::from("a"), Tensor::scalar(1.0))]);
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Adan);
        let err = opt.step(&mut [&mut a, &mut b], &grads, 0.1).unwrap_err();
        assert_eq!(err, Error::MissingGradient("b".into()));
        assert_eq!((a.value.data()[0], b.value.data()[0]), (1.0, 2.0));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut a = scalar("a", 1.0);
        let grads = GradMap::from_entries([(String::from("a"), Tensor::scalar(f64::NAN))]);
        let mut opt = Optimizer::<f64>::new(OptimizerKind::Adam);
        assert!(matches!(opt.step(&mut [&mut a], &grads, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(a.value.data()[0], 1.0);
    }

    #[test]
    fn schedule_boundaries() {
        let s = Schedule::lkdn_s();
        assert_eq!(lr_schedule(&s, 949_999).unwrap(), 5e-3);
        assert_eq!(lr_schedule(&s, 950_000).unwrap(), 2e-5);
        assert_eq!(s.stage_at(950_000).unwrap().loss, LossKind::L2);
        assert_eq!(
            lr_schedule(&s, 1_000_000),
            Err(Error::ScheduleExhausted {
                step: 1_000_000,
                total: 1_000_000
            })
        );
    }
}
