//! Bootstrap (distillation) training of the CAPE head.
//!
//! The loss is `alpha * CE + beta * [selective] KL(p_T || p_hat_T')` where
//! `p_T` is the vanilla prediction softened at the fixed teacher
//! temperature and `p_hat_T'` the CAPE prediction at the learnable one.
//!
//! Gradient routing:
//! * the KL term only reaches the CAPE head (weight, bias, log-temperature);
//!   the teacher distribution is a constant,
//! * the CE term reaches whatever head it is applied to (vanilla by default,
//!   CAPE with `ce_on_cape`) and, in training-from-scratch mode, the
//!   backbone,
//! * post-fitting mode trains nothing but the CAPE head.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_backward, backbone_forward, BackboneTape, ConvLayer, Image};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::heads::{
    activation_maps, global_average_pool, pixel_class_dist, saliency_weights, vanilla_logits, ActivationMaps,
    CapeHead, LinearHead,
};
use crate::model::{Model, ParamId};
use crate::tensor::{argmax, softmax, Tensor};

const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    /// Backbone and vanilla head learn from CE; the CAPE head from KL.
    #[default]
    #[serde(rename = "ts")]
    FromScratch,
    /// Only the CAPE head learns, against a frozen pretrained classifier.
    #[serde(rename = "pf")]
    PostFit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    /// Multiply by `decay` every `period` epochs.
    Step { decay: f64, period: usize },
    /// Linear ramp from the base rate down to `final_fraction` of it at the
    /// last epoch.
    Linear { final_fraction: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Step { decay: 0.1, period: 30 }
    }
}

impl Schedule {
    pub fn learning_rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            Schedule::Step { decay, period } => base * decay.powi((epoch / period.max(1)) as i32),
            Schedule::Linear { final_fraction } => {
                if epochs <= 1 {
                    return base;
                }
                let progress = epoch as f64 / (epochs - 1) as f64;
                base * (1.0 - (1.0 - final_fraction) * progress)
            }
        }
    }
}

/// Training settings. `alpha`, `beta`, `learning_rate` and `epochs` default
/// per mode when left unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub teacher_temperature: f64,
    pub selective_kld: bool,
    /// Multiply the KL term by `T^2`.
    pub kld_t_squared: bool,
    /// Apply CE to the CAPE prediction instead of the vanilla one.
    pub ce_on_cape: bool,
    pub learning_rate: Option<f64>,
    pub schedule: Schedule,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::FromScratch,
            alpha: None,
            beta: None,
            teacher_temperature: 2.0,
            selective_kld: false,
            kld_t_squared: false,
            ce_on_cape: false,
            learning_rate: None,
            schedule: Schedule::default(),
            epochs: None,
            batch_size: 32,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_scratch() -> Self {
        TrainConfig::default()
    }

    pub fn post_fit() -> Self {
        TrainConfig {
            mode: TrainMode::PostFit,
            ..TrainConfig::default()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.mode {
            TrainMode::FromScratch => 1.0,
            TrainMode::PostFit => 0.0,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(1.0)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.mode {
            TrainMode::FromScratch => 1e-3,
            TrainMode::PostFit => 1e-4,
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.mode {
            TrainMode::FromScratch => 30,
            TrainMode::PostFit => 10,
        })
    }

    /// Checks the configuration; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let (alpha, beta) = (self.alpha(), self.beta());
        if !(alpha >= 0.0 && alpha.is_finite()) || !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::arg(format!("loss weights must be finite and nonnegative (alpha {alpha}, beta {beta})")));
        }
        if !(self.teacher_temperature > 0.0) {
            return Err(Error::arg("teacher temperature must be positive"));
        }
        if !(self.learning_rate() >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::arg("learning rate and weight decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        if let Schedule::Step { decay, period } = self.schedule {
            if period == 0 || !(decay > 0.0) {
                return Err(Error::arg("step schedule needs a positive decay and period"));
            }
        }
        if let Schedule::Linear { final_fraction } = self.schedule {
            if !(0.0..=1.0).contains(&final_fraction) {
                return Err(Error::arg("linear schedule final fraction must be in [0, 1]"));
            }
        }
        let mut warnings = Vec::new();
        match self.mode {
            TrainMode::PostFit => {
                if alpha != 0.0 {
                    return Err(Error::arg("post-fitting trains only the CAPE head; alpha must be 0"));
                }
                if beta != 1.0 {
                    warnings.push(format!("post-fitting normally uses beta = 1 (got {beta})"));
                }
                if beta == 0.0 {
                    warnings.push("beta = 0 in post-fitting mode: nothing will be trained".into());
                }
            }
            TrainMode::FromScratch => {
                if alpha != 1.0 || beta != 1.0 {
                    warnings.push(format!("training from scratch normally uses alpha = beta = 1 (got {alpha}, {beta})"));
                }
            }
        }
        Ok(warnings)
    }
}

/// Batch means of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub ce_term: f64,
    /// Includes the selective mask and any `T^2` factor.
    pub kld_term: f64,
    pub total: f64,
    pub kld_active_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGradients {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapeGradients {
    pub weight: Tensor,
    pub bias: Tensor,
    pub log_temperature: f64,
}

/// Gradients per parameter group. A group is `None` when it receives no
/// loss signal in this step (frozen, routed away, or inactive).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    pub backbone: Option<Vec<ConvLayer>>,
    pub vanilla: Option<HeadGradients>,
    pub cape: Option<CapeGradients>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<f64> {
        match id {
            ParamId::ConvWeight { layer, index } => self.backbone.as_ref().map(|b| b[layer].weight.data()[index]),
            ParamId::ConvBias { layer, index } => self.backbone.as_ref().map(|b| b[layer].bias.data()[index]),
            ParamId::VanillaWeight(i) => self.vanilla.as_ref().map(|g| g.weight.data()[i]),
            ParamId::VanillaBias(i) => self.vanilla.as_ref().map(|g| g.bias.data()[i]),
            ParamId::CapeWeight(i) => self.cape.as_ref().map(|g| g.weight.data()[i]),
            ParamId::CapeBias(i) => self.cape.as_ref().map(|g| g.bias.data()[i]),
            ParamId::CapeLogTemperature => self.cape.as_ref().map(|g| g.log_temperature),
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut f64> {
        match id {
            ParamId::ConvWeight { layer, index } => self.backbone.as_mut().map(|b| &mut b[layer].weight.data_mut()[index]),
            ParamId::ConvBias { layer, index } => self.backbone.as_mut().map(|b| &mut b[layer].bias.data_mut()[index]),
            ParamId::VanillaWeight(i) => self.vanilla.as_mut().map(|g| &mut g.weight.data_mut()[i]),
            ParamId::VanillaBias(i) => self.vanilla.as_mut().map(|g| &mut g.bias.data_mut()[i]),
            ParamId::CapeWeight(i) => self.cape.as_mut().map(|g| &mut g.weight.data_mut()[i]),
            ParamId::CapeBias(i) => self.cape.as_mut().map(|g| &mut g.bias.data_mut()[i]),
            ParamId::CapeLogTemperature => self.cape.as_mut().map(|g| &mut g.log_temperature),
        }
    }

    /// Every parameter with a gradient, in a fixed order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(layers) = &self.backbone {
            for (layer, l) in layers.iter().enumerate() {
                ids.extend((0..l.weight.len()).map(|index| ParamId::ConvWeight { layer, index }));
                ids.extend((0..l.bias.len()).map(|index| ParamId::ConvBias { layer, index }));
            }
        }
        if let Some(g) = &self.vanilla {
            ids.extend((0..g.weight.len()).map(ParamId::VanillaWeight));
            ids.extend((0..g.bias.len()).map(ParamId::VanillaBias));
        }
        if let Some(g) = &self.cape {
            ids.extend((0..g.weight.len()).map(ParamId::CapeWeight));
            ids.extend((0..g.bias.len()).map(ParamId::CapeBias));
            ids.push(ParamId::CapeLogTemperature);
        }
        ids
    }

    pub fn max_abs(&self) -> f64 {
        self.param_ids()
            .into_iter()
            .filter_map(|id| self.get(id))
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// `-ln p[true]` for a one-hot `q`, with `p` clamped at `1e-12`.
pub fn cross_entropy(p: &Tensor, q: &Tensor) -> Result<f64> {
    p.expect_shape(q.shape())?;
    let ones = q.data().iter().filter(|&&v| v == 1.0).count();
    let zeros = q.data().iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != q.len() {
        return Err(Error::arg("cross-entropy target must be one-hot"));
    }
    Ok(cross_entropy_label(p.data(), q.argmax()))
}

pub fn cross_entropy_label(p: &[f64], label: usize) -> f64 {
    -p[label].max(PROB_FLOOR).ln()
}

/// `KL(target || approx) = sum_c target_c ln(target_c / approx_c)`.
pub fn kld(target: &Tensor, approx: &Tensor) -> Result<f64> {
    target.expect_shape(approx.shape())?;
    Ok(kld_slices(target.data(), approx.data()))
}

fn kld_slices(target: &[f64], approx: &[f64]) -> f64 {
    target
        .iter()
        .zip(approx)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &a)| t * (t.max(PROB_FLOOR).ln() - a.max(PROB_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Backward through `p_hat = sum_ij softmax_c(M'/t) * softmax_ij(s/t)` for
/// upstream `d_p_hat`. Returns `(dM', dlog_t)`.
fn cape_backward_maps(maps: &ActivationMaps, t: f64, d_p_hat: &[f64]) -> Result<(Tensor, f64)> {
    let [h, w, c] = maps.dims();
    let q = pixel_class_dist(maps, t)?;
    let pi = saliency_weights(maps, t)?;
    let mut d_shifted = Tensor::zeros(&[h, w, c]);
    let mut dv = vec![0.0; h * w];
    let mut hvals = vec![0.0; h * w];
    let mut h_bar = 0.0;
    for p in 0..h * w {
        let qp = &q.data()[p * c..][..c];
        hvals[p] = qp.iter().zip(d_p_hat).map(|(a, b)| a * b).sum();
        h_bar += pi.data()[p] * hvals[p];
    }
    let mut d_log_t = 0.0;
    for p in 0..h * w {
        let pw = pi.data()[p];
        dv[p] = pw * (hvals[p] - h_bar);
        d_log_t -= dv[p] * maps.saliency.data()[p] / t;
    }
    for p in 0..h * w {
        let pw = pi.data()[p];
        let qp = &q.data()[p * c..][..c];
        let mp = &maps.shifted.data()[p * c..][..c];
        let out = &mut d_shifted.data_mut()[p * c..][..c];
        for cc in 0..c {
            let du = pw * qp[cc] * (d_p_hat[cc] - hvals[p]);
            d_log_t -= du * mp[cc] / t;
            out[cc] = du / t + dv[p] / (t * c as f64);
        }
    }
    Ok((d_shifted, d_log_t))
}

/// `dW = F^T dM'`, `db = sum dM'`, and optionally `dF = dM' W^T`.
fn linear_map_backward(
    features: &Tensor,
    weight: &Tensor,
    d_shifted: &Tensor,
    want_features: bool,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [h, w, k] = features.dims3().expect("3-D features");
    let c = weight.shape()[1];
    let mut dw = Tensor::zeros(&[k, c]);
    let mut db = Tensor::zeros(&[c]);
    let mut df = want_features.then(|| Tensor::zeros(&[h, w, k]));
    for p in 0..h * w {
        let fp = &features.data()[p * k..][..k];
        let gp = &d_shifted.data()[p * c..][..c];
        for (b, &g) in db.data_mut().iter_mut().zip(gp) {
            *b += g;
        }
        for (kk, &f) in fp.iter().enumerate() {
            if f != 0.0 {
                for (d, &g) in dw.data_mut()[kk * c..][..c].iter_mut().zip(gp) {
                    *d += f * g;
                }
            }
        }
        if let Some(df) = df.as_mut() {
            for (kk, d) in df.data_mut()[p * k..][..k].iter_mut().enumerate() {
                *d = weight.data()[kk * c..][..c].iter().zip(gp).map(|(a, b)| a * b).sum();
            }
        }
    }
    (dw, db, df)
}

/// Effective loss weights and routing for one configuration.
#[derive(Clone, Copy, Debug)]
struct Plan {
    alpha: f64,
    beta: f64,
    kld_scale: f64,
    teacher_temperature: f64,
    selective: bool,
    ce_on_cape: bool,
    train_vanilla: bool,
    train_backbone: bool,
}

impl Plan {
    fn new(model: &Model, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let alpha = config.alpha();
        let ts = config.mode == TrainMode::FromScratch;
        Ok(Plan {
            alpha,
            beta: config.beta(),
            kld_scale: if config.kld_t_squared {
                config.teacher_temperature.powi(2)
            } else {
                1.0
            },
            teacher_temperature: config.teacher_temperature,
            selective: config.selective_kld,
            ce_on_cape: config.ce_on_cape,
            train_vanilla: ts && !config.ce_on_cape && alpha > 0.0,
            train_backbone: ts && model.backbone.trainable && alpha > 0.0,
        })
    }
}

struct SamplePass {
    ce: f64,
    kld: f64,
    kld_active: bool,
    d_vanilla: Option<HeadGradients>,
    d_cape: Option<CapeGradients>,
    d_features: Option<Tensor>,
}

fn teacher_probs(features: &Tensor, model: &Model, temperature: f64) -> Result<Vec<f64>> {
    let z: Vec<f64> = vanilla_logits(features, &model.vanilla)?
        .into_iter()
        .map(|v| v / temperature)
        .collect();
    Ok(softmax(&z))
}

fn cape_probs_at(maps: &ActivationMaps, t: f64) -> Result<Vec<f64>> {
    Ok(crate::heads::cape_forward(maps, t)?.into_data())
}

fn sample_pass(
    features: &Tensor,
    label: usize,
    teacher: &[f64],
    model: &Model,
    plan: &Plan,
    want_grads: bool,
) -> Result<SamplePass> {
    let c = model.classes();
    if label >= c {
        return Err(Error::arg(format!("label {label} out of range for {c} classes")));
    }
    let z = vanilla_logits(features, &model.vanilla)?;
    let p = softmax(&z);
    let cape: &CapeHead = &model.cape;
    let t_prime = cape.temperature();
    let maps = activation_maps(features, cape)?;
    let p_hat = cape_probs_at(&maps, 1.0)?;
    let p_hat_soft = cape_probs_at(&maps, t_prime)?;
    let vanilla_pred = argmax(&p);
    let cape_pred = argmax(&p_hat);

    let ce = if plan.ce_on_cape {
        cross_entropy_label(&p_hat, label)
    } else {
        cross_entropy_label(&p, label)
    };
    let kld_active = !plan.selective || cape_pred != vanilla_pred;
    let kld = if kld_active {
        plan.kld_scale * kld_slices(teacher, &p_hat_soft)
    } else {
        0.0
    };

    let mut out = SamplePass {
        ce,
        kld,
        kld_active,
        d_vanilla: None,
        d_cape: None,
        d_features: None,
    };
    if !want_grads {
        return Ok(out);
    }

    let mut d_shifted_total: Option<Tensor> = None;
    let mut d_log_t = 0.0;

    if plan.alpha > 0.0 && !plan.ce_on_cape && (plan.train_vanilla || plan.train_backbone) {
        // d(CE)/dz = p - onehot
        let dz: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(cc, &pc)| plan.alpha * (pc - if cc == label { 1.0 } else { 0.0 }))
            .collect();
        if plan.train_vanilla {
            let gap = global_average_pool(features)?;
            let weight = Tensor::from_fn(&[gap.len(), c], |i| gap[i[0]] * dz[i[1]]);
            out.d_vanilla = Some(HeadGradients {
                weight,
                bias: Tensor::from_slice(&dz),
            });
        }
        if plan.train_backbone {
            let [h, w, k] = features.dims3()?;
            let n = (h * w) as f64;
            let per_channel: Vec<f64> = (0..k)
                .map(|kk| {
                    model.vanilla.weight.data()[kk * c..][..c]
                        .iter()
                        .zip(&dz)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n
                })
                .collect();
            out.d_features = Some(Tensor::from_fn(&[h, w, k], |i| per_channel[i[2]]));
        }
    }

    let mut d_features_cape: Option<Tensor> = None;
    if plan.alpha > 0.0 && plan.ce_on_cape {
        let mut g = vec![0.0; c];
        if p_hat[label] > PROB_FLOOR {
            g[label] = -plan.alpha / p_hat[label];
        }
        let (d_shifted, _) = cape_backward_maps(&maps, 1.0, &g)?;
        if plan.train_backbone {
            let (_, _, df) = linear_map_backward(features, cape.weight(), &d_shifted, true);
            d_features_cape = df;
        }
        d_shifted_total = Some(d_shifted);
    }

    if plan.beta > 0.0 && kld_active {
        let g: Vec<f64> = teacher
            .iter()
            .zip(&p_hat_soft)
            .map(|(&t, &a)| {
                if t > 0.0 && a > PROB_FLOOR {
                    -plan.beta * plan.kld_scale * t / a
                } else {
                    0.0
                }
            })
            .collect();
        let (d_shifted, dlt) = cape_backward_maps(&maps, t_prime, &g)?;
        // d/d(log T') = T' * d/dT'; the map backward already works in log space.
        d_log_t += dlt;
        d_shifted_total = Some(match d_shifted_total {
            Some(prev) => prev.zip_map(&d_shifted, |a, b| a + b)?,
            None => d_shifted,
        });
    }

    if let Some(d_shifted) = d_shifted_total {
        let (dw, db, _) = linear_map_backward(features, cape.weight(), &d_shifted, false);
        out.d_cape = Some(CapeGradients {
            weight: dw,
            bias: db,
            log_temperature: d_log_t,
        });
    }
    if let Some(df) = d_features_cape {
        out.d_features = Some(match out.d_features.take() {
            Some(prev) => prev.zip_map(&df, |a, b| a + b)?,
            None => df,
        });
    }
    Ok(out)
}

/// Where a sample's features come from.
pub(crate) enum Input<'a> {
    Image(&'a Image),
    /// Precomputed features with their constant teacher distribution.
    Cached { features: &'a Tensor, teacher: &'a [f64] },
    /// Precomputed features; teacher computed from the current model.
    Features(&'a Tensor),
}

pub(crate) struct BatchResult {
    pub loss: LossBreakdown,
    pub grads: Gradients,
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

pub(crate) fn batch_pass(
    inputs: &[(Input<'_>, usize)],
    model: &Model,
    config: &TrainConfig,
    want_grads: bool,
) -> Result<BatchResult> {
    if inputs.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let plan = Plan::new(model, config)?;
    let n = inputs.len() as f64;
    let mut ce_sum = 0.0;
    let mut kld_sum = 0.0;
    let mut active = 0usize;
    let mut backbone_acc: Option<Vec<ConvLayer>> = None;
    let mut vanilla_acc: Option<HeadGradients> = None;
    let mut cape_acc: Option<CapeGradients> = None;

    for (input, label) in inputs {
        let (features, tape, teacher): (Cow<'_, Tensor>, Option<BackboneTape>, Cow<'_, [f64]>) = match input {
            Input::Image(x) => {
                let (f, tape) = backbone_forward(x, &model.backbone)?;
                let teacher = teacher_probs(&f, model, plan.teacher_temperature)?;
                (Cow::Owned(f), Some(tape), Cow::Owned(teacher))
            }
            Input::Cached { features, teacher } => (Cow::Borrowed(*features), None, Cow::Borrowed(*teacher)),
            Input::Features(f) => {
                let teacher = teacher_probs(f, model, plan.teacher_temperature)?;
                (Cow::Borrowed(*f), None, Cow::Owned(teacher))
            }
        };
        let pass = sample_pass(&features, *label, &teacher, model, &plan, want_grads)?;
        ce_sum += pass.ce;
        kld_sum += pass.kld;
        active += pass.kld_active as usize;

        if let Some(g) = pass.d_vanilla {
            match vanilla_acc.as_mut() {
                Some(acc) => {
                    add_into(&mut acc.weight, &g.weight);
                    add_into(&mut acc.bias, &g.bias);
                }
                None => vanilla_acc = Some(g),
            }
        }
        if let Some(g) = pass.d_cape {
            match cape_acc.as_mut() {
                Some(acc) => {
                    add_into(&mut acc.weight, &g.weight);
                    add_into(&mut acc.bias, &g.bias);
                    acc.log_temperature += g.log_temperature;
                }
                None => cape_acc = Some(g),
            }
        }
        if let (Some(df), Some(tape)) = (pass.d_features, tape) {
            let g = backbone_backward(tape, &model.backbone, &df)?;
            match backbone_acc.as_mut() {
                Some(acc) => {
                    for (a, l) in acc.iter_mut().zip(&g.layers) {
                        add_into(&mut a.weight, &l.weight);
                        add_into(&mut a.bias, &l.bias);
                    }
                }
                None => backbone_acc = Some(g.layers),
            }
        }
    }

    let scale = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v /= n);
    if let Some(acc) = backbone_acc.as_mut() {
        for l in acc.iter_mut() {
            scale(&mut l.weight);
            scale(&mut l.bias);
        }
    }
    if let Some(acc) = vanilla_acc.as_mut() {
        scale(&mut acc.weight);
        scale(&mut acc.bias);
    }
    if let Some(acc) = cape_acc.as_mut() {
        scale(&mut acc.weight);
        scale(&mut acc.bias);
        acc.log_temperature /= n;
    }

    let ce_term = ce_sum / n;
    let kld_term = kld_sum / n;
    Ok(BatchResult {
        loss: LossBreakdown {
            ce_term,
            kld_term,
            total: plan.alpha * ce_term + plan.beta * kld_term,
            kld_active_fraction: active as f64 / n,
        },
        grads: Gradients {
            backbone: backbone_acc.filter(|l| !l.is_empty()),
            vanilla: vanilla_acc,
            cape: cape_acc,
        },
    })
}

/// Loss terms and routed gradients for a batch.
pub fn bootstrap_loss(batch: &[&Example], model: &Model, config: &TrainConfig) -> Result<(LossBreakdown, Gradients)> {
    let inputs: Vec<_> = batch.iter().map(|e| (Input::Image(&e.image), e.label)).collect();
    let r = batch_pass(&inputs, model, config, true)?;
    Ok((r.loss, r.grads))
}

/// Same as [`bootstrap_loss`] for precomputed backbone features; no
/// backbone gradients are produced.
pub fn bootstrap_loss_from_features(
    batch: &[(Tensor, usize)],
    model: &Model,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let inputs: Vec<_> = batch.iter().map(|(f, l)| (Input::Features(f), *l)).collect();
    let r = batch_pass(&inputs, model, config, true)?;
    Ok((r.loss, r.grads))
}

/// `p <- p - lr * (g + weight_decay * p)` on raw slices.
pub fn sgd_update(params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(&[params.len()], &[grads.len()]));
    }
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * (g + weight_decay * *p);
    }
    Ok(())
}

/// Applies one SGD step to every group that has a gradient. The CAPE
/// log-temperature is not weight-decayed.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
    if let Some(layers) = &grads.backbone {
        if layers.len() != model.backbone.layers.len() {
            return Err(Error::arg("backbone gradient has the wrong number of layers"));
        }
        for (p, g) in model.backbone.layers.iter_mut().zip(layers) {
            g.weight.expect_shape(p.weight.shape())?;
            sgd_update(p.weight.data_mut(), g.weight.data(), lr, weight_decay)?;
            sgd_update(p.bias.data_mut(), g.bias.data(), lr, weight_decay)?;
        }
    }
    if let Some(g) = &grads.vanilla {
        g.weight.expect_shape(model.vanilla.weight.shape())?;
        sgd_update(model.vanilla.weight.data_mut(), g.weight.data(), lr, weight_decay)?;
        sgd_update(model.vanilla.bias.data_mut(), g.bias.data(), lr, weight_decay)?;
    }
    if let Some(g) = &grads.cape {
        g.weight.expect_shape(model.cape.weight.shape())?;
        sgd_update(model.cape.weight.data_mut(), g.weight.data(), lr, weight_decay)?;
        sgd_update(model.cape.bias.data_mut(), g.bias.data(), lr, weight_decay)?;
        model.cape.log_temperature -= lr * g.log_temperature;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub kld: f64,
    pub kld_active_fraction: f64,
    pub vanilla_train_acc: f64,
    pub cape_train_acc: f64,
    /// `None` without a validation split.
    pub vanilla_val_acc: Option<f64>,
    pub cape_val_acc: Option<f64>,
}

pub const EPOCH_LOG_HEADER: &str =
    "epoch,lr,ce,kld,kld_active_fraction,vanilla_train_acc,cape_train_acc,vanilla_val_acc,cape_val_acc";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:e},{:.8},{:.8},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.lr,
            self.ce,
            self.kld,
            self.kld_active_fraction,
            self.vanilla_train_acc,
            self.cape_train_acc,
            opt(self.vanilla_val_acc),
            opt(self.cape_val_acc)
        )
    }
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub warnings: Vec<String>,
}

/// Vanilla and CAPE top-1 accuracy (fractions).
pub fn accuracy(model: &Model, examples: &[Example]) -> Result<(f64, f64)> {
    let features = examples
        .iter()
        .map(|e| model.features(&e.image))
        .collect::<Result<Vec<_>>>()?;
    accuracy_from_features(model, &features, examples)
}

fn accuracy_from_features(model: &Model, features: &[Tensor], examples: &[Example]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut v, mut c) = (0usize, 0usize);
    for (f, e) in features.iter().zip(examples) {
        v += (argmax(&vanilla_logits(f, &model.vanilla)?) == e.label) as usize;
        c += (argmax(&cape_probs_at(&activation_maps(f, &model.cape)?, 1.0)?) == e.label) as usize;
    }
    let n = examples.len() as f64;
    Ok((v as f64 / n, c as f64 / n))
}

/// Runs the configured training. Post-fitting needs a model whose vanilla
/// head is already trained and re-initializes the CAPE head from it.
pub fn train(mut model: Model, train_set: &[Example], val_set: &[Example], config: &TrainConfig) -> Result<TrainOutcome> {
    let warnings = config.validate()?;
    model.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if let Some(e) = train_set.iter().chain(val_set).find(|e| e.label >= model.classes()) {
        return Err(Error::arg(format!("label {} out of range for {} classes", e.label, model.classes())));
    }
    let post_fit = config.mode == TrainMode::PostFit;
    if post_fit && !model.vanilla_pretrained {
        return Err(Error::arg("post-fitting needs a pretrained vanilla classifier"));
    }
    let epochs = config.epochs();
    if epochs == 0 {
        return Ok(TrainOutcome {
            model,
            log: Vec::new(),
            warnings,
        });
    }
    model.vanilla.temperature = config.teacher_temperature;
    if post_fit {
        model.cape = CapeHead::from_vanilla(&model.vanilla);
    }

    // Frozen backbone and vanilla head: features and teachers are constant.
    let cache = if post_fit {
        let feats = |set: &[Example]| set.iter().map(|e| model.features(&e.image)).collect::<Result<Vec<_>>>();
        let train_f = feats(train_set)?;
        let teachers = train_f
            .iter()
            .map(|f| teacher_probs(f, &model, config.teacher_temperature))
            .collect::<Result<Vec<_>>>()?;
        Some((train_f, teachers, feats(val_set)?))
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let base_lr = config.learning_rate();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = config.schedule.learning_rate(base_lr, epoch, epochs);
        order.shuffle(&mut rng);
        let (mut ce, mut kl, mut active) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let inputs: Vec<(Input<'_>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let input = match &cache {
                        Some((f, t, _)) => Input::Cached {
                            features: &f[i],
                            teacher: &t[i],
                        },
                        None => Input::Image(&train_set[i].image),
                    };
                    (input, train_set[i].label)
                })
                .collect();
            let r = batch_pass(&inputs, &model, config, true)?;
            let w = chunk.len() as f64;
            ce += r.loss.ce_term * w;
            kl += r.loss.kld_term * w;
            active += r.loss.kld_active_fraction * w;
            sgd_step(&mut model, &r.grads, lr, config.weight_decay)?;
        }
        let n = train_set.len() as f64;
        let ((vt, ct), val) = match &cache {
            Some((f, _, vf)) => (
                accuracy_from_features(&model, f, train_set)?,
                (!val_set.is_empty())
                    .then(|| accuracy_from_features(&model, vf, val_set))
                    .transpose()?,
            ),
            None => (
                accuracy(&model, train_set)?,
                (!val_set.is_empty()).then(|| accuracy(&model, val_set)).transpose()?,
            ),
        };
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            ce: ce / n,
            kld: kl / n,
            kld_active_fraction: active / n,
            vanilla_train_acc: vt,
            cape_train_acc: ct,
            vanilla_val_acc: val.map(|v| v.0),
            cape_val_acc: val.map(|v| v.1),
        });
    }
    if !post_fit && !config.ce_on_cape && config.alpha() > 0.0 {
        model.vanilla_pretrained = true;
    }
    Ok(TrainOutcome { model, log, warnings })
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub abs_floor: f64,
    /// Backbone parameters sampled per layer.
    pub conv_samples_per_layer: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            conv_samples_per_layer: 40,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Backbone samples dropped because a finite-difference step flipped a
    /// ReLU.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
    pub passed: bool,
}

/// Compares the analytic gradients of [`bootstrap_loss`] with central
/// differences of the loss terms routed to each parameter.
pub fn grad_check(
    model: &Model,
    batch: &[&Example],
    config: &TrainConfig,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = bootstrap_loss(batch, model, config)?;
    grad_check_against(model, batch, config, options, &analytic)
}

/// Like [`grad_check`] but against caller-supplied gradients.
pub fn grad_check_against(
    model: &Model,
    batch: &[&Example],
    config: &TrainConfig,
    options: &GradCheckOptions,
    analytic: &Gradients,
) -> Result<GradCheckReport> {
    let eval = |m: &Model| -> Result<LossBreakdown> {
        let inputs: Vec<_> = batch.iter().map(|e| (Input::Image(&e.image), e.label)).collect();
        Ok(batch_pass(&inputs, m, config, false)?.loss)
    };
    let patterns = |m: &Model| -> Result<Vec<Vec<bool>>> {
        batch
            .iter()
            .map(|e| backbone_forward(&e.image, &m.backbone).map(|(_, t)| t.activation_pattern()))
            .collect()
    };
    run_check(model, config, options, analytic, &eval, Some(&patterns))
}

/// Gradient check on precomputed features (heads only).
pub fn grad_check_features(
    model: &Model,
    batch: &[(Tensor, usize)],
    config: &TrainConfig,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = bootstrap_loss_from_features(batch, model, config)?;
    let eval = |m: &Model| -> Result<LossBreakdown> {
        let inputs: Vec<_> = batch.iter().map(|(f, l)| (Input::Features(f), *l)).collect();
        Ok(batch_pass(&inputs, m, config, false)?.loss)
    };
    run_check(model, config, options, &analytic, &eval, None)
}

type PatternFn<'a> = dyn Fn(&Model) -> Result<Vec<Vec<bool>>> + 'a;

fn run_check(
    model: &Model,
    config: &TrainConfig,
    options: &GradCheckOptions,
    analytic: &Gradients,
    eval: &dyn Fn(&Model) -> Result<LossBreakdown>,
    patterns: Option<&PatternFn<'_>>,
) -> Result<GradCheckReport> {
    let alpha = config.alpha();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut ids: Vec<ParamId> = Vec::new();
    let all = analytic.param_ids();
    if let Some(layers) = &analytic.backbone {
        for layer in 0..layers.len() {
            let mut pool: Vec<ParamId> = all
                .iter()
                .copied()
                .filter(|id| matches!(id, ParamId::ConvWeight { layer: l, .. } | ParamId::ConvBias { layer: l, .. } if *l == layer))
                .collect();
            pool.shuffle(&mut rng);
            // Extra candidates replace samples that straddle a ReLU kink.
            ids.extend(pool.into_iter().take(options.conv_samples_per_layer * 2));
        }
    }
    ids.extend(
        all.iter()
            .copied()
            .filter(|id| !matches!(id, ParamId::ConvWeight { .. } | ParamId::ConvBias { .. })),
    );

    let base_pattern = match patterns {
        Some(f) => Some(f(model)?),
        None => None,
    };
    let mut per_layer_checked = std::collections::HashMap::<usize, usize>::new();
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_error: 0.0,
        worst: None,
        passed: true,
    };
    let mut probe = model.clone();
    for id in ids {
        let conv_layer = match id {
            ParamId::ConvWeight { layer, .. } | ParamId::ConvBias { layer, .. } => Some(layer),
            _ => None,
        };
        if let Some(layer) = conv_layer {
            if per_layer_checked.get(&layer).copied().unwrap_or(0) >= options.conv_samples_per_layer {
                continue;
            }
        }
        let a = analytic.get(id).expect("id taken from the analytic gradients");
        let routed = |l: LossBreakdown| match id {
            ParamId::CapeWeight(_) | ParamId::CapeBias(_) | ParamId::CapeLogTemperature => l.total,
            _ => alpha * l.ce_term,
        };
        let orig = model.param(id);
        probe.set_param(id, orig + options.step);
        let plus = eval(&probe)?;
        let kink_plus = conv_layer.is_some() && patterns.map(|f| f(&probe)).transpose()? != base_pattern;
        probe.set_param(id, orig - options.step);
        let minus = eval(&probe)?;
        let kink_minus = conv_layer.is_some() && patterns.map(|f| f(&probe)).transpose()? != base_pattern;
        probe.set_param(id, orig);
        if kink_plus || kink_minus {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (routed(plus) - routed(minus)) / (2.0 * options.step);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.abs_floor);
        report.checked += 1;
        if let Some(layer) = conv_layer {
            *per_layer_checked.entry(layer).or_default() += 1;
        }
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = rel;
            report.worst = Some(format!("{id}: analytic {a:.6e}, numeric {numeric:.6e}"));
        }
    }
    report.passed = report.max_rel_error <= options.tolerance && report.checked > 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cross_entropy_examples() {
        let q = Tensor::from_slice(&[0.0, 1.0, 0.0]);
        assert_eq!(cross_entropy(&Tensor::from_slice(&[0.0, 1.0, 0.0]), &q).unwrap(), 0.0);
        let u = Tensor::from_slice(&[1.0 / 3.0; 3]);
        assert_abs_diff_eq!(cross_entropy(&u, &q).unwrap(), 3f64.ln(), epsilon = 1e-15);
        let p = Tensor::from_slice(&[0.5, 0.25, 0.25]);
        assert_abs_diff_eq!(cross_entropy(&p, &q).unwrap(), 4f64.ln(), epsilon = 1e-15);
        assert!(cross_entropy(&p, &Tensor::from_slice(&[0.5, 0.5, 0.0])).is_err());
        assert!(cross_entropy(&p, &Tensor::from_slice(&[1.0, 1.0, 0.0])).is_err());
        // Zero probability on the true class is clamped, not infinite.
        let z = Tensor::from_slice(&[1.0, 0.0, 0.0]);
        assert_abs_diff_eq!(cross_entropy(&z, &q).unwrap(), -(1e-12f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn kld_examples() {
        let p = Tensor::from_slice(&[0.2, 0.3, 0.5]);
        assert_eq!(kld(&p, &p).unwrap(), 0.0);
        let t = Tensor::from_slice(&[1.0, 0.0]);
        let a = Tensor::from_slice(&[0.5, 0.5]);
        assert_abs_diff_eq!(kld(&t, &a).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(kld(&t, &p).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut p = [1.0];
        sgd_update(&mut p, &[2.0], 0.0, 0.5).unwrap();
        assert_eq!(p, [1.0]);
        sgd_update(&mut p, &[2.0], 0.1, 0.0).unwrap();
        assert_abs_diff_eq!(p[0], 0.8, epsilon = 1e-15);
        let mut p = [1.0];
        sgd_update(&mut p, &[0.0], 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(p[0], 0.9, epsilon = 1e-15);
        assert!(sgd_update(&mut p, &[0.0, 1.0], 1.0, 0.1).is_err());
    }

    #[test]
    fn schedules() {
        let s = Schedule::Step { decay: 0.1, period: 3 };
        assert_eq!(s.learning_rate(1.0, 2, 10), 1.0);
        assert_abs_diff_eq!(s.learning_rate(1.0, 3, 10), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.learning_rate(1.0, 7, 10), 0.01, epsilon = 1e-15);
        let l = Schedule::Linear { final_fraction: 0.01 };
        assert_eq!(l.learning_rate(2.0, 0, 5), 2.0);
        assert_abs_diff_eq!(l.learning_rate(2.0, 4, 5), 0.02, epsilon = 1e-15);
        assert_eq!(l.learning_rate(2.0, 0, 1), 2.0);
    }

    #[test]
    fn mode_constraints() {
        assert!(TrainConfig::from_scratch().validate().unwrap().is_empty());
        assert!(TrainConfig::post_fit().validate().unwrap().is_empty());
        let bad = TrainConfig {
            alpha: Some(1.0),
            ..TrainConfig::post_fit()
        };
        assert!(bad.validate().is_err());
        let degenerate = TrainConfig {
            beta: Some(0.0),
            ..TrainConfig::post_fit()
        };
        assert!(!degenerate.validate().unwrap().is_empty());
        let negative = TrainConfig {
            beta: Some(-1.0),
            ..TrainConfig::from_scratch()
        };
        assert!(negative.validate().is_err());
        assert_eq!(TrainConfig::post_fit().alpha(), 0.0);
        assert_eq!(TrainConfig::post_fit().beta(), 1.0);
    }

    #[test]
    fn config_json_uses_mode_defaults() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"mode": "pf", "epochs": 3}"#).unwrap();
        assert_eq!(cfg.mode, TrainMode::PostFit);
        assert_eq!(cfg.epochs(), 3);
        assert_eq!(cfg.alpha(), 0.0);
        let cfg: TrainConfig =
            serde_json::from_str(r#"{"schedule": {"kind": "linear", "final_fraction": 0.01}}"#).unwrap();
        assert_eq!(cfg.schedule, Schedule::Linear { final_fraction: 0.01 });
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
