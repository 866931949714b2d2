//! Classifier heads, class activation maps, and the CAPE decomposition.
//!
//! Given features `F` (`[H, W, K]`) and a linear head `(W, b)`:
//!
//! * `M[i,j,c] = sum_k W[k,c] F[i,j,k]`, `M' = M + b`, `s[i,j] = mean_c M'[i,j,c]`.
//! * the pixel class distribution is `softmax_c(M'[i,j] / t)`,
//! * the saliency weights are `softmax_ij(s / t)`,
//! * the voxel contribution `P[i,j,c]` is their product, and the CAPE
//!   prediction `p_hat[c] = sum_ij P[i,j,c]`.
//!
//! `P` sums to one, so every region's share of a class probability is an
//! actual probability mass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, bilinear_upsample, minmax_normalize, rectify, softmax_axis, Tensor};

/// Weight `[K, C]` and bias `[C]` of a linear layer applied per pixel.
pub trait LinearHead {
    fn weight(&self) -> &Tensor;
    fn bias(&self) -> &Tensor;

    fn channels(&self) -> usize {
        self.weight().shape()[0]
    }

    fn classes(&self) -> usize {
        self.weight().shape()[1]
    }
}

fn check_linear(weight: &Tensor, bias: &Tensor) -> Result<()> {
    let [_, c] = weight.dims2()?;
    bias.expect_shape(&[c])
}

/// Global-average-pooling classifier with a fixed softmax temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaHead {
    pub weight: Tensor,
    pub bias: Tensor,
    /// Teacher temperature used when softening this head's prediction.
    pub temperature: f64,
}

impl VanillaHead {
    pub fn new(weight: Tensor, bias: Tensor, temperature: f64) -> Result<Self> {
        check_linear(&weight, &bias)?;
        if !(temperature > 0.0) {
            return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
        }
        Ok(VanillaHead { weight, bias, temperature })
    }

    pub fn zeros(channels: usize, classes: usize, temperature: f64) -> Self {
        VanillaHead {
            weight: Tensor::zeros(&[channels, classes]),
            bias: Tensor::zeros(&[classes]),
            temperature,
        }
    }
}

impl LinearHead for VanillaHead {
    fn weight(&self) -> &Tensor {
        &self.weight
    }
    fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// The CAPE layer: a linear head plus a learnable temperature stored as its
/// logarithm, so `T' = exp(log_temperature)` stays positive.
#[derive(Clone, Debug, PartialEq)]
pub struct CapeHead {
    pub weight: Tensor,
    pub bias: Tensor,
    pub log_temperature: f64,
}

impl CapeHead {
    pub fn new(weight: Tensor, bias: Tensor, temperature: f64) -> Result<Self> {
        check_linear(&weight, &bias)?;
        if !(temperature > 0.0) {
            return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
        }
        Ok(CapeHead {
            weight,
            bias,
            log_temperature: temperature.ln(),
        })
    }

    /// Copies the vanilla classifier's weights; `T'` starts at 1.
    pub fn from_vanilla(head: &VanillaHead) -> Self {
        CapeHead {
            weight: head.weight.clone(),
            bias: head.bias.clone(),
            log_temperature: 0.0,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }
}

impl LinearHead for CapeHead {
    fn weight(&self) -> &Tensor {
        &self.weight
    }
    fn bias(&self) -> &Tensor {
        &self.bias
    }
}

fn check_features(features: &Tensor, head: &impl LinearHead) -> Result<[usize; 3]> {
    let [h, w, k] = features.dims3()?;
    if k != head.channels() {
        return Err(Error::shape(&[h, w, head.channels()], features.shape()));
    }
    check_linear(head.weight(), head.bias())?;
    Ok([h, w, k])
}

/// Spatial mean of `[H, W, K]` features.
pub fn global_average_pool(features: &Tensor) -> Result<Vec<f64>> {
    let [h, w, k] = features.dims3()?;
    let mut gap = vec![0.0; k];
    for px in features.data().chunks(k) {
        for (g, &v) in gap.iter_mut().zip(px) {
            *g += v;
        }
    }
    let n = (h * w) as f64;
    gap.iter_mut().for_each(|g| *g /= n);
    Ok(gap)
}

/// `W^T * GAP(F) + b` before any temperature.
pub fn vanilla_logits(features: &Tensor, head: &VanillaHead) -> Result<Vec<f64>> {
    check_features(features, head)?;
    let gap = global_average_pool(features)?;
    let c = head.classes();
    let mut logits = head.bias.data().to_vec();
    for (k, &g) in gap.iter().enumerate() {
        for (z, &wkc) in logits.iter_mut().zip(&head.weight.data()[k * c..][..c]) {
            *z += g * wkc;
        }
    }
    Ok(logits)
}

/// Class distribution of the vanilla classifier at `temperature`.
pub fn vanilla_forward(features: &Tensor, head: &VanillaHead, temperature: f64) -> Result<Tensor> {
    let logits = Tensor::from_slice(&vanilla_logits(features, head)?);
    softmax_axis(&logits, &[0], temperature)
}

/// `M`, the bias-shifted `M'`, and the class-mean saliency logits `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMaps {
    /// `[H, W, C]`
    pub raw: Tensor,
    /// `[H, W, C]`
    pub shifted: Tensor,
    /// `[H, W]`
    pub saliency: Tensor,
}

impl ActivationMaps {
    /// Builds the maps from a given `M'`, with `M = M'` (zero bias).
    pub fn from_shifted(shifted: Tensor) -> Result<Self> {
        let [h, w, c] = shifted.dims3()?;
        let saliency = class_mean(&shifted, h, w, c);
        Ok(ActivationMaps {
            raw: shifted.clone(),
            shifted,
            saliency,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.shifted.dims3().expect("3-D maps")
    }

    pub fn classes(&self) -> usize {
        self.dims()[2]
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::arg(format!(
                "class {class} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(())
    }
}

fn class_mean(t: &Tensor, h: usize, w: usize, c: usize) -> Tensor {
    let data = t
        .data()
        .chunks(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect();
    Tensor::new(vec![h, w], data).expect("h*w entries")
}

pub fn activation_maps(features: &Tensor, head: &impl LinearHead) -> Result<ActivationMaps> {
    let [h, w, k] = check_features(features, head)?;
    let c = head.classes();
    let wt = head.weight().data();
    let mut raw = Tensor::zeros(&[h, w, c]);
    for (out, px) in raw.data_mut().chunks_mut(c).zip(features.data().chunks(k)) {
        for (kk, &f) in px.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            for (m, &wkc) in out.iter_mut().zip(&wt[kk * c..][..c]) {
                *m += f * wkc;
            }
        }
    }
    let mut shifted = raw.clone();
    for px in shifted.data_mut().chunks_mut(c) {
        for (m, &b) in px.iter_mut().zip(head.bias().data()) {
            *m += b;
        }
    }
    let saliency = class_mean(&shifted, h, w, c);
    Ok(ActivationMaps { raw, shifted, saliency })
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::arg(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Per-pixel class distribution `softmax_c(M' / t)`, shape `[H, W, C]`.
pub fn pixel_class_dist(maps: &ActivationMaps, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    softmax_axis(&maps.shifted, &[2], temperature)
}

/// Unweighted mean of the pixel class distributions (at unit temperature).
pub fn naive_aggregate(maps: &ActivationMaps) -> Tensor {
    let [h, w, c] = maps.dims();
    let dist = softmax_axis(&maps.shifted, &[2], 1.0).expect("valid axis");
    let mut p = vec![0.0; c];
    for px in dist.data().chunks(c) {
        for (acc, &v) in p.iter_mut().zip(px) {
            *acc += v;
        }
    }
    let n = (h * w) as f64;
    p.iter_mut().for_each(|v| *v /= n);
    Tensor::from_slice(&p)
}

/// Spatial softmax of the saliency logits, shape `[H, W]`.
pub fn saliency_weights(maps: &ActivationMaps, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    softmax_axis(&maps.saliency, &[0, 1], temperature)
}

/// CAPE class prediction `p_hat`.
pub fn cape_forward(maps: &ActivationMaps, temperature: f64) -> Result<Tensor> {
    Ok(voxel_contributions(maps, temperature, DecompositionForm::Factored)?.class_totals())
}

/// Which algebraic route computes the voxel contributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecompositionForm {
    /// Class softmax times spatial softmax.
    Factored,
    /// One exponential of `M'[i,j,c] + s[i,j]` over the product of the two
    /// partition functions.
    SingleSoftmax,
}

/// `P` of shape `[H, W, C]`: nonnegative, summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelContribution {
    values: Tensor,
}

impl VoxelContribution {
    /// Wraps an arbitrary `[H, W, C]` tensor after checking that it is a
    /// probability distribution.
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims3()?;
        if values.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invariant("voxel contributions must be nonnegative".into()));
        }
        let total = values.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invariant(format!("voxel contributions sum to {total}, not 1")));
        }
        Ok(VoxelContribution { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dims(&self) -> [usize; 3] {
        self.values.dims3().expect("3-D")
    }

    pub fn classes(&self) -> usize {
        self.dims()[2]
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.classes() {
            return Err(Error::arg(format!(
                "class {class} out of range for {} classes",
                self.classes()
            )));
        }
        Ok(())
    }

    /// `[H, W]` slice for one class.
    pub fn class_map(&self, class: usize) -> Result<Tensor> {
        self.check_class(class)?;
        self.values.channel(class)
    }

    /// Per-class spatial sums, i.e. the CAPE prediction.
    pub fn class_totals(&self) -> Tensor {
        let c = self.classes();
        let mut p = vec![0.0; c];
        for px in self.values.data().chunks(c) {
            for (acc, &v) in p.iter_mut().zip(px) {
                *acc += v;
            }
        }
        Tensor::from_slice(&p)
    }
}

pub fn voxel_contributions(
    maps: &ActivationMaps,
    temperature: f64,
    form: DecompositionForm,
) -> Result<VoxelContribution> {
    check_temperature(temperature)?;
    let [h, w, c] = maps.dims();
    let t = temperature;
    let values = match form {
        DecompositionForm::Factored => {
            let dist = pixel_class_dist(maps, t)?;
            let weights = saliency_weights(maps, t)?;
            let mut out = dist;
            for (px, &pw) in out.data_mut().chunks_mut(c).zip(weights.data()) {
                px.iter_mut().for_each(|v| *v *= pw);
            }
            out
        }
        DecompositionForm::SingleSoftmax => {
            // exp((M'[i,j,c] + s[i,j]) / t) over
            // sum_{c'} sum_{i'j'} exp((M'[i,j,c'] + s[i',j']) / t),
            // with the denominator's M' kept at the outer pixel (i, j).
            // Shifted by per-pixel and global maxima for stability.
            let m = maps.shifted.data();
            let s = maps.saliency.data();
            let s_max = maps.saliency.max();
            let mut out = Tensor::zeros(&[h, w, c]);
            for p in 0..h * w {
                let px = &m[p * c..][..c];
                let m_max = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let shift = m_max + s_max;
                let mut denom = 0.0;
                for &mc in px {
                    for &sv in s {
                        denom += ((mc + sv - shift) / t).exp();
                    }
                }
                for (o, &mc) in out.data_mut()[p * c..][..c].iter_mut().zip(px) {
                    *o = ((mc + s[p] - shift) / t).exp() / denom;
                }
            }
            out
        }
    };
    Ok(VoxelContribution { values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExplanationKind {
    #[serde(rename = "cam")]
    Cam,
    #[serde(rename = "cape")]
    Cape,
    #[serde(rename = "mu-cape")]
    MuCape,
}

impl ExplanationKind {
    pub const ALL: [ExplanationKind; 3] = [ExplanationKind::Cam, ExplanationKind::Cape, ExplanationKind::MuCape];

    pub fn slug(self) -> &'static str {
        match self {
            ExplanationKind::Cam => "cam",
            ExplanationKind::Cape => "cape",
            ExplanationKind::MuCape => "mu-cape",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ExplanationKind::Cam => "CAM",
            ExplanationKind::Cape => "CAPE",
            ExplanationKind::MuCape => "mu-CAPE",
        }
    }
}

impl std::str::FromStr for ExplanationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cam" => Ok(ExplanationKind::Cam),
            "cape" => Ok(ExplanationKind::Cape),
            "mu-cape" | "mucape" | "mu_cape" => Ok(ExplanationKind::MuCape),
            other => Err(Error::arg(format!("unknown explanation kind '{other}'"))),
        }
    }
}

/// A `[0, 1]` heatmap at image resolution, plus the raw pre-upsampling
/// values it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationMap {
    pub kind: ExplanationKind,
    pub class: usize,
    /// `[H', W']`
    pub values: Tensor,
    /// `[H, W]`
    pub raw: Tensor,
}

/// Upsample then min-max normalize.
fn phi(raw: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    Ok(minmax_normalize(&bilinear_upsample(raw, target)?))
}

pub fn cam_explanation(maps: &ActivationMaps, class: usize, target: (usize, usize)) -> Result<ExplanationMap> {
    maps.check_class(class)?;
    let raw = maps.raw.channel(class)?;
    Ok(ExplanationMap {
        kind: ExplanationKind::Cam,
        class,
        values: phi(&rectify(&raw), target)?,
        raw,
    })
}

pub fn cape_explanation(
    contributions: &VoxelContribution,
    class: usize,
    target: (usize, usize),
) -> Result<ExplanationMap> {
    let raw = contributions.class_map(class)?;
    Ok(ExplanationMap {
        kind: ExplanationKind::Cape,
        class,
        values: phi(&raw, target)?,
        raw,
    })
}

/// The pre-normalization μ-CAPE logits `M'_c + s`.
pub fn mu_cape_logits(maps: &ActivationMaps, class: usize) -> Result<Tensor> {
    maps.check_class(class)?;
    maps.shifted.channel(class)?.zip_map(&maps.saliency, |m, s| m + s)
}

pub fn mu_cape_explanation(
    maps: &ActivationMaps,
    class: usize,
    target: (usize, usize),
) -> Result<ExplanationMap> {
    let raw = mu_cape_logits(maps, class)?;
    Ok(ExplanationMap {
        kind: ExplanationKind::MuCape,
        class,
        values: phi(&rectify(&raw), target)?,
        raw,
    })
}

/// Size of the region groups reported by [`class_difference_map`].
pub const GROUP_SIZE: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionGroup {
    /// 0 for the top group, 1 for the next, ...
    pub rank: usize,
    /// `(row, column)` cells, by decreasing magnitude.
    pub cells: Vec<(usize, usize)>,
    pub sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassDifference {
    pub first: usize,
    pub second: usize,
    /// `P[.., .., first] - P[.., .., second]`, shape `[H, W]`.
    pub map: Tensor,
    /// Positive cells in groups of [`GROUP_SIZE`], largest first.
    pub positive: Vec<RegionGroup>,
    /// Negative cells in groups of [`GROUP_SIZE`], most negative first.
    pub negative: Vec<RegionGroup>,
    /// `p_hat[first] - p_hat[second]`.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DifferenceAccounting {
    pub positive_sums: Vec<f64>,
    pub negative_sums: Vec<f64>,
    pub residual: f64,
    pub total: f64,
}

impl ClassDifference {
    /// Sums of the first `groups` groups of each sign; everything else
    /// (later groups and zero cells) lands in the residual.
    pub fn accounting(&self, groups: usize) -> DifferenceAccounting {
        let positive_sums: Vec<f64> = self.positive.iter().take(groups).map(|g| g.sum).collect();
        let negative_sums: Vec<f64> = self.negative.iter().take(groups).map(|g| g.sum).collect();
        let residual = self
            .positive
            .iter()
            .skip(groups)
            .chain(self.negative.iter().skip(groups))
            .map(|g| g.sum)
            .sum();
        DifferenceAccounting {
            positive_sums,
            negative_sums,
            residual,
            total: self.total,
        }
    }
}

fn group_cells(mut cells: Vec<(usize, usize, f64)>) -> Vec<RegionGroup> {
    cells.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then((a.0, a.1).cmp(&(b.0, b.1))));
    cells
        .chunks(GROUP_SIZE)
        .enumerate()
        .map(|(rank, chunk)| RegionGroup {
            rank,
            cells: chunk.iter().map(|&(i, j, _)| (i, j)).collect(),
            sum: chunk.iter().map(|c| c.2).sum(),
        })
        .collect()
}

pub fn class_difference_map(
    contributions: &VoxelContribution,
    first: usize,
    second: usize,
) -> Result<ClassDifference> {
    if first == second {
        return Err(Error::arg("class difference needs two distinct classes"));
    }
    let a = contributions.class_map(first)?;
    let b = contributions.class_map(second)?;
    let map = a.zip_map(&b, |x, y| x - y)?;
    let [_, w] = map.dims2()?;
    let cells: Vec<(usize, usize, f64)> = map
        .data()
        .iter()
        .enumerate()
        .map(|(p, &v)| (p / w, p % w, v))
        .collect();
    let positive = group_cells(cells.iter().copied().filter(|c| c.2 > 0.0).collect());
    let negative = group_cells(cells.iter().copied().filter(|c| c.2 < 0.0).collect());
    let totals = contributions.class_totals();
    Ok(ClassDifference {
        first,
        second,
        map,
        positive,
        negative,
        total: totals.data()[first] - totals.data()[second],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ThresholdSummary {
    pub class: usize,
    pub fraction: f64,
    /// `fraction * max` of the class map.
    pub threshold: f64,
    pub kept: Vec<(usize, usize)>,
    pub kept_mass: f64,
    pub dropped_mass: f64,
    /// `kept_mass / (kept_mass + dropped_mass)`; 1 when the class has no mass.
    pub retained_ratio: f64,
    pub zero_mass: bool,
}

/// Minimum contribution a region needs to survive the `fraction` cut.
pub fn attention_threshold(max_contribution: f64, fraction: f64) -> f64 {
    fraction * max_contribution
}

pub fn retained_ratio(kept_mass: f64, class_mass: f64) -> f64 {
    if class_mass > 0.0 {
        kept_mass / class_mass
    } else {
        1.0
    }
}

/// Keeps the regions whose contribution to `class` reaches `fraction` of
/// the largest one, and reports how much of the class probability they
/// carry.
pub fn thresholded_contribution_summary(
    contributions: &VoxelContribution,
    class: usize,
    fraction: f64,
) -> Result<ThresholdSummary> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("threshold fraction must be in (0, 1), got {fraction}")));
    }
    let map = contributions.class_map(class)?;
    let [_, w] = map.dims2()?;
    let threshold = attention_threshold(map.max(), fraction);
    let mut kept = Vec::new();
    let (mut kept_mass, mut dropped_mass) = (0.0, 0.0);
    for (p, &v) in map.data().iter().enumerate() {
        if v >= threshold {
            kept.push((p / w, p % w));
            kept_mass += v;
        } else {
            dropped_mass += v;
        }
    }
    let class_mass = kept_mass + dropped_mass;
    let zero_mass = !(class_mass > 0.0);
    Ok(ThresholdSummary {
        class,
        fraction,
        threshold,
        kept,
        kept_mass,
        dropped_mass,
        retained_ratio: retained_ratio(kept_mass, class_mass),
        zero_mass,
    })
}

/// Softmax of the spatially averaged logits vs. the average of per-pixel
/// softmaxes; the largest componentwise gap between the two.
pub fn additivity_gap(maps: &ActivationMaps) -> f64 {
    let [h, w, c] = maps.dims();
    let mut mean_logits = vec![0.0; c];
    for px in maps.shifted.data().chunks(c) {
        for (m, &v) in mean_logits.iter_mut().zip(px) {
            *m += v / (h * w) as f64;
        }
    }
    let of_mean = tensor::softmax(&mean_logits);
    let mean_of = naive_aggregate(maps);
    of_mean
        .iter()
        .zip(mean_of.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
    }

    fn maps_from(shape: [usize; 3], values: &[f64]) -> ActivationMaps {
        ActivationMaps::from_shifted(Tensor::new(shape.to_vec(), values.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn vanilla_examples() {
        let f = Tensor::from_fn(&[2, 2, 3], |i| i[2] as f64);
        let head = VanillaHead::zeros(3, 4, 1.0);
        let p = vanilla_forward(&f, &head, 1.0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let f = Tensor::from_fn(&[3, 3, 2], |i| if i[2] == 0 { 1.0 } else { 0.0 });
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let head = VanillaHead::new(eye, Tensor::zeros(&[2]), 1.0).unwrap();
        let p = vanilla_forward(&f, &head, 1.0).unwrap();
        assert_abs_diff_eq!(p.data()[0], 0.7310585786300049, epsilon = 1e-12);
        assert_abs_diff_eq!(p.data()[1], 0.2689414213699951, epsilon = 1e-12);

        let p = vanilla_forward(&f, &head, 1e4).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.5).abs() < 1e-3));

        assert!(vanilla_forward(&Tensor::zeros(&[2, 2, 5]), &head, 1.0).is_err());
    }

    #[test]
    fn one_hot_weights_select_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_tensor(&mut rng, &[3, 4, 5], 1.0);
        // class c <- channel (c + 2) % 5
        let w = Tensor::from_fn(&[5, 3], |i| if i[0] == (i[1] + 2) % 5 { 1.0 } else { 0.0 });
        let head = VanillaHead::new(w, Tensor::from_slice(&[0.5, -1.0, 2.0]), 1.0).unwrap();
        let maps = activation_maps(&f, &head).unwrap();
        for c in 0..3 {
            assert_eq!(maps.raw.channel(c).unwrap(), f.channel((c + 2) % 5).unwrap());
            let diff = maps.shifted.channel(c).unwrap().zip_map(&maps.raw.channel(c).unwrap(), |a, b| a - b).unwrap();
            assert!(diff.data().iter().all(|&d| (d - head.bias.data()[c]).abs() < 1e-15));
        }
    }

    #[test]
    fn activation_maps_match_triple_loop_and_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, k, c) = (3, 4, 6, 5);
        let f = random_tensor(&mut rng, &[h, w, k], 2.0);
        let head = VanillaHead::new(random_tensor(&mut rng, &[k, c], 1.0), random_tensor(&mut rng, &[c], 1.0), 1.0).unwrap();
        let maps = activation_maps(&f, &head).unwrap();
        for i in 0..h {
            for j in 0..w {
                let mut mean = 0.0;
                for cc in 0..c {
                    let mut m = 0.0;
                    for kk in 0..k {
                        m += head.weight.get(&[kk, cc]) * f.get(&[i, j, kk]);
                    }
                    assert_abs_diff_eq!(maps.raw.get(&[i, j, cc]), m, epsilon = 1e-12);
                    assert_abs_diff_eq!(maps.shifted.get(&[i, j, cc]), m + head.bias.data()[cc], epsilon = 1e-12);
                    mean += (m + head.bias.data()[cc]) / c as f64;
                }
                assert_abs_diff_eq!(maps.saliency.get(&[i, j]), mean, epsilon = 1e-12);
            }
        }
        // GAP(M)_c + b_c is the vanilla logit.
        let logits = vanilla_logits(&f, &head).unwrap();
        for cc in 0..c {
            let gap = maps.raw.channel(cc).unwrap().mean();
            assert_abs_diff_eq!(gap + head.bias.data()[cc], logits[cc], epsilon = 1e-12);
        }
    }

    #[test]
    fn cam_examples() {
        let maps = maps_from([2, 2, 1], &[-1.0, -2.0, -0.5, -3.0]);
        let e = cam_explanation(&maps, 0, (4, 4)).unwrap();
        assert!(e.values.data().iter().all(|&v| v == 0.0));

        let maps = maps_from([2, 2, 1], &[-1.0, 2.0, -0.5, -3.0]);
        let e = cam_explanation(&maps, 0, (2, 2)).unwrap();
        assert_eq!(e.values.data(), &[0.0, 1.0, 0.0, 0.0]);

        let maps = maps_from([2, 2, 1], &[1.5; 4]);
        let e = cam_explanation(&maps, 0, (4, 4)).unwrap();
        assert!(e.values.data().iter().all(|&v| v == 0.0));

        assert!(cam_explanation(&maps, 1, (4, 4)).is_err());
    }

    #[test]
    fn pixel_distribution_examples() {
        let maps = maps_from([1, 2, 3], &[0.7, 0.7, 0.7, 3f64.ln(), 0.0, 0.0]);
        let d = pixel_class_dist(&maps, 1.0).unwrap();
        for v in &d.data()[..3] {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let maps = maps_from([1, 1, 2], &[3f64.ln(), 0.0]);
        let d = pixel_class_dist(&maps, 1.0).unwrap();
        assert_abs_diff_eq!(d.data()[0], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(d.data()[1], 0.25, epsilon = 1e-15);
        assert!(pixel_class_dist(&maps, 0.0).is_err());
    }

    #[test]
    fn naive_aggregate_examples() {
        let maps = maps_from([1, 1, 3], &[1.0, 2.0, -1.0]);
        let p = naive_aggregate(&maps);
        let expected = tensor::softmax(&[1.0, 2.0, -1.0]);
        for (a, b) in p.data().iter().zip(&expected) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }

        let maps = maps_from([2, 2, 3], &[1.0, 2.0, -1.0].repeat(4));
        let p = naive_aggregate(&maps);
        for (a, b) in p.data().iter().zip(&expected) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }

        // Explicit loop oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_tensor(&mut rng, &[2, 2, 3], 3.0);
        let maps = ActivationMaps::from_shifted(m.clone()).unwrap();
        let p = naive_aggregate(&maps);
        let mut oracle = [0.0; 3];
        for i in 0..2 {
            for j in 0..2 {
                let z: Vec<f64> = (0..3).map(|c| m.get(&[i, j, c])).collect();
                let denom: f64 = z.iter().map(|v| v.exp()).sum();
                for c in 0..3 {
                    oracle[c] += z[c].exp() / denom / 4.0;
                }
            }
        }
        for c in 0..3 {
            assert_abs_diff_eq!(p.data()[c], oracle[c], epsilon = 1e-12);
        }
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn saliency_examples() {
        let maps = maps_from([2, 3, 2], &[0.4; 12]);
        let wts = saliency_weights(&maps, 1.0).unwrap();
        assert!(wts.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));

        let mut s = vec![0.0; 9];
        s[4] = 1000.0;
        let maps = maps_from([3, 3, 1], &s);
        let wts = saliency_weights(&maps, 1.0).unwrap();
        assert!(wts.data()[4] >= 1.0 - 1e-6);

        // One class, so s = M'.
        let maps = maps_from([2, 2, 1], &[2f64.ln(), 0.0, 0.0, 0.0]);
        let wts = saliency_weights(&maps, 1.0).unwrap();
        for (a, b) in wts.data().iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(saliency_weights(&maps, -1.0).is_err());
    }

    #[test]
    fn cape_forward_examples() {
        let maps = maps_from([1, 1, 3], &[0.3, -1.2, 2.0]);
        for t in [0.5, 1.0, 3.0] {
            let p = cape_forward(&maps, t).unwrap();
            let expected = softmax_axis(&Tensor::from_slice(&[0.3, -1.2, 2.0]), &[0], t).unwrap();
            for (a, b) in p.data().iter().zip(expected.data()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
            }
        }
        let maps = maps_from([3, 2, 3], &[0.3, -1.2, 2.0].repeat(6));
        let p = cape_forward(&maps, 1.0).unwrap();
        let expected = tensor::softmax(&[0.3, -1.2, 2.0]);
        for (a, b) in p.data().iter().zip(&expected) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        assert!(cape_forward(&maps, 0.0).is_err());
    }

    #[test]
    fn cape_forward_matches_explicit_ensemble_and_voxel_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_tensor(&mut rng, &[3, 3, 4], 3.0);
        let maps = ActivationMaps::from_shifted(m.clone()).unwrap();
        let t = 1.7;
        let p = cape_forward(&maps, t).unwrap();
        // Direct evaluation of sum_ij p(c | ij) p(ij).
        let s: Vec<f64> = (0..9).map(|q| (0..4).map(|c| m.data()[q * 4 + c]).sum::<f64>() / 4.0).collect();
        let zs: f64 = s.iter().map(|v| (v / t).exp()).sum();
        for c in 0..4 {
            let mut acc = 0.0;
            for q in 0..9 {
                let zc: f64 = (0..4).map(|cc| (m.data()[q * 4 + cc] / t).exp()).sum();
                acc += (m.data()[q * 4 + c] / t).exp() / zc * (s[q] / t).exp() / zs;
            }
            assert_abs_diff_eq!(p.data()[c], acc, epsilon = 1e-12);
        }
        let v = voxel_contributions(&maps, t, DecompositionForm::SingleSoftmax).unwrap();
        for (a, b) in v.class_totals().data().iter().zip(p.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn voxel_examples() {
        let maps = maps_from([2, 3, 4], &[0.25; 24]);
        for form in [DecompositionForm::Factored, DecompositionForm::SingleSoftmax] {
            let v = voxel_contributions(&maps, 1.0, form).unwrap();
            assert!(v.values().data().iter().all(|&x| (x - 1.0 / 24.0).abs() < 1e-15));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let maps = ActivationMaps::from_shifted(random_tensor(&mut rng, &[2, 2, 3], 4.0)).unwrap();
        for t in [0.5, 1.0, 2.0] {
            let a = voxel_contributions(&maps, t, DecompositionForm::Factored).unwrap();
            let b = voxel_contributions(&maps, t, DecompositionForm::SingleSoftmax).unwrap();
            for (x, y) in a.values().data().iter().zip(b.values().data()) {
                assert!((x - y).abs() <= 1e-12);
            }
            assert_abs_diff_eq!(a.values().sum(), 1.0, epsilon = 1e-12);
            let p = cape_forward(&maps, t).unwrap();
            for (x, y) in a.class_totals().data().iter().zip(p.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert!(voxel_contributions(&maps, 0.0, DecompositionForm::Factored).is_err());
    }

    #[test]
    fn voxel_contribution_constructor_validates() {
        assert!(VoxelContribution::new(Tensor::full(&[1, 2, 1], 0.5)).is_ok());
        assert!(VoxelContribution::new(Tensor::full(&[1, 2, 1], 0.6)).is_err());
        assert!(VoxelContribution::new(Tensor::new(vec![1, 2, 1], vec![1.5, -0.5]).unwrap()).is_err());
    }

    #[test]
    fn cape_explanation_examples() {
        let mut values = vec![0.01; 8];
        values[4] = 0.93;
        let v = VoxelContribution::new(Tensor::new(vec![2, 2, 2], values).unwrap()).unwrap();
        let e = cape_explanation(&v, 0, (2, 2)).unwrap();
        assert_eq!(e.values.data(), &[0.0, 0.0, 1.0, 0.0]);
        assert_abs_diff_eq!(e.raw.sum(), v.class_totals().data()[0], epsilon = 1e-15);
        let e = cape_explanation(&v, 1, (2, 2)).unwrap();
        assert!(e.values.data().iter().all(|&x| x == 0.0));

        let uniform = VoxelContribution::new(Tensor::full(&[2, 2, 2], 0.125)).unwrap();
        let e = cape_explanation(&uniform, 1, (8, 8)).unwrap();
        assert!(e.values.data().iter().all(|&x| x == 0.0));
        assert_eq!(e.values.shape(), &[8, 8]);
    }

    #[test]
    fn mu_cape_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_tensor(&mut rng, &[3, 3, 1], 2.0);
        let maps = ActivationMaps::from_shifted(m.clone()).unwrap();
        let mu = mu_cape_explanation(&maps, 0, (6, 6)).unwrap();
        let doubled = ActivationMaps::from_shifted(m.map(|x| 2.0 * x)).unwrap();
        let cam = cam_explanation(&doubled, 0, (6, 6)).unwrap();
        for (a, b) in mu.values.data().iter().zip(cam.values.data()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }

        let maps = maps_from([2, 2, 2], &[-1.0, 0.5, -2.0, 0.0, -0.3, 0.1, -4.0, -1.0]);
        let mu = mu_cape_explanation(&maps, 0, (4, 4)).unwrap();
        assert!(mu.values.data().iter().all(|&x| x == 0.0));

        let maps = ActivationMaps::from_shifted(random_tensor(&mut rng, &[4, 4, 3], 2.0)).unwrap();
        for c in 0..3 {
            let logits = mu_cape_logits(&maps, c).unwrap();
            let mu = mu_cape_explanation(&maps, c, (4, 4)).unwrap();
            if logits.max() > 0.0 {
                assert_eq!(mu.values.argmax(), logits.argmax());
            }
        }
    }

    #[test]
    fn class_difference_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps = ActivationMaps::from_shifted(random_tensor(&mut rng, &[4, 4, 3], 2.0)).unwrap();
        let v = voxel_contributions(&maps, 1.0, DecompositionForm::Factored).unwrap();
        assert!(class_difference_map(&v, 1, 1).is_err());
        assert!(class_difference_map(&v, 0, 3).is_err());
        let d01 = class_difference_map(&v, 0, 1).unwrap();
        let d10 = class_difference_map(&v, 1, 0).unwrap();
        for (a, b) in d01.map.data().iter().zip(d10.map.data()) {
            assert_eq!(*a, -*b);
        }
        let p = v.class_totals();
        assert_abs_diff_eq!(d01.map.sum(), p.data()[0] - p.data()[1], epsilon = 1e-12);
        for groups in 0..5 {
            let acc = d01.accounting(groups);
            let sum: f64 = acc.positive_sums.iter().chain(&acc.negative_sums).sum::<f64>() + acc.residual;
            assert_abs_diff_eq!(sum, d01.total, epsilon = 1e-12);
        }
        for g in d01.positive.iter().chain(&d01.negative) {
            assert!(g.cells.len() <= GROUP_SIZE);
        }
    }

    #[test]
    fn top_group_beats_every_other_five_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let maps = ActivationMaps::from_shifted(random_tensor(&mut rng, &[4, 4, 2], 2.0)).unwrap();
            let v = voxel_contributions(&maps, 1.0, DecompositionForm::Factored).unwrap();
            let d = class_difference_map(&v, 0, 1).unwrap();
            let pos: Vec<f64> = d.map.data().iter().copied().filter(|&x| x > 0.0).collect();
            if pos.len() < GROUP_SIZE {
                continue;
            }
            let top = d.positive[0].sum;
            // Brute force over all 5-subsets of the positive cells (<= 16 choose 5).
            let n = pos.len();
            let mut best = f64::NEG_INFINITY;
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize != GROUP_SIZE {
                    continue;
                }
                let s: f64 = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| pos[b]).sum();
                best = best.max(s);
            }
            assert!(top >= best - 1e-15);
        }
    }

    #[test]
    fn threshold_examples() {
        let mut values = vec![0.0; 8];
        values[3] = 1.0;
        let v = VoxelContribution::new(Tensor::new(vec![2, 2, 2], values).unwrap()).unwrap();
        let s = thresholded_contribution_summary(&v, 1, 0.05).unwrap();
        assert_eq!(s.retained_ratio, 1.0);
        assert_eq!(s.kept, vec![(0, 1)]);
        let s = thresholded_contribution_summary(&v, 0, 0.05).unwrap();
        assert!(s.zero_mass);
        assert_eq!(s.retained_ratio, 1.0);

        let uniform = VoxelContribution::new(Tensor::full(&[2, 2, 2], 0.125)).unwrap();
        let s = thresholded_contribution_summary(&uniform, 0, 0.05).unwrap();
        assert_eq!(s.kept.len(), 4);
        assert_eq!(s.retained_ratio, 1.0);

        assert!(thresholded_contribution_summary(&uniform, 0, 0.0).is_err());
        assert!(thresholded_contribution_summary(&uniform, 0, 1.0).is_err());
    }

    /// A 2.9% peak gives a 0.145% cut; keeping 32.8 of 32.9 points of class
    /// probability retains 99.7% of the confidence.
    #[test]
    fn threshold_accounting_literal_example() {
        assert_abs_diff_eq!(attention_threshold(0.029, 0.05), 0.00145, epsilon = 1e-15);
        assert_eq!((retained_ratio(0.328, 0.329) * 1000.0).round() / 10.0, 99.7);

        // A class map realizing those numbers: eleven cells at 2.9%, one at
        // 0.9% (above the cut) and one at 0.1% (below it).
        let mut values = vec![0.0; 2 * 16];
        for p in 0..11 {
            values[p * 2] = 0.029;
        }
        values[11 * 2] = 0.009;
        values[12 * 2] = 0.001;
        for p in 0..16 {
            values[p * 2 + 1] = 0.671 / 16.0;
        }
        let v = VoxelContribution::new(Tensor::new(vec![4, 4, 2], values).unwrap()).unwrap();
        let s = thresholded_contribution_summary(&v, 0, 0.05).unwrap();
        assert_abs_diff_eq!(s.threshold, 0.00145, epsilon = 1e-15);
        assert_eq!(s.kept.len(), 12);
        assert_abs_diff_eq!(s.kept_mass, 0.328, epsilon = 1e-12);
        assert_abs_diff_eq!(s.kept_mass + s.dropped_mass, 0.329, epsilon = 1e-12);
        assert_eq!((s.retained_ratio * 1000.0).round() / 10.0, 99.7);
    }

    #[test]
    fn non_additivity_witness() {
        let maps = maps_from([1, 2, 2], &[0.0, 0.0, 4.0, 0.0]);
        assert!(additivity_gap(&maps) > 1e-3);
        let maps = maps_from([3, 2, 2], &[1.5, -0.5].repeat(6));
        assert!(additivity_gap(&maps) <= 1e-12);
    }

    /// Min-max over exponentiated values stretches gaps: with the baseline
    /// at `exp(0)`, `(e^x - e^y) / (e^x - e^0) > (x - y) / (x - 0)` for
    /// `x > y > 0`.
    #[test]
    fn exponential_is_super_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let x: f64 = rng.random_range(1e-3..20.0);
            let y: f64 = rng.random_range(0.0..x);
            if y <= 0.0 || y >= x {
                continue;
            }
            let lhs = (x.exp() - y.exp()) / x.exp_m1();
            let rhs = (x - y) / x;
            assert!(lhs > rhs, "x={x} y={y}");
        }
    }
}
