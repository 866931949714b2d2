//! Faithfulness and localization metrics for explanation maps, Borda-count
//! aggregation, and a few prediction-level statistics.

use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::heads::ExplanationKind;
use crate::model::Model;
use crate::tensor::{pearson_corr, Tensor};

/// Images whose original confidence is at or below this are left out of
/// the AD, ADD and ADCC means.
pub const CONFIDENCE_FLOOR: f64 = 1e-8;

/// Relative threshold that turns a map into a mask for the top-2 IoU.
pub const IOU_MASK_FRACTION: f64 = 0.2;

/// A prediction function `Psi(x)` paired with its explanation function
/// `Phi(x, c)`, both at image resolution.
pub trait Explainer {
    fn predict(&self, x: &Image) -> Result<Tensor>;
    fn explain(&self, x: &Image, class: usize) -> Result<Tensor>;
}

/// One explanation kind of a trained model. CAM explains the vanilla head,
/// the CAPE variants explain the CAPE head.
#[derive(Clone, Copy, Debug)]
pub struct ModelMethod<'a> {
    pub model: &'a Model,
    pub kind: ExplanationKind,
}

impl Explainer for ModelMethod<'_> {
    fn predict(&self, x: &Image) -> Result<Tensor> {
        self.model.predict_for(self.kind, x)
    }

    fn explain(&self, x: &Image, class: usize) -> Result<Tensor> {
        Ok(self.model.explain(self.kind, x, class)?.values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    /// `E * x`
    Keep,
    /// `(1 - E) * x`
    Delete,
}

pub fn masked_image(x: &Image, e: &Tensor, mode: MaskMode) -> Result<Image> {
    match mode {
        MaskMode::Keep => x.masked(e),
        MaskMode::Delete => x.masked(&e.map(|v| 1.0 - v)),
    }
}

/// Class-`c` confidence of the method's model on the masked image.
pub fn masked_predict(method: &impl Explainer, x: &Image, e: &Tensor, class: usize, mode: MaskMode) -> Result<f64> {
    let p = method.predict(&masked_image(x, e, mode)?)?;
    class_prob(&p, class)
}

fn class_prob(p: &Tensor, class: usize) -> Result<f64> {
    p.data()
        .get(class)
        .copied()
        .ok_or_else(|| Error::arg(format!("class {class} out of range for {} classes", p.len())))
}

fn check_confidence(y: f64) -> Result<()> {
    if y > CONFIDENCE_FLOOR {
        Ok(())
    } else {
        Err(Error::arg(format!("original confidence {y} is too small to normalize by")))
    }
}

/// `max(y - o, 0) / y`
pub fn avg_drop(y: f64, o: f64) -> Result<f64> {
    check_confidence(y)?;
    Ok((y - o).max(0.0) / y)
}

/// `1` when masking raised the confidence.
pub fn avg_increase(y: f64, o: f64) -> f64 {
    if y < o {
        1.0
    } else {
        0.0
    }
}

/// `max(y - d, 0) / y` where `d` is the confidence with the explained
/// region deleted.
pub fn add_metric(y: f64, d: f64) -> Result<f64> {
    check_confidence(y)?;
    Ok((y - d).max(0.0) / y)
}

/// Pearson correlation mapped from `[-1, 1]` to `[0, 1]`.
pub fn coherency(corr: f64) -> f64 {
    (corr + 1.0) / 2.0
}

/// Mean map value (the L1 norm over the pixel count).
pub fn complexity(e: &Tensor) -> f64 {
    e.mean()
}

/// Harmonic mean of `coh`, `1 - com` and `1 - ad`; 0 if any of them is 0.
pub fn adcc_from_parts(ad: f64, coh: f64, com: f64) -> f64 {
    let terms = [coh, 1.0 - com, 1.0 - ad];
    if terms.iter().any(|&t| t <= 0.0) {
        return 0.0;
    }
    3.0 / terms.iter().map(|t| 1.0 / t).sum::<f64>()
}

/// ADCC of one explanation; the coherency compares `E` with the
/// explanation of the masked image `E * x`.
pub fn adcc(method: &impl Explainer, x: &Image, e: &Tensor, class: usize) -> Result<f64> {
    let y = class_prob(&method.predict(x)?, class)?;
    let o = masked_predict(method, x, e, class, MaskMode::Keep)?;
    let e2 = method.explain(&masked_image(x, e, MaskMode::Keep)?, class)?;
    Ok(adcc_from_parts(avg_drop(y, o)?, coherency(pearson_corr(e, &e2)?), complexity(e)))
}

fn top_mask(e: &Tensor) -> Vec<bool> {
    let cut = IOU_MASK_FRACTION * e.max();
    e.data().iter().map(|&v| v > cut).collect()
}

/// IoU of the masks `E > 0.2 max(E)`; 0 when both masks are empty.
pub fn iou_top2(e1: &Tensor, e2: &Tensor) -> Result<f64> {
    e1.expect_shape(e2.shape())?;
    let (a, b) = (top_mask(e1), top_mask(e2));
    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Share of the map's mass that falls inside `mask` (`[H, W]`, values in
/// `{0, 1}`); 0 for an all-zero map.
pub fn attention_fraction(e: &Tensor, mask: &Tensor) -> Result<f64> {
    e.expect_shape(mask.shape())?;
    let total = e.sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok(e.data().iter().zip(mask.data()).map(|(v, m)| v * m).sum::<f64>() / total)
}

/// Per-image measurements for one method.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub class: usize,
    pub y: f64,
    pub o: f64,
    pub d: f64,
    pub coh: f64,
    pub com: f64,
    /// `None` when `y` is below [`CONFIDENCE_FLOOR`].
    pub ad: Option<f64>,
    pub ic: f64,
    pub add: Option<f64>,
    pub adcc: Option<f64>,
    /// `None` unless two classes have nonzero probability.
    pub iou: Option<f64>,
}

fn top2(p: &Tensor) -> Option<(usize, usize)> {
    if p.len() < 2 {
        return None;
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    // Stable sort keeps the lower index first on ties, like argmax.
    idx.sort_by(|&a, &b| p.data()[b].total_cmp(&p.data()[a]));
    (p.data()[idx[1]] > 0.0).then_some((idx[0], idx[1]))
}

pub fn evaluate_image(method: &impl Explainer, x: &Image) -> Result<EvalRecord> {
    let p = method.predict(x)?;
    let class = p.argmax();
    let y = p.data()[class];
    let e = method.explain(x, class)?;
    let kept = masked_image(x, &e, MaskMode::Keep)?;
    let o = class_prob(&method.predict(&kept)?, class)?;
    let d = masked_predict(method, x, &e, class, MaskMode::Delete)?;
    let e2 = method.explain(&kept, class)?;
    let coh = coherency(pearson_corr(&e, &e2)?);
    let com = complexity(&e);
    let included = y > CONFIDENCE_FLOOR;
    let ad = included.then(|| avg_drop(y, o)).transpose()?;
    let iou = match top2(&p) {
        Some((c1, c2)) => {
            let e_second = method.explain(x, c2)?;
            debug_assert_eq!(c1, class);
            Some(iou_top2(&e, &e_second)?)
        }
        None => None,
    };
    Ok(EvalRecord {
        class,
        y,
        o,
        d,
        coh,
        com,
        ad,
        ic: avg_increase(y, o),
        add: included.then(|| add_metric(y, d)).transpose()?,
        adcc: ad.map(|ad| adcc_from_parts(ad, coh, com)),
        iou,
    })
}

/// Dataset means on the percentage scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub images: usize,
    pub ad: f64,
    pub ic: f64,
    pub add: f64,
    pub adcc: f64,
    pub miou: f64,
    /// Images left out of AD/ADD/ADCC for near-zero confidence.
    pub excluded: usize,
    /// Images that entered the mIoU mean.
    pub iou_images: usize,
}

fn mean_pct(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

pub fn summarize(method: &str, records: &[EvalRecord]) -> MethodSummary {
    MethodSummary {
        method: method.to_string(),
        images: records.len(),
        ad: mean_pct(records.iter().filter_map(|r| r.ad)),
        ic: mean_pct(records.iter().map(|r| r.ic)),
        add: mean_pct(records.iter().filter_map(|r| r.add)),
        adcc: mean_pct(records.iter().filter_map(|r| r.adcc)),
        miou: mean_pct(records.iter().filter_map(|r| r.iou)),
        excluded: records.iter().filter(|r| r.ad.is_none()).count(),
        iou_images: records.iter().filter(|r| r.iou.is_some()).count(),
    }
}

pub fn evaluate_method(method: &impl Explainer, name: &str, images: &[&Image]) -> Result<(MethodSummary, Vec<EvalRecord>)> {
    let records = images
        .iter()
        .map(|x| evaluate_image(method, x))
        .collect::<Result<Vec<_>>>()?;
    Ok((summarize(name, &records), records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// How tied scores are ranked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieRule {
    /// Ties share the better rank and the next rank is skipped (1, 1, 3).
    #[default]
    Competition,
    /// Ties share the better rank and the next rank follows on (1, 1, 2).
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricColumn {
    pub name: String,
    pub orientation: Orientation,
    pub values: Vec<f64>,
}

impl MetricColumn {
    pub fn new(name: &str, orientation: Orientation, values: Vec<f64>) -> Self {
        MetricColumn {
            name: name.to_string(),
            orientation,
            values,
        }
    }
}

/// 3, 2 and 1 points for the top three ranks of every column, summed per
/// method.
pub fn borda_count(columns: &[MetricColumn]) -> Result<Vec<u32>> {
    borda_count_with(columns, TieRule::Competition)
}

pub fn borda_count_with(columns: &[MetricColumn], ties: TieRule) -> Result<Vec<u32>> {
    let n = match columns.first() {
        Some(c) if !c.values.is_empty() => c.values.len(),
        _ => return Err(Error::arg("Borda count needs at least one metric and one method")),
    };
    let mut scores = vec![0u32; n];
    for col in columns {
        if col.values.len() != n {
            return Err(Error::arg(format!("metric {} has {} values, expected {n}", col.name, col.values.len())));
        }
        if col.values.iter().any(|v| v.is_nan()) {
            return Err(Error::arg(format!("metric {} contains NaN", col.name)));
        }
        let better = |a: f64, b: f64| match col.orientation {
            Orientation::HigherBetter => a > b,
            Orientation::LowerBetter => a < b,
        };
        let mut distinct = col.values.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        for (i, &v) in col.values.iter().enumerate() {
            let ahead = match ties {
                TieRule::Competition => col.values.iter().filter(|&&w| better(w, v)).count(),
                TieRule::Dense => distinct.iter().filter(|&&w| better(w, v)).count(),
            };
            scores[i] += 3u32.saturating_sub(ahead as u32);
        }
    }
    Ok(scores)
}

/// The five report columns in table order.
pub const REPORT_METRICS: [(&str, Orientation); 5] = [
    ("AD", Orientation::LowerBetter),
    ("IC", Orientation::HigherBetter),
    ("ADD", Orientation::HigherBetter),
    ("ADCC", Orientation::HigherBetter),
    ("mIoU", Orientation::LowerBetter),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    #[serde(flatten)]
    pub summary: MethodSummary,
    pub bc: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub images: usize,
    pub rows: Vec<MetricsRow>,
}

impl MetricsReport {
    /// Ranks the summaries against each other.
    pub fn new(dataset: &str, summaries: Vec<MethodSummary>) -> Result<Self> {
        let columns: Vec<MetricColumn> = REPORT_METRICS
            .iter()
            .map(|&(name, o)| {
                let values = summaries
                    .iter()
                    .map(|s| match name {
                        "AD" => s.ad,
                        "IC" => s.ic,
                        "ADD" => s.add,
                        "ADCC" => s.adcc,
                        _ => s.miou,
                    })
                    .collect();
                MetricColumn::new(name, o, values)
            })
            .collect();
        let bc = borda_count(&columns)?;
        Ok(MetricsReport {
            dataset: dataset.to_string(),
            images: summaries.iter().map(|s| s.images).max().unwrap_or(0),
            rows: summaries
                .into_iter()
                .zip(bc)
                .map(|(summary, bc)| MetricsRow { summary, bc })
                .collect(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("Method,AD,IC,ADD,ADCC,mIoU,BC\n");
        for r in &self.rows {
            let s = &r.summary;
            out.push_str(&format!(
                "{},{:.2},{:.2},{:.2},{:.2},{:.2},{}\n",
                s.method, s.ad, s.ic, s.add, s.adcc, s.miou, r.bc
            ));
        }
        out
    }
}

/// Percentage of images on which the two predictors pick the same class.
pub fn prediction_agreement<A, B>(a: A, b: B, images: &[&Image]) -> Result<f64>
where
    A: Fn(&Image) -> Result<Tensor>,
    B: Fn(&Image) -> Result<Tensor>,
{
    if images.is_empty() {
        return Err(Error::arg("no images to compare predictions on"));
    }
    let mut same = 0usize;
    for x in images {
        same += (a(x)?.argmax() == b(x)?.argmax()) as usize;
    }
    Ok(100.0 * same as f64 / images.len() as f64)
}

/// Mean top-1 probability (percent) of a predictor evaluated at
/// `temperature`.
pub fn mean_confidence<P>(predict: P, images: &[&Image], temperature: f64) -> Result<f64>
where
    P: Fn(&Image, f64) -> Result<Tensor>,
{
    if images.is_empty() {
        return Err(Error::arg("no images to average confidence over"));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg("temperature must be positive"));
    }
    let mut sum = 0.0;
    for x in images {
        sum += predict(x, temperature)?.max();
    }
    Ok(100.0 * sum / images.len() as f64)
}

/// Mean share of explanation mass inside the glyph and the mutual region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementSummary {
    pub method: String,
    pub images: usize,
    pub glyph_fraction: f64,
    pub mutual_fraction: f64,
}

/// Attention placement of the predicted-class explanation against the
/// ground-truth masks. Examples without masks are skipped.
pub fn attention_placement(method: &impl Explainer, name: &str, examples: &[&Example]) -> Result<PlacementSummary> {
    let (mut glyph, mut mutual, mut n) = (0.0, 0.0, 0usize);
    for ex in examples {
        let (Some(g), Some(m)) = (&ex.glyph_mask, &ex.mutual_mask) else {
            continue;
        };
        let class = method.predict(&ex.image)?.argmax();
        let e = method.explain(&ex.image, class)?;
        glyph += attention_fraction(&e, g)?;
        mutual += attention_fraction(&e, m)?;
        n += 1;
    }
    let mean = |v: f64| if n == 0 { 0.0 } else { v / n as f64 };
    Ok(PlacementSummary {
        method: name.to_string(),
        images: n,
        glyph_fraction: mean(glyph),
        mutual_fraction: mean(mutual),
    })
}
