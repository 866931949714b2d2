//! Dataset-level evaluation: accuracy of the head variants, explanation
//! metrics, attention placement and prediction statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::heads::{activation_maps, cape_forward, naive_aggregate, vanilla_forward, CapeHead, ExplanationKind};
use crate::metrics::{
    attention_placement, evaluate_method, mean_confidence, prediction_agreement, MetricsReport, ModelMethod,
    PlacementSummary,
};
use crate::model::Model;

/// How the region-level head is parameterised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain mean of the per-region class distributions of the vanilla head.
    Naive,
    /// CAPE aggregation reusing the vanilla head's parameters.
    OffTheShelf,
    /// CAPE aggregation with the trained CAPE head.
    Bootstrap,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Naive, Variant::OffTheShelf, Variant::Bootstrap];

    pub fn slug(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::OffTheShelf => "off-the-shelf",
            Variant::Bootstrap => "bootstrap",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == s)
            .ok_or_else(|| Error::arg(format!("unknown variant {s:?} (expected naive, off-the-shelf or bootstrap)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    /// Percent.
    pub accuracy: f64,
}

/// Top-1 accuracy (percent) of the vanilla classifier and each variant.
pub fn accuracy_table(model: &Model, examples: &[&Example], variants: &[Variant]) -> Result<Vec<AccuracyRow>> {
    if examples.is_empty() {
        return Err(Error::arg("no examples to evaluate"));
    }
    let off_the_shelf = CapeHead::from_vanilla(&model.vanilla);
    let mut correct = vec![0usize; 1 + variants.len()];
    for ex in examples {
        let f = model.features(&ex.image)?;
        correct[0] += (vanilla_forward(&f, &model.vanilla, 1.0)?.argmax() == ex.label) as usize;
        for (i, v) in variants.iter().enumerate() {
            let p = match v {
                Variant::Naive => naive_aggregate(&activation_maps(&f, &model.vanilla)?),
                Variant::OffTheShelf => cape_forward(&activation_maps(&f, &off_the_shelf)?, 1.0)?,
                Variant::Bootstrap => cape_forward(&activation_maps(&f, &model.cape)?, 1.0)?,
            };
            correct[i + 1] += (p.argmax() == ex.label) as usize;
        }
    }
    let names = std::iter::once("vanilla".to_string()).chain(variants.iter().map(|v| v.slug().to_string()));
    Ok(names
        .zip(correct)
        .map(|(model, c)| AccuracyRow {
            model,
            accuracy: 100.0 * c as f64 / examples.len() as f64,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionStats {
    /// Percent of images where CAPE and vanilla pick the same class.
    pub agreement: f64,
    /// Mean top-1 probability (percent) at unit temperature.
    pub vanilla_confidence: f64,
    pub cape_confidence: f64,
    /// Same at the training temperatures (teacher `T`, learned `T'`).
    pub vanilla_confidence_at_t: f64,
    pub cape_confidence_at_t: f64,
}

pub fn prediction_stats(model: &Model, images: &[&Image]) -> Result<PredictionStats> {
    let vanilla = |x: &Image, t: f64| vanilla_forward(&model.features(x)?, &model.vanilla, t);
    let cape = |x: &Image, t: f64| cape_forward(&activation_maps(&model.features(x)?, &model.cape)?, t);
    Ok(PredictionStats {
        agreement: prediction_agreement(|x| vanilla(x, 1.0), |x| cape(x, 1.0), images)?,
        vanilla_confidence: mean_confidence(vanilla, images, 1.0)?,
        cape_confidence: mean_confidence(cape, images, 1.0)?,
        vanilla_confidence_at_t: mean_confidence(vanilla, images, model.vanilla.temperature)?,
        cape_confidence_at_t: mean_confidence(cape, images, model.cape.temperature())?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub images: usize,
    pub accuracy: Vec<AccuracyRow>,
    pub metrics: MetricsReport,
    pub placement: Vec<PlacementSummary>,
    pub predictions: PredictionStats,
}

pub fn evaluate(
    model: &Model,
    examples: &[&Example],
    methods: &[ExplanationKind],
    variants: &[Variant],
    dataset: &str,
) -> Result<EvaluationReport> {
    if methods.is_empty() {
        return Err(Error::arg("no explanation methods selected"));
    }
    let images: Vec<&Image> = examples.iter().map(|e| &e.image).collect();
    let mut summaries = Vec::with_capacity(methods.len());
    let mut placement = Vec::with_capacity(methods.len());
    for &kind in methods {
        let method = ModelMethod { model, kind };
        summaries.push(evaluate_method(&method, kind.label(), &images)?.0);
        placement.push(attention_placement(&method, kind.label(), examples)?);
    }
    Ok(EvaluationReport {
        dataset: dataset.to_string(),
        images: examples.len(),
        accuracy: accuracy_table(model, examples, variants)?,
        metrics: MetricsReport::new(dataset, summaries)?,
        placement,
        predictions: prediction_stats(model, &images)?,
    })
}

pub fn accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from("model,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{:.2}\n", r.model, r.accuracy));
    }
    out
}

pub fn placement_csv(rows: &[PlacementSummary]) -> String {
    let mut out = String::from("method,images,glyph_fraction,mutual_fraction\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.method, r.images, r.glyph_fraction, r.mutual_fraction));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Architecture, ConvSpec};
    use crate::synth::{generate, SynthSpec};

    fn tiny() -> (Model, Vec<Example>) {
        let arch = Architecture {
            input_height: 16,
            input_width: 16,
            layers: vec![ConvSpec { in_channels: 3, out_channels: 4, stride: 2 }],
        };
        let (data, _) = generate(&SynthSpec {
            height: 16,
            width: 16,
            train: 0,
            test: 6,
            ..SynthSpec::default()
        })
        .unwrap();
        (Model::init(&arch, 3, 2.0, 0).unwrap(), data.test)
    }

    #[test]
    fn fresh_model_variants_coincide() {
        let (model, examples) = tiny();
        let refs: Vec<&Example> = examples.iter().collect();
        let rows = accuracy_table(&model, &refs, &Variant::ALL).unwrap();
        assert_eq!(rows.len(), 4);
        // A fresh CAPE head is a copy of the vanilla head.
        assert_eq!(rows[2].accuracy, rows[3].accuracy);
        let report = evaluate(&model, &refs, &ExplanationKind::ALL, &Variant::ALL, "tiny").unwrap();
        assert_eq!(report.metrics.rows.len(), 3);
        assert_eq!(report.placement[0].images, 6);
        assert!((0.0..=100.0).contains(&report.predictions.agreement));
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.slug().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
