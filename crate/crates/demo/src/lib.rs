//! Browser demo: draw a synthetic image, look at its explanation maps, and
//! split the gap between two class probabilities into region groups.
//!
//! The model is the desk-scale post-fitted checkpoint, embedded at build
//! time from `assets/`.

use cape_core::backbone::Image;
use cape_core::heads::{class_difference_map, thresholded_contribution_summary, ExplanationKind};
use cape_core::model::{Analysis, Model};
use cape_core::render::Rgb;
use cape_core::synth::{self, SynthSpec};
use cape_core::{Error, Result};
use serde_json::json;
use wasm_bindgen::prelude::*;

macro_rules! assets {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_bytes!(concat!("../assets/", $name)) as &[u8])),*]
    };
}

const CHECKPOINT: &[(&str, &[u8])] = assets![
    "model.json",
    "backbone.0.weight.cpt",
    "backbone.0.bias.cpt",
    "backbone.1.weight.cpt",
    "backbone.1.bias.cpt",
    "backbone.2.weight.cpt",
    "backbone.2.bias.cpt",
    "vanilla.weight.cpt",
    "vanilla.bias.cpt",
    "cape.weight.cpt",
    "cape.bias.cpt",
    "cape.log_temperature.cpt",
];

const OVERLAY_ALPHA: f64 = 0.55;

pub fn embedded_model() -> Result<Model> {
    Model::load_with(|file| {
        CHECKPOINT
            .iter()
            .find(|(name, _)| *name == file)
            .map(|(_, bytes)| bytes.to_vec())
            .ok_or_else(|| Error::Format(format!("no embedded file {file}")))
    })
}

fn rgba(img: &Rgb) -> Vec<u8> {
    img.data.chunks(3).flat_map(|px| [px[0], px[1], px[2], 255]).collect()
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Classes by decreasing probability.
fn ranked(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx
}

/// Plain-Rust core of the demo, testable without a browser.
pub struct Session {
    model: Model,
    image: Image,
    label: usize,
    analysis: Analysis,
}

impl Session {
    pub fn new(class: usize, seed: u64) -> Result<Self> {
        let model = embedded_model()?;
        let (image, label, analysis) = Self::draw(&model, class, seed)?;
        Ok(Session { model, image, label, analysis })
    }

    fn draw(model: &Model, class: usize, seed: u64) -> Result<(Image, usize, Analysis)> {
        let (h, w) = model.input_size();
        let spec = SynthSpec {
            classes: model.classes(),
            height: h,
            width: w,
            ..SynthSpec::default()
        };
        let ex = synth::sample_one(&spec, class, seed)?;
        let analysis = model.analyze(&ex.image)?;
        Ok((ex.image, ex.label, analysis))
    }

    pub fn resample(&mut self, class: usize, seed: u64) -> Result<()> {
        (self.image, self.label, self.analysis) = Self::draw(&self.model, class, seed)?;
        Ok(())
    }

    pub fn predictions(&self) -> serde_json::Value {
        json!({
            "label": self.label,
            "vanilla": self.analysis.vanilla_probs.data(),
            "cape": self.analysis.cape_probs.data(),
            "temperature": self.model.cape.temperature(),
        })
    }

    /// Overlay for the class at `rank` (0 = top) under `kind`, with the
    /// class index and, for CAPE, how much probability the kept regions
    /// carry.
    pub fn explain(&self, kind: ExplanationKind, rank: usize, threshold: f64) -> Result<(Rgb, serde_json::Value)> {
        let probs = self.analysis.probs_for(kind).data();
        let class = *ranked(probs)
            .get(rank)
            .ok_or_else(|| Error::InvalidArgument(format!("rank {rank} out of range")))?;
        let map = self.analysis.explain(kind, class)?;
        let img = Rgb::overlay(&self.image, &map.values, OVERLAY_ALPHA, threshold)?;
        let mut info = json!({ "class": class, "probability": probs[class] });
        if kind == ExplanationKind::Cape {
            let s = thresholded_contribution_summary(&self.analysis.contributions, class, threshold)?;
            info["kept_regions"] = json!(s.kept.len());
            info["regions"] = json!(map.raw.len());
            info["kept_mass"] = json!(s.kept_mass);
            info["retained_ratio"] = json!(s.retained_ratio);
        }
        Ok((img, info))
    }

    /// Signed difference map `P[c1] - P[c2]` at region resolution and its
    /// group accounting.
    pub fn diff(&self, c1: usize, c2: usize, groups: usize) -> Result<(Rgb, serde_json::Value)> {
        let d = class_difference_map(&self.analysis.contributions, c1, c2)?;
        let acc = d.accounting(groups);
        let info = json!({
            "total": acc.total,
            "positive": acc.positive_sums,
            "negative": acc.negative_sums,
            "residual": acc.residual,
        });
        Ok((Rgb::signed(&d.map)?, info))
    }

    pub fn image(&self) -> Rgb {
        Rgb::from_image(&self.image)
    }
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
    info: String,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Result<Demo, JsError> {
        Ok(Demo {
            session: Session::new(0, 0).map_err(js)?,
            info: String::new(),
        })
    }

    pub fn classes(&self) -> usize {
        self.session.model.classes()
    }

    pub fn size(&self) -> usize {
        self.session.model.input_size().0
    }

    /// Draws a new image; returns its RGBA pixels.
    pub fn sample(&mut self, class: usize, seed: u64) -> Result<Vec<u8>, JsError> {
        self.session.resample(class, seed).map_err(js)?;
        Ok(rgba(&self.session.image()))
    }

    /// JSON with the label and both heads' probabilities.
    pub fn predictions(&self) -> String {
        self.session.predictions().to_string()
    }

    /// RGBA overlay; details via `last_info`.
    pub fn explain(&mut self, kind: &str, rank: usize, threshold: f64) -> Result<Vec<u8>, JsError> {
        let kind: ExplanationKind = kind.parse().map_err(js)?;
        let (img, info) = self.session.explain(kind, rank, threshold).map_err(js)?;
        self.info = info.to_string();
        Ok(rgba(&img))
    }

    /// RGBA signed map at region resolution; accounting via `last_info`.
    pub fn diff(&mut self, c1: usize, c2: usize) -> Result<Vec<u8>, JsError> {
        let (img, info) = self.session.diff(c1, c2, 3).map_err(js)?;
        self.info = info.to_string();
        Ok(rgba(&img))
    }

    pub fn region_size(&self) -> usize {
        self.session.analysis.contributions.dims()[0]
    }

    pub fn last_info(&self) -> String {
        self.info.clone()
    }
}
