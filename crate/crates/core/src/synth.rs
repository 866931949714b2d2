//! Synthetic classification data with known discriminative and shared
//! regions.
//!
//! Every image holds one class glyph (shape and color depend on the class)
//! and one gray ellipse that looks the same for every class, on a dark
//! noisy background. The pixel masks of both are kept so attention can be
//! scored against ground truth.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Triangle,
    Square,
    Disc,
}

const SHAPES: [Shape; 3] = [Shape::Triangle, Shape::Square, Shape::Disc];

const PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.25, 0.35, 0.95],
    [0.90, 0.80, 0.15],
    [0.80, 0.25, 0.80],
    [0.15, 0.80, 0.80],
];

pub const MAX_CLASSES: usize = 18;

const MUTUAL_GRAY: f64 = 0.55;

/// Shape and color of class `c`. Both cycle so that every class up to
/// [`MAX_CLASSES`] gets a distinct pair.
pub fn glyph_style(class: usize) -> (Shape, [f64; 3]) {
    (SHAPES[class % 3], PALETTE[(class + class / 6) % 6])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub background: f64,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 3,
            height: 32,
            width: 32,
            noise_sigma: 0.05,
            background: 0.1,
            train: 2000,
            test: 500,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Returns warnings for legal but degenerate settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(Error::arg(format!("classes must be in 1..={MAX_CLASSES}, got {}", self.classes)));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::arg("images must be at least 16x16"));
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&self.background) {
            return Err(Error::arg("noise must be nonnegative and background in [0, 1]"));
        }
        let mut warnings = Vec::new();
        if self.classes == 1 {
            warnings.push("a single class makes every label 0".to_string());
        }
        if self.train + self.test == 0 {
            warnings.push("both splits are empty".to_string());
        }
        Ok(warnings)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

fn glyph_contains(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        // Apex up, base at dy = r.
        Shape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

fn render_mask(h: usize, w: usize, inside: impl Fn(f64, f64) -> bool) -> Tensor {
    Tensor::from_fn(&[h, w], |i| {
        if inside(i[1] as f64 + 0.5, i[0] as f64 + 0.5) {
            1.0
        } else {
            0.0
        }
    })
}

fn sample_example(spec: &SynthSpec, label: usize, rng: &mut ChaCha8Rng, noise: &Normal<f64>) -> Result<Example> {
    let (h, w) = (spec.height, spec.width);
    let scale = h.min(w) as f64 / 32.0;
    let (shape, color) = glyph_style(label);
    for _ in 0..1000 {
        let r = rng.random_range(5.0..7.0) * scale;
        let gx = rng.random_range(r..w as f64 - r);
        let gy = rng.random_range(r..h as f64 - r);
        let (a, b) = (rng.random_range(5.0..8.0) * scale, rng.random_range(3.0..5.0) * scale);
        let ex = rng.random_range(a..w as f64 - a);
        let ey = rng.random_range(b..h as f64 - b);
        let glyph = render_mask(h, w, |x, y| glyph_contains(shape, x - gx, y - gy, r));
        // One pixel of clearance around the ellipse.
        let halo = render_mask(h, w, |x, y| ((x - ex) / (a + 1.0)).powi(2) + ((y - ey) / (b + 1.0)).powi(2) <= 1.0);
        if glyph.data().iter().zip(halo.data()).any(|(g, m)| *g > 0.0 && *m > 0.0) {
            continue;
        }
        let mutual = render_mask(h, w, |x, y| ((x - ex) / a).powi(2) + ((y - ey) / b).powi(2) <= 1.0);
        let mut pixels = Tensor::zeros(&[h, w, 3]);
        for p in 0..h * w {
            for ch in 0..3 {
                let base = if glyph.data()[p] > 0.0 {
                    color[ch]
                } else if mutual.data()[p] > 0.0 {
                    MUTUAL_GRAY
                } else {
                    spec.background
                };
                pixels.data_mut()[p * 3 + ch] = (base + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        return Ok(Example {
            image: Image::new(pixels)?,
            label,
            glyph_mask: Some(glyph),
            mutual_mask: Some(mutual),
        });
    }
    Err(Error::Invariant("could not place glyph and ellipse without overlap".into()))
}

/// Deterministic in `spec`. Labels cycle through the classes, so class
/// counts differ by at most one.
pub fn generate(spec: &SynthSpec) -> Result<(SynthDataset, Vec<String>)> {
    let warnings = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::arg(e.to_string()))?;
    let mut split = |n: usize| -> Result<Vec<Example>> {
        (0..n)
            .map(|i| sample_example(spec, i % spec.classes, &mut rng, &noise))
            .collect()
    };
    let train = split(spec.train)?;
    let test = split(spec.test)?;
    Ok((SynthDataset { train, test }, warnings))
}

/// One image of class `label`, drawn with its own `seed` instead of a
/// position in a split.
pub fn sample_one(spec: &SynthSpec, label: usize, seed: u64) -> Result<Example> {
    spec.validate()?;
    if label >= spec.classes {
        return Err(Error::arg(format!("class {label} out of range for {} classes", spec.classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::arg(e.to_string()))?;
    sample_example(spec, label, &mut rng, &noise)
}

pub const INDEX_FILE: &str = "index.json";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub split: String,
    pub index: usize,
    pub label: usize,
}

fn pack(examples: &[Example], h: usize, w: usize) -> Result<(Tensor, Tensor)> {
    let n = examples.len();
    let mut images = Vec::with_capacity(n * h * w * 3);
    let mut masks = Vec::with_capacity(n * h * w * 2);
    for e in examples {
        images.extend_from_slice(e.image.tensor().data());
        let (g, m) = match (&e.glyph_mask, &e.mutual_mask) {
            (Some(g), Some(m)) => (g, m),
            _ => return Err(Error::arg("synthetic examples must carry both masks")),
        };
        for (a, b) in g.data().iter().zip(m.data()) {
            masks.push(*a);
            masks.push(*b);
        }
    }
    Ok((Tensor::new(vec![n, h, w, 3], images)?, Tensor::new(vec![n, h, w, 2], masks)?))
}

/// Writes `{split}_images.cpt` (`[N, H, W, 3]`), `{split}_masks.cpt`
/// (`[N, H, W, 2]`, glyph then shared region), the label index and the
/// spec. Empty splits get no tensor files.
pub fn save_dataset(dir: &Path, spec: &SynthSpec, data: &SynthDataset) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut index = Vec::new();
    for (name, examples) in [("train", &data.train), ("test", &data.test)] {
        index.extend(examples.iter().enumerate().map(|(i, e)| IndexEntry {
            split: name.to_string(),
            index: i,
            label: e.label,
        }));
        if examples.is_empty() {
            continue;
        }
        let (images, masks) = pack(examples, spec.height, spec.width)?;
        write_tensor(dir.join(format!("{name}_images.cpt")), &images)?;
        write_tensor(dir.join(format!("{name}_masks.cpt")), &masks)?;
        written.push(format!("{name}_images.cpt"));
        written.push(format!("{name}_masks.cpt"));
    }
    fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)? + "\n")?;
    written.push(INDEX_FILE.to_string());
    written.push(SPEC_FILE.to_string());
    Ok(written)
}

fn unpack(images: &Tensor, masks: Option<&Tensor>, labels: &[usize]) -> Result<Vec<Example>> {
    let s = images.shape();
    if s.len() != 4 || s[3] != 3 || s[0] != labels.len() {
        return Err(Error::Format(format!("image tensor shape {s:?} does not match {} labels", labels.len())));
    }
    let (h, w) = (s[1], s[2]);
    if let Some(m) = masks {
        m.expect_shape(&[labels.len(), h, w, 2])?;
    }
    let stride = h * w * 3;
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let pixels = Tensor::new(vec![h, w, 3], images.data()[i * stride..][..stride].to_vec())?;
            let mut ex = Example::new(Image::new(pixels)?, label);
            if let Some(m) = masks {
                let chunk = &m.data()[i * h * w * 2..][..h * w * 2];
                let pick = |k: usize| Tensor::new(vec![h, w], chunk.iter().skip(k).step_by(2).copied().collect());
                ex.glyph_mask = Some(pick(0)?);
                ex.mutual_mask = Some(pick(1)?);
            }
            Ok(ex)
        })
        .collect()
}

/// Reads one split written by [`save_dataset`]. Masks are optional.
pub fn load_split(dir: &Path, split: &str) -> Result<Vec<Example>> {
    let index: Vec<IndexEntry> = serde_json::from_str(&fs::read_to_string(dir.join(INDEX_FILE))?)?;
    let mut entries: Vec<&IndexEntry> = index.iter().filter(|e| e.split == split).collect();
    entries.sort_by_key(|e| e.index);
    if entries.iter().enumerate().any(|(i, e)| e.index != i) {
        return Err(Error::Format(format!("index for split {split} is not contiguous")));
    }
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let labels: Vec<usize> = entries.iter().map(|e| e.label).collect();
    let images = read_tensor(dir.join(format!("{split}_images.cpt")))?;
    let mask_path = dir.join(format!("{split}_masks.cpt"));
    let masks = if mask_path.exists() {
        Some(read_tensor(mask_path)?)
    } else {
        None
    };
    unpack(&images, masks.as_ref(), &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(train: usize, test: usize) -> SynthSpec {
        SynthSpec {
            train,
            test,
            seed: 7,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn styles_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..MAX_CLASSES {
            let (s, col) = glyph_style(c);
            assert!(seen.insert(format!("{s:?}{col:?}")), "class {c} repeats a style");
        }
    }

    #[test]
    fn masks_are_disjoint_and_nonempty() {
        let (data, warnings) = generate(&small(30, 0)).unwrap();
        assert!(warnings.is_empty());
        for e in &data.train {
            let g = e.glyph_mask.as_ref().unwrap();
            let m = e.mutual_mask.as_ref().unwrap();
            assert!(g.sum() > 10.0 && m.sum() > 10.0);
            assert!(g.data().iter().zip(m.data()).all(|(a, b)| a * b == 0.0));
        }
    }

    #[test]
    fn labels_balanced_and_deterministic() {
        let spec = small(30, 9);
        let (a, _) = generate(&spec).unwrap();
        let (b, _) = generate(&spec).unwrap();
        assert_eq!(a, b);
        for c in 0..3 {
            assert_eq!(a.train.iter().filter(|e| e.label == c).count(), 10);
            assert_eq!(a.test.iter().filter(|e| e.label == c).count(), 3);
        }
        let (other, _) = generate(&SynthSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn single_class_warns() {
        let (data, warnings) = generate(&SynthSpec {
            classes: 1,
            ..small(4, 2)
        })
        .unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(data.train.iter().chain(&data.test).all(|e| e.label == 0));
        assert!(generate(&SynthSpec { classes: 0, ..small(1, 1) }).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let spec = small(6, 3);
        let (data, _) = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &spec, &data).unwrap();
        assert_eq!(load_split(dir.path(), "train").unwrap(), data.train);
        assert_eq!(load_split(dir.path(), "test").unwrap(), data.test);
    }

    #[test]
    fn single_samples() {
        let spec = SynthSpec::default();
        let a = sample_one(&spec, 2, 11).unwrap();
        assert_eq!(a.label, 2);
        assert_eq!(a, sample_one(&spec, 2, 11).unwrap());
        assert_ne!(a, sample_one(&spec, 2, 12).unwrap());
        assert!(sample_one(&spec, 3, 0).is_err());
    }
}
