//! The full classifier: backbone, vanilla head and CAPE head, plus the
//! on-disk checkpoint layout (one `CPT1` file per tensor and a JSON
//! manifest).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_features, Architecture, BackboneParams, ConvLayer, Image};
use crate::error::{Error, Result};
use crate::heads::{
    self, activation_maps, cam_explanation, cape_explanation, mu_cape_explanation, vanilla_forward,
    voxel_contributions, ActivationMaps, CapeHead, DecompositionForm, ExplanationKind, ExplanationMap,
    VanillaHead, VoxelContribution,
};
use crate::io::{decode_tensor, write_tensor};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "model.json";
const FORMAT: &str = "cape-model-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub vanilla: VanillaHead,
    pub cape: CapeHead,
    /// Set once the vanilla classifier has been trained; post-fitting needs it.
    pub vanilla_pretrained: bool,
}

impl Model {
    /// Fresh trainable model; the CAPE head starts as a copy of the vanilla
    /// head.
    pub fn init(arch: &Architecture, classes: usize, teacher_temperature: f64, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::arg("model needs at least one class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = BackboneParams::init(arch, &mut rng)?;
        let k = arch.feature_channels();
        let a = (6.0 / (k + classes) as f64).sqrt();
        let weight = Tensor::from_fn(&[k, classes], |_| rng.random_range(-a..a));
        let vanilla = VanillaHead::new(weight, Tensor::zeros(&[classes]), teacher_temperature)?;
        let cape = CapeHead::from_vanilla(&vanilla);
        Ok(Model {
            backbone,
            vanilla,
            cape,
            vanilla_pretrained: false,
        })
    }

    pub fn classes(&self) -> usize {
        self.vanilla.bias.len()
    }

    pub fn arch(&self) -> &Architecture {
        &self.backbone.arch
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.arch().input_height, self.arch().input_width)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let k = self.arch().feature_channels();
        let c = self.classes();
        for (name, w, b) in [
            ("vanilla", &self.vanilla.weight, &self.vanilla.bias),
            ("cape", &self.cape.weight, &self.cape.bias),
        ] {
            w.expect_shape(&[k, c])
                .and_then(|_| b.expect_shape(&[c]))
                .map_err(|e| Error::arg(format!("{name} head: {e}")))?;
        }
        if !(self.vanilla.temperature > 0.0) || !self.cape.log_temperature.is_finite() {
            return Err(Error::arg("head temperatures must be positive and finite"));
        }
        Ok(())
    }

    pub fn features(&self, x: &Image) -> Result<Tensor> {
        backbone_features(x, &self.backbone)
    }

    /// Vanilla prediction at unit temperature.
    pub fn predict_vanilla(&self, x: &Image) -> Result<Tensor> {
        vanilla_forward(&self.features(x)?, &self.vanilla, 1.0)
    }

    /// CAPE prediction at unit temperature.
    pub fn predict_cape(&self, x: &Image) -> Result<Tensor> {
        Ok(self.cape_analysis(x)?.contributions.class_totals())
    }

    /// Everything needed to explain one image.
    pub fn analyze(&self, x: &Image) -> Result<Analysis> {
        let features = self.features(x)?;
        let vanilla_maps = activation_maps(&features, &self.vanilla)?;
        let cape_maps = activation_maps(&features, &self.cape)?;
        let contributions = voxel_contributions(&cape_maps, 1.0, DecompositionForm::Factored)?;
        let vanilla_probs = vanilla_forward(&features, &self.vanilla, 1.0)?;
        Ok(Analysis {
            image_size: (x.height(), x.width()),
            vanilla_probs,
            cape_probs: contributions.class_totals(),
            vanilla_maps,
            cape_maps,
            contributions,
        })
    }

    fn cape_analysis(&self, x: &Image) -> Result<CapeOnly> {
        let features = self.features(x)?;
        let maps = activation_maps(&features, &self.cape)?;
        let contributions = voxel_contributions(&maps, 1.0, DecompositionForm::Factored)?;
        Ok(CapeOnly { maps, contributions })
    }

    /// The class distribution that explanation method `kind` explains: the
    /// vanilla head for CAM, the CAPE head otherwise.
    pub fn predict_for(&self, kind: ExplanationKind, x: &Image) -> Result<Tensor> {
        match kind {
            ExplanationKind::Cam => self.predict_vanilla(x),
            ExplanationKind::Cape | ExplanationKind::MuCape => self.predict_cape(x),
        }
    }

    pub fn explain(&self, kind: ExplanationKind, x: &Image, class: usize) -> Result<ExplanationMap> {
        let target = (x.height(), x.width());
        match kind {
            ExplanationKind::Cam => {
                let maps = activation_maps(&self.features(x)?, &self.vanilla)?;
                cam_explanation(&maps, class, target)
            }
            ExplanationKind::Cape => {
                let a = self.cape_analysis(x)?;
                cape_explanation(&a.contributions, class, target)
            }
            ExplanationKind::MuCape => {
                let a = self.cape_analysis(x)?;
                mu_cape_explanation(&a.maps, class, target)
            }
        }
    }

    /// Scalar parameter addressed by `id`.
    pub fn param(&self, id: ParamId) -> f64 {
        match id {
            ParamId::ConvWeight { layer, index } => self.backbone.layers[layer].weight.data()[index],
            ParamId::ConvBias { layer, index } => self.backbone.layers[layer].bias.data()[index],
            ParamId::VanillaWeight(i) => self.vanilla.weight.data()[i],
            ParamId::VanillaBias(i) => self.vanilla.bias.data()[i],
            ParamId::CapeWeight(i) => self.cape.weight.data()[i],
            ParamId::CapeBias(i) => self.cape.bias.data()[i],
            ParamId::CapeLogTemperature => self.cape.log_temperature,
        }
    }

    pub fn set_param(&mut self, id: ParamId, value: f64) {
        match id {
            ParamId::ConvWeight { layer, index } => self.backbone.layers[layer].weight.data_mut()[index] = value,
            ParamId::ConvBias { layer, index } => self.backbone.layers[layer].bias.data_mut()[index] = value,
            ParamId::VanillaWeight(i) => self.vanilla.weight.data_mut()[i] = value,
            ParamId::VanillaBias(i) => self.vanilla.bias.data_mut()[i] = value,
            ParamId::CapeWeight(i) => self.cape.weight.data_mut()[i] = value,
            ParamId::CapeBias(i) => self.cape.bias.data_mut()[i] = value,
            ParamId::CapeLogTemperature => self.cape.log_temperature = value,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        let mut put = |name: String, t: &Tensor| -> Result<()> {
            let file = format!("{name}.cpt");
            write_tensor(dir.join(&file), t)?;
            entries.push(TensorEntry {
                name,
                file,
                shape: t.shape().to_vec(),
            });
            Ok(())
        };
        for (l, layer) in self.backbone.layers.iter().enumerate() {
            put(format!("backbone.{l}.weight"), &layer.weight)?;
            put(format!("backbone.{l}.bias"), &layer.bias)?;
        }
        put("vanilla.weight".into(), &self.vanilla.weight)?;
        put("vanilla.bias".into(), &self.vanilla.bias)?;
        put("cape.weight".into(), &self.cape.weight)?;
        put("cape.bias".into(), &self.cape.bias)?;
        put("cape.log_temperature".into(), &Tensor::from_slice(&[self.cape.log_temperature]))?;
        let manifest = ModelManifest {
            format: FORMAT.into(),
            architecture: self.backbone.arch.clone(),
            classes: self.classes(),
            teacher_temperature: self.vanilla.temperature,
            backbone_trainable: self.backbone.trainable,
            vanilla_pretrained: self.vanilla_pretrained,
            tensors: entries,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_with(|file| Ok(fs::read(dir.join(file))?))
    }

    /// Loads a checkpoint whose files come from `read(file_name)`, e.g.
    /// bytes embedded in a binary.
    pub fn load_with(read: impl Fn(&str) -> Result<Vec<u8>>) -> Result<Self> {
        let manifest: ModelManifest = serde_json::from_slice(&read(MANIFEST_FILE)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unsupported model format '{}'", manifest.format)));
        }
        let lookup = |name: &str| -> Result<Tensor> {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor '{name}'")))?;
            let t = decode_tensor(&read(&entry.file)?)?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?}, manifest says {:?}",
                    t.shape(),
                    entry.shape
                )));
            }
            Ok(t)
        };
        let arch = manifest.architecture.clone();
        arch.validate()?;
        let layers = (0..arch.layers.len())
            .map(|l| {
                Ok(ConvLayer {
                    weight: lookup(&format!("backbone.{l}.weight"))?,
                    bias: lookup(&format!("backbone.{l}.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let log_t = lookup("cape.log_temperature")?;
        let model = Model {
            backbone: BackboneParams {
                arch,
                layers,
                trainable: manifest.backbone_trainable,
            },
            vanilla: VanillaHead::new(
                lookup("vanilla.weight")?,
                lookup("vanilla.bias")?,
                manifest.teacher_temperature,
            )?,
            cape: CapeHead {
                weight: lookup("cape.weight")?,
                bias: lookup("cape.bias")?,
                log_temperature: log_t.data()[0],
            },
            vanilla_pretrained: manifest.vanilla_pretrained,
        };
        model.validate()?;
        if model.classes() != manifest.classes {
            return Err(Error::Format("class count disagrees with head shapes".into()));
        }
        Ok(model)
    }
}

/// Per-image intermediate results shared by the explanation commands.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub image_size: (usize, usize),
    pub vanilla_probs: Tensor,
    pub cape_probs: Tensor,
    pub vanilla_maps: ActivationMaps,
    pub cape_maps: ActivationMaps,
    pub contributions: VoxelContribution,
}

impl Analysis {
    pub fn explain(&self, kind: ExplanationKind, class: usize) -> Result<ExplanationMap> {
        match kind {
            ExplanationKind::Cam => cam_explanation(&self.vanilla_maps, class, self.image_size),
            ExplanationKind::Cape => cape_explanation(&self.contributions, class, self.image_size),
            ExplanationKind::MuCape => mu_cape_explanation(&self.cape_maps, class, self.image_size),
        }
    }

    pub fn probs_for(&self, kind: ExplanationKind) -> &Tensor {
        match kind {
            ExplanationKind::Cam => &self.vanilla_probs,
            _ => &self.cape_probs,
        }
    }

    /// Naive-average prediction from the vanilla head's maps.
    pub fn naive_probs(&self) -> Tensor {
        heads::naive_aggregate(&self.vanilla_maps)
    }
}

struct CapeOnly {
    maps: ActivationMaps,
    contributions: VoxelContribution,
}

/// Address of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamId {
    ConvWeight { layer: usize, index: usize },
    ConvBias { layer: usize, index: usize },
    VanillaWeight(usize),
    VanillaBias(usize),
    CapeWeight(usize),
    CapeBias(usize),
    CapeLogTemperature,
}

impl std::fmt::Display for ParamId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamId::ConvWeight { layer, index } => write!(f, "backbone.{layer}.weight[{index}]"),
            ParamId::ConvBias { layer, index } => write!(f, "backbone.{layer}.bias[{index}]"),
            ParamId::VanillaWeight(i) => write!(f, "vanilla.weight[{i}]"),
            ParamId::VanillaBias(i) => write!(f, "vanilla.bias[{i}]"),
            ParamId::CapeWeight(i) => write!(f, "cape.weight[{i}]"),
            ParamId::CapeBias(i) => write!(f, "cape.bias[{i}]"),
            ParamId::CapeLogTemperature => write!(f, "cape.log_temperature"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format: String,
    architecture: Architecture,
    classes: usize,
    teacher_temperature: f64,
    backbone_trainable: bool,
    vanilla_pretrained: bool,
    tensors: Vec<TensorEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::init(&Architecture::default(), 3, 2.0, 11).unwrap();
        model.cape.log_temperature = 0.3;
        model.vanilla_pretrained = true;
        model.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn load_rejects_tampered_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::init(&Architecture::default(), 3, 2.0, 1).unwrap();
        model.save(dir.path()).unwrap();
        write_tensor(dir.path().join("vanilla.bias.cpt"), &Tensor::zeros(&[4])).unwrap();
        assert!(Model::load(dir.path()).is_err());
    }

    #[test]
    fn cape_head_starts_from_vanilla() {
        let model = Model::init(&Architecture::default(), 4, 2.0, 5).unwrap();
        assert_eq!(model.cape.weight, model.vanilla.weight);
        assert_eq!(model.cape.temperature(), 1.0);
    }
}
