use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cape_core::backbone::Image;
use cape_core::data::Example;
use cape_core::evaluation::{self, accuracy_csv, placement_csv, Variant};
use cape_core::heads::{class_difference_map, thresholded_contribution_summary, ExplanationKind};
use cape_core::io::{file_sha256, list_files, read_tensor, tree_sha256, write_tensor};
use cape_core::manifest::{RunManifest, MANIFEST_NAME};
use cape_core::metrics::MetricsReport;
use cape_core::model::Model;
use cape_core::render::{gallery, Rgb};
use cape_core::synth::{self, SynthSpec};
use cape_core::tensor::rectify;
use cape_core::training::{self, epoch_log_csv, TrainMode};
use cape_core::Error;
use serde_json::json;

use crate::config::{self, TrainFile};
use crate::{DiffArgs, EvaluateArgs, ExplainArgs, ImageSource, ReportArgs, SynthArgs, TrainArgs};

const CHECKPOINT_DIR: &str = "checkpoint";
const OVERLAY_ALPHA: f64 = 0.5;
/// Allowed drift between summed region values and the class probability.
const ACCOUNTING_TOLERANCE: f64 = 1e-9;

fn arg_error(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidArgument(msg.into()).into()
}

fn invariant(msg: impl Into<String>) -> anyhow::Error {
    Error::Invariant(msg.into()).into()
}

/// Writes a manifest listing every file under `out` except itself.
fn finish(out: &Path, command: &str, config: &serde_json::Value, seed: u64) -> Result<()> {
    let mut manifest = RunManifest::new(command, config, seed)?;
    let files: Vec<String> = list_files(out)?
        .into_iter()
        .map(|p| p.to_string_lossy().replace('\\', "/"))
        .filter(|p| p != MANIFEST_NAME)
        .collect();
    manifest.add_artifacts(out, &files)?;
    manifest.write(out)?;
    Ok(())
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: PathBuf, value: &impl serde::Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn tree_digest(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(std::io::Error::new(std::io::ErrorKind::NotFound, format!("{} does not exist", path.display())).into());
    }
    if path.is_dir() {
        Ok(tree_sha256(path)?)
    } else {
        Ok(file_sha256(path)?)
    }
}

pub fn synth_data(a: SynthArgs) -> Result<()> {
    let (mut spec, raw) = config::load::<SynthSpec>(a.config.as_deref())?;
    if let Some(v) = a.classes {
        spec.classes = v;
    }
    if let Some(v) = a.size {
        spec.height = v;
        spec.width = v;
    }
    if let Some(v) = a.train {
        spec.train = v;
    }
    if let Some(v) = a.test {
        spec.test = v;
    }
    if let Some(v) = a.noise {
        spec.noise_sigma = v;
    }
    spec.seed = config::resolve_seed(a.seed, config::file_seed(&raw, "/seed"))?;
    let (data, warnings) = synth::generate(&spec)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    synth::save_dataset(&a.out, &spec, &data)?;
    finish(&a.out, "synth-data", &serde_json::to_value(&spec)?, spec.seed)?;
    println!(
        "wrote {} train and {} test images ({} classes) to {}",
        data.train.len(),
        data.test.len(),
        spec.classes,
        a.out.display()
    );
    Ok(())
}

fn dataset_classes(dir: &Path, examples: &[Example]) -> Result<usize> {
    let spec_path = dir.join(synth::SPEC_FILE);
    if spec_path.exists() {
        let spec: SynthSpec = serde_json::from_str(&fs::read_to_string(&spec_path)?).map_err(Error::from)?;
        return Ok(spec.classes);
    }
    Ok(examples.iter().map(|e| e.label + 1).max().unwrap_or(1))
}

pub fn train(a: TrainArgs) -> Result<()> {
    let (mut file, raw) = config::load::<TrainFile>(a.config.as_deref())?;
    let t = &mut file.training;
    if let Some(m) = &a.mode {
        t.mode = match m.as_str() {
            "ts" => TrainMode::FromScratch,
            "pf" => TrainMode::PostFit,
            other => return Err(arg_error(format!("unknown mode {other:?} (expected ts or pf)"))),
        };
    }
    if a.epochs.is_some() {
        t.epochs = a.epochs;
    }
    if a.lr.is_some() {
        t.learning_rate = a.lr;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if a.alpha.is_some() {
        t.alpha = a.alpha;
    }
    if a.beta.is_some() {
        t.beta = a.beta;
    }
    if let Some(v) = a.teacher_temperature {
        t.teacher_temperature = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    t.selective_kld |= a.selective_kld;
    t.ce_on_cape |= a.ce_on_cape;
    t.seed = config::resolve_seed(a.seed, config::file_seed(&raw, "/training/seed"))?;
    t.validate()?;

    let train_set = synth::load_split(&a.data, "train")?;
    let val_set = synth::load_split(&a.data, "test")?;
    let model = match (t.mode, &a.pretrained) {
        (TrainMode::PostFit, None) => return Err(arg_error("post-fitting needs --pretrained <checkpoint>")),
        (_, Some(p)) => Model::load(p)?,
        (TrainMode::FromScratch, None) => {
            let classes = dataset_classes(&a.data, &train_set)?;
            Model::init(&file.architecture, classes, t.teacher_temperature, t.seed)?
        }
    };
    let outcome = training::train(model, &train_set, &val_set, &file.training)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(bad) = outcome.log.iter().find(|l| !(l.ce.is_finite() && l.kld.is_finite())) {
        return Err(invariant(format!("non-finite loss in epoch {}", bad.epoch)));
    }
    fs::create_dir_all(&a.out)?;
    outcome.model.save(&a.out.join(CHECKPOINT_DIR))?;
    write_text(a.out.join("epoch_log.csv"), &epoch_log_csv(&outcome.log))?;
    write_json(a.out.join("train_config.json"), &file)?;
    let pretrained = a.pretrained.as_deref().map(tree_digest).transpose()?;
    let cfg = json!({
        "config": file,
        "data_sha256": tree_digest(&a.data)?,
        "pretrained_sha256": pretrained,
    });
    finish(&a.out, "train", &cfg, file.training.seed)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "epoch {}: vanilla train {:.1}% val {}, cape train {:.1}% val {}",
            last.epoch,
            100.0 * last.vanilla_train_acc,
            last.vanilla_val_acc.map_or("-".into(), |v| format!("{:.1}%", 100.0 * v)),
            100.0 * last.cape_train_acc,
            last.cape_val_acc.map_or("-".into(), |v| format!("{:.1}%", 100.0 * v)),
        );
    }
    println!("checkpoint written to {}", a.out.join(CHECKPOINT_DIR).display());
    Ok(())
}

/// Loads the image and, for dataset images, its label. Also returns a
/// digest identifying the input.
fn load_image(src: &ImageSource) -> Result<(Image, Option<usize>, serde_json::Value)> {
    match (&src.image, &src.data, src.index) {
        (Some(path), _, _) => {
            let image = Image::new(read_tensor(path)?)?;
            Ok((image, None, json!({ "image_sha256": file_sha256(path)? })))
        }
        (None, Some(dir), Some(index)) => {
            let mut split = synth::load_split(dir, &src.split)?;
            if index >= split.len() {
                return Err(arg_error(format!("index {index} out of range: split {} has {} images", src.split, split.len())));
            }
            let ex = split.swap_remove(index);
            Ok((
                ex.image,
                Some(ex.label),
                json!({ "data_sha256": tree_digest(dir)?, "split": src.split, "index": index }),
            ))
        }
        _ => Err(arg_error("give either --image <file> or --data <dir> --index <n>")),
    }
}

fn check_input_size(model: &Model, image: &Image) -> Result<()> {
    if (image.height(), image.width()) != model.input_size() {
        return Err(Error::ShapeMismatch {
            expected: vec![model.input_size().0, model.input_size().1, 3],
            actual: vec![image.height(), image.width(), 3],
        }
        .into());
    }
    Ok(())
}

fn parse_kinds(names: &[String]) -> Result<Vec<ExplanationKind>> {
    let kinds = names
        .iter()
        .map(|s| s.trim().parse::<ExplanationKind>())
        .collect::<cape_core::Result<Vec<_>>>()?;
    if kinds.is_empty() {
        return Err(arg_error("no explanation kinds given"));
    }
    Ok(kinds)
}

/// Class indices by decreasing probability, lower index first on ties.
fn ranked(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx
}

pub fn explain(a: ExplainArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let (image, label, input) = load_image(&a.source)?;
    check_input_size(&model, &image)?;
    let kinds = parse_kinds(&a.kinds)?;
    if a.topk == 0 || a.topk > model.classes() {
        return Err(arg_error(format!("--topk must be in 1..={}", model.classes())));
    }
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return Err(arg_error("--threshold must be in (0, 1)"));
    }
    fs::create_dir_all(&a.out)?;
    let analysis = model.analyze(&image)?;
    let mut entries = Vec::new();
    for &kind in &kinds {
        let probs = analysis.probs_for(kind).data().to_vec();
        for (rank, &class) in ranked(&probs).iter().take(a.topk).enumerate() {
            let map = analysis.explain(kind, class)?;
            let stem = format!("{}_top{}", kind.slug(), rank + 1);
            fs::write(a.out.join(format!("{stem}_heatmap.ppm")), Rgb::heatmap(&map.values)?.encode_ppm())?;
            fs::write(
                a.out.join(format!("{stem}_overlay.ppm")),
                Rgb::overlay(&image, &map.values, OVERLAY_ALPHA, a.threshold)?.encode_ppm(),
            )?;
            write_tensor(a.out.join(format!("{stem}_values.cpt")), &map.values)?;
            write_tensor(a.out.join(format!("{stem}_raw.cpt")), &map.raw)?;

            // Pre-upsampling attention: contributions for CAPE, rectified
            // logits for the others.
            let attention = match kind {
                ExplanationKind::Cape => map.raw.clone(),
                _ => rectify(&map.raw),
            };
            let cut = a.threshold * attention.max();
            let [_, w] = map.raw.dims2()?;
            let mut csv = String::from("row,col,value,attention,suppressed\n");
            let mut suppressed = 0usize;
            for (p, (&v, &att)) in map.raw.data().iter().zip(attention.data()).enumerate() {
                let off = att < cut;
                suppressed += off as usize;
                csv.push_str(&format!("{},{},{:e},{:e},{}\n", p / w, p % w, v, att, off as u8));
            }
            write_text(a.out.join(format!("{stem}_cells.csv")), &csv)?;

            let mut entry = json!({
                "kind": kind.slug(),
                "rank": rank + 1,
                "class": class,
                "probability": probs[class],
                "regions": map.raw.len(),
                "suppressed_regions": suppressed,
                "prefix": stem,
            });
            if kind == ExplanationKind::Cape {
                let total = map.raw.sum();
                if (total - probs[class]).abs() > ACCOUNTING_TOLERANCE {
                    return Err(invariant(format!(
                        "class {class} regions sum to {total}, prediction is {}",
                        probs[class]
                    )));
                }
                let summary = thresholded_contribution_summary(&analysis.contributions, class, a.threshold)?;
                entry["region_sum"] = json!(total);
                entry["retained_ratio"] = json!(summary.retained_ratio);
                entry["threshold_value"] = json!(summary.threshold);
            }
            entries.push(entry);
        }
    }
    let summary = json!({
        "label": label,
        "vanilla_probs": analysis.vanilla_probs.data(),
        "cape_probs": analysis.cape_probs.data(),
        "threshold": a.threshold,
        "explanations": entries,
    });
    write_json(a.out.join("summary.json"), &summary)?;
    let cfg = json!({
        "checkpoint_sha256": tree_digest(&a.checkpoint)?,
        "input": input,
        "kinds": kinds.iter().map(|k| k.slug()).collect::<Vec<_>>(),
        "topk": a.topk,
        "threshold": a.threshold,
    });
    finish(&a.out, "explain", &cfg, 0)?;
    println!("wrote {} explanations to {}", kinds.len() * a.topk, a.out.display());
    Ok(())
}

pub fn diff(a: DiffArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let (image, _, input) = load_image(&a.source)?;
    check_input_size(&model, &image)?;
    for c in [a.c1, a.c2] {
        if c >= model.classes() {
            return Err(arg_error(format!("class {c} out of range for {} classes", model.classes())));
        }
    }
    let analysis = model.analyze(&image)?;
    let d = class_difference_map(&analysis.contributions, a.c1, a.c2)?;
    let acc = d.accounting(a.groups);
    let summed: f64 = acc.positive_sums.iter().chain(&acc.negative_sums).sum::<f64>() + acc.residual;
    if (summed - acc.total).abs() > ACCOUNTING_TOLERANCE {
        return Err(invariant(format!("group sums give {summed}, difference is {}", acc.total)));
    }
    fs::create_dir_all(&a.out)?;
    write_tensor(a.out.join("diff.cpt"), &d.map)?;
    let [h, _] = d.map.dims2()?;
    let factor = (image.height() / h).max(1);
    fs::write(a.out.join("diff.ppm"), Rgb::signed(&d.map)?.upscale(factor).encode_ppm())?;

    let mut csv = String::from("group,sign,regions,sum\n");
    let mut groups = Vec::new();
    for (sign, list, sums) in [("+", &d.positive, &acc.positive_sums), ("-", &d.negative, &acc.negative_sums)] {
        for (g, s) in list.iter().zip(sums.iter()) {
            let cells: Vec<String> = g.cells.iter().map(|(i, j)| format!("{i}:{j}")).collect();
            csv.push_str(&format!("{},{},{},{:e}\n", g.rank + 1, sign, cells.join(" "), s));
            groups.push(json!({ "rank": g.rank + 1, "sign": sign, "cells": g.cells, "sum": s }));
        }
    }
    csv.push_str(&format!("residual,,,{:e}\ntotal,,,{:e}\n", acc.residual, acc.total));
    write_text(a.out.join("accounting.csv"), &csv)?;
    let p = analysis.cape_probs.data();
    write_json(
        a.out.join("accounting.json"),
        &json!({
            "c1": a.c1,
            "c2": a.c2,
            "p_c1": p[a.c1],
            "p_c2": p[a.c2],
            "total": acc.total,
            "groups": groups,
            "residual": acc.residual,
        }),
    )?;
    let cfg = json!({
        "checkpoint_sha256": tree_digest(&a.checkpoint)?,
        "input": input,
        "c1": a.c1,
        "c2": a.c2,
        "groups": a.groups,
    });
    finish(&a.out, "diff", &cfg, 0)?;
    println!(
        "p[{}] - p[{}] = {:+.4}% ({} positive, {} negative groups)",
        a.c1,
        a.c2,
        100.0 * acc.total,
        d.positive.len(),
        d.negative.len()
    );
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let mut examples = synth::load_split(&a.data, &a.split)?;
    if let Some(n) = a.limit {
        examples.truncate(n);
    }
    if examples.is_empty() {
        return Err(arg_error(format!("split {} has no images", a.split)));
    }
    if let Some(e) = examples.first() {
        check_input_size(&model, &e.image)?;
    }
    let methods = parse_kinds(&a.methods)?;
    let variants = a
        .variants
        .iter()
        .map(|s| s.trim().parse::<Variant>())
        .collect::<cape_core::Result<Vec<_>>>()?;
    let refs: Vec<&Example> = examples.iter().collect();
    let report = evaluation::evaluate(&model, &refs, &methods, &variants, &a.split)?;

    fs::create_dir_all(&a.out)?;
    write_text(a.out.join("metrics.csv"), &report.metrics.to_csv())?;
    write_json(a.out.join("metrics.json"), &report.metrics)?;
    write_text(a.out.join("accuracy.csv"), &accuracy_csv(&report.accuracy))?;
    write_text(a.out.join("placement.csv"), &placement_csv(&report.placement))?;
    write_json(a.out.join("evaluation.json"), &report)?;
    let cfg = json!({
        "checkpoint_sha256": tree_digest(&a.checkpoint)?,
        "data_sha256": tree_digest(&a.data)?,
        "split": a.split,
        "limit": a.limit,
        "methods": methods.iter().map(|k| k.slug()).collect::<Vec<_>>(),
        "variants": variants.iter().map(|v| v.slug()).collect::<Vec<_>>(),
    });
    finish(&a.out, "evaluate", &cfg, 0)?;
    print!("{}", accuracy_csv(&report.accuracy));
    print!("{}", report.metrics.to_csv());
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let missing: Vec<String> = a.runs.iter().filter(|p| !p.is_dir()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("missing run directories: {}", missing.join(", ")),
        )
        .into());
    }
    let name = |p: &Path| {
        p.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string())
    };
    let mut summaries = Vec::new();
    let mut tiles = Vec::new();
    let mut inputs = Vec::new();
    for run in &a.runs {
        let metrics = run.join("metrics.json");
        if metrics.exists() {
            let m: MetricsReport = serde_json::from_str(&fs::read_to_string(&metrics)?).map_err(Error::from)?;
            for row in m.rows {
                let mut s = row.summary;
                if a.runs.len() > 1 {
                    s.method = format!("{}/{}", name(run), s.method);
                }
                summaries.push(s);
            }
        }
        for rel in list_files(run)? {
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel.ends_with("_heatmap.ppm") || rel.ends_with("diff.ppm") {
                tiles.push(Rgb::decode_ppm(&fs::read(run.join(&rel))?)?);
            }
        }
        inputs.push(json!({ "run": name(run), "sha256": tree_digest(run)? }));
    }
    if summaries.is_empty() && tiles.is_empty() {
        return Err(arg_error("no metrics.json or heatmaps found in the given runs"));
    }
    fs::create_dir_all(&a.out)?;
    if !summaries.is_empty() {
        let merged = MetricsReport::new("merged", summaries)?;
        write_text(a.out.join("consolidated.csv"), &merged.to_csv())?;
        write_json(a.out.join("consolidated.json"), &merged)?;
        print!("{}", merged.to_csv());
    }
    if !tiles.is_empty() {
        fs::write(a.out.join("gallery.ppm"), gallery(&tiles, 6, 2)?.encode_ppm())?;
    }
    finish(&a.out, "report", &json!({ "runs": inputs }), 0)?;
    Ok(())
}
