//! Command implementations behind the `cpseg` binary, exposed as library
//! functions so integration tests drive the exact same paths.

use std::fs;
use std::path::Path;

use crate::ablate::{ablate_merge, ablate_prompts, AblationTable};
use crate::data::{self, io as dio, ClassTaxonomy, SceneSpec, SegSample};
use crate::error::{CpSegError, Result};
use crate::gradcheck_suite::{run_suite, PASS_THRESHOLD};
use crate::metrics::MetricsReport;
use crate::model::CpSegModel;
use crate::prompt::{generic_chain, PromptMode};
use crate::train::{evaluate, segment_image, train, TrainConfig};

/// Read a training config from JSON or TOML (by extension); `None` gives the
/// defaults.
pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    let config = match path {
        None => TrainConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CpSegError::io(p, e))?;
            match p.extension().and_then(|e| e.to_str()) {
                Some("toml") => toml::from_str(&text)
                    .map_err(|e| CpSegError::Config(format!("{}: {e}", p.display())))?,
                _ => serde_json::from_str(&text)
                    .map_err(|e| CpSegError::Config(format!("{}: {e}", p.display())))?,
            }
        }
    };
    config.validate()?;
    Ok(config)
}

/// `synth`: generate a dataset directory.
pub fn cmd_synth(out: &Path, n: usize, height: usize, width: usize, seed: u64, merge: bool) -> Result<()> {
    if n == 0 {
        return Err(CpSegError::Config("need at least one sample".into()));
    }
    let taxonomy = ClassTaxonomy::flood_default();
    let spec = SceneSpec::default();
    let samples = data::generate_dataset(&spec, seed, n, height, width)?;
    let (samples, taxonomy) = if merge {
        let m = taxonomy.flood_merge()?;
        let merged = samples
            .iter()
            .map(|s| data::apply_merge(s, &m, &taxonomy))
            .collect::<Result<Vec<_>>>()?;
        (merged, m.target)
    } else {
        (samples, taxonomy)
    };
    dio::write_dataset(&samples, &taxonomy, seed, out)?;
    println!(
        "wrote {} samples ({}x{}, {} classes) to {}",
        samples.len(),
        width,
        height,
        taxonomy.len(),
        out.display()
    );
    Ok(())
}

/// `train`: fit a model on a dataset directory and write a checkpoint.
pub fn cmd_train(
    data_dir: &Path,
    config_path: Option<&Path>,
    out: &Path,
    prompt_mode: Option<PromptMode>,
) -> Result<()> {
    let mut config = load_config(config_path)?;
    if let Some(mode) = prompt_mode {
        config.prompt_mode = mode;
    }
    let bundle = dio::load_dataset(data_dir)?;
    let outcome = train(&config, &bundle.samples, &bundle.taxonomy)?;
    for (epoch, loss) in outcome.loss_trace.iter().enumerate() {
        println!("epoch {epoch:>3}  mean loss {loss:.6}");
    }
    outcome.model.save(out, &config)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}

/// `eval`: score a checkpoint on a dataset and write the per-class CSV.
pub fn cmd_eval(
    data_dir: &Path,
    ckpt: &Path,
    merge: bool,
    report_path: &Path,
    time: bool,
) -> Result<MetricsReport> {
    let (model, train_config) = CpSegModel::load(ckpt)?;
    let bundle = dio::load_dataset(data_dir)?;
    let (samples, taxonomy) = if merge {
        let m = bundle.taxonomy.flood_merge()?;
        let merged = bundle
            .samples
            .iter()
            .map(|s| data::apply_merge(s, &m, &bundle.taxonomy))
            .collect::<Result<Vec<_>>>()?;
        (merged, m.target)
    } else {
        (bundle.samples, bundle.taxonomy)
    };
    if taxonomy.names() != model.taxonomy.names() {
        return Err(CpSegError::Config(format!(
            "dataset taxonomy {:?} does not match checkpoint taxonomy {:?}",
            taxonomy.names(),
            model.taxonomy.names()
        )));
    }
    let report = evaluate(&model, train_config.prompt_mode, &samples, train_config.seed)?;
    fs::write(report_path, report.to_csv()).map_err(|e| CpSegError::io(report_path, e))?;
    println!(
        "mIoU {:.4}  pixel accuracy {:.4}  ({} samples)",
        report.miou,
        report.pixel_accuracy,
        samples.len()
    );
    if time {
        println!(
            "wall clock {:.3}s total, {:.4}s per image",
            report.runtime_seconds,
            report.runtime_seconds / samples.len() as f64
        );
    }
    Ok(report)
}

/// `segment`: run one image through a checkpoint; write the mask (PGM or
/// PNG by extension) plus a palette sidecar, and optionally per-thought
/// score-map images.
pub fn cmd_segment(ckpt: &Path, image_path: &Path, out: &Path, dump_dir: Option<&Path>) -> Result<()> {
    let (model, _) = CpSegModel::load(ckpt)?;
    let (image, w, h) = dio::read_png_rgb(image_path)?;
    if (h, w) != (model.config.image_h, model.config.image_w) {
        return Err(CpSegError::Shape(format!(
            "image is {w}x{h}, checkpoint expects {}x{}",
            model.config.image_w, model.config.image_h
        )));
    }
    // Bare images carry no annotations; use the question-only generic chain.
    let chain = generic_chain(&model.taxonomy);
    let output = segment_image(&model, &image, &chain)?;

    match out.extension().and_then(|e| e.to_str()) {
        Some("png") => {
            image::save_buffer(out, &output.mask, w as u32, h as u32, image::ColorType::L8)
                .map_err(|e| CpSegError::Validation(format!("{}: {e}", out.display())))?;
        }
        _ => dio::write_pgm(out, &output.mask, w, h)?,
    }
    let palette_path = out.with_extension("palette.json");
    dio::write_palette(&palette_path, &model.taxonomy)?;
    println!(
        "mask written to {} ({:.4}s); palette at {}",
        out.display(),
        output.seconds,
        palette_path.display()
    );

    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir).map_err(|e| CpSegError::io(dir, e))?;
        for (t, map) in output.thought_maps.iter().enumerate() {
            for (k, class) in model.taxonomy.classes.iter().enumerate() {
                let mut plane = Vec::with_capacity(output.grid_h * output.grid_w);
                for p in 0..output.grid_h * output.grid_w {
                    plane.push(map[p * model.taxonomy.len() + k]);
                }
                let name = dir.join(format!("thought{t:02}_class{k:02}_{}.png", class.name));
                dio::write_png_gray(&name, &plane, output.grid_w, output.grid_h, -1.0, 1.0)?;
            }
        }
        println!(
            "wrote {} thought maps to {}",
            output.thought_maps.len() * model.taxonomy.len(),
            dir.display()
        );
    }
    Ok(())
}

fn load_split(data_dir: &Path) -> Result<(Vec<SegSample>, Vec<SegSample>, ClassTaxonomy)> {
    let train_dir = data_dir.join("train");
    let val_dir = data_dir.join("val");
    if !train_dir.is_dir() || !val_dir.is_dir() {
        return Err(CpSegError::Config(format!(
            "{} must contain train/ and val/ dataset directories",
            data_dir.display()
        )));
    }
    let train_bundle = dio::load_dataset(&train_dir)?;
    let val_bundle = dio::load_dataset(&val_dir)?;
    if train_bundle.taxonomy.names() != val_bundle.taxonomy.names() {
        return Err(CpSegError::Config(
            "train and val datasets disagree on the taxonomy".into(),
        ));
    }
    Ok((train_bundle.samples, val_bundle.samples, train_bundle.taxonomy))
}

/// `ablate prompts`: four prompting modes across seeds.
pub fn cmd_ablate_prompts(
    data_dir: &Path,
    config_path: Option<&Path>,
    seeds: &[u64],
    report_path: &Path,
) -> Result<AblationTable> {
    let base = load_config(config_path)?;
    let (train_set, val_set, taxonomy) = load_split(data_dir)?;
    let table = ablate_prompts(&base, &train_set, &val_set, &taxonomy, seeds)?;
    fs::write(report_path, table.to_csv()).map_err(|e| CpSegError::io(report_path, e))?;
    for row in &table.rows {
        println!("{:<28} mIoU {:.4} +/- {:.4}", row.label, row.mean, row.sd);
    }
    Ok(table)
}

/// `ablate merge`: original versus combined taxonomy.
pub fn cmd_ablate_merge(
    data_dir: &Path,
    config_path: Option<&Path>,
    seeds: &[u64],
    report_path: &Path,
) -> Result<AblationTable> {
    let base = load_config(config_path)?;
    let (train_set, val_set, taxonomy) = load_split(data_dir)?;
    let table = ablate_merge(&base, &train_set, &val_set, &taxonomy, seeds)?;
    fs::write(report_path, table.to_csv()).map_err(|e| CpSegError::io(report_path, e))?;
    for row in &table.rows {
        println!("{:<16} mIoU {:.4} +/- {:.4}", row.label, row.mean, row.sd);
    }
    Ok(table)
}

/// `gradcheck`: the finite-difference suite; returns true when everything
/// passes the threshold.
pub fn cmd_gradcheck(config_path: Option<&Path>) -> Result<bool> {
    let config = load_config(config_path)?;
    let entries = run_suite(config.seed)?;
    let mut ok = true;
    for e in &entries {
        let pass = e.max_rel_error < PASS_THRESHOLD;
        ok &= pass;
        println!(
            "{:<28} max rel err {:>12.3e}  {} (worst: {})",
            e.name,
            e.max_rel_error,
            if pass { "PASS" } else { "FAIL" },
            e.worst_param
        );
    }
    Ok(ok)
}
