//! Command bodies. Each writes its artifacts into the run directory.

use std::path::Path;

use digitwin_eval::viz::{export_embeddings, pca_csv};
use digitwin_eval::{data_size_sweep, heatmap_video, pca_project};

use crate::acceptance;
use crate::config::Config;
use crate::error::{io_err, CliError, Result};
use crate::manifest::digest_file;
use crate::pipeline::{self, Model, ModelKind};
use crate::{Command, ModelSource, Outcome};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn to_toml<T: serde::Serialize>(value: &T) -> String {
    toml::to_string_pretty(value).expect("report serializes")
}

pub fn execute(command: &Command, cfg: &Config, dir: &Path) -> Result<Outcome> {
    match command {
        Command::GenerateData { probe, .. } => generate_data(cfg, dir, *probe),
        Command::Train { model, .. } => train(cfg, dir, *model),
        Command::Probe { source, .. } => probe(cfg, dir, source),
        Command::Sweep { model } => sweep(cfg, dir, *model),
        Command::Eval2afc { source } => eval_2afc(cfg, dir, source),
        Command::Heatmap { source } => heatmap(cfg, dir, source),
        Command::ExportEmbeddings { source, components } => export(cfg, dir, source, *components),
        Command::Reproduce { scale } => reproduce(cfg, dir, *scale),
    }
}

fn generate_data(cfg: &Config, dir: &Path, with_probe: bool) -> Result<Outcome> {
    let data = pipeline::rearing_data(cfg)?;
    data.write(&dir.join("rearing"))?;
    let mut notes = vec![format!(
        "rearing: condition {} frames {} checksum {}",
        cfg.data.condition, data.manifest.frame_count, data.manifest.checksum
    )];
    if with_probe {
        for subset in pipeline::probe_sets(cfg)? {
            let name = match subset.manifest.dataset {
                digitwin_sim::DatasetKind::Probe { object, viewpoint } => {
                    format!("{}_vp{viewpoint:02}", object.as_str())
                }
                digitwin_sim::DatasetKind::Rearing { .. } => unreachable!("probe sets hold probe subsets"),
            };
            subset.write(&dir.join("probe").join(&name))?;
            notes.push(format!("probe {name}: checksum {}", subset.manifest.checksum));
        }
    }
    Ok(Outcome {
        notes,
        ..Outcome::default()
    })
}

fn train(cfg: &Config, dir: &Path, kind: ModelKind) -> Result<Outcome> {
    let data = pipeline::rearing_data(cfg)?;
    let mut model = pipeline::init_model(cfg, kind)?;
    write(&dir.join("init.ckpt"), pipeline::checkpoint_bytes(cfg, &model))?;
    let sink = pipeline::sink(cfg, kind, dir);
    let log = pipeline::train_model(&mut model, &data.frames, Some(&sink))?;
    log.write(&dir.join("train_log.csv"))?;
    let mut notes = vec![format!(
        "{}: {} epochs on {} frames (data checksum {})",
        kind.as_str(),
        log.epochs.len(),
        data.frames.len(),
        data.manifest.checksum
    )];
    if let (Some(a), Some(b)) = (log.first_loss(), log.last_loss()) {
        notes.push(format!("loss: first {a:.4} last {b:.4}"));
    }
    Ok(Outcome {
        notes,
        ..Outcome::default()
    })
}

/// Loads `--checkpoint`, or initialises `--model` (vit-cot by default).
fn resolve_model(cfg: &Config, source: &ModelSource, outcome: &mut Outcome) -> Result<Model> {
    match &source.checkpoint {
        Some(path) => {
            let model = pipeline::load_model(cfg, path)?;
            if let Some(k) = source.model {
                if k != model.kind() {
                    return Err(CliError::Usage(format!(
                        "--model {} does not match the {} checkpoint",
                        k.as_str(),
                        model.kind().as_str()
                    )));
                }
            }
            outcome.inputs.push(digest_file(path, path.display().to_string())?);
            Ok(model)
        }
        None => {
            let kind = source.model.unwrap_or(ModelKind::VitCot);
            outcome.notes.push(format!("{}: untrained weights", kind.as_str()));
            pipeline::init_model(cfg, kind)
        }
    }
}

fn probe(cfg: &Config, dir: &Path, source: &ModelSource) -> Result<Outcome> {
    let mut out = Outcome::default();
    let model = resolve_model(cfg, source, &mut out)?;
    let probes = pipeline::probe_sets(cfg)?;
    let report = pipeline::probe(cfg, &model, &probes)?;
    write(&dir.join("probe.toml"), to_toml(&report))?;
    out.notes.push(format!(
        "probe {}: accuracy {:.4} ± {:.4} over {} folds",
        report.mode.as_str(),
        report.mean,
        report.std_err,
        report.fold_accuracies.len()
    ));
    Ok(out)
}

fn sweep(cfg: &Config, dir: &Path, kind: ModelKind) -> Result<Outcome> {
    let largest = *cfg.sweep.sizes.last().expect("validated non-empty");
    let data = digitwin_sim::generate_dataset(cfg.data.condition, largest, cfg.seed, &cfg.data.dataset)?;
    let probes = pipeline::probe_sets(cfg)?;
    let report = data_size_sweep(
        &cfg.sweep.sizes,
        |n| {
            let mut m = pipeline::init_model(cfg, kind).map_err(|e| eval_err(&e))?;
            if n > 0 {
                pipeline::train_model(&mut m, &data.frames[..n], None).map_err(|e| eval_err(&e))?;
            }
            Ok(m)
        },
        |m| pipeline::probe(cfg, m, &probes).map_err(|e| eval_err(&e)),
    )?;
    write(&dir.join("sweep.csv"), report.to_csv())?;
    let mut notes: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("{:>6} frames: accuracy {:.4}", r.frames, r.accuracy))
        .collect();
    notes.push(format!("spearman {:.3}", report.spearman));
    Ok(Outcome {
        notes,
        ..Outcome::default()
    })
}

fn eval_err(e: &CliError) -> digitwin_eval::EvalError {
    digitwin_eval::EvalError::Contract(e.to_string())
}

fn eval_2afc(cfg: &Config, dir: &Path, source: &ModelSource) -> Result<Outcome> {
    let mut out = Outcome::default();
    let model = resolve_model(cfg, source, &mut out)?;
    let data = pipeline::rearing_data(cfg)?;
    let probes = pipeline::probe_sets(cfg)?;
    let report = pipeline::two_afc(cfg, &model, &data.frames, &probes)?;
    write(&dir.join("trials.csv"), report.to_csv())?;
    #[derive(serde::Serialize)]
    struct Summary<'a> {
        imprinted: &'a str,
        trials: usize,
        accuracy: f64,
        successes: u64,
        chi_square: f64,
        p_value: f64,
    }
    let s = Summary {
        imprinted: report.imprinted.as_str(),
        trials: report.trials.len(),
        accuracy: report.accuracy,
        successes: report.successes,
        chi_square: report.chi_square.statistic,
        p_value: report.chi_square.p_value,
    };
    write(&dir.join("summary.toml"), to_toml(&s))?;
    out.notes.push(format!(
        "2afc: {}/{} correct, accuracy {:.4}, chi2 {:.2}, p {:.3e}",
        s.successes, s.trials, s.accuracy, s.chi_square, s.p_value
    ));
    Ok(out)
}

fn heatmap(cfg: &Config, dir: &Path, source: &ModelSource) -> Result<Outcome> {
    let mut out = Outcome::default();
    let model = resolve_model(cfg, source, &mut out)?;
    let probes = pipeline::probe_sets(cfg)?;
    let frames = pipeline::heatmap_frames(&probes, cfg.heatmap.frames_per_viewpoint);
    let images = heatmap_video(model.as_ref(), &frames, &dir.join("heatmaps"))?;
    out.notes.push(format!("heatmaps: {} images for {} frames", images.len(), frames.len()));
    Ok(out)
}

fn export(cfg: &Config, dir: &Path, source: &ModelSource, k: usize) -> Result<Outcome> {
    let mut out = Outcome::default();
    let model = resolve_model(cfg, source, &mut out)?;
    let probes = pipeline::probe_sets(cfg)?;
    let frames: Vec<_> = probes.iter().flat_map(|s| s.frames.iter()).collect();
    let table = export_embeddings(model.encoder(), &frames, &dir.join("embeddings.csv"))?;
    let rows: Vec<f64> = table.features.iter().map(|&v| f64::from(v)).collect();
    let pca = pca_project(&rows, table.dim, k)?;
    write(&dir.join("pca.csv"), pca_csv(&pca))?;
    out.notes.push(format!(
        "embeddings: {} rows of width {}; {k} components{}",
        table.rows(),
        table.dim,
        if pca.degenerate { " (degenerate)" } else { "" }
    ));
    Ok(out)
}

fn reproduce(cfg: &Config, dir: &Path, scale: acceptance::Scale) -> Result<Outcome> {
    let results = acceptance::run_all(cfg, scale, &dir.join("work"), |r| println!("{}", r.line()))?;
    let table = acceptance::table(&results);
    write(&dir.join("report.txt"), &table)?;
    let failed: Vec<String> = results.iter().filter(|r| !r.pass).map(|r| r.id.to_string()).collect();
    let passed = results.len() - failed.len();
    Ok(Outcome {
        notes: vec![format!("passed {passed}/{}; report: {}", results.len(), dir.join("report.txt").display())],
        failed: (!failed.is_empty()).then(|| format!("criteria {} failed", failed.join(", "))),
        ..Outcome::default()
    })
}
