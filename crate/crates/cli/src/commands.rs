use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use angioqa::subjective::{compute_mos, write_mos_csv, MosOutcome, MosRecord, RatingLog};
use angioqa::synth::{build_dataset, write_dataset, Manifest, Split, SynthConfig, Triplet};
use angioqa::train::{
    ablate_must, images_of, predict_scores, samples, train as train_model, AblationReport,
    MetricCorrelations, Sample, TrainConfig, TrainReport,
};
use angioqa::{Metric, QualityModel};
use serde::{Deserialize, Serialize};

use crate::{io_error, CliError, SplitArg, TrainOverrides};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_HEADER: [&str; 4] = ["id", "vmc", "vbd", "oq"];

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn in_split(split: SplitArg, s: Split) -> bool {
    match split {
        SplitArg::All => true,
        SplitArg::Train => s == Split::Train,
        SplitArg::Test => s == Split::Test,
    }
}

pub fn gen_data(n: usize, seed: u64, train_fraction: f64, out: &Path) -> Result<PathBuf, CliError> {
    let data = build_dataset(n, seed, train_fraction, &SynthConfig::default())?;
    Ok(write_dataset(&data, out, seed)?)
}

pub fn mos(ratings: &Path, out: &Path, report: &mut dyn Write) -> Result<MosOutcome, CliError> {
    let text = std::fs::read_to_string(ratings).map_err(|e| io_error(ratings, e))?;
    let log = RatingLog::parse_jsonl(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", ratings.display())))?;
    let outcome = compute_mos(&log)?;
    write_screening(&outcome, report).map_err(internal)?;
    let file = std::fs::File::create(out).map_err(|e| io_error(out, e))?;
    write_mos_csv(&outcome.records, std::io::BufWriter::new(file))?;
    writeln!(
        report,
        "wrote {} MOS rows to {}",
        outcome.records.len(),
        out.display()
    )
    .map_err(internal)?;
    Ok(outcome)
}

fn write_screening(outcome: &MosOutcome, w: &mut dyn Write) -> std::io::Result<()> {
    let c = &outcome.counts;
    writeln!(
        w,
        "ratings: {} subjects, {} triplets, {} of {} scores",
        c.subjects, c.triplets, c.actual, c.expected
    )?;
    for (s, t, m) in &c.gaps {
        writeln!(w, "  missing: {s} {t} {m}")?;
    }
    let screening = &outcome.screening;
    if screening.low_power {
        writeln!(
            w,
            "warning: fewer than 8 subjects, outlier screening has little power"
        )?;
    }
    if screening.rejected.is_empty() {
        writeln!(w, "screening: all {} subjects kept", screening.kept.len())?;
    } else {
        writeln!(
            w,
            "screening: kept {}, rejected {}: {}",
            screening.kept.len(),
            screening.rejected.len(),
            screening.rejected.join(", ")
        )?;
        for d in screening.details.iter().filter(|d| d.rejected) {
            writeln!(
                w,
                "  {} {}: {} above, {} below, {} images",
                d.subject_id, d.metric, d.above, d.below, d.images
            )?;
        }
    }
    Ok(())
}

pub fn resolve_config(o: &TrainOverrides) -> Result<TrainConfig, CliError> {
    let mut config = match &o.config {
        Some(path) => TrainConfig::load(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = o.seed {
        config.seed = seed;
    }
    if let Some(epochs) = o.epochs {
        config.epochs = epochs;
    }
    if let Some(lr) = o.peak_lr {
        config.peak_lr = lr;
    }
    if o.no_fusion {
        config.must_enabled = false;
    }
    config.validate()?;
    Ok(config)
}

fn load_triplets(manifest_path: &Path, split: SplitArg) -> Result<Vec<Triplet>, CliError> {
    let mut manifest = Manifest::read(manifest_path)?;
    manifest.rows.retain(|r| in_split(split, r.split));
    Ok(manifest.load()?)
}

pub fn load_splits(manifest: &Path) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    let triplets = load_triplets(manifest, SplitArg::All)?;
    let (train, test): (Vec<Triplet>, Vec<Triplet>) =
        triplets.into_iter().partition(|t| t.split == Split::Train);
    Ok((samples(&train)?, samples(&test)?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).map_err(internal)?;
    std::fs::write(path, json).map_err(|e| io_error(path, e))
}

pub fn train(
    manifest: &Path,
    overrides: &TrainOverrides,
    out: &Path,
    log: &mut dyn Write,
) -> Result<TrainReport, CliError> {
    let config = resolve_config(overrides)?;
    let (train_set, test_set) = load_splits(manifest)?;
    let outcome = train_model(&config, &train_set, &test_set)?;
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    outcome.model.save(out.join(CHECKPOINT_FILE))?;
    let mut report = outcome.report;
    report.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_json(&out.join(REPORT_FILE), &report)?;

    let mut text = String::from("epoch  loss     lr        VMC srcc  VBD srcc  OQ srcc\n");
    for e in &report.epochs {
        text.push_str(&format!(
            "{:>5}  {:<7.4}  {:<8.2e}  {:<8.4}  {:<8.4}  {:.4}\n",
            e.epoch, e.loss, e.lr, e.test.vmc.srcc, e.test.vbd.srcc, e.test.oq.srcc
        ));
    }
    text.push_str(&format_table(&report.final_test));
    text.push_str(&format!(
        "epochs to 95% of final SRCC: {}\nwrote {}\n",
        report.epochs_to_95pct_final_srcc,
        out.display()
    ));
    log.write_all(text.as_bytes()).map_err(internal)?;
    Ok(report)
}

pub enum PredictionSource {
    Checkpoint(PathBuf),
    Csv(PathBuf),
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    vmc: f64,
    vbd: f64,
    oq: f64,
}

pub fn predict(
    manifest: &Path,
    checkpoint: &Path,
    split: SplitArg,
) -> Result<Vec<(String, [f64; 3])>, CliError> {
    let model = QualityModel::load(checkpoint)
        .map_err(|e| CliError::Data(format!("{}: {e}", checkpoint.display())))?;
    let triplets = load_triplets(manifest, split)?;
    let images: Vec<_> = triplets.iter().map(images_of).collect();
    let scores = predict_scores(&model, &images)?;
    Ok(triplets.into_iter().map(|t| t.id).zip(scores).collect())
}

pub fn write_predictions<W: Write>(rows: &[(String, [f64; 3])], out: W) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(PREDICTIONS_HEADER).map_err(internal)?;
    for (id, [vmc, vbd, oq]) in rows {
        w.serialize(PredictionRow {
            id: id.clone(),
            vmc: *vmc,
            vbd: *vbd,
            oq: *oq,
        })
        .map_err(internal)?;
    }
    w.flush().map_err(internal)
}

fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let data = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut reader = csv::Reader::from_path(path).map_err(data)?;
    reader
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(data)
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, [f64; 3])>, CliError> {
    let rows: Vec<PredictionRow> = read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.id, [r.vmc, r.vbd, r.oq]))
        .collect())
}

pub fn read_mos(path: &Path) -> Result<Vec<MosRecord>, CliError> {
    read_csv(path)
}

/// PLCC/SRCC of predictions against MOS labels or manifest ground truth. With a
/// manifest, only triplets of `split` are scored.
pub fn eval(
    manifest_path: Option<&Path>,
    source: &PredictionSource,
    mos: Option<&Path>,
    split: SplitArg,
) -> Result<MetricCorrelations, CliError> {
    let manifest = manifest_path.map(Manifest::read).transpose()?;
    let need_manifest = || CliError::Data("--manifest is required for this evaluation".into());
    let predictions = match source {
        PredictionSource::Checkpoint(path) => {
            predict(manifest_path.ok_or_else(need_manifest)?, path, split)?
        }
        PredictionSource::Csv(path) => read_predictions(path)?,
    };
    let reference: BTreeMap<String, [f64; 3]> = match mos {
        Some(path) => read_mos(path)?
            .into_iter()
            .map(|r| (r.triplet_id.clone(), Metric::ALL.map(|m| r.get(m))))
            .collect(),
        None => manifest
            .as_ref()
            .ok_or_else(need_manifest)?
            .rows
            .iter()
            .filter_map(|r| r.gt.map(|gt| (r.id.clone(), gt)))
            .collect(),
    };
    let allowed: Option<BTreeSet<&str>> = manifest.as_ref().map(|m| {
        m.rows
            .iter()
            .filter(|r| in_split(split, r.split))
            .map(|r| r.id.as_str())
            .collect()
    });
    let mut predicted = Vec::new();
    let mut targets = Vec::new();
    for (id, scores) in &predictions {
        if allowed.as_ref().is_some_and(|a| !a.contains(id.as_str())) {
            continue;
        }
        let target = reference
            .get(id)
            .ok_or_else(|| CliError::Data(format!("no reference scores for triplet {id}")))?;
        predicted.push(*scores);
        targets.push(*target);
    }
    Ok(MetricCorrelations::between(&predicted, &targets)?)
}

pub fn format_table(c: &MetricCorrelations) -> String {
    let mut out = String::from("metric  PLCC    SRCC    n\n");
    for m in Metric::ALL {
        let r = c.get(m);
        out.push_str(&format!(
            "{:<6}  {:.4}  {:.4}  {}\n",
            m.as_str(),
            r.plcc,
            r.srcc,
            r.n
        ));
    }
    out
}

pub fn ablate(
    manifest: &Path,
    overrides: &TrainOverrides,
    seeds: &[u64],
    prior: &[PathBuf],
    out: &Path,
    log: &mut dyn Write,
) -> Result<AblationReport, CliError> {
    let config = resolve_config(overrides)?;
    let prior = prior
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            serde_json::from_str::<TrainReport>(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (train_set, test_set) = load_splits(manifest)?;
    let report = ablate_must(&config, seeds, &train_set, &test_set, &prior)?;
    write_json(out, &report)?;

    let mut text = String::from("arm        VMC srcc  VBD srcc  OQ srcc  epochs to 95%\n");
    for (name, arm) in [
        ("fusion", &report.with_fusion),
        ("baseline", &report.without_fusion),
    ] {
        let s = arm.median_srcc;
        text.push_str(&format!(
            "{name:<9}  {:<8.4}  {:<8.4}  {:<7.4}  {}\n",
            s[0], s[1], s[2], arm.median_epochs_to_95pct_final_srcc
        ));
    }
    let d = report.srcc_delta;
    text.push_str(&format!(
        "delta      {:<+8.4}  {:<+8.4}  {:<+7.4}\n",
        d[0], d[1], d[2]
    ));
    log.write_all(text.as_bytes()).map_err(internal)?;
    Ok(report)
}
