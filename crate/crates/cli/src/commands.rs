use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use ecg_aging::attrib::{self, AggregatedBeat, SegmentStats, SubjectBeats, Weighting};
use ecg_aging::beatdetect::{self, Beat, BeatWindow, DetectorConfig};
use ecg_aging::eval::{self, GroupMapping, MetricReport, Split, SplitAssignment};
use ecg_aging::features::{self, FeatureTable, FeatureVector, FEATURE_NAMES};
use ecg_aging::gbdt::{self, TrainConfig, TrainData, TreeEnsemble};
use ecg_aging::refnet::{self, AttributionMap, CropData, EpochRecord, FitConfig, LossSpec, Net, NetSpec};
use ecg_aging::signal_io::{self, AgeGroup, Cohort, EcgRecord, ManifestRow, RecordFormat};
use ecg_aging::synthgen::{self, TrendSpec};
use ecg_aging::treeshap::{self, ShapSummary};

use crate::artifact::{artifact_kind, create_dir, csv_string, read_json, Run};
use crate::error::{CliError, Result};
use crate::{
    AggregateArgs, BalanceArg, Cli, Command, EvaluateArgs, FeaturesArgs, GroupsArg, IngestArgs, LossArg, ReportArgs,
    SaliencyArgs, ShapArgs, SplitArgs, SubsetArg, SynthArgs, TrainGbdtArgs, TrainRefnetArgs, WeightingArg,
};

const SPLIT_KIND: &str = "split";
const GBDT_KIND: &str = "gbdt_model";
const REFNET_KIND: &str = "refnet_model";
const METRICS_KIND: &str = "metrics";
const SHAP_KIND: &str = "shap_summary";
const SALIENCY_KIND: &str = "saliency_maps";
const AGGREGATE_KIND: &str = "aggregated_beats";

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Ingest(a) => ingest(cli, a),
        Command::Features(a) => features(cli, a),
        Command::Split(a) => split(cli, a),
        Command::TrainGbdt(a) => train_gbdt(cli, a),
        Command::TrainRefnet(a) => train_refnet(cli, a),
        Command::Evaluate(a) => evaluate(cli, a),
        Command::ShapSummary(a) => shap_summary(cli, a),
        Command::Saliency(a) => saliency(cli, a),
        Command::Aggregate(a) => aggregate(cli, a),
        Command::Report(a) => report(cli, a),
    }
}

impl From<SubsetArg> for Split {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::Train => Split::Train,
            SubsetArg::Valid => Split::Valid,
            SubsetArg::Test => Split::Test,
        }
    }
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::PerSubject => Weighting::PerSubject,
            WeightingArg::PerBeat => Weighting::PerBeat,
        }
    }
}

/// Label mapping applied before training: none for 15 classes.
fn training_mapping(groups: GroupsArg) -> Option<GroupMapping> {
    match groups {
        GroupsArg::Fifteen => None,
        GroupsArg::Four => Some(GroupMapping::default_four()),
    }
}

fn n_classes(mapping: Option<&GroupMapping>) -> usize {
    mapping.map_or(AgeGroup::COUNT, |m| m.n_groups)
}

fn map_label(group: usize, mapping: Option<&GroupMapping>) -> usize {
    mapping.map_or(group, |m| m.map[group])
}

/// Record id to age-group index from a cohort manifest, rows without an
/// age skipped.
fn manifest_groups(path: &Path) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for row in signal_io::read_manifest(path)? {
        if let Some(age) = row.age {
            out.insert(row.record_id, AgeGroup::from_age(age)?.index());
        }
    }
    Ok(out)
}

fn record_csv_row(dir_name: &str, rec: &EcgRecord, age: f64) -> ManifestRow {
    ManifestRow {
        record_id: rec.record_id.clone(),
        path: format!("{dir_name}/{}.csv", rec.record_id),
        format: RecordFormat::Csv,
        fs: Some(rec.fs),
        age: Some(age),
    }
}

fn write_records(run: &Run, records: &[EcgRecord], ages: &BTreeMap<String, f64>) -> Result<usize> {
    let dir = run.path("records");
    create_dir(&dir)?;
    let pre = run.preamble();
    records
        .par_iter()
        .map(|r| signal_io::write_csv_record_with(r, &dir.join(format!("{}.csv", r.record_id)), &pre))
        .collect::<ecg_aging::Result<Vec<()>>>()?;
    let rows: Vec<ManifestRow> = records
        .iter()
        .map(|r| record_csv_row("records", r, ages[&r.record_id]))
        .collect();
    signal_io::write_manifest_with(&rows, &run.path("cohort.csv"), &pre)?;
    Ok(rows.len())
}

#[derive(Debug, Serialize)]
struct TruthRow {
    record_id: String,
    age_group: usize,
    age: u32,
    breathing_rate_bpm: f64,
    p_amplitude_mv: f64,
    sdnn_target_ms: f64,
    mean_hr_bpm: f64,
    n_beats: usize,
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    if a.n_per_group == 0 {
        return Err(CliError::usage("--n-per-group must be at least 1"));
    }
    let mut spec = match &a.trend_spec {
        Some(p) => TrendSpec::read_csv(p)?,
        None => TrendSpec::default(),
    };
    if let Some(d) = a.duration_s {
        for g in &mut spec.groups {
            g.duration = d;
        }
    }
    let inputs: Vec<(&str, &Path)> = a.trend_spec.iter().map(|p| ("trend_spec", p.as_path())).collect();
    let run = Run::start(&cli.out, "synth", cli.seed, a, &inputs)?;
    let sc = synthgen::synth_cohort(&spec, a.n_per_group, cli.seed)?;
    let ages: BTreeMap<String, f64> = sc.ages.iter().map(|(k, v)| (k.clone(), *v as f64)).collect();
    let n = write_records(&run, &sc.cohort.records, &ages)?;
    let truth: Vec<TruthRow> = sc
        .cohort
        .records
        .iter()
        .map(|r| {
            let id = &r.record_id;
            let (t, p) = (&sc.truth[id], &sc.params[id]);
            TruthRow {
                record_id: id.clone(),
                age_group: r.age_group.map_or(0, |g| g.index()),
                age: sc.ages[id],
                breathing_rate_bpm: t.breathing_rate,
                p_amplitude_mv: p.wave_amplitudes.p,
                sdnn_target_ms: p.sdnn_target,
                mean_hr_bpm: p.mean_hr,
                n_beats: t.r_times.len(),
            }
        })
        .collect();
    run.write_csv("truth.csv", &csv_string(&truth)?)?;
    println!("synth: {n} records in {}", run.dir.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct IngestSummary {
    n_records: usize,
    excluded_missing_age: usize,
    group_counts: Vec<usize>,
}

fn ingest(cli: &Cli, a: &IngestArgs) -> Result<()> {
    let run = Run::start(&cli.out, "ingest", cli.seed, a, &[("manifest", &a.manifest)])?;
    let rows = signal_io::read_manifest(&a.manifest)?;
    let cohort = signal_io::load_cohort(&a.manifest)?;
    let ages: BTreeMap<String, f64> = rows
        .iter()
        .filter_map(|r| Some((r.record_id.clone(), r.age?)))
        .collect();
    let n = write_records(&run, &cohort.records, &ages)?;
    let summary = IngestSummary {
        n_records: n,
        excluded_missing_age: cohort.excluded_missing_age,
        group_counts: cohort.group_counts().to_vec(),
    };
    run.write_json("summary.json", "ingest_summary", &summary)?;
    println!(
        "ingest: {n} records, {} without age excluded",
        cohort.excluded_missing_age
    );
    Ok(())
}

fn features(cli: &Cli, a: &FeaturesArgs) -> Result<()> {
    let run = Run::start(&cli.out, "features", cli.seed, a, &[("manifest", &a.manifest)])?;
    let cohort = signal_io::load_cohort(&a.manifest)?;
    let vectors: Vec<(FeatureVector, bool)> = cohort
        .records
        .par_iter()
        .map(|r| match features::record_feature_vector(r) {
            Ok(v) => (v, true),
            Err(e) => {
                eprintln!("warning: {}: {e}; all features missing", r.record_id);
                (
                    FeatureVector {
                        record_id: r.record_id.clone(),
                        values: vec![None; FEATURE_NAMES.len()],
                    },
                    false,
                )
            }
        })
        .collect();
    let failed = vectors.iter().filter(|(_, ok)| !ok).count();
    let groups = cohort.records.iter().map(|r| r.age_group.map(|g| g.index())).collect();
    let table = FeatureTable::from_vectors(vectors.into_iter().map(|(v, _)| v).collect(), groups);
    table.write_csv(&run.path("features.csv"), &run.preamble())?;
    println!("features: {} records, {failed} without features", table.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    assignment: SplitAssignment,
    /// Per age group: records in train, valid and test.
    counts: BTreeMap<usize, [usize; 3]>,
}

impl SplitFile {
    fn ids(&self, split: Split) -> Vec<&str> {
        self.assignment.ids(split)
    }
}

fn split(cli: &Cli, a: &SplitArgs) -> Result<()> {
    let ratios = match a.ratios[..] {
        [tr, va, te] => (tr, va, te),
        _ => return Err(CliError::usage("--ratios takes three fractions")),
    };
    if a.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (a.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CliError::usage("--ratios must be fractions summing to 1"));
    }
    let run = Run::start(&cli.out, "split", cli.seed, a, &[("manifest", &a.manifest)])?;
    let labels = manifest_groups(&a.manifest)?;
    let assignment = eval::stratified_split(&labels, ratios, cli.seed)?;
    let mut counts: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    for (id, s) in &assignment.0 {
        let c = counts.entry(labels[id]).or_default();
        c[match s {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }] += 1;
    }
    let file = SplitFile { assignment, counts };
    run.write_json("split.json", SPLIT_KIND, &file)?;
    println!(
        "split: {} train, {} valid, {} test",
        file.ids(Split::Train).len(),
        file.ids(Split::Valid).len(),
        file.ids(Split::Test).len()
    );
    Ok(())
}

/// Dense rows and labels of the labelled table rows assigned to `split`.
fn table_subset(
    table: &FeatureTable,
    split: &SplitFile,
    which: Split,
    mapping: Option<&GroupMapping>,
) -> (Vec<String>, Vec<Vec<f64>>, Vec<usize>) {
    let dense = table.dense();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, id) in table.record_ids.iter().enumerate() {
        if let (Some(g), Some(s)) = (table.groups[i], split.assignment.get(id)) {
            if s == which {
                ids.push(id.clone());
                rows.push(dense[i].clone());
                labels.push(map_label(g, mapping));
            }
        }
    }
    (ids, rows, labels)
}

#[derive(Debug, Serialize)]
struct GbdtTraining<'a> {
    n_train: usize,
    n_valid: usize,
    n_rounds: usize,
    valid_auc: &'a [f64],
}

fn train_gbdt(cli: &Cli, a: &TrainGbdtArgs) -> Result<()> {
    let mapping = training_mapping(a.groups);
    let n_classes = n_classes(mapping.as_ref());
    let mut cfg = TrainConfig {
        n_classes,
        seed: cli.seed,
        ..TrainConfig::default()
    };
    if let Some(v) = a.rounds {
        cfg.n_rounds = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.max_depth {
        cfg.max_depth = v;
    }
    if let Some(v) = a.max_leaves {
        cfg.max_leaves = v;
    }
    if let Some(v) = a.min_child_weight {
        cfg.min_child_weight = v;
    }
    if let Some(p) = a.patience {
        cfg.early_stopping_rounds = (p > 0).then_some(p);
    }
    let params = serde_json::json!({ "args": a, "config": cfg });
    let run = Run::start(
        &cli.out,
        "train-gbdt",
        cli.seed,
        &params,
        &[("features", &a.features), ("split", &a.split)],
    )?;
    let table = FeatureTable::read_csv(&a.features)?;
    let split: SplitFile = read_json(&a.split, SPLIT_KIND)?;
    let (_, rows, _) = table_subset(&table, &split, Split::Train, None);
    let present: Vec<String> = table
        .names
        .iter()
        .enumerate()
        .filter(|(j, name)| {
            let any = rows.iter().any(|r| !r[*j].is_nan());
            if !any {
                eprintln!("warning: {name} is missing for every training record; left out of the model");
            }
            any
        })
        .map(|(_, n)| n.clone())
        .collect();
    let table = table.select_columns(&present)?;
    let (_, rows, labels) = table_subset(&table, &split, Split::Train, mapping.as_ref());
    let (_, vrows, vlabels) = table_subset(&table, &split, Split::Valid, mapping.as_ref());
    if rows.is_empty() {
        return Err(CliError::usage(
            "the split has no labelled training records in this feature table",
        ));
    }
    let valid = (!vrows.is_empty()).then(|| TrainData::new(&vrows, &vlabels));
    let model = match a.balance {
        BalanceArg::None => gbdt::fit(&table.names, TrainData::new(&rows, &labels), &cfg, valid)?,
        BalanceArg::Oversample => {
            let (x, y) = gbdt::rebalance_oversample(&rows, &labels, n_classes, cli.seed)?;
            gbdt::fit(&table.names, TrainData::new(&x, &y), &cfg, valid)?
        }
        BalanceArg::Weights => {
            let cw = gbdt::inverse_frequency_weights(&labels, n_classes)?;
            let w: Vec<f64> = labels.iter().map(|&l| cw[l]).collect();
            gbdt::fit(
                &table.names,
                TrainData::new(&rows, &labels).with_weights(&w),
                &cfg,
                valid,
            )?
        }
    };
    run.write_json("model.json", GBDT_KIND, &model)?;
    let info = GbdtTraining {
        n_train: rows.len(),
        n_valid: vrows.len(),
        n_rounds: model.rounds.len(),
        valid_auc: &model.valid_auc,
    };
    run.write_json("training.json", "gbdt_training", &info)?;
    println!(
        "train-gbdt: {} rounds, best validation macro-AUC {}",
        model.rounds.len(),
        model
            .valid_auc
            .iter()
            .copied()
            .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            .map_or("n/a".to_string(), |v| format!("{v:.4}"))
    );
    Ok(())
}

/// Loads a cohort and brings every record to the network rate.
fn network_signals(manifest: &Path) -> Result<Cohort> {
    let mut cohort = signal_io::load_cohort(manifest)?;
    cohort.records = cohort
        .records
        .par_iter()
        .map(|r| signal_io::resample(r, refnet::NET_FS))
        .collect::<ecg_aging::Result<Vec<_>>>()?;
    Ok(cohort)
}

fn cohort_subset(
    cohort: &Cohort,
    split: &SplitFile,
    which: Split,
    mapping: Option<&GroupMapping>,
) -> (Vec<String>, Vec<Vec<f64>>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut signals = Vec::new();
    let mut labels = Vec::new();
    for r in &cohort.records {
        if let (Some(g), Some(s)) = (r.age_group, split.assignment.get(&r.record_id)) {
            if s == which {
                ids.push(r.record_id.clone());
                signals.push(r.samples.clone());
                labels.push(map_label(g.index(), mapping));
            }
        }
    }
    (ids, signals, labels)
}

#[derive(Debug, Serialize, Deserialize)]
struct RefnetHistory {
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
}

fn train_refnet(cli: &Cli, a: &TrainRefnetArgs) -> Result<()> {
    let mapping = training_mapping(a.groups);
    let n_classes = n_classes(mapping.as_ref());
    let spec = NetSpec {
        n_classes,
        seed: cli.seed,
        ..NetSpec::default()
    };
    let mut cfg = FitConfig {
        loss: match a.loss {
            LossArg::Focal => LossSpec::focal(),
            LossArg::Ce => LossSpec::CrossEntropy,
        },
        lr: a.learning_rate,
        seed: cli.seed,
        ..FitConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(c) = a.crops_per_record {
        cfg.crops_per_record = c;
    }
    let cohort = network_signals(&a.manifest)?;
    let split: SplitFile = read_json(&a.split, SPLIT_KIND)?;
    let (_, mut xtr, mut ytr) = cohort_subset(&cohort, &split, Split::Train, mapping.as_ref());
    let (_, xva, yva) = cohort_subset(&cohort, &split, Split::Valid, mapping.as_ref());
    if xtr.is_empty() {
        return Err(CliError::usage(
            "the split has no labelled training records in this cohort",
        ));
    }
    match a.balance {
        BalanceArg::None => {}
        BalanceArg::Weights => cfg.class_weights = Some(gbdt::inverse_frequency_weights(&ytr, n_classes)?),
        BalanceArg::Oversample => {
            // Record indices ride through the row oversampler as one-column rows.
            let idx: Vec<Vec<f64>> = (0..xtr.len()).map(|i| vec![i as f64]).collect();
            let (picked, labels) = gbdt::rebalance_oversample(&idx, &ytr, n_classes, cli.seed)?;
            xtr = picked.iter().map(|r| xtr[r[0] as usize].clone()).collect();
            ytr = labels;
        }
    }
    let params = serde_json::json!({ "args": a, "net": spec, "fit": cfg });
    let run = Run::start(
        &cli.out,
        "train-refnet",
        cli.seed,
        &params,
        &[("manifest", &a.manifest), ("split", &a.split)],
    )?;
    let valid = (!xva.is_empty()).then(|| CropData {
        signals: &xva,
        labels: &yva,
    });
    let trained = refnet::fit(
        CropData {
            signals: &xtr,
            labels: &ytr,
        },
        valid,
        &spec,
        &cfg,
    )?;
    run.write_json("model.json", REFNET_KIND, &trained.net)?;
    let hist = RefnetHistory {
        history: trained.history,
        best_epoch: trained.best_epoch,
    };
    run.write_json("history.json", "refnet_history", &hist)?;
    let best = hist
        .best_epoch
        .and_then(|e| hist.history.get(e))
        .and_then(|h| h.valid_auc)
        .map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "train-refnet: {} epochs, best epoch {:?}, validation macro-AUC {best}",
        hist.history.len(),
        hist.best_epoch
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Metrics {
    model_kind: String,
    subset: Split,
    record_ids: Vec<String>,
    report: MetricReport,
}

/// Mapping from model classes back to the four consolidated groups, when
/// the model predicts all 15.
fn model_labels(
    n_model_classes: usize,
    group_map: Option<&str>,
) -> Result<(Option<GroupMapping>, Option<GroupMapping>)> {
    let custom = group_map.map(GroupMapping::parse).transpose()?;
    let four = custom.unwrap_or_else(GroupMapping::default_four);
    match n_model_classes {
        AgeGroup::COUNT => Ok((None, Some(four))),
        n if n == four.n_groups => Ok((Some(four), None)),
        n => Err(CliError::usage(format!(
            "model has {n} classes; expected 15 or the mapped group count"
        ))),
    }
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let kind = artifact_kind(&a.model)?;
    let mut inputs: Vec<(&str, &Path)> = vec![("model", &a.model), ("split", &a.split)];
    let split: SplitFile = read_json(&a.split, SPLIT_KIND)?;
    let which = Split::from(a.subset);
    let (ids, scores, labels, consolidate) = match kind.as_str() {
        GBDT_KIND => {
            let features = a
                .features
                .as_deref()
                .ok_or_else(|| CliError::usage("tree models are evaluated on --features"))?;
            inputs.push(("features", features));
            let model: TreeEnsemble = read_json(&a.model, GBDT_KIND)?;
            let (label_map, consolidate) = model_labels(model.n_classes, a.group_map.as_deref())?;
            let table = FeatureTable::read_csv(features)?.select_columns(&model.feature_names)?;
            let (ids, rows, labels) = table_subset(&table, &split, which, label_map.as_ref());
            (ids, model.predict_proba_batch(&rows)?, labels, consolidate)
        }
        REFNET_KIND => {
            let manifest = a
                .manifest
                .as_deref()
                .ok_or_else(|| CliError::usage("the network is evaluated on --manifest"))?;
            inputs.push(("manifest", manifest));
            let net: Net = read_json(&a.model, REFNET_KIND)?;
            let (label_map, consolidate) = model_labels(net.spec.n_classes, a.group_map.as_deref())?;
            let cohort = network_signals(manifest)?;
            let (ids, signals, labels) = cohort_subset(&cohort, &split, which, label_map.as_ref());
            let scores = signals
                .par_iter()
                .map(|s| refnet::predict_record(&net, s))
                .collect::<ecg_aging::Result<Vec<_>>>()?;
            (ids, scores, labels, consolidate)
        }
        other => {
            return Err(CliError::WrongArtifact {
                path: a.model.clone(),
                expected: "gbdt_model or refnet_model",
                found: other.to_string(),
            })
        }
    };
    if labels.is_empty() {
        return Err(CliError::usage(format!("no labelled records in the {which} subset")));
    }
    let run = Run::start(&cli.out, "evaluate", cli.seed, a, &inputs)?;
    let report = eval::metric_report(&scores, &labels, a.n_bootstrap, cli.seed, consolidate.as_ref())?;
    let table = report.to_table();
    let metrics = Metrics {
        model_kind: kind,
        subset: which,
        record_ids: ids,
        report,
    };
    run.write_json("metrics.json", METRICS_KIND, &metrics)?;
    run.write_text("metrics.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn shap_summary(cli: &Cli, a: &ShapArgs) -> Result<()> {
    let run = Run::start(
        &cli.out,
        "shap-summary",
        cli.seed,
        a,
        &[("model", &a.model), ("features", &a.features), ("split", &a.split)],
    )?;
    let model: TreeEnsemble = read_json(&a.model, GBDT_KIND)?;
    let table = FeatureTable::read_csv(&a.features)?.select_columns(&model.feature_names)?;
    let split: SplitFile = read_json(&a.split, SPLIT_KIND)?;
    let (_, rows, _) = table_subset(&table, &split, Split::from(a.subset), None);
    let summaries = (0..model.n_classes)
        .map(|c| treeshap::summarize_class(&model, &rows, c, a.top))
        .collect::<ecg_aging::Result<Vec<ShapSummary>>>()?;
    run.write_json("summary.json", SHAP_KIND, &summaries)?;
    for s in &summaries {
        println!("class {:2}: {}", s.class_id, s.top_names(a.top.min(5)).join(", "));
    }
    Ok(())
}

fn saliency(cli: &Cli, a: &SaliencyArgs) -> Result<()> {
    let run = Run::start(
        &cli.out,
        "saliency",
        cli.seed,
        a,
        &[("model", &a.model), ("manifest", &a.manifest), ("split", &a.split)],
    )?;
    let net: Net = read_json(&a.model, REFNET_KIND)?;
    if let Some(c) = a.target_class {
        if c >= net.spec.n_classes {
            return Err(CliError::usage(format!(
                "--target-class {c} exceeds the model's {} classes",
                net.spec.n_classes
            )));
        }
    }
    let cohort = network_signals(&a.manifest)?;
    let split: SplitFile = read_json(&a.split, SPLIT_KIND)?;
    let (ids, signals, _) = cohort_subset(&cohort, &split, Split::from(a.subset), None);
    let maps: Vec<AttributionMap> = ids
        .par_iter()
        .zip(&signals)
        .map(|(id, s)| {
            refnet::tile_starts(s.len(), net.spec.crop_len)
                .into_iter()
                .take(a.crops_per_record)
                .map(|st| refnet::saliency_map(&net, id, s, st, a.target_class))
                .collect::<ecg_aging::Result<Vec<_>>>()
        })
        .collect::<ecg_aging::Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    run.write_json("maps.json", SALIENCY_KIND, &maps)?;
    println!("saliency: {} maps from {} records", maps.len(), ids.len());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupDelineation {
    group: usize,
    beat: Beat,
    topk_segments: Vec<attrib::Segment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AggregateFile {
    beats: Vec<AggregatedBeat>,
    delineation: Vec<GroupDelineation>,
    segments: SegmentStats,
}

fn read_maps(path: &Path) -> Result<Vec<AttributionMap>> {
    if artifact_kind(path).ok().as_deref() == Some(SALIENCY_KIND) {
        let maps: Vec<AttributionMap> = read_json(path, SALIENCY_KIND)?;
        for m in &maps {
            m.validate()?;
        }
        Ok(maps)
    } else {
        Ok(AttributionMap::read_json(path)?)
    }
}

fn aggregate(cli: &Cli, a: &AggregateArgs) -> Result<()> {
    if a.k_top == 0 {
        return Err(CliError::usage("--k-top must be at least 1"));
    }
    if !(a.window_pre_ms >= 0.0 && a.window_post_ms >= 0.0) {
        return Err(CliError::usage("window bounds must be non-negative"));
    }
    let run = Run::start(
        &cli.out,
        "aggregate",
        cli.seed,
        a,
        &[("maps", &a.maps), ("manifest", &a.manifest)],
    )?;
    let maps = read_maps(&a.maps)?;
    let groups = manifest_groups(&a.manifest)?;
    let fs = match maps.first() {
        Some(m) => m.fs,
        None => return Err(CliError::usage("no attribution maps to aggregate")),
    };
    if maps.iter().any(|m| m.fs != fs) {
        return Err(ecg_aging::Error::Invalid("attribution maps mix sampling rates".into()).into());
    }
    let window = BeatWindow {
        pre_ms: a.window_pre_ms,
        post_ms: a.window_post_ms,
    };
    let per_map: Vec<Option<(usize, String, Vec<attrib::BeatPair>)>> = maps
        .par_iter()
        .map(|m| {
            let g = *groups.get(&m.record_id)?;
            let peaks = beatdetect::detect_rpeaks_with(&m.signal, fs as f64, &DetectorConfig::default()).ok()?;
            let pairs = attrib::align_beats(&m.signal, &m.attribution, &peaks, fs as f64, window).ok()?;
            Some((g, m.record_id.clone(), pairs))
        })
        .collect();
    let mut subjects: BTreeMap<usize, BTreeMap<String, Vec<attrib::BeatPair>>> = BTreeMap::new();
    let mut unused = 0;
    for item in per_map {
        match item {
            Some((g, id, pairs)) => subjects.entry(g).or_default().entry(id).or_default().extend(pairs),
            None => unused += 1,
        }
    }
    let beats = subjects
        .into_iter()
        .map(|(g, subs)| {
            let subs: Vec<SubjectBeats> = subs
                .into_iter()
                .map(|(subject, pairs)| SubjectBeats { subject, pairs })
                .collect();
            attrib::aggregate_group(g, &subs, fs as f64, window, a.weighting.into(), a.k_top)
        })
        .collect::<ecg_aging::Result<Vec<_>>>()?;
    let delineation = beats
        .iter()
        .map(|agg| {
            let beat = attrib::delineate_aggregated(agg);
            GroupDelineation {
                group: agg.group,
                beat,
                topk_segments: agg
                    .topk_indices
                    .iter()
                    .map(|&i| attrib::assign_segment(&beat, agg.mean_signal.len(), agg.fs, i))
                    .collect(),
            }
        })
        .collect();
    let segments = attrib::segment_stats(&beats);
    let file = AggregateFile {
        beats,
        delineation,
        segments,
    };
    run.write_json("aggregated.json", AGGREGATE_KIND, &file)?;
    println!(
        "aggregate: {} groups from {} maps ({unused} without group or beats)",
        file.beats.len(),
        maps.len()
    );
    for (s, p) in &file.segments.percentages {
        println!("  {:9} {p:6.2} %", s.to_string());
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct HistogramRow {
    group: usize,
    label: String,
    count: usize,
}

#[derive(Debug, Serialize)]
struct AucRow {
    class: usize,
    auc: Option<f64>,
}

#[derive(Debug, Serialize)]
struct RankingRow<'a> {
    class: usize,
    rank: usize,
    feature: &'a str,
    mean_abs_phi: f64,
}

#[derive(Debug, Serialize)]
struct BeeswarmRow<'a> {
    class: usize,
    feature: &'a str,
    sample: usize,
    phi: f64,
    value: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BeatRow {
    group: usize,
    index: usize,
    time_ms: f64,
    mean_signal: f64,
    mean_attribution: f64,
    top_k: bool,
}

#[derive(Debug, Serialize)]
struct SegmentRow {
    segment: String,
    count: usize,
    percentage: f64,
}

fn report(cli: &Cli, a: &ReportArgs) -> Result<()> {
    let mut inputs: Vec<(&str, &Path)> = Vec::new();
    for (role, p) in [
        ("manifest", &a.manifest),
        ("metrics", &a.metrics),
        ("shap", &a.shap),
        ("aggregate", &a.aggregate),
    ] {
        if let Some(p) = p {
            inputs.push((role, p));
        }
    }
    if inputs.is_empty() {
        return Err(CliError::usage(
            "report needs at least one of --manifest, --metrics, --shap, --aggregate",
        ));
    }
    let run = Run::start(&cli.out, "report", cli.seed, a, &inputs)?;
    let mut written = Vec::new();
    if let Some(p) = &a.manifest {
        let groups = manifest_groups(p)?;
        let mut counts = [0usize; AgeGroup::COUNT];
        for g in groups.values() {
            counts[*g] += 1;
        }
        let rows: Vec<HistogramRow> = AgeGroup::all()
            .map(|g| HistogramRow {
                group: g.index(),
                label: g.label(),
                count: counts[g.index()],
            })
            .collect();
        written.push(run.write_csv("age_histogram.csv", &csv_string(&rows)?)?);
    }
    if let Some(p) = &a.metrics {
        let m: Metrics = read_json(p, METRICS_KIND)?;
        let rows: Vec<AucRow> = m
            .report
            .per_class_auc
            .iter()
            .enumerate()
            .map(|(class, auc)| AucRow { class, auc: *auc })
            .collect();
        written.push(run.write_csv("auc_bars.csv", &csv_string(&rows)?)?);
    }
    if let Some(p) = &a.shap {
        let summaries: Vec<ShapSummary> = read_json(p, SHAP_KIND)?;
        let mut ranking = Vec::new();
        let mut swarm = Vec::new();
        for s in &summaries {
            for (rank, f) in s.ranking.iter().take(s.top.len()).enumerate() {
                ranking.push(RankingRow {
                    class: s.class_id,
                    rank: rank + 1,
                    feature: &f.name,
                    mean_abs_phi: f.mean_abs_phi,
                });
            }
            for f in &s.top {
                for (i, (phi, value)) in f.phi.iter().zip(&f.value).enumerate() {
                    swarm.push(BeeswarmRow {
                        class: s.class_id,
                        feature: &f.name,
                        sample: i,
                        phi: *phi,
                        value: *value,
                    });
                }
            }
        }
        written.push(run.write_csv("shap_ranking.csv", &csv_string(&ranking)?)?);
        written.push(run.write_csv("shap_beeswarm.csv", &csv_string(&swarm)?)?);
    }
    if let Some(p) = &a.aggregate {
        let agg: AggregateFile = read_json(p, AGGREGATE_KIND)?;
        let mut rows = Vec::new();
        for b in &agg.beats {
            for i in 0..b.mean_signal.len() {
                rows.push(BeatRow {
                    group: b.group,
                    index: i,
                    time_ms: b.time_ms(i),
                    mean_signal: b.mean_signal[i],
                    mean_attribution: b.mean_attribution[i],
                    top_k: b.topk_indices.contains(&i),
                });
            }
        }
        written.push(run.write_csv("mean_heartbeats.csv", &csv_string(&rows)?)?);
        let seg: Vec<SegmentRow> = agg
            .segments
            .counts
            .iter()
            .map(|(s, c)| SegmentRow {
                segment: s.to_string(),
                count: *c,
                percentage: agg.segments.percentage(*s),
            })
            .collect();
        written.push(run.write_csv("segments.csv", &csv_string(&seg)?)?);
    }
    for w in written {
        println!("report: {}", w.display());
    }
    Ok(())
}
