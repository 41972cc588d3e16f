//! Acceptance suite. Every criterion prints one PASS/FAIL line to stderr
//! (outside the test harness capture) and the test fails if any criterion
//! does.
//!
//! `cargo test -p ecg-aging-cli --test acceptance`

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ecg_aging::attrib::{self, SubjectBeats, Weighting};
use ecg_aging::beatdetect::{self, BeatWindow};
use ecg_aging::eval::{self, Split};
use ecg_aging::features::{self, FeatureTable, NnSeries};
use ecg_aging::gbdt::{self, TrainConfig, TrainData, Tree, TreeNode};
use ecg_aging::refnet::{self, ConvBlock, CropData, FitConfig, LossSpec, Net, NetSpec, Pooling};
use ecg_aging::signal_io::{self, EcgRecord};
use ecg_aging::synthgen::{self, RrModel, SynthParams, TrendSpec};
use ecg_aging::treeshap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, Box<dyn Fn(&mut Vec<String>) -> Outcome>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn hrv_oracle() -> Outcome {
    let rr = [800.0, 850.0, 800.0, 850.0];
    let t = features::time_domain_hrv(&NnSeries::from_rr(rr.to_vec()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mean = rr.iter().sum::<f64>() / 4.0;
    let sdnn = (rr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
    let ok = close(t.sdnn, sdnn, 1e-6)
        && close(t.sdnn, 28.8675, 1e-4)
        && close(t.rmssd, 50.0, 1e-6)
        && close(t.pnn20, 100.0, 1e-6)
        && close(t.pnn50, 0.0, 1e-6)
        && close(t.mcvnn, 25.0 / 825.0, 1e-6)
        && close(t.mcvnn, 0.030303, 1e-6);
    check(
        ok,
        format!(
            "SDNN {:.6} RMSSD {:.6} pNN20 {} pNN50 {} MCVNN {:.6}",
            t.sdnn, t.rmssd, t.pnn20, t.pnn50, t.mcvnn
        ),
    )
}

fn white(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn dfa_calibration() -> Outcome {
    let scales = features::ALPHA1_SCALES.0..=features::ALPHA1_SCALES.1;
    let mean = |walk: bool| {
        (0..20u64)
            .map(|s| {
                let mut x = white(2048, s);
                if walk {
                    let mut acc = 0.0;
                    x.iter_mut().for_each(|v| {
                        acc += *v;
                        *v = acc;
                    });
                }
                features::dfa_exponent(&x, scales.clone()).unwrap_or(f64::NAN)
            })
            .sum::<f64>()
            / 20.0
    };
    let (w, i) = (mean(false), mean(true));
    check(
        close(w, 0.5, 0.05) && close(i, 1.5, 0.1),
        format!("alpha1 white {w:.3} integrated {i:.3}"),
    )
}

fn detector_accuracy() -> Outcome {
    let mut worst: f64 = 1.0;
    for seed in 0..20u64 {
        let p = SynthParams {
            mean_hr: 55.0 + (seed % 5) as f64 * 8.0,
            rr_correlation: if seed % 2 == 0 { RrModel::White } else { RrModel::Pink },
            seed,
            ..SynthParams::default()
        };
        let (rec, truth) = synthgen::synth_record(&format!("det{seed}"), &p).map_err(|e| e.to_string())?;
        let noisy = synthgen::add_noise_snr(&rec, 10.0, 1000 + seed);
        let found = beatdetect::detect_rpeaks(&noisy).map_err(|e| e.to_string())?;
        let tol = (0.05 * rec.fs as f64).round() as usize;
        worst = worst.min(beatdetect::match_peaks(&found, &truth.r_times, tol).f1());
    }
    check(worst >= 0.99, format!("lowest F1 over 20 records {worst:.4}"))
}

fn grow(nodes: &mut Vec<TreeNode>, rng: &mut ChaCha8Rng, depth: usize, n_features: usize) -> usize {
    let id = nodes.len();
    nodes.push(TreeNode::Leaf { value: 0.0, cover: 0.0 });
    if depth < 3 && rng.random::<f64>() < 0.75 {
        let feature = rng.random_range(0..n_features);
        let threshold = rng.random::<f64>();
        let missing_left = rng.random::<bool>();
        let left = grow(nodes, rng, depth + 1, n_features);
        let right = grow(nodes, rng, depth + 1, n_features);
        let cover = nodes[left].cover() + nodes[right].cover();
        nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            missing_left,
            cover,
        };
    } else {
        nodes[id] = TreeNode::Leaf {
            value: rng.random_range(-2.0..2.0),
            cover: rng.random_range(1.0..20.0),
        };
    }
    id
}

fn random_x(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random::<f64>() < 0.15 {
                f64::NAN
            } else {
                rng.random()
            }
        })
        .collect()
}

fn cond_expectation(tree: &Tree, node: usize, x: &[f64], known: u32) -> f64 {
    match tree.nodes[node] {
        TreeNode::Leaf { value, .. } => value,
        TreeNode::Split {
            feature,
            left,
            right,
            cover,
            ..
        } => {
            if known & (1 << feature) != 0 {
                cond_expectation(tree, tree.route(node, x).unwrap(), x, known)
            } else {
                (tree.nodes[left].cover() * cond_expectation(tree, left, x, known)
                    + tree.nodes[right].cover() * cond_expectation(tree, right, x, known))
                    / cover
            }
        }
    }
}

fn shapley_by_enumeration(tree: &Tree, x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    (0..m)
        .map(|i| {
            (0..(1u32 << m))
                .filter(|s| s & (1 << i) == 0)
                .map(|s| {
                    let k = s.count_ones() as usize;
                    fact(k) * fact(m - k - 1) / fact(m)
                        * (cond_expectation(tree, 0, x, s | (1 << i)) - cond_expectation(tree, 0, x, s))
                })
                .sum()
        })
        .collect()
}

fn treeshap_exactness() -> Outcome {
    let mut oracle_gap: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(1..=5);
        let mut nodes = Vec::new();
        grow(&mut nodes, &mut rng, 0, m);
        let tree = Tree { nodes };
        for _ in 0..10 {
            let x = random_x(&mut rng, m);
            let mut phi = vec![0.0; m];
            treeshap::tree_shap(&tree, &x, &mut phi);
            for (a, b) in phi.iter().zip(shapley_by_enumeration(&tree, &x)) {
                oracle_gap = oracle_gap.max((a - b).abs());
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rows: Vec<Vec<f64>> = (0..300).map(|_| random_x(&mut rng, 6)).collect();
    let labels: Vec<usize> = rows
        .iter()
        .map(|r| ((r[0].max(0.0) + r[1].max(0.0)) * 1.5).floor().min(2.0) as usize)
        .collect();
    let names: Vec<String> = (0..6).map(|j| format!("f{j}")).collect();
    let cfg = TrainConfig {
        n_classes: 3,
        n_rounds: 40,
        learning_rate: 0.1,
        max_depth: 4,
        max_leaves: 8,
        early_stopping_rounds: None,
        ..TrainConfig::default()
    };
    let model = gbdt::fit(&names, TrainData::new(&rows, &labels), &cfg, None).map_err(|e| e.to_string())?;
    let mut local_gap: f64 = 0.0;
    for _ in 0..1000 {
        let x = random_x(&mut rng, 6);
        for c in 0..3 {
            let e = treeshap::explain_instance(&model, &x, c).map_err(|e| e.to_string())?;
            local_gap = local_gap.max(e.local_accuracy_gap().abs());
        }
    }
    check(
        oracle_gap < 1e-9 && local_gap < 1e-9,
        format!("oracle gap {oracle_gap:.1e} on 50 trees, local accuracy gap {local_gap:.1e} on 1000 instances"),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    num / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn gradient_correctness() -> Outcome {
    let x: Vec<f64> = (0..48)
        .map(|i| (i as f64 * 0.3).sin() + 0.2 * (i as f64 * 1.7).cos())
        .collect();
    let h = 1e-5;
    let mut worst_param: f64 = 0.0;
    let mut worst_input: f64 = 0.0;
    for pooling in [Pooling::Average, Pooling::Max] {
        let spec = NetSpec {
            crop_len: 48,
            blocks: vec![
                ConvBlock {
                    filters: 3,
                    kernel: 5,
                    stride: 2,
                },
                ConvBlock {
                    filters: 4,
                    kernel: 3,
                    stride: 2,
                },
            ],
            pooling,
            n_classes: 4,
            seed: 9,
        };
        let mut net = Net::new(spec).map_err(|e| e.to_string())?;
        for loss in [LossSpec::CrossEntropy, LossSpec::focal()] {
            let (_, g) = net.loss_and_grad(&x, 2, &loss, 1.0).map_err(|e| e.to_string())?;
            let mut fd = Vec::with_capacity(g.len());
            for i in 0..net.n_params() {
                let orig = net.params[i];
                net.params[i] = orig + h;
                let lp = net.loss_and_grad(&x, 2, &loss, 1.0).unwrap().0;
                net.params[i] = orig - h;
                let lm = net.loss_and_grad(&x, 2, &loss, 1.0).unwrap().0;
                net.params[i] = orig;
                fd.push((lp - lm) / (2.0 * h));
            }
            worst_param = worst_param.max(rel_err(&g, &fd));
        }
        let g = net.input_gradient(&x, 1).map_err(|e| e.to_string())?;
        let fd: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut p, mut m) = (x.clone(), x.clone());
                p[i] += h;
                m[i] -= h;
                (net.forward(&p).unwrap()[1] - net.forward(&m).unwrap()[1]) / (2.0 * h)
            })
            .collect();
        worst_input = worst_input.max(rel_err(&g, &fd));
    }
    let z = [0.3, -1.2, 2.5, 0.0];
    let (a, ga) = refnet::compute_loss(&z, 1, &LossSpec::CrossEntropy, 1.0).map_err(|e| e.to_string())?;
    let (b, gb) = refnet::compute_loss(&z, 1, &LossSpec::Focal { gamma: 0.0 }, 1.0).map_err(|e| e.to_string())?;
    let focal_gap = ga
        .iter()
        .zip(&gb)
        .map(|(p, q)| (p - q).abs())
        .fold((a - b).abs(), f64::max);
    check(
        worst_param < 1e-5 && worst_input < 1e-5 && focal_gap <= 1e-12,
        format!("param rel err {worst_param:.1e}, input rel err {worst_input:.1e}, focal(0) vs CE {focal_gap:.1e}"),
    )
}

struct Cohort {
    records: Vec<EcgRecord>,
    labels: Vec<usize>,
    split: eval::SplitAssignment,
}

impl Cohort {
    fn indices(&self, s: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.split.get(&self.records[i].record_id) == Some(s))
            .collect()
    }
}

fn gbdt_stage(c: &Cohort, lines: &mut Vec<String>) -> Result<(f64, usize), String> {
    let e = |e: ecg_aging::Error| e.to_string();
    let vectors = c
        .records
        .par_iter()
        .map(features::record_feature_vector)
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let table = FeatureTable::from_vectors(vectors, c.labels.iter().map(|&l| Some(l)).collect());
    let (tr, va, te) = (
        table.select(&c.indices(Split::Train)),
        table.select(&c.indices(Split::Valid)),
        table.select(&c.indices(Split::Test)),
    );
    let y = |t: &FeatureTable| t.groups.iter().map(|g| g.unwrap()).collect::<Vec<_>>();
    let xtr = tr.dense();
    let (xo, yo) = gbdt::rebalance_oversample(&xtr, &y(&tr), 15, 1).map_err(e)?;
    let xva = va.dense();
    let yva = y(&va);
    let model = gbdt::fit(
        &tr.names,
        TrainData::new(&xo, &yo),
        &TrainConfig {
            seed: 1,
            ..TrainConfig::default()
        },
        Some(TrainData::new(&xva, &yva)),
    )
    .map_err(e)?;
    let p = model.predict_proba_batch(&te.dense()).map_err(e)?;
    let auc = eval::macro_auc(&p, &y(&te)).map_err(e)?.macro_auc;

    let mut hits = 0;
    for class in 0..15 {
        let s = treeshap::summarize_class(&model, &xtr, class, 10).map_err(e)?;
        let top = s.top_names(10);
        let found = top.contains(&"SR_p_mV") && top.contains(&"HRV_breathing_rate_bpm");
        hits += found as usize;
        if !found {
            lines.push(format!("    shap group {class}: top-10 {top:?}"));
        }
    }
    Ok((auc, hits))
}

fn refnet_stage(c: &Cohort, lines: &mut Vec<String>) -> Result<(f64, usize), String> {
    let e = |e: ecg_aging::Error| e.to_string();
    let low = c
        .records
        .par_iter()
        .map(|r| signal_io::resample(r, refnet::NET_FS))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let pick = |s: Split| {
        let idx = c.indices(s);
        let x: Vec<Vec<f64>> = idx.iter().map(|&i| low[i].samples.clone()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| c.labels[i]).collect();
        (x, y, idx)
    };
    let (xtr, ytr, itr) = pick(Split::Train);
    let (xva, yva, _) = pick(Split::Valid);
    let cfg = FitConfig {
        loss: LossSpec::CrossEntropy,
        seed: 1,
        ..FitConfig::default()
    };
    let trained = refnet::fit(
        CropData {
            signals: &xtr,
            labels: &ytr,
        },
        Some(CropData {
            signals: &xva,
            labels: &yva,
        }),
        &NetSpec::default(),
        &cfg,
    )
    .map_err(e)?;
    let net = &trained.net;
    let p = xva
        .par_iter()
        .map(|s| refnet::predict_record(net, s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let auc = eval::macro_auc(&p, &yva).map_err(e)?.macro_auc;

    let fs = refnet::NET_FS as f64;
    let window = BeatWindow {
        pre_ms: 300.0,
        post_ms: 500.0,
    };
    let subjects: Vec<(usize, SubjectBeats)> = itr
        .par_iter()
        .map(|&i| {
            let r = &low[i];
            let mut pairs = Vec::new();
            for start in refnet::tile_starts(r.samples.len(), net.spec.crop_len)
                .into_iter()
                .take(8)
            {
                let Ok(m) = refnet::saliency_map(net, &r.record_id, &r.samples, start, None) else {
                    continue;
                };
                let Ok(rp) = beatdetect::detect_rpeaks_with(&m.signal, fs, &Default::default()) else {
                    continue;
                };
                if let Ok(b) = attrib::align_beats(&m.signal, &m.attribution, &rp, fs, window) {
                    pairs.extend(b);
                }
            }
            (
                c.labels[i],
                SubjectBeats {
                    subject: r.record_id.clone(),
                    pairs,
                },
            )
        })
        .collect();
    let mut hits = 0;
    for g in 0..15 {
        let group: Vec<SubjectBeats> = subjects
            .iter()
            .filter(|(l, _)| *l == g)
            .map(|(_, s)| s.clone())
            .collect();
        let agg = attrib::aggregate_group(g, &group, fs, window, Weighting::PerSubject, 8).map_err(e)?;
        let times: Vec<f64> = agg.topk_indices.iter().map(|&i| agg.time_ms(i)).collect();
        let inside = times.iter().all(|t| (-280.0..=-120.0).contains(t));
        hits += inside as usize;
        if !inside {
            lines.push(format!("    saliency group {g}: top-8 at {times:?} ms"));
        }
    }
    Ok((auc, hits))
}

fn end_to_end(lines: &mut Vec<String>) -> Outcome {
    let sc = synthgen::synth_cohort(&TrendSpec::default(), 40, 1).map_err(|e| e.to_string())?;
    let records = sc.cohort.records;
    let labels: Vec<usize> = records.iter().map(|r| r.age_group.unwrap().index()).collect();
    let by_id: BTreeMap<String, usize> = records
        .iter()
        .map(|r| r.record_id.clone())
        .zip(labels.iter().copied())
        .collect();
    let split = eval::stratified_split(&by_id, eval::DEFAULT_RATIOS, 1).map_err(|e| e.to_string())?;
    let cohort = Cohort { records, labels, split };

    let (gbdt_auc, shap_hits) = gbdt_stage(&cohort, lines)?;
    let (net_auc, sal_hits) = refnet_stage(&cohort, lines)?;
    check(
        gbdt_auc >= 0.90 && net_auc >= 0.80 && shap_hits >= 12 && sal_hits >= 10,
        format!(
            "GBDT test macro-AUC {gbdt_auc:.3}, refnet valid macro-AUC {net_auc:.3}, SHAP {shap_hits}/15, saliency {sal_hits}/15"
        ),
    )
}

fn evaluation_invariants() -> Outcome {
    let e = |e: ecg_aging::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let labels: Vec<usize> = (0..3000).map(|i| i % 15).collect();
    let onehot = |sign: f64| -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&l| (0..15).map(|k| if k == l { sign } else { 0.0 }).collect())
            .collect()
    };
    let perfect = eval::macro_auc(&onehot(1.0), &labels).map_err(e)?.macro_auc;
    let inverted = eval::macro_auc(&onehot(-1.0), &labels).map_err(e)?.macro_auc;
    let noise: Vec<Vec<f64>> = labels.iter().map(|_| (0..15).map(|_| rng.random()).collect()).collect();
    let random = eval::macro_auc(&noise, &labels).map_err(e)?.macro_auc;

    let small: Vec<usize> = labels[..300].to_vec();
    let scores = &noise[..300];
    let metric = |s: &[Vec<f64>], l: &[usize]| eval::accuracy(s, l).ok();
    let a = eval::bootstrap_ci(metric, scores, &small, 200, 5).map_err(e)?;
    let b = eval::bootstrap_ci(metric, scores, &small, 200, 5).map_err(e)?;
    let d = eval::bootstrap_ci(metric, scores, &small, 200, 6).map_err(e)?;

    let ids: BTreeMap<String, usize> = (0..15 * 40).map(|i| (format!("r{i:04}"), i % 15)).collect();
    let split = eval::stratified_split(&ids, eval::DEFAULT_RATIOS, 4).map_err(e)?;
    let mut worst = 0i64;
    for g in 0..15 {
        for (s, frac) in Split::ALL.iter().zip([0.6, 0.2, 0.2]) {
            let n = ids
                .iter()
                .filter(|(id, &l)| l == g && split.get(id) == Some(*s))
                .count();
            worst = worst.max((n as f64 - 40.0 * frac).round().abs() as i64);
        }
    }
    check(
        perfect == 1.0 && inverted == 0.0 && close(random, 0.5, 0.05) && a == b && a != d && worst <= 1,
        format!(
            "AUC perfect {perfect} inverted {inverted} random {random:.3}; bootstrap same seed equal {}, new seed differs {}; split off by at most {worst}",
            a == b,
            a != d
        ),
    )
}

fn cli(out: &Path, args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_ecg-aging"))
        .arg("--out")
        .arg(out)
        .args(["--seed", "8"])
        .args(args)
        .env_remove("ECG_AGING_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)))
    }
}

fn cli_pipeline(out: &Path) -> Result<(), String> {
    let s = |rel: &str| out.join(rel).to_string_lossy().into_owned();
    let (manifest, features, split) = (s("synth/cohort.csv"), s("features/features.csv"), s("split/split.json"));
    cli(out, &["synth", "--n-per-group", "10", "--duration-s", "30"])?;
    cli(out, &["features", "--manifest", &manifest])?;
    cli(out, &["split", "--manifest", &manifest])?;
    cli(
        out,
        &[
            "train-gbdt",
            "--features",
            &features,
            "--split",
            &split,
            "--rounds",
            "30",
            "--min-child-weight",
            "0.1",
        ],
    )?;
    let gbdt = s("train-gbdt/model.json");
    cli(
        out,
        &[
            "evaluate",
            "--model",
            &gbdt,
            "--features",
            &features,
            "--split",
            &split,
            "--n-bootstrap",
            "100",
        ],
    )?;
    cli(
        out,
        &[
            "shap-summary",
            "--model",
            &gbdt,
            "--features",
            &features,
            "--split",
            &split,
        ],
    )?;
    cli(
        out,
        &[
            "train-refnet",
            "--manifest",
            &manifest,
            "--split",
            &split,
            "--loss",
            "ce",
            "--epochs",
            "1",
        ],
    )?;
    cli(
        out,
        &[
            "saliency",
            "--model",
            &s("train-refnet/model.json"),
            "--manifest",
            &manifest,
            "--split",
            &split,
        ],
    )?;
    cli(
        out,
        &["aggregate", "--maps", &s("saliency/maps.json"), "--manifest", &manifest],
    )
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn reproducibility() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_pipeline(a.path())?;
    cli_pipeline(b.path())?;
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    check(
        ta.len() == tb.len() && differing.is_empty(),
        format!(
            "{} artifacts compared, {} differ {:?}",
            ta.len(),
            differing.len(),
            differing
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: Vec<Criterion> = vec![
        ("HRV oracle suite", 1, Box::new(|_| hrv_oracle())),
        ("DFA calibration", 30, Box::new(|_| dfa_calibration())),
        ("Detector accuracy", 30, Box::new(|_| detector_accuracy())),
        ("TreeSHAP exactness", 60, Box::new(|_| treeshap_exactness())),
        ("Gradient correctness", 120, Box::new(|_| gradient_correctness())),
        ("End-to-end synthetic reproduction", 600, Box::new(end_to_end)),
        ("Evaluation invariants", 30, Box::new(|_| evaluation_invariants())),
        ("Reproducibility", 600, Box::new(|_| reproducibility())),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (name, budget, run) in criteria {
        let t0 = Instant::now();
        let mut notes = Vec::new();
        let outcome = run(&mut notes);
        let took = t0.elapsed();
        let in_time = took <= Duration::from_secs(budget);
        let (pass, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        let timing = format!("{:.1} s of {budget} s", took.as_secs_f64());
        let _ = writeln!(
            err,
            "{} {name}: {detail} [{timing}]",
            if pass { "PASS" } else { "FAIL" }
        );
        for n in notes {
            let _ = writeln!(err, "{n}");
        }
        if !pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
