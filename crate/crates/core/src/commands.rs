//! The `synth`, `train`, `generate`, `eval` and `check` commands.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::check::{run_checks, CheckResult};
use crate::config::{Generator, Resolved};
use crate::data::{
    read_field, read_manifest, split_indices, synth_group_study, synth_paired, synth_texture_pair, write_bytes, write_field,
    write_manifest, Group, ManifestEntry, RawArray, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    benjamini_hochberg, confusion_matrix, dominance, frechet_mean_field, heatmap_svg, histogram_svg, iou_significant,
    mean_matrix, permutation_test, reconstruction_error, EvalReport, ThresholdResult,
};
use crate::field::Field;
use crate::geometry::ManifoldKind;
use crate::train::{derive_seed, ChartPair, Checkpoint, Trainer};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const IO: i32 = 1;
    pub const VALIDATION: i32 = 2;
    pub const THRESHOLD: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::Shape(_)
        | Error::Divisibility { .. }
        | Error::OddChannels(_)
        | Error::EmptySplit(_)
        | Error::DegenerateGroup(_) => exit::VALIDATION,
        Error::NumericalAbort(_)
        | Error::NonFinite(_)
        | Error::ChartDomain { .. }
        | Error::CutLocus { .. }
        | Error::RejectionExhausted(_)
        | Error::SingularJacobian
        | Error::SingularCovariance(_)
        | Error::DegenerateBatch { .. } => exit::NUMERICAL,
        _ => exit::IO,
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the fully resolved configuration next to the outputs.
pub fn echo_config(r: &Resolved) -> Result<()> {
    create_dir(&r.config.out)?;
    write_bytes(&r.config.out.join("config.resolved.toml"), r.config.to_toml().as_bytes())
}

/// Relabels a field read from disk with the configured manifold.
fn relabel(f: Field, m: &ManifoldKind, path: &Path) -> Result<Field> {
    if f.manifold().kind() != m.kind() {
        return Err(Error::Shape(format!("{} holds {:?}, expected {:?}", path.display(), f.manifold().kind(), m.kind())));
    }
    f.with_manifold(m.clone())
}

fn read_as(path: &Path, m: &ManifoldKind) -> Result<Field> {
    relabel(read_field(path)?, m, path)
}

/// Writes the configured dataset and its manifest. Returns the number of
/// files written, manifest excluded.
pub fn cmd_synth(r: &Resolved) -> Result<usize> {
    let d = &r.config.data;
    let dir = r.data_dir();
    let (ds, masks) = match d.generator {
        Generator::Paired => (synth_paired(d.seed, &d.paired())?, None),
        Generator::Texture => (synth_texture_pair(d.seed, &d.grid, d.count)?, None),
        Generator::GroupStudy => {
            let g = synth_group_study(d.seed, &d.paired(), &d.group)?;
            (g.dataset, Some((g.planted, g.decoy)))
        }
    };
    let splits: Vec<Split> = if d.generator == Generator::GroupStudy {
        vec![Split::Test; ds.len()]
    } else {
        let (train, _) = split_indices(ds.len(), d.train_fraction, derive_seed(d.seed, 0x5317))?;
        (0..ds.len()).map(|i| if train.binary_search(&i).is_ok() { Split::Train } else { Split::Test }).collect()
    };
    create_dir(&dir)?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, (p, split)) in ds.pairs.iter().zip(splits).enumerate() {
        let (src, tgt) = (format!("pair_{i:04}_src.mfld"), format!("pair_{i:04}_tgt.mfld"));
        write_field(&dir.join(&src), &p.source)?;
        write_field(&dir.join(&tgt), &p.target)?;
        entries.push(ManifestEntry { source: src.into(), target: tgt.into(), group: p.group, split });
    }
    let mut files = 2 * entries.len();
    if let Some((planted, decoy)) = masks {
        let as_f64 = |m: &[bool]| m.iter().map(|&b| f64::from(u8::from(b))).collect::<Vec<_>>();
        write_bytes(&dir.join("planted.mfld"), &RawArray::new(d.grid.clone(), as_f64(&planted))?.encode())?;
        write_bytes(&dir.join("decoy.mfld"), &RawArray::new(d.grid.clone(), as_f64(&decoy))?.encode())?;
        files += 2;
    }
    write_manifest(&r.manifest_path(), &entries)?;
    info!("wrote {} pairs to {}", entries.len(), dir.display());
    Ok(files)
}

fn load_split(r: &Resolved, split: Split) -> Result<Vec<(ManifestEntry, Field, Field)>> {
    read_manifest(&r.manifest_path())?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let y = read_as(&e.source, &r.source)?;
            let x = read_as(&e.target, &r.target)?;
            Ok((e, y, x))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

/// Keeps the metrics header and every row logged before `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keep = String::new();
    for (i, line) in text.lines().enumerate() {
        let row_step = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
        if i == 0 || row_step.is_some_and(|s| s < step) {
            keep.push_str(line);
            keep.push('\n');
        }
    }
    write_bytes(path, keep.as_bytes())
}

/// Joint training. Per-step losses go to `metrics.tsv`, wall times to
/// `timing.tsv`; on a numerical abort the last written checkpoint is kept.
pub fn cmd_train(r: &Resolved, resume: Option<&Path>) -> Result<TrainSummary> {
    let train = load_split(r, Split::Train)?;
    if train.is_empty() {
        return Err(Error::EmptySplit("the manifest has no training pairs".into()));
    }
    let pairs: Vec<ChartPair> = train.iter().map(|(_, y, x)| ChartPair::from_fields(x, y)).collect::<Result<_>>()?;
    let out = &r.config.out;
    create_dir(out)?;
    let metrics = out.join("metrics.tsv");
    let timing = out.join("timing.tsv");
    let ck_path = r.checkpoint_path();
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            ck.expect_spec(&r.spec)?;
            let mut t = Trainer::from_checkpoint(ck)?;
            t.config = r.config.train.clone();
            t.config.adam = t.adam.config;
            if metrics.exists() {
                truncate_metrics(&metrics, t.step)?;
            }
            if timing.exists() {
                truncate_metrics(&timing, t.step)?;
            }
            info!("resuming at step {}", t.step);
            t
        }
        None => {
            let t = Trainer::new(r.spec.clone(), r.config.train.clone(), r.config.seed, &pairs)?;
            write_bytes(&metrics, b"step\tnll\n")?;
            write_bytes(&timing, b"step\tseconds\n")?;
            t
        }
    };
    let open = |p: &Path| OpenOptions::new().append(true).create(true).open(p).map_err(|e| Error::io(p, e));
    let (mut mf, mut tf) = (open(&metrics)?, open(&timing)?);
    let t0 = Instant::now();
    let mut last = f64::NAN;
    while trainer.step < r.config.train.steps {
        let stats = match trainer.step(&pairs) {
            Ok(s) => s,
            Err(e) => {
                warn!("step {} aborted: {e}; keeping the last checkpoint", trainer.step);
                return Err(match e {
                    Error::NumericalAbort(_) => e,
                    other => Error::NumericalAbort(format!("step {}: {other}", trainer.step)),
                });
            }
        };
        if stats.skipped > 0 {
            warn!("step {}: {} samples left the chart domain", stats.step, stats.skipped);
        }
        writeln!(mf, "{}\t{}", stats.step, stats.loss).map_err(|e| Error::io(&metrics, e))?;
        writeln!(tf, "{}\t{:.3}", stats.step, t0.elapsed().as_secs_f64()).map_err(|e| Error::io(&timing, e))?;
        last = stats.loss;
        let every = r.config.train.checkpoint_every;
        if every > 0 && trainer.step % every == 0 {
            trainer.checkpoint().save(&ck_path)?;
        }
        if stats.step % 25 == 0 {
            info!("step {} nll {:.4}", stats.step, stats.loss);
        }
    }
    trainer.checkpoint().save(&ck_path)?;
    Ok(TrainSummary { steps: trainer.step, final_loss: last, checkpoint: ck_path })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub input: PathBuf,
    pub output: PathBuf,
    pub checkpoint: PathBuf,
    pub temperature: f64,
    pub seed: u64,
}

pub fn generated_path(r: &Resolved, input: &Path) -> PathBuf {
    let stem = input.file_stem().map_or_else(|| "field".into(), |s| s.to_string_lossy().into_owned());
    r.config.out.join("generated").join(format!("{stem}.gen.mfld"))
}

fn load_model(r: &Resolved, checkpoint: &Path) -> Result<Trainer> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.expect_spec(&r.spec)?;
    Trainer::from_checkpoint(ck)
}

/// Generates one target field per source input. Without inputs the test
/// split of the manifest is used.
pub fn cmd_generate(r: &Resolved, checkpoint: &Path, inputs: &[PathBuf], temperature: f64) -> Result<Vec<GenerationRecord>> {
    let trainer = load_model(r, checkpoint)?;
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        read_manifest(&r.manifest_path())?.into_iter().filter(|e| e.split == Split::Test).map(|e| e.source).collect()
    } else {
        inputs.to_vec()
    };
    create_dir(&r.config.out.join("generated"))?;
    let mut records = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let y = read_as(input, &r.source)?;
        let seed = derive_seed(r.config.seed, i as u64);
        let x = trainer.model.generate(&y, temperature, seed)?;
        let output = generated_path(r, input);
        write_field(&output, &x)?;
        let rec = GenerationRecord { input: input.clone(), output: output.clone(), checkpoint: checkpoint.to_path_buf(), temperature, seed };
        let sidecar = output.with_extension("json");
        write_bytes(&sidecar, serde_json::to_string_pretty(&rec).expect("record serializes").as_bytes())?;
        records.push(rec);
    }
    Ok(records)
}

fn threshold(report: &mut EvalReport, name: &str, value: f64, bound: f64, passed: bool) {
    report.thresholds.insert(name.into(), ThresholdResult { value, bound, passed });
}

fn write_array(path: &Path, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
    write_bytes(path, &RawArray::new(shape, data)?.encode())
}

/// Evaluates generated fields against references.
///
/// With explicit `generated` and `references` those files are compared.
/// Otherwise the test split is generated from `checkpoint` once per
/// configured seed at the first configured temperature; the confusion
/// matrix is averaged over seeds and the per-sample errors come from the
/// first seed.
pub fn cmd_eval(r: &Resolved, checkpoint: &Path, generated: &[PathBuf], references: &[PathBuf]) -> Result<EvalReport> {
    let e = &r.config.eval;
    let mut report = EvalReport { temperatures: e.temperatures.clone(), ..EvalReport::default() };
    let manifest = if r.manifest_path().exists() { Some(read_manifest(&r.manifest_path())?) } else { None };
    let test: Vec<&ManifestEntry> = manifest.iter().flatten().filter(|e| e.split == Split::Test).collect();
    let (runs, refs, sources): (Vec<Vec<Field>>, Vec<Field>, Vec<Field>) = if !generated.is_empty() || !references.is_empty() {
        if generated.len() != references.len() {
            return Err(Error::Shape(format!("{} generated files for {} references", generated.len(), references.len())));
        }
        let g = generated.iter().map(|p| read_as(p, &r.target)).collect::<Result<Vec<_>>>()?;
        let x = references.iter().map(|p| read_as(p, &r.target)).collect::<Result<Vec<_>>>()?;
        report.seeds = vec![r.config.seed];
        (vec![g], x, Vec::new())
    } else {
        if test.is_empty() {
            return Err(Error::EmptySplit("the manifest has no test pairs".into()));
        }
        let trainer = load_model(r, checkpoint)?;
        let ys = test.iter().map(|t| read_as(&t.source, &r.source)).collect::<Result<Vec<_>>>()?;
        let xs = test.iter().map(|t| read_as(&t.target, &r.target)).collect::<Result<Vec<_>>>()?;
        let mut runs = Vec::with_capacity(e.seeds.len());
        for &s in &e.seeds {
            let g = ys
                .iter()
                .enumerate()
                .map(|(i, y)| trainer.model.generate(y, e.temperatures[0], derive_seed(s, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            runs.push(g);
        }
        report.seeds = e.seeds.clone();
        (runs, xs, ys)
    };
    report.reconstruction_errors = runs[0].iter().zip(&refs).map(|(g, x)| reconstruction_error(g, x)).collect::<Result<_>>()?;
    report.mean_reconstruction_error = report.reconstruction_errors.iter().sum::<f64>() / refs.len().max(1) as f64;
    let matrices = runs.iter().map(|g| confusion_matrix(g, &refs)).collect::<Result<Vec<_>>>()?;
    report.confusion = mean_matrix(&matrices)?;
    report.dominance = dominance(&report.confusion);
    let train_targets: Vec<Field> = manifest
        .iter()
        .flatten()
        .filter(|e| e.split == Split::Train)
        .map(|e| read_as(&e.target, &r.target))
        .collect::<Result<_>>()?;
    if !train_targets.is_empty() {
        let base = frechet_mean_field(&train_targets)?;
        let errs = refs.iter().map(|x| reconstruction_error(&base, x)).collect::<Result<Vec<_>>>()?;
        let b = errs.iter().sum::<f64>() / errs.len().max(1) as f64;
        report.baseline_error = Some(b);
        if let Some(max) = e.max_error_ratio {
            let ratio = report.mean_reconstruction_error / b;
            threshold(&mut report, "error_ratio", ratio, max, ratio <= max);
        }
    }
    if let Some(min) = e.min_dominance {
        let d = report.dominance;
        threshold(&mut report, "dominance", d, min, d >= min);
    }
    // group analysis when every test subject carries a label
    let grouped = !sources.is_empty() && !test.is_empty() && test.iter().all(|t| t.group.is_some());
    if grouped {
        let split = |fields: &[Field]| -> (Vec<Field>, Vec<Field>) {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (f, t) in fields.iter().zip(&test) {
                if t.group == Some(Group::A) { a.push(f.clone()) } else { b.push(f.clone()) }
            }
            (a, b)
        };
        for (name, fields) in [("target", &refs), ("source", &sources), ("generated", &runs[0])] {
            let (a, b) = split(fields);
            let mut p = permutation_test(&a, &b, e.n_perm, r.config.seed)?;
            if e.benjamini_hochberg {
                p = benjamini_hochberg(&p);
            }
            report.p_values.insert(name.into(), p);
        }
        let pt = &report.p_values["target"];
        for name in ["source", "generated"] {
            let iou = iou_significant(&report.p_values[name], pt, e.alpha)?;
            report.iou.insert(format!("{name}_vs_target"), iou);
        }
    }
    let dir = r.config.out.join("eval");
    create_dir(&dir)?;
    write_bytes(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_bytes(&dir.join("errors.svg"), histogram_svg(&report.reconstruction_errors, e.histogram_bins, "reconstruction error").as_bytes())?;
    write_bytes(&dir.join("confusion.svg"), heatmap_svg(&report.confusion, "confusion matrix").as_bytes())?;
    let k = report.confusion.len();
    write_array(&dir.join("confusion.mfld"), vec![k, k], report.confusion.iter().flatten().copied().collect())?;
    write_array(&dir.join("errors.mfld"), vec![report.reconstruction_errors.len()], report.reconstruction_errors.clone())?;
    for (name, p) in &report.p_values {
        write_array(&dir.join(format!("p_{name}.mfld")), r.config.data.grid.clone(), p.clone())?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
    pub passed: bool,
}

pub fn cmd_check(r: &Resolved, inject_fault: bool) -> Result<CheckReport> {
    let results = run_checks(&r.config.check, inject_fault)?;
    let passed = results.iter().all(|c| c.passed);
    Ok(CheckReport { results, passed })
}

/// Named summary lines of a check report.
pub fn check_lines(report: &CheckReport) -> Vec<String> {
    report
        .results
        .iter()
        .map(|c| format!("{} {} worst={:.3e} bound={:.1e} cases={}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.worst, c.bound, c.cases))
        .collect()
}
