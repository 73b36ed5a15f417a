//! The operations behind each CLI subcommand.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use segcap_core::data::AnnotatedVideo;
use segcap_core::heads::Vocabulary;
use segcap_core::metrics::{summarize, EvalRecord, EvalSummary};
use segcap_core::model::{predict, Model, Sample};
use segcap_core::ptgformer::PtgVariant;
use segcap_core::train::{train_step, Adam, Cursor, LossValues};

use crate::checkpoint::Checkpoint;
use crate::config::{variant_name, RunConfig};
use crate::dataset::{generate, load_split, prepare_out_dir, read_manifest, Manifest};
use crate::error::{Error, Result};
use crate::formats::{metric_rows, metrics_csv, write_json, MetricsFile, PredictionRecord};
use crate::gradcheck;

pub const LOSS_LOG_HEADER: &str = "step,total,caption,mask,fa,mc";

/// Worker pool honouring `SEGCAP_THREADS` (all cores when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SEGCAP_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Invalid(format!("SEGCAP_THREADS must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Invalid(e.to_string()))
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    cfg.validate()?;
    generate(&cfg.data, out, force)
}

pub fn load_samples(videos: &[AnnotatedVideo], model: &Model) -> Result<Vec<Sample>> {
    videos
        .par_iter()
        .map(|v| Ok(Sample::from_video(v, &model.vocab, &model.config)?))
        .collect()
}

fn loss_row(step: u64, l: &LossValues) -> String {
    format!("{step},{},{},{},{},{}\n", l.total, l.caption, l.mask, l.fa, l.mc)
}

/// Trains `state` until `state.train.steps`, calling `log` after each step.
/// A non-finite loss stops the run.
pub fn train_loop(
    state: &mut Checkpoint,
    samples: &[Sample],
    mut log: impl FnMut(u64, &LossValues, &Checkpoint) -> Result<()>,
) -> Result<()> {
    let target = state.train.steps as u64;
    while state.cursor.step < target {
        let step = state.cursor.step + 1;
        let l = train_step(&mut state.model, &mut state.adam, samples, &mut state.cursor, &state.train)
            .map_err(|source| Error::Diverged { step, source })?;
        let finite = [l.total, l.caption, l.mask, l.fa, l.mc].iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Diverged {
                step,
                source: segcap_core::Error::NonFinite { op: "loss" },
            });
        }
        log(step, &l, state)?;
    }
    Ok(())
}

pub fn fresh_state(cfg: &RunConfig) -> Result<Checkpoint> {
    let model = Model::new(cfg.model.clone(), Vocabulary::standard())?;
    let adam = Adam::new(&model.store);
    Ok(Checkpoint {
        model,
        adam,
        cursor: Cursor::default(),
        train: cfg.train.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub final_loss: Option<LossValues>,
}

/// Trains on the `train` split of `dataset`, writing `loss_log.csv`,
/// `config.json` and `checkpoint.sgb` to `out`.
///
/// With `resume`, training continues from that checkpoint up to
/// `cfg.train.steps`; rows of an existing log in `out` up to the
/// checkpoint's step are kept and new rows appended.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path, resume: Option<&Path>, force: bool) -> Result<TrainSummary> {
    cfg.validate()?;
    let manifest = read_manifest(dataset)?;
    let mut state = match resume {
        Some(p) => {
            let mut c = Checkpoint::load(p)?;
            if c.model.config != cfg.model {
                return Err(Error::Invalid("checkpoint model config differs from the run config".into()));
            }
            c.train = cfg.train.clone();
            c
        }
        None => fresh_state(cfg)?,
    };
    let log_path = out.join("loss_log.csv");
    let mut kept = String::from(LOSS_LOG_HEADER);
    kept.push('\n');
    if resume.is_some() {
        std::fs::create_dir_all(out)?;
        if let Ok(old) = std::fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= state.cursor.step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    } else {
        prepare_out_dir(out, force)?;
    }
    write_json(&out.join("config.json"), cfg)?;
    let videos = load_split(dataset, &manifest, "train")?;
    let samples = load_samples(&videos, &state.model)?;
    drop(videos);

    let ckpt_path = out.join("checkpoint.sgb");
    let mut log = BufWriter::new(File::create(&log_path)?);
    log.write_all(kept.as_bytes())?;
    let every = cfg.checkpoint_every as u64;
    let mut last = None;
    let mut window = (0.0, 0u64);
    let result = train_loop(&mut state, &samples, |step, l, st| {
        log.write_all(loss_row(step, l).as_bytes())?;
        last = Some(*l);
        window = (window.0 + l.total, window.1 + 1);
        if step % 500 == 0 {
            eprintln!("step {step}: mean loss {:.4}", window.0 / window.1 as f64);
            window = (0.0, 0);
        }
        if every > 0 && step % every == 0 {
            log.flush()?;
            st.save(&ckpt_path)?;
        }
        Ok(())
    });
    log.flush()?;
    result?;
    state.save(&ckpt_path)?;
    Ok(TrainSummary {
        steps: state.cursor.step,
        checkpoint: ckpt_path,
        loss_log: log_path,
        final_loss: last,
    })
}

/// Predicts every sample and scores the predictions.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<(EvalSummary, Vec<segcap_core::model::Prediction>)> {
    let preds: Vec<_> = samples
        .par_iter()
        .map(|s| predict(model, &s.graphs, &s.prompt, &s.visuals))
        .collect::<segcap_core::Result<_>>()?;
    let records = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            Ok(EvalRecord {
                pred: p.to_video_prediction(&model.vocab)?,
                gt: s.truth(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((summarize(&records)?, preds))
}

/// Evaluates a checkpoint on one split, writing `metrics.json`,
/// `metrics.csv` and `predictions.json` to `out`.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path, split: &str, out: &Path, force: bool) -> Result<MetricsFile> {
    let state = Checkpoint::load(checkpoint)?;
    let manifest = read_manifest(dataset)?;
    let names = manifest.split(split)?.to_vec();
    let videos = load_split(dataset, &manifest, split)?;
    let samples = load_samples(&videos, &state.model)?;
    let (summary, preds) = evaluate(&state.model, &samples)?;
    prepare_out_dir(out, force)?;
    let rows = metric_rows(&summary, split, state.train.seed);
    let file = MetricsFile { metrics: rows };
    write_json(&out.join("metrics.json"), &file)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&file.metrics))?;
    let records = names
        .iter()
        .zip(&preds)
        .map(|(n, p)| PredictionRecord::new(n, p, &state.model.vocab))
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join("predictions.json"), &records)?;
    Ok(file)
}

/// Which table of the ablation a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    /// Encoder components on/off at the configured λ.
    Components,
    /// λ sweep with the full encoder.
    Lambda,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: Table,
    pub variant: String,
    pub spatial: bool,
    pub temporal: bool,
    pub lambda: f64,
    pub seed: u64,
    pub run: String,
    pub metrics: EvalSummary,
    /// Wall-clock seconds spent training this run.
    pub train_seconds: f64,
}

pub const LAMBDAS: [f64; 5] = [0.0, 1.0, 2.0, 5.0, 10.0];

pub fn variants() -> [PtgVariant; 4] {
    [(true, true), (true, false), (false, true), (false, false)].map(|(spatial, temporal)| PtgVariant { spatial, temporal })
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RunKey {
    variant: PtgVariant,
    lambda: f64,
    seed: u64,
}

impl RunKey {
    fn id(&self) -> String {
        format!("{}_lambda{}_seed{}", variant_name(self.variant), self.lambda, self.seed)
    }
}

/// The full grid in output order: the four component variants at
/// `cfg.model.lambda`, then the λ sweep, each for every seed.
fn grid(cfg: &RunConfig) -> Vec<(Table, RunKey)> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for variant in variants() {
            rows.push((Table::Components, RunKey { variant, lambda: cfg.model.lambda, seed }));
        }
        for lambda in LAMBDAS {
            let variant = PtgVariant::default();
            rows.push((Table::Lambda, RunKey { variant, lambda, seed }));
        }
    }
    rows
}

pub const ABLATION_HEADER: &str = "table,variant,spatial,temporal,lambda,seed,J,F,J&F,AP,AP50,AP75,instance_mAP,caption_F1";

fn metrics_fields(m: &EvalSummary) -> String {
    m.entries().iter().map(|(_, v)| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_HEADER);
    s.push('\n');
    for r in rows {
        let table = match r.table {
            Table::Components => "components",
            Table::Lambda => "lambda",
        };
        s.push_str(&format!(
            "{table},{},{},{},{},{},{}\n",
            r.variant,
            r.spatial as u8,
            r.temporal as u8,
            r.lambda,
            r.seed,
            metrics_fields(&r.metrics)
        ));
    }
    s
}

/// Mean of each metric over a group of rows.
pub fn mean_summary<'a>(rows: impl Iterator<Item = &'a AblationRow>) -> Option<EvalSummary> {
    let rows: Vec<_> = rows.collect();
    if rows.is_empty() {
        return None;
    }
    let k = rows.len() as f64;
    let m = |f: fn(&EvalSummary) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / k;
    Some(EvalSummary {
        j: m(|s| s.j),
        f: m(|s| s.f),
        jf: m(|s| s.jf),
        ap: m(|s| s.ap),
        ap50: m(|s| s.ap50),
        ap75: m(|s| s.ap75),
        instance_map: m(|s| s.instance_map),
        caption_f1: m(|s| s.caption_f1),
    })
}

/// Seed-averaged component table: one row per (spatial, temporal) variant.
pub fn components_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,spatial,temporal,seeds,J,F,J&F,AP,AP50,AP75,instance_mAP,caption_F1\n");
    for v in variants() {
        let group: Vec<_> = rows
            .iter()
            .filter(|r| r.table == Table::Components && r.spatial == v.spatial && r.temporal == v.temporal)
            .collect();
        if let Some(m) = mean_summary(group.iter().copied()) {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                variant_name(v),
                v.spatial as u8,
                v.temporal as u8,
                group.len(),
                metrics_fields(&m)
            ));
        }
    }
    s
}

/// Seed-averaged λ sweep: one row per λ.
pub fn lambda_sweep_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("lambda,seeds,J,F,J&F,AP,AP50,AP75,instance_mAP,caption_F1\n");
    for lambda in LAMBDAS {
        let group: Vec<_> = rows.iter().filter(|r| r.table == Table::Lambda && r.lambda == lambda).collect();
        if let Some(m) = mean_summary(group.iter().copied()) {
            s.push_str(&format!("{lambda},{},{}\n", group.len(), metrics_fields(&m)));
        }
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Runs the ablation grid. Distinct runs (a λ-sweep row at the configured
/// λ is the same run as the full-variant component row) are trained once,
/// in parallel, each writing `runs/<id>/{loss_log.csv,metrics.json}`.
/// Aggregates go to `ablation.csv`, `components.csv`, `lambda_sweep.csv`
/// and `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig, dataset: &Path, out: &Path, force: bool) -> Result<AblationReport> {
    cfg.validate()?;
    let manifest = read_manifest(dataset)?;
    prepare_out_dir(out, force)?;
    write_json(&out.join("config.json"), cfg)?;
    let grid = grid(cfg);
    let mut unique: Vec<RunKey> = Vec::new();
    for (_, k) in &grid {
        if !unique.contains(k) {
            unique.push(*k);
        }
    }
    let probe = Model::new(cfg.model.clone(), Vocabulary::standard())?;
    let train = load_samples(&load_split(dataset, &manifest, "train")?, &probe)?;
    let eval = load_samples(&load_split(dataset, &manifest, "eval")?, &probe)?;
    drop(probe);
    let total = unique.len();
    let results: Vec<(String, (EvalSummary, f64))> = unique
        .par_iter()
        .map(|key| {
            let mut run_cfg = cfg.clone().with_seed(key.seed);
            run_cfg.model.variant = key.variant;
            run_cfg.model.lambda = key.lambda;
            let id = key.id();
            let dir = out.join("runs").join(&id);
            std::fs::create_dir_all(&dir)?;
            let mut state = fresh_state(&run_cfg)?;
            let mut log = String::from(LOSS_LOG_HEADER);
            log.push('\n');
            let started = std::time::Instant::now();
            train_loop(&mut state, &train, |step, l, _| {
                log.push_str(&loss_row(step, l));
                Ok(())
            })?;
            let seconds = started.elapsed().as_secs_f64();
            std::fs::write(dir.join("loss_log.csv"), log)?;
            let (summary, _) = evaluate(&state.model, &eval)?;
            write_json(
                &dir.join("metrics.json"),
                &MetricsFile {
                    metrics: metric_rows(&summary, "eval", key.seed),
                },
            )?;
            eprintln!("finished {id} (of {total} runs): J&F {:.3}, instance mAP {:.3}", summary.jf, summary.instance_map);
            Ok((id, (summary, seconds)))
        })
        .collect::<Result<_>>()?;
    let by_id: BTreeMap<String, (EvalSummary, f64)> = results.into_iter().collect();
    let rows: Vec<AblationRow> = grid
        .iter()
        .map(|(table, key)| AblationRow {
            table: *table,
            variant: variant_name(key.variant).to_string(),
            spatial: key.variant.spatial,
            temporal: key.variant.temporal,
            lambda: key.lambda,
            seed: key.seed,
            run: key.id(),
            metrics: by_id[&key.id()].0,
            train_seconds: by_id[&key.id()].1,
        })
        .collect();
    std::fs::write(out.join("ablation.csv"), ablation_csv(&rows))?;
    std::fs::write(out.join("components.csv"), components_csv(&rows))?;
    std::fs::write(out.join("lambda_sweep.csv"), lambda_sweep_csv(&rows))?;
    let report = AblationReport { rows };
    write_json(&out.join("ablation.json"), &report)?;
    Ok(report)
}

/// Runs the gradient-check registry. The report is returned even when a
/// check fails; callers decide the exit status from [`gradcheck::Report::passed`].
pub fn cmd_gradcheck(inject_fault: bool, seed: u64) -> gradcheck::Report {
    gradcheck::run(&gradcheck::registry(inject_fault), seed)
}
