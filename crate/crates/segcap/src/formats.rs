//! JSON encodings shared by the dataset, prediction and metrics files.

use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use segcap_core::heads::Vocabulary;
use segcap_core::metrics::EvalSummary;
use segcap_core::model::Prediction;
use segcap_core::Mask;

use crate::error::{Error, Result};

/// Run-length encoded binary mask in row-major order. `counts` alternates
/// background and foreground runs, starting with background (possibly a
/// zero-length run).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [usize; 2],
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn encode(mask: &Mask) -> Self {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &b in mask.bits() {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Rle {
            size: [mask.height(), mask.width()],
            counts,
        }
    }

    pub fn decode(&self) -> Result<Mask> {
        let [h, w] = self.size;
        let total: usize = self.counts.iter().sum();
        if total != h * w {
            return Err(Error::Format(format!("RLE covers {total} pixels, expected {}", h * w)));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &c) in self.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c));
        }
        Ok(Mask::from_bits(h, w, bits)?)
    }
}

/// Per-frame model output with masks thresholded at 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub node_ids: Vec<u32>,
    pub masks: Vec<Rle>,
    pub v: Vec<Vec<f64>>,
    pub confidences: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video: String,
    /// Generated caption with span tags as separate tokens.
    pub caption: Vec<String>,
    pub frames: Vec<FrameRecord>,
}

impl PredictionRecord {
    pub fn new(video: &str, p: &Prediction, vocab: &Vocabulary) -> Result<Self> {
        let mut frames = Vec::with_capacity(p.frames.len());
        for f in &p.frames {
            let masks = f
                .probs
                .iter()
                .map(|pr| Ok(Rle::encode(&Mask::from_probs(p.height, p.width, pr)?)))
                .collect::<Result<Vec<_>>>()?;
            frames.push(FrameRecord {
                node_ids: f.node_ids.clone(),
                masks,
                v: f.v.clone(),
                confidences: f.confidences.clone(),
            });
        }
        Ok(PredictionRecord {
            video: video.to_string(),
            caption: p.tagged_tokens(vocab),
            frames,
        })
    }
}

/// One metric value; the row type of `metrics.csv` and the element type of
/// the `metrics` array in `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub split: String,
    pub seed: u64,
    pub value: f64,
}

pub fn metric_rows(summary: &EvalSummary, split: &str, seed: u64) -> Vec<MetricRow> {
    summary
        .entries()
        .iter()
        .map(|&(m, value)| MetricRow {
            metric: m.to_string(),
            split: split.to_string(),
            seed,
            value,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub metrics: Vec<MetricRow>,
}

impl MetricsFile {
    pub fn value(&self, metric: &str) -> Option<f64> {
        self.metrics.iter().find(|r| r.metric == metric).map(|r| r.value)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("metric,split,seed,value\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.metric, r.split, r.seed, r.value));
    }
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}
