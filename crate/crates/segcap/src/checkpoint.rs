//! Training state as an SGB1 bundle: parameters, Adam moments and the
//! sample cursor, with the configs in the JSON header.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use segcap_core::heads::Vocabulary;
use segcap_core::model::{Model, ModelConfig};
use segcap_core::train::{Adam, Cursor, TrainConfig};

use crate::error::{Error, Result};
use crate::tensor_io::{read_bundle, write_bundle, Bundle};

pub const CHECKPOINT_FORMAT: &str = "segcap-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub vocab: Vocabulary,
    pub cursor: Cursor,
    pub adam_step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub adam: Adam,
    pub cursor: Cursor,
    pub train: TrainConfig,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

impl Checkpoint {
    pub fn to_bundle(&self) -> Result<Bundle> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            model: self.model.config.clone(),
            train: self.train.clone(),
            vocab: self.model.vocab.clone(),
            cursor: self.cursor,
            adam_step: self.adam.step,
        };
        let mut tensors = Vec::with_capacity(3 * self.model.store.len());
        for (name, t) in self.model.store.iter() {
            tensors.push((format!("{PARAM}{name}"), t.clone()));
        }
        for (prefix, moments) in [(MOMENT1, &self.adam.m), (MOMENT2, &self.adam.v)] {
            for ((name, _), t) in self.model.store.iter().zip(moments) {
                tensors.push((format!("{prefix}{name}"), t.clone()));
            }
        }
        Ok(Bundle {
            header: serde_json::to_value(header)?,
            tensors,
        })
    }

    /// Rebuilds the model from its config, then overwrites every parameter.
    /// Missing or mis-shaped tensors are errors.
    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let h: CheckpointHeader = serde_json::from_value(b.header.clone())?;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {:?}", h.format)));
        }
        h.train.validate()?;
        let mut model = Model::new(h.model, h.vocab)?;
        let mut adam = Adam::new(&model.store);
        adam.step = h.adam_step;
        let ids: Vec<_> = model.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = model.store.name(id).to_string();
            let fetch = |prefix: &str| {
                b.get(&format!("{prefix}{name}"))
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}{name}")))
            };
            let value = fetch(PARAM)?;
            let (m, v) = (fetch(MOMENT1)?, fetch(MOMENT2)?);
            let expected = model.store.get(id).shape().to_vec();
            if value.shape() != expected || m.shape() != expected || v.shape() != expected {
                return Err(Error::Format(format!(
                    "{name}: stored shape {:?}, model expects {expected:?}",
                    value.shape()
                )));
            }
            model.store.set(id, value)?;
            adam.m[k] = m;
            adam.v[k] = v;
        }
        if b.tensors.len() != 3 * model.store.len() {
            return Err(Error::Format("checkpoint has tensors the model does not use".into()));
        }
        Ok(Checkpoint {
            model,
            adam,
            cursor: h.cursor,
            train: h.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            write_bundle(&mut f, &self.to_bundle()?)?;
            f.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::from_bundle(&read_bundle(&mut f)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            slots: 4,
            ..Default::default()
        };
        let model = Model::new(cfg, Vocabulary::standard()).unwrap();
        let mut adam = Adam::new(&model.store);
        adam.step = 5;
        adam.m[0] = adam.m[0].map(|_| 0.25).unwrap();
        Checkpoint {
            model,
            adam,
            cursor: Cursor { step: 5 },
            train: TrainConfig::default(),
        }
    }

    #[test]
    fn bundle_round_trip_is_exact() {
        let c = small();
        let back = Checkpoint::from_bundle(&c.to_bundle().unwrap()).unwrap();
        assert_eq!(back.adam, c.adam);
        assert_eq!(back.cursor, c.cursor);
        for ((n1, a), (n2, b)) in back.model.store.iter().zip(c.model.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let c = small();
        let mut b = c.to_bundle().unwrap();
        b.header["model"]["dim"] = serde_json::json!(16);
        b.header["model"]["heads"] = serde_json::json!(4);
        assert!(matches!(Checkpoint::from_bundle(&b), Err(Error::Format(_))));
    }
}
