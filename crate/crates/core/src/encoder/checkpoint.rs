//! Model checkpoint files.

use std::path::Path;

use prefixrep_tensor::{Scalar, Tensor};
use serde_json::json;

use super::config::EncoderConfig;
use super::model::EncoderModel;
use crate::container::Container;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRXMODEL";
pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Scalar> EncoderModel<T> {
    pub fn to_container(&self, extra: serde_json::Value) -> Container {
        let header = json!({
            "config": self.config,
            "checksum": self.checksum(),
            "fingerprint": self.fingerprint(),
            "extra": extra,
        });
        let mut c = Container::new(*CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, T::DTYPE);
        for (name, t) in self.named_tensors() {
            c.push_tensor(name, t);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config: EncoderConfig = c.header_field("config")?;
        let mut model = EncoderModel::<T>::init(config, 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t: Tensor<T> = c.tensor(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor '{name}' has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if c.dtype == T::DTYPE {
            let stored: String = c.header_field("checksum")?;
            if stored != model.checksum() {
                return Err(Error::Integrity);
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        self.to_container(extra).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        Self::from_container(&c).map_err(|e| e.context(format!("loading {}", path.display())))
    }
}
