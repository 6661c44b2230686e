//! Fixed text representations: encoder outputs stored per example.

use std::path::Path;

use prefixrep_tensor::{Scalar, Tensor};
use serde_json::json;

use crate::container::Container;
use crate::encoder::{EncoderModel, LayerPrefixSlots};
use crate::error::{Error, Result};
use crate::taskgen::LabeledDataset;

pub const REPS_MAGIC: &[u8; 8] = b"PRXREPS\0";
pub const REPS_VERSION: u32 = 1;

/// Per-example `[len, d_model]` sequences. Row 0 of each is the CLS vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedReps<T> {
    pub name: String,
    pub sequences: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub d_model: usize,
}

impl<T: Scalar> FixedReps<T> {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Pad the selected examples into `[b, max_len, d]` plus a `-inf` key mask
    /// when lengths differ.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Option<Tensor<T>>, Vec<usize>) {
        let d = self.d_model;
        let n = indices.iter().map(|&i| self.sequences[i].shape()[0]).max().unwrap_or(0);
        let mut data = vec![T::zero(); indices.len() * n * d];
        let mut mask = vec![T::zero(); indices.len() * n];
        let mut ragged = false;
        for (row, &i) in indices.iter().enumerate() {
            let s = &self.sequences[i];
            let len = s.shape()[0];
            data[row * n * d..row * n * d + len * d].copy_from_slice(s.data());
            for m in &mut mask[row * n + len..(row + 1) * n] {
                *m = T::neg_infinity();
                ragged = true;
            }
        }
        let x = Tensor::new(vec![indices.len(), n, d], data).expect("batch shape");
        let mask = ragged.then(|| Tensor::new(vec![indices.len(), n], mask).expect("mask shape"));
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (x, mask, labels)
    }

    pub fn checksum(&self) -> String {
        let names: Vec<String> = (0..self.len()).map(|i| format!("seq.{i}")).collect();
        crate::container::checksum_tensors(names.iter().map(String::as_str).zip(&self.sequences))
    }

    pub fn save(&self, path: &Path, config: serde_json::Value) -> Result<()> {
        let header = json!({
            "name": self.name,
            "labels": self.labels,
            "class_count": self.class_count,
            "d_model": self.d_model,
            "config": config,
        });
        let mut c = Container::new(*REPS_MAGIC, REPS_VERSION, header, T::DTYPE);
        for (i, s) in self.sequences.iter().enumerate() {
            c.push_tensor(format!("seq.{i}"), s);
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, REPS_MAGIC, REPS_VERSION)?;
        let labels: Vec<usize> = c.header_field("labels")?;
        let sequences = (0..labels.len()).map(|i| c.tensor(&format!("seq.{i}"))).collect::<Result<Vec<_>>>()?;
        Ok(FixedReps {
            name: c.header_field("name")?,
            sequences,
            labels,
            class_count: c.header_field("class_count")?,
            d_model: c.header_field("d_model")?,
        })
    }
}

/// Encode every example with a frozen encoder and the given composed slots
/// (an empty slice means no prefixes). `keep` optionally masks slots.
pub fn extract_reps<T: Scalar>(
    model: &EncoderModel<T>,
    slots: &[LayerPrefixSlots<T>],
    keep: Option<&[bool]>,
    data: &LabeledDataset,
    batch_size: usize,
) -> Result<FixedReps<T>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let d = model.config.d_model;
    let mut sequences = Vec::with_capacity(data.len());
    for chunk in data.examples.chunks(batch_size) {
        let out = match keep {
            Some(k) => model.encode_with_slot_mask(chunk, slots, k)?,
            None => model.encode(chunk, slots)?,
        };
        let n = out.shape()[1];
        for (row, ex) in chunk.iter().enumerate() {
            let start = row * n * d;
            let seq = out.data()[start..start + ex.len() * d].to_vec();
            sequences.push(Tensor::new(vec![ex.len(), d], seq)?);
        }
    }
    Ok(FixedReps { name: data.name.clone(), sequences, labels: data.labels.clone(), class_count: data.class_count, d_model: d })
}
