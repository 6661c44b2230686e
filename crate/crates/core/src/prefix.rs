//! Per-task prefixes, their composition into one slot set, and prefix files.

use std::path::{Path, PathBuf};

use prefixrep_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::encoder::{EncoderModel, LayerPrefixSlots};
use crate::error::{Error, Result};

pub const PREFIX_MAGIC: &[u8; 8] = b"PRXPREFX";
pub const PREFIX_VERSION: u32 = 1;
pub const PREFIX_EXTENSION: &str = "prefix";
pub const DEFAULT_PREFIX_LENGTH: usize = 5;
pub const DEFAULT_PREFIX_INIT_STD: f64 = 0.02;

/// How a prefix was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PrefixMeta {
    pub seed: u64,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub init_std: f64,
    #[serde(default)]
    pub train_config: serde_json::Value,
}

/// Learned key/value slots for one source task, one entry per encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPrefix<T> {
    pub task_name: String,
    pub length: usize,
    pub layers: Vec<LayerPrefixSlots<T>>,
    pub fingerprint: String,
    pub meta: PrefixMeta,
}

#[derive(Debug, Serialize, Deserialize)]
struct PrefixHeader {
    task: String,
    length: usize,
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    fingerprint: String,
    meta: PrefixMeta,
}

impl<T: Scalar> TaskPrefix<T> {
    /// Normal(0, `init_std`) slots shaped for `model`.
    pub fn init(task_name: &str, model: &EncoderModel<T>, length: usize, init_std: f64, seed: u64) -> Self {
        let c = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [length, c.num_heads, c.head_dim()];
        let layers = (0..c.num_layers)
            .map(|_| LayerPrefixSlots {
                keys: Tensor::randn(&shape, init_std, &mut rng),
                values: Tensor::randn(&shape, init_std, &mut rng),
            })
            .collect();
        TaskPrefix {
            task_name: task_name.to_string(),
            length,
            layers,
            fingerprint: model.fingerprint(),
            meta: PrefixMeta { seed, init_std, ..PrefixMeta::default() },
        }
    }

    pub fn num_heads(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.shape()[1])
    }

    pub fn head_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.keys.shape()[2])
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.keys.len() + l.values.len()).sum()
    }

    /// Check layer count and slot shapes against an encoder.
    pub fn check_compatible(&self, model: &EncoderModel<T>) -> Result<()> {
        let c = &model.config;
        if self.layers.len() != c.num_layers {
            return Err(Error::Format(format!(
                "prefix '{}' has {} layers, encoder has {}",
                self.task_name,
                self.layers.len(),
                c.num_layers
            )));
        }
        for l in &self.layers {
            l.check_shape(c.num_heads, c.head_dim())?;
            if l.len() != self.length {
                return Err(Error::Format(format!("prefix '{}' layer length differs from {}", self.task_name, self.length)));
            }
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.keys, &mut l.values]).collect()
    }

    pub fn to_container(&self) -> Container {
        let header = PrefixHeader {
            task: self.task_name.clone(),
            length: self.length,
            num_layers: self.layers.len(),
            num_heads: self.num_heads(),
            head_dim: self.head_dim(),
            fingerprint: self.fingerprint.clone(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_value(header).expect("header serializes");
        let mut c = Container::new(*PREFIX_MAGIC, PREFIX_VERSION, header, T::DTYPE);
        for (i, l) in self.layers.iter().enumerate() {
            c.push_tensor(format!("layers.{i}.keys"), &l.keys);
            c.push_tensor(format!("layers.{i}.values"), &l.values);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let fingerprint = c
            .header
            .get("fingerprint")
            .and_then(|f| f.as_str())
            .filter(|f| !f.is_empty())
            .ok_or_else(|| Error::Format("prefix file has no encoder fingerprint".into()))?;
        let h: PrefixHeader = serde_json::from_value(c.header.clone())
            .map_err(|e| Error::Format(format!("prefix header: {e}")))?;
        let mut layers = Vec::with_capacity(h.num_layers);
        for i in 0..h.num_layers {
            let slots = LayerPrefixSlots::new(c.tensor(&format!("layers.{i}.keys"))?, c.tensor(&format!("layers.{i}.values"))?)?;
            slots.check_shape(h.num_heads, h.head_dim)?;
            if slots.len() != h.length {
                return Err(Error::Format(format!("layer {i} has {} slots, header says {}", slots.len(), h.length)));
            }
            layers.push(slots);
        }
        Ok(TaskPrefix { task_name: h.task, length: h.length, layers, fingerprint: fingerprint.to_string(), meta: h.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path, PREFIX_MAGIC, PREFIX_VERSION)?;
        Self::from_container(&c).map_err(|e| e.context(format!("loading {}", path.display())))
    }
}

pub fn prefix_path(dir: &Path, task: &str) -> PathBuf {
    dir.join(format!("{task}.{PREFIX_EXTENSION}"))
}

/// Ordered collection of task prefixes with an enabled flag per task.
///
/// Composition concatenates the enabled prefixes in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixBank<T> {
    fingerprint: String,
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    prefixes: Vec<TaskPrefix<T>>,
    enabled: Vec<bool>,
}

/// JSON summary of a bank's state, written by the `compose` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankDescriptor {
    pub fingerprint: String,
    pub tasks: Vec<String>,
    pub enabled: Vec<String>,
    pub slots_per_layer: usize,
}

impl<T: Scalar> PrefixBank<T> {
    pub fn new(model: &EncoderModel<T>) -> Self {
        let c = &model.config;
        PrefixBank {
            fingerprint: model.fingerprint(),
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            head_dim: c.head_dim(),
            prefixes: Vec::new(),
            enabled: Vec::new(),
        }
    }

    /// Load every `*.prefix` file in `dir`, ordered by file name, all enabled.
    pub fn load_dir(dir: &Path, model: &EncoderModel<T>) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == PREFIX_EXTENSION))
            .collect();
        paths.sort();
        let mut bank = PrefixBank::new(model);
        for p in paths {
            bank.insert(TaskPrefix::load(&p)?)?;
        }
        Ok(bank)
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Append an enabled prefix. Rejects duplicates, foreign fingerprints and bad shapes.
    pub fn insert(&mut self, prefix: TaskPrefix<T>) -> Result<()> {
        if self.contains(&prefix.task_name) {
            return Err(Error::DuplicateTask(prefix.task_name));
        }
        if prefix.fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                task: prefix.task_name,
                expected: self.fingerprint.clone(),
                found: prefix.fingerprint,
            });
        }
        if prefix.layers.len() != self.num_layers {
            return Err(Error::Format(format!(
                "prefix '{}' has {} layers, bank expects {}",
                prefix.task_name,
                prefix.layers.len(),
                self.num_layers
            )));
        }
        for l in &prefix.layers {
            l.check_shape(self.num_heads, self.head_dim)?;
        }
        self.prefixes.push(prefix);
        self.enabled.push(true);
        Ok(())
    }

    pub fn contains(&self, task: &str) -> bool {
        self.prefixes.iter().any(|p| p.task_name == task)
    }

    fn position(&self, task: &str) -> Result<usize> {
        self.prefixes.iter().position(|p| p.task_name == task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn get(&self, task: &str) -> Result<&TaskPrefix<T>> {
        Ok(&self.prefixes[self.position(task)?])
    }

    pub fn enable(&mut self, task: &str) -> Result<()> {
        let i = self.position(task)?;
        self.enabled[i] = true;
        Ok(())
    }

    pub fn disable(&mut self, task: &str) -> Result<()> {
        let i = self.position(task)?;
        self.enabled[i] = false;
        Ok(())
    }

    /// Enable exactly the named tasks.
    pub fn set_enabled<S: AsRef<str>>(&mut self, tasks: &[S]) -> Result<()> {
        let mut flags = vec![false; self.prefixes.len()];
        for t in tasks {
            flags[self.position(t.as_ref())?] = true;
        }
        self.enabled = flags;
        Ok(())
    }

    pub fn tasks(&self) -> Vec<&str> {
        self.prefixes.iter().map(|p| p.task_name.as_str()).collect()
    }

    pub fn enabled_tasks(&self) -> Vec<&str> {
        self.prefixes.iter().zip(&self.enabled).filter(|(_, &e)| e).map(|(p, _)| p.task_name.as_str()).collect()
    }

    pub fn prefixes(&self) -> &[TaskPrefix<T>] {
        &self.prefixes
    }

    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    /// Slots per layer produced by [`PrefixBank::compose`].
    pub fn enabled_slot_count(&self) -> usize {
        self.prefixes.iter().zip(&self.enabled).filter(|(_, &e)| e).map(|(p, _)| p.length).sum()
    }

    fn concat_layers(&self, which: impl Fn(usize) -> bool) -> Result<Vec<LayerPrefixSlots<T>>> {
        for (i, p) in self.prefixes.iter().enumerate() {
            if which(i) && p.fingerprint != self.fingerprint {
                return Err(Error::FingerprintMismatch {
                    task: p.task_name.clone(),
                    expected: self.fingerprint.clone(),
                    found: p.fingerprint.clone(),
                });
            }
        }
        (0..self.num_layers)
            .map(|layer| {
                let parts: Vec<&LayerPrefixSlots<T>> =
                    self.prefixes.iter().enumerate().filter(|(i, _)| which(*i)).map(|(_, p)| &p.layers[layer]).collect();
                LayerPrefixSlots::concat(&parts, self.num_heads, self.head_dim)
            })
            .collect()
    }

    /// Per-layer concatenation of the enabled prefixes, in bank order.
    pub fn compose(&self) -> Result<Vec<LayerPrefixSlots<T>>> {
        self.concat_layers(|i| self.enabled[i])
    }

    /// Compose for a specific encoder, failing if the bank was built against another one.
    pub fn compose_for(&self, model: &EncoderModel<T>) -> Result<Vec<LayerPrefixSlots<T>>> {
        let fp = model.fingerprint();
        if fp != self.fingerprint {
            let task = self.enabled_tasks().first().map_or_else(|| "<bank>".to_string(), |t| t.to_string());
            return Err(Error::FingerprintMismatch { task, expected: fp, found: self.fingerprint.clone() });
        }
        self.compose()
    }

    /// All stored prefixes regardless of the enabled flags, with a per-slot
    /// keep mask that reproduces [`PrefixBank::compose`] through masking.
    pub fn compose_all_with_mask(&self) -> Result<(Vec<LayerPrefixSlots<T>>, Vec<bool>)> {
        let slots = self.concat_layers(|_| true)?;
        let keep = self.prefixes.iter().zip(&self.enabled).flat_map(|(p, &e)| std::iter::repeat_n(e, p.length)).collect();
        Ok((slots, keep))
    }

    pub fn descriptor(&self) -> BankDescriptor {
        BankDescriptor {
            fingerprint: self.fingerprint.clone(),
            tasks: self.tasks().iter().map(|s| s.to_string()).collect(),
            enabled: self.enabled_tasks().iter().map(|s| s.to_string()).collect(),
            slots_per_layer: self.enabled_slot_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> EncoderModel<f64> {
        EncoderModel::init(EncoderConfig::tiny(20), 1).unwrap()
    }

    #[test]
    fn seven_prefixes_of_length_five_give_35_slots() {
        let m = model();
        let mut bank = PrefixBank::new(&m);
        for i in 0..7 {
            bank.insert(TaskPrefix::init(&format!("t{i}"), &m, DEFAULT_PREFIX_LENGTH, 0.02, i)).unwrap();
        }
        let slots = bank.compose().unwrap();
        assert_eq!(slots.len(), 2);
        assert!(slots.iter().all(|s| s.len() == 35));
        bank.set_enabled::<&str>(&[]).unwrap();
        assert!(bank.compose().unwrap().iter().all(|s| s.is_empty()));
    }

    #[test]
    fn disable_enable_is_an_involution() {
        let m = model();
        let mut bank = PrefixBank::new(&m);
        bank.insert(TaskPrefix::init("a", &m, 3, 0.02, 1)).unwrap();
        bank.insert(TaskPrefix::init("b", &m, 2, 0.02, 2)).unwrap();
        let before = bank.clone();
        bank.disable("a").unwrap();
        assert_eq!(bank.enabled_slot_count(), 2);
        bank.enable("a").unwrap();
        assert_eq!(bank, before);
        assert!(matches!(bank.disable("zzz"), Err(Error::UnknownTask(_))));
        assert!(matches!(bank.insert(TaskPrefix::init("a", &m, 3, 0.02, 1)), Err(Error::DuplicateTask(_))));
    }

    #[test]
    fn foreign_fingerprint_is_rejected() {
        let m = model();
        let other = EncoderModel::<f64>::init(EncoderConfig::tiny(20), 2).unwrap();
        let mut bank = PrefixBank::new(&m);
        let err = bank.insert(TaskPrefix::init("x", &other, 3, 0.02, 1)).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { ref task, .. } if task == "x"));
        bank.insert(TaskPrefix::init("y", &m, 3, 0.02, 1)).unwrap();
        assert!(matches!(bank.compose_for(&other), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn mask_matches_enabled_flags() {
        let m = model();
        let mut bank = PrefixBank::new(&m);
        bank.insert(TaskPrefix::init("a", &m, 2, 0.02, 1)).unwrap();
        bank.insert(TaskPrefix::init("b", &m, 3, 0.02, 2)).unwrap();
        bank.disable("a").unwrap();
        let (slots, keep) = bank.compose_all_with_mask().unwrap();
        assert_eq!(slots[0].len(), 5);
        assert_eq!(keep, vec![false, false, true, true, true]);
    }
}
