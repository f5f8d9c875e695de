//! Named parameters, their seeded initialization, graph binding and
//! checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use numcore::{rng::Rng, Graph, SeedStream, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Parameter groups, the unit of freezing.
pub const GROUPS: [&str; 9] = [
    "encoder",
    "vcp",
    "changeseg.fuse",
    "changeseg.frozen",
    "changeseg.train",
    "projector.pv",
    "projector.pt",
    "lm",
    "lora",
];

/// Group a parameter name belongs to (longest matching prefix).
pub fn group_of(name: &str) -> Option<&'static str> {
    GROUPS
        .iter()
        .filter(|g| name == **g || name.starts_with(&format!("{g}.")))
        .max_by_key(|g| g.len())
        .copied()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Centered uniform with the given half-width.
    Uniform(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// Uniform in ±1/sqrt(fan_in), the default for projections.
    pub fn linear(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        ParamSpec::new(
            name,
            &[fan_in, fan_out],
            Init::Uniform(1.0 / (fan_in as f64).sqrt()),
        )
    }
}

/// Seed label for a parameter. Both change-decoder branches map to the same
/// label so they start out identical.
fn init_label(name: &str) -> String {
    for branch in ["changeseg.frozen.", "changeseg.train."] {
        if let Some(rest) = name.strip_prefix(branch) {
            return format!("changeseg.branch.{rest}");
        }
    }
    name.to_string()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    data_file: String,
    entries: Vec<CheckpointEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn from_specs(specs: &[ParamSpec], seeds: SeedStream) -> Result<Self> {
        let mut params = BTreeMap::new();
        for spec in specs {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::full(&spec.shape, 1.0),
                Init::Uniform(bound) => {
                    let mut rng = seeds.split(&init_label(&spec.name)).rng();
                    // burn one draw so tiny tensors do not share leading values
                    let _: u64 = rng.gen();
                    Tensor::uniform(&spec.shape, bound, &mut rng)
                }
            };
            if params.insert(spec.name.clone(), t).is_some() {
                return Err(ModelError::Config(format!(
                    "duplicate parameter {}",
                    spec.name
                )));
            }
        }
        Ok(ParamStore { params })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn count_in_group(&self, group: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| group_of(k) == Some(group))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Parameters whose group is in `groups`, cloned.
    pub fn subset(&self, groups: &[&str]) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| group_of(k).is_some_and(|g| groups.contains(&g)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Writes `manifest.json` plus `params.bin` (numcore tensor records back to back).
    pub fn save(&self, dir: &Path, meta: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("params.bin"))?);
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0u64;
        for (name, t) in &self.params {
            let bytes = t.to_bytes()?;
            w.write_all(&bytes)?;
            entries.push(CheckpointEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: bytes.len() as u64,
            });
            offset += bytes.len() as u64;
        }
        w.flush()?;
        let manifest = CheckpointManifest {
            format: "numcore-f64-le".into(),
            data_file: "params.bin".into(),
            entries,
            meta,
        };
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut r = BufReader::new(fs::File::open(dir.join(&manifest.data_file))?);
        let mut params = BTreeMap::new();
        for e in &manifest.entries {
            let mut buf = vec![0u8; e.bytes as usize];
            r.read_exact(&mut buf)?;
            let t = Tensor::from_bytes(&buf)?;
            if t.shape() != e.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "{}: manifest shape {:?} but data shape {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )));
            }
            params.insert(e.name.clone(), t);
        }
        Ok((ParamStore { params }, manifest.meta))
    }
}

/// A graph together with lazily bound parameters.
///
/// Parameters in one of `grad_groups` become gradient-tracking leaves; all
/// others are bound as constants.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    grad_groups: Vec<String>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, grad_groups: &[&str]) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            grad_groups: grad_groups.iter().map(|s| s.to_string()).collect(),
            bound: BTreeMap::new(),
        }
    }

    /// Continues building on an existing graph.
    pub fn from_graph(g: Graph, store: &'a ParamStore, grad_groups: &[&str]) -> Self {
        Ctx {
            g,
            ..Ctx::new(store, grad_groups)
        }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// Uses `v` for parameter `name` instead of the stored value.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn inference(store: &'a ParamStore) -> Self {
        Ctx::new(store, &[])
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn tracks(&self, name: &str) -> bool {
        group_of(name).is_some_and(|g| self.grad_groups.iter().any(|x| x == g))
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = self.g.leaf(t, self.tracks(name));
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter that received one.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| self.g.grad(v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}
