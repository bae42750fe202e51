//! Saving and restoring a [`ContinualModel`]: `manifest.json` describes the
//! structure, `weights.aclt` holds every parameter and the rehearsal exemplars.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use acl_core::adapter::{AdapterConfig, AdapterSet};
use acl_core::backbone::{Backbone, BackboneConfig};
use acl_core::data::LabeledSet;
use acl_core::engine::{ContinualModel, TaskRecord, UnifiedHead};
use acl_core::heads::TaskHead;
use acl_core::layers::Linear;
use acl_core::memory::RehearsalMemory;
use acl_core::{rng, ClassId, Error, Tensor, TaskId};
use serde::{Deserialize, Serialize};

use crate::aclt::{read_tensors, write_tensors};
use crate::error::{CliError, FormatError};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.aclt";
pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub task: TaskId,
    pub classes: Vec<ClassId>,
    pub with_others: bool,
    pub adapter_gaps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub tasks: Vec<TaskEntry>,
    pub unified_head: Option<Vec<ClassId>>,
    pub memory_budget: usize,
    pub memory_classes: Vec<ClassId>,
}

fn memory_name(c: ClassId) -> String {
    format!("memory.{c}")
}

pub fn save_model(dir: &Path, model: &ContinualModel, adapter: &AdapterConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let memory_classes: Vec<ClassId> = model.memory.counts().keys().copied().collect();
    let manifest = Manifest {
        backbone: model.backbone().config().clone(),
        adapter: AdapterConfig {
            gap_mask: None,
            ..adapter.clone()
        },
        tasks: model
            .records()
            .iter()
            .map(|r| TaskEntry {
                task: r.task(),
                classes: r.classes().to_vec(),
                with_others: r.head.has_others(),
                adapter_gaps: r.adapters.adapters().iter().map(|a| a.gap()).collect(),
            })
            .collect(),
        unified_head: model.unified_head.as_ref().map(|u| u.classes.clone()),
        memory_budget: model.memory.budget(),
        memory_classes: memory_classes.clone(),
    };
    let memory: Vec<(String, Tensor)> = memory_classes
        .iter()
        .map(|&c| {
            let rows = model.memory.exemplars(c);
            let [ch, h, w] = model.memory.image_shape();
            let data = rows.concat();
            Tensor::new(&[rows.len(), ch, h, w], data).map(|t| (memory_name(c), t))
        })
        .collect::<acl_core::Result<_>>()?;
    let mut named: Vec<(&str, &Tensor)> = Vec::new();
    for p in model.backbone().params() {
        named.push((p.name(), p.value()));
    }
    for r in model.records() {
        for p in r.adapters.params() {
            named.push((p.name(), p.value()));
        }
        for p in r.head.params() {
            named.push((p.name(), p.value()));
        }
    }
    if let Some(u) = &model.unified_head {
        for p in u.linear.params() {
            named.push((p.name(), p.value()));
        }
    }
    for (n, t) in &memory {
        named.push((n.as_str(), t));
    }
    write_json(&dir.join(MANIFEST), &manifest)?;
    write_file(&dir.join(WEIGHTS), |w| write_tensors(w, &named))
}

pub fn load_model(dir: &Path) -> Result<ContinualModel, CliError> {
    let manifest_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest_path).map_err(CliError::io(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", manifest_path.display())))?;
    let weights_path = dir.join(WEIGHTS);
    let file = File::open(&weights_path).map_err(CliError::io(&weights_path))?;
    let tensors = read_tensors(BufReader::new(file)).map_err(CliError::format(&weights_path))?;
    build_model(&manifest, tensors).map_err(|e| match e {
        CliError::Core(inner) => CliError::Format {
            path: weights_path,
            source: FormatError::Core(inner),
        },
        other => other,
    })
}

/// Assembles a model; every tensor must be consumed exactly once.
pub fn build_model(manifest: &Manifest, tensors: Vec<(String, Tensor)>) -> Result<ContinualModel, CliError> {
    let mut pool: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut take = |name: &str| pool.remove(name).ok_or_else(|| Error::MissingTensor(name.to_string()));
    let mut scratch = rng::seeded(0);
    let mut backbone = Backbone::new(manifest.backbone.clone(), &mut scratch)?;
    for p in backbone.params_mut() {
        let t = take(p.name())?;
        p.assign(&t)?;
    }
    let gaps = backbone.gap_channels();
    let mut records = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let mut adapters = if entry.adapter_gaps.is_empty() {
            AdapterSet::identity(entry.task)
        } else {
            let mask = (1..=gaps.len()).map(|g| entry.adapter_gaps.contains(&g)).collect();
            let config = AdapterConfig {
                gap_mask: Some(mask),
                ..manifest.adapter.clone()
            };
            config.validate(gaps.len())?;
            AdapterSet::new(entry.task, &gaps, &config, &mut scratch)
        };
        for p in adapters.params_mut() {
            let t = take(p.name())?;
            p.assign(&t)?;
        }
        let prefix = format!("head.{}", entry.task);
        let head = TaskHead::from_parts(
            entry.task,
            entry.classes.clone(),
            entry.with_others,
            take(&format!("{prefix}.weight"))?,
            take(&format!("{prefix}.bias"))?,
        )?;
        records.push(TaskRecord::new(adapters, head));
    }
    let unified_head = match &manifest.unified_head {
        Some(classes) => Some(UnifiedHead {
            classes: classes.clone(),
            linear: Linear::from_parts("head.unified", take("head.unified.weight")?, take("head.unified.bias")?),
        }),
        None => None,
    };
    let shape = backbone.config().input_shape();
    let mut exemplars = LabeledSet::empty(shape);
    for &c in &manifest.memory_classes {
        let t = take(&memory_name(c))?;
        for row in t.data().chunks_exact(shape.iter().product()) {
            exemplars.push(row, c)?;
        }
    }
    if let Some(name) = pool.keys().next() {
        return Err(CliError::Config(format!("unexpected tensor `{name}` in checkpoint")));
    }
    let mut memory = RehearsalMemory::new(manifest.memory_budget, shape, 0);
    memory.restore(&exemplars)?;
    Ok(ContinualModel::from_parts(backbone, records, memory, unified_head)?)
}

pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<(), CliError> {
    let named: Vec<(&str, &Tensor)> = backbone.params().into_iter().map(|p| (p.name(), p.value())).collect();
    write_file(path, |w| write_tensors(w, &named))
}

/// Loads backbone weights saved by [`save_backbone`] into an architecture built from `config`.
pub fn load_backbone(path: &Path, config: &BackboneConfig) -> Result<Backbone, CliError> {
    let file = File::open(path).map_err(CliError::io(path))?;
    let tensors = read_tensors(BufReader::new(file)).map_err(CliError::format(path))?;
    let mut pool: BTreeMap<String, Tensor> = tensors.into_iter().collect();
    let mut backbone = Backbone::new(config.clone(), &mut rng::seeded(0))?;
    let result: acl_core::Result<()> = backbone.params_mut().into_iter().try_for_each(|p| {
        let t = pool.remove(p.name()).ok_or_else(|| Error::MissingTensor(p.name().to_string()))?;
        p.assign(&t)
    });
    result.map_err(|e| CliError::format(path)(FormatError::Core(e)))?;
    if let Some(name) = pool.keys().next() {
        return Err(CliError::Config(format!("{}: unexpected tensor `{name}` for this backbone", path.display())));
    }
    backbone.freeze();
    Ok(backbone)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, |mut w| {
        serde_json::to_writer_pretty(&mut w, value).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// Writes through a temporary sibling and renames, so a failed write leaves no
/// partial file behind.
pub(crate) fn write_file<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), FormatError>,
{
    let tmp = path.with_extension("partial");
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        Ok::<_, FormatError>(())
    })();
    match result {
        Ok(()) => std::fs::rename(&tmp, path).map_err(CliError::io(path)),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(CliError::format(path)(e))
        }
    }
}
