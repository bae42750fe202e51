#![allow(dead_code)]

use std::path::{Path, PathBuf};

use acl_cli::config::{DataConfig, RunConfig};
use acl_core::backbone::{BackboneConfig, PretrainConfig};
use acl_core::engine::RoundConfig;
use acl_core::split::TaskSplit;
use acl_core::synthetic::SyntheticSpec;

/// Six 8x8 classes: two for pretraining, then two rounds of two.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        data: DataConfig::Synthetic {
            spec: SyntheticSpec::new(6, 10, 4, [1, 8, 8]),
            seed: 1,
        },
        split: TaskSplit::sequential(2, 2, 2),
        backbone: BackboneConfig::standard(1, 8, &[4, 8, 8]),
        pretrain: PretrainConfig {
            epochs: 2,
            min_accuracy: 0.0,
            ..PretrainConfig::default()
        },
        round: RoundConfig::with_epochs(2, &[1], 2, &[1]),
        memory_budget: 12,
        baseline: None,
        ablation: serde_json::from_str(
            r#"[{"label": "tsh", "toggles": {"task_specific_heads": true, "adapters": false, "others_neuron": false, "finetune": false}},
                {"label": "full", "toggles": {"task_specific_heads": true, "adapters": true, "others_neuron": true, "finetune": true}}]"#,
        )
        .unwrap(),
    }
}

pub fn write_config(dir: &Path, config: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}
