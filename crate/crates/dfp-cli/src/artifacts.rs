//! Artifact and checkpoint IO for experiment runs.

use crate::config::ExperimentConfig;
use anyhow::{bail, Context, Result};
use dfp::bsde::{PlayersNets, StageNets, ZNets};
use dfp::nn::CheckpointEntry;
use dfp::Partition;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_toml: String,
    pub delta0: f64,
    pub stages: usize,
    pub shared_players: bool,
}

/// Serialize every stage's networks into one container file.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    stage_nets: &[std::sync::Arc<PlayersNets>],
) -> Result<()> {
    let mut entries = Vec::new();
    for (m, nets) in stage_nets.iter().enumerate() {
        match nets.as_ref() {
            PlayersNets::Shared(nets) => push_stage_entries(&mut entries, &format!("stage{m}"), nets),
            PlayersNets::PerPlayer(all) => {
                for (i, nets) in all.iter().enumerate() {
                    push_stage_entries(&mut entries, &format!("stage{m}/player{i}"), nets);
                }
            }
        }
    }
    let meta_json = serde_json::to_string(meta)?;
    let mut file = fs::File::create(path)?;
    dfp::nn::write_container(&mut file, &meta_json, &entries)?;
    Ok(())
}

fn push_stage_entries(entries: &mut Vec<CheckpointEntry>, prefix: &str, nets: &StageNets) {
    entries.push(CheckpointEntry {
        name: format!("{prefix}/y0"),
        net: nets.y0.clone(),
    });
    match &nets.z {
        ZNets::TimeConditioned(net) => entries.push(CheckpointEntry {
            name: format!("{prefix}/z"),
            net: net.clone(),
        }),
        ZNets::PerStep(step_nets) => {
            for (k, net) in step_nets.iter().enumerate() {
                entries.push(CheckpointEntry {
                    name: format!("{prefix}/z{k:04}"),
                    net: net.clone(),
                });
            }
        }
    }
}

/// Load a checkpoint back into per-stage networks.
pub fn load_checkpoint(path: &Path, partition: &Partition) -> Result<(CheckpointMeta, Vec<PlayersNets>)> {
    let mut file = fs::File::open(path).with_context(|| format!("open {}", path.display()))?;
    let (meta_json, entries) = dfp::nn::read_container(&mut file)?;
    let meta: CheckpointMeta = serde_json::from_str(&meta_json).context("checkpoint metadata")?;
    let mut by_name: BTreeMap<String, dfp::nn::Mlp> = BTreeMap::new();
    for entry in entries {
        by_name.insert(entry.name, entry.net);
    }
    let mut stages = Vec::new();
    for m in 0..meta.stages {
        if meta.shared_players {
            stages.push(PlayersNets::Shared(collect_stage(
                &mut by_name,
                &format!("stage{m}"),
                partition,
            )?));
        } else {
            let mut players = Vec::new();
            let mut i = 0;
            while by_name.contains_key(&format!("stage{m}/player{i}/y0")) {
                players.push(collect_stage(
                    &mut by_name,
                    &format!("stage{m}/player{i}"),
                    partition,
                )?);
                i += 1;
            }
            if players.is_empty() {
                bail!("checkpoint is missing stage {m}");
            }
            stages.push(PlayersNets::PerPlayer(players));
        }
    }
    Ok((meta, stages))
}

fn collect_stage(
    by_name: &mut BTreeMap<String, dfp::nn::Mlp>,
    prefix: &str,
    partition: &Partition,
) -> Result<StageNets> {
    let y0 = by_name
        .remove(&format!("{prefix}/y0"))
        .with_context(|| format!("checkpoint is missing {prefix}/y0"))?;
    let z = if let Some(net) = by_name.remove(&format!("{prefix}/z")) {
        ZNets::TimeConditioned(net)
    } else {
        let mut step_nets = Vec::new();
        let mut k = 0;
        while let Some(net) = by_name.remove(&format!("{prefix}/z{k:04}")) {
            step_nets.push(net);
            k += 1;
        }
        if step_nets.is_empty() {
            bail!("checkpoint is missing {prefix}/z");
        }
        ZNets::PerStep(step_nets)
    };
    Ok(StageNets {
        y0,
        z,
        partition: partition.clone(),
    })
}

/// Validate that a checkpoint belongs to the given configuration.
pub fn check_compatibility(meta: &CheckpointMeta, config: &ExperimentConfig) -> Result<()> {
    let stored = ExperimentConfig::parse(&meta.config_toml).context("stored config echo")?;
    if stored.game != config.game
        || stored.partition != config.partition
        || stored.net != config.net
        || stored.dfp.shared_players != config.dfp.shared_players
    {
        bail!(
            "checkpoint was produced by an incompatible configuration (game/partition/net sections differ)"
        );
    }
    Ok(())
}

/// Write `manifest.json` listing sha256 hashes of every artifact in the run
/// directory (excluding the manifest itself).
pub fn write_manifest(dir: &Path) -> Result<()> {
    let mut files = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == "manifest.json" || !entry.file_type()?.is_file() {
            continue;
        }
        let bytes = fs::read(entry.path())?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        files.insert(name, hex);
    }
    let manifest = serde_json::json!({ "files": files });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
