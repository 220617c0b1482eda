//! Experiment configuration: schema, validation, and the two built-in presets.

use dfp::bsde::{StageNetConfig, TrainConfig};
use dfp::driver::{DecoupleMode, DfpConfig};
use dfp::nn::Activation;
use dfp::systemic_risk::InterBankParams;
use dfp::Partition;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub deterministic: bool,
    /// Informational echo of the preset the config came from.
    pub scale: String,
    pub game: GameSection,
    pub partition: PartitionSection,
    pub net: NetSection,
    pub train: TrainSection,
    pub dfp: DfpSection,
    pub delta0: Delta0Section,
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    /// `inter_bank` is the only built-in game; custom games enter through the
    /// library API.
    pub kind: String,
    pub params: InterBankParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub n_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub hidden: Vec<usize>,
    pub activation: String,
    pub batchnorm: bool,
    pub time_conditioned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps_per_stage: u64,
    /// Optional per-stage override of `steps_per_stage` (length = stages).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_schedule: Option<Vec<u64>>,
    pub batch: usize,
    pub lr: f64,
    pub eval_every: u64,
    pub snapshot_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DfpSection {
    pub stages: usize,
    pub mode: DecoupleMode,
    pub warm_start: bool,
    pub shared_players: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Delta0Section {
    /// `fixed` or `fixed_point`.
    pub mode: String,
    pub value: f64,
    pub batch: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub rse_paths: usize,
    pub distance_batch: usize,
    pub gap_eval_batch: usize,
    pub gap_train_steps: u64,
}

impl ExperimentConfig {
    /// Small configuration for smoke tests and CI cycles.
    pub fn preset_ci() -> Self {
        ExperimentConfig {
            schema_version: 1,
            seed: 42,
            deterministic: true,
            scale: "ci".into(),
            game: GameSection {
                kind: "inter_bank".into(),
                params: InterBankParams::baseline(5, 1.0),
            },
            partition: PartitionSection { n_steps: 20 },
            net: NetSection {
                hidden: vec![32, 32],
                activation: "tanh".into(),
                batchnorm: true,
                time_conditioned: true,
            },
            train: TrainSection {
                steps_per_stage: 8000,
                steps_schedule: None,
                batch: 128,
                lr: 1e-3,
                eval_every: 500,
                snapshot_every: 0,
            },
            dfp: DfpSection {
                stages: 3,
                mode: DecoupleMode::PolicyUpdate,
                warm_start: true,
                shared_players: true,
                clip_bound: None,
            },
            delta0: Delta0Section {
                mode: "fixed".into(),
                value: 0.75,
                batch: 2000,
                max_iter: 20,
                rel_tol: 0.05,
            },
            evaluation: EvaluationSection {
                rse_paths: 256,
                distance_batch: 1024,
                gap_eval_batch: 8192,
                gap_train_steps: 3000,
            },
        }
    }

    /// The full reproduction run: 10 banks, horizon 1, 40 steps, 3x40 tanh
    /// networks with batch norm, Adam at 5e-4 with batch 256, and 30000
    /// parameter updates in total across the stages.
    pub fn preset_full() -> Self {
        ExperimentConfig {
            schema_version: 1,
            seed: 42,
            deterministic: true,
            scale: "full".into(),
            game: GameSection {
                kind: "inter_bank".into(),
                params: InterBankParams::baseline(10, 1.0),
            },
            partition: PartitionSection { n_steps: 40 },
            net: NetSection {
                hidden: vec![40, 40, 40],
                activation: "tanh".into(),
                batchnorm: true,
                time_conditioned: true,
            },
            train: TrainSection {
                steps_per_stage: 10000,
                // the first stage solves the hardest sub-problem cold; later
                // stages only track small policy corrections
                steps_schedule: Some(vec![20000, 5000, 5000]),
                batch: 256,
                lr: 5e-4,
                eval_every: 1000,
                snapshot_every: 0,
            },
            dfp: DfpSection {
                stages: 3,
                mode: DecoupleMode::PolicyUpdate,
                warm_start: true,
                shared_players: true,
                clip_bound: None,
            },
            delta0: Delta0Section {
                mode: "fixed_point".into(),
                value: 1.0,
                batch: 2000,
                max_iter: 20,
                rel_tol: 0.05,
            },
            evaluation: EvaluationSection {
                rse_paths: 256,
                distance_batch: 1024,
                gap_eval_batch: 8192,
                gap_train_steps: 4000,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self, String> {
        match name {
            "ci" => Ok(Self::preset_ci()),
            "full" => Ok(Self::preset_full()),
            other => Err(format!("unknown preset '{other}' (expected 'ci' or 'full')")),
        }
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schema_version != 1 {
            return Err(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.game.kind != "inter_bank" {
            return Err(format!(
                "game.kind '{}' is not built in; custom games are supplied through the library API",
                self.game.kind
            ));
        }
        self.game.params.validate().map_err(|e| e.to_string())?;
        if self.partition.n_steps == 0 {
            return Err("partition.n_steps must be at least 1".into());
        }
        if self.net.hidden.iter().any(|w| *w == 0) {
            return Err("net.hidden widths must be positive".into());
        }
        if self.net.activation != "tanh" && self.net.activation != "relu" {
            return Err(format!("unknown activation '{}'", self.net.activation));
        }
        if self.dfp.stages == 0 {
            return Err("dfp.stages must be at least 1".into());
        }
        if let Some(bound) = self.dfp.clip_bound {
            if bound <= 0.0 {
                return Err(format!("dfp.clip_bound must be > 0, got {bound}"));
            }
        }
        if let Some(schedule) = &self.train.steps_schedule {
            if schedule.len() != self.dfp.stages {
                return Err(format!(
                    "train.steps_schedule has {} entries but dfp.stages is {}",
                    schedule.len(),
                    self.dfp.stages
                ));
            }
        }
        if self.train.batch < 2 && self.net.batchnorm {
            return Err("train.batch must be at least 2 with batch norm".into());
        }
        match self.delta0.mode.as_str() {
            "fixed" | "fixed_point" => {}
            other => return Err(format!("delta0.mode '{other}' (expected 'fixed' or 'fixed_point')")),
        }
        if self.delta0.value <= 0.0 {
            return Err("delta0.value must be > 0".into());
        }
        Ok(())
    }

    pub fn activation(&self) -> Activation {
        match self.net.activation.as_str() {
            "relu" => Activation::Relu,
            _ => Activation::Tanh,
        }
    }

    pub fn partition(&self) -> dfp::Result<Partition> {
        Partition::uniform(self.game.params.horizon, self.partition.n_steps)
    }

    pub fn net_config(&self) -> StageNetConfig {
        let mut net = StageNetConfig::new(self.net.hidden.clone(), self.seed ^ 0xAE7);
        net.batchnorm = self.net.batchnorm;
        net.activation = self.activation();
        net.time_conditioned = self.net.time_conditioned;
        net
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut train = TrainConfig::new(
            self.train.steps_per_stage,
            self.train.batch,
            self.train.lr,
            self.seed ^ 0x7124,
        );
        train.eval_every = self.train.eval_every;
        train.snapshot_every = self.train.snapshot_every;
        train
    }

    pub fn dfp_config(&self, delta0: f64) -> dfp::Result<DfpConfig> {
        Ok(DfpConfig {
            stages: self.dfp.stages,
            mode: self.dfp.mode,
            train: self.train_config(),
            steps_schedule: self.train.steps_schedule.clone(),
            net: self.net_config(),
            partition: self.partition()?,
            shared_players: self.dfp.shared_players,
            warm_start: self.dfp.warm_start,
            clip_bound: self.dfp.clip_bound,
            delta0,
            seed: self.seed,
            distance_batch: self.evaluation.distance_batch,
            stop_distance: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for preset in ["ci", "full"] {
            let config = ExperimentConfig::preset(preset).unwrap();
            config.validate().unwrap();
            let text = config.to_toml();
            let back = ExperimentConfig::parse(&text).unwrap();
            assert_eq!(config, back);
            // parse -> serialize -> parse is the identity
            assert_eq!(back.to_toml(), text);
        }
    }

    #[test]
    fn full_preset_pins_reference_values() {
        let config = ExperimentConfig::preset_full();
        assert_eq!(config.game.params.n_players, 10);
        assert_eq!(config.game.params.horizon, 1.0);
        assert_eq!(config.partition.n_steps, 40);
        assert_eq!(config.net.hidden, vec![40, 40, 40]);
        assert_eq!(config.train.lr, 5e-4);
        assert_eq!(config.train.batch, 256);
        let total: u64 = config.train.steps_schedule.as_ref().unwrap().iter().sum();
        assert_eq!(total, 30_000);
        let p = &config.game.params;
        assert_eq!((p.a, p.q, p.c, p.eps, p.rho, p.sigma), (0.1, 0.1, 0.5, 0.5, 0.2, 1.0));
        assert_eq!(config.evaluation.rse_paths, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = ExperimentConfig::preset_ci().to_toml();
        text.push_str("\nbogus_key = 1\n");
        assert!(ExperimentConfig::parse(&text).is_err());
        let with_nested = text.replace("[game]", "[game]\nmystery = true");
        assert!(ExperimentConfig::parse(&with_nested).is_err());
    }

    #[test]
    fn schedule_length_is_checked() {
        let mut config = ExperimentConfig::preset_ci();
        config.train.steps_schedule = Some(vec![100, 100]);
        config.dfp.stages = 3;
        assert!(config.validate().is_err());
    }
}
