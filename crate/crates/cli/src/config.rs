//! Declarative experiment configuration (JSON).

use serde::{Deserialize, Serialize};
use sslst_core::audio::AugmentPolicy;
use sslst_core::corpus::SynthSpec;
use sslst_core::numerics::Schedule;
use sslst_core::ssl::{CpcConfig, MlmConfig};
use sslst_core::transfer::TransferScope;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub features: FeaturesConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub transfer: Option<TransferConfig>,
    pub decode: DecodeConfig,
    pub average: Option<AverageConfig>,
    pub score: Option<ScoreConfig>,
    pub out_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataConfig::default(),
            features: FeaturesConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            transfer: None,
            decode: DecodeConfig::default(),
            average: None,
            score: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_manifest: Option<String>,
    pub test_manifest: Option<String>,
    pub vocab: Option<String>,
    pub synth: Option<SynthDataConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthDataConfig {
    pub spec: SynthSpec,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthDataConfig {
    fn default() -> Self {
        SynthDataConfig {
            spec: SynthSpec::default(),
            n_train: 100,
            n_test: 20,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeaturesConfig {
    /// fbank | cpc | vq | mlm
    pub kind: String,
    pub cpc_checkpoint: Option<String>,
    pub codebook: Option<String>,
    pub mlm_checkpoint: Option<String>,
    /// Per-utterance mean/variance normalization of continuous features.
    pub normalize: bool,
    /// Codebook size for train-vq.
    pub codebook_size: usize,
    pub kmeans_iters: usize,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            kind: "fbank".into(),
            cpc_checkpoint: None,
            codebook: None,
            mlm_checkpoint: None,
            normalize: true,
            codebook_size: 64,
            kmeans_iters: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// bilstm | hybrid
    pub arch: String,
    pub input_width: usize,
    pub conv_channels: usize,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub dec_layers: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub cpc: CpcConfig,
    pub mlm: MlmConfig,
    pub freeze_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: "bilstm".into(),
            input_width: 128,
            conv_channels: 16,
            enc_layers: 3,
            enc_hidden: 128,
            dec_layers: 2,
            dec_hidden: 256,
            attn_dim: 128,
            embed_dim: 64,
            cpc: CpcConfig::default(),
            mlm: MlmConfig::default(),
            freeze_encoder: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Optimizer steps for the self-supervised pretrainers.
    pub steps: usize,
    pub batch_frames: usize,
    /// Batch size (sequences) for the pretrainers.
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub clip_norm: Option<f64>,
    /// Keep a checkpoint every this many epochs (and always the last).
    pub save_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 20,
            steps: 1000,
            batch_frames: 8000,
            batch_size: 4,
            schedule: Schedule::fixed(1e-3),
            seed: 1,
            augment: AugmentPolicy::default(),
            clip_norm: Some(5.0),
            save_every: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    pub scope: TransferScope,
    pub source: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub checkpoint: Option<String>,
    /// Average the last k checkpoints of the directory before decoding.
    pub average_last: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_len: 64,
            checkpoint: None,
            average_last: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AverageConfig {
    pub inputs: Vec<String>,
    pub last: usize,
    pub output: Option<String>,
}

impl Default for AverageConfig {
    fn default() -> Self {
        AverageConfig {
            inputs: Vec::new(),
            last: 5,
            output: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub hypotheses: Option<String>,
    pub references: Option<String>,
    /// bleu | wer
    pub metric: String,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            hypotheses: None,
            references: None,
            metric: "bleu".into(),
        }
    }
}

impl ExperimentConfig {
    /// Collects every validation problem at once.
    pub fn validate(&self, command: &str) -> Vec<String> {
        let mut problems = Vec::new();
        if !matches!(self.features.kind.as_str(), "fbank" | "cpc" | "vq" | "mlm") {
            problems.push(format!(
                "features.kind {:?} is not one of fbank|cpc|vq|mlm",
                self.features.kind
            ));
        }
        if !matches!(self.model.arch.as_str(), "bilstm" | "hybrid") {
            problems.push(format!(
                "model.arch {:?} is not one of bilstm|hybrid",
                self.model.arch
            ));
        }
        if let Err(e) = self.training.schedule.validate() {
            problems.push(format!("training.schedule: {e}"));
        }
        if self.decode.beam == 0 {
            problems.push("decode.beam must be at least 1".into());
        }
        if self.decode.max_len == 0 {
            problems.push("decode.max_len must be at least 1".into());
        }
        let needs_train_data = matches!(
            command,
            "prepare" | "pretrain-cpc" | "train-vq" | "pretrain-mlm" | "train-asr" | "train-st"
                | "finetune-features"
        );
        if needs_train_data && self.data.train_manifest.is_none() && self.data.synth.is_none() {
            problems.push("data.train_manifest or data.synth is required".into());
        }
        if command == "synth" && self.data.synth.is_none() {
            problems.push("data.synth is required for the synth command".into());
        }
        if matches!(self.features.kind.as_str(), "cpc" | "vq" | "mlm")
            && self.features.cpc_checkpoint.is_none()
        {
            problems.push(format!(
                "features.kind {:?} requires features.cpc_checkpoint",
                self.features.kind
            ));
        }
        if matches!(self.features.kind.as_str(), "vq" | "mlm") && self.features.codebook.is_none()
        {
            problems.push(format!(
                "features.kind {:?} requires features.codebook",
                self.features.kind
            ));
        }
        if self.features.kind == "mlm" && self.features.mlm_checkpoint.is_none() {
            problems.push("features.kind \"mlm\" requires features.mlm_checkpoint".into());
        }
        if self.model.arch == "hybrid"
            && matches!(command, "train-asr" | "train-st")
            && self.features.mlm_checkpoint.is_none()
        {
            problems.push("model.arch \"hybrid\" requires features.mlm_checkpoint".into());
        }
        if command == "score" {
            match &self.score {
                None => problems.push("score section is required for the score command".into()),
                Some(s) => {
                    if s.hypotheses.is_none() {
                        problems.push("score.hypotheses is required".into());
                    }
                    if s.references.is_none() {
                        problems.push("score.references is required".into());
                    }
                    if !matches!(s.metric.as_str(), "bleu" | "wer") {
                        problems.push(format!("score.metric {:?} is not bleu|wer", s.metric));
                    }
                }
            }
        }
        if command == "average" && self.average.as_ref().map_or(true, |a| a.inputs.is_empty()) {
            problems.push("average.inputs must list checkpoint files".into());
        }
        if command == "transfer" && self.transfer.is_none() {
            problems.push("transfer section is required for the transfer command".into());
        }
        if command == "decode"
            && self.decode.checkpoint.is_none()
            && self.decode.average_last.is_none()
        {
            problems.push("decode.checkpoint (or decode.average_last) is required".into());
        }
        problems
    }
}
