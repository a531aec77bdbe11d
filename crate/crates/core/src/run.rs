//! Whole-run configuration: every module section plus run-level settings.

use crate::codec::{Codec, CodecConfig, CodecTrainConfig};
use crate::config::{config_section, split_sections, Section};
use crate::error::{Error, Result};
use crate::eval::{AblationSetup, AlignmentConfig};
use crate::lm::LmConfig;
use crate::sequence::{SequenceConfig, TextVocab};
use crate::signal::CorpusConfig;
use crate::trainer::{TokenizedItem, TrainerConfig};
use crate::util::sha256_hex;

/// Run-level settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    /// Rendered depth for generation and ablations; 0 = codec depth.
    pub depth: usize,
    pub temperature: f32,
    pub top_k: usize,
    pub n_prompts: usize,
    pub task1_threshold: f32,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            depth: 0,
            temperature: 0.9,
            top_k: 64,
            n_prompts: 16,
            task1_threshold: 4.9,
        }
    }
}

config_section!(
    RunSection,
    "run",
    [seed, depth, temperature, top_k, n_prompts, task1_threshold]
);

/// Backbone and SR models share the `lm` section: backbone-initialised SR
/// needs identical trunks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusConfig,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub lm: LmConfig,
    pub sequence: SequenceConfig,
    pub train: TrainerConfig,
    pub align: AlignmentConfig,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (section, body) in split_sections(text)? {
            match section.as_str() {
                "run" => c.run = RunSection::from_text(&body)?,
                "corpus" => c.corpus = CorpusConfig::from_text(&body)?,
                "codec" => c.codec = CodecConfig::from_text(&body)?,
                "codec_train" => c.codec_train = CodecTrainConfig::from_text(&body)?,
                "lm" => c.lm = LmConfig::from_text(&body)?,
                "sequence" => c.sequence = SequenceConfig::from_text(&body)?,
                "train" => c.train = TrainerConfig::from_text(&body)?,
                "align" => c.align = AlignmentConfig::from_text(&body)?,
                other => return Err(Error::Config(format!("unknown section {other:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.codec.validate()?;
        self.lm.validate()?;
        self.train.init_mode()?;
        if self.align.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config(
                "align.vocab_size must equal corpus.vocab_size".into(),
            ));
        }
        if self.codec.sample_rate != self.corpus.sample_rate {
            return Err(Error::Config("codec and corpus sample rates differ".into()));
        }
        if self.run.depth == 1 || self.run.depth > self.codec.depth {
            return Err(Error::Config(format!(
                "run.depth must be 0 or in 2..={}",
                self.codec.depth
            )));
        }
        Ok(())
    }

    /// Every key of every section, sorted.
    pub fn canonical(&self) -> String {
        let mut lines: Vec<&str> = Vec::new();
        let parts = [
            self.run.canonical(),
            self.corpus.canonical(),
            self.codec.canonical(),
            self.codec_train.canonical(),
            self.lm.canonical(),
            self.sequence.canonical(),
            self.train.canonical(),
            self.align.canonical(),
        ];
        for p in &parts {
            lines.extend(p.lines());
        }
        lines.sort_unstable();
        lines.iter().map(|l| format!("{l}\n")).collect()
    }

    pub fn digest_hex(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    pub fn text_vocab(&self) -> Result<TextVocab> {
        TextVocab::new(self.corpus.vocab_size, self.sequence.max_duration_s)
    }

    pub fn render_depth(&self) -> usize {
        if self.run.depth == 0 {
            self.codec.depth
        } else {
            self.run.depth
        }
    }

    pub fn ablation_setup<'a>(
        &self,
        corpus: &'a [TokenizedItem],
        codec: &'a Codec,
    ) -> Result<AblationSetup<'a>> {
        Ok(AblationSetup {
            corpus,
            codec,
            backbone_lm: self.lm.clone(),
            sr_lm: self.lm.clone(),
            text: self.text_vocab()?,
            train: self.train.clone(),
            align: self.align.clone(),
            n_prompts: self.run.n_prompts,
            depth: self.render_depth(),
            task1_threshold: self.run.task1_threshold,
        })
    }
}
