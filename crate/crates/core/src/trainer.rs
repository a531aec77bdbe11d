//! Backbone and super-resolution (SR) training, backbone-initialised SR
//! transfer, and convergence comparison.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::codec::Codec;
use crate::config::config_section;
use crate::error::{Error, Result};
use crate::lm::{Example, Lm, LmConfig, VocabLayout};
use crate::numerics::{clip_grad_norm, AdamWConfig, Graph, LrSchedule, OptimState, Tensor};
use crate::rvq::TokenHierarchy;
use crate::sequence::{
    build_backbone_sequence, build_task0, build_task1, sample_task_from, TaskInstance, TaskKind,
    TextCondition, TextVocab,
};
use crate::signal::CorpusItem;
use crate::util::{derive_seed, is_holdout, rng, Rng};

/// Flag attached to SR runs trained without Task 0.
pub const NO_TASK0_FLAG: &str = "w/o Task 0";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub batch: usize,
    pub backbone_steps: usize,
    pub sr_steps: usize,
    pub lr: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f32,
    /// Task 0 share of SR instances.
    pub p0: f32,
    /// Also supervise layer 1 in Task 1.
    pub include_layer1: bool,
    /// `scratch` or `backbone`.
    pub init: String,
    pub eval_every: usize,
    /// Longest training clip in frames.
    pub clip_frames: usize,
    pub val_fraction: f32,
    /// Cap on validation items (0 = all).
    pub val_items: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch: 16,
            backbone_steps: 3000,
            sr_steps: 3000,
            lr: 1e-3,
            warmup: 200,
            weight_decay: 0.01,
            grad_clip: 1.0,
            p0: 0.25,
            include_layer1: false,
            init: "scratch".into(),
            eval_every: 100,
            clip_frames: 64,
            val_fraction: 0.1,
            val_items: 0,
        }
    }
}

config_section!(
    TrainerConfig,
    "train",
    [
        batch,
        backbone_steps,
        sr_steps,
        lr,
        warmup,
        weight_decay,
        grad_clip,
        p0,
        include_layer1,
        init,
        eval_every,
        clip_frames,
        val_fraction,
        val_items
    ]
);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Scratch,
    FromBackbone,
}

impl TrainerConfig {
    pub fn init_mode(&self) -> Result<InitMode> {
        match self.init.as_str() {
            "scratch" => Ok(InitMode::Scratch),
            "backbone" => Ok(InitMode::FromBackbone),
            other => Err(Error::Config(format!(
                "train.init must be scratch or backbone, got {other:?}"
            ))),
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.batch == 0 || steps == 0 || self.clip_frames == 0 {
            return Err(Error::Config(
                "batch, steps and clip_frames must be positive".into(),
            ));
        }
        if self.warmup > steps {
            return Err(Error::Config(format!(
                "warmup {} exceeds {steps} steps",
                self.warmup
            )));
        }
        if !(0.0..=1.0).contains(&self.p0) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(
                "p0 must be in [0, 1] and val_fraction in [0, 1)".into(),
            ));
        }
        self.init_mode()?;
        Ok(())
    }

    fn first_layer(&self) -> usize {
        if self.include_layer1 {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Backbone,
    SuperRes,
}

impl Role {
    pub fn name(&self) -> &'static str {
        match self {
            Role::Backbone => "backbone",
            Role::SuperRes => "sr",
        }
    }
}

/// An LM together with everything needed to rebuild its sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedLm {
    pub lm: Lm,
    pub role: Role,
    pub text: TextVocab,
    /// Config digest of the codec whose tokens the model was trained on.
    pub codec_digest: String,
    pub step: usize,
    pub seed: u64,
}

impl TrainedLm {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("role".into(), self.role.name().into());
        meta.insert("text_symbols".into(), self.text.symbols.to_string());
        meta.insert(
            "max_duration_s".into(),
            self.text.max_duration_s.to_string(),
        );
        meta.insert("codec_digest".into(), self.codec_digest.clone());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("seed".into(), self.seed.to_string());
        self.lm.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let lm = Lm::from_checkpoint(ck)?;
        let num = |k: &str| -> Result<u64> {
            ck.meta(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad meta {k}")))
        };
        let role = match ck.meta("role")? {
            "backbone" => Role::Backbone,
            "sr" => Role::SuperRes,
            other => return Err(Error::Checkpoint(format!("unknown role {other:?}"))),
        };
        let text = TextVocab::new(
            num("text_symbols")? as usize,
            num("max_duration_s")? as usize,
        )?;
        if text.size() != lm.vocab.text {
            return Err(Error::Checkpoint(
                "text vocab does not match the vocab layout".into(),
            ));
        }
        Ok(Self {
            lm,
            role,
            text,
            codec_digest: ck.meta("codec_digest")?.to_string(),
            step: num("step")? as usize,
            seed: num("seed")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Vocabulary of a model trained on `codec` tokens: 2 acoustic blocks for
/// the backbone, all `N` for SR.
pub fn vocab_for(role: Role, text: &TextVocab, codec: &Codec) -> Result<VocabLayout> {
    let n = codec.config.depth;
    let blocks = match role {
        Role::Backbone => 2,
        Role::SuperRes => n,
    };
    VocabLayout::new(text.size(), n, codec.config.codebook_size, blocks)
}

/// A corpus item reduced to its text condition and codec tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedItem {
    pub id: usize,
    pub text: TextCondition,
    pub tokens: TokenHierarchy,
}

/// Tokenizes every item once with the frozen codec.
pub fn tokenize_corpus(items: &[CorpusItem], codec: &Codec) -> Result<Vec<TokenizedItem>> {
    items
        .par_iter()
        .map(|it| {
            Ok(TokenizedItem {
                id: it.id,
                text: TextCondition::new(it.lyric.clone(), it.duration_s)?,
                tokens: codec.tokenize(&it.waveform)?,
            })
        })
        .collect()
}

/// Frames `start..start+len` of every layer.
fn time_slice(h: &TokenHierarchy, start: usize, len: usize) -> Result<TokenHierarchy> {
    let mut idx = Vec::with_capacity(h.depth() * len);
    for n in 0..h.depth() {
        idx.extend_from_slice(&h.layer(n)[start..start + len]);
    }
    TokenHierarchy::new(h.depth(), len, h.codebook_size(), idx)
}

/// A clip of at most `clip_frames` frames: random for training, the prefix
/// otherwise. The text keeps the item's lyric and gets the clip duration.
fn clip(
    item: &TokenizedItem,
    clip_frames: usize,
    frame_rate: f32,
    r: Option<&mut Rng>,
) -> Result<(TextCondition, TokenHierarchy)> {
    let tau = item.tokens.len();
    if tau <= clip_frames {
        return Ok((item.text.clone(), item.tokens.clone()));
    }
    let start = match r {
        Some(r) => r.gen_range(0..=tau - clip_frames),
        None => 0,
    };
    let mut text = item.text.clone();
    text.duration_s = clip_frames as f32 / frame_rate;
    Ok((text, time_slice(&item.tokens, start, clip_frames)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub split: Split,
    pub task: String,
    pub loss: f32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    pub flags: Vec<String>,
    /// Task of every instance, per optimizer step.
    pub batch_tasks: Vec<Vec<TaskKind>>,
}

impl RunReport {
    /// `(step, loss)` of one split/task, in step order.
    pub fn curve(&self, split: Split, task: &str) -> Vec<(usize, f32)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.task == task)
            .map(|r| (r.step, r.loss))
            .collect()
    }

    pub fn final_loss(&self, split: Split, task: &str) -> Option<f32> {
        self.curve(split, task).last().map(|&(_, l)| l)
    }

    /// Loss at the first recorded step `>= step`.
    pub fn loss_at(&self, split: Split, task: &str, step: usize) -> Option<f32> {
        self.curve(split, task)
            .into_iter()
            .find(|&(s, _)| s >= step)
            .map(|(_, l)| l)
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    /// `step,split,task,loss` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "split", "task", "loss"])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                r.split.to_string(),
                r.task.clone(),
                r.loss.to_string(),
            ])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|_| Error::invalid("report is not utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let bad = || Error::invalid(format!("bad report row {rec:?}"));
            let split = match rec.get(1) {
                Some("train") => Split::Train,
                Some("val") => Split::Val,
                _ => return Err(bad()),
            };
            rows.push(ReportRow {
                step: rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
                split,
                task: rec.get(2).ok_or_else(bad)?.to_string(),
                loss: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            });
        }
        Ok(Self {
            rows,
            ..Default::default()
        })
    }

    fn push(&mut self, step: usize, split: Split, task: &str, loss: f32) {
        self.rows.push(ReportRow {
            step,
            split,
            task: task.to_string(),
            loss,
        });
    }
}

/// Progress callback payload.
#[derive(Clone, Debug)]
pub struct TrainEvent<'a> {
    pub role: Role,
    pub step: usize,
    pub train_loss: f32,
    /// Validation losses when this step was evaluated.
    pub val: Option<&'a BTreeMap<String, f32>>,
}

struct Plan<'a> {
    role: Role,
    steps: usize,
    cfg: &'a TrainerConfig,
    frame_rate: f32,
    seed: u64,
}

fn split_items<'a>(
    corpus: &'a [TokenizedItem],
    cfg: &TrainerConfig,
) -> Result<(Vec<&'a TokenizedItem>, Vec<&'a TokenizedItem>)> {
    let (val, train): (Vec<_>, Vec<_>) = corpus
        .iter()
        .partition(|it| is_holdout(it.id, cfg.val_fraction));
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(format!(
            "split left {} train / {} validation items",
            train.len(),
            val.len()
        )));
    }
    let cap = if cfg.val_items == 0 {
        val.len()
    } else {
        cfg.val_items.min(val.len())
    };
    Ok((train, val[..cap].to_vec()))
}

/// Names a validation position of `inst` is averaged into.
fn val_buckets(inst: &TaskInstance, pos: usize, vocab: &VocabLayout) -> Vec<String> {
    match inst.kind {
        TaskKind::Backbone => {
            let sub = match vocab.split_acoustic(inst.targets[pos]) {
                Some((0, _)) => "backbone_q0",
                Some(_) => "backbone_q1",
                None => "backbone_eos",
            };
            vec!["backbone".into(), sub.into()]
        }
        TaskKind::Task0 => vec!["task0".into()],
        TaskKind::Task1(n) => vec!["task1".into(), format!("task1_l{n}")],
    }
}

fn evaluate(lm: &Lm, val: &[TaskInstance]) -> Result<BTreeMap<String, f32>> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for chunk in val.chunks(16) {
        let examples: Vec<Example<'_>> = chunk.iter().map(|i| i.example()).collect();
        for (inst, rows) in chunk.iter().zip(lm.position_nll(&examples)?) {
            for (pos, nll) in rows {
                for b in val_buckets(inst, pos, &lm.vocab) {
                    let e = sums.entry(b).or_insert((0.0, 0));
                    e.0 += nll as f64;
                    e.1 += 1;
                }
            }
        }
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, (s / n as f64) as f32))
        .collect())
}

/// The shared optimisation loop. `make` builds one training instance.
fn run<F>(
    lm: &mut Lm,
    plan: &Plan<'_>,
    train: &[&TokenizedItem],
    val: &[TaskInstance],
    mut make: F,
    mut observe: impl FnMut(&TrainEvent<'_>),
) -> Result<RunReport>
where
    F: FnMut(&TokenizedItem, &mut Rng) -> Result<TaskInstance>,
{
    let cfg = plan.cfg;
    cfg.validate(plan.steps)?;
    let mut r = rng(derive_seed(plan.seed, "lm-batches", plan.role as u64));
    let mut opt = OptimState::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        decay_min_rank: 2,
        ..Default::default()
    });
    let sched = LrSchedule {
        peak: cfg.lr,
        warmup: cfg.warmup,
    };
    let mut report = RunReport::default();
    let mut eval_steps: BTreeSet<usize> = (cfg.eval_every.max(1)..=plan.steps)
        .step_by(cfg.eval_every.max(1))
        .collect();
    eval_steps.insert(plan.steps);
    eval_steps.insert(10.min(plan.steps));

    for step in 1..=plan.steps {
        let batch: Vec<TaskInstance> = (0..cfg.batch)
            .map(|_| {
                let item = train[r.gen_range(0..train.len())];
                make(item, &mut r)
            })
            .collect::<Result<_>>()?;
        let examples: Vec<Example<'_>> = batch.iter().map(|i| i.example()).collect();
        let mut g = Graph::new();
        let p = lm.params.bind(&mut g)?;
        let losses = lm
            .example_losses(&mut g, &p, &examples)
            .map_err(|e| diverged(e, step))?;
        let total = losses
            .iter()
            .skip(1)
            .try_fold(losses[0], |acc, &l| g.add(acc, l))?;
        let total = g.scale(total, 1.0 / losses.len() as f32)?;
        let loss = g.value(total).item();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let mut by_task: BTreeMap<&'static str, (f32, usize)> = BTreeMap::new();
        for (inst, &l) in batch.iter().zip(&losses) {
            let key = match inst.kind {
                TaskKind::Backbone => "backbone",
                TaskKind::Task0 => "task0",
                TaskKind::Task1(_) => "task1",
            };
            let e = by_task.entry(key).or_insert((0.0, 0));
            e.0 += g.value(l).item();
            e.1 += 1;
        }
        let mut grads: HashMap<String, Tensor> =
            g.backward(total).map_err(|e| diverged(e, step))?.params()?;
        clip_grad_norm(&mut grads, cfg.grad_clip);
        opt.step(&mut lm.params, &grads, sched.at(step))
            .map_err(|e| diverged(e, step))?;

        report.push(step, Split::Train, "all", loss);
        for (task, (s, n)) in by_task {
            report.push(step, Split::Train, task, s / n as f32);
        }
        report
            .batch_tasks
            .push(batch.iter().map(|i| i.kind).collect());
        let val_losses = if eval_steps.contains(&step) {
            let v = evaluate(lm, val).map_err(|e| diverged(e, step))?;
            for (task, &l) in &v {
                report.push(step, Split::Val, task, l);
            }
            Some(v)
        } else {
            None
        };
        observe(&TrainEvent {
            role: plan.role,
            step,
            train_loss: loss,
            val: val_losses.as_ref(),
        });
    }
    Ok(report)
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            step,
            loss: f32::NAN,
        },
        e => e,
    }
}

/// Next-token training on backbone sequences under a causal mask.
pub fn train_backbone(
    corpus: &[TokenizedItem],
    codec: &Codec,
    lm_config: &LmConfig,
    text: &TextVocab,
    cfg: &TrainerConfig,
    seed: u64,
    observe: impl FnMut(&TrainEvent<'_>),
) -> Result<(TrainedLm, RunReport)> {
    let vocab = vocab_for(Role::Backbone, text, codec)?;
    let mut lm = Lm::init(lm_config, vocab, 0, derive_seed(seed, "backbone-init", 0))?;
    let (train, val_items) = split_items(corpus, cfg)?;
    let fr = codec.frame_rate();
    let val = val_items
        .iter()
        .map(|it| {
            let (tc, h) = clip(it, cfg.clip_frames, fr, None)?;
            build_backbone_sequence(&tc, &h, text, &vocab)
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = Plan {
        role: Role::Backbone,
        steps: cfg.backbone_steps,
        cfg,
        frame_rate: fr,
        seed,
    };
    let report = run(
        &mut lm,
        &plan,
        &train,
        &val,
        |item, r| {
            let (tc, h) = clip(item, cfg.clip_frames, plan.frame_rate, Some(r))?;
            build_backbone_sequence(&tc, &h, text, &vocab)
        },
        observe,
    )?;
    let trained = TrainedLm {
        lm,
        role: Role::Backbone,
        text: *text,
        codec_digest: codec.digest_hex(),
        step: cfg.backbone_steps,
        seed,
    };
    Ok((trained, report))
}

/// Validation instances of an SR run: Task 0 on every item (when `p0 > 0`)
/// and Task 1 for every target layer.
fn sr_val_set(
    items: &[&TokenizedItem],
    codec: &Codec,
    text: &TextVocab,
    vocab: &VocabLayout,
    cfg: &TrainerConfig,
) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for it in items {
        let (tc, h) = clip(it, cfg.clip_frames, codec.frame_rate(), None)?;
        if cfg.p0 > 0.0 {
            out.push(build_task0(&tc, &h, text, vocab)?);
        }
        for n in cfg.first_layer()..h.depth() {
            out.push(build_task1(&tc, &h, &codec.codebooks, n, text, vocab)?);
        }
    }
    Ok(out)
}

/// Hybrid Task 0 / Task 1 training of the SR model; each instance's task is
/// drawn from the `p0` mixture and all instances weigh equally.
pub fn train_sr(
    corpus: &[TokenizedItem],
    codec: &Codec,
    lm_config: &LmConfig,
    text: &TextVocab,
    cfg: &TrainerConfig,
    init: Option<&TrainedLm>,
    seed: u64,
    observe: impl FnMut(&TrainEvent<'_>),
) -> Result<(TrainedLm, RunReport)> {
    let vocab = vocab_for(Role::SuperRes, text, codec)?;
    let latent = codec.config.latent_dim;
    let init_seed = derive_seed(seed, "sr-init", 0);
    let mut lm = match (cfg.init_mode()?, init) {
        (InitMode::Scratch, _) => Lm::init(lm_config, vocab, latent, init_seed)?,
        (InitMode::FromBackbone, Some(b)) => {
            if b.codec_digest != codec.digest_hex() {
                return Err(Error::DigestMismatch {
                    expected: codec.digest_hex(),
                    found: b.codec_digest.clone(),
                });
            }
            init_sr_from_backbone(&b.lm, lm_config, vocab, latent, init_seed)?.0
        }
        (InitMode::FromBackbone, None) => {
            return Err(Error::Config(
                "train.init=backbone needs a backbone checkpoint".into(),
            ));
        }
    };
    let (train, val_items) = split_items(corpus, cfg)?;
    let val = sr_val_set(&val_items, codec, text, &vocab, cfg)?;
    let depth = codec.config.depth;
    let first = cfg.first_layer();
    let fr = codec.frame_rate();
    let plan = Plan {
        role: Role::SuperRes,
        steps: cfg.sr_steps,
        cfg,
        frame_rate: fr,
        seed,
    };
    let mut report = run(
        &mut lm,
        &plan,
        &train,
        &val,
        |item, r| {
            let (tc, h) = clip(item, cfg.clip_frames, fr, Some(r))?;
            match sample_task_from(cfg.p0, first, depth, r)? {
                TaskKind::Task1(n) => build_task1(&tc, &h, &codec.codebooks, n, text, &vocab),
                _ => build_task0(&tc, &h, text, &vocab),
            }
        },
        observe,
    )?;
    if cfg.p0 == 0.0 {
        report.flags.push(NO_TASK0_FLAG.to_string());
    }
    let trained = TrainedLm {
        lm,
        role: Role::SuperRes,
        text: *text,
        codec_digest: codec.digest_hex(),
        step: cfg.sr_steps,
        seed,
    };
    Ok((trained, report))
}

/// SR parameters initialised from a backbone: trunk tensors and the shared
/// embedding/output rows are copied bit-exactly, everything else is drawn
/// from `N(0, init_std²)`. Returns the model and the names of the copied
/// tensors (row-copied tables included).
pub fn init_sr_from_backbone(
    backbone: &Lm,
    sr_config: &LmConfig,
    sr_vocab: VocabLayout,
    latent_dim: usize,
    seed: u64,
) -> Result<(Lm, Vec<String>)> {
    let b = &backbone.config;
    let trunk_same = b.n_layers == sr_config.n_layers
        && b.d_model == sr_config.d_model
        && b.n_heads == sr_config.n_heads
        && b.n_kv_heads == sr_config.n_kv_heads
        && b.d_ffn == sr_config.d_ffn;
    if !trunk_same {
        return Err(Error::invalid("backbone and SR trunks differ in shape"));
    }
    let bv = backbone.vocab;
    if bv.text != sr_vocab.text
        || bv.depth != sr_vocab.depth
        || bv.codebook_size != sr_vocab.codebook_size
        || bv.acoustic_blocks > sr_vocab.acoustic_blocks
    {
        return Err(Error::invalid(
            "SR vocab does not extend the backbone vocab",
        ));
    }
    let mut sr = Lm::init(sr_config, sr_vocab, latent_dim, seed)?;
    let mut copied = Vec::new();
    for name in backbone.trunk_names() {
        sr.params
            .insert(name.clone(), backbone.params.get(&name)?.clone());
        copied.push(name);
    }
    let shared = bv.size();
    let d = sr_config.d_model;
    for table in ["tok_emb", "head"] {
        let src = backbone.params.get(table)?.data()[..shared * d].to_vec();
        sr.params.get_mut(table)?.data_mut()[..shared * d].copy_from_slice(&src);
        copied.push(table.to_string());
    }
    Ok((sr, copied))
}

/// First step at which each run's validation curve reaches `threshold`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Convergence {
    /// `f64::INFINITY` if never reached.
    pub steps_a: f64,
    pub steps_b: f64,
    /// `steps_a / steps_b`.
    pub ratio: f64,
}

pub fn compare_convergence(
    a: &RunReport,
    b: &RunReport,
    task: &str,
    threshold: f32,
) -> Result<Convergence> {
    let first = |r: &RunReport| -> Result<f64> {
        let c = r.curve(Split::Val, task);
        if c.is_empty() {
            return Err(Error::invalid(format!("no validation curve for {task}")));
        }
        Ok(c.iter()
            .find(|&&(_, l)| l <= threshold)
            .map_or(f64::INFINITY, |&(s, _)| s as f64))
    };
    let (steps_a, steps_b) = (first(a)?, first(b)?);
    Ok(Convergence {
        steps_a,
        steps_b,
        ratio: steps_a / steps_b,
    })
}
