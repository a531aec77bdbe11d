//! Alignment oracle, ablation runner and Bradley–Terry/Elo ranking.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::codec::Codec;
use crate::config::config_section;
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::pipeline::{generate, super_resolve, GenerationRequest};
use crate::rvq::decode_tensor;
use crate::sequence::TextVocab;
use crate::signal::{stft, symbol_frequency, Waveform};
use crate::trainer::{
    compare_convergence, train_backbone, train_sr, RunReport, Split, TokenizedItem, TrainedLm,
    TrainerConfig,
};
use crate::util::{derive_seed, is_holdout, median};

/// Segments quieter than this total energy count as mismatches.
pub const SILENCE_ENERGY: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentConfig {
    /// Lyric vocabulary size `V`.
    pub vocab_size: usize,
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            fft_size: 2296,
            hop: 574,
        }
    }
}

config_section!(AlignmentConfig, "align", [vocab_size, fft_size, hop]);

/// Symbol whose pitch is closest (in log frequency) to `hz`.
pub fn nearest_symbol(hz: f32, vocab_size: usize) -> usize {
    let dist = |s: usize| (hz.max(1e-3) / symbol_frequency(s)).log2().abs();
    (0..vocab_size)
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        .unwrap_or(0)
}

/// Dominant symbol of each of `m` equal segments; `None` for silent ones.
pub fn segment_symbols(
    w: &Waveform,
    m: usize,
    config: &AlignmentConfig,
) -> Result<Vec<Option<usize>>> {
    if m == 0 {
        return Err(Error::invalid("lyric is empty"));
    }
    let seg = w.len() / m;
    if seg < config.fft_size {
        return Err(Error::invalid(format!(
            "{m} segments of {seg} samples do not fit one {}-point frame",
            config.fft_size
        )));
    }
    (0..m)
        .map(|i| {
            let part = w.segment(i * seg, seg)?;
            if part.energy() < SILENCE_ENERGY {
                return Ok(None);
            }
            let spec = stft(&part, config.fft_size, config.hop, config.fft_size)?.summed();
            let peak = (1..spec.len())
                .max_by(|&a, &b| spec[a].total_cmp(&spec[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            let hz = peak as f32 * w.sample_rate() as f32 / config.fft_size as f32;
            Ok(Some(nearest_symbol(hz, config.vocab_size)))
        })
        .collect()
}

/// Fraction of segments whose dominant pitch does not map to the lyric
/// symbol at that position.
pub fn alignment_error(w: &Waveform, lyric: &[usize], config: &AlignmentConfig) -> Result<f32> {
    let got = segment_symbols(w, lyric.len(), config)?;
    let wrong = got
        .iter()
        .zip(lyric)
        .filter(|(g, &s)| **g != Some(s))
        .count();
    Ok(wrong as f32 / lyric.len() as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArmInit {
    Scratch,
    Backbone,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationArm {
    pub name: String,
    pub p0: f32,
    pub init: ArmInit,
}

impl AblationArm {
    pub fn new(name: &str, p0: f32, init: ArmInit) -> Self {
        Self {
            name: name.to_string(),
            p0,
            init,
        }
    }

    /// Arms of the Task 0 and initialisation ablations. Both Task 0 arms are
    /// backbone-initialised; the shared `w/ Task 0, w/ Init` arm is the
    /// treatment of both comparisons.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new(ARM_NO_TASK0, 0.0, ArmInit::Backbone),
            Self::new(ARM_FULL, 0.25, ArmInit::Backbone),
            Self::new(ARM_NO_INIT, 0.25, ArmInit::Scratch),
        ]
    }
}

pub const ARM_NO_TASK0: &str = "w/o Task 0";
pub const ARM_FULL: &str = "w/ Task 0, w/ Init";
pub const ARM_NO_INIT: &str = "w/o Init";

/// Everything shared by the arms of one ablation.
#[derive(Clone, Debug)]
pub struct AblationSetup<'a> {
    pub corpus: &'a [TokenizedItem],
    pub codec: &'a Codec,
    pub backbone_lm: LmConfig,
    pub sr_lm: LmConfig,
    pub text: TextVocab,
    pub train: TrainerConfig,
    pub align: AlignmentConfig,
    /// Held-out items used as generation prompts.
    pub n_prompts: usize,
    /// Rendered depth; 0 = codec depth.
    pub depth: usize,
    /// Validation Task 1 loss that counts as converged.
    pub task1_threshold: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: String,
    pub seed: u64,
    pub p0: f32,
    pub init: ArmInit,
    /// Mean over prompts.
    pub alignment_error: f32,
    /// Final validation Task 1 loss.
    pub task1_loss: f32,
    /// Relative latent error of SR from ground-truth layers 0 and 1.
    pub codec_recon: f32,
    /// First evaluated step at or below the Task 1 threshold (∞ if never).
    pub steps_to_threshold: f64,
    /// `None` on success.
    pub failure: Option<String>,
    pub report: RunReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub failed: usize,
    pub alignment_error: f32,
    pub task1_loss: f32,
    pub codec_recon: f32,
    pub steps_to_threshold: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl fmt::Display for ArmInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArmInit::Scratch => "scratch",
            ArmInit::Backbone => "backbone",
        })
    }
}

fn median_f64(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl AblationTable {
    /// Medians over the successful seeds of each arm, in first-seen order.
    pub fn summaries(&self) -> Vec<ArmSummary> {
        let mut names: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.arm.as_str()) {
                names.push(&r.arm);
            }
        }
        names
            .into_iter()
            .map(|name| {
                let all: Vec<&AblationRow> = self.rows.iter().filter(|r| r.arm == name).collect();
                let ok: Vec<&AblationRow> = all
                    .iter()
                    .copied()
                    .filter(|r| r.failure.is_none())
                    .collect();
                let m = |f: fn(&AblationRow) -> f32| {
                    median(&ok.iter().map(|r| f(r)).collect::<Vec<_>>())
                };
                ArmSummary {
                    arm: name.to_string(),
                    runs: all.len(),
                    failed: all.len() - ok.len(),
                    alignment_error: m(|r| r.alignment_error),
                    task1_loss: m(|r| r.task1_loss),
                    codec_recon: m(|r| r.codec_recon),
                    steps_to_threshold: median_f64(
                        &ok.iter().map(|r| r.steps_to_threshold).collect::<Vec<_>>(),
                    ),
                }
            })
            .collect()
    }

    pub fn summary(&self, arm: &str) -> Option<ArmSummary> {
        self.summaries().into_iter().find(|s| s.arm == arm)
    }

    /// One row per (arm, seed) followed by one `median` row per arm.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "arm",
            "seed",
            "p0",
            "init",
            "alignment_error",
            "task1_val_loss",
            "codec_recon",
            "steps_to_threshold",
            "status",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.arm.clone(),
                r.seed.to_string(),
                r.p0.to_string(),
                r.init.to_string(),
                r.alignment_error.to_string(),
                r.task1_loss.to_string(),
                r.codec_recon.to_string(),
                r.steps_to_threshold.to_string(),
                r.failure
                    .clone()
                    .map_or("ok".to_string(), |e| format!("failed: {e}")),
            ])?;
        }
        for s in self.summaries() {
            let first = self
                .rows
                .iter()
                .find(|r| r.arm == s.arm)
                .expect("arm has rows");
            w.write_record([
                s.arm.clone(),
                "median".into(),
                first.p0.to_string(),
                first.init.to_string(),
                s.alignment_error.to_string(),
                s.task1_loss.to_string(),
                s.codec_recon.to_string(),
                s.steps_to_threshold.to_string(),
                format!("{}/{} ok", s.runs - s.failed, s.runs),
            ])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|_| Error::invalid("table is not utf-8"))
    }
}

/// Prompts: the first `n` held-out items.
pub fn eval_prompts(corpus: &[TokenizedItem], fraction: f32, n: usize) -> Vec<&TokenizedItem> {
    corpus
        .iter()
        .filter(|it| is_holdout(it.id, fraction))
        .take(n)
        .collect()
}

/// Mean over items of `‖ẑ − z‖² / ‖z‖²`, where `ẑ` sums the layers the SR
/// model predicts from the item's true layers 0 and 1.
pub fn codec_recon_error(
    sr: &TrainedLm,
    codec: &Codec,
    items: &[&TokenizedItem],
    depth: usize,
) -> Result<f32> {
    let mut total = 0.0f64;
    for it in items {
        let req = GenerationRequest {
            sr_temperature: 0.0,
            ..GenerationRequest::new(it.text.clone(), depth, 0)
        };
        let pred = super_resolve(sr, codec, &req, &it.tokens.truncated(2)?)?.tokens;
        let z = decode_tensor(&it.tokens, &codec.codebooks, depth)?;
        let zh = decode_tensor(&pred, &codec.codebooks, depth)?;
        let err: f64 = z
            .data()
            .iter()
            .zip(zh.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        let energy: f64 = z.data().iter().map(|a| (*a as f64).powi(2)).sum();
        total += err / energy.max(1e-12);
    }
    Ok((total / items.len().max(1) as f64) as f32)
}

fn run_arm(
    setup: &AblationSetup<'_>,
    arm: &AblationArm,
    seed: u64,
    backbone: &TrainedLm,
    prompts: &[&TokenizedItem],
) -> Result<(f32, f32, f32, f64, RunReport)> {
    let cfg = TrainerConfig {
        p0: arm.p0,
        init: match arm.init {
            ArmInit::Scratch => "scratch".into(),
            ArmInit::Backbone => "backbone".into(),
        },
        ..setup.train.clone()
    };
    let (sr, report) = train_sr(
        setup.corpus,
        setup.codec,
        &setup.sr_lm,
        &setup.text,
        &cfg,
        Some(backbone),
        seed,
        |_| {},
    )?;
    let depth = if setup.depth == 0 {
        setup.codec.config.depth
    } else {
        setup.depth
    };
    let mut errs = Vec::with_capacity(prompts.len());
    for (i, it) in prompts.iter().enumerate() {
        let req = GenerationRequest::new(
            it.text.clone(),
            depth,
            derive_seed(seed, "ablation-prompt", i as u64),
        );
        let g = generate(backbone, &sr, setup.codec, &req)?;
        errs.push(alignment_error(&g.waveform, &it.text.lyric, &setup.align)?);
    }
    let align = errs.iter().sum::<f32>() / errs.len().max(1) as f32;
    let task1 = report.final_loss(Split::Val, "task1").unwrap_or(f32::NAN);
    let recon = codec_recon_error(&sr, setup.codec, prompts, depth)?;
    let steps = compare_convergence(&report, &report, "task1", setup.task1_threshold)?.steps_a;
    Ok((align, task1, recon, steps, report))
}

/// Trains one backbone per seed and every arm's SR model on it, then
/// generates the prompt set and scores it. A failing arm becomes a failed
/// row; a failing backbone fails every arm of that seed.
pub fn run_ablation(
    setup: &AblationSetup<'_>,
    arms: &[AblationArm],
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(Error::invalid(
            "ablation needs at least one arm and one seed",
        ));
    }
    let names: BTreeSet<&str> = arms.iter().map(|a| a.name.as_str()).collect();
    if names.len() != arms.len() {
        return Err(Error::invalid("arm names must be distinct"));
    }
    let prompts = eval_prompts(setup.corpus, setup.train.val_fraction, setup.n_prompts);
    if prompts.is_empty() {
        return Err(Error::invalid("no held-out prompts"));
    }
    let mut table = AblationTable::default();
    for &seed in seeds {
        let backbone = train_backbone(
            setup.corpus,
            setup.codec,
            &setup.backbone_lm,
            &setup.text,
            &setup.train,
            seed,
            |_| {},
        )
        .map(|(b, _)| b);
        for arm in arms {
            let result = match &backbone {
                Ok(b) => run_arm(setup, arm, seed, b, &prompts),
                Err(e) => Err(Error::invalid(format!("backbone: {e}"))),
            };
            let row = match result {
                Ok((alignment_error, task1_loss, codec_recon, steps_to_threshold, report)) => {
                    AblationRow {
                        arm: arm.name.clone(),
                        seed,
                        p0: arm.p0,
                        init: arm.init,
                        alignment_error,
                        task1_loss,
                        codec_recon,
                        steps_to_threshold,
                        failure: None,
                        report,
                    }
                }
                Err(e) => AblationRow {
                    arm: arm.name.clone(),
                    seed,
                    p0: arm.p0,
                    init: arm.init,
                    alignment_error: f32::NAN,
                    task1_loss: f32::NAN,
                    codec_recon: f32::NAN,
                    steps_to_threshold: f64::NAN,
                    failure: Some(e.to_string()),
                    report: RunReport::default(),
                },
            };
            progress(&row);
            table.rows.push(row);
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoteRecord {
    pub model_a: String,
    pub model_b: String,
    pub score_a: u8,
    pub score_b: u8,
}

impl VoteRecord {
    pub fn new(model_a: &str, model_b: &str, score_a: u8, score_b: u8) -> Result<Self> {
        if !(1..=5).contains(&score_a) || !(1..=5).contains(&score_b) {
            return Err(Error::invalid(format!(
                "scores {score_a}/{score_b} outside 1..=5"
            )));
        }
        if model_a == model_b {
            return Err(Error::invalid(format!(
                "vote compares {model_a} with itself"
            )));
        }
        Ok(Self {
            model_a: model_a.into(),
            model_b: model_b.into(),
            score_a,
            score_b,
        })
    }

    /// Wins credited to `(a, b)`: 1/0, 0/1 or ½/½.
    pub fn wins(&self) -> (f64, f64) {
        match self.score_a.cmp(&self.score_b) {
            std::cmp::Ordering::Greater => (1.0, 0.0),
            std::cmp::Ordering::Less => (0.0, 1.0),
            std::cmp::Ordering::Equal => (0.5, 0.5),
        }
    }
}

/// `model_a,model_b,score_a,score_b` rows with a header.
pub fn read_votes(text: &str) -> Result<Vec<VoteRecord>> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(Error::invalid(format!("vote row {rec:?} needs 4 fields")));
        }
        let score = |i: usize| {
            rec[i]
                .parse::<u8>()
                .map_err(|_| Error::invalid(format!("bad score {:?}", &rec[i])))
        };
        out.push(VoteRecord::new(&rec[0], &rec[1], score(2)?, score(3)?)?);
    }
    Ok(out)
}

pub const ELO_ANCHOR: f64 = 1500.0;
const MM_TOL: f64 = 1e-8;
const MM_MAX_ITERS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct EloRatings {
    pub ratings: BTreeMap<String, f64>,
    /// Comparison-graph components; ratings are only comparable within one.
    pub components: Vec<Vec<String>>,
    pub iterations: usize,
}

impl EloRatings {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "elo", "component"])?;
        for (c, members) in self.components.iter().enumerate() {
            for m in members {
                w.write_record([m.clone(), format!("{:.4}", self.ratings[m]), c.to_string()])?;
            }
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
            .map_err(|_| Error::invalid("ratings are not utf-8"))
    }
}

/// `400/ln 10 · (ln π − mean ln π) + anchor`.
pub fn elo_from_log_strengths(log_pi: &[f64], anchor: f64) -> Vec<f64> {
    let mean = log_pi.iter().sum::<f64>() / log_pi.len() as f64;
    log_pi
        .iter()
        .map(|l| anchor + 400.0 / std::f64::consts::LN_10 * (l - mean))
        .collect()
}

/// Bradley–Terry log-likelihood of log strengths under win matrix `w`
/// (`w[i][j]` = wins of i over j).
pub fn bt_log_likelihood(w: &[Vec<f64>], log_pi: &[f64]) -> f64 {
    let mut ll = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            if w[i][j] > 0.0 {
                let d = log_pi[j] - log_pi[i];
                ll -= w[i][j] * d.exp().ln_1p();
            }
        }
    }
    ll
}

/// Minorization–maximization for one connected component.
fn fit_component(w: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let m = w.len();
    let wins: Vec<f64> = (0..m).map(|i| w[i].iter().sum()).collect();
    let mut pi = vec![1.0f64; m];
    for it in 1..=MM_MAX_ITERS {
        let mut next = vec![0.0; m];
        for i in 0..m {
            let denom: f64 = (0..m)
                .filter(|&j| j != i)
                .map(|j| (w[i][j] + w[j][i]) / (pi[i] + pi[j]))
                .sum();
            next[i] = if denom > 0.0 { wins[i] / denom } else { pi[i] };
        }
        let gm = (next.iter().map(|p| p.max(1e-300).ln()).sum::<f64>() / m as f64).exp();
        next.iter_mut().for_each(|p| *p /= gm);
        let delta = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| (a.max(1e-300).ln() - b.max(1e-300).ln()).abs())
            .fold(0.0, f64::max);
        pi = next;
        if delta < MM_TOL {
            return (pi.iter().map(|p| p.max(1e-300).ln()).collect(), it);
        }
    }
    (
        pi.iter().map(|p| p.max(1e-300).ln()).collect(),
        MM_MAX_ITERS,
    )
}

/// Bradley–Terry strengths by MM, mapped to Elo around `anchor` per
/// connected component.
pub fn bt_elo(votes: &[VoteRecord], anchor: f64) -> Result<EloRatings> {
    if votes.is_empty() {
        return Err(Error::invalid("no votes"));
    }
    let models: Vec<String> = votes
        .iter()
        .flat_map(|v| [v.model_a.clone(), v.model_b.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if models.len() < 2 {
        return Err(Error::invalid("need at least two models"));
    }
    let idx: BTreeMap<&str, usize> = models
        .iter()
        .enumerate()
        .map(|(i, m)| (m.as_str(), i))
        .collect();
    let n = models.len();
    let mut w = vec![vec![0.0f64; n]; n];
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for v in votes {
        let (a, b) = (idx[v.model_a.as_str()], idx[v.model_b.as_str()]);
        let (wa, wb) = v.wins();
        w[a][b] += wa;
        w[b][a] += wb;
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        parent[ra] = rb;
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    if groups.len() > 1 {
        log::warn!(
            "comparison graph has {} components; ratings are per component",
            groups.len()
        );
    }
    let mut ratings = BTreeMap::new();
    let mut components = Vec::new();
    let mut iterations = 0;
    for members in groups.values() {
        let sub: Vec<Vec<f64>> = members
            .iter()
            .map(|&i| members.iter().map(|&j| w[i][j]).collect())
            .collect();
        let (log_pi, its) = fit_component(&sub);
        iterations = iterations.max(its);
        for (&i, e) in members.iter().zip(elo_from_log_strengths(&log_pi, anchor)) {
            ratings.insert(models[i].clone(), e);
        }
        components.push(members.iter().map(|&i| models[i].clone()).collect());
    }
    Ok(EloRatings {
        ratings,
        components,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{synth_corpus, CorpusConfig};
    use crate::util::rng;
    use rand::seq::SliceRandom;

    fn corpus(n: usize, m: usize) -> Vec<crate::signal::CorpusItem> {
        synth_corpus(
            &CorpusConfig {
                n_items: n,
                symbols_per_item: m,
                ..Default::default()
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn oracle_recovers_own_lyrics() {
        let cfg = AlignmentConfig::default();
        for it in corpus(40, 4) {
            assert_eq!(
                alignment_error(&it.waveform, &it.lyric, &cfg).unwrap(),
                0.0,
                "item {}",
                it.id
            );
        }
    }

    #[test]
    fn shuffled_lyrics_miss_fifteen_sixteenths() {
        let cfg = AlignmentConfig::default();
        let items = corpus(100, 16);
        let mut r = rng(4);
        let mut total = 0.0;
        for it in &items {
            let mut lyric: Vec<usize> = (0..16)
                .map(|_| rand::Rng::gen_range(&mut r, 0..16))
                .collect();
            lyric.shuffle(&mut r);
            total += alignment_error(&it.waveform, &lyric, &cfg).unwrap();
        }
        let mean = total / items.len() as f32;
        assert!((mean - 15.0 / 16.0).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn silence_gain_and_budget() {
        let cfg = AlignmentConfig::default();
        let silent = Waveform::new(vec![0.0; 16000], 16000).unwrap();
        assert_eq!(alignment_error(&silent, &[0, 1, 2], &cfg).unwrap(), 1.0);
        let it = &corpus(3, 4)[2];
        let base = segment_symbols(&it.waveform, 4, &cfg).unwrap();
        for gain in [1e-2, 0.3, 3.0] {
            assert_eq!(
                segment_symbols(&it.waveform.scaled(gain).unwrap(), 4, &cfg).unwrap(),
                base
            );
        }
        assert!(alignment_error(&it.waveform, &[0; 20], &cfg).is_err());
        assert!(alignment_error(&it.waveform, &[], &cfg).is_err());
    }

    #[test]
    fn nearest_symbol_examples() {
        assert_eq!(nearest_symbol(220.0, 16), 0);
        assert_eq!(nearest_symbol(233.0, 16), 1);
        assert_eq!(nearest_symbol(5000.0, 16), 15);
        assert_eq!(nearest_symbol(50.0, 16), 0);
    }

    fn votes(raw: &[(&str, &str, u8, u8)]) -> Vec<VoteRecord> {
        raw.iter()
            .map(|&(a, b, x, y)| VoteRecord::new(a, b, x, y).unwrap())
            .collect()
    }

    #[test]
    fn elo_ordering_and_symmetry() {
        let r = bt_elo(
            &votes(&[("A", "B", 5, 2), ("A", "B", 4, 3), ("B", "A", 1, 3)]),
            ELO_ANCHOR,
        )
        .unwrap();
        // all-win records have no finite MLE; the loser drifts down but the order holds
        assert!(r.ratings["A"] > r.ratings["B"]);

        let sym = votes(&[
            ("A", "B", 5, 3),
            ("B", "A", 5, 3),
            ("B", "C", 4, 2),
            ("C", "B", 4, 2),
            ("C", "A", 3, 3),
        ]);
        let r = bt_elo(&sym, ELO_ANCHOR).unwrap();
        for v in r.ratings.values() {
            assert_eq!(*v, ELO_ANCHOR);
        }
        assert!(bt_elo(&[], ELO_ANCHOR).is_err());
        assert!(VoteRecord::new("A", "A", 3, 3).is_err());
        assert!(VoteRecord::new("A", "B", 0, 3).is_err());
    }

    /// Coarse-to-fine grid over (ln π_A, ln π_B) with ln π_C = −ln π_A − ln π_B.
    fn grid_search(w: &[Vec<f64>]) -> Vec<f64> {
        let mut best = (0.0f64, 0.0f64);
        let mut step = 0.05;
        let mut span = 4.0;
        while step > 2e-5 {
            let (ca, cb) = best;
            let mut best_ll = f64::NEG_INFINITY;
            let k = (span / step) as i64;
            for i in -k..=k {
                for j in -k..=k {
                    let (a, b) = (ca + i as f64 * step, cb + j as f64 * step);
                    let ll = bt_log_likelihood(w, &[a, b, -a - b]);
                    if ll > best_ll {
                        best_ll = ll;
                        best = (a, b);
                    }
                }
            }
            span = step * 4.0;
            step /= 8.0;
        }
        vec![best.0, best.1, -best.0 - best.1]
    }

    #[test]
    fn mm_matches_grid_search() {
        let v = votes(&[
            ("A", "B", 5, 3),
            ("B", "A", 4, 3),
            ("A", "C", 4, 2),
            ("C", "B", 3, 3),
            ("B", "C", 5, 1),
            ("C", "A", 4, 2),
        ]);
        let fit = bt_elo(&v, ELO_ANCHOR).unwrap();
        let mut w = vec![vec![0.0; 3]; 3];
        let ix = |m: &str| ["A", "B", "C"].iter().position(|x| *x == m).unwrap();
        for vote in &v {
            let (a, b) = vote.wins();
            w[ix(&vote.model_a)][ix(&vote.model_b)] += a;
            w[ix(&vote.model_b)][ix(&vote.model_a)] += b;
        }
        let oracle = elo_from_log_strengths(&grid_search(&w), ELO_ANCHOR);
        for (m, e) in ["A", "B", "C"].iter().zip(oracle) {
            assert!(
                (fit.ratings[*m] - e).abs() <= 0.5,
                "{m}: {} vs {e}",
                fit.ratings[*m]
            );
        }
    }

    #[test]
    fn disconnected_components_rated_separately() {
        let v = votes(&[
            ("A", "B", 5, 3),
            ("B", "A", 2, 3),
            ("A", "B", 2, 4),
            ("C", "D", 3, 3),
        ]);
        let r = bt_elo(&v, ELO_ANCHOR).unwrap();
        assert_eq!(r.components.len(), 2);
        assert_eq!(r.ratings["C"], ELO_ANCHOR);
        assert!((r.ratings["A"] + r.ratings["B"] - 2.0 * ELO_ANCHOR).abs() < 1e-9);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("model,elo,component\n"));
    }

    #[test]
    fn votes_csv() {
        let v = read_votes("model_a,model_b,score_a,score_b\nA, B, 5, 2\nB,C,3,3\n").unwrap();
        assert_eq!(v, votes(&[("A", "B", 5, 2), ("B", "C", 3, 3)]));
        assert!(read_votes("model_a,model_b,score_a,score_b\nA,B,6,2\n").is_err());
    }

    #[test]
    fn table_bookkeeping() {
        let row = |arm: &str, seed, a, failure: Option<&str>| AblationRow {
            arm: arm.into(),
            seed,
            p0: 0.25,
            init: ArmInit::Scratch,
            alignment_error: a,
            task1_loss: 1.0,
            codec_recon: 0.5,
            steps_to_threshold: 10.0,
            failure: failure.map(String::from),
            report: RunReport::default(),
        };
        let t = AblationTable {
            rows: vec![
                row("x", 1, 0.2, None),
                row("x", 2, 0.4, None),
                row("y", 1, f32::NAN, Some("diverged")),
            ],
        };
        let s = t.summary("x").unwrap();
        assert!((s.alignment_error - 0.3).abs() < 1e-6);
        assert_eq!(t.summary("y").unwrap().failed, 1);
        let csv = t.to_csv().unwrap();
        assert!(csv.contains("x,1,") && csv.contains("x,2,") && csv.contains("failed: diverged"));
        assert!(csv.contains("x,median,"));
    }
}
