use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atck::codec::{eval_codec, holdout_items, train_codec, Codec};
use atck::eval::{bt_elo, read_votes, run_ablation, AblationArm, ArmInit, ELO_ANCHOR};
use atck::pipeline::{generate, GenerationRequest};
use atck::run::RunConfig;
use atck::sequence::TextCondition;
use atck::signal::{parse_lyric, read_corpus, synth_corpus, write_corpus};
use atck::trainer::{tokenize_corpus, train_backbone, train_sr, InitMode, TrainEvent, TrainedLm};
use atck::util::sha256_hex;
use atck::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "atck",
    version,
    about = "Deep acoustic-token hierarchy: codec, backbone, super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (`section.key=value` lines); defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides run.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the step count of the stage being trained.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the lyric corpus.
    Corpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train the codec on a corpus.
    TrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the backbone LM on codec tokens.
    TrainBackbone {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
    },
    /// Train the super-resolution LM.
    TrainSr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Required when train.init=backbone.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Generate audio for a lyric.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Whitespace-separated symbols, e.g. "s0 s4 s7 s2".
        #[arg(long)]
        text: String,
        #[arg(long)]
        duration: f32,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        temperature: Option<f32>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Held-out SDR for every layer count.
    EvalCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
    },
    /// Train and score ablation arms over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Comma-separated arm files; the standard arms when absent.
        #[arg(long, value_delimiter = ',')]
        arms: Vec<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Bradley–Terry/Elo ratings from pairwise votes.
    Rank {
        #[arg(long)]
        votes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ELO_ANCHOR)]
        anchor: f64,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::DigestMismatch { .. } | Error::UnknownSymbol(_) => {
                Failure::Usage(e.to_string())
            }
            e => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Out<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Content digest of a file, or of every file below a directory.
fn digest_path(path: &Path) -> Out<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path)?));
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut buf = Vec::new();
    for f in files {
        buf.extend_from_slice(
            f.strip_prefix(path)
                .unwrap_or(&f)
                .to_string_lossy()
                .as_bytes(),
        );
        buf.extend_from_slice(&fs::read(&f)?);
    }
    Ok(sha256_hex(&buf))
}

/// Record of one run: enough to reproduce every output.
struct Manifest {
    command: &'static str,
    config: Option<RunConfig>,
    seed: Option<u64>,
    inputs: Vec<(&'static str, PathBuf)>,
    outputs: Vec<(&'static str, PathBuf)>,
    extra: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &'static str, config: Option<&RunConfig>) -> Self {
        Self {
            command,
            config: config.cloned(),
            seed: config.map(|c| c.run.seed),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Vec::new(),
        }
    }

    fn write(&self, dir: &Path) -> Out<()> {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        for (k, v) in &self.extra {
            let _ = writeln!(s, "{k}={v}");
        }
        for (name, p) in &self.inputs {
            let _ = writeln!(s, "input.{name}.path={}", p.display());
            let _ = writeln!(s, "input.{name}.sha256={}", digest_path(p)?);
        }
        for (name, p) in &self.outputs {
            let _ = writeln!(s, "output.{name}.path={}", p.display());
            let _ = writeln!(s, "output.{name}.sha256={}", digest_path(p)?);
        }
        if let Some(c) = &self.config {
            let _ = writeln!(s, "config_digest={}", c.digest_hex());
            s.push_str(&c.canonical());
        }
        fs::write(dir.join("run_manifest.txt"), s)?;
        Ok(())
    }
}

fn load_config(common: &Common) -> Out<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) if !p.is_file() => {
            return Err(usage(format!("config {} does not exist", p.display())))
        }
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
    }
    Ok(cfg)
}

fn require(path: &Path, what: &str) -> Out<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn prepare_out(dir: &Path) -> Out<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn progress(e: &TrainEvent<'_>) {
    if let Some(v) = e.val {
        let parts: Vec<String> = v.iter().map(|(k, l)| format!("{k}={l:.4}")).collect();
        log::info!(
            "{} step {} train {:.4} | val {}",
            e.role.name(),
            e.step,
            e.train_loss,
            parts.join(" ")
        );
    }
}

fn load_lm(path: &Path, what: &str) -> Out<TrainedLm> {
    require(path, what)?;
    Ok(TrainedLm::load(path)?)
}

fn load_codec(path: &Path) -> Out<Codec> {
    require(path, "codec checkpoint")?;
    Ok(Codec::load(path)?)
}

fn load_items(path: &Path) -> Out<Vec<atck::signal::CorpusItem>> {
    require(path, "corpus")?;
    Ok(read_corpus(path)?)
}

/// Arm file: `arm.name`, `train.p0`, `train.init`.
fn read_arm(path: &Path) -> Out<AblationArm> {
    require(path, "arm file")?;
    let text = fs::read_to_string(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut arm = AblationArm::new(&stem, 0.25, ArmInit::Scratch);
    for (k, v) in atck::config::parse_lines(&text)? {
        match k.as_str() {
            "arm.name" => arm.name = v,
            "train.p0" => {
                arm.p0 = v
                    .parse()
                    .map_err(|_| usage(format!("bad train.p0 {v:?}")))?
            }
            "train.init" => {
                arm.init = match v.as_str() {
                    "scratch" => ArmInit::Scratch,
                    "backbone" => ArmInit::Backbone,
                    _ => return Err(usage(format!("bad train.init {v:?}"))),
                }
            }
            _ => return Err(usage(format!("{}: unknown arm key {k:?}", path.display()))),
        }
    }
    Ok(arm)
}

fn run(cli: Cli) -> Out<()> {
    match cli.cmd {
        Cmd::Corpus { common } => {
            let cfg = load_config(&common)?;
            prepare_out(&common.out)?;
            let items = synth_corpus(&cfg.corpus, cfg.run.seed)?;
            write_corpus(&common.out, &items)?;
            let mut m = Manifest::new("corpus", Some(&cfg));
            m.outputs
                .push(("corpus", common.out.join(atck::signal::MANIFEST_FILE)));
            m.outputs.push(("items", common.out.join("items")));
            m.write(&common.out)?;
            println!("{} items -> {}", items.len(), common.out.display());
        }
        Cmd::TrainCodec { common, corpus } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.steps {
                cfg.codec_train.steps = s;
            }
            let items = load_items(&corpus)?;
            prepare_out(&common.out)?;
            let every = cfg.codec_train.log_every.max(1);
            let (codec, log) =
                train_codec(&items, &cfg.codec, &cfg.codec_train, cfg.run.seed, |s| {
                    if s.step % every == 0 {
                        log::info!(
                            "codec step {} loss {:.4} wav {:.4} stft {:.4}",
                            s.step,
                            s.loss,
                            s.wav_l1,
                            s.stft
                        );
                    }
                })?;
            let ck = common.out.join("codec.atck");
            codec.save(&ck)?;
            let mut csv = String::from("step,loss,wav_l1,stft,commit\n");
            for s in &log.steps {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    s.step, s.loss, s.wav_l1, s.stft, s.commit
                );
            }
            fs::write(common.out.join("codec_log.csv"), csv)?;
            let mut m = Manifest::new("train-codec", Some(&cfg));
            m.inputs.push(("corpus", corpus));
            m.outputs.push(("codec", ck));
            m.extra.push(("codec_digest".into(), codec.digest_hex()));
            m.write(&common.out)?;
            println!("codec {} usage {:?}", codec.digest_hex(), log.usage);
        }
        Cmd::EvalCodec {
            common,
            corpus,
            codec,
        } => {
            let cfg = load_config(&common)?;
            let c = load_codec(&codec)?;
            let items = load_items(&corpus)?;
            prepare_out(&common.out)?;
            let held = holdout_items(&items, cfg.codec_train.holdout_fraction);
            let counts: Vec<usize> = (1..=c.config.depth).collect();
            let table = eval_codec(&c, &held, &counts)?;
            let mut csv = String::from("layers,sdr_db\n");
            for (n, s) in &table {
                let _ = writeln!(csv, "{n},{s}");
                println!("{n:3} layers {s:7.2} dB");
            }
            let out = common.out.join("sdr.csv");
            fs::write(&out, csv)?;
            let mut m = Manifest::new("eval-codec", Some(&cfg));
            m.inputs.push(("corpus", corpus));
            m.inputs.push(("codec", codec));
            m.outputs.push(("sdr", out));
            m.write(&common.out)?;
        }
        Cmd::TrainBackbone {
            common,
            corpus,
            codec,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.steps {
                cfg.train.backbone_steps = s;
            }
            let c = load_codec(&codec)?;
            let items = load_items(&corpus)?;
            prepare_out(&common.out)?;
            let tokens = tokenize_corpus(&items, &c)?;
            let (lm, report) = train_backbone(
                &tokens,
                &c,
                &cfg.lm,
                &cfg.text_vocab()?,
                &cfg.train,
                cfg.run.seed,
                progress,
            )?;
            let ck = common.out.join("backbone.atck");
            lm.save(&ck)?;
            let rep = common.out.join("report.csv");
            fs::write(&rep, report.to_csv()?)?;
            let mut m = Manifest::new("train-backbone", Some(&cfg));
            m.inputs.push(("corpus", corpus));
            m.inputs.push(("codec", codec));
            m.outputs.push(("backbone", ck));
            m.outputs.push(("report", rep));
            m.write(&common.out)?;
        }
        Cmd::TrainSr {
            common,
            corpus,
            codec,
            backbone,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.steps {
                cfg.train.sr_steps = s;
            }
            let c = load_codec(&codec)?;
            let init = match (cfg.train.init_mode()?, &backbone) {
                (InitMode::FromBackbone, None) => {
                    return Err(usage("train.init=backbone needs --backbone"))
                }
                (_, Some(p)) => Some(load_lm(p, "backbone checkpoint")?),
                (InitMode::Scratch, None) => None,
            };
            let items = load_items(&corpus)?;
            prepare_out(&common.out)?;
            let tokens = tokenize_corpus(&items, &c)?;
            let (lm, report) = train_sr(
                &tokens,
                &c,
                &cfg.lm,
                &cfg.text_vocab()?,
                &cfg.train,
                init.as_ref(),
                cfg.run.seed,
                progress,
            )?;
            let ck = common.out.join("sr.atck");
            lm.save(&ck)?;
            let rep = common.out.join("report.csv");
            fs::write(&rep, report.to_csv()?)?;
            let mut m = Manifest::new("train-sr", Some(&cfg));
            m.inputs.push(("corpus", corpus));
            m.inputs.push(("codec", codec));
            if let Some(b) = backbone {
                m.inputs.push(("backbone", b));
            }
            m.outputs.push(("sr", ck));
            m.outputs.push(("report", rep));
            m.extra.push(("flags".into(), report.flags.join(";")));
            m.write(&common.out)?;
        }
        Cmd::Generate {
            common,
            backbone,
            sr,
            codec,
            text,
            duration,
            depth,
            temperature,
            top_k,
        } => {
            let cfg = load_config(&common)?;
            let b = load_lm(&backbone, "backbone checkpoint")?;
            let s = load_lm(&sr, "SR checkpoint")?;
            let c = load_codec(&codec)?;
            let lyric = parse_lyric(&text, b.text.symbols)?;
            let tc = TextCondition::new(lyric, duration).map_err(|e| usage(e.to_string()))?;
            let mut req = GenerationRequest::new(tc, depth.unwrap_or(c.config.depth), cfg.run.seed);
            req.temperature = temperature.unwrap_or(cfg.run.temperature);
            req.top_k = top_k.unwrap_or(cfg.run.top_k);
            req.validate().map_err(|e| usage(e.to_string()))?;
            prepare_out(&common.out)?;
            let g = generate(&b, &s, &c, &req)?;
            let stem = common.out.join("generation");
            g.write(&stem)?;
            let mut m = Manifest::new("generate", Some(&cfg));
            m.inputs.push(("backbone", backbone));
            m.inputs.push(("sr", sr));
            m.inputs.push(("codec", codec));
            m.outputs.push(("pcm", stem.with_extension("pcm")));
            m.outputs.push(("meta", stem.with_extension("meta")));
            m.extra.push(("text".into(), text));
            m.extra.push(("duration".into(), duration.to_string()));
            m.write(&common.out)?;
            println!(
                "waveform {} ({} samples, {} SR passes)",
                g.waveform_digest(),
                g.waveform.len(),
                g.sr_passes
            );
        }
        Cmd::Ablate {
            common,
            corpus,
            codec,
            arms,
            seeds,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.steps {
                cfg.train.backbone_steps = s;
                cfg.train.sr_steps = s;
            }
            if seeds == 0 {
                return Err(usage("--seeds must be at least 1"));
            }
            let arm_list = if arms.is_empty() {
                AblationArm::standard()
            } else {
                arms.iter().map(|p| read_arm(p)).collect::<Out<Vec<_>>>()?
            };
            let c = load_codec(&codec)?;
            let items = load_items(&corpus)?;
            prepare_out(&common.out)?;
            let tokens = tokenize_corpus(&items, &c)?;
            let setup = cfg.ablation_setup(&tokens, &c)?;
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.run.seed + i).collect();
            let table = run_ablation(&setup, &arm_list, &seed_list, |r| match &r.failure {
                None => log::info!(
                    "{} seed {}: alignment {:.3} task1 {:.4}",
                    r.arm,
                    r.seed,
                    r.alignment_error,
                    r.task1_loss
                ),
                Some(e) => log::warn!("{} seed {} failed: {e}", r.arm, r.seed),
            })?;
            let out = common.out.join("ablation.csv");
            let csv = table.to_csv()?;
            fs::write(&out, &csv)?;
            print!("{csv}");
            let mut m = Manifest::new("ablate", Some(&cfg));
            m.inputs.push(("corpus", corpus));
            m.inputs.push(("codec", codec));
            m.inputs.extend(arms.into_iter().map(|p| ("arm", p)));
            m.outputs.push(("table", out));
            m.write(&common.out)?;
        }
        Cmd::Rank { votes, out, anchor } => {
            require(&votes, "votes file")?;
            let records =
                read_votes(&fs::read_to_string(&votes)?).map_err(|e| usage(e.to_string()))?;
            let ratings = bt_elo(&records, anchor)?;
            prepare_out(&out)?;
            let path = out.join("ratings.csv");
            let csv = ratings.to_csv()?;
            fs::write(&path, &csv)?;
            print!("{csv}");
            let mut m = Manifest::new("rank", None);
            m.inputs.push(("votes", votes));
            m.outputs.push(("ratings", path));
            m.extra.push(("anchor".into(), anchor.to_string()));
            m.write(&out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("ATCK_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: ATCK_THREADS must be a positive integer, got {v:?}");
                return ExitCode::from(1);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
