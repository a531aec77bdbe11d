use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
corpus.n_items=8
corpus.vocab_size=4
align.vocab_size=4
codec.depth=4
codec.codebook_size=8
codec.latent_dim=4
codec.factors=4,4
codec.enc_channels=4,4,4
codec_train.steps=2
codec_train.batch=2
codec_train.crop_len=256
codec_train.warmup=1
codec_train.holdout_fraction=0.5
lm.n_layers=1
lm.d_model=16
lm.n_heads=2
lm.n_kv_heads=1
lm.d_ffn=16
lm.max_seq_len=256
sequence.max_duration_s=4
train.batch=2
train.backbone_steps=2
train.sr_steps=2
train.warmup=1
train.eval_every=1
train.clip_frames=8
train.val_fraction=0.5
train.init=backbone
";

fn atck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atck"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.cfg");
    fs::write(&cfg, TINY).unwrap();
    let (corpus, codec_dir, bb_dir, sr_dir) = (
        d.join("corpus"),
        d.join("codec"),
        d.join("bb"),
        d.join("sr"),
    );

    let o = atck(&[
        "corpus",
        "--config",
        p(&cfg),
        "--out",
        p(&corpus),
        "--seed",
        "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = atck(&[
        "train-codec",
        "--config",
        p(&cfg),
        "--out",
        p(&codec_dir),
        "--corpus",
        p(&corpus),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let codec = codec_dir.join("codec.atck");
    assert!(codec.is_file() && codec_dir.join("codec_log.csv").is_file());

    let eval_dir = d.join("eval");
    let o = atck(&[
        "eval-codec",
        "--config",
        p(&cfg),
        "--out",
        p(&eval_dir),
        "--corpus",
        p(&corpus),
        "--codec",
        p(&codec),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(eval_dir.join("sdr.csv"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    let o = atck(&[
        "train-backbone",
        "--config",
        p(&cfg),
        "--out",
        p(&bb_dir),
        "--corpus",
        p(&corpus),
        "--codec",
        p(&codec),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bb = bb_dir.join("backbone.atck");
    let o = atck(&[
        "train-sr",
        "--config",
        p(&cfg),
        "--out",
        p(&sr_dir),
        "--corpus",
        p(&corpus),
        "--codec",
        p(&codec),
        "--backbone",
        p(&bb),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sr = sr_dir.join("sr.atck");
    assert!(sr.is_file() && sr_dir.join("report.csv").is_file());

    let gen = |out: &Path, text: &str| {
        atck(&[
            "generate",
            "--config",
            p(&cfg),
            "--out",
            p(out),
            "--backbone",
            p(&bb),
            "--sr",
            p(&sr),
            "--codec",
            p(&codec),
            "--text",
            text,
            "--duration",
            "0.012",
            "--seed",
            "5",
        ])
    };
    let (g1, g2) = (d.join("g1"), d.join("g2"));
    assert_eq!(code(&gen(&g1, "s0 s3 s1")), 0);
    assert_eq!(code(&gen(&g2, "s0 s3 s1")), 0);
    let pcm = fs::read(g1.join("generation.pcm")).unwrap();
    assert_eq!(pcm, fs::read(g2.join("generation.pcm")).unwrap());
    assert_eq!(pcm.len(), 12 * 16 * 4);
    let meta = fs::read_to_string(g1.join("generation.meta")).unwrap();
    assert!(meta.contains("sr_passes=2\n"), "{meta}");

    let manifest = fs::read_to_string(g1.join("run_manifest.txt")).unwrap();
    assert!(manifest.contains("command=generate") && manifest.contains("input.codec.sha256="));
    assert!(manifest.contains("config_digest=") && manifest.contains("lm.d_model=16"));

    // unknown lyric symbol is a usage error
    assert_eq!(code(&gen(&d.join("g3"), "s0 s9")), 1);
    // a codec with a different config is rejected
    let other = d.join("codec2");
    let cfg2 = d.join("run2.cfg");
    fs::write(
        &cfg2,
        TINY.replace("codec.latent_dim=4", "codec.latent_dim=8"),
    )
    .unwrap();
    assert_eq!(
        code(&atck(&[
            "train-codec",
            "--config",
            p(&cfg2),
            "--out",
            p(&other),
            "--corpus",
            p(&corpus),
            "--seed",
            "9"
        ])),
        0
    );
    let o = atck(&[
        "generate",
        "--config",
        p(&cfg),
        "--out",
        p(&d.join("g4")),
        "--backbone",
        p(&bb),
        "--sr",
        p(&sr),
        "--codec",
        p(&other.join("codec.atck")),
        "--text",
        "s0",
        "--duration",
        "0.012",
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "corpus.n_items=3\n").unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    for (out, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        assert_eq!(
            code(&atck(&[
                "corpus",
                "--config",
                p(&cfg),
                "--out",
                p(out),
                "--seed",
                seed
            ])),
            0
        );
    }
    let digest = |d: &Path| {
        let m = fs::read_to_string(d.join("run_manifest.txt")).unwrap();
        m.lines()
            .filter(|l| l.starts_with("output."))
            .map(String::from)
            .filter(|l| l.contains("sha256"))
            .collect::<Vec<_>>()
    };
    assert_eq!(digest(&a), digest(&b));
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn rank_writes_ratings() {
    let dir = tempfile::tempdir().unwrap();
    let votes = dir.path().join("votes.csv");
    fs::write(
        &votes,
        "model_a,model_b,score_a,score_b\nx,y,5,2\ny,x,4,1\nx,y,3,3\n",
    )
    .unwrap();
    let out = dir.path().join("r");
    let o = atck(&["rank", "--votes", p(&votes), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ratings.csv")).unwrap();
    assert!(
        csv.starts_with("model,elo,component\n") && csv.contains("x,1500.0000,0"),
        "{csv}"
    );

    fs::write(&votes, "model_a,model_b,score_a,score_b\nx,y,7,2\n").unwrap();
    assert_eq!(
        code(&atck(&["rank", "--votes", p(&votes), "--out", p(&out)])),
        1
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&atck(&["--help"])), 0);
    assert_eq!(code(&atck(&["corpus", "--bogus"])), 1);
    assert_eq!(
        code(&atck(&[
            "train-codec",
            "--out",
            p(&d.join("o")),
            "--corpus",
            p(&d.join("missing"))
        ])),
        1
    );

    let cfg = d.join("bad.cfg");
    fs::write(&cfg, "codec.width=3\n").unwrap();
    assert_eq!(
        code(&atck(&[
            "corpus",
            "--config",
            p(&cfg),
            "--out",
            p(&d.join("o"))
        ])),
        1
    );

    let junk = d.join("junk.atck");
    fs::write(&junk, b"not a checkpoint").unwrap();
    fs::create_dir_all(d.join("corpus")).unwrap();
    let cfg = d.join("small.cfg");
    fs::write(&cfg, "corpus.n_items=2\n").unwrap();
    assert_eq!(
        code(&atck(&[
            "corpus",
            "--config",
            p(&cfg),
            "--out",
            p(&d.join("corpus"))
        ])),
        0
    );
    let o = atck(&[
        "eval-codec",
        "--out",
        p(&d.join("e")),
        "--corpus",
        p(&d.join("corpus")),
        "--codec",
        p(&junk),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
