//! On-disk corpus: a tab-separated manifest plus one raw little-endian f32
//! PCM file per item.
//!
//! ```text
//! sample_rate=16000
//! id	lyric	duration_s	seed	path
//! 0	s3 s7 s0 s11	2	1234	items/000000.f32
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{parse_lyric, CorpusItem, Waveform, MAX_VOCAB};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn write_pcm(path: &Path, w: &Waveform) -> Result<()> {
    let bytes: Vec<u8> = w.samples().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_pcm(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid(format!(
            "{}: length is not a multiple of 4",
            path.display()
        )));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Waveform::new(samples, sample_rate)
}

pub fn write_corpus(dir: &Path, items: &[CorpusItem]) -> Result<()> {
    let sample_rate = items
        .first()
        .map(|it| it.waveform.sample_rate())
        .unwrap_or(16000);
    if items
        .iter()
        .any(|it| it.waveform.sample_rate() != sample_rate)
    {
        return Err(Error::invalid("corpus items have different sample rates"));
    }
    fs::create_dir_all(dir.join("items"))?;
    let mut manifest = fs::File::create(dir.join(MANIFEST_FILE))?;
    writeln!(manifest, "sample_rate={sample_rate}")?;
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_writer(manifest);
    w.write_record(["id", "lyric", "duration_s", "seed", "path"])?;
    for it in items {
        let rel = format!("items/{:06}.f32", it.id);
        write_pcm(&dir.join(&rel), &it.waveform)?;
        w.write_record([
            it.id.to_string(),
            it.lyric_text(),
            it.duration_s.to_string(),
            it.seed.to_string(),
            rel,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusItem>> {
    let mut reader = BufReader::new(fs::File::open(dir.join(MANIFEST_FILE))?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let sample_rate: u32 = header
        .trim()
        .strip_prefix("sample_rate=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::invalid(format!("bad manifest header {:?}", header.trim())))?;
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_reader(reader);
    let mut items = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| {
            rec.get(i)
                .ok_or_else(|| Error::invalid("short manifest row"))
        };
        let num = |i: usize| -> Result<u64> {
            field(i)?
                .parse()
                .map_err(|_| Error::invalid(format!("bad manifest field {:?}", rec.get(i))))
        };
        let duration_s: f32 = field(2)?
            .parse()
            .map_err(|_| Error::invalid(format!("bad duration {:?}", rec.get(2))))?;
        let waveform = read_pcm(&dir.join(field(4)?), sample_rate)?;
        items.push(CorpusItem {
            id: num(0)? as usize,
            lyric: parse_lyric(field(1)?, MAX_VOCAB)?,
            duration_s,
            seed: num(3)?,
            waveform,
        });
    }
    Ok(items)
}
