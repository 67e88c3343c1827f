//! On-disk corpus layout.
//!
//! ```text
//! <dir>/corpus.json        name, fingerprint, generator source
//! <dir>/manifest.jsonl     one record per utterance: id, frames, profile, transcript
//! <dir>/<id>.a.umod        modality-A features (f32)
//! <dir>/<id>.b.umod        modality-B features (f32)
//! <dir>/<id>.units.umod    frame unit labels (u32)
//! ```
//!
//! A `.umod` file is: magic `UMOD`, version `u16`, dtype tag `u8`
//! (1 = f32, 2 = u32), rank `u8`, `rank` extents as `u64`, then the payload.
//! Everything is little-endian.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{parse_transcript, transcript_text, Corpus, CorpusSource, MultimodalUtterance, Profile};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"UMOD";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_U32: u8 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum UmodData {
    F32(Tensor),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

pub fn write_umod(path: &Path, data: &UmodData) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let shape = match data {
        UmodData::F32(t) => t.shape().to_vec(),
        UmodData::U32 { shape, .. } => shape.clone(),
    };
    buf.push(match data {
        UmodData::F32(_) => DTYPE_F32,
        UmodData::U32 { .. } => DTYPE_U32,
    });
    buf.push(shape.len() as u8);
    for e in &shape {
        buf.extend_from_slice(&(*e as u64).to_le_bytes());
    }
    match data {
        UmodData::F32(t) => t.data().iter().for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        UmodData::U32 { data, .. } => data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_umod(path: &Path) -> Result<UmodData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing UMOD magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let (dtype, rank) = (bytes[6], bytes[7] as usize);
    let mut pos = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated extents"))?;
        shape.push(u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize);
        pos += 8;
    }
    let n: usize = shape.iter().product();
    let payload = &bytes[pos..];
    if payload.len() != n * 4 {
        return Err(bad(&format!("payload has {} bytes, expected {}", payload.len(), n * 4)));
    }
    let words = payload.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"));
    match dtype {
        DTYPE_F32 => Ok(UmodData::F32(Tensor::new(shape, words.map(|w| f32::from_le_bytes(w) as f64).collect())?)),
        DTYPE_U32 => Ok(UmodData::U32 { shape, data: words.map(u32::from_le_bytes).collect() }),
        t => Err(bad(&format!("unknown dtype tag {t}"))),
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    name: String,
    fingerprint: String,
    source: Option<CorpusSource>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    id: String,
    frames: usize,
    profile: Profile,
    transcript: String,
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = CorpusHeader { name: corpus.name.clone(), fingerprint: corpus.fingerprint.clone(), source: corpus.source.clone() };
    let path = dir.join("corpus.json");
    fs::write(&path, serde_json::to_string_pretty(&header).expect("serializable")).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for u in &corpus.utterances {
        let rec = ManifestRecord {
            id: u.id.clone(),
            frames: u.frames,
            profile: u.profile(),
            transcript: transcript_text(&u.transcript),
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec).expect("serializable")).map_err(|e| Error::io(&path, e))?;
        if let Some(a) = &u.features_a {
            write_umod(&dir.join(format!("{}.a.umod", u.id)), &UmodData::F32(a.clone()))?;
        }
        if let Some(b) = &u.features_b {
            write_umod(&dir.join(format!("{}.b.umod", u.id)), &UmodData::F32(b.clone()))?;
        }
        let units = UmodData::U32 { shape: vec![u.frames], data: u.unit_labels.iter().map(|&x| x as u32).collect() };
        write_umod(&dir.join(format!("{}.units.umod", u.id)), &units)?;
    }
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join("corpus.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: CorpusHeader = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let path = dir.join("manifest.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut utterances = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::format(&path, e.to_string()))?;
        let load = |suffix: &str| -> Result<Tensor> {
            let p = dir.join(format!("{}.{suffix}.umod", rec.id));
            match read_umod(&p)? {
                UmodData::F32(t) if t.rows() == rec.frames || rec.frames == 0 => Ok(t),
                _ => Err(Error::format(&p, format!("expected {} f32 frames", rec.frames))),
            }
        };
        let features_a = rec.profile.has_a().then(|| load("a")).transpose()?;
        let features_b = rec.profile.has_b().then(|| load("b")).transpose()?;
        let p = dir.join(format!("{}.units.umod", rec.id));
        let unit_labels = match read_umod(&p)? {
            UmodData::U32 { data, .. } if data.len() == rec.frames => data.into_iter().map(|x| x as usize).collect(),
            _ => return Err(Error::format(&p, "expected u32 unit labels")),
        };
        utterances.push(MultimodalUtterance {
            id: rec.id,
            frames: rec.frames,
            features_a,
            features_b,
            unit_labels,
            transcript: parse_transcript(&rec.transcript)?,
        });
    }
    Ok(Corpus { name: header.name, fingerprint: header.fingerprint, source: header.source, utterances })
}
