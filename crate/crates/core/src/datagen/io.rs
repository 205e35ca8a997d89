//! Line-delimited JSON serialization of corpora and VQA sets.
//!
//! One record per line. Images are flat row-major arrays of
//! `IMAGE_SIDE * IMAGE_SIDE` values; text is stored as space-separated words
//! without the end-of-text marker.
//!
//! Corpus record: `{schema_version, index, image, caption, objects:[{glyph, slot}],
//! boxes:[{glyph, image, caption}]}`.
//! VQA record: `{schema_version, index, image, kind, question, candidates:[4], gold_index}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::render::{Placement, IMAGE_SIDE};
use super::{vocab, BoxPair, CompositionalSample, QuestionKind, VqaItem, N_CANDIDATES};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxRecord {
    glyph: usize,
    image: Vec<f64>,
    caption: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    schema_version: u32,
    index: usize,
    image: Vec<f64>,
    caption: String,
    objects: Vec<Placement>,
    boxes: Vec<BoxRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VqaRecord {
    schema_version: u32,
    index: usize,
    image: Vec<f64>,
    kind: QuestionKind,
    question: String,
    candidates: Vec<String>,
    gold_index: usize,
}

fn image_from(data: Vec<f64>) -> Result<Tensor> {
    if data.len() != IMAGE_SIDE * IMAGE_SIDE {
        return Err(Error::invalid(format!("image has {} values, expected {}", data.len(), IMAGE_SIDE * IMAGE_SIDE)));
    }
    Tensor::new(IMAGE_SIDE, IMAGE_SIDE, data)
}

fn text(tokens: &[u32]) -> Result<String> {
    vocab::decode(tokens)
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = Result<T>>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, &r?)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

fn check_version(v: u32) -> Result<()> {
    if v != SCHEMA_VERSION {
        return Err(Error::invalid(format!("unsupported record schema {v} (expected {SCHEMA_VERSION})")));
    }
    Ok(())
}

pub fn write_corpus(path: &Path, corpus: &[CompositionalSample]) -> Result<()> {
    write_lines(
        path,
        corpus.iter().enumerate().map(|(index, s)| {
            Ok(SampleRecord {
                schema_version: SCHEMA_VERSION,
                index,
                image: s.image.data().to_vec(),
                caption: text(&s.caption)?,
                objects: s.objects.clone(),
                boxes: s
                    .boxes
                    .iter()
                    .map(|b| Ok(BoxRecord { glyph: b.glyph, image: b.image.data().to_vec(), caption: text(&b.caption)? }))
                    .collect::<Result<_>>()?,
            })
        }),
    )
}

pub fn read_corpus(path: &Path) -> Result<Vec<CompositionalSample>> {
    read_lines::<SampleRecord>(path)?
        .into_iter()
        .map(|r| {
            check_version(r.schema_version)?;
            Ok(CompositionalSample {
                image: image_from(r.image)?,
                caption: vocab::encode(&r.caption)?,
                objects: r.objects,
                boxes: r
                    .boxes
                    .into_iter()
                    .map(|b| Ok(BoxPair { glyph: b.glyph, image: image_from(b.image)?, caption: vocab::encode(&b.caption)? }))
                    .collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn write_vqa(path: &Path, items: &[VqaItem]) -> Result<()> {
    write_lines(
        path,
        items.iter().enumerate().map(|(index, it)| {
            Ok(VqaRecord {
                schema_version: SCHEMA_VERSION,
                index,
                image: it.image.data().to_vec(),
                kind: it.kind,
                question: text(&it.question)?,
                candidates: it.candidates.iter().map(|c| text(c)).collect::<Result<_>>()?,
                gold_index: it.gold_index,
            })
        }),
    )
}

pub fn read_vqa(path: &Path) -> Result<Vec<VqaItem>> {
    read_lines::<VqaRecord>(path)?
        .into_iter()
        .map(|r| {
            check_version(r.schema_version)?;
            if r.candidates.len() != N_CANDIDATES || r.gold_index >= N_CANDIDATES {
                return Err(Error::invalid(format!("item {}: need {N_CANDIDATES} candidates and a valid gold index", r.index)));
            }
            let cands: Vec<Vec<u32>> = r.candidates.iter().map(|c| vocab::words(c)).collect::<Result<_>>()?;
            Ok(VqaItem {
                image: image_from(r.image)?,
                kind: r.kind,
                question: vocab::words(&r.question)?,
                candidates: cands.try_into().expect("length checked"),
                gold_index: r.gold_index,
            })
        })
        .collect()
}
