//! Line-delimited JSON datasets. Images are never stored; every record that
//! refers to a scene carries `image_seed` and `density` so the scene can be
//! regenerated exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar::{caption_of, describe, filler_sentence, gen_qa, CAPTION_INSTRUCTION};
use super::{derive_seed, gen_image, SynthImage};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Record {
    /// Scene caption on its own.
    Caption { image_seed: u64, density: f64, caption: String },
    /// Text-only question answering: the scene is given as its full description.
    Qa { image_seed: u64, density: f64, context: String, instruction: String, answer: String },
    /// Scene-free sentence.
    Filler { text: String },
    /// Multimodal example: the scene is given as an image.
    Mm { image_seed: u64, density: f64, instruction: String, answer: String },
}

/// Image plus its paired texts.
#[derive(Clone, Debug, PartialEq)]
pub struct MmExample {
    pub image: SynthImage,
    pub caption: String,
    pub instruction: String,
    pub answer: String,
}

const CORPUS_KIND_STREAM: u64 = 0xC0;
const CORPUS_IMAGE_STREAM: u64 = 0xC1;

/// Document mix of the text corpus; the rest is QA. QA dominates so the
/// model learns to look facts up in a scene description.
pub const CAPTION_SHARE: f64 = 0.15;
pub const FILLER_SHARE: f64 = 0.2;

/// `n` text-only documents: captions, question answering over a described
/// scene (a quarter of which are caption requests) and filler sentences.
pub fn build_text_corpus(n: usize, seed: u64, density: f64) -> Vec<Record> {
    assert!(n >= 1, "corpus needs at least one document");
    (0..n as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, CORPUS_KIND_STREAM, i));
            let u: f64 = rng.gen();
            if u >= 1.0 - FILLER_SHARE {
                return Record::Filler { text: filler_sentence(&mut rng) };
            }
            let image_seed = derive_seed(seed, CORPUS_IMAGE_STREAM, i);
            let image = gen_image(image_seed, density);
            if u < CAPTION_SHARE {
                return Record::Caption { image_seed, density, caption: caption_of(&image, i) };
            }
            let (instruction, answer) = if rng.gen_bool(0.25) {
                (CAPTION_INSTRUCTION.to_string(), caption_of(&image, i))
            } else {
                let (_, q, a) = gen_qa(&image, i);
                (q, a)
            };
            Record::Qa { image_seed, density, context: describe(&image), instruction, answer }
        })
        .collect()
}

/// Stage-1 style example: caption request answered by a caption.
pub fn mm_caption_record(image_seed: u64, density: f64, rng_seed: u64) -> Record {
    let image = gen_image(image_seed, density);
    Record::Mm {
        image_seed,
        density,
        instruction: CAPTION_INSTRUCTION.to_string(),
        answer: caption_of(&image, rng_seed),
    }
}

/// Instruction-following example from the question templates.
pub fn mm_qa_record(image_seed: u64, density: f64, rng_seed: u64) -> Record {
    let image = gen_image(image_seed, density);
    let (_, instruction, answer) = gen_qa(&image, rng_seed);
    Record::Mm { image_seed, density, instruction, answer }
}

/// Image/text pair for contrastive pretraining: the scene and its full description.
pub fn vit_pair_record(image_seed: u64, density: f64) -> Record {
    let image = gen_image(image_seed, density);
    Record::Caption { image_seed, density, caption: describe(&image) }
}

/// Regenerates the image of an `mm` record.
pub fn example_from_record(record: &Record) -> Option<MmExample> {
    match record {
        Record::Mm { image_seed, density, instruction, answer } => {
            let image = gen_image(*image_seed, *density);
            let caption = caption_of(&image, *image_seed);
            Some(MmExample { image, caption, instruction: instruction.clone(), answer: answer.clone() })
        }
        _ => None,
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io { path: path.display().to_string(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("records serialise");
        w.write_all(line.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<Record>, DatasetError> {
    let p = path.display().to_string();
    let f = File::open(path).map_err(|source| DatasetError::Io { path: p.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|source| DatasetError::Parse { path: p.clone(), line: i + 1, source })?;
        out.push(r);
    }
    Ok(out)
}
