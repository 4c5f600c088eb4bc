use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format, Result};
use crate::tensor::Mat;

use super::grammar::Emotion;
use super::{Corpus, CorpusConfig, CorpusRecord, InstructionSample, SpeakingState, Split, Vocab};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub schema_version: u32,
    pub config: CorpusConfig,
    pub vocab_hash: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayJson {
    shape: [usize; 2],
    data: Vec<f32>,
}

impl ArrayJson {
    fn from_mat(m: &Mat<f32>) -> Self {
        ArrayJson { shape: [m.rows(), m.cols()], data: m.data().to_vec() }
    }

    fn into_mat(self) -> Result<Mat<f32>> {
        Mat::from_vec(self.shape[0], self.shape[1], self.data).or_else(|e| format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordJson {
    id: String,
    split: Split,
    emotion: Emotion,
    intensity: u8,
    style_jitter: [f64; 4],
    phonemes: Vec<u8>,
    features: ArrayJson,
    coeffs: ArrayJson,
    instruction: InstructionSample,
}

/// Writes `corpus.jsonl` and `vocab.json` into `dir`. Returns both paths.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let corpus_path = dir.join("corpus.jsonl");
    let vocab_path = dir.join("vocab.json");
    let mut w = BufWriter::new(std::fs::File::create(&corpus_path)?);
    let header =
        CorpusHeader { schema_version: SCHEMA_VERSION, config: corpus.config.clone(), vocab_hash: corpus.vocab.hash() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in &corpus.records {
        let j = RecordJson {
            id: r.id.clone(),
            split: r.split,
            emotion: r.state.emotion,
            intensity: r.state.intensity,
            style_jitter: r.state.style_jitter,
            phonemes: r.phonemes.clone(),
            features: ArrayJson::from_mat(&r.features),
            coeffs: ArrayJson::from_mat(&r.coeffs),
            instruction: r.instruction.clone(),
        };
        serde_json::to_writer(&mut w, &j)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    corpus.vocab.save(&vocab_path)?;
    Ok((corpus_path, vocab_path))
}

/// Loads a corpus written by [`write_corpus`], checking schema and vocabulary hash.
pub fn read_corpus(corpus_path: &Path, vocab_path: &Path) -> Result<Corpus> {
    let vocab = Vocab::load(vocab_path)?;
    let mut lines = BufReader::new(std::fs::File::open(corpus_path)?).lines();
    let header: CorpusHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?)?,
        None => return format("empty corpus file"),
    };
    if header.schema_version != SCHEMA_VERSION {
        return format(format!("corpus schema {} unsupported", header.schema_version));
    }
    if header.vocab_hash != vocab.hash() {
        return format("vocabulary file does not match corpus header");
    }
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let j: RecordJson = serde_json::from_str(&line)?;
        let features = j.features.into_mat()?;
        let coeffs = j.coeffs.into_mat()?;
        let t = j.phonemes.len();
        if features.rows() != t || coeffs.rows() != t || coeffs.cols() != crate::face_model::POSE_DIM + header.config.dim_psi {
            return format(format!("record {} has inconsistent shapes", j.id));
        }
        if !(1..=3).contains(&j.intensity) {
            return format(format!("record {} intensity {} out of range", j.id, j.intensity));
        }
        records.push(CorpusRecord {
            id: j.id,
            split: j.split,
            state: SpeakingState { emotion: j.emotion, intensity: j.intensity, style_jitter: j.style_jitter },
            phonemes: j.phonemes,
            features,
            coeffs,
            instruction: j.instruction,
        });
    }
    if records.len() != header.config.n_records {
        return format(format!("header promises {} records, file has {}", header.config.n_records, records.len()));
    }
    Ok(Corpus { config: header.config, vocab, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::gen_corpus;

    #[test]
    fn files_are_byte_identical_and_reload() {
        let cfg = CorpusConfig { n_records: 48, t_min: 10, t_max: 20, ..CorpusConfig::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ca, va) = write_corpus(&gen_corpus(&cfg).unwrap(), a.path()).unwrap();
        let (cb, vb) = write_corpus(&gen_corpus(&cfg).unwrap(), b.path()).unwrap();
        assert_eq!(std::fs::read(&ca).unwrap(), std::fs::read(&cb).unwrap());
        assert_eq!(std::fs::read(&va).unwrap(), std::fs::read(&vb).unwrap());
        let back = read_corpus(&ca, &va).unwrap();
        let orig = gen_corpus(&cfg).unwrap();
        assert_eq!(back.records, orig.records);
    }

    #[test]
    fn mismatched_vocabulary_is_rejected() {
        let cfg = CorpusConfig { n_records: 24, t_min: 10, t_max: 12, ..CorpusConfig::default() };
        let d = tempfile::tempdir().unwrap();
        let (c, v) = write_corpus(&gen_corpus(&cfg).unwrap(), d.path()).unwrap();
        std::fs::write(&v, r#"{"<pad>":0,"<bos>":1,"<eos>":2,"<unk>":3}"#).unwrap();
        assert!(matches!(read_corpus(&c, &v), Err(crate::Error::Format(_))));
    }
}
