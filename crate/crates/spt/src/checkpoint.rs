//! Binary checkpoint format: magic `SPT1`, a little-endian u32 header
//! length, a JSON header (format version, training stage, model config,
//! vocabulary, tensor manifest with shapes and payload offsets), then the
//! raw little-endian f32 tensor payloads in manifest order.

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SptError};
use crate::model::{LayerParams, Matrix, ModelConfig, ModelParams};
use crate::textcore::Vocabulary;

pub const MAGIC: &[u8; 4] = b"SPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Training progress marker stored in every checkpoint; used to enforce
/// phase ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    Phase1,
    Phase2,
    Phase3,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::Phase1 => "phase1",
            Stage::Phase2 => "phase2",
            Stage::Phase3 => "phase3",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f32 units from the start of the payload.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    stage: Stage,
    config: ModelConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
}

fn tensor_list(p: &ModelParams<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mat = |m: &Matrix<f32>| (vec![m.rows, m.cols], m.data.clone());
    let vec1 = |v: &[f32]| (vec![v.len()], v.to_vec());
    let mut out = Vec::new();
    let mut push = |name: String, (shape, data): (Vec<usize>, Vec<f32>)| {
        out.push((name, shape, data));
    };
    push("embed".into(), mat(&p.embed));
    push("pos".into(), mat(&p.pos));
    for (i, l) in p.layers.iter().enumerate() {
        push(format!("layer{i}.ln1_g"), vec1(&l.ln1_g));
        push(format!("layer{i}.ln1_b"), vec1(&l.ln1_b));
        push(format!("layer{i}.wq"), mat(&l.wq));
        push(format!("layer{i}.wk"), mat(&l.wk));
        push(format!("layer{i}.wv"), mat(&l.wv));
        push(format!("layer{i}.wo"), mat(&l.wo));
        push(format!("layer{i}.ln2_g"), vec1(&l.ln2_g));
        push(format!("layer{i}.ln2_b"), vec1(&l.ln2_b));
        push(format!("layer{i}.w1"), mat(&l.w1));
        push(format!("layer{i}.b1"), vec1(&l.b1));
        push(format!("layer{i}.w2"), mat(&l.w2));
        push(format!("layer{i}.b2"), vec1(&l.b2));
    }
    push("lnf_g".into(), vec1(&p.lnf_g));
    push("lnf_b".into(), vec1(&p.lnf_b));
    if let Some(h) = &p.head {
        push("head".into(), mat(h));
    }
    push("ext".into(), mat(&p.ext));
    out
}

pub fn save(path: &Path, params: &ModelParams<f32>, vocab: &Vocabulary, stage: Stage) -> Result<()> {
    let tensors = tensor_list(params);
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, shape, data) in &tensors {
        manifest.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        stage,
        config: params.config.clone(),
        vocab: vocab.clone(),
        tensors: manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    for (_, _, data) in &tensors {
        for v in data {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams<f32>, Vocabulary, Stage)> {
    let mut file = std::fs::File::open(path).map_err(|_| SptError::MissingCheckpoint(path.display().to_string()))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() < 8 || &raw[..4] != MAGIC {
        return Err(SptError::BadCheckpoint("bad magic".into()));
    }
    let hlen = u32::from_le_bytes(raw[4..8].try_into().unwrap()) as usize;
    let body = raw
        .get(8..8 + hlen)
        .ok_or_else(|| SptError::BadCheckpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)
        .map_err(|e| SptError::BadCheckpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(SptError::BadCheckpoint(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let payload = &raw[8 + hlen..];
    let n_floats = payload.len() / 4;
    if payload.len() % 4 != 0 {
        return Err(SptError::BadCheckpoint("payload not f32-aligned".into()));
    }
    let read_tensor = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        let entry = header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| SptError::BadCheckpoint(format!("missing tensor {name}")))?;
        let len: usize = entry.shape.iter().product();
        if entry.offset + len > n_floats {
            return Err(SptError::BadCheckpoint(format!("tensor {name} out of bounds")));
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let at = (entry.offset + i) * 4;
            data.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
        }
        Ok((entry.shape.clone(), data))
    };
    let mat = |name: &str| -> Result<Matrix<f32>> {
        let (shape, data) = read_tensor(name)?;
        if shape.len() != 2 {
            return Err(SptError::BadCheckpoint(format!("{name} is not a matrix")));
        }
        Ok(Matrix {
            rows: shape[0],
            cols: shape[1],
            data,
        })
    };
    let vec1 = |name: &str| -> Result<Vec<f32>> { Ok(read_tensor(name)?.1) };

    let mut layers = Vec::with_capacity(header.config.n_layers);
    for i in 0..header.config.n_layers {
        layers.push(LayerParams {
            ln1_g: vec1(&format!("layer{i}.ln1_g"))?,
            ln1_b: vec1(&format!("layer{i}.ln1_b"))?,
            wq: mat(&format!("layer{i}.wq"))?,
            wk: mat(&format!("layer{i}.wk"))?,
            wv: mat(&format!("layer{i}.wv"))?,
            wo: mat(&format!("layer{i}.wo"))?,
            ln2_g: vec1(&format!("layer{i}.ln2_g"))?,
            ln2_b: vec1(&format!("layer{i}.ln2_b"))?,
            w1: mat(&format!("layer{i}.w1"))?,
            b1: vec1(&format!("layer{i}.b1"))?,
            w2: mat(&format!("layer{i}.w2"))?,
            b2: vec1(&format!("layer{i}.b2"))?,
        });
    }
    let head = if header.config.tie_embeddings {
        None
    } else {
        Some(mat("head")?)
    };
    let params = ModelParams {
        config: header.config,
        embed: mat("embed")?,
        pos: mat("pos")?,
        layers,
        lnf_g: vec1("lnf_g")?,
        lnf_b: vec1("lnf_b")?,
        head,
        ext: mat("ext")?,
    };
    let mut vocab = header.vocab;
    vocab.rebuild_lookup();
    if params.ext.rows != vocab.ext_len() {
        return Err(SptError::BadCheckpoint(
            "extension rows disagree with vocabulary".into(),
        ));
    }
    Ok((params, vocab, header.stage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> (ModelParams<f32>, Vocabulary) {
        let corpus = vec!["alpha beta gamma delta".to_string()];
        let names = vec!["alpha-event".to_string(), "beta-event".to_string()];
        let vocab = Vocabulary::build(&corpus, &names).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 32,
            tie_embeddings: false,
        };
        let params = ModelParams::<f32>::init(cfg, vocab.base_len(), vocab.ext_len(), 3).unwrap();
        (params, vocab)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let (params, vocab) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.spt");
        let p2 = dir.path().join("b.spt");
        save(&p1, &params, &vocab, Stage::Phase1).unwrap();
        let (loaded, lv, stage) = load(&p1).unwrap();
        assert_eq!(stage, Stage::Phase1);
        assert_eq!(lv.size(), vocab.size());
        save(&p2, &loaded, &lv, stage).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn missing_file_is_missing_checkpoint() {
        assert!(matches!(
            load(Path::new("/nonexistent/x.spt")),
            Err(SptError::MissingCheckpoint(_))
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.spt");
        std::fs::write(&p, b"NOPE00000000").unwrap();
        assert!(matches!(load(&p), Err(SptError::BadCheckpoint(_))));
    }
}
