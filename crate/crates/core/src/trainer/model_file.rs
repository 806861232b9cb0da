//! Model container: one JSON metadata line followed by the parameter
//! tensors as consecutive `.iph` records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::dataio::{decode_tensor, encode_tensor, DType, Tensor};
use crate::error::{Error, Result};
use crate::hashcore::{HashLayer, LossReport};
use crate::student::StudentEncoder;

pub const MODEL_FORMAT: &str = "iphash-model/1";

const SECTIONS: [&str; 5] = ["w_tok", "b_tok", "w_out", "b_out", "phi"];

/// Mean batch losses of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub config: TrainConfig,
    pub encoder: StudentEncoder,
    pub hash: HashLayer,
    pub log: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    config: TrainConfig,
    log: Vec<EpochLog>,
    sections: Vec<String>,
}

impl ModelFile {
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        let meta = Meta {
            format: MODEL_FORMAT.to_string(),
            config: self.config.clone(),
            log: self.log.clone(),
            sections: SECTIONS.iter().map(|s| s.to_string()).collect(),
        };
        let line = serde_json::to_string(&meta)
            .map_err(|e| Error::json("serialising model metadata", e))?;
        let io = |e| Error::io("writing model", e);
        out.write_all(line.as_bytes()).map_err(io)?;
        out.write_all(b"\n").map_err(io)?;
        let enc = &self.encoder;
        let tensors = [
            Tensor::from(&enc.w_tok),
            Tensor::new(vec![enc.b_tok.len()], enc.b_tok.clone())?,
            Tensor::from(&enc.w_out),
            Tensor::new(vec![enc.b_out.len()], enc.b_out.clone())?,
            Tensor::from(self.hash.phi()),
        ];
        for t in &tensors {
            encode_tensor(t, DType::F64, out).map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file =
            File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file =
            File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut r = BufReader::new(file);
        let corrupt = |field, detail: String| Error::CorruptFile {
            path: path.to_path_buf(),
            field,
            detail,
        };

        let mut line = String::new();
        std::io::BufRead::read_line(&mut r, &mut line)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let meta: Meta = serde_json::from_str(line.trim_end_matches('\n'))
            .map_err(|e| corrupt("metadata", e.to_string()))?;
        if meta.format != MODEL_FORMAT {
            return Err(corrupt(
                "format",
                format!("expected {MODEL_FORMAT:?}, found {:?}", meta.format),
            ));
        }
        if meta.sections != SECTIONS {
            return Err(corrupt(
                "sections",
                format!("unexpected sections {:?}", meta.sections),
            ));
        }
        let mut read = || decode_tensor(&mut r, path);
        let w_tok = read()?.into_matrix()?;
        let b_tok = read()?.into_data();
        let w_out = read()?.into_matrix()?;
        let b_out = read()?.into_data();
        let phi = read()?.into_matrix()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
            != 0
        {
            return Err(corrupt("sections", "trailing bytes".into()));
        }

        let encoder = StudentEncoder::new(w_tok, b_tok, w_out, b_out)?;
        let hash = HashLayer::new(phi)?;
        if encoder.out_dim() != hash.input_dim() || hash.bits() != meta.config.bits {
            return Err(corrupt(
                "phi",
                format!(
                    "hash layer {:?} does not fit encoder output {} / bits {}",
                    hash.phi().shape(),
                    encoder.out_dim(),
                    meta.config.bits
                ),
            ));
        }
        Ok(ModelFile {
            config: meta.config,
            encoder,
            hash,
            log: meta.log,
        })
    }

    pub fn bits(&self) -> usize {
        self.hash.bits()
    }
}
