//! The `.iph` tensor layout: one JSON header line
//! `{"magic":"IPH1","dtype":"f32"|"f64","shape":[..]}` terminated by `\n`,
//! followed by the row-major little-endian payload.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Matrix;

pub const MAGIC: &str = "IPH1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    dtype: DType,
    shape: Vec<usize>,
}

/// An n-dimensional array of `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(
                "shape",
                format!("entries must be >= 1, got {shape:?}"),
            ));
        }
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn into_matrix(self) -> Result<Matrix> {
        match self.shape[..] {
            [rows, cols] => Matrix::new(rows, cols, self.data),
            _ => Err(Error::invalid(
                "shape",
                format!("expected a 2-d tensor, got {:?}", self.shape),
            )),
        }
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor {
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }
}

pub fn encode_tensor<W: Write>(tensor: &Tensor, dtype: DType, out: &mut W) -> std::io::Result<()> {
    let header = Header {
        magic: MAGIC.to_string(),
        dtype,
        shape: tensor.shape.clone(),
    };
    let line = serde_json::to_string(&header).expect("header serialises");
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    match dtype {
        DType::F64 => {
            for x in &tensor.data {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for x in &tensor.data {
                out.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads one tensor record from `input`, consuming exactly its bytes.
/// `path` is only used to label errors.
pub fn decode_tensor<R: BufRead>(input: &mut R, path: &Path) -> Result<Tensor> {
    let corrupt = |field: &'static str, detail: String| Error::CorruptFile {
        path: path.to_path_buf(),
        field,
        detail,
    };
    let mut line = Vec::new();
    input
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if line.last() != Some(&b'\n') {
        return Err(corrupt("header", "missing header line".into()));
    }
    line.pop();
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| corrupt("header", e.to_string()))?;
    if header.magic != MAGIC {
        return Err(corrupt(
            "magic",
            format!("expected {MAGIC:?}, found {:?}", header.magic),
        ));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(corrupt(
            "shape",
            format!("entries must be >= 1, got {:?}", header.shape),
        ));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt("shape", "element count overflows".into()))?;
    let expected = count
        .checked_mul(header.dtype.size())
        .ok_or_else(|| corrupt("shape", "byte count overflows".into()))?;

    let mut payload = Vec::with_capacity(expected);
    input
        .take(expected as u64)
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if payload.len() != expected {
        return Err(corrupt(
            "payload",
            format!(
                "shape {:?} needs {expected} bytes, found {}",
                header.shape,
                payload.len()
            ),
        ));
    }
    let data: Vec<f64> = match header.dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    if data.iter().any(|x| !x.is_finite()) {
        return Err(corrupt("payload", "non-finite value".into()));
    }
    Ok(Tensor {
        shape: header.shape,
        data,
    })
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    encode_tensor(tensor, dtype, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(file);
    let tensor = decode_tensor(&mut r, path)?;
    let mut rest = [0u8; 1];
    let extra = r
        .read(&mut rest)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if extra != 0 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            field: "payload",
            detail: format!("trailing bytes after shape {:?}", tensor.shape),
        });
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn roundtrip(t: &Tensor, dtype: DType) -> Result<Tensor> {
        let mut buf = Vec::new();
        encode_tensor(t, dtype, &mut buf).unwrap();
        decode_tensor(&mut Cursor::new(buf), Path::new("mem"))
    }

    #[test]
    fn f64_roundtrip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.0 / 3.0, -0.0, 1e-300, 5.5, -7.25, 2.0]).unwrap();
        let back = roundtrip(&t, DType::F64).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn f32_roundtrip_rounds_to_f32() {
        let t = Tensor::new(vec![1], vec![1.0 / 3.0]).unwrap();
        let back = roundtrip(&t, DType::F32).unwrap();
        assert_eq!(back.data()[0], (1.0f64 / 3.0) as f32 as f64);
    }

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, DType::F32, &mut buf).unwrap();
        let header = b"{\"magic\":\"IPH1\",\"dtype\":\"f32\",\"shape\":[1,2]}\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(&buf[header.len()..], &[0, 0, 0x80, 0x3f, 0, 0, 0, 0x40]);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut buf = b"{\"magic\":\"IPH1\",\"dtype\":\"f64\",\"shape\":[4,3]}\n".to_vec();
        for i in 0..11 {
            buf.extend_from_slice(&(i as f64).to_le_bytes());
        }
        let err = decode_tensor(&mut Cursor::new(buf), Path::new("x.iph")).unwrap_err();
        assert!(
            matches!(
                err,
                Error::CorruptFile {
                    field: "payload",
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn bad_magic_is_reported() {
        let buf =
            b"{\"magic\":\"IPH2\",\"dtype\":\"f64\",\"shape\":[1]}\n\0\0\0\0\0\0\0\0".to_vec();
        let err = decode_tensor(&mut Cursor::new(buf), Path::new("x.iph")).unwrap_err();
        assert!(
            matches!(err, Error::CorruptFile { field: "magic", .. }),
            "{err}"
        );
    }

    #[test]
    fn zero_dimension_is_reported() {
        let buf = b"{\"magic\":\"IPH1\",\"dtype\":\"f64\",\"shape\":[0,3]}\n".to_vec();
        let err = decode_tensor(&mut Cursor::new(buf), Path::new("x.iph")).unwrap_err();
        assert!(
            matches!(err, Error::CorruptFile { field: "shape", .. }),
            "{err}"
        );
    }

    #[test]
    fn trailing_bytes_rejected_by_file_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.iph");
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, DType::F64, &mut buf).unwrap();
        buf.push(0);
        std::fs::write(&path, buf).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(Error::CorruptFile {
                field: "payload",
                ..
            })
        ));
    }

    #[test]
    fn three_dimensional_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.iph");
        let t = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        write_tensor(&path, &t, DType::F64).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }
}
