use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NMTC";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;

/// Where training stopped, so a resumed run replays the same batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Cursor {
    pub epoch: u64,
    /// Index of the next micro-batch within `epoch`.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet<f32>,
    pub step: u64,
    pub model_config: ModelConfig,
    /// Hex SHA-256 of the training configuration.
    pub train_digest: String,
    pub cursor: Option<Cursor>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: u64,
    model_config: ModelConfig,
    train_digest: String,
    #[serde(default)]
    cursor: Option<Cursor>,
}

/// Name and shape of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    sidecar(path, "meta.json")
}

pub fn optimizer_path(path: &Path) -> PathBuf {
    sidecar(path, "optim")
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = sidecar(path, "tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes named tensors into the binary record format.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    let mut count: u32 = 0;
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let name_len = u16::try_from(nb.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::InvalidArgument(format!("{name}: rank too large")))?;
        body.extend_from_slice(&name_len.to_le_bytes());
        body.extend_from_slice(nb);
        body.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("{name}: dimension too large")))?;
            body.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
        count += 1;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, detail: String) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_owned(),
            detail,
        }
    }

    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("truncated while reading {}", what()))),
        }
    }

    fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn parse_header(r: &mut Reader<'_>) -> Result<u32> {
    let magic = r.take(4, &|| "magic".into())?;
    if magic != MAGIC {
        return Err(r.corrupt(format!("bad magic {magic:02x?}")));
    }
    let version = r.u16(&|| "version".into())?;
    if version != FORMAT_VERSION {
        return Err(r.corrupt(format!("unsupported format version {version}")));
    }
    r.u32(&|| "record count".into())
}

/// Parses one record header and returns it with the payload element count.
fn parse_record_header(r: &mut Reader<'_>, index: u32) -> Result<(RecordHeader, usize)> {
    let name_len = r.u16(&|| format!("record {index} name length"))? as usize;
    let name_bytes = r.take(name_len, &|| format!("record {index} name"))?;
    let name = std::str::from_utf8(name_bytes)
        .map_err(|_| r.corrupt(format!("record {index}: name is not UTF-8")))?
        .to_owned();
    let rank = r.u8(&|| format!("record {index} ({name}) rank"))?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(r.u32(&|| format!("record {index} ({name}) dims"))? as usize);
    }
    let remaining = r.buf.len().saturating_sub(r.pos);
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some_and(|b| b <= remaining))
        .ok_or_else(|| r.corrupt(format!("record {index} ({name}): shape {shape:?} overflows the file")))?;
    Ok((RecordHeader { name, shape }, numel))
}

/// Fully validates and decodes a tensor file. Nothing is returned unless
/// every record and the checksum are intact.
pub fn decode_tensors(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    let count = parse_header(&mut r)?;
    let body_start = r.pos;
    let mut out = Vec::with_capacity(count as usize);
    for index in 0..count {
        let (h, numel) = parse_record_header(&mut r, index)?;
        let payload = r.take(numel * 4, &|| format!("record {index} payload"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if out.iter().any(|(n, _): &(String, _)| *n == h.name) {
            return Err(r.corrupt(format!("record {index}: duplicate name {}", h.name)));
        }
        let t = Tensor::new(&h.shape, data).map_err(|e| r.corrupt(format!("record {index} ({}): {e}", h.name)))?;
        out.push((h.name, t));
    }
    let body_end = r.pos;
    let stored = r.u32(&|| "checksum".into())?;
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes after checksum", bytes.len() - r.pos)));
    }
    let actual = crc32fast::hash(&bytes[body_start..body_end]);
    if stored != actual {
        return Err(r.corrupt(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    Ok(out)
}

/// Lists record names and shapes, skipping over payloads.
pub fn inspect(path: &Path) -> Result<Vec<RecordHeader>> {
    use std::io::{BufReader, Read, Seek, SeekFrom};
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut f = BufReader::new(file);
    let corrupt = |detail: String| Error::CorruptCheckpoint {
        path: path.to_owned(),
        detail,
    };
    let read = |f: &mut BufReader<fs::File>, n: usize, what: &dyn Fn() -> String| -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        f.read_exact(&mut b).map_err(|_| corrupt(format!("truncated while reading {}", what())))?;
        Ok(b)
    };
    let header = read(&mut f, HEADER_LEN, &|| "header".into())?;
    let count = parse_header(&mut Reader { buf: &header, pos: 0, path })?;
    let mut out = Vec::with_capacity(count as usize);
    let mut pos = HEADER_LEN as u64;
    for index in 0..count {
        let nl = read(&mut f, 2, &|| format!("record {index} name length"))?;
        let name_len = u16::from_le_bytes([nl[0], nl[1]]) as usize;
        let name_rank = read(&mut f, name_len + 1, &|| format!("record {index} name"))?;
        let name = std::str::from_utf8(&name_rank[..name_len])
            .map_err(|_| corrupt(format!("record {index}: name is not UTF-8")))?
            .to_owned();
        let rank = name_rank[name_len] as usize;
        let dims = read(&mut f, rank * 4, &|| format!("record {index} ({name}) dims"))?;
        let shape: Vec<usize> = dims
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        pos += (2 + name_len + 1 + rank * 4) as u64;
        let bytes = shape
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
            .filter(|&b| b <= len.saturating_sub(pos))
            .ok_or_else(|| corrupt(format!("record {index} ({name}): shape {shape:?} overflows the file")))?;
        pos += bytes;
        f.seek(SeekFrom::Start(pos)).map_err(|e| Error::io(path, e))?;
        out.push(RecordHeader { name, shape });
    }
    if pos + 4 != len {
        return Err(corrupt(format!("expected checksum at byte {pos}, file is {len} bytes")));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, params: &ParameterSet<f32>) -> Result<()> {
    write_atomic(path, &encode_tensors(params.iter())?)
}

pub fn load_tensors(path: &Path) -> Result<ParameterSet<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(ParameterSet::new(decode_tensors(&bytes, path)?.into_iter().collect()))
}

/// Writes the tensor file and its `.meta.json` sidecar.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if !ckpt.params.is_finite() {
        return Err(Error::Numeric(format!("refusing to save non-finite parameters to {}", path.display())));
    }
    save_tensors(path, &ckpt.params)?;
    let meta = Meta {
        step: ckpt.step,
        model_config: ckpt.model_config.clone(),
        train_digest: ckpt.train_digest.clone(),
        cursor: ckpt.cursor,
    };
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    write_atomic(&meta_path(path), json.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let params = load_tensors(path)?;
    let mp = meta_path(path);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::CorruptCheckpoint {
        path: mp.clone(),
        detail: e.to_string(),
    })?;
    params.check_against(&meta.model_config).map_err(|e| Error::CorruptCheckpoint {
        path: path.to_owned(),
        detail: e.to_string(),
    })?;
    if !params.is_finite() {
        return Err(Error::CorruptCheckpoint {
            path: path.to_owned(),
            detail: "non-finite parameter values".into(),
        });
    }
    Ok(Checkpoint {
        params,
        step: meta.step,
        model_config: meta.model_config,
        train_digest: meta.train_digest,
        cursor: meta.cursor,
    })
}

/// Elementwise mean of the parameters; step is the maximum.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint> {
    let first_path = paths
        .first()
        .ok_or_else(|| Error::InvalidArgument("average needs at least one checkpoint".into()))?;
    let first = load_checkpoint(first_path)?;
    let mut sums: ParameterSet<f64> = first.params.cast();
    let mut step = first.step;
    for p in &paths[1..] {
        let c = load_checkpoint(p)?;
        let extra: Vec<&String> = c.params.names().filter(|n| sums.get(n).is_none()).collect();
        if let Some(n) = extra.first() {
            return Err(Error::Data(format!(
                "tensor {n} is in {} but not in {}",
                p.display(),
                first_path.display()
            )));
        }
        for (name, acc) in sums.iter_mut() {
            let t = c.params.get(name).ok_or_else(|| {
                Error::Data(format!("tensor {name} is in {} but not in {}", first_path.display(), p.display()))
            })?;
            if t.shape() != acc.shape() {
                return Err(Error::Data(format!(
                    "tensor {name}: shape {:?} in {} vs {:?} in {}",
                    acc.shape(),
                    first_path.display(),
                    t.shape(),
                    p.display()
                )));
            }
            for (a, &x) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += x as f64;
            }
        }
        step = step.max(c.step);
    }
    let k = paths.len() as f64;
    let params = ParameterSet::new(sums.iter().map(|(n, t)| (n.clone(), t.map(|v| v / k).cast())).collect());
    Ok(Checkpoint {
        params,
        step,
        model_config: first.model_config,
        train_digest: first.train_digest,
        cursor: None,
    })
}
