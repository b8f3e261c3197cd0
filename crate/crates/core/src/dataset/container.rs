//! Binary containers.
//!
//! Feature file (`PPAF`, little-endian):
//!
//! ```text
//! magic "PPAF" | version u32 | N u64 | d u32 | K u32 | attr_count u32 | flags u32
//! N*d f32 features (row-major) | N u32 labels
//! [N u32 attributes  if flags & 1] | [N u8 split codes if flags & 2]
//! ```
//!
//! Proxy file (`PPAZ`): `magic | version u32 | K u32 | d u32 | K*d f32`.
//!
//! A JSON sidecar `<stem>.meta.json` next to either file carries names and
//! provenance.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClassProxyMatrix, FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DATASET_MAGIC: &[u8; 4] = b"PPAF";
pub const PROXY_MAGIC: &[u8; 4] = b"PPAZ";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_ATTRIBUTES: u32 = 1;
const FLAG_SPLITS: u32 = 1 << 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default)]
    pub class_names: Vec<String>,
    #[serde(default)]
    pub attribute_names: Vec<String>,
    #[serde(default)]
    pub provenance: String,
    /// Whether the stored features are already L2-normalized; `None` when the
    /// producer did not say.
    #[serde(default)]
    pub normalized: Option<bool>,
}

/// `dir/train.ppaf` → `dir/train.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

pub fn write_dataset<W: Write>(ds: &FeatureDataset, mut w: W) -> Result<()> {
    let mut flags = 0;
    if ds.has_attributes() {
        flags |= FLAG_ATTRIBUTES;
    }
    if ds.has_splits() {
        flags |= FLAG_SPLITS;
    }
    let mut buf = Vec::with_capacity(32 + ds.len() * (ds.dim() * 4 + 9));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&to_u32(ds.dim(), "d")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(ds.class_count(), "K")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(ds.attribute_count().unwrap_or(0), "attr_count")?.to_le_bytes());
    buf.extend_from_slice(&flags.to_le_bytes());
    for &v in ds.features().as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for &y in ds.labels() {
        buf.extend_from_slice(&to_u32(y, "label")?.to_le_bytes());
    }
    if let Some(attrs) = ds.attributes() {
        for &a in attrs {
            buf.extend_from_slice(&to_u32(a, "attribute")?.to_le_bytes());
        }
    }
    if let Some(splits) = ds.splits_raw() {
        buf.extend(splits.iter().map(|s| s.code()));
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<FeatureDataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes);
    cur.magic(DATASET_MAGIC)?;
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = usize::try_from(cur.u64()?).map_err(|_| Error::CorruptContainer("sample count overflows usize".into()))?;
    let d = cur.u32()? as usize;
    let k = cur.u32()? as usize;
    let attr_count = cur.u32()? as usize;
    let flags = cur.u32()?;
    if flags & !(FLAG_ATTRIBUTES | FLAG_SPLITS) != 0 {
        return Err(Error::CorruptContainer(format!("unknown flag bits {flags:#x}")));
    }
    let has_attrs = flags & FLAG_ATTRIBUTES != 0;
    let has_splits = flags & FLAG_SPLITS != 0;

    let per_sample = d
        .checked_mul(4)
        .and_then(|f| f.checked_add(4 + if has_attrs { 4 } else { 0 } + usize::from(has_splits)))
        .ok_or_else(|| Error::CorruptContainer("header sizes overflow".into()))?;
    let expected = n
        .checked_mul(per_sample)
        .ok_or_else(|| Error::CorruptContainer("header sizes overflow".into()))?;
    if cur.remaining() != expected {
        return Err(Error::CorruptContainer(format!(
            "payload is {} bytes, header implies {expected}",
            cur.remaining()
        )));
    }

    let mut feats = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        let v = cur.f32()?;
        if !v.is_finite() {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        feats.push(f64::from(v));
    }
    let labels = cur.u32_vec(n)?;
    let attributes = if has_attrs { Some(cur.u32_vec(n)?) } else { None };
    let splits = if has_splits {
        let mut s = Vec::with_capacity(n);
        for _ in 0..n {
            let code = cur.u8()?;
            s.push(Split::from_code(code).ok_or_else(|| Error::InvalidDataset(format!("unknown split code {code}")))?);
        }
        Some(s)
    } else {
        None
    };

    FeatureDataset::new(
        Matrix::new(n, d, feats)?,
        labels,
        attributes,
        splits,
        k,
        (attr_count > 0).then_some(attr_count),
    )
}

pub fn write_proxies<W: Write>(z: &ClassProxyMatrix, mut w: W) -> Result<()> {
    let m = z.matrix();
    let mut buf = Vec::with_capacity(16 + m.as_slice().len() * 4);
    buf.extend_from_slice(PROXY_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&to_u32(m.rows(), "K")?.to_le_bytes());
    buf.extend_from_slice(&to_u32(m.cols(), "d")?.to_le_bytes());
    for &v in m.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_proxies<R: Read>(mut r: R) -> Result<ClassProxyMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor::new(&bytes);
    cur.magic(PROXY_MAGIC)?;
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let k = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    if cur.remaining() != k * d * 4 {
        return Err(Error::CorruptContainer(format!(
            "proxy payload is {} bytes, header implies {}",
            cur.remaining(),
            k * d * 4
        )));
    }
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k * d {
        data.push(f64::from(cur.f32()?));
    }
    ClassProxyMatrix::new(Matrix::new(k, d, data)?, None)
}

/// Writes the container and, if given, its sidecar.
pub fn save(ds: &FeatureDataset, path: &Path, meta: Option<&DatasetMeta>) -> Result<()> {
    write_dataset(ds, fs::File::create(path)?)?;
    if let Some(meta) = meta {
        fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    }
    Ok(())
}

/// Reads a container plus its sidecar when one exists.
pub fn load(path: &Path) -> Result<(FeatureDataset, Option<DatasetMeta>)> {
    let ds = read_dataset(std::io::BufReader::new(fs::File::open(path)?))?;
    Ok((ds, read_meta(path)?))
}

pub fn save_proxies(z: &ClassProxyMatrix, path: &Path) -> Result<()> {
    write_proxies(z, fs::File::create(path)?)?;
    if let Some(names) = z.class_names() {
        let meta = DatasetMeta {
            class_names: names.to_vec(),
            ..Default::default()
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    }
    Ok(())
}

pub fn load_proxies(path: &Path) -> Result<ClassProxyMatrix> {
    let z = read_proxies(std::io::BufReader::new(fs::File::open(path)?))?;
    match read_meta(path)? {
        Some(meta) if !meta.class_names.is_empty() => ClassProxyMatrix::new(z.matrix().clone(), Some(meta.class_names)),
        _ => Ok(z),
    }
}

fn read_meta(path: &Path) -> Result<Option<DatasetMeta>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(side)?)?))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidDataset(format!("{what} = {v} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.remaining() < N {
            return Err(Error::CorruptContainer(format!(
                "unexpected end of data at byte {}",
                self.pos
            )));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got: [u8; 4] = self.take()?;
        if &got != want {
            return Err(Error::CorruptContainer(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn u32_vec(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }
}
