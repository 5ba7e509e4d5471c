//! Binary tensor container, patch-bundle directory layout, and atomic file
//! writing.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! offset  size          content
//! 0       4             magic "TSR1"
//! 4       1             dtype code (1=f32, 2=f64, 3=i32, 4=u8)
//! 5       1             ndim (>= 1)
//! 6       8 * ndim      extents as u64
//! ...     elem * size   row-major payload, little-endian
//! ```
//!
//! Total file length is exactly `6 + 8*ndim + dtype_size*product(shape)`;
//! readers reject anything longer or shorter. Floating data is stored
//! little-endian, so big-endian hosts byte-swap on I/O (handled by the
//! `to_le_bytes`/`from_le_bytes` round trip).
//!
//! A patch bundle is a directory holding `manifest.json` plus six tensor
//! files: `s2_bands.tsr`, `s2_mask.tsr`, `s2_doys.tsr`, `s1_bands.tsr`,
//! `s1_mask.tsr`, `s1_doys.tsr`.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TSR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    I32 = 3,
    U8 = 4,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::I32),
            4 => Ok(Dtype::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
            TensorData::I32(_) => Dtype::I32,
            TensorData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// In-memory tensor: row-major values plus shape. Construction checks that
/// the element count matches the shape product and that every extent is
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Validation("tensor ndim must be >= 1".into()));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Validation(format!(
                "tensor shape extents must be > 0, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} implies {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn f32(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, TensorData::F32(values))
    }

    pub fn f64(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Tensor::new(shape, TensorData::F64(values))
    }

    pub fn i32(shape: Vec<usize>, values: Vec<i32>) -> Result<Self> {
        Tensor::new(shape, TensorData::I32(values))
    }

    pub fn u8(shape: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Tensor::new(shape, TensorData::U8(values))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected f32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected f64 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_i32(&self) -> Result<&[i32]> {
        match &self.data {
            TensorData::I32(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected i32 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected u8 tensor, found {:?}",
                other.dtype()
            ))),
        }
    }

    /// Values widened to f64 regardless of storage dtype.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::I32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

pub fn encode_tensor(t: &Tensor, out: &mut impl Write) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&[t.dtype() as u8, t.shape.len() as u8])?;
    for &e in &t.shape {
        out.write_all(&(e as u64).to_le_bytes())?;
    }
    match &t.data {
        TensorData::F32(v) => {
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::F64(v) => {
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::I32(v) => {
            for x in v {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        TensorData::U8(v) => out.write_all(v)?,
    }
    Ok(())
}

pub fn decode_tensor(input: &mut impl Read) -> Result<Tensor> {
    let mut header = [0u8; 6];
    read_exact_or_truncated(input, &mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"TSR1\"",
            &header[..4]
        )));
    }
    let dtype = Dtype::from_code(header[4])?;
    let ndim = header[5] as usize;
    if ndim == 0 {
        return Err(Error::Format("ndim must be >= 1".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        read_exact_or_truncated(input, &mut b)?;
        let e = u64::from_le_bytes(b);
        if e == 0 {
            return Err(Error::Format("zero extent in shape".into()));
        }
        shape.push(usize::try_from(e).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let count: usize = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("shape product overflow".into()))?;
    let mut payload = vec![0u8; count * dtype.size()];
    read_exact_or_truncated(input, &mut payload)?;
    // Declared shape must account for every byte: reject trailing data.
    let mut probe = [0u8; 1];
    if input.read(&mut probe).map_err(io_format)? != 0 {
        return Err(Error::Format(
            "trailing bytes after declared payload".into(),
        ));
    }
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I32 => TensorData::I32(
            payload
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => TensorData::U8(payload),
    };
    Tensor::new(shape, data)
}

fn io_format(e: std::io::Error) -> Error {
    Error::Format(format!("read failed: {e}"))
}

fn read_exact_or_truncated(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format("truncated file".into())
        } else {
            io_format(e)
        }
    })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut buf = Vec::with_capacity(6 + 8 * t.shape.len() + t.data.len() * t.dtype().size());
    encode_tensor(t, &mut buf).expect("in-memory encode cannot fail");
    atomic_write(path.as_ref(), &buf)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&mut bytes.as_slice())
}

/// Write via a temporary file in the same directory, then rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp: PathBuf = {
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".tmp");
        dir.join(name)
    };
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Patch bundles
// ---------------------------------------------------------------------------

pub const S2_BANDS: usize = 10;
pub const S1_BANDS: usize = 2;
/// Patch window is 3x3 pixels around the sample coordinate.
pub const PATCH: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleManifest {
    pub sample_id: String,
    pub lat: f64,
    pub lon: f64,
    pub year: i32,
    pub files: BundleFiles,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleFiles {
    pub s2_bands: String,
    pub s2_mask: String,
    pub s2_doys: String,
    pub s1_bands: String,
    pub s1_mask: String,
    pub s1_doys: String,
}

impl Default for BundleFiles {
    fn default() -> Self {
        BundleFiles {
            s2_bands: "s2_bands.tsr".into(),
            s2_mask: "s2_mask.tsr".into(),
            s2_doys: "s2_doys.tsr".into(),
            s1_bands: "s1_bands.tsr".into(),
            s1_mask: "s1_mask.tsr".into(),
            s1_doys: "s1_doys.tsr".into(),
        }
    }
}

/// One sample's multimodal observation time series: optical bands
/// `[T2 x 3 x 3 x 10]`, radar backscatter `[T1 x 3 x 3 x 2]`, per-timestep
/// validity masks and days-of-year for each modality.
#[derive(Debug, Clone)]
pub struct PatchBundle {
    pub sample_id: String,
    pub lat: f64,
    pub lon: f64,
    pub year: i32,
    pub s2_bands: Array4<f32>,
    pub s2_mask: Array3<u8>,
    pub s2_doys: Vec<i32>,
    pub s1_bands: Array4<f32>,
    pub s1_mask: Array3<u8>,
    pub s1_doys: Vec<i32>,
}

impl PatchBundle {
    pub fn validate(&self) -> Result<()> {
        validate_modality("s2", &self.s2_bands, &self.s2_mask, &self.s2_doys, S2_BANDS)?;
        validate_modality("s1", &self.s1_bands, &self.s1_mask, &self.s1_doys, S1_BANDS)?;
        Ok(())
    }
}

fn validate_modality(
    tag: &str,
    bands: &Array4<f32>,
    mask: &Array3<u8>,
    doys: &[i32],
    n_bands: usize,
) -> Result<()> {
    let (t, h, w, c) = bands.dim();
    if t == 0 {
        return Err(Error::Validation(format!("{tag}_bands: T must be >= 1")));
    }
    if h != PATCH || w != PATCH {
        return Err(Error::Validation(format!(
            "{tag}_bands: spatial window must be {PATCH}x{PATCH}, got {h}x{w}"
        )));
    }
    if c != n_bands {
        return Err(Error::Validation(format!(
            "{tag}_bands: expected {n_bands} channels, got {c}"
        )));
    }
    if mask.dim() != (t, h, w) {
        return Err(Error::Validation(format!(
            "{tag}_mask: shape {:?} does not match bands [{t}, {h}, {w}]",
            mask.dim()
        )));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::Validation(format!("{tag}_mask: values must be 0 or 1")));
    }
    if doys.len() != t {
        return Err(Error::Validation(format!(
            "{tag}_doys: length {} does not match T = {t}",
            doys.len()
        )));
    }
    for &d in doys {
        if !(1..=366).contains(&d) {
            return Err(Error::Validation(format!(
                "{tag}_doys: day-of-year {d} outside [1, 366]"
            )));
        }
    }
    if doys.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation(format!(
            "{tag}_doys: days must be strictly increasing"
        )));
    }
    Ok(())
}

fn load_file(dir: &Path, field: &str, name: &str) -> Result<Tensor> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::Validation(format!(
            "bundle missing file for field \"{field}\": {}",
            path.display()
        )));
    }
    read_tensor(&path)
}

fn bands_from_tensor(field: &str, t: &Tensor) -> Result<Array4<f32>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Validation(format!(
            "{field}: expected 4-d tensor, got shape {s:?}"
        )));
    }
    let arr = Array4::from_shape_vec((s[0], s[1], s[2], s[3]), t.as_f32()?.to_vec())
        .map_err(|e| Error::Dimension(format!("{field}: {e}")))?;
    Ok(arr)
}

fn mask_from_tensor(field: &str, t: &Tensor) -> Result<Array3<u8>> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Validation(format!(
            "{field}: expected 3-d tensor, got shape {s:?}"
        )));
    }
    let arr = Array3::from_shape_vec((s[0], s[1], s[2]), t.as_u8()?.to_vec())
        .map_err(|e| Error::Dimension(format!("{field}: {e}")))?;
    Ok(arr)
}

fn doys_from_tensor(field: &str, t: &Tensor) -> Result<Vec<i32>> {
    if t.shape().len() != 1 {
        return Err(Error::Validation(format!(
            "{field}: expected 1-d tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.as_i32()?.to_vec())
}

/// Load and validate a patch bundle directory. Every invariant of the bundle
/// is checked here so downstream code can trust loaded data.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<PatchBundle> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Validation(format!(
            "bundle missing file for field \"manifest\": {}",
            manifest_path.display()
        )));
    }
    let manifest: BundleManifest = serde_json::from_slice(
        &fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )?;
    let f = &manifest.files;
    let bundle = PatchBundle {
        sample_id: manifest.sample_id.clone(),
        lat: manifest.lat,
        lon: manifest.lon,
        year: manifest.year,
        s2_bands: bands_from_tensor("s2_bands", &load_file(dir, "s2_bands", &f.s2_bands)?)?,
        s2_mask: mask_from_tensor("s2_mask", &load_file(dir, "s2_mask", &f.s2_mask)?)?,
        s2_doys: doys_from_tensor("s2_doys", &load_file(dir, "s2_doys", &f.s2_doys)?)?,
        s1_bands: bands_from_tensor("s1_bands", &load_file(dir, "s1_bands", &f.s1_bands)?)?,
        s1_mask: mask_from_tensor("s1_mask", &load_file(dir, "s1_mask", &f.s1_mask)?)?,
        s1_doys: doys_from_tensor("s1_doys", &load_file(dir, "s1_doys", &f.s1_doys)?)?,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Write a bundle as `manifest.json` plus six tensor files.
pub fn save_bundle(dir: impl AsRef<Path>, bundle: &PatchBundle) -> Result<()> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = BundleFiles::default();
    let manifest = BundleManifest {
        sample_id: bundle.sample_id.clone(),
        lat: bundle.lat,
        lon: bundle.lon,
        year: bundle.year,
        files: files.clone(),
    };
    atomic_write(
        &dir.join("manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    let (t2, h, w, c2) = bundle.s2_bands.dim();
    let (t1, _, _, c1) = bundle.s1_bands.dim();
    write_tensor(
        dir.join(&files.s2_bands),
        &Tensor::f32(vec![t2, h, w, c2], bundle.s2_bands.iter().copied().collect())?,
    )?;
    write_tensor(
        dir.join(&files.s2_mask),
        &Tensor::u8(vec![t2, h, w], bundle.s2_mask.iter().copied().collect())?,
    )?;
    write_tensor(
        dir.join(&files.s2_doys),
        &Tensor::i32(vec![t2], bundle.s2_doys.clone())?,
    )?;
    write_tensor(
        dir.join(&files.s1_bands),
        &Tensor::f32(vec![t1, h, w, c1], bundle.s1_bands.iter().copied().collect())?,
    )?;
    write_tensor(
        dir.join(&files.s1_mask),
        &Tensor::u8(vec![t1, h, w], bundle.s1_mask.iter().copied().collect())?,
    )?;
    write_tensor(
        dir.join(&files.s1_doys),
        &Tensor::i32(vec![t1], bundle.s1_doys.clone())?,
    )?;
    Ok(())
}

/// Read a 1-d f64 tensor as an `Array1`.
pub fn tensor_to_array1(t: &Tensor) -> Result<Array1<f64>> {
    if t.shape().len() != 1 {
        return Err(Error::Dimension(format!(
            "expected 1-d tensor, got {:?}",
            t.shape()
        )));
    }
    Ok(Array1::from_vec(t.to_f64_vec()))
}
