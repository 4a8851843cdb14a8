//! Manifest-driven tensor loading and the PT2T container.
//!
//! A manifest is JSON text:
//!
//! ```json
//! {"entries": [{"name": "layer0", "shape": [n, m], "dtype": "f32",
//!               "path": "layer0.bin", "calib_path": "layer0.calib.bin"}]}
//! ```
//!
//! Paths are relative to the manifest's directory. Payloads are raw
//! little-endian row-major binaries. Calibration payloads are always f32 with
//! shape `[samples, m]`, the sample count following from the file length.
//!
//! PT2T layout (all integers little-endian):
//!
//! | field        | bytes                         |
//! |--------------|-------------------------------|
//! | magic        | `b"PT2T"`                     |
//! | version      | u16 = 1                       |
//! | n, m, k      | u32 each                      |
//! | scale dtype  | u8 (0 = f32, 1 = f16)         |
//! | permutation  | m x u32                       |
//! | grid         | per row, per group: alpha, mu |
//! | trits        | ceil(n*m/5) bytes             |
//! | crc32        | u32 over permutation..trits   |

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use crate::ternary::{n_groups, packed_len, GridParams, PackedTernaryTensor, ScaleDtype};

pub const MAGIC: &[u8; 4] = b"PT2T";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 1;
const CRC_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorDtype {
    F32,
    F16,
}

impl TensorDtype {
    pub fn size_bytes(self) -> usize {
        match self {
            TensorDtype::F32 => 4,
            TensorDtype::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: TensorDtype,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calib_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl LayerManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            entries,
            base_dir: base_dir.into(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn entry(&self, name: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Writes the manifest as pretty JSON to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Activation samples for one layer, flattened to `[samples, features]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibBatch {
    inner: DenseTensor,
}

impl CalibBatch {
    pub fn new(samples: usize, features: usize, data: Vec<f64>) -> Result<Self> {
        let inner = DenseTensor::new(samples, features, data)?;
        if let Some(index) = inner.first_non_finite() {
            return Err(Error::NonFinite {
                name: "calibration batch".into(),
                index,
            });
        }
        Ok(Self { inner })
    }

    pub fn samples(&self) -> usize {
        self.inner.rows()
    }

    pub fn features(&self) -> usize {
        self.inner.cols()
    }

    pub fn as_tensor(&self) -> &DenseTensor {
        &self.inner
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        self.inner.row(s)
    }
}

fn file_len(path: &Path) -> Result<u64> {
    fs::metadata(path).map(|m| m.len()).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<LayerManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: LayerManifest =
        serde_json::from_str(&text).map_err(|e| Error::ManifestParse(e.to_string()))?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();

    let mut seen = HashSet::new();
    for e in &manifest.entries {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::DuplicateName(e.name.clone()));
        }
        let [n, m] = e.shape;
        if n == 0 || m == 0 {
            return Err(Error::entry(&e.name, "shape dimensions must be positive"));
        }
        let p = manifest.resolve(&e.path);
        let len = fs::metadata(&p)
            .map_err(|err| Error::entry(&e.name, format!("missing file {}: {err}", p.display())))?
            .len();
        let want = (n * m * e.dtype.size_bytes()) as u64;
        if len != want {
            return Err(Error::entry(
                &e.name,
                format!("size mismatch: {} has {len} bytes, expected {want}", p.display()),
            ));
        }
        if let Some(c) = &e.calib_path {
            let cp = manifest.resolve(c);
            let clen = fs::metadata(&cp)
                .map_err(|err| Error::entry(&e.name, format!("missing calibration file {}: {err}", cp.display())))?
                .len();
            let row = (m * 4) as u64;
            if clen == 0 || clen % row != 0 {
                return Err(Error::entry(
                    &e.name,
                    format!(
                        "size mismatch: calibration file {} has {clen} bytes, not a positive multiple of {row}",
                        cp.display()
                    ),
                ));
            }
        }
    }
    Ok(manifest)
}

fn decode_values(bytes: &[u8], dtype: TensorDtype) -> Vec<f64> {
    match dtype {
        TensorDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect(),
        TensorDtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f64::from(f16::from_le_bytes([c[0], c[1]]).to_f32()))
            .collect(),
    }
}

fn read_values(name: &str, path: &Path, dtype: TensorDtype, count: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != count * dtype.size_bytes() {
        return Err(Error::entry(
            name,
            format!("size mismatch: {} has {} bytes", path.display(), bytes.len()),
        ));
    }
    let values = decode_values(&bytes, dtype);
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            name: name.to_string(),
            index,
        });
    }
    Ok(values)
}

pub fn load_tensor(manifest: &LayerManifest, name: &str) -> Result<DenseTensor> {
    let e = manifest.entry(name)?;
    let [n, m] = e.shape;
    let data = read_values(name, &manifest.resolve(&e.path), e.dtype, n * m)?;
    DenseTensor::new(n, m, data)
}

/// Calibration activations for `name`, or `None` when the entry has none.
pub fn load_calib(manifest: &LayerManifest, name: &str) -> Result<Option<CalibBatch>> {
    let e = manifest.entry(name)?;
    let Some(rel) = &e.calib_path else {
        return Ok(None);
    };
    load_calib_file(name, &manifest.resolve(rel), e.shape[1]).map(Some)
}

pub fn load_calib_file(name: &str, path: &Path, features: usize) -> Result<CalibBatch> {
    let len = file_len(path)? as usize;
    let row = features * 4;
    if len == 0 || len % row != 0 {
        return Err(Error::entry(
            name,
            format!("calibration file {} has {len} bytes, not a positive multiple of {row}", path.display()),
        ));
    }
    let samples = len / row;
    let data = read_values(name, path, TensorDtype::F32, samples * features)?;
    CalibBatch::new(samples, features, data)
}

/// Writes values as raw little-endian f32.
pub fn write_raw_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Total encoded size of a PT2T file.
pub fn encoded_len(n: usize, m: usize, k: usize, dtype: ScaleDtype) -> usize {
    HEADER_LEN + 4 * m + n * n_groups(m, k) * 2 * dtype.size_bytes() + packed_len(n * m) + CRC_LEN
}

fn push_scale(buf: &mut Vec<u8>, v: f32, dtype: ScaleDtype) {
    match dtype {
        ScaleDtype::F32 => buf.extend_from_slice(&v.to_le_bytes()),
        ScaleDtype::F16 => buf.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
    }
}

pub fn encode_packed(t: &PackedTernaryTensor) -> Vec<u8> {
    let (n, m, k) = (t.rows(), t.cols(), t.group_size());
    let dtype = t.scale_dtype();
    let mut buf = Vec::with_capacity(encoded_len(n, m, k, dtype));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(m as u32).to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.push(dtype.tag());
    for &p in t.permutation() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let grid = t.grid();
    for i in 0..n {
        for g in 0..grid.groups() {
            push_scale(&mut buf, grid.alpha(i, g), dtype);
            push_scale(&mut buf, grid.mu(i, g), dtype);
        }
    }
    buf.extend_from_slice(t.payload());
    let crc = crc32fast::hash(&buf[HEADER_LEN..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_packed(bytes: &[u8]) -> Result<PackedTernaryTensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n = u32_at(bytes, 6) as usize;
    let m = u32_at(bytes, 10) as usize;
    let k = u32_at(bytes, 14) as usize;
    let dtype = ScaleDtype::from_tag(bytes[18])?;
    if k == 0 {
        return Err(Error::Config("group size 0 in header".into()));
    }
    let expected = encoded_len(n, m, k, dtype);
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }
    let body_end = expected - CRC_LEN;
    let stored = u32_at(bytes, body_end);
    let computed = crc32fast::hash(&bytes[HEADER_LEN..body_end]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut at = HEADER_LEN;
    let permutation: Vec<u32> = (0..m).map(|j| u32_at(bytes, at + 4 * j)).collect();
    at += 4 * m;
    let groups = n_groups(m, k);
    let mut alpha = Vec::with_capacity(n * groups);
    let mut mu = Vec::with_capacity(n * groups);
    let read_scale = |at: &mut usize| -> f32 {
        let v = match dtype {
            ScaleDtype::F32 => f32::from_le_bytes([bytes[*at], bytes[*at + 1], bytes[*at + 2], bytes[*at + 3]]),
            ScaleDtype::F16 => f16::from_le_bytes([bytes[*at], bytes[*at + 1]]).to_f32(),
        };
        *at += dtype.size_bytes();
        v
    };
    for _ in 0..n * groups {
        alpha.push(read_scale(&mut at));
        mu.push(read_scale(&mut at));
    }
    let grid = GridParams::new(n, groups, alpha, mu)?;
    let payload = bytes[at..body_end].to_vec();
    PackedTernaryTensor::from_parts(n, m, k, dtype, permutation, grid, payload)
}

pub fn write_packed(t: &PackedTernaryTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_packed(t)).map_err(|e| Error::io(path, e))
}

pub fn read_packed(path: impl AsRef<Path>) -> Result<PackedTernaryTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_packed(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ternary::TernaryMatrix;
    use proptest::prelude::*;

    fn write_f32(dir: &Path, name: &str, vals: &[f32]) {
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(name), bytes).unwrap();
    }

    fn write_manifest(dir: &Path, json: &str) -> PathBuf {
        let p = dir.join("manifest.json");
        fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn loads_two_entry_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_f32(dir.path(), "a.bin", &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        write_f32(dir.path(), "b.bin", &[0.5; 4]);
        write_f32(dir.path(), "b.calib.bin", &[1.0; 6]);
        let p = write_manifest(
            dir.path(),
            r#"{"entries": [
                {"name": "a", "shape": [2, 3], "dtype": "f32", "path": "a.bin"},
                {"name": "b", "shape": [2, 2], "dtype": "f32", "path": "b.bin", "calib_path": "b.calib.bin"}
            ]}"#,
        );
        let man = load_manifest(&p).unwrap();
        assert_eq!(man.entries.len(), 2);
        let a = load_tensor(&man, "a").unwrap();
        assert_eq!(a.shape(), [2, 3]);
        assert_eq!(a.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(load_calib(&man, "a").unwrap().is_none());
        let c = load_calib(&man, "b").unwrap().unwrap();
        assert_eq!((c.samples(), c.features()), (3, 2));
        assert!(matches!(load_tensor(&man, "zzz"), Err(Error::UnknownTensor(_))));
    }

    #[test]
    fn missing_file_names_entry() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"entries": [{"name": "ghost", "shape": [1, 1], "dtype": "f32", "path": "nope.bin"}]}"#,
        );
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }

    #[test]
    fn size_mismatch_names_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_f32(dir.path(), "a.bin", &[1.0; 5]);
        let p = write_manifest(
            dir.path(),
            r#"{"entries": [{"name": "short", "shape": [2, 3], "dtype": "f32", "path": "a.bin"}]}"#,
        );
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("short") && err.to_string().contains("size mismatch"), "{err}");
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_f32(dir.path(), "a.bin", &[1.0]);
        let p = write_manifest(
            dir.path(),
            r#"{"entries": [
                {"name": "x", "shape": [1, 1], "dtype": "f32", "path": "a.bin"},
                {"name": "x", "shape": [1, 1], "dtype": "f32", "path": "a.bin"}
            ]}"#,
        );
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("duplicate tensor name"), "{err}");
    }

    #[test]
    fn parse_failure_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_manifest(dir.path(), "{not json");
        assert!(matches!(load_manifest(&p), Err(Error::ManifestParse(_))));
    }

    #[test]
    fn f16_widening_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let vals = [f16::from_f32(0.1), f16::MIN_POSITIVE_SUBNORMAL, f16::MAX, f16::from_f32(-2.5)];
        let bytes: Vec<u8> = vals.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.path().join("h.bin"), bytes).unwrap();
        let p = write_manifest(
            dir.path(),
            r#"{"entries": [{"name": "h", "shape": [2, 2], "dtype": "f16", "path": "h.bin"}]}"#,
        );
        let t = load_tensor(&load_manifest(&p).unwrap(), "h").unwrap();
        let want: Vec<f64> = vals.iter().map(|v| f64::from(v.to_f32())).collect();
        assert_eq!(t.data(), &want[..]);
    }

    #[test]
    fn nan_rejected_with_index() {
        let dir = tempfile::tempdir().unwrap();
        write_f32(dir.path(), "a.bin", &[1.0, 2.0, f32::NAN, 4.0]);
        let p = write_manifest(
            dir.path(),
            r#"{"entries": [{"name": "bad", "shape": [2, 2], "dtype": "f32", "path": "a.bin"}]}"#,
        );
        let man = load_manifest(&p).unwrap();
        match load_tensor(&man, "bad") {
            Err(Error::NonFinite { name, index }) => {
                assert_eq!(name, "bad");
                assert_eq!(index, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn sample_packed() -> PackedTernaryTensor {
        let t = TernaryMatrix::new(2, 3, vec![1, 0, -1, -1, 1, 0]).unwrap();
        let grid = GridParams::new(2, 2, vec![1.0, 0.5, 2.0, 0.0], vec![0.25, -1.0, 0.0, 3.0]).unwrap();
        PackedTernaryTensor::from_trits(&t, grid, vec![2, 0, 1], 2, ScaleDtype::F32).unwrap()
    }

    #[test]
    fn golden_bytes_little_endian() {
        let bytes = encode_packed(&sample_packed());
        let mut want: Vec<u8> = Vec::new();
        want.extend_from_slice(b"PT2T");
        want.extend_from_slice(&[1, 0]);
        want.extend_from_slice(&[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        want.push(0);
        want.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0]);
        // alpha, mu per (row, group): 1.0, 0.25, 0.5, -1.0, 2.0, 0.0, 0.0, 3.0
        want.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x80, 0x3e]);
        want.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x80, 0xbf]);
        want.extend_from_slice(&[0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x00, 0x00]);
        want.extend_from_slice(&[0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x40, 0x40]);
        // digits [2,1,0,0,2] -> 2+3+0+0+162 = 167; [1] -> 1
        want.extend_from_slice(&[167, 1]);
        let crc = crc32fast::hash(&want[HEADER_LEN..]);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(bytes.len(), encoded_len(2, 3, 2, ScaleDtype::F32));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pt2t");
        let t = sample_packed();
        write_packed(&t, &p).unwrap();
        assert_eq!(read_packed(&p).unwrap(), t);
    }

    #[test]
    fn corrupted_magic() {
        let mut b = encode_packed(&sample_packed());
        b[0] = b'X';
        assert_eq!(decode_packed(&b).unwrap_err().to_string(), "bad magic");
    }

    #[test]
    fn header_declaring_more_trits_is_truncated() {
        let mut b = encode_packed(&sample_packed());
        b[6] = 9; // n = 9
        let err = decode_packed(&b).unwrap_err();
        assert!(err.to_string().starts_with("truncated payload"), "{err}");
    }

    #[test]
    fn tampered_byte_fails_checksum() {
        let mut b = encode_packed(&sample_packed());
        let last_trit = b.len() - 5;
        b[last_trit] ^= 0x01;
        assert!(matches!(decode_packed(&b), Err(Error::ChecksumMismatch { .. })));
    }

    #[test]
    fn version_and_trailing_checks() {
        let mut b = encode_packed(&sample_packed());
        b.push(0);
        assert!(matches!(decode_packed(&b), Err(Error::TrailingBytes { .. })));
        let mut b = encode_packed(&sample_packed());
        b[4] = 2;
        assert!(matches!(decode_packed(&b), Err(Error::UnsupportedVersion(2))));
    }

    fn arb_packed() -> impl Strategy<Value = PackedTernaryTensor> {
        (1usize..9, 1usize..20, 1usize..8, any::<bool>(), any::<u64>()).prop_map(|(n, m, k, f16s, seed)| {
            use rand::{seq::SliceRandom, Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let dtype = if f16s { ScaleDtype::F16 } else { ScaleDtype::F32 };
            let trits: Vec<i8> = (0..n * m).map(|_| rng.random_range(-1..=1)).collect();
            let g = n_groups(m, k);
            let alpha = (0..n * g).map(|_| dtype.round(rng.random_range(0.0..4.0))).collect();
            let mu = (0..n * g).map(|_| dtype.round(rng.random_range(-2.0..2.0))).collect();
            let mut perm: Vec<u32> = (0..m as u32).collect();
            perm.shuffle(&mut rng);
            PackedTernaryTensor::from_trits(
                &TernaryMatrix::new(n, m, trits).unwrap(),
                GridParams::new(n, g, alpha, mu).unwrap(),
                perm,
                k,
                dtype,
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn encode_decode_identity(t in arb_packed()) {
            let bytes = encode_packed(&t);
            prop_assert_eq!(bytes.len(), encoded_len(t.rows(), t.cols(), t.group_size(), t.scale_dtype()));
            prop_assert_eq!(decode_packed(&bytes).unwrap(), t);
        }
    }
}
