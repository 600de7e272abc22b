//! On-disk formats: binary matcher parameters with a JSON sidecar for
//! training metadata, and binary pseudo-label records with a directory index.
//!
//! All binary values are little-endian.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotator::PseudoLabel;
use crate::error::{Error, Result};
use crate::geometry::{PixelGrid, Point2};
use crate::matcher::{DescriptorConfig, FilterBank, MatchField, MatcherParams};
use crate::trainer::{params_hash, Checkpoint};

pub const PARAMS_MAGIC: [u8; 4] = *b"CLMX";
pub const PARAMS_VERSION: u32 = 1;
pub const LABEL_MAGIC: [u8; 4] = *b"CLPL";
pub const LABEL_VERSION: u32 = 1;
pub const LABEL_INDEX: &str = "index.json";

struct Reader<'a, R: Read> {
    inner: R,
    path: &'a Path,
}

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| Error::format(self.path, format!("truncated: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(|e| Error::format(self.path, format!("truncated: {e}")))?;
        Ok(b)
    }

    fn header(&mut self, magic: [u8; 4], version: u32) -> Result<()> {
        if self.bytes::<4>()? != magic {
            return Err(Error::format(self.path, "bad magic bytes"));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::format(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn end(&mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.inner.read(&mut extra) {
            Ok(0) => Ok(()),
            Ok(_) => Err(Error::format(self.path, "trailing bytes")),
            Err(e) => Err(Error::io(self.path, e)),
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in 32 bits")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_descriptor(buf: &mut Vec<u8>, d: &DescriptorConfig) -> Result<()> {
    put_u32(buf, d.stride)?;
    put_u32(buf, d.window)?;
    put_u32(buf, d.bank.code() as usize)
}

fn get_descriptor<R: Read>(r: &mut Reader<'_, R>) -> Result<DescriptorConfig> {
    let stride = r.u32()? as usize;
    let window = r.u32()? as usize;
    let code = r.u32()?;
    let bank = FilterBank::from_code(code).ok_or_else(|| Error::format(r.path, format!("unknown filter bank code {code}")))?;
    Ok(DescriptorConfig { stride, window, bank })
}

/// Layout: magic, version, in_dim, out_dim, stride, window, bank code,
/// temperature, then the projection row-major as f64.
pub fn encode_params(p: &MatcherParams) -> Result<Vec<u8>> {
    p.validate()?;
    let mut buf = Vec::with_capacity(40 + 8 * p.projection.len());
    buf.extend_from_slice(&PARAMS_MAGIC);
    buf.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    put_u32(&mut buf, p.in_dim)?;
    put_u32(&mut buf, p.out_dim)?;
    put_descriptor(&mut buf, &p.descriptor)?;
    put_f64(&mut buf, p.temperature);
    for v in &p.projection {
        put_f64(&mut buf, *v);
    }
    Ok(buf)
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<MatcherParams> {
    let mut r = Reader { inner: bytes, path };
    r.header(PARAMS_MAGIC, PARAMS_VERSION)?;
    let in_dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    let descriptor = get_descriptor(&mut r)?;
    let temperature = r.f64()?;
    let projection = r.f64s(in_dim * out_dim)?;
    r.end()?;
    let p = MatcherParams { in_dim, out_dim, projection, temperature, descriptor };
    p.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(p)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_params(p: &MatcherParams, path: &Path) -> Result<()> {
    write_file(path, &encode_params(p)?)
}

pub fn load_params(path: &Path) -> Result<MatcherParams> {
    decode_params(&read_file(path)?, path)
}

/// Human-readable metadata stored next to a checkpoint's parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub generation: u32,
    pub epoch: usize,
    pub step: usize,
    pub val_pck: f64,
    pub rng_state: u64,
    pub in_dim: usize,
    pub out_dim: usize,
    pub temperature: f64,
    pub descriptor: DescriptorConfig,
    pub params_sha256: String,
}

/// Paths of the parameter file and sidecar for `stem` in `dir`.
pub fn checkpoint_paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path, stem: &str) -> Result<PathBuf> {
    let (bin, json) = checkpoint_paths(dir, stem);
    save_params(&ck.params, &bin)?;
    let meta = CheckpointMeta {
        format_version: PARAMS_VERSION,
        generation: ck.generation,
        epoch: ck.epoch,
        step: ck.step,
        val_pck: ck.val_pck,
        rng_state: ck.rng_state,
        in_dim: ck.params.in_dim,
        out_dim: ck.params.out_dim,
        temperature: ck.params.temperature,
        descriptor: ck.params.descriptor,
        params_sha256: params_hash(&ck.params),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::format(&json, e.to_string()))?;
    write_file(&json, format!("{text}\n").as_bytes())?;
    Ok(bin)
}

/// Loads a checkpoint and checks the sidecar against the parameter file.
pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<Checkpoint> {
    let (bin, json) = checkpoint_paths(dir, stem);
    let params = load_params(&bin)?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&read_file(&json)?).map_err(|e| Error::format(&json, e.to_string()))?;
    if meta.params_sha256 != params_hash(&params) {
        return Err(Error::format(&json, "parameter hash does not match the parameter file"));
    }
    Ok(Checkpoint {
        params,
        generation: meta.generation,
        epoch: meta.epoch,
        step: meta.step,
        val_pck: meta.val_pck,
        rng_state: meta.rng_state,
    })
}

/// Layout: magic, version, pair id (u32 length + UTF-8), target lattice
/// (h, w), target image (h, w), descriptor (stride, window, bank), tau,
/// generation, then per cell x/y pairs, confidences, and the mask as an
/// LSB-first bitset.
pub fn encode_label(l: &PseudoLabel) -> Result<Vec<u8>> {
    let n = l.field.tgt_grid.len();
    if l.field.coords.len() != n || l.field.confidence.len() != n || l.mask.len() != n {
        return Err(Error::DimensionMismatch { left: n, right: l.mask.len() });
    }
    let mut buf = Vec::with_capacity(64 + l.pair_id.len() + 24 * n + n.div_ceil(8));
    buf.extend_from_slice(&LABEL_MAGIC);
    buf.extend_from_slice(&LABEL_VERSION.to_le_bytes());
    put_u32(&mut buf, l.pair_id.len())?;
    buf.extend_from_slice(l.pair_id.as_bytes());
    put_u32(&mut buf, l.field.tgt_grid.height)?;
    put_u32(&mut buf, l.field.tgt_grid.width)?;
    put_u32(&mut buf, l.field.tgt_image.height)?;
    put_u32(&mut buf, l.field.tgt_image.width)?;
    put_descriptor(&mut buf, &l.field.descriptor)?;
    put_f64(&mut buf, l.tau);
    put_u32(&mut buf, l.teacher_generation as usize)?;
    for p in &l.field.coords {
        put_f64(&mut buf, p.x);
        put_f64(&mut buf, p.y);
    }
    for c in &l.field.confidence {
        put_f64(&mut buf, *c);
    }
    let mut bits = vec![0u8; n.div_ceil(8)];
    for (i, m) in l.mask.iter().enumerate() {
        if *m {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&bits);
    Ok(buf)
}

pub fn decode_label(bytes: &[u8], path: &Path) -> Result<PseudoLabel> {
    let mut r = Reader { inner: bytes, path };
    r.header(LABEL_MAGIC, LABEL_VERSION)?;
    let len = r.u32()? as usize;
    if len > bytes.len() {
        return Err(Error::format(path, "pair id length exceeds the record"));
    }
    let pair_id = String::from_utf8(r.vec(len)?).map_err(|_| Error::format(path, "pair id is not UTF-8"))?;
    let tgt_grid = PixelGrid { height: r.u32()? as usize, width: r.u32()? as usize };
    let tgt_image = PixelGrid { height: r.u32()? as usize, width: r.u32()? as usize };
    let descriptor = get_descriptor(&mut r)?;
    let tau = r.f64()?;
    let teacher_generation = r.u32()?;
    let n = tgt_grid.len();
    if n.saturating_mul(24) > bytes.len() {
        return Err(Error::format(path, "lattice larger than the record"));
    }
    let xy = r.f64s(2 * n)?;
    let coords = xy.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect();
    let confidence = r.f64s(n)?;
    let bits = r.vec(n.div_ceil(8))?;
    r.end()?;
    let mask = (0..n).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
    let field = MatchField { tgt_grid, tgt_image, descriptor, coords, confidence };
    Ok(PseudoLabel { field, mask, tau, teacher_generation, pair_id })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelIndexEntry {
    pub pair_id: String,
    pub file: String,
    pub tau: f64,
    pub teacher_generation: u32,
    pub cells: usize,
    pub retained: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelIndex {
    pub format_version: u32,
    pub records: Vec<LabelIndexEntry>,
}

/// Writes one record per label (`NNNNNN.plbl`, in input order) and the
/// directory index.
pub fn save_pseudo_labels(labels: &[PseudoLabel], dir: &Path) -> Result<LabelIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        let file = format!("{i:06}.plbl");
        write_file(&dir.join(&file), &encode_label(l)?)?;
        records.push(LabelIndexEntry {
            pair_id: l.pair_id.clone(),
            file,
            tau: l.tau,
            teacher_generation: l.teacher_generation,
            cells: l.mask.len(),
            retained: l.retained(),
        });
    }
    let index = LabelIndex { format_version: LABEL_VERSION, records };
    let path = dir.join(LABEL_INDEX);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::format(&path, e.to_string()))?;
    write_file(&path, format!("{text}\n").as_bytes())?;
    Ok(index)
}

pub fn load_pseudo_labels(dir: &Path) -> Result<Vec<PseudoLabel>> {
    let path = dir.join(LABEL_INDEX);
    let index: LabelIndex = serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if index.format_version != LABEL_VERSION {
        return Err(Error::format(&path, format!("unsupported version {}", index.format_version)));
    }
    index
        .records
        .iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let l = decode_label(&read_file(&p)?, &p)?;
            if l.pair_id != e.pair_id {
                return Err(Error::format(&p, format!("record holds `{}`, index says `{}`", l.pair_id, e.pair_id)));
            }
            Ok(l)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcher::RAW_DIM;

    fn params() -> MatcherParams {
        let d = DescriptorConfig { stride: 4, window: 8, bank: FilterBank::Grid };
        let mut p = MatcherParams::identity(d, 0.02);
        for (i, v) in p.projection.iter_mut().enumerate() {
            *v += (i as f64 * 0.37).sin() * 1e-3;
        }
        p
    }

    fn label() -> PseudoLabel {
        let d = DescriptorConfig { stride: 4, window: 8, bank: FilterBank::Basic };
        let grid = PixelGrid { height: 3, width: 5 };
        let n = grid.len();
        let field = MatchField {
            tgt_grid: grid,
            tgt_image: PixelGrid { height: 12, width: 20 },
            descriptor: d,
            coords: (0..n).map(|i| Point2::new(i as f64 * 1.5, 20.0 - i as f64 / 3.0)).collect(),
            confidence: (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
        };
        PseudoLabel::from_field(field, 0.6, 2, "a~b")
    }

    #[test]
    fn params_round_trip_bit_exact() {
        let p = params();
        let bytes = encode_params(&p).unwrap();
        assert_eq!(&bytes[..4], b"CLMX");
        assert_eq!(bytes.len(), 4 + 4 + 5 * 4 + 8 + 8 * p.projection.len());
        assert_eq!(decode_params(&bytes, Path::new("x")).unwrap(), p);
        assert_eq!(p.in_dim, 5 * RAW_DIM);
    }

    #[test]
    fn corrupted_params_are_rejected() {
        let bytes = encode_params(&params()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_params(&bad, Path::new("x")), Err(Error::Format { .. })));
        assert!(matches!(decode_params(&bytes[..bytes.len() - 1], Path::new("x")), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_params(&long, Path::new("x")), Err(Error::Format { .. })));
        let mut version = bytes;
        version[4] = 9;
        assert!(matches!(decode_params(&version, Path::new("x")), Err(Error::Format { .. })));
    }

    #[test]
    fn checkpoint_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint { params: params(), generation: 2, epoch: 17, step: 34, val_pck: 0.625, rng_state: 99 };
        save_checkpoint(&ck, dir.path(), "best").unwrap();
        assert_eq!(load_checkpoint(dir.path(), "best").unwrap(), ck);
        let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("best.json")).unwrap()).unwrap();
        assert_eq!(meta["generation"], 2);
        assert_eq!(meta["descriptor"]["bank"], "grid");
    }

    #[test]
    fn checkpoint_with_mismatched_sidecar_fails() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint { params: params(), generation: 0, epoch: 1, step: 1, val_pck: 0.5, rng_state: 0 };
        save_checkpoint(&ck, dir.path(), "a").unwrap();
        let mut other = ck.params.clone();
        other.projection[0] += 1.0;
        save_params(&other, &dir.path().join("a.bin")).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), "a"), Err(Error::Format { .. })));
    }

    #[test]
    fn label_round_trip_bit_exact() {
        let l = label();
        assert_eq!(l.retained(), 6);
        let bytes = encode_label(&l).unwrap();
        assert_eq!(decode_label(&bytes, Path::new("x")).unwrap(), l);
        assert!(decode_label(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }

    #[test]
    fn label_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = PseudoLabel::from_field(label().field, 0.2, 1, "c~d");
        let index = save_pseudo_labels(&[label(), b.clone()], dir.path()).unwrap();
        assert_eq!(index.records.len(), 2);
        assert_eq!(index.records[1].retained, 12);
        assert_eq!(load_pseudo_labels(dir.path()).unwrap(), vec![label(), b]);
    }
}
