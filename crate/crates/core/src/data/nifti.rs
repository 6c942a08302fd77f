//! NIfTI-1 single-file (`.nii` / `.nii.gz`) volumes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::volume::{Modality, Volume};
use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes([self.0[at], self.0[at + 1]])
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.0[at..at + 4].try_into().unwrap())
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.0[at..at + 4].try_into().unwrap())
    }
}

/// Reads a volume. Gzip input is detected from its magic bytes. The
/// modality comes from the `descrip` field, falling back to MASK for
/// uint8 files and PET otherwise.
pub fn volume_read(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let raw = fs::read(path)?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| err(path, format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    decode(&bytes).map_err(|m| err(path, m))
}

fn decode(bytes: &[u8]) -> std::result::Result<Volume, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("file is {} bytes, shorter than the header", bytes.len()));
    }
    let h = Reader(bytes);
    if h.i32(0) != HEADER_LEN as i32 {
        return Err(format!(
            "sizeof_hdr is {}, expected 348 (big-endian files are not supported)",
            h.i32(0)
        ));
    }
    if &bytes[344..348] != MAGIC {
        return Err(format!("bad magic {:?}", &bytes[344..348]));
    }
    let ndim = h.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("dim[0] = {ndim} out of range"));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = h.i16(42 + 2 * a);
        if v < 1 {
            return Err(format!("dim[{}] = {v} must be positive", a + 1));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if h.i16(42 + 2 * a) > 1 {
            return Err("only 3-D scalar volumes are supported".into());
        }
    }
    let datatype = h.i16(70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };
    let mut spacing = [1f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = h.f32(80 + 4 * a);
        *s = if a < ndim as usize { v.abs() } else { 1.0 };
    }
    let vox_offset = h.f32(108);
    if !(vox_offset >= HEADER_LEN as f32) {
        return Err(format!("vox_offset {vox_offset} is inside the header"));
    }
    let offset = vox_offset as usize;
    let (slope, inter) = (h.f32(112), h.f32(116));
    let n: usize = dims.iter().product();
    let payload = bytes.get(offset..offset + n * width).ok_or_else(|| {
        format!(
            "truncated payload: need {} bytes after offset {offset}, have {}",
            n * width,
            bytes.len().saturating_sub(offset)
        )
    })?;

    let raw: Vec<f64> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f64).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let scaled = slope != 0.0 && !(slope == 1.0 && inter == 0.0);
    let data: Vec<f32> = if scaled {
        raw.iter().map(|&v| (v * slope as f64 + inter as f64) as f32).collect()
    } else {
        raw.iter().map(|&v| v as f32).collect()
    };

    let origin = if h.i16(252) > 0 {
        [h.f32(268), h.f32(272), h.f32(276)]
    } else if h.i16(254) > 0 {
        [h.f32(292), h.f32(308), h.f32(324)]
    } else {
        [0.0; 3]
    };

    let descrip = String::from_utf8_lossy(&bytes[148..228]);
    let descrip = descrip.trim_end_matches('\0');
    let mut modality = None;
    let mut normalized = false;
    for tok in descrip.split_whitespace() {
        if let Some(m) = tok.strip_prefix("modality=") {
            modality = m.parse().ok();
        } else if tok == "normalized" {
            normalized = true;
        }
    }
    let modality = modality.unwrap_or(if datatype == DT_UINT8 { Modality::Mask } else { Modality::Pet });
    let v = Volume {
        data,
        dims,
        spacing,
        origin,
        modality,
        normalized,
    };
    v.validate().map_err(|e| e.to_string())?;
    Ok(v)
}

/// Writes a volume; masks as uint8, everything else as float32. A path
/// ending in `.gz` is gzip-compressed.
pub fn volume_write(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    v.validate()?;
    let bytes = encode(v)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&bytes)?;
        fs::write(path, enc.finish()?)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

fn encode(v: &Volume) -> Result<Vec<u8>> {
    let mask = v.modality == Modality::Mask;
    if v.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Data(format!("dims {:?} exceed the NIfTI-1 limit", v.dims)));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let mut put = |at: usize, b: &[u8]| h[at..at + b.len()].copy_from_slice(b);
    put(0, &(HEADER_LEN as i32).to_le_bytes());
    put(38, b"r");
    let dim: [i16; 8] = [3, v.dims[0] as i16, v.dims[1] as i16, v.dims[2] as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put(40 + 2 * i, &d.to_le_bytes());
    }
    let (dt, bitpix) = if mask { (DT_UINT8, 8i16) } else { (DT_FLOAT32, 32) };
    put(70, &dt.to_le_bytes());
    put(72, &bitpix.to_le_bytes());
    let pixdim = [1.0f32, v.spacing[0], v.spacing[1], v.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put(76 + 4 * i, &p.to_le_bytes());
    }
    put(108, &(VOX_OFFSET as f32).to_le_bytes());
    put(112, &1f32.to_le_bytes());
    // xyzt_units: millimetres.
    put(123, &[2]);
    let mut descrip = format!("modality={}", v.modality);
    if v.normalized {
        descrip.push_str(" normalized");
    }
    put(148, descrip.as_bytes());
    put(252, &1i16.to_le_bytes());
    put(254, &1i16.to_le_bytes());
    for (i, o) in v.origin.iter().enumerate() {
        put(268 + 4 * i, &o.to_le_bytes());
    }
    for a in 0..3 {
        let mut row = [0f32; 4];
        row[a] = v.spacing[a];
        row[3] = v.origin[a];
        for (i, r) in row.iter().enumerate() {
            put(280 + 16 * a + 4 * i, &r.to_le_bytes());
        }
    }
    put(344, MAGIC);

    if mask {
        h.extend(v.data.iter().map(|&x| x as u8));
    } else {
        h.reserve(4 * v.data.len());
        for x in &v.data {
            h.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let mut v = Volume::new(
            (0..60).map(|i| (i as f32 * 0.37).sin() * 100.0).collect(),
            [5, 4, 3],
            [0.98, 0.98, 3.27],
            Modality::Ct,
        )
        .unwrap();
        v.origin = [-12.5, 3.25, 100.0];
        v
    }

    #[test]
    fn round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample();
        let (a, b) = (dir.path().join("a.nii"), dir.path().join("a.nii.gz"));
        volume_write(&v, &a).unwrap();
        volume_write(&v, &b).unwrap();
        assert_eq!(volume_read(&a).unwrap(), v);
        assert_eq!(volume_read(&b).unwrap(), v);
        let bytes = fs::read(&a).unwrap();
        assert_eq!(&bytes[344..348], b"n+1\0");
        assert_ne!(fs::read(&b).unwrap(), bytes);
    }

    #[test]
    fn mask_round_trip_is_uint8() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(vec![0.0, 1.0, 1.0, 0.0], [2, 2, 1], [1.0; 3], Modality::Mask).unwrap();
        let p = dir.path().join("m.nii");
        volume_write(&v, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 352 + 4);
        assert_eq!(volume_read(&p).unwrap(), v);
    }

    fn handmade(datatype: i16, payload: &[u8], slope: f32, inter: f32) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        h[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (i, d) in [3i16, 2, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        h[70..72].copy_from_slice(&datatype.to_le_bytes());
        for i in 0..4 {
            h[76 + 4 * i..80 + 4 * i].copy_from_slice(&1f32.to_le_bytes());
        }
        h[108..112].copy_from_slice(&352f32.to_le_bytes());
        h[112..116].copy_from_slice(&slope.to_le_bytes());
        h[116..120].copy_from_slice(&inter.to_le_bytes());
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn scaling_is_applied() {
        let payload: Vec<u8> = [3i16, -2].iter().flat_map(|v| v.to_le_bytes()).collect();
        let v = decode(&handmade(DT_INT16, &payload, 2.0, 1.0)).unwrap();
        assert_eq!(v.data, vec![7.0, -3.0]);
        let payload: Vec<u8> = [1.5f64, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(
            decode(&handmade(DT_FLOAT64, &payload, 0.0, 0.0)).unwrap().data,
            vec![1.5, 2.0]
        );
    }

    #[test]
    fn zero_int16_volume() {
        let mut bytes = handmade(DT_INT16, &[0u8; 2 * 4096], 1.0, 0.0);
        for (i, d) in [3i16, 16, 16, 16].iter().enumerate() {
            bytes[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
        }
        let v = decode(&bytes).unwrap();
        assert_eq!(v.dims, [16; 3]);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_malformed_files() {
        let good = handmade(DT_INT16, &[0u8; 4], 1.0, 0.0);
        let mut bad = good.clone();
        bad[344] = b'x';
        assert!(decode(&bad).unwrap_err().contains("magic"));
        let mut bad = good.clone();
        bad[70..72].copy_from_slice(&128i16.to_le_bytes());
        assert!(decode(&bad).unwrap_err().contains("datatype"));
        assert!(decode(&good[..354]).unwrap_err().contains("truncated"));
        assert!(decode(&good[..100]).is_err());
    }
}
