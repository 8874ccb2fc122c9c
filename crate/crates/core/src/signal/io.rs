//! Binary file formats: raw recordings and segment caches.
//!
//! Both formats are little-endian with fixed 16-byte magic headers.
//!
//! Recording file:
//! `"ECGRECORDING0001"` | fs: f64 | count: u64 | samples: f64 × count
//!
//! Segment cache:
//! `"ECGSEGCACHE00001"` | width: u64 | count: u64 | per segment
//! (subject key: u64 | label: u8 | values: f64 × width)
//!
//! The cache stores subjects as 64-bit FNV-1a keys of their ids; reading a
//! cache yields segments whose subject id is the key in hex, which the
//! writer recognizes and passes through, so caches round-trip losslessly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EcgRecording, Segment, SignalError};

const REC_MAGIC: &[u8; 16] = b"ECGRECORDING0001";
const SEG_MAGIC: &[u8; 16] = b"ECGSEGCACHE00001";

/// 64-bit FNV-1a of a subject id, or the value itself when the id is
/// already a 16-digit hex key from an earlier cache round-trip.
pub fn subject_key(subject_id: &str) -> u64 {
    if subject_id.len() == 16 {
        if let Ok(v) = u64::from_str_radix(subject_id, 16) {
            return v;
        }
    }
    let mut h: u64 = 0xcbf29ce484222325;
    for b in subject_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn write_recording(path: &Path, rec: &EcgRecording) -> Result<(), SignalError> {
    rec.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(REC_MAGIC)?;
    w.write_all(&rec.fs.to_le_bytes())?;
    w.write_all(&(rec.samples.len() as u64).to_le_bytes())?;
    for v in &rec.samples {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the waveform part of a recording file. Identity and glucose come
/// from the cohort manifest, so the caller fills them in.
pub fn read_recording(path: &Path) -> Result<(f64, Vec<f64>), SignalError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)
        .map_err(|_| SignalError::Format("recording file truncated before header".into()))?;
    if &magic != REC_MAGIC {
        return Err(SignalError::Format(format!(
            "bad recording magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let fs = read_f64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        samples.push(read_f64(&mut r)?);
    }
    Ok((fs, samples))
}

pub fn write_segment_cache(path: &Path, segments: &[Segment]) -> Result<(), SignalError> {
    let width = segments.first().map(|s| s.values.len()).unwrap_or(0) as u64;
    if segments.iter().any(|s| s.values.len() as u64 != width) {
        return Err(SignalError::InvalidSpec(
            "segments in one cache must share a width".into(),
        ));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SEG_MAGIC)?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&(segments.len() as u64).to_le_bytes())?;
    for s in segments {
        w.write_all(&subject_key(&s.subject_id).to_le_bytes())?;
        w.write_all(&[s.label])?;
        for v in &s.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_segment_cache(path: &Path) -> Result<Vec<Segment>, SignalError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 16];
    r.read_exact(&mut magic)
        .map_err(|_| SignalError::Format("segment cache truncated before header".into()))?;
    if &magic != SEG_MAGIC {
        return Err(SignalError::Format(format!(
            "bad segment cache magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let width = read_u64(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let mut segments = Vec::with_capacity(count);
    for _ in 0..count {
        let key = read_u64(&mut r)?;
        let mut label = [0u8; 1];
        r.read_exact(&mut label)
            .map_err(|_| SignalError::Format("segment cache truncated mid-record".into()))?;
        if label[0] > 1 {
            return Err(SignalError::Format(format!("label byte {} not 0/1", label[0])));
        }
        let mut values = Vec::with_capacity(width);
        for _ in 0..width {
            values.push(read_f64(&mut r)?);
        }
        segments.push(Segment {
            subject_id: format!("{key:016x}"),
            values,
            label: label[0],
        });
    }
    Ok(segments)
}

fn read_f64(r: &mut impl Read) -> Result<f64, SignalError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| SignalError::Format("file truncated".into()))?;
    Ok(f64::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64, SignalError> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| SignalError::Format("file truncated".into()))?;
    Ok(u64::from_le_bytes(buf))
}
