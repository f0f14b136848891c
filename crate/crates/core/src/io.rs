//! On-disk formats for records, annotations and dataset splits.
//!
//! Record files start with the magic `DSR1`, followed by a little-endian
//! header (`u32` channel count, `f64` sample rate, `u64` sample count, one
//! `u32`-length-prefixed UTF-8 name per channel) and the samples as `f32`,
//! channel-major. Annotations are JSON lines of
//! `{"record_id", "start", "duration", "label"}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Annotation, DatasetSplit, Event, Record};

pub const RECORD_MAGIC: &[u8; 4] = b"DSR1";

pub fn encode_record(record: &Record) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + record.data.len() * 4);
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&(record.channels() as u32).to_le_bytes());
    buf.extend_from_slice(&record.sample_rate.to_le_bytes());
    buf.extend_from_slice(&(record.samples() as u64).to_le_bytes());
    for name in &record.channel_names {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    for v in record.data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::TruncatedPayload {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_record(id: &str, bytes: &[u8]) -> Result<Record> {
    if bytes.len() < 4 {
        return Err(Error::MalformedHeader("file shorter than magic".into()));
    }
    let magic = &bytes[..4];
    if magic != RECORD_MAGIC {
        if &magic[..3] == b"DSR" {
            return Err(Error::UnknownVersion(
                String::from_utf8_lossy(magic).into_owned(),
            ));
        }
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let channels = u32::from_le_bytes(cur.array()?) as usize;
    let sample_rate = f64::from_le_bytes(cur.array()?);
    let samples = u64::from_le_bytes(cur.array()?) as usize;
    if channels == 0 || samples == 0 || !(sample_rate > 0.0 && sample_rate.is_finite()) {
        return Err(Error::MalformedHeader(format!(
            "channels={channels} samples={samples} sample_rate={sample_rate}"
        )));
    }
    let mut names = Vec::with_capacity(channels);
    for _ in 0..channels {
        let len = u32::from_le_bytes(cur.array()?) as usize;
        let raw = cur.take(len)?;
        let name = std::str::from_utf8(raw)
            .map_err(|_| Error::MalformedHeader("channel name is not UTF-8".into()))?;
        names.push(name.to_owned());
    }
    let count = channels
        .checked_mul(samples)
        .ok_or_else(|| Error::MalformedHeader("sample count overflows".into()))?;
    let payload = cur.take(count.saturating_mul(4))?;
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    let data = Array2::from_shape_vec((channels, samples), values)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Record::new(id, sample_rate, names, data)
}

pub fn write_record(path: impl AsRef<Path>, record: &Record) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_record(record))?;
    f.flush()?;
    Ok(())
}

/// Reads a record file; the record id is the file stem.
pub fn read_record(path: impl AsRef<Path>) -> Result<Record> {
    let path = path.as_ref();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_record(&id, &bytes)
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    record_id: String,
    start: f64,
    duration: f64,
    label: i64,
}

pub fn write_annotations<W: Write>(mut out: W, annotations: &[Annotation]) -> Result<()> {
    for ann in annotations {
        for e in &ann.events {
            let line = AnnotationLine {
                record_id: ann.record_id.clone(),
                start: e.start(),
                duration: e.duration,
                label: e.label as i64,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Parses annotation lines, grouping events by record in order of first
/// appearance. Blank lines are skipped.
pub fn parse_annotations<R: BufRead>(input: R) -> Result<Vec<Annotation>> {
    let mut groups: Vec<(String, Vec<Event>)> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedAnnotation {
            line: i + 1,
            reason,
        };
        let parsed: AnnotationLine =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if parsed.label < 1 || parsed.label > u32::MAX as i64 {
            return Err(malformed(format!("label {} must be >= 1", parsed.label)));
        }
        if !(parsed.duration > 0.0 && parsed.duration.is_finite() && parsed.start.is_finite()) {
            return Err(malformed(format!("invalid duration {}", parsed.duration)));
        }
        let event = Event::from_start(parsed.start, parsed.duration, parsed.label as u32);
        match groups.iter_mut().find(|(id, _)| *id == parsed.record_id) {
            Some((_, events)) => events.push(event),
            None => groups.push((parsed.record_id, vec![event])),
        }
    }
    groups
        .into_iter()
        .map(|(id, events)| Annotation::new(id, events))
        .collect()
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    parse_annotations(BufReader::new(File::open(path)?))
}

pub fn save_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write_annotations(&mut f, annotations)?;
    f.flush()?;
    Ok(())
}

pub fn read_split(path: impl AsRef<Path>) -> Result<DatasetSplit> {
    let split: DatasetSplit = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    split.validate()?;
    Ok(split)
}

pub fn write_split(path: impl AsRef<Path>, split: &DatasetSplit) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, split)?;
    f.flush()?;
    Ok(())
}
