//! Segment CSV, segment/cohort binary containers and peak-list CSV.
//!
//! Segment CSV: each segment is a block of `# key=value` comment lines
//! (`rate`, `subject_id`), a header `time,<channel...>` and one row per
//! sample. Values carry nine decimal places. Blocks are concatenated.
//!
//! Binary containers are little-endian. Sample arrays are 32-bit floats.
//! See `docs/formats.md` for the byte layout.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Demographics, PairedRecord, SignalSegment, Truth, LEAD_NAMES};

pub const COHORT_MAGIC: &[u8; 4] = b"P2ES";
pub const SEGMENTS_MAGIC: &[u8; 4] = b"P2SG";
pub const FORMAT_VERSION: u32 = 1;

/// Writes segments as CSV blocks.
pub fn write_segments_csv<W: Write>(segments: &[SignalSegment], mut out: W) -> Result<()> {
    for seg in segments {
        writeln!(out, "# rate={}", seg.rate)?;
        writeln!(out, "# subject_id={}", seg.subject_id)?;
        writeln!(out, "time,{}", seg.channel_names.join(","))?;
        for i in 0..seg.len() {
            write!(out, "{:.9}", i as f64 / seg.rate)?;
            for ch in &seg.samples {
                write!(out, ",{:.9}", ch[i])?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[derive(Default)]
struct Block {
    rate: Option<f64>,
    subject_id: String,
    names: Option<Vec<String>>,
    columns: Vec<Vec<f64>>,
}

impl Block {
    fn finish(self, out: &mut Vec<SignalSegment>) -> Result<()> {
        let Some(names) = self.names else {
            return Ok(());
        };
        let rate = self
            .rate
            .ok_or_else(|| Error::format("segment block without `# rate=` line"))?;
        out.push(SignalSegment::new(self.columns, rate, names, self.subject_id)?);
        Ok(())
    }
}

fn check_header(names: &[String]) -> Result<()> {
    if names.len() == 1 {
        return Ok(());
    }
    let expected: &[&str] = if names.len() <= 6 && names.iter().all(|n| n.starts_with('V')) {
        &LEAD_NAMES[6..]
    } else {
        &LEAD_NAMES
    };
    if let Some(missing) = expected.iter().find(|l| !names.iter().any(|n| n == *l)) {
        return Err(Error::format(format!("missing lead column {missing}")));
    }
    Ok(())
}

/// Reads CSV segment blocks. An empty input yields an empty list.
pub fn read_segments_csv<R: Read>(input: R) -> Result<Vec<SignalSegment>> {
    let mut out = Vec::new();
    let mut block = Block::default();
    for (lineno, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            if block.names.is_some() {
                std::mem::take(&mut block).finish(&mut out)?;
            }
            if let Some((k, v)) = meta.trim().split_once('=') {
                match k.trim() {
                    "rate" => {
                        block.rate = Some(v.trim().parse().map_err(|_| {
                            Error::format(format!("line {}: bad rate `{v}`", lineno + 1))
                        })?)
                    }
                    "subject_id" => block.subject_id = v.trim().to_string(),
                    _ => {}
                }
            }
            continue;
        }
        if block.names.is_none() {
            let mut cols = line.split(',').map(|s| s.trim().to_string());
            if cols.next().as_deref() != Some("time") {
                return Err(Error::format(format!(
                    "line {}: expected header starting with `time`",
                    lineno + 1
                )));
            }
            let names: Vec<String> = cols.collect();
            check_header(&names)?;
            block.columns = vec![Vec::new(); names.len()];
            block.names = Some(names);
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != block.columns.len() + 1 {
            return Err(Error::format(format!(
                "line {}: expected {} fields, got {}",
                lineno + 1,
                block.columns.len() + 1,
                fields.len()
            )));
        }
        for (col, f) in block.columns.iter_mut().zip(&fields[1..]) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad number `{f}`", lineno + 1)))?;
            if !v.is_finite() {
                return Err(Error::format(format!("line {}: non-finite value", lineno + 1)));
            }
            col.push(v);
        }
    }
    block.finish(&mut out)?;
    Ok(out)
}

/// Little-endian writer helpers.
struct Le<W: Write>(W);

impl<W: Write> Le<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f32(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&(v as f32).to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        Ok(self.0.write_all(s.as_bytes())?)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format("unexpected end of binary data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(self.take(4)?.try_into().unwrap())))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8"))
    }
}

fn put_segment<W: Write>(w: &mut Le<W>, s: &SignalSegment) -> Result<()> {
    w.str(&s.subject_id)?;
    w.f64(s.rate)?;
    w.u32(s.channels() as u32)?;
    for name in &s.channel_names {
        w.str(name)?;
    }
    w.u32(s.len() as u32)?;
    for ch in &s.samples {
        for &v in ch {
            w.f32(v)?;
        }
    }
    Ok(())
}

fn get_segment(c: &mut Cursor) -> Result<SignalSegment> {
    let subject = c.str()?;
    let rate = c.f64()?;
    let channels = c.u32()? as usize;
    if !matches!(channels, 1 | 6 | 12) {
        return Err(Error::format(format!("wrong channel count {channels}")));
    }
    let names = (0..channels).map(|_| c.str()).collect::<Result<Vec<_>>>()?;
    let n = c.u32()? as usize;
    let samples = (0..channels)
        .map(|_| (0..n).map(|_| c.f32()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    SignalSegment::new(samples, rate, names, subject)
}

fn check_magic(c: &mut Cursor, magic: &[u8; 4]) -> Result<()> {
    if c.take(4)? != magic {
        return Err(Error::format("bad magic"));
    }
    let v = c.u32()?;
    if v != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported format version {v}")));
    }
    Ok(())
}

pub fn encode_segments(segments: &[SignalSegment]) -> Result<Vec<u8>> {
    let mut w = Le(Vec::new());
    w.0.extend_from_slice(SEGMENTS_MAGIC);
    w.u32(FORMAT_VERSION)?;
    w.u64(segments.len() as u64)?;
    for s in segments {
        put_segment(&mut w, s)?;
    }
    Ok(w.0)
}

pub fn decode_segments(buf: &[u8]) -> Result<Vec<SignalSegment>> {
    if buf.is_empty() {
        return Ok(Vec::new());
    }
    let mut c = Cursor { buf, pos: 0 };
    check_magic(&mut c, SEGMENTS_MAGIC)?;
    let n = c.u64()? as usize;
    (0..n).map(|_| get_segment(&mut c)).collect()
}

/// Writes segments; `.csv` paths get text, anything else binary.
pub fn write_segments(segments: &[SignalSegment], path: &Path) -> Result<()> {
    if is_csv(path) {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        write_segments_csv(segments, &mut f)?;
        f.flush()?;
        Ok(())
    } else {
        Ok(fs::write(path, encode_segments(segments)?)?)
    }
}

pub fn read_segments(path: &Path) -> Result<Vec<SignalSegment>> {
    if is_csv(path) {
        read_segments_csv(fs::File::open(path)?)
    } else {
        decode_segments(&fs::read(path)?)
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn put_record<W: Write>(w: &mut Le<W>, r: &PairedRecord) -> Result<()> {
    put_segment(w, &r.ppg)?;
    put_segment(w, &r.ecg)?;
    let d = &r.demographics;
    w.f64(d.age)?;
    w.u8(d.sex)?;
    w.u32(d.flags.len() as u32)?;
    for &f in &d.flags {
        w.u8(u8::from(f))?;
    }
    match &r.truth {
        None => w.u8(0)?,
        Some(t) => {
            w.u8(1)?;
            w.u32(t.group as u32)?;
            w.u32(t.r_peaks.len() as u32)?;
            for &p in &t.r_peaks {
                w.u32(p as u32)?;
            }
            w.u32(t.lead_gains.len() as u32)?;
            for &g in &t.lead_gains {
                w.f64(g)?;
            }
            w.f64(t.ppg_amplitude)?;
            w.f64(t.ppg_delay)?;
            w.f64(t.ppg_diastolic_slope)?;
            w.f64(t.heart_rate_bpm)?;
        }
    }
    Ok(())
}

fn get_record(c: &mut Cursor) -> Result<PairedRecord> {
    let ppg = get_segment(c)?;
    let ecg = get_segment(c)?;
    let age = c.f64()?;
    let sex = c.u8()?;
    let nf = c.u32()? as usize;
    let flags = (0..nf).map(|_| Ok(c.u8()? != 0)).collect::<Result<Vec<_>>>()?;
    let truth = match c.u8()? {
        0 => None,
        1 => {
            let group = c.u32()? as usize;
            let np = c.u32()? as usize;
            let r_peaks = (0..np).map(|_| Ok(c.u32()? as usize)).collect::<Result<_>>()?;
            let ng = c.u32()? as usize;
            let lead_gains = (0..ng).map(|_| c.f64()).collect::<Result<_>>()?;
            Some(Truth {
                group,
                r_peaks,
                lead_gains,
                ppg_amplitude: c.f64()?,
                ppg_delay: c.f64()?,
                ppg_diastolic_slope: c.f64()?,
                heart_rate_bpm: c.f64()?,
            })
        }
        t => return Err(Error::format(format!("bad truth tag {t}"))),
    };
    PairedRecord::new(ppg, ecg, Demographics { age, sex, flags }, truth)
}

/// Cohort container: magic, version, record count, then one
/// length-prefixed frame per record.
pub fn encode_cohort(records: &[PairedRecord]) -> Result<Vec<u8>> {
    let mut w = Le(Vec::new());
    w.0.extend_from_slice(COHORT_MAGIC);
    w.u32(FORMAT_VERSION)?;
    w.u64(records.len() as u64)?;
    for r in records {
        let mut frame = Le(Vec::new());
        put_record(&mut frame, r)?;
        w.u64(frame.0.len() as u64)?;
        w.0.extend_from_slice(&frame.0);
    }
    Ok(w.0)
}

pub fn decode_cohort(buf: &[u8]) -> Result<Vec<PairedRecord>> {
    let mut c = Cursor { buf, pos: 0 };
    check_magic(&mut c, COHORT_MAGIC)?;
    let n = c.u64()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u64()? as usize;
        let mut frame = Cursor { buf: c.take(len)?, pos: 0 };
        out.push(get_record(&mut frame)?);
        if frame.pos != len {
            return Err(Error::format("trailing bytes in record frame"));
        }
    }
    Ok(out)
}

pub fn write_cohort(records: &[PairedRecord], path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_cohort(records)?)?)
}

pub fn read_cohort(path: &Path) -> Result<Vec<PairedRecord>> {
    decode_cohort(&fs::read(path)?)
}

/// `segment_id,lead,index` rows; `peaks[segment][lead]`.
pub fn write_peaks_csv<W: Write>(peaks: &[Vec<Vec<usize>>], names: &[&str], mut out: W) -> Result<()> {
    writeln!(out, "segment_id,lead,index")?;
    for (sid, leads) in peaks.iter().enumerate() {
        for (lead, idx) in leads.iter().enumerate() {
            for i in idx {
                writeln!(out, "{sid},{},{i}", names.get(lead).copied().unwrap_or("?"))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::lead_names;

    fn seg12(seed: u64) -> SignalSegment {
        let samples = (0..12)
            .map(|c| {
                (0..20)
                    .map(|i| ((i * 31 + c * 7) as f64 * 0.37 + seed as f64).sin() * 3.0)
                    .collect()
            })
            .collect();
        SignalSegment::ecg12(samples, 125.0, format!("sub{seed}")).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let segs = vec![seg12(1), seg12(2), SignalSegment::ppg(vec![0.1, -2.0, 3.3], 125.0, "p").unwrap()];
        let mut buf = Vec::new();
        write_segments_csv(&segs, &mut buf).unwrap();
        let back = read_segments_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in segs.iter().zip(&back) {
            assert_eq!(a.channel_names, b.channel_names);
            assert_eq!(a.subject_id, b.subject_id);
            for (x, y) in a.samples.iter().flatten().zip(b.samples.iter().flatten()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn csv_missing_lead_is_named() {
        let mut names = lead_names();
        names.retain(|n| n != "V3");
        let text = format!("# rate=125\ntime,{}\n", names.join(","));
        let err = read_segments_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("V3"), "{err}");
    }

    #[test]
    fn csv_empty_and_bad_values() {
        assert!(read_segments_csv(&b""[..]).unwrap().is_empty());
        assert!(read_segments_csv(&b"# rate=125\ntime,PPG\n0,nan\n"[..]).is_err());
        assert!(read_segments_csv(&b"# rate=125\nfoo,PPG\n"[..]).is_err());
        assert!(read_segments_csv(&b"time,PPG\n0,1\n"[..]).is_err());
    }

    #[test]
    fn binary_is_bit_exact_after_first_write() {
        let segs = vec![seg12(3), seg12(4)];
        let bytes = encode_segments(&segs).unwrap();
        let back = decode_segments(&bytes).unwrap();
        assert_eq!(encode_segments(&back).unwrap(), bytes);
        for (x, y) in segs[0].samples.iter().flatten().zip(back[0].samples.iter().flatten()) {
            assert_eq!(*y, f64::from(*x as f32));
        }
        assert!(decode_segments(&[]).unwrap().is_empty());
        assert!(decode_segments(b"XXXX\x01\0\0\0").is_err());
    }

    #[test]
    fn cohort_round_trip() {
        let ppg = SignalSegment::ppg(vec![0.5; 20], 125.0, "sub3").unwrap();
        let rec = PairedRecord::new(
            ppg,
            seg12(3),
            Demographics { age: 61.5, sex: 1, flags: vec![true, false, true] },
            Some(Truth {
                group: 2,
                r_peaks: vec![3, 15],
                lead_gains: vec![0.5; 12],
                ppg_amplitude: 1.0,
                ppg_delay: 0.2,
                ppg_diastolic_slope: -3.0,
                heart_rate_bpm: 72.0,
            }),
        )
        .unwrap();
        let bytes = encode_cohort(&[rec.clone(), rec]).unwrap();
        let back = decode_cohort(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].truth, back[0].truth);
        assert_eq!(encode_cohort(&back).unwrap(), bytes);
        assert!(decode_cohort(&bytes[..bytes.len() - 3]).is_err());
    }
}
