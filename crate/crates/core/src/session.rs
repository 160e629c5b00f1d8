//! Persistence of raw IMU recordings.
//!
//! A session on disk is three sibling UTF-8 files sharing a basename:
//!
//! * `<base>.csv`: header `timestamp,ax,ay,az,gx,gy,gz`, one row per sample.
//! * `<base>.markers`: one end-of-rep timestamp per LF-terminated line.
//! * `<base>.meta`: `key=value` lines.
//!
//! Numbers are written as the shortest decimal that parses back to the same
//! `f64`, so a write/read cycle is exact.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "timestamp,ax,ay,az,gx,gy,gz";

/// One raw IMU reading. Acceleration in m/s², angular velocity in rad/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    /// Seconds since the start of the recording.
    pub t: f64,
    /// `[ax, ay, az, gx, gy, gz]`
    pub values: [f64; 6],
}

impl RawSample {
    pub fn new(t: f64, values: [f64; 6]) -> Self {
        Self { t, values }
    }

    pub fn accel(&self) -> [f64; 3] {
        [self.values[0], self.values[1], self.values[2]]
    }

    pub fn gyro(&self) -> [f64; 3] {
        [self.values[3], self.values[4], self.values[5]]
    }
}

/// A recorded set: samples, end-of-rep markers (seconds) and free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Session {
    pub samples: Vec<RawSample>,
    pub markers: Vec<f64>,
    pub meta: BTreeMap<String, String>,
}

impl Session {
    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }

    /// Checks ordering, finiteness and marker placement.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if !s.t.is_finite() || s.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("sample {i} has a non-finite field")));
            }
            if i > 0 && s.t < self.samples[i - 1].t {
                return Err(Error::validation(format!(
                    "sample {i} at t={} precedes t={}",
                    s.t,
                    self.samples[i - 1].t
                )));
            }
        }
        for (i, m) in self.markers.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::validation(format!("marker {i} is not finite")));
            }
            if i > 0 && *m <= self.markers[i - 1] {
                return Err(Error::validation(format!("marker {i} is not strictly increasing")));
            }
        }
        if let (Some(first), Some(last)) = (self.samples.first(), self.samples.last()) {
            if let Some(m) = self.markers.iter().find(|m| **m < first.t || **m > last.t) {
                return Err(Error::validation(format!(
                    "marker {m} outside recording span [{}, {}]",
                    first.t, last.t
                )));
            }
        }
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n', '\r']) || v.contains(['\n', '\r']) {
                return Err(Error::validation(format!("metadata entry {k:?} cannot be stored")));
            }
        }
        Ok(())
    }
}

/// Shortest representation that parses back to exactly `v` (`1.0`, `2.5`,
/// `0.01`, `1e-7`). Epoch-second timestamps keep their sub-millisecond part.
pub fn format_number(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the CSV body, marker list and metadata to three sinks.
/// Returns the total number of bytes written.
pub fn encode_session<C, M, D>(session: &Session, csv: C, markers: M, meta: D) -> Result<usize>
where
    C: Write,
    M: Write,
    D: Write,
{
    session.validate()?;
    let mut csv = CountingWriter::new(BufWriter::new(csv));
    writeln!(csv, "{CSV_HEADER}")?;
    for s in &session.samples {
        let mut line = format_number(s.t);
        for v in s.values {
            line.push(',');
            line.push_str(&format_number(v));
        }
        writeln!(csv, "{line}")?;
    }
    csv.flush()?;

    let mut mk = CountingWriter::new(BufWriter::new(markers));
    for m in &session.markers {
        writeln!(mk, "{}", format_number(*m))?;
    }
    mk.flush()?;

    let mut md = CountingWriter::new(BufWriter::new(meta));
    for (k, v) in &session.meta {
        writeln!(md, "{k}={v}")?;
    }
    md.flush()?;

    Ok(csv.count + mk.count + md.count)
}

/// Parses the CSV stream into a session with no markers or metadata.
pub fn decode_session<R: Read>(source: R) -> Result<Session> {
    let reader = BufReader::new(source);
    let mut lines = reader.lines();
    match lines.next() {
        Some(header) => {
            let header = header?;
            if header.trim_end_matches('\r') != CSV_HEADER {
                return Err(Error::format(format!(
                    "missing header: expected `{CSV_HEADER}`, found `{header}`"
                )));
            }
        }
        None => return Err(Error::format("missing header: empty input")),
    }

    let mut samples: Vec<RawSample> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 7 columns, found {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 7];
        for (slot, (name, field)) in nums.iter_mut().zip(CSV_HEADER.split(',').zip(&fields)) {
            *slot = parse_finite(field, line_no, name)?;
        }
        let sample = RawSample::new(nums[0], [nums[1], nums[2], nums[3], nums[4], nums[5], nums[6]]);
        if let Some(prev) = samples.last() {
            if sample.t < prev.t {
                return Err(Error::validation(format!(
                    "line {line_no}: timestamp {} decreases (previous {})",
                    sample.t, prev.t
                )));
            }
        }
        samples.push(sample);
    }
    Ok(Session { samples, ..Session::default() })
}

/// Parses a `.markers` stream.
pub fn decode_markers<R: Read>(source: R) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(parse_finite(line, idx + 1, "marker")?);
    }
    Ok(out)
}

/// Parses a `.meta` stream of `key=value` lines.
pub fn decode_meta<R: Read>(source: R) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            message: "expected key=value".into(),
        })?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn parse_finite(field: &str, line: usize, name: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("field `{name}` is not numeric: {field:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, message: format!("field `{name}` is not finite") });
    }
    Ok(v)
}

/// Paths of the three files making up the session stored at `base`.
pub fn session_paths(base: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        base.with_extension("csv"),
        base.with_extension("markers"),
        base.with_extension("meta"),
    )
}

/// Writes `<base>.csv`, `<base>.markers` and `<base>.meta`.
pub fn write_session(base: &Path, session: &Session) -> Result<usize> {
    if let Some(dir) = base.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let (csv, markers, meta) = session_paths(base);
    encode_session(session, File::create(csv)?, File::create(markers)?, File::create(meta)?)
}

/// Reads a session triplet. Missing marker or metadata files are treated as empty.
pub fn read_session(base: &Path) -> Result<Session> {
    let (csv, markers, meta) = session_paths(base);
    let mut session = decode_session(File::open(&csv)?)?;
    if markers.exists() {
        session.markers = decode_markers(File::open(&markers)?)?;
    }
    if meta.exists() {
        session.meta = decode_meta(File::open(&meta)?)?;
    }
    session.validate()?;
    Ok(session)
}

/// Basenames (without extension) of every `*.csv` session in `dir`, sorted.
pub fn list_sessions(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            out.push(path.with_extension(""));
        }
    }
    out.sort();
    Ok(out)
}

struct CountingWriter<W> {
    inner: W,
    count: usize,
}

impl<W: Write> CountingWriter<W> {
    fn new(inner: W) -> Self {
        Self { inner, count: 0 }
    }
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.count += n;
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode_to_strings(s: &Session) -> (String, String, String) {
        let (mut a, mut b, mut c) = (Vec::new(), Vec::new(), Vec::new());
        encode_session(s, &mut a, &mut b, &mut c).unwrap();
        (
            String::from_utf8(a).unwrap(),
            String::from_utf8(b).unwrap(),
            String::from_utf8(c).unwrap(),
        )
    }

    #[test]
    fn minimal_session_has_header_and_rows() {
        let s = Session {
            samples: vec![
                RawSample::new(0.0, [0.0; 6]),
                RawSample::new(0.01, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ],
            ..Default::default()
        };
        let (csv, markers, meta) = encode_to_strings(&s);
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert!(markers.is_empty());
        assert!(meta.is_empty());
    }

    #[test]
    fn markers_written_in_order() {
        let s = Session {
            samples: vec![RawSample::new(0.0, [0.0; 6]), RawSample::new(3.0, [0.0; 6])],
            markers: vec![1.0, 2.5],
            meta: BTreeMap::from([("participant".to_string(), "p01".to_string())]),
        };
        let (_, markers, meta) = encode_to_strings(&s);
        assert_eq!(markers, "1.0\n2.5\n");
        assert_eq!(meta, "participant=p01\n");
    }

    #[test]
    fn header_only_is_empty_session() {
        let s = decode_session(format!("{CSV_HEADER}\n").as_bytes()).unwrap();
        assert!(s.samples.is_empty());
    }

    #[test]
    fn row_fields_map_in_order() {
        let s = decode_session(format!("{CSV_HEADER}\n0.01,1,2,3,4,5,6\n").as_bytes()).unwrap();
        assert_eq!(s.samples, vec![RawSample::new(0.01, [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])]);
    }

    #[test]
    fn missing_header_is_format_error() {
        let err = decode_session("0.01,1,2,3,4,5,6\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(matches!(decode_session("".as_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn non_numeric_field_reports_line() {
        let err = decode_session(format!("{CSV_HEADER}\n0,1,2,3,4,5,6\n0.01,1,x,3,4,5,6\n").as_bytes())
            .unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("ay"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn wrong_column_count_rejected() {
        let err = decode_session(format!("{CSV_HEADER}\n0,1,2,3\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn shuffled_rows_name_first_offending_line() {
        let body = format!("{CSV_HEADER}\n0.00,0,0,0,0,0,0\n0.02,0,0,0,0,0,0\n0.01,0,0,0,0,0,0\n0.03,0,0,0,0,0,0\n");
        let err = decode_session(body.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn unsorted_session_refuses_to_encode() {
        let s = Session {
            samples: vec![RawSample::new(1.0, [0.0; 6]), RawSample::new(0.5, [0.0; 6])],
            ..Default::default()
        };
        let err = encode_session(&s, Vec::new(), Vec::new(), Vec::new()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn failing_sink_is_io_error() {
        struct Broken;
        impl Write for Broken {
            fn write(&mut self, _: &[u8]) -> std::io::Result<usize> {
                Err(std::io::Error::other("disk full"))
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Err(std::io::Error::other("disk full"))
            }
        }
        let s = Session { samples: vec![RawSample::new(0.0, [0.0; 6])], ..Default::default() };
        let err = encode_session(&s, Broken, Vec::new(), Vec::new()).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn number_format_is_short_and_nine_digit() {
        assert_eq!(format_number(1.0), "1.0");
        assert_eq!(format_number(0.01), "0.01");
        assert_eq!(format_number(9.80665), "9.80665");
        assert_eq!(format_number(1.234567891234), "1.234567891234");
        assert_eq!(format_number(1_760_615_210.1234567), "1760615210.1234567");
        assert_eq!(format_number(-0.5), "-0.5");
    }
}
