use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{check_hr_range, GroundTruth, IngestError, LandmarkFrame, LandmarkPoint, RgbTrace, TraceSet};

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })
}

fn io_err(path: &str) -> impl Fn(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.to_string(), source }
}

struct Columns(Vec<usize>);

impl Columns {
    fn resolve(headers: &csv::StringRecord, names: &[&'static str]) -> Result<Self, IngestError> {
        let mut idx = Vec::with_capacity(names.len());
        for &name in names {
            let pos = headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or(IngestError::MissingColumn(name))?;
            idx.push(pos);
        }
        Ok(Self(idx))
    }

    fn field<'r>(&self, rec: &'r csv::StringRecord, i: usize, line: u64) -> Result<&'r str, IngestError> {
        rec.get(self.0[i]).map(str::trim).ok_or_else(|| IngestError::MalformedRow {
            line,
            reason: format!("expected at least {} fields, found {}", self.0[i] + 1, rec.len()),
        })
    }
}

fn parse<T: std::str::FromStr>(s: &str, line: u64, what: &str) -> Result<T, IngestError> {
    s.parse().map_err(|_| IngestError::MalformedRow { line, reason: format!("cannot parse {what} `{s}`") })
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(r)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn csv_err(e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    IngestError::MalformedRow { line, reason: e.to_string() }
}

/// Parses a track CSV (`frame,point_id,x,y`).
pub fn read_landmark_track<R: Read>(input: R) -> Result<Vec<LandmarkFrame>, IngestError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = Columns::resolve(&headers, &["frame", "point_id", "x", "y"])?;

    let mut frames: Vec<LandmarkFrame> = Vec::new();
    let mut seen: HashSet<u32> = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        let frame: usize = parse(cols.field(&rec, 0, line)?, line, "frame")?;
        let id: u32 = parse(cols.field(&rec, 1, line)?, line, "point_id")?;
        let x: f64 = parse(cols.field(&rec, 2, line)?, line, "x")?;
        let y: f64 = parse(cols.field(&rec, 3, line)?, line, "y")?;
        if !(x.is_finite() && y.is_finite()) {
            return Err(IngestError::MalformedRow { line, reason: "non-finite coordinate".into() });
        }
        match frames.last_mut() {
            Some(last) if last.frame_idx == frame => {}
            Some(last) if last.frame_idx > frame => {
                return Err(IngestError::NonMonotoneFrame { line, frame, previous: last.frame_idx });
            }
            _ => {
                frames.push(LandmarkFrame::new(frame, Vec::new()));
                seen.clear();
            }
        }
        if !seen.insert(id) {
            return Err(IngestError::DuplicatePoint { line, frame, point_id: id });
        }
        frames.last_mut().expect("frame pushed above").points.push(LandmarkPoint { id, x, y });
    }
    Ok(frames)
}

pub fn load_landmark_track(path: impl AsRef<Path>) -> Result<Vec<LandmarkFrame>, IngestError> {
    let path = path.as_ref();
    read_landmark_track(open(path)?)
}

pub fn write_landmark_track<W: Write>(out: W, frames: &[LandmarkFrame]) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let e = |e: csv::Error| IngestError::MalformedRow { line: 0, reason: e.to_string() };
    w.write_record(["frame", "point_id", "x", "y"]).map_err(e)?;
    for f in frames {
        for p in &f.points {
            w.write_record([f.frame_idx.to_string(), p.id.to_string(), p.x.to_string(), p.y.to_string()])
                .map_err(e)?;
        }
    }
    w.flush().map_err(io_err("<track>"))
}

/// Parses an intensity CSV (`frame,point_id,r,g,b`) sampled at `fps`.
///
/// Rows may come in any order; each point's frames must be contiguous and
/// every point must have the same number of samples.
pub fn read_rgb_traces<R: Read>(input: R, fps: f64) -> Result<TraceSet, IngestError> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(IngestError::InvalidTrace(format!("fps must be positive, got {fps}")));
    }
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = Columns::resolve(&headers, &["frame", "point_id", "r", "g", "b"])?;

    let mut rows: BTreeMap<u32, Vec<(usize, [f64; 3], u64)>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        let frame: usize = parse(cols.field(&rec, 0, line)?, line, "frame")?;
        let id: u32 = parse(cols.field(&rec, 1, line)?, line, "point_id")?;
        let mut rgb = [0.0; 3];
        for (k, (slot, name)) in rgb.iter_mut().zip(["r", "g", "b"]).enumerate() {
            let v: f64 = parse(cols.field(&rec, 2 + k, line)?, line, name)?;
            if !v.is_finite() {
                return Err(IngestError::NonFinite { point_id: id, frame, channel: name });
            }
            *slot = v;
        }
        rows.entry(id).or_default().push((frame, rgb, line));
    }

    let mut traces = TraceSet::new();
    let mut expected_len: Option<usize> = None;
    for (id, mut samples) in rows {
        samples.sort_by_key(|s| s.0);
        let start = samples[0].0;
        for (i, w) in samples.windows(2).enumerate() {
            if w[1].0 == w[0].0 {
                return Err(IngestError::DuplicatePoint { line: w[1].2, frame: w[1].0, point_id: id });
            }
            if w[1].0 != start + i + 1 {
                return Err(IngestError::NonContiguous { point_id: id, expected: start + i + 1, found: w[1].0 });
            }
        }
        match expected_len {
            None => expected_len = Some(samples.len()),
            Some(n) if n != samples.len() => {
                return Err(IngestError::Ragged { point_id: id, len: samples.len(), expected: n });
            }
            _ => {}
        }
        let r = samples.iter().map(|s| s.1[0]).collect();
        let g = samples.iter().map(|s| s.1[1]).collect();
        let b = samples.iter().map(|s| s.1[2]).collect();
        traces.insert(id, RgbTrace::new(id, fps, start, r, g, b)?);
    }
    Ok(traces)
}

pub fn load_rgb_traces(path: impl AsRef<Path>, fps: f64) -> Result<TraceSet, IngestError> {
    let path = path.as_ref();
    read_rgb_traces(open(path)?, fps)
}

/// Writes traces frame-major (all points of frame 0, then frame 1, ...).
pub fn write_rgb_traces<W: Write>(out: W, traces: &TraceSet) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let e = |e: csv::Error| IngestError::MalformedRow { line: 0, reason: e.to_string() };
    w.write_record(["frame", "point_id", "r", "g", "b"]).map_err(e)?;
    let first = traces.values().map(|t| t.start_frame).min().unwrap_or(0);
    let last = traces.values().map(|t| t.end_frame()).max().unwrap_or(0);
    for frame in first..last {
        for t in traces.values() {
            if frame < t.start_frame || frame >= t.end_frame() {
                continue;
            }
            let i = frame - t.start_frame;
            w.write_record([
                frame.to_string(),
                t.point_id.to_string(),
                t.r[i].to_string(),
                t.g[i].to_string(),
                t.b[i].to_string(),
            ])
            .map_err(e)?;
        }
    }
    w.flush().map_err(io_err("<traces>"))
}

/// Parses a ground-truth CSV (`source_id,hr_bpm`). Repeated source ids form a series.
pub fn read_ground_truth<R: Read>(input: R) -> Result<Vec<GroundTruth>, IngestError> {
    let mut rdr = reader(input);
    let headers = rdr.headers().map_err(csv_err)?.clone();
    let cols = Columns::resolve(&headers, &["source_id", "hr_bpm"])?;
    let mut order: Vec<String> = Vec::new();
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = record_line(&rec);
        let id = cols.field(&rec, 0, line)?.to_string();
        let hr: f64 = parse(cols.field(&rec, 1, line)?, line, "hr_bpm")?;
        check_hr_range(hr)?;
        if !values.contains_key(&id) {
            order.push(id.clone());
        }
        values.entry(id).or_default().push(hr);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let hr_bpm = values.remove(&id).unwrap_or_default();
            GroundTruth { source_id: id, hr_bpm }
        })
        .collect())
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruth>, IngestError> {
    let path = path.as_ref();
    read_ground_truth(open(path)?)
}

pub fn write_ground_truth<W: Write>(out: W, truths: &[GroundTruth]) -> Result<(), IngestError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let e = |e: csv::Error| IngestError::MalformedRow { line: 0, reason: e.to_string() };
    w.write_record(["source_id", "hr_bpm"]).map_err(e)?;
    for t in truths {
        for hr in &t.hr_bpm {
            w.write_record([t.source_id.clone(), hr.to_string()]).map_err(e)?;
        }
    }
    w.flush().map_err(io_err("<truth>"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_one_frame() {
        let src = "frame,point_id,x,y\n0,1,10.0,20.0\n0,2,30.0,40.0\n";
        let frames = read_landmark_track(src.as_bytes()).unwrap();
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].points.len(), 2);
        assert_eq!(frames[0].points[1], LandmarkPoint { id: 2, x: 30.0, y: 40.0 });
    }

    #[test]
    fn header_only_is_empty() {
        assert!(read_landmark_track("frame,point_id,x,y\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn full_window_at_61_fps() {
        let mut src = String::from("frame,point_id,x,y\n");
        for f in 0..1830 {
            src.push_str(&format!("{f},0,1.5,2.5\n"));
        }
        let frames = read_landmark_track(src.as_bytes()).unwrap();
        assert_eq!(frames.len(), 1830);
        assert!((frames.len() as f64 / 61.0 - 30.0).abs() < 1e-12);
    }

    #[test]
    fn malformed_row_reports_line() {
        let src = "frame,point_id,x,y\n0,1,1,2\n0,2,abc,2\n";
        match read_landmark_track(src.as_bytes()).unwrap_err() {
            IngestError::MalformedRow { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn non_monotone_and_duplicate() {
        let src = "frame,point_id,x,y\n1,1,1,2\n0,1,1,2\n";
        assert!(matches!(
            read_landmark_track(src.as_bytes()),
            Err(IngestError::NonMonotoneFrame { frame: 0, previous: 1, .. })
        ));
        let src = "frame,point_id,x,y\n0,1,1,2\n0,1,3,4\n";
        assert!(matches!(
            read_landmark_track(src.as_bytes()),
            Err(IngestError::DuplicatePoint { point_id: 1, frame: 0, .. })
        ));
    }

    fn trace_csv(points: u32, frames: usize) -> String {
        let mut s = String::from("frame,point_id,r,g,b\n");
        for f in 0..frames {
            for p in 0..points {
                s.push_str(&format!("{f},{p},{},{},{}\n", 110 + p, 120.5, 100.25));
            }
        }
        s
    }

    #[test]
    fn three_points_hundred_frames() {
        let traces = read_rgb_traces(trace_csv(3, 100).as_bytes(), 61.0).unwrap();
        assert_eq!(traces.len(), 3);
        assert!(traces.values().all(|t| t.len() == 100 && t.fps == 61.0));
    }

    #[test]
    fn duration_of_thirty_second_trace() {
        let traces = read_rgb_traces(trace_csv(1, 1830).as_bytes(), 61.0).unwrap();
        // 1830 / 61 = 30 exactly; compare against integer arithmetic.
        let expected = (1830 / 61) as f64 + (1830 % 61) as f64 / 61.0;
        assert_eq!(traces[&0].duration_s(), expected);
    }

    #[test]
    fn nan_names_point_and_frame() {
        let src = "frame,point_id,r,g,b\n0,4,1,1,1\n1,4,1,NaN,1\n";
        match read_rgb_traces(src.as_bytes(), 61.0).unwrap_err() {
            IngestError::NonFinite { point_id, frame, channel } => {
                assert_eq!((point_id, frame, channel), (4, 1, "g"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn ragged_and_missing_column() {
        let src = "frame,point_id,r,g,b\n0,0,1,1,1\n1,0,1,1,1\n0,1,1,1,1\n";
        assert!(matches!(read_rgb_traces(src.as_bytes(), 61.0), Err(IngestError::Ragged { point_id: 1, .. })));
        let src = "frame,point_id,r,b\n0,0,1,1\n";
        assert!(matches!(read_rgb_traces(src.as_bytes(), 61.0), Err(IngestError::MissingColumn("g"))));
    }

    #[test]
    fn ground_truth_series_and_range() {
        let src = "source_id,hr_bpm\na,70\nb,80\na,74\n";
        let gt = read_ground_truth(src.as_bytes()).unwrap();
        assert_eq!(gt.len(), 2);
        assert_eq!(gt[0].source_id, "a");
        assert_eq!(gt[0].mean_bpm(), 72.0);
        assert!(read_ground_truth("source_id,hr_bpm\na,300\n".as_bytes()).is_err());
    }
}
