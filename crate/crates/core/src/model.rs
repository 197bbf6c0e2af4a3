//! Frame records, candidate/filtered sets, oracle labels and their NDJSON files.
//!
//! A stream file holds one [`FrameRecord`] per line:
//!
//! ```text
//! {"frame_id":0,"timestamp_ms":0,"embedding":[0.5,-1.25],"detections":[{"class_id":2,"confidence":0.91,"bbox":[10.0,20.0,64.0,48.0]}]}
//! ```
//!
//! An optional `image_bytes` field declares the size of the image payload the
//! frame stands in for; it is omitted when zero. Oracle-label files hold
//! `{"frame_id": .., "labels": [<detection>..]}` per line.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent representation of a frame. Finite, non-empty and of non-zero norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidEmbedding("embedding has dimension 0".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidEmbedding(format!(
                "component {i} is not finite ({})",
                values[i]
            )));
        }
        if values.iter().map(|v| v * v).sum::<f64>() == 0.0 {
            return Err(Error::InvalidEmbedding("embedding has zero norm".into()));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for Embedding {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Axis-aligned box in pixels, serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.w + self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectionRepr")]
pub struct Detection {
    pub class_id: u32,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Deserialize)]
struct DetectionRepr {
    class_id: u32,
    confidence: f64,
    bbox: BBox,
}

impl TryFrom<DetectionRepr> for Detection {
    type Error = Error;

    fn try_from(r: DetectionRepr) -> Result<Self> {
        Detection::new(r.class_id, r.confidence, r.bbox)
    }
}

impl Detection {
    pub fn new(class_id: u32, confidence: f64, bbox: BBox) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidDetection(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        let coords = [bbox.x, bbox.y, bbox.w, bbox.h];
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDetection("non-finite box coordinate".into()));
        }
        if bbox.w < 0.0 || bbox.h < 0.0 {
            return Err(Error::InvalidDetection(format!(
                "negative box extent {}x{}",
                bbox.w, bbox.h
            )));
        }
        Ok(Detection {
            class_id,
            confidence,
            bbox,
        })
    }
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

/// One frame of a camera stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: u64,
    pub timestamp_ms: u64,
    pub embedding: Embedding,
    pub detections: Vec<Detection>,
    /// Declared size of the image this record stands in for.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub image_bytes: u64,
}

/// Image-level student confidence: the highest detection confidence, or 0
/// for a frame without detections.
pub fn frame_confidence(record: &FrameRecord) -> f64 {
    record
        .detections
        .iter()
        .map(|d| d.confidence)
        .fold(0.0, f64::max)
}

/// Frames buffered by the gate, in acquisition order.
#[derive(Clone, Debug, Default)]
pub struct CandidateSet {
    items: Vec<FrameRecord>,
    ids: HashSet<u64>,
    capacity: Option<usize>,
}

impl CandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        CandidateSet {
            items: Vec::with_capacity(capacity),
            ids: HashSet::with_capacity(capacity),
            capacity: Some(capacity),
        }
    }

    pub fn from_records(records: impl IntoIterator<Item = FrameRecord>) -> Result<Self> {
        let mut set = CandidateSet::new();
        for r in records {
            set.push(r)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, record: FrameRecord) -> Result<()> {
        if self.is_full() {
            return Err(Error::CapacityExceeded(self.items.len()));
        }
        if let Some(first) = self.items.first() {
            if first.embedding.dim() != record.embedding.dim() {
                return Err(Error::Dimension(
                    first.embedding.dim(),
                    record.embedding.dim(),
                ));
            }
        }
        if !self.ids.insert(record.frame_id) {
            return Err(Error::DuplicateCandidate(record.frame_id));
        }
        self.items.push(record);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.capacity.is_some_and(|c| self.items.len() >= c)
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[FrameRecord] {
        &self.items
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &Embedding> {
        self.items.iter().map(|r| &r.embedding)
    }
}

/// Frames chosen for transmission, in selection order.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredSet {
    items: Vec<FrameRecord>,
    budget: usize,
}

impl FilteredSet {
    /// Builds the set from indices into `source`. Indices must be distinct.
    pub(crate) fn from_indices(source: &CandidateSet, indices: &[usize], budget: usize) -> Self {
        debug_assert_eq!(indices.len(), budget.min(source.len()));
        FilteredSet {
            items: indices.iter().map(|&i| source.items[i].clone()).collect(),
            budget,
        }
    }

    pub fn items(&self) -> &[FrameRecord] {
        &self.items
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn frame_ids(&self) -> Vec<u64> {
        self.items.iter().map(|r| r.frame_id).collect()
    }

    pub fn into_items(self) -> Vec<FrameRecord> {
        self.items
    }
}

/// A frame id together with its detections; the line format of oracle and
/// labeled-set files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub frame_id: u64,
    pub labels: Vec<Detection>,
}

/// Teacher pseudo-labels keyed by frame id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleLabels {
    labels: BTreeMap<u64, Vec<Detection>>,
}

impl OracleLabels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame_id: u64, labels: Vec<Detection>) -> Option<Vec<Detection>> {
        self.labels.insert(frame_id, labels)
    }

    pub fn get(&self, frame_id: u64) -> Option<&[Detection]> {
        self.labels.get(&frame_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[Detection])> {
        self.labels.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Checks that every labeled frame exists in `stream`.
    pub fn check_against(&self, stream: &[FrameRecord]) -> Result<()> {
        let ids: HashSet<u64> = stream.iter().map(|r| r.frame_id).collect();
        match self.labels.keys().find(|id| !ids.contains(id)) {
            Some(id) => Err(Error::Config(format!(
                "oracle labels frame_id {id} which is not in the stream"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    frame_id: u64,
    timestamp_ms: u64,
    embedding: Vec<f64>,
    detections: Vec<RawDetection>,
    #[serde(default)]
    image_bytes: u64,
}

#[derive(Deserialize)]
struct RawDetection {
    class_id: u32,
    confidence: f64,
    bbox: [f64; 4],
}

/// Incremental validator for the stream-level invariants.
struct StreamChecker {
    dim: Option<usize>,
    ids: HashSet<u64>,
    last_ts: Option<u64>,
}

impl StreamChecker {
    fn new() -> Self {
        StreamChecker {
            dim: None,
            ids: HashSet::new(),
            last_ts: None,
        }
    }

    fn check(&mut self, line: usize, frame_id: u64, timestamp_ms: u64, dim: usize) -> Result<()> {
        match self.dim {
            Some(expected) if expected != dim => {
                return Err(Error::DimensionMismatch {
                    line,
                    expected,
                    found: dim,
                })
            }
            Some(_) => {}
            None => self.dim = Some(dim),
        }
        if !self.ids.insert(frame_id) {
            return Err(Error::DuplicateFrame { line, frame_id });
        }
        if let Some(previous_ms) = self.last_ts {
            if timestamp_ms < previous_ms {
                return Err(Error::NonMonotoneTimestamp {
                    line,
                    timestamp_ms,
                    previous_ms,
                });
            }
        }
        self.last_ts = Some(timestamp_ms);
        Ok(())
    }
}

fn parse_record(line: usize, text: &str) -> Result<FrameRecord> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| Error::Malformed {
        line,
        message: e.to_string(),
    })?;
    let embedding = Embedding::new(raw.embedding).map_err(|e| Error::InvalidRecord {
        line,
        message: e.to_string(),
    })?;
    let detections = raw
        .detections
        .into_iter()
        .map(|d| Detection::new(d.class_id, d.confidence, d.bbox.into()))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::InvalidRecord {
            line,
            message: e.to_string(),
        })?;
    Ok(FrameRecord {
        frame_id: raw.frame_id,
        timestamp_ms: raw.timestamp_ms,
        embedding,
        detections,
        image_bytes: raw.image_bytes,
    })
}

/// Parses a frame-record stream. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_stream<R: BufRead>(reader: R) -> Result<Vec<FrameRecord>> {
    let mut checker = StreamChecker::new();
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let record = parse_record(line_no, &text)?;
        checker.check(
            line_no,
            record.frame_id,
            record.timestamp_ms,
            record.embedding.dim(),
        )?;
        records.push(record);
    }
    Ok(records)
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    parse_stream(BufReader::new(File::open(path)?))
}

/// Checks the stream-level invariants of an in-memory sequence. Errors report
/// 1-based positions as line numbers.
pub fn validate_stream(records: &[FrameRecord]) -> Result<()> {
    let mut checker = StreamChecker::new();
    for (i, r) in records.iter().enumerate() {
        checker.check(i + 1, r.frame_id, r.timestamp_ms, r.embedding.dim())?;
    }
    Ok(())
}

pub fn format_stream<W: Write>(records: &[FrameRecord], mut out: W) -> Result<()> {
    validate_stream(records)?;
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_stream(records: &[FrameRecord], path: impl AsRef<Path>) -> Result<()> {
    validate_stream(records)?;
    format_stream(records, BufWriter::new(File::create(path)?))
}

pub fn parse_labels<R: BufRead>(reader: R) -> Result<Vec<LabeledFrame>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let entry: LabeledFrame = serde_json::from_str(&text).map_err(|e| Error::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn write_labels<W: Write>(entries: &[LabeledFrame], mut out: W) -> Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_oracle(path: impl AsRef<Path>) -> Result<OracleLabels> {
    let entries = parse_labels(BufReader::new(File::open(path)?))?;
    let mut oracle = OracleLabels::new();
    for e in entries {
        if oracle.insert(e.frame_id, e.labels).is_some() {
            return Err(Error::Config(format!(
                "oracle file lists frame_id {} twice",
                e.frame_id
            )));
        }
    }
    Ok(oracle)
}

pub fn write_oracle(oracle: &OracleLabels, path: impl AsRef<Path>) -> Result<()> {
    let entries: Vec<LabeledFrame> = oracle
        .iter()
        .map(|(frame_id, labels)| LabeledFrame {
            frame_id,
            labels: labels.to_vec(),
        })
        .collect();
    write_labels(&entries, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(conf: f64) -> Detection {
        Detection::new(0, conf, BBox::new(0.0, 0.0, 10.0, 10.0)).unwrap()
    }

    fn record(id: u64, ts: u64, emb: Vec<f64>, dets: Vec<Detection>) -> FrameRecord {
        FrameRecord {
            frame_id: id,
            timestamp_ms: ts,
            embedding: Embedding::new(emb).unwrap(),
            detections: dets,
            image_bytes: 0,
        }
    }

    #[test]
    fn confidence_is_max_over_detections() {
        let r = record(0, 0, vec![1.0], vec![det(0.2), det(0.95), det(0.4)]);
        assert_eq!(frame_confidence(&r), 0.95);
        let r = record(0, 0, vec![1.0], vec![]);
        assert_eq!(frame_confidence(&r), 0.0);
        let r = record(0, 0, vec![1.0], vec![det(0.5)]);
        assert_eq!(frame_confidence(&r), 0.5);
    }

    #[test]
    fn embedding_rejects_bad_values() {
        assert!(Embedding::new(vec![]).is_err());
        assert!(Embedding::new(vec![0.0, 0.0]).is_err());
        assert!(Embedding::new(vec![1.0, f64::NAN]).is_err());
        assert!(Embedding::new(vec![f64::INFINITY]).is_err());
        assert!(Embedding::new(vec![0.0, -0.5]).is_ok());
    }

    #[test]
    fn detection_rejects_bad_values() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(Detection::new(0, 1.5, b).is_err());
        assert!(Detection::new(0, -0.1, b).is_err());
        assert!(Detection::new(0, 0.5, BBox::new(0.0, 0.0, -1.0, 1.0)).is_err());
        assert!(Detection::new(0, 0.0, BBox::new(0.0, 0.0, 0.0, 0.0)).is_ok());
    }

    #[test]
    fn reads_three_valid_lines() {
        let text = r#"{"frame_id":0,"timestamp_ms":0,"embedding":[1,0,0,0],"detections":[]}
{"frame_id":1,"timestamp_ms":40,"embedding":[0,1,0,0],"detections":[{"class_id":2,"confidence":0.5,"bbox":[1,2,3,4]}]}
{"frame_id":2,"timestamp_ms":40,"embedding":[0,0,1,0.5],"detections":[],"image_bytes":1024}
"#;
        let recs = parse_stream(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert!(recs.iter().all(|r| r.embedding.dim() == 4));
        assert_eq!(recs[1].detections[0].bbox, BBox::new(1.0, 2.0, 3.0, 4.0));
        assert_eq!(recs[2].image_bytes, 1024);
    }

    #[test]
    fn dimension_mismatch_names_line() {
        let text =
            "{\"frame_id\":0,\"timestamp_ms\":0,\"embedding\":[1,0,0,0],\"detections\":[]}\n\
                    {\"frame_id\":1,\"timestamp_ms\":1,\"embedding\":[1,0,0],\"detections\":[]}\n";
        match parse_stream(text.as_bytes()) {
            Err(Error::DimensionMismatch {
                line: 2,
                expected: 4,
                found: 3,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_stream() {
        assert!(parse_stream(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn ingestion_errors() {
        let zero = "{\"frame_id\":0,\"timestamp_ms\":0,\"embedding\":[0,0],\"detections\":[]}\n";
        assert!(matches!(
            parse_stream(zero.as_bytes()),
            Err(Error::InvalidRecord { line: 1, .. })
        ));

        let dup = "{\"frame_id\":3,\"timestamp_ms\":0,\"embedding\":[1],\"detections\":[]}\n\
                   {\"frame_id\":3,\"timestamp_ms\":1,\"embedding\":[1],\"detections\":[]}\n";
        assert!(matches!(
            parse_stream(dup.as_bytes()),
            Err(Error::DuplicateFrame {
                line: 2,
                frame_id: 3
            })
        ));

        let ts = "{\"frame_id\":0,\"timestamp_ms\":5,\"embedding\":[1],\"detections\":[]}\n\
                  {\"frame_id\":1,\"timestamp_ms\":4,\"embedding\":[1],\"detections\":[]}\n";
        assert!(matches!(
            parse_stream(ts.as_bytes()),
            Err(Error::NonMonotoneTimestamp { line: 2, .. })
        ));

        let bad =
            "{\"frame_id\":0,\"timestamp_ms\":0,\"embedding\":[1],\"detections\":[]}\nnot json\n";
        let err = parse_stream(bad.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }));
        assert!(err.to_string().contains("line 2"));

        let conf = "{\"frame_id\":0,\"timestamp_ms\":0,\"embedding\":[1],\"detections\":[{\"class_id\":0,\"confidence\":1.2,\"bbox\":[0,0,1,1]}]}\n";
        assert!(matches!(
            parse_stream(conf.as_bytes()),
            Err(Error::InvalidRecord { line: 1, .. })
        ));
    }

    #[test]
    fn write_rejects_duplicate_ids() {
        let recs = vec![
            record(1, 0, vec![1.0], vec![]),
            record(1, 1, vec![1.0], vec![]),
        ];
        let mut buf = Vec::new();
        assert!(matches!(
            format_stream(&recs, &mut buf),
            Err(Error::DuplicateFrame { frame_id: 1, .. })
        ));
    }

    #[test]
    fn single_record_round_trip() {
        let recs = vec![record(
            9,
            120,
            vec![0.1, -0.2, 1e-300],
            vec![Detection::new(3, 0.7, BBox::new(1.5, 2.5, 0.0, 8.25)).unwrap()],
        )];
        let mut buf = Vec::new();
        format_stream(&recs, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|b| **b == b'\n').count(), 1);
        assert_eq!(parse_stream(&buf[..]).unwrap(), recs);
    }

    #[test]
    fn candidate_set_rejects_duplicates_and_overflow() {
        let mut s = CandidateSet::with_capacity(2);
        s.push(record(1, 0, vec![1.0], vec![])).unwrap();
        assert!(matches!(
            s.push(record(1, 1, vec![1.0], vec![])),
            Err(Error::DuplicateCandidate(1))
        ));
        assert!(matches!(
            s.push(record(2, 1, vec![1.0, 0.0], vec![])),
            Err(Error::Dimension(1, 2))
        ));
        s.push(record(2, 1, vec![2.0], vec![])).unwrap();
        assert!(s.is_full());
        assert!(matches!(
            s.push(record(3, 1, vec![2.0], vec![])),
            Err(Error::CapacityExceeded(2))
        ));
    }

    #[test]
    fn oracle_round_trip_and_membership() {
        let mut oracle = OracleLabels::new();
        oracle.insert(7, vec![det(0.9)]);
        oracle.insert(9, vec![]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.ndjson");
        write_oracle(&oracle, &path).unwrap();
        assert_eq!(read_oracle(&path).unwrap(), oracle);

        let stream = vec![record(7, 0, vec![1.0], vec![])];
        assert!(oracle.check_against(&stream).is_err());
        let stream = vec![
            record(7, 0, vec![1.0], vec![]),
            record(9, 1, vec![1.0], vec![]),
        ];
        oracle.check_against(&stream).unwrap();
    }
}
