//! Embedding datasets: ingest, validation, persistence and patient-level splits.
//!
//! Records arrive as line-delimited JSON, one object per line:
//!
//! ```json
//! {"record_id":"r1","patient_id":"p1","image_embedding":[0.1,0.2],
//!  "text_embedding":[0.3,0.4],"labels":[1,0,null],"report_excerpt":"small effusion"}
//! ```
//!
//! `null` labels are "unknown". Once ingested a dataset is persisted in a packed
//! little-endian binary form; its SHA-256 is the dataset's content digest.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_TOKENS: usize = 256;
pub const RECORDS_FILE: &str = "records.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

const PACKED_MAGIC: &[u8; 8] = b"PLRECS\0\0";
const PACKED_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Negative,
    Positive,
    Unknown,
}

impl Label {
    /// `None` for unknown.
    pub fn as_bool(self) -> Option<bool> {
        match self {
            Label::Negative => Some(false),
            Label::Positive => Some(true),
            Label::Unknown => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
            Label::Unknown => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            2 => Ok(Label::Unknown),
            _ => Err(Error::Format(format!("bad label code {c}"))),
        }
    }
}

impl From<bool> for Label {
    fn from(b: bool) -> Self {
        if b {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Label::Negative => s.serialize_u8(0),
            Label::Positive => s.serialize_u8(1),
            Label::Unknown => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Option::<u8>::deserialize(d)? {
            None => Ok(Label::Unknown),
            Some(0) => Ok(Label::Negative),
            Some(1) => Ok(Label::Positive),
            Some(v) => Err(serde::de::Error::custom(format!("label must be 0, 1 or null, got {v}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Unassigned => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            3 => Split::Unassigned,
            _ => return Err(Error::Format(format!("bad split code {c}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub record_id: String,
    pub patient_id: String,
    pub image_embedding: Vec<f32>,
    pub text_embedding: Vec<f32>,
    pub labels: Vec<Label>,
    pub report_excerpt: String,
    #[serde(default)]
    pub split: Split,
}

impl EmbeddingRecord {
    /// Concatenated image ‖ text embedding, the transcoder input.
    pub fn joint_embedding(&self) -> Vec<f64> {
        self.image_embedding
            .iter()
            .chain(&self.text_embedding)
            .map(|&x| x as f64)
            .collect()
    }

    pub fn image_f64(&self) -> Vec<f64> {
        self.image_embedding.iter().map(|&x| x as f64).collect()
    }

    pub fn text_f64(&self) -> Vec<f64> {
        self.text_embedding.iter().map(|&x| x as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unassigned: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test + self.unassigned
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub d_img: usize,
    pub d_txt: usize,
    pub n_labels: usize,
    pub label_names: Vec<String>,
    #[serde(default)]
    pub counts: SplitCounts,
    #[serde(default)]
    pub digest: String,
}

impl DatasetManifest {
    pub fn new(d_img: usize, d_txt: usize, label_names: Vec<String>) -> Self {
        DatasetManifest {
            d_img,
            d_txt,
            n_labels: label_names.len(),
            label_names,
            counts: SplitCounts::default(),
            digest: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_img == 0 || self.d_txt == 0 || self.n_labels == 0 {
            return Err(Error::InvalidArgument(
                "manifest dims and label count must be positive".into(),
            ));
        }
        if self.label_names.len() != self.n_labels {
            return Err(Error::InvalidArgument(format!(
                "manifest declares {} labels but names {}",
                self.n_labels,
                self.label_names.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.d_img + self.d_txt
    }
}

/// How `unknown` labels enter the training loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownLabelPolicy {
    #[default]
    Zero,
    Mask,
}

/// An ingested, validated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<EmbeddingRecord>,
}

/// Whitespace-token truncation. The result is a prefix of the input string that
/// ends at the end of the `max_tokens`-th token; inputs that already fit are
/// returned unchanged.
pub fn truncate_excerpt(text: &str, max_tokens: usize) -> String {
    let max_tokens = max_tokens.max(1);
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token {
                in_token = false;
                if seen == max_tokens {
                    return text[..i].to_string();
                }
            }
        } else if !in_token {
            in_token = true;
            seen += 1;
        }
    }
    text.to_string()
}

impl Dataset {
    /// Build a dataset from in-memory records, validating every invariant.
    pub fn from_records(manifest: DatasetManifest, records: Vec<EmbeddingRecord>) -> Result<Self> {
        manifest.validate()?;
        let mut ids = HashSet::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            validate_record(&manifest, r, i + 1)?;
            if !ids.insert(r.record_id.as_str()) {
                return Err(Error::InvalidRecord {
                    record_id: r.record_id.clone(),
                    line: i + 1,
                    message: "duplicate record_id".into(),
                });
            }
        }
        let mut ds = Dataset { manifest, records };
        ds.refresh_manifest();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn refresh_manifest(&mut self) {
        let mut c = SplitCounts::default();
        for r in &self.records {
            match r.split {
                Split::Train => c.train += 1,
                Split::Val => c.val += 1,
                Split::Test => c.test += 1,
                Split::Unassigned => c.unassigned += 1,
            }
        }
        self.manifest.counts = c;
        self.manifest.digest = self.digest();
    }

    /// SHA-256 over the canonical packed form, excluding split assignment.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.packed_bytes(false));
        hex::encode(h.finalize())
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn find(&self, record_id: &str) -> Option<&EmbeddingRecord> {
        self.records.iter().find(|r| r.record_id == record_id)
    }

    /// Label matrix (row-major, n × L) and a mask of cells that count in the loss.
    pub fn label_matrix(&self, idx: &[usize], policy: UnknownLabelPolicy) -> (Vec<f64>, Vec<bool>) {
        let l = self.manifest.n_labels;
        let mut y = Vec::with_capacity(idx.len() * l);
        let mut mask = Vec::with_capacity(idx.len() * l);
        for &i in idx {
            for &lab in &self.records[i].labels {
                match lab {
                    Label::Positive => {
                        y.push(1.0);
                        mask.push(true);
                    }
                    Label::Negative => {
                        y.push(0.0);
                        mask.push(true);
                    }
                    Label::Unknown => {
                        y.push(0.0);
                        mask.push(policy == UnknownLabelPolicy::Zero);
                    }
                }
            }
        }
        (y, mask)
    }

    pub fn packed_bytes(&self, include_split: bool) -> Vec<u8> {
        let m = &self.manifest;
        let mut out = Vec::new();
        out.extend_from_slice(PACKED_MAGIC);
        out.extend_from_slice(&PACKED_VERSION.to_le_bytes());
        for v in [m.d_img, m.d_txt, m.n_labels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for name in &m.label_names {
            put_str(&mut out, name);
        }
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.record_id);
            put_str(&mut out, &r.patient_id);
            put_f32s(&mut out, &r.image_embedding);
            put_f32s(&mut out, &r.text_embedding);
            out.extend_from_slice(&(r.labels.len() as u32).to_le_bytes());
            out.extend(r.labels.iter().map(|l| l.code()));
            put_str(&mut out, &r.report_excerpt);
            if include_split {
                out.push(r.split.code());
            }
        }
        out
    }

    pub fn from_packed(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { buf: bytes };
        if cur.take(8)? != PACKED_MAGIC {
            return Err(Error::Format("not a packed record file".into()));
        }
        let version = cur.u32()?;
        if version != PACKED_VERSION {
            return Err(Error::Format(format!("unsupported packed version {version}")));
        }
        let d_img = cur.u32()? as usize;
        let d_txt = cur.u32()? as usize;
        let n_labels = cur.u32()? as usize;
        let label_names = (0..n_labels).map(|_| cur.str()).collect::<Result<Vec<_>>>()?;
        let n = cur.u64()? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let record_id = cur.str()?;
            let patient_id = cur.str()?;
            let image_embedding = cur.f32s()?;
            let text_embedding = cur.f32s()?;
            let nl = cur.u32()? as usize;
            let labels = cur
                .take(nl)?
                .iter()
                .map(|&c| Label::from_code(c))
                .collect::<Result<Vec<_>>>()?;
            let report_excerpt = cur.str()?;
            let split = Split::from_code(cur.take(1)?[0])?;
            records.push(EmbeddingRecord {
                record_id,
                patient_id,
                image_embedding,
                text_embedding,
                labels,
                report_excerpt,
                split,
            });
        }
        if !cur.buf.is_empty() {
            return Err(Error::Format("trailing bytes in packed record file".into()));
        }
        let manifest = DatasetManifest::new(d_img, d_txt, label_names);
        Dataset::from_records(manifest, records)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    /// Persist as `records.bin` + `manifest.json` inside `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let rec = dir.join(RECORDS_FILE);
        std::fs::write(&rec, self.packed_bytes(true)).map_err(|e| Error::io(&rec, e))?;
        let man = dir.join(MANIFEST_FILE);
        std::fs::write(&man, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(&man, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let rec = dir.join(RECORDS_FILE);
        let bytes = std::fs::read(&rec).map_err(|e| Error::io(&rec, e))?;
        let mut ds = Dataset::from_packed(&bytes)?;
        let man = dir.join(MANIFEST_FILE);
        let stored: DatasetManifest = serde_json::from_slice(&std::fs::read(&man).map_err(|e| Error::io(&man, e))?)?;
        ds.manifest.label_names = stored.label_names;
        ds.refresh_manifest();
        if ds.manifest.digest != stored.digest {
            return Err(Error::Format(format!(
                "record digest {} does not match manifest {}",
                ds.manifest.digest, stored.digest
            )));
        }
        Ok(ds)
    }
}

fn validate_record(m: &DatasetManifest, r: &EmbeddingRecord, line: usize) -> Result<()> {
    let bad = |message: String| Error::InvalidRecord {
        record_id: r.record_id.clone(),
        line,
        message,
    };
    if r.record_id.is_empty() {
        return Err(bad("empty record_id".into()));
    }
    if r.image_embedding.len() != m.d_img {
        return Err(bad(format!(
            "image_embedding has {} dims, manifest declares {}",
            r.image_embedding.len(),
            m.d_img
        )));
    }
    if r.text_embedding.len() != m.d_txt {
        return Err(bad(format!(
            "text_embedding has {} dims, manifest declares {}",
            r.text_embedding.len(),
            m.d_txt
        )));
    }
    if r.labels.len() != m.n_labels {
        return Err(bad(format!(
            "labels has {} entries, manifest declares {}",
            r.labels.len(),
            m.n_labels
        )));
    }
    if r.image_embedding
        .iter()
        .chain(&r.text_embedding)
        .any(|x| !x.is_finite())
    {
        return Err(bad("non-finite embedding value".into()));
    }
    Ok(())
}

/// Read a JSONL record file, truncate excerpts and validate against `manifest`.
pub fn ingest_records(path: &Path, manifest: DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut r: EmbeddingRecord = parse_record_line(&line, line_no)?;
        r.report_excerpt = truncate_excerpt(&r.report_excerpt, DEFAULT_MAX_TOKENS);
        validate_record(&manifest, &r, line_no)?;
        if !ids.insert(r.record_id.clone()) {
            return Err(Error::InvalidRecord {
                record_id: r.record_id,
                line: line_no,
                message: "duplicate record_id".into(),
            });
        }
        records.push(r);
    }
    Dataset::from_records(manifest, records)
}

fn parse_record_line(line: &str, line_no: usize) -> Result<EmbeddingRecord> {
    // serde_json rejects NaN/Infinity literals, so report those explicitly.
    serde_json::from_str(line).map_err(|e| {
        let lower = line.to_ascii_lowercase();
        let message = if lower.contains("nan") || lower.contains("infinity") {
            format!("non-finite value: {e}")
        } else {
            e.to_string()
        };
        Error::Parse { line: line_no, message }
    })
}

/// Infer a manifest from the first record of a JSONL file.
pub fn infer_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let first = BufReader::new(f)
        .lines()
        .map_while(|l| l.ok())
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Empty(format!("{} has no records", path.display())))?;
    let r = parse_record_line(&first, 1)?;
    let names = (0..r.labels.len()).map(|i| format!("label_{i}")).collect();
    Ok(DatasetManifest::new(
        r.image_embedding.len(),
        r.text_embedding.len(),
        names,
    ))
}

/// Patient → split mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub patients: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn apply(&self, ds: &mut Dataset) {
        for r in &mut ds.records {
            r.split = self.patients.get(&r.patient_id).copied().unwrap_or_default();
        }
        ds.refresh_manifest();
    }
}

fn patient_key(seed: u64, patient_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(patient_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Patient-level split. Patients are ordered by `hash(seed ‖ patient_id)` and
/// dealt into train/val/test by cumulative record quota, so every patient lands
/// in exactly one split and achieved record fractions track the ratios to within
/// one patient's worth of records.
pub fn assign_splits(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ds.is_empty() {
        return Err(Error::Empty("cannot split an empty dataset".into()));
    }
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive: {ratios:?}"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios sum to {sum}, not 1")));
    }
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &ds.records {
        *sizes.entry(r.patient_id.as_str()).or_default() += 1;
    }
    let mut order: Vec<(u64, &str, usize)> = sizes.iter().map(|(&p, &n)| (patient_key(seed, p), p, n)).collect();
    order.sort_unstable();

    let total = ds.len() as f64;
    let bounds = [ratios[0], ratios[0] + ratios[1]];
    let mut cum = 0usize;
    let mut patients = BTreeMap::new();
    for (_, p, n) in order {
        let mid = (cum as f64 + n as f64 / 2.0) / total;
        let split = if mid < bounds[0] {
            Split::Train
        } else if mid < bounds[1] {
            Split::Val
        } else {
            Split::Test
        };
        patients.insert(p.to_string(), split);
        cum += n;
    }
    Ok(SplitAssignment { seed, ratios, patients })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Format("packed record file truncated".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string not UTF-8".into()))
    }

    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
