//! On-disk corpus layout.
//!
//! A corpus directory holds three files:
//!
//! ```text
//! manifest.jsonl        one JSON object per record, in row order
//! semantic.icfe         count × d_w embedding tensor
//! paralinguistic.icfe   count × d_t embedding tensor
//! ```
//!
//! Tensor files start with a 20-byte little-endian header (`b"ICFE"`,
//! `u32` version = 1, `u32` dim, `u64` count) followed by `count·dim`
//! row-major `f32` values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"ICFE";
pub const TENSOR_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SEMANTIC_FILE: &str = "semantic.icfe";
pub const PARALINGUISTIC_FILE: &str = "paralinguistic.icfe";

/// Separates a real record's id from the codec suffix of its fakes.
pub const FAKE_ID_SEPARATOR: &str = "__";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: format error at byte {offset}: {message}")]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("{path}: unsupported tensor version {found} (expected {TENSOR_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error("{path}:{line}: {message}")]
    Manifest { path: PathBuf, line: usize, message: String },
    #[error("validation error: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Dense row-major `f32` matrix, the unit stored in a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(DataError::Validation(format!(
                "matrix {rows}×{cols} needs {} values, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(DataError::Validation(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend(r.iter().map(|&x| x as f32));
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| x as f64).collect()
    }
}

pub fn write_tensor_file(path: &Path, m: &Matrix) -> Result<()> {
    if m.rows == 0 || m.cols == 0 {
        return Err(DataError::Validation(format!("refusing to write empty {}×{} tensor", m.rows, m.cols)));
    }
    if let Some(i) = m.data.iter().position(|x| !x.is_finite()) {
        return Err(DataError::Validation(format!("non-finite value at row {}, column {}", i / m.cols, i % m.cols)));
    }
    let dim = u32::try_from(m.cols).map_err(|_| DataError::Validation("dim exceeds u32".into()))?;
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(TENSOR_MAGIC);
    header.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    header.extend_from_slice(&dim.to_le_bytes());
    header.extend_from_slice(&(m.rows as u64).to_le_bytes());
    w.write_all(&header).map_err(io_err(path))?;
    for x in &m.data {
        w.write_all(&x.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_tensor_file(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let format = |offset: u64, message: String| DataError::Format { path: path.to_path_buf(), offset, message };
    if bytes.len() < HEADER_LEN {
        return Err(format(
            bytes.len() as u64,
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(format(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != TENSOR_VERSION {
        return Err(DataError::Version { path: path.to_path_buf(), found: version });
    }
    let dim = u32_at(8) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 || count == 0 {
        return Err(format(8, format!("empty tensor: dim {dim}, count {count}")));
    }
    let expected = (count as u128) * (dim as u128) * 4;
    let actual = (bytes.len() - HEADER_LEN) as u128;
    if expected != actual {
        return Err(format(
            HEADER_LEN as u64,
            format!("payload length mismatch: expected {expected} bytes, found {actual}"),
        ));
    }
    let data = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Matrix { rows: count as usize, cols: dim, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Valid, Split::TestSeen, Split::TestUnseen];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, Split::Train | Split::Valid)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| DataError::Validation(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub id: String,
    pub label: Label,
    pub codec_id: Option<String>,
    pub language: String,
    pub split: Split,
    pub row_index: u64,
}

impl ManifestRow {
    /// Id of the real utterance this record derives from.
    pub fn stem(&self) -> &str {
        self.id.split(FAKE_ID_SEPARATOR).next().unwrap_or(&self.id)
    }
}

pub fn fake_id(real_id: &str, codec_id: &str) -> String {
    format!("{real_id}{FAKE_ID_SEPARATOR}{codec_id}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub e_w: Vec<f64>,
    pub e_t: Vec<f64>,
    pub label: Label,
    pub codec_id: Option<String>,
    pub language: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<ManifestRow>,
    /// Semantic and paralinguistic tensor files, relative to the corpus directory.
    pub emb_files: [PathBuf; 2],
    pub dims: (usize, usize),
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("manifest rows serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes a full corpus. `semantic` and `paralinguistic` rows are indexed by
/// each manifest row's `row_index`.
pub fn write_corpus(
    dir: &Path,
    rows: &[ManifestRow],
    semantic: &Matrix,
    paralinguistic: &Matrix,
) -> Result<CorpusManifest> {
    if semantic.rows() != paralinguistic.rows() {
        return Err(DataError::Validation(format!(
            "tensor row counts differ: {} vs {}",
            semantic.rows(),
            paralinguistic.rows()
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_tensor_file(&dir.join(SEMANTIC_FILE), semantic)?;
    write_tensor_file(&dir.join(PARALINGUISTIC_FILE), paralinguistic)?;
    write_manifest(&dir.join(MANIFEST_FILE), rows)?;
    Ok(CorpusManifest {
        records: rows.to_vec(),
        emb_files: [PathBuf::from(SEMANTIC_FILE), PathBuf::from(PARALINGUISTIC_FILE)],
        dims: (semantic.cols(), paralinguistic.cols()),
    })
}

/// A loaded corpus: manifest plus both embedding tensors.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
    semantic: Matrix,
    paralinguistic: Matrix,
}

impl Corpus {
    /// Loads a corpus, rejecting it if it has any validation violation.
    pub fn load(dir: &Path) -> Result<Self> {
        let corpus = Self::load_unchecked(dir)?;
        let report = corpus.validate();
        if !report.is_clean() {
            return Err(DataError::Validation(format!("{}: {report}", dir.display())));
        }
        Ok(corpus)
    }

    fn load_unchecked(dir: &Path) -> Result<Self> {
        let records = read_manifest(&dir.join(MANIFEST_FILE))?;
        let semantic = read_tensor_file(&dir.join(SEMANTIC_FILE))?;
        let paralinguistic = read_tensor_file(&dir.join(PARALINGUISTIC_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: CorpusManifest {
                records,
                emb_files: [PathBuf::from(SEMANTIC_FILE), PathBuf::from(PARALINGUISTIC_FILE)],
                dims: (semantic.cols(), paralinguistic.cols()),
            },
            semantic,
            paralinguistic,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.manifest.dims
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.manifest.records
    }

    fn record(&self, row: &ManifestRow) -> EmbeddingRecord {
        let i = row.row_index as usize;
        EmbeddingRecord {
            id: row.id.clone(),
            e_w: self.semantic.row_f64(i),
            e_t: self.paralinguistic.row_f64(i),
            label: row.label,
            codec_id: row.codec_id.clone(),
            language: row.language.clone(),
            split: row.split,
        }
    }

    /// All records in manifest order.
    pub fn records(&self) -> impl Iterator<Item = EmbeddingRecord> + '_ {
        self.manifest.records.iter().map(move |r| self.record(r))
    }

    /// Records of the given splits, in manifest order.
    pub fn split_records(&self, splits: &[Split]) -> Vec<EmbeddingRecord> {
        self.manifest.records.iter().filter(|r| splits.contains(&r.split)).map(|r| self.record(r)).collect()
    }

    /// Codec ids of fake records in the given splits.
    pub fn codecs_in(&self, splits: &[Split]) -> BTreeSet<String> {
        self.manifest.records.iter().filter(|r| splits.contains(&r.split)).filter_map(|r| r.codec_id.clone()).collect()
    }

    pub fn validate(&self) -> ValidationReport {
        validate_loaded(&self.manifest.records, &self.semantic, &self.paralinguistic)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub record_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub records: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, id: Option<&str>, message: impl Into<String>) {
        self.violations.push(Violation { record_id: id.map(str::to_owned), message: message.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            return write!(f, "{} records, no violations", self.records);
        }
        write!(f, "{} violation(s)", self.violations.len())?;
        for v in self.violations.iter().take(10) {
            match &v.record_id {
                Some(id) => write!(f, "; {id}: {}", v.message)?,
                None => write!(f, "; {}", v.message)?,
            }
        }
        Ok(())
    }
}

/// Checks every structural invariant of the corpus in `dir`.
pub fn validate_corpus(dir: &Path) -> Result<ValidationReport> {
    Ok(Corpus::load_unchecked(dir)?.validate())
}

fn validate_loaded(rows: &[ManifestRow], semantic: &Matrix, paralinguistic: &Matrix) -> ValidationReport {
    let mut report = ValidationReport { records: rows.len(), violations: Vec::new() };
    let count = semantic.rows();
    if paralinguistic.rows() != count {
        report.push(
            None,
            format!("tensor row counts differ: semantic {count}, paralinguistic {}", paralinguistic.rows()),
        );
    }
    if rows.len() != count {
        report.push(None, format!("manifest has {} rows but tensors have {count}", rows.len()));
    }

    let mut seen_index: HashMap<u64, &str> = HashMap::new();
    let mut by_id: HashMap<&str, &ManifestRow> = HashMap::new();
    for row in rows {
        if row.row_index as usize >= count {
            report.push(Some(&row.id), "row_index out of range");
        } else {
            let i = row.row_index as usize;
            let finite = |m: &Matrix| i < m.rows() && m.row(i).iter().all(|x| x.is_finite());
            if !finite(semantic) || !finite(paralinguistic) {
                report.push(Some(&row.id), "non-finite embedding");
            }
        }
        if let Some(prev) = seen_index.insert(row.row_index, &row.id) {
            report.push(Some(&row.id), format!("row_index {} already used by {prev}", row.row_index));
        }
        if by_id.insert(&row.id, row).is_some() {
            report.push(Some(&row.id), "duplicate id");
        }
        match (row.label, &row.codec_id) {
            (Label::Fake, None) => report.push(Some(&row.id), "fake record without codec_id"),
            (Label::Real, Some(_)) => report.push(Some(&row.id), "real record with codec_id"),
            _ => {}
        }
        if row.label == Label::Real && row.id.contains(FAKE_ID_SEPARATOR) {
            report.push(Some(&row.id), format!("real id contains reserved separator {FAKE_ID_SEPARATOR:?}"));
        }
    }

    let mut train_codecs = BTreeSet::new();
    let mut unseen_codecs = BTreeSet::new();
    for row in rows.iter().filter(|r| r.label == Label::Fake) {
        match by_id.get(row.stem()) {
            Some(real) if real.label == Label::Real => {
                if real.split != row.split || real.language != row.language {
                    report.push(Some(&row.id), "split or language differs from real counterpart");
                }
            }
            _ => report.push(Some(&row.id), "fake record has no real counterpart"),
        }
        if let Some(codec) = &row.codec_id {
            if row.id != fake_id(row.stem(), codec) {
                report.push(Some(&row.id), format!("fake id does not end with codec suffix {codec:?}"));
            }
            if row.split.is_training() {
                train_codecs.insert(codec.as_str());
            } else if row.split == Split::TestUnseen {
                unseen_codecs.insert(codec.as_str());
            }
        }
    }
    for codec in train_codecs.intersection(&unseen_codecs) {
        report.push(None, format!("codec {codec} appears in both training and test_unseen splits"));
    }
    report
}

/// Record counts keyed by split then label, used by reports and the CLI.
pub fn split_counts(rows: &[ManifestRow]) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in rows {
        *out.entry(r.split.to_string()).or_default().entry(r.label.to_string()).or_default() += 1;
    }
    out
}
