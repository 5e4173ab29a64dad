//! Stream ingestion, the label oracle, and dataset generation.
//!
//! The binary stream format keeps labels in a section of their own after the
//! feature block, so revealing a label is a real seek-and-read — the oracle
//! counts every one. Layout, little-endian throughout:
//!
//! ```text
//! magic "OLAR" (4B) | version u16 | n u64 | d u32 | flags u8
//! n·d f64 features | n f64 labels (iff flags bit 0)
//! ```
//!
//! CSV datasets (comma separated, optional header, last column = label) are
//! parsed fully into memory and served through the same interfaces.

use crate::linalg::{DenseMatrix, DenseVector};
use crate::sketch::{LabelSource, SketchError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const STREAM_MAGIC: &[u8; 4] = b"OLAR";
pub const STREAM_VERSION: u16 = 1;
const HEADER_LEN: u64 = 4 + 2 + 8 + 4 + 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("unexpected end of file at byte offset {offset}")]
    UnexpectedEof { offset: u64 },
    #[error("ragged row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: u64, expected: usize, found: usize },
    #[error("non-finite entry in row {row}")]
    NonFiniteEntry { row: u64 },
    #[error("missing column {col}")]
    MissingColumn { col: usize },
    #[error("non-numeric value '{value}' at row {row}, column {col}")]
    NonNumeric { row: u64, col: usize, value: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parsed stream header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub n: u64,
    pub d: u32,
    pub has_labels: bool,
}

impl StreamHeader {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), IoError> {
        w.write_all(STREAM_MAGIC)?;
        w.write_all(&STREAM_VERSION.to_le_bytes())?;
        w.write_all(&self.n.to_le_bytes())?;
        w.write_all(&self.d.to_le_bytes())?;
        w.write_all(&[self.has_labels as u8])?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, IoError> {
        let mut magic = [0u8; 4];
        read_exact_at(r, &mut magic, 0)?;
        if &magic != STREAM_MAGIC {
            return Err(IoError::BadHeader(format!("magic {magic:02x?}")));
        }
        let mut buf2 = [0u8; 2];
        read_exact_at(r, &mut buf2, 4)?;
        let version = u16::from_le_bytes(buf2);
        if version != STREAM_VERSION {
            return Err(IoError::BadHeader(format!("unsupported version {version}")));
        }
        let mut buf8 = [0u8; 8];
        read_exact_at(r, &mut buf8, 6)?;
        let n = u64::from_le_bytes(buf8);
        let mut buf4 = [0u8; 4];
        read_exact_at(r, &mut buf4, 14)?;
        let d = u32::from_le_bytes(buf4);
        let mut flag = [0u8; 1];
        read_exact_at(r, &mut flag, 18)?;
        Ok(Self { n, d, has_labels: flag[0] & 1 == 1 })
    }
}

fn read_exact_at(r: &mut impl Read, buf: &mut [u8], offset: u64) -> Result<(), IoError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            IoError::UnexpectedEof { offset }
        } else {
            IoError::Io(e)
        }
    })
}

/// Ordered row source; labels are never delivered here.
pub trait RowSource {
    /// (stream length, feature dimension)
    fn dims(&self) -> (u64, u32);
    fn next_row(&mut self) -> Result<Option<Vec<f64>>, IoError>;
}

/// In-memory row source, mostly for tests and generated data kept resident.
pub struct MatrixRowSource {
    matrix: DenseMatrix,
    cursor: usize,
}

impl MatrixRowSource {
    pub fn new(matrix: DenseMatrix) -> Self {
        Self { matrix, cursor: 0 }
    }
}

impl RowSource for MatrixRowSource {
    fn dims(&self) -> (u64, u32) {
        (self.matrix.rows() as u64, self.matrix.cols() as u32)
    }

    fn next_row(&mut self) -> Result<Option<Vec<f64>>, IoError> {
        if self.cursor >= self.matrix.rows() {
            return Ok(None);
        }
        let row = self.matrix.row(self.cursor).to_vec();
        self.cursor += 1;
        Ok(Some(row))
    }
}

enum StreamBacking {
    Binary { reader: BufReader<File>, next_offset: u64 },
    Memory(MatrixRowSource),
}

/// Streaming reader over the feature block of a dataset.
pub struct RowStream {
    header: StreamHeader,
    backing: StreamBacking,
    delivered: u64,
}

impl RowSource for RowStream {
    fn dims(&self) -> (u64, u32) {
        (self.header.n, self.header.d)
    }

    fn next_row(&mut self) -> Result<Option<Vec<f64>>, IoError> {
        if self.delivered >= self.header.n {
            return Ok(None);
        }
        let d = self.header.d as usize;
        let row = match &mut self.backing {
            StreamBacking::Binary { reader, next_offset } => {
                let mut buf = vec![0u8; d * 8];
                read_exact_at(reader, &mut buf, *next_offset)?;
                *next_offset += (d * 8) as u64;
                let mut row = Vec::with_capacity(d);
                for chunk in buf.chunks_exact(8) {
                    row.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
                row
            }
            StreamBacking::Memory(src) => match src.next_row()? {
                Some(r) => r,
                None => return Ok(None),
            },
        };
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IoError::NonFiniteEntry { row: self.delivered });
        }
        self.delivered += 1;
        Ok(Some(row))
    }
}

enum OracleBacking {
    File { file: File, label_base: u64, n: u64 },
    Memory(Vec<f64>),
}

/// Query-on-demand label access with an invocation counter.
pub struct LabelOracle {
    backing: OracleBacking,
    invocations: u64,
}

impl LabelOracle {
    pub fn from_vec(labels: Vec<f64>) -> Self {
        Self { backing: OracleBacking::Memory(labels), invocations: 0 }
    }

    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    pub fn reveal(&mut self, index: u64) -> Result<f64, IoError> {
        self.invocations += 1;
        match &mut self.backing {
            OracleBacking::Memory(v) => v
                .get(index as usize)
                .copied()
                .ok_or(IoError::MissingColumn { col: index as usize }),
            OracleBacking::File { file, label_base, n } => {
                if index >= *n {
                    return Err(IoError::MissingColumn { col: index as usize });
                }
                let offset = *label_base + index * 8;
                file.seek(SeekFrom::Start(offset))?;
                let mut buf = [0u8; 8];
                read_exact_at(file, &mut buf, offset)?;
                Ok(f64::from_le_bytes(buf))
            }
        }
    }
}

impl LabelSource for LabelOracle {
    fn fetch(&mut self, index: u64) -> Result<f64, SketchError> {
        self.reveal(index)
            .map_err(|e| SketchError::LabelFetch { index, msg: e.to_string() })
    }
}

/// Opens a dataset (binary stream or CSV by content sniffing) and returns
/// the row stream with its label oracle.
pub fn read_stream(path: &Path) -> Result<(RowStream, LabelOracle), IoError> {
    let mut probe = [0u8; 4];
    {
        let mut f = File::open(path)?;
        let got = f.read(&mut probe)?;
        if got < 4 {
            return Err(IoError::BadHeader("file shorter than magic".into()));
        }
    }
    if &probe == STREAM_MAGIC {
        read_binary_stream(path)
    } else {
        read_csv_stream(path)
    }
}

fn read_binary_stream(path: &Path) -> Result<(RowStream, LabelOracle), IoError> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = StreamHeader::read_from(&mut reader)?;
    if !header.has_labels {
        return Err(IoError::BadHeader("stream carries no label section".into()));
    }
    let file_len = std::fs::metadata(path)?.len();
    let need = HEADER_LEN + header.n * header.d as u64 * 8 + header.n * 8;
    if file_len < need {
        return Err(IoError::UnexpectedEof { offset: file_len });
    }
    let label_base = HEADER_LEN + header.n * header.d as u64 * 8;
    let oracle = LabelOracle {
        backing: OracleBacking::File { file: File::open(path)?, label_base, n: header.n },
        invocations: 0,
    };
    let stream = RowStream {
        header,
        backing: StreamBacking::Binary { reader, next_offset: HEADER_LEN },
        delivered: 0,
    };
    Ok((stream, oracle))
}

fn parse_csv_numeric(path: &Path) -> Result<(Vec<Vec<String>>, bool), IoError> {
    let mut rows = Vec::new();
    let content = std::fs::read_to_string(path)?;
    for line in content.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(line.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>());
    }
    if rows.is_empty() {
        return Err(IoError::BadHeader("empty csv".into()));
    }
    // header row: any field of the first line that does not parse as a number
    let has_header = rows[0].iter().any(|s| s.parse::<f64>().is_err());
    Ok((rows, has_header))
}

fn read_csv_stream(path: &Path) -> Result<(RowStream, LabelOracle), IoError> {
    let (rows, has_header) = parse_csv_numeric(path)?;
    let data_rows = &rows[has_header as usize..];
    if data_rows.is_empty() {
        return Err(IoError::BadHeader("csv has no data rows".into()));
    }
    let width = data_rows[0].len();
    if width < 2 {
        return Err(IoError::BadHeader("csv needs at least one feature and a label".into()));
    }
    let d = width - 1;
    let mut features = DenseMatrix::with_cols(d);
    let mut labels = Vec::with_capacity(data_rows.len());
    for (i, fields) in data_rows.iter().enumerate() {
        if fields.len() != width {
            return Err(IoError::RaggedRow { row: i as u64, expected: width, found: fields.len() });
        }
        let mut row = Vec::with_capacity(d);
        for (c, field) in fields.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| IoError::NonNumeric {
                row: i as u64,
                col: c,
                value: field.clone(),
            })?;
            if !v.is_finite() {
                return Err(IoError::NonFiniteEntry { row: i as u64 });
            }
            if c < d {
                row.push(v);
            } else {
                labels.push(v);
            }
        }
        features.push_row(&row).map_err(|_| IoError::NonFiniteEntry { row: i as u64 })?;
    }
    let header = StreamHeader { n: features.rows() as u64, d: d as u32, has_labels: true };
    Ok((
        RowStream {
            header,
            backing: StreamBacking::Memory(MatrixRowSource::new(features)),
            delivered: 0,
        },
        LabelOracle::from_vec(labels),
    ))
}

/// Loads the complete dataset, labels included. This is the experimenter's
/// evaluation path (computing the full-data optimum); it does not pass
/// through the oracle and does not count as querying.
pub fn load_full(path: &Path) -> Result<(DenseMatrix, DenseVector), IoError> {
    let (mut stream, mut oracle) = read_stream(path)?;
    let (n, d) = stream.dims();
    let mut a = DenseMatrix::with_cols(d as usize);
    while let Some(row) = stream.next_row()? {
        a.push_row(&row).map_err(|_| IoError::NonFiniteEntry { row: a.rows() as u64 })?;
    }
    let mut b = Vec::with_capacity(n as usize);
    for i in 0..n {
        b.push(oracle.reveal(i)?);
    }
    Ok((a, DenseVector::from_vec_unchecked(b)))
}

/// Synthetic instance description: Gaussian rows, a handful of rows inflated
/// by n^{1/p} to spread the Lewis weights, labels b = Ax* + ξ drawn after
/// inflation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: u64,
    pub d: u32,
    pub p: f64,
    pub noise_std: f64,
    pub inflate_count: u32,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n: u64, d: u32, p: f64, seed: u64) -> Self {
        Self { n, d, p, noise_std: 1.0, inflate_count: d, seed }
    }

    pub fn inflate_factor(&self) -> f64 {
        (self.n as f64).powf(1.0 / self.p)
    }
}

/// Dataset manifest written next to the stream file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub data_file: String,
    pub xstar_file: String,
    pub inflate_factor: f64,
    pub inflated_rows: Vec<u64>,
}

/// Generated instance held in memory alongside its files.
pub struct Generated {
    pub matrix: DenseMatrix,
    pub labels: Vec<f64>,
    pub xstar: DenseVector,
    pub inflated_rows: Vec<u64>,
}

/// Draws the synthetic instance of `spec` deterministically.
pub fn synthesize(spec: &SyntheticSpec) -> Generated {
    assert!(spec.n > spec.d as u64, "need more rows than columns");
    assert!(spec.inflate_count as u64 <= spec.n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.d as usize;
    let mut matrix = DenseMatrix::with_cols(d);
    for _ in 0..spec.n {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        matrix.push_row(&row).expect("gaussian rows are finite");
    }
    let chosen =
        rand::seq::index::sample(&mut rng, spec.n as usize, spec.inflate_count as usize);
    let mut inflated_rows: Vec<u64> = chosen.iter().map(|i| i as u64).collect();
    inflated_rows.sort_unstable();
    let factor = spec.inflate_factor();
    let mut inflated = DenseMatrix::with_cols(d);
    let mut mark = vec![false; spec.n as usize];
    for &i in &inflated_rows {
        mark[i as usize] = true;
    }
    for i in 0..spec.n as usize {
        if mark[i] {
            inflated.push_scaled_row(matrix.row(i), factor).expect("finite");
        } else {
            inflated.push_row(matrix.row(i)).expect("finite");
        }
    }
    let xstar = DenseVector::from_vec_unchecked(
        (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
    );
    // labels from the inflated matrix: the planted model stays consistent
    // with the instance the solvers actually see
    let labels: Vec<f64> = (0..spec.n as usize)
        .map(|i| {
            let pred: f64 =
                inflated.row(i).iter().zip(xstar.as_slice()).map(|(a, x)| a * x).sum();
            let noise: f64 = rng.sample(rand_distr::StandardNormal);
            pred + spec.noise_std * noise
        })
        .collect();
    Generated { matrix: inflated, labels, xstar, inflated_rows }
}

/// Writes a feature+label stream in the binary format.
pub fn write_stream(
    path: &Path,
    matrix: &DenseMatrix,
    labels: Option<&[f64]>,
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = StreamHeader {
        n: matrix.rows() as u64,
        d: matrix.cols() as u32,
        has_labels: labels.is_some(),
    };
    header.write_to(&mut w)?;
    for v in matrix.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(ls) = labels {
        assert_eq!(ls.len(), matrix.rows());
        for v in ls {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Generates `spec` into `out_dir`: data.olar, xstar.json and manifest.json.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<(Manifest, Generated), IoError> {
    std::fs::create_dir_all(out_dir)?;
    let generated = synthesize(spec);
    let data_path = out_dir.join("data.olar");
    write_stream(&data_path, &generated.matrix, Some(&generated.labels))?;
    let xstar_path = out_dir.join("xstar.json");
    let xstar_json = serde_json::to_string_pretty(&generated.xstar.as_slice().to_vec())?;
    std::fs::write(&xstar_path, xstar_json.as_bytes())?;
    let manifest = Manifest {
        spec: spec.clone(),
        data_file: "data.olar".into(),
        xstar_file: "xstar.json".into(),
        inflate_factor: spec.inflate_factor(),
        inflated_rows: generated.inflated_rows.clone(),
    };
    let manifest_path = out_dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok((manifest, generated))
}

/// Per-feature standardization parameters recorded by `ingest_csv_dataset`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizationSidecar {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Converts a CSV dataset into the binary stream format, selecting feature
/// columns and the label column, optionally standardizing features
/// (mean 0 / std 1; constant columns map to 0). Row order is preserved.
pub fn ingest_csv_dataset(
    csv_path: &Path,
    feature_cols: &[usize],
    label_col: usize,
    normalize: bool,
    out_path: &Path,
) -> Result<PathBuf, IoError> {
    let (rows, has_header) = parse_csv_numeric(csv_path)?;
    let data_rows = &rows[has_header as usize..];
    if data_rows.is_empty() {
        return Err(IoError::BadHeader("csv has no data rows".into()));
    }
    let width = data_rows[0].len();
    for &c in feature_cols.iter().chain(std::iter::once(&label_col)) {
        if c >= width {
            return Err(IoError::MissingColumn { col: c });
        }
    }
    let d = feature_cols.len();
    let mut features = DenseMatrix::with_cols(d);
    let mut labels = Vec::with_capacity(data_rows.len());
    for (i, fields) in data_rows.iter().enumerate() {
        if fields.len() != width {
            return Err(IoError::RaggedRow { row: i as u64, expected: width, found: fields.len() });
        }
        let parse = |c: usize| -> Result<f64, IoError> {
            fields[c].parse::<f64>().map_err(|_| IoError::NonNumeric {
                row: i as u64,
                col: c,
                value: fields[c].clone(),
            })
        };
        let row: Vec<f64> = feature_cols.iter().map(|&c| parse(c)).collect::<Result<_, _>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IoError::NonFiniteEntry { row: i as u64 });
        }
        features.push_row(&row).map_err(|_| IoError::NonFiniteEntry { row: i as u64 })?;
        labels.push(parse(label_col)?);
    }

    let n = features.rows();
    let mut means = vec![0.0; d];
    let mut stds = vec![1.0; d];
    if normalize {
        for j in 0..d {
            let mut mean = 0.0;
            for i in 0..n {
                mean += features.get(i, j);
            }
            mean /= n as f64;
            let mut var = 0.0;
            for i in 0..n {
                let dev = features.get(i, j) - mean;
                var += dev * dev;
            }
            let std = (var / n as f64).sqrt().max(1e-12);
            means[j] = mean;
            stds[j] = std;
            for i in 0..n {
                let v = (features.get(i, j) - mean) / std;
                features.set(i, j, v);
            }
        }
    }

    write_stream(out_path, &features, Some(&labels))?;
    if normalize {
        let sidecar = NormalizationSidecar { means, stds };
        let sidecar_path = out_path.with_extension("norm.json");
        std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    }
    Ok(out_path.to_path_buf())
}
