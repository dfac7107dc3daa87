//! Binary and text file formats. All integers are little-endian.
//!
//! | file     | magic  | header                      | payload                                   |
//! |----------|--------|-----------------------------|-------------------------------------------|
//! | features | `MIHF` | version `u32`, `N`, `D`     | `N·D` `f32`, row-major                    |
//! | codes    | `MIHC` | `N`, `K`                    | `⌈K/8⌉` bytes per row                     |
//! | model    | `MIH1` | `D`, `K`                    | `D·K` `f64` weights row-major, `K` `f64` bias |
//! | index    | `MIHX` | version `u32`, `N`, `K`     | codes payload, ids, optional labels       |
//!
//! Header counts are `u32`. Code bit `j` of a row is bit `j mod 8` of byte
//! `j / 8`, set for `+1`; padding bits are zero.
//!
//! Label files are text with one line per sample: the sample id, then
//! optionally whitespace and a comma-separated list of label tokens.

use std::path::{Path, PathBuf};

use indexmap::IndexSet;

use crate::encoder::{words_for_bits, HashModel, PackedCodes};
use crate::error::{Error, Result};
use crate::retrieval::{HammingIndex, LabelSet};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: [u8; 4] = *b"MIHF";
pub const FEATURE_VERSION: u32 = 1;
pub const CODE_MAGIC: [u8; 4] = *b"MIHC";
pub const MODEL_MAGIC: [u8; 4] = *b"MIH1";
pub const INDEX_MAGIC: [u8; 4] = *b"MIHX";
pub const INDEX_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(corrupt(
                self.path,
                format!("truncated {what} at byte {}", self.pos),
            )),
        }
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got = self.buf.get(..4);
        if got != Some(&expected[..]) {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                expected,
            });
        }
        self.pos = 4;
        Ok(())
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    /// Byte length of `count` items of `width` bytes, rejecting overflow and
    /// anything longer than what is left in the buffer.
    fn payload_len(&self, counts: &[usize], width: usize, what: &str) -> Result<usize> {
        let len = counts
            .iter()
            .try_fold(width, |acc, &c| acc.checked_mul(c))
            .ok_or_else(|| corrupt(self.path, format!("{what} size overflows")))?;
        if len > self.buf.len() - self.pos {
            return Err(corrupt(
                self.path,
                format!(
                    "truncated {what}: need {len} bytes, have {}",
                    self.buf.len() - self.pos
                ),
            ));
        }
        Ok(len)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn header_u32(value: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(value)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::InvalidArgument(format!("{what} = {value} does not fit the file header")))
}

// ---------------------------------------------------------------- features

/// Serializes features, narrowing each value to `f32`.
pub fn encode_features(features: &Matrix) -> Result<Vec<u8>> {
    let (n, d) = features.shape();
    let mut out = Vec::with_capacity(16 + 4 * n * d);
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&header_u32(n, "N")?);
    out.extend_from_slice(&header_u32(d, "D")?);
    for &v in features.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let mut c = Cursor::new(bytes, path);
    c.magic(FEATURE_MAGIC)?;
    let version = c.u32("header")?;
    if version != FEATURE_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let n = c.u32("header")? as usize;
    let d = c.u32("header")? as usize;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    if d == 0 {
        return Err(corrupt(path, "feature dimension is zero"));
    }
    let len = c.payload_len(&[n, d], 4, "payload")?;
    let payload = c.take(len, "payload")?;
    c.finish()?;
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(corrupt(path, format!("non-finite value at row {} col {}", i / d, i % d)));
        }
        data.push(v as f64);
    }
    Matrix::from_vec(n, d, data)
}

pub fn save_features(path: &Path, features: &Matrix) -> Result<()> {
    write_bytes(path, &encode_features(features)?)
}

/// Loads a feature file. Paths ending in `.csv` go through
/// [`load_features_csv`]; everything else must be a binary feature file.
pub fn load_features(path: &Path) -> Result<Matrix> {
    if is_csv(path) {
        return load_features_csv(path);
    }
    decode_features(&read_bytes(path)?, path)
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Headerless CSV, one sample per line.
pub fn parse_features_csv<R: std::io::Read>(reader: R, path: &Path) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (line, record) in rdr.records().enumerate() {
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line + 1,
            reason,
        };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let width = *cols.get_or_insert(record.len());
        if record.len() != width {
            return Err(parse_err(format!("expected {width} fields, found {}", record.len())));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("`{field}` is not finite")));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyDataset);
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

pub fn load_features_csv(path: &Path) -> Result<Matrix> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    parse_features_csv(std::io::BufReader::new(file), path)
}

pub fn save_features_csv(path: &Path, features: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in 0..features.rows() {
        w.write_record(features.row(r).iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

// ------------------------------------------------------------------- codes

fn code_bytes_per_row(bits: usize) -> usize {
    bits.div_ceil(8)
}

fn push_code_rows(out: &mut Vec<u8>, codes: &PackedCodes) {
    let per_row = code_bytes_per_row(codes.bits());
    for r in 0..codes.rows() {
        let words = codes.row(r);
        out.extend((0..per_row).map(|b| (words[b / 8] >> (8 * (b % 8))) as u8));
    }
}

fn read_code_rows(c: &mut Cursor<'_>, rows: usize, bits: usize) -> Result<PackedCodes> {
    let per_row = code_bytes_per_row(bits);
    let wpr = words_for_bits(bits);
    let len = c.payload_len(&[rows, per_row], 1, "code payload")?;
    let payload = c.take(len, "code payload")?;
    let mut words = vec![0u64; rows * wpr];
    for r in 0..rows {
        for (b, &byte) in payload[r * per_row..(r + 1) * per_row].iter().enumerate() {
            words[r * wpr + b / 8] |= (byte as u64) << (8 * (b % 8));
        }
    }
    PackedCodes::from_words(rows, bits, words).map_err(|e| corrupt(c.path, e.to_string()))
}

pub fn encode_codes(codes: &PackedCodes) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + codes.rows() * code_bytes_per_row(codes.bits()));
    out.extend_from_slice(&CODE_MAGIC);
    out.extend_from_slice(&header_u32(codes.rows(), "N")?);
    out.extend_from_slice(&header_u32(codes.bits(), "K")?);
    push_code_rows(&mut out, codes);
    Ok(out)
}

pub fn decode_codes(bytes: &[u8], path: &Path) -> Result<PackedCodes> {
    let mut c = Cursor::new(bytes, path);
    c.magic(CODE_MAGIC)?;
    let n = c.u32("header")? as usize;
    let k = c.u32("header")? as usize;
    if k == 0 {
        return Err(corrupt(path, "code length is zero"));
    }
    let codes = read_code_rows(&mut c, n, k)?;
    c.finish()?;
    Ok(codes)
}

pub fn save_codes(path: &Path, codes: &PackedCodes) -> Result<()> {
    write_bytes(path, &encode_codes(codes)?)
}

pub fn load_codes(path: &Path) -> Result<PackedCodes> {
    decode_codes(&read_bytes(path)?, path)
}

// ------------------------------------------------------------------- model

pub fn encode_model(model: &HashModel) -> Result<Vec<u8>> {
    let (d, k) = (model.feature_dim(), model.code_len());
    let mut out = Vec::with_capacity(12 + 8 * (d * k + k));
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&header_u32(d, "D")?);
    out.extend_from_slice(&header_u32(k, "K")?);
    for &w in model.weights.as_slice().iter().chain(&model.bias) {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8], path: &Path) -> Result<HashModel> {
    let mut c = Cursor::new(bytes, path);
    c.magic(MODEL_MAGIC)?;
    let d = c.u32("header")? as usize;
    let k = c.u32("header")? as usize;
    if d == 0 || k == 0 {
        return Err(corrupt(path, format!("degenerate model shape D={d} K={k}")));
    }
    c.payload_len(&[d + 1, k], 8, "parameters")?;
    let mut weights = Vec::with_capacity(d * k);
    for _ in 0..d * k {
        weights.push(c.f64("weights")?);
    }
    let mut bias = Vec::with_capacity(k);
    for _ in 0..k {
        bias.push(c.f64("bias")?);
    }
    c.finish()?;
    HashModel::new(Matrix::from_vec(d, k, weights)?, bias).map_err(|e| corrupt(path, e.to_string()))
}

pub fn save_model(path: &Path, model: &HashModel) -> Result<()> {
    write_bytes(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<HashModel> {
    decode_model(&read_bytes(path)?, path)
}

// ------------------------------------------------------------------ labels

/// Interned label tokens; ids follow first appearance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab(IndexSet<String>);

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(i) = self.0.get_index_of(token) {
            return i as u32;
        }
        self.0.insert(token.to_string());
        (self.0.len() - 1) as u32
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.0.get_index_of(token).map(|i| i as u32)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.0.get_index(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

/// Contents of a label file.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    pub ids: Vec<u64>,
    pub sets: Vec<LabelSet>,
}

impl LabelTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Fails unless the table has one line per sample.
    pub fn expect_rows(&self, rows: usize, path: &Path) -> Result<()> {
        if self.len() != rows {
            return Err(corrupt(
                path,
                format!("{} label lines for {rows} samples", self.len()),
            ));
        }
        Ok(())
    }
}

/// Parses label text, interning tokens into `vocab`. Blank lines are skipped.
pub fn parse_labels(text: &str, path: &Path, vocab: &mut Vocab) -> Result<LabelTable> {
    let mut ids = Vec::new();
    let mut sets = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (id, rest) = match line.split_once(char::is_whitespace) {
            Some((id, rest)) => (id, rest.trim()),
            None => (line, ""),
        };
        let id: u64 = id.parse().map_err(|_| err(format!("`{id}` is not a sample id")))?;
        let mut labels = Vec::new();
        if !rest.is_empty() {
            for tok in rest.split(',') {
                let tok = tok.trim();
                if tok.is_empty() || tok.contains(char::is_whitespace) {
                    return Err(err(format!("bad label list `{rest}`")));
                }
                labels.push(vocab.intern(tok));
            }
        }
        ids.push(id);
        sets.push(LabelSet::new(labels));
    }
    Ok(LabelTable { ids, sets })
}

pub fn load_labels(path: &Path, vocab: &mut Vocab) -> Result<LabelTable> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_labels(&text, path, vocab)
}

pub fn format_labels(table: &LabelTable, vocab: &Vocab) -> String {
    let mut out = String::new();
    for (id, set) in table.ids.iter().zip(&table.sets) {
        out.push_str(&id.to_string());
        let toks: Vec<&str> = set.ids().iter().filter_map(|&t| vocab.token(t)).collect();
        if !toks.is_empty() {
            out.push(' ');
            out.push_str(&toks.join(","));
        }
        out.push('\n');
    }
    out
}

pub fn save_labels(path: &Path, table: &LabelTable, vocab: &Vocab) -> Result<()> {
    write_bytes(path, format_labels(table, vocab).as_bytes())
}

// ------------------------------------------------------------------- index

/// A Hamming index together with the vocabulary its labels were interned in.
#[derive(Debug, Clone)]
pub struct IndexFile {
    pub index: HammingIndex,
    pub vocab: Vocab,
}

pub fn encode_index(index: &HammingIndex, vocab: &Vocab) -> Result<Vec<u8>> {
    let codes = index.codes();
    let mut out = Vec::new();
    out.extend_from_slice(&INDEX_MAGIC);
    out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    out.extend_from_slice(&header_u32(codes.rows(), "N")?);
    out.extend_from_slice(&header_u32(codes.bits(), "K")?);
    push_code_rows(&mut out, codes);
    for id in index.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    match index.labels() {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(sets) => {
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend_from_slice(&header_u32(vocab.len(), "vocabulary size")?);
            for tok in vocab.tokens() {
                out.extend_from_slice(&header_u32(tok.len(), "token length")?);
                out.extend_from_slice(tok.as_bytes());
            }
            for set in sets {
                out.extend_from_slice(&header_u32(set.ids().len(), "label count")?);
                for &l in set.ids() {
                    out.extend_from_slice(&l.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_index(bytes: &[u8], path: &Path) -> Result<IndexFile> {
    let mut c = Cursor::new(bytes, path);
    c.magic(INDEX_MAGIC)?;
    let version = c.u32("header")?;
    if version != INDEX_VERSION {
        return Err(corrupt(path, format!("unsupported version {version}")));
    }
    let n = c.u32("header")? as usize;
    let k = c.u32("header")? as usize;
    if k == 0 {
        return Err(corrupt(path, "code length is zero"));
    }
    let codes = read_code_rows(&mut c, n, k)?;
    c.payload_len(&[n], 8, "ids")?;
    let ids = (0..n).map(|_| c.u64("ids")).collect::<Result<Vec<_>>>()?;
    let bad = |e: Error| corrupt(path, e.to_string());
    let mut index = HammingIndex::with_ids(codes, ids).map_err(bad)?;
    let mut vocab = Vocab::new();
    match c.u32("label flag")? {
        0 => {}
        1 => {
            let vn = c.u32("vocabulary")? as usize;
            for _ in 0..vn {
                let len = c.u32("token")? as usize;
                let raw = c.take(len, "token")?;
                let tok = std::str::from_utf8(raw).map_err(|_| corrupt(path, "token is not UTF-8"))?;
                if vocab.id(tok).is_some() {
                    return Err(corrupt(path, format!("duplicate token `{tok}`")));
                }
                vocab.intern(tok);
            }
            let mut sets = Vec::with_capacity(n.min(bytes.len()));
            for _ in 0..n {
                let m = c.u32("label count")? as usize;
                c.payload_len(&[m], 4, "labels")?;
                let mut ls = Vec::with_capacity(m);
                for _ in 0..m {
                    let l = c.u32("labels")?;
                    if l as usize >= vn {
                        return Err(corrupt(path, format!("label id {l} outside vocabulary of {vn}")));
                    }
                    ls.push(l);
                }
                sets.push(LabelSet::new(ls));
            }
            index = index.with_labels(sets).map_err(bad)?;
        }
        f => return Err(corrupt(path, format!("unknown label flag {f}"))),
    }
    c.finish()?;
    Ok(IndexFile { index, vocab })
}

pub fn save_index(path: &Path, index: &HammingIndex, vocab: &Vocab) -> Result<()> {
    write_bytes(path, &encode_index(index, vocab)?)
}

pub fn load_index(path: &Path) -> Result<IndexFile> {
    decode_index(&read_bytes(path)?, path)
}

// --------------------------------------------------------------- csv output

/// Writes a CSV file with a header row.
pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

pub(crate) fn ensure_dir(path: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}
