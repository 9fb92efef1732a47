//! Word-embedding space: loading, normalization and nearest-word queries.
//!
//! Rows are always stored L2-normalized, so a dot product against a row is a
//! cosine similarity once the query is normalized. Two on-disk layouts are
//! understood: the GloVe text layout (`token v1 v2 ... ve` per line) and a
//! compact little-endian binary cache starting with the magic `EMB1`.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EMB1";

/// Token to unit-norm semantic vector table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Array2<f32>,
}

/// Bookkeeping from a load: how many raw rows were dropped for having zero norm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub rows_read: usize,
    pub zero_norm_dropped: usize,
    pub filtered_out: usize,
}

impl EmbeddingTable {
    /// Builds a table from raw rows. Tokens are lowercased, rows normalized,
    /// zero-norm rows dropped. Duplicate tokens are rejected.
    pub fn from_rows<I, S>(rows: I) -> Result<(Self, LoadStats)>
    where
        I: IntoIterator<Item = (S, Vec<f32>)>,
        S: AsRef<str>,
    {
        let mut builder = Builder::default();
        for (i, (token, values)) in rows.into_iter().enumerate() {
            builder
                .push(token.as_ref(), values)
                .map_err(|message| Error::Parse {
                    path: "<memory>".into(),
                    line: i + 1,
                    message,
                })?;
        }
        builder.finish()
    }

    /// Loads either layout, dispatching on the binary magic.
    pub fn load(path: impl AsRef<Path>, vocab_filter: Option<&HashSet<String>>) -> Result<Self> {
        let path = path.as_ref();
        let mut magic = [0u8; 4];
        let is_binary = File::open(path)
            .and_then(|mut f| f.read_exact(&mut magic))
            .map(|_| &magic == BINARY_MAGIC)
            .unwrap_or(false);
        let (table, stats) = if is_binary {
            Self::load_binary(path, vocab_filter)?
        } else {
            Self::load_text(path, vocab_filter)?
        };
        if stats.zero_norm_dropped > 0 {
            warn!(
                "{}: dropped {} zero-norm embedding rows",
                path.display(),
                stats.zero_norm_dropped
            );
        }
        Ok(table)
    }

    /// Parses the GloVe text layout.
    pub fn load_text(
        path: impl AsRef<Path>,
        vocab_filter: Option<&HashSet<String>>,
    ) -> Result<(Self, LoadStats)> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        let mut builder = Builder::default();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line_no = i + 1;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            let token = fields.next().unwrap_or_default().to_lowercase();
            if let Some(filter) = vocab_filter {
                if !filter.contains(&token) {
                    builder.stats.filtered_out += 1;
                    continue;
                }
            }
            let values = fields
                .map(|f| f.parse::<f32>())
                .collect::<std::result::Result<Vec<f32>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("bad number: {e}"),
                })?;
            builder
                .push(&token, values)
                .map_err(|message| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message,
                })?;
        }
        builder.finish()
    }

    /// Reads the binary cache written by [`EmbeddingTable::save_binary`].
    pub fn load_binary(
        path: impl AsRef<Path>,
        vocab_filter: Option<&HashSet<String>>,
    ) -> Result<(Self, LoadStats)> {
        let path = path.as_ref();
        let bad = |message: &str| Error::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cursor = ByteCursor::new(&bytes);
        if cursor.take(4).ok_or_else(|| bad("truncated header"))? != BINARY_MAGIC {
            return Err(bad("missing EMB1 magic"));
        }
        let count = cursor.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let dim = cursor.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut tokens = Vec::with_capacity(count);
        for _ in 0..count {
            let len = cursor.u32().ok_or_else(|| bad("truncated token"))? as usize;
            let raw = cursor.take(len).ok_or_else(|| bad("truncated token"))?;
            let token = std::str::from_utf8(raw).map_err(|_| bad("token is not UTF-8"))?;
            tokens.push(token.to_string());
        }
        let mut builder = Builder::default();
        for token in tokens {
            let mut row = Vec::with_capacity(dim);
            for _ in 0..dim {
                row.push(cursor.f32().ok_or_else(|| bad("truncated vectors"))?);
            }
            if let Some(filter) = vocab_filter {
                if !filter.contains(&token.to_lowercase()) {
                    builder.stats.filtered_out += 1;
                    continue;
                }
            }
            builder.push(&token, row).map_err(|m| bad(&m))?;
        }
        if cursor.remaining() != 0 {
            return Err(bad("trailing bytes after vectors"));
        }
        builder.finish()
    }

    /// Writes the `EMB1` cache: header, length-prefixed tokens, then row-major f32 vectors.
    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(BINARY_MAGIC)?;
        write(&(self.len() as u32).to_le_bytes())?;
        write(&(self.dim() as u32).to_le_bytes())?;
        for token in &self.tokens {
            write(&(token.len() as u32).to_le_bytes())?;
            write(token.as_bytes())?;
        }
        for v in self.vectors.iter() {
            write(&v.to_le_bytes())?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes the text layout (rows are already normalized).
    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text_rows(
            path,
            self.tokens
                .iter()
                .zip(self.vectors.rows())
                .map(|(t, r)| (t.as_str(), r.to_vec())),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&token.to_lowercase())
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(&token.to_lowercase()).copied()
    }

    pub fn lookup(&self, token: &str) -> Option<ArrayView1<'_, f32>> {
        self.index_of(token).map(|i| self.vectors.row(i))
    }

    /// Unit vector for a (possibly multi-token) concept name.
    ///
    /// Multi-token names (split on spaces or underscores) are mean-pooled over
    /// their constituent rows and re-normalized.
    pub fn concept_vector(&self, concept_name: &str) -> Result<Array1<f64>> {
        let lowered = concept_name.to_lowercase();
        let parts = concept_tokens(&lowered);
        if parts.is_empty() {
            return Err(Error::UnknownConcept {
                concept: concept_name.to_string(),
                missing: vec![],
            });
        }
        let missing: Vec<String> = parts
            .iter()
            .filter(|p| !self.index.contains_key(**p))
            .map(|p| p.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnknownConcept {
                concept: concept_name.to_string(),
                missing,
            });
        }
        let mut acc = Array1::<f64>::zeros(self.dim());
        for part in &parts {
            let row = self.vectors.row(self.index[*part]);
            acc.zip_mut_with(&row, |a, &b| *a += b as f64);
        }
        if parts.len() == 1 {
            return Ok(acc);
        }
        acc /= parts.len() as f64;
        normalize(acc)
    }

    /// The `s` tokens whose rows have the highest cosine similarity with `query`.
    ///
    /// Ties are broken lexicographically on the token.
    pub fn nearest_words(&self, query: ArrayView1<f64>, s: usize) -> Result<Vec<(String, f64)>> {
        if s == 0 {
            return Err(Error::InvalidArgument("s must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::Shape(format!(
                "query has dimension {}, table has {}",
                query.len(),
                self.dim()
            )));
        }
        let norm = query.dot(&query).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector);
        }
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let dot: f64 = row.iter().zip(query.iter()).map(|(&a, &b)| a as f64 * b).sum();
                (i, (dot / norm).clamp(-1.0, 1.0))
            })
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.tokens[a.0].cmp(&self.tokens[b.0]))
        };
        let k = s.min(scored.len());
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_by(cmp);
        Ok(scored
            .into_iter()
            .map(|(i, sim)| (self.tokens[i].clone(), sim))
            .collect())
    }

    /// SHA-256 over tokens and vector bytes; identifies the space a model was trained against.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update((self.dim() as u64).to_le_bytes());
        for token in &self.tokens {
            hasher.update((token.len() as u64).to_le_bytes());
            hasher.update(token.as_bytes());
        }
        for v in self.vectors.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Splits a lowercased concept name into its constituent tokens.
pub fn concept_tokens(name: &str) -> Vec<&str> {
    name.split([' ', '_']).filter(|p| !p.is_empty()).collect()
}

/// True when the concept name is a single token (after splitting on spaces/underscores).
pub fn is_single_token(name: &str) -> bool {
    concept_tokens(name).len() == 1
}

pub fn normalize(mut v: Array1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector);
    }
    v /= norm;
    Ok(v)
}

/// Writes rows in the GloVe text layout with shortest round-trip float formatting.
pub fn write_text_rows<'a, I>(path: impl AsRef<Path>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, Vec<f32>)>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (token, values) in rows {
        let mut line = String::with_capacity(token.len() + values.len() * 12);
        line.push_str(token);
        for v in values {
            line.push(' ');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Default)]
struct Builder {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
    dim: Option<usize>,
    stats: LoadStats,
}

impl Builder {
    fn push(&mut self, token: &str, values: Vec<f32>) -> std::result::Result<(), String> {
        self.stats.rows_read += 1;
        let token = token.to_lowercase();
        if token.is_empty() {
            return Err("empty token".into());
        }
        match self.dim {
            None if values.is_empty() => return Err("row has no vector components".into()),
            None => self.dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(format!(
                    "expected {} fields after the token, found {}",
                    d,
                    values.len()
                ))
            }
            Some(_) => {}
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(format!("non-finite component for token `{token}`"));
        }
        if self.index.contains_key(&token) {
            return Err(format!("duplicate token `{token}`"));
        }
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            self.stats.zero_norm_dropped += 1;
            return Ok(());
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
        self.data
            .extend(values.iter().map(|&v| ((v as f64) / norm) as f32));
        Ok(())
    }

    fn finish(self) -> Result<(EmbeddingTable, LoadStats)> {
        if self.tokens.is_empty() {
            return Err(Error::Empty("embedding table has no usable rows".into()));
        }
        let dim = self.dim.unwrap_or(0);
        let vectors = Array2::from_shape_vec((self.tokens.len(), dim), self.data)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok((
            EmbeddingTable {
                tokens: self.tokens,
                index: self.index,
                vectors,
            },
            self.stats,
        ))
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn assert_vec_close(a: &Array1<f64>, b: &Array1<f64>, eps: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= eps, "{a} vs {b}");
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn toy() -> EmbeddingTable {
        let h = std::f32::consts::FRAC_1_SQRT_2;
        EmbeddingTable::from_rows(vec![
            ("a", vec![1.0, 0.0]),
            ("b", vec![0.0, 1.0]),
            ("c", vec![h, h]),
        ])
        .unwrap()
        .0
    }

    #[test]
    fn normalizes_rows_on_load() {
        let f = write_tmp("dog 2 0 0 0\ncat 0 3 0 0\nemu 1 1 1 1\n");
        let (t, stats) = EmbeddingTable::load_text(f.path(), None).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(stats.zero_norm_dropped, 0);
        assert_eq!(t.lookup("dog").unwrap().to_vec(), vec![1.0, 0.0, 0.0, 0.0]);
        for row in t.vectors().rows() {
            let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_token_names_second_line() {
        let f = write_tmp("dog 1 0\ncat 0 1\ndog 1 1\n");
        match EmbeddingTable::load_text(f.path(), None) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_field_count_names_line() {
        let f = write_tmp("dog 1 0 0\ncat 0 1\n");
        match EmbeddingTable::load_text(f.path(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn zero_rows_dropped_and_filter_applied() {
        let f = write_tmp("Dog 1 0\nzero 0 0\ncat 0 1\n");
        let (t, stats) = EmbeddingTable::load_text(f.path(), None).unwrap();
        assert_eq!(stats.zero_norm_dropped, 1);
        assert!(t.contains("dog"));
        assert!(!t.contains("zero"));

        let filter: HashSet<String> = ["cat".to_string()].into();
        let (t, _) = EmbeddingTable::load_text(f.path(), Some(&filter)).unwrap();
        assert_eq!(t.tokens(), &["cat".to_string()]);

        let none: HashSet<String> = ["nothing".to_string()].into();
        assert!(matches!(
            EmbeddingTable::load_text(f.path(), Some(&none)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn concept_vector_single_and_multi_token() {
        let (t, _) = EmbeddingTable::from_rows(vec![
            ("tennis", vec![1.0, 0.0, 0.0, 0.0]),
            ("racket", vec![0.0, 2.0, 0.0, 0.0]),
            ("dog", vec![0.0, 0.0, 1.0, 1.0]),
        ])
        .unwrap();
        let dog = t.concept_vector("dog").unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_vec_close(&dog, &array![0.0, 0.0, h, h], 1e-7);

        // mean of (1,0,0,0) and (0,1,0,0) is (.5,.5,0,0); renormalized -> (h,h,0,0)
        let v = t.concept_vector("Tennis_Racket").unwrap();
        assert_vec_close(&v, &array![h, h, 0.0, 0.0], 1e-7);
        assert_eq!(t.concept_vector("tennis racket").unwrap(), v);

        match t.concept_vector("qqqxyz") {
            Err(Error::UnknownConcept { missing, .. }) => assert_eq!(missing, vec!["qqqxyz"]),
            other => panic!("expected unknown concept, got {other:?}"),
        }
    }

    #[test]
    fn nearest_words_hand_cosines() {
        let t = toy();
        let got = t.nearest_words(array![1.0, 0.0].view(), 2).unwrap();
        assert_eq!(got[0].0, "a");
        assert_abs_diff_eq!(got[0].1, 1.0, epsilon = 1e-7);
        assert_eq!(got[1].0, "c");
        assert_abs_diff_eq!(got[1].1, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-6);

        let all = t.nearest_words(array![1.0, 0.0].view(), 10).unwrap();
        assert_eq!(all.len(), 3);

        assert!(matches!(
            t.nearest_words(array![0.0, 0.0].view(), 1),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn ties_broken_lexicographically() {
        let (t, _) = EmbeddingTable::from_rows(vec![
            ("zeta", vec![1.0, 0.0]),
            ("alpha", vec![1.0, 0.0]),
            ("mid", vec![0.0, 1.0]),
        ])
        .unwrap();
        let got = t.nearest_words(array![1.0, 0.0].view(), 2).unwrap();
        assert_eq!(got[0].0, "alpha");
        assert_eq!(got[1].0, "zeta");
    }

    #[test]
    fn binary_cache_round_trip() {
        let t = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.bin");
        t.save_binary(&p).unwrap();
        let back = EmbeddingTable::load(&p, None).unwrap();
        assert_eq!(back.tokens(), t.tokens());
        assert_eq!(back.vectors(), t.vectors());
        assert_eq!(back.fingerprint(), t.fingerprint());
        let len = std::fs::metadata(&p).unwrap().len() as usize;
        assert_eq!(len, 12 + 3 * (4 + 1) + 3 * 2 * 4);
    }
}
