//! Multiple sequence alignments: the residue alphabet, aligned rows with
//! deletion counts, A3M reading/writing and the row comparison primitives
//! used by trimming.
//!
//! A3M convention: uppercase letters and `-` are aligned columns, lowercase
//! letters are residues inserted relative to the query. An insertion run is
//! not kept as sequence; its length is stored as the deletion count of the
//! next aligned column. Insertions after the last aligned column are dropped.

use std::fmt;

use crate::error::{Error, Result};

/// Token order of the 22-symbol vocabulary: 20 amino acids, rare, gap.
pub const VOCAB: &[u8; 22] = b"ARNDCQEGHILKMFPSTWYVX-";
pub const VOCAB_SIZE: usize = 22;
pub const RARE_TOKEN: u8 = 20;
pub const GAP_TOKEN: u8 = 21;

/// One aligned column symbol, stored as its token id in `[0, 21]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ResidueSymbol(u8);

impl ResidueSymbol {
    pub const GAP: ResidueSymbol = ResidueSymbol(GAP_TOKEN);
    pub const RARE: ResidueSymbol = ResidueSymbol(RARE_TOKEN);

    pub fn from_token(token: u8) -> Option<Self> {
        (usize::from(token) < VOCAB_SIZE).then_some(ResidueSymbol(token))
    }

    /// Maps an uppercase residue letter or `-`. Nonstandard residues
    /// (B, Z, U, O, J) collapse to the rare symbol `X`.
    pub fn from_char(c: char) -> Option<Self> {
        let c = match c {
            'B' | 'Z' | 'U' | 'O' | 'J' => 'X',
            c => c,
        };
        VOCAB
            .iter()
            .position(|&v| char::from(v) == c)
            .map(|i| ResidueSymbol(i as u8))
    }

    pub fn token(self) -> u8 {
        self.0
    }

    pub fn to_char(self) -> char {
        char::from(VOCAB[usize::from(self.0)])
    }

    pub fn is_gap(self) -> bool {
        self.0 == GAP_TOKEN
    }
}

impl fmt::Display for ResidueSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_char())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignedRow {
    pub header: String,
    pub symbols: Vec<ResidueSymbol>,
    /// Residues deleted immediately before each aligned column.
    pub deletions: Vec<u32>,
}

impl AlignedRow {
    pub fn new(header: impl Into<String>, symbols: Vec<ResidueSymbol>, deletions: Vec<u32>) -> Result<Self> {
        if symbols.len() != deletions.len() {
            return Err(Error::shape(format!(
                "row has {} symbols but {} deletion counts",
                symbols.len(),
                deletions.len()
            )));
        }
        Ok(AlignedRow { header: header.into(), symbols, deletions })
    }

    /// Row from an aligned string of uppercase letters and `-`, no deletions.
    pub fn from_aligned(header: impl Into<String>, seq: &str) -> Result<Self> {
        let symbols = seq
            .chars()
            .map(|c| {
                ResidueSymbol::from_char(c)
                    .ok_or_else(|| Error::invalid(format!("illegal aligned character {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = symbols.len();
        AlignedRow::new(header, symbols, vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn sequence(&self) -> String {
        self.symbols.iter().map(|s| s.to_char()).collect()
    }

    pub fn has_gaps(&self) -> bool {
        self.symbols.iter().any(|s| s.is_gap())
    }
}

/// An alignment whose first row is the gap-free query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Msa {
    rows: Vec<AlignedRow>,
}

impl Msa {
    pub fn new(rows: Vec<AlignedRow>) -> Result<Self> {
        let query = rows.first().ok_or(Error::EmptyInput)?;
        if query.has_gaps() {
            return Err(Error::invalid("query row contains gaps"));
        }
        if query.deletions.iter().any(|&d| d != 0) {
            return Err(Error::invalid("query row contains deletions"));
        }
        let len = query.len();
        if len == 0 {
            return Err(Error::invalid("query row is empty"));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != len) {
            return Err(Error::shape(format!(
                "row {i} has aligned length {} but the query has {len}",
                r.len()
            )));
        }
        Ok(Msa { rows })
    }

    /// Single-row alignment from a bare sequence.
    pub fn from_query(header: impl Into<String>, seq: &str) -> Result<Self> {
        Msa::new(vec![AlignedRow::from_aligned(header, seq)?])
    }

    pub fn query(&self) -> &AlignedRow {
        &self.rows[0]
    }

    pub fn rows(&self) -> &[AlignedRow] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &AlignedRow {
        &self.rows[i]
    }

    pub fn depth(&self) -> usize {
        self.rows.len()
    }

    pub fn len(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn into_rows(self) -> Vec<AlignedRow> {
        self.rows
    }

    /// Sub-alignment made of the given row indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Msa> {
        let rows = indices
            .iter()
            .map(|&i| {
                self.rows
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("row index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Msa::new(rows)
    }

    /// Contiguous column window `[start, start + len)`.
    pub fn crop_columns(&self, start: usize, len: usize) -> Result<Msa> {
        if len == 0 || start + len > self.len() {
            return Err(Error::invalid(format!(
                "column window {start}..{} outside alignment of length {}",
                start + len,
                self.len()
            )));
        }
        let rows = self
            .rows
            .iter()
            .map(|r| AlignedRow {
                header: r.header.clone(),
                symbols: r.symbols[start..start + len].to_vec(),
                deletions: r.deletions[start..start + len].to_vec(),
            })
            .collect();
        Msa::new(rows)
    }
}

/// Parses A3M (or aligned FASTA) text.
pub fn parse_a3m(text: &str) -> Result<Msa> {
    let mut records: Vec<(String, usize, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(header) = line.strip_prefix('>') {
            records.push((header.to_string(), lineno + 1, String::new()));
        } else {
            match records.last_mut() {
                Some((_, _, seq)) => seq.push_str(line),
                None => {
                    return Err(Error::Parse {
                        line: lineno + 1,
                        msg: "sequence data before the first '>' header".into(),
                    })
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }

    let mut rows = Vec::with_capacity(records.len());
    for (i, (header, line, seq)) in records.into_iter().enumerate() {
        let row = parse_record(header, &seq, line)?;
        if i == 0 {
            if row.has_gaps() {
                return Err(Error::Parse { line, msg: "query record contains gaps".into() });
            }
            if row.deletions.iter().any(|&d| d > 0) || seq.chars().any(|c| c.is_ascii_lowercase()) {
                return Err(Error::Parse { line, msg: "query record contains insertions".into() });
            }
            if row.is_empty() {
                return Err(Error::Parse { line, msg: "query record is empty".into() });
            }
        } else if row.len() != rows.first().map(AlignedRow::len).unwrap_or(0) {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "aligned length {} differs from query length {}",
                    row.len(),
                    rows[0].len()
                ),
            });
        }
        rows.push(row);
    }
    Msa::new(rows)
}

fn parse_record(header: String, seq: &str, line: usize) -> Result<AlignedRow> {
    let mut symbols = Vec::with_capacity(seq.len());
    let mut deletions = Vec::with_capacity(seq.len());
    let mut pending = 0u32;
    for c in seq.chars() {
        if c.is_ascii_lowercase() {
            pending += 1;
        } else if c == '.' || c.is_whitespace() {
            // gap in an insert column; carries no information here
        } else if let Some(sym) = ResidueSymbol::from_char(c) {
            symbols.push(sym);
            deletions.push(pending);
            pending = 0;
        } else {
            return Err(Error::Parse { line, msg: format!("illegal character {c:?}") });
        }
    }
    AlignedRow::new(header, symbols, deletions)
}

/// Serializes to A3M. Deleted residues are re-emitted as runs of `x`.
pub fn write_a3m(msa: &Msa) -> String {
    let mut out = String::new();
    for (i, row) in msa.rows().iter().enumerate() {
        out.push('>');
        if row.header.is_empty() {
            out.push_str(&format!("seq{i}"));
        } else {
            out.push_str(&row.header);
        }
        out.push('\n');
        for (sym, &del) in row.symbols.iter().zip(&row.deletions) {
            for _ in 0..del {
                out.push('x');
            }
            out.push(sym.to_char());
        }
        out.push('\n');
    }
    out
}

fn check_same_len(a: &AlignedRow, b: &AlignedRow) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("rows of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty rows"));
    }
    Ok(())
}

/// Fraction of columns where both rows hold the same non-gap symbol,
/// over the full aligned length.
pub fn sequence_identity(row: &AlignedRow, query: &AlignedRow) -> Result<f64> {
    check_same_len(row, query)?;
    let matches = row
        .symbols
        .iter()
        .zip(&query.symbols)
        .filter(|(a, b)| a == b && !a.is_gap())
        .count();
    Ok(matches as f64 / row.len() as f64)
}

/// Fraction of non-gap columns.
pub fn coverage(row: &AlignedRow) -> f64 {
    if row.is_empty() {
        return 0.0;
    }
    let filled = row.symbols.iter().filter(|s| !s.is_gap()).count();
    filled as f64 / row.len() as f64
}

/// Number of differing columns; the gap counts as an ordinary symbol.
pub fn hamming_distance(a: &AlignedRow, b: &AlignedRow) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("rows of length {} and {}", a.len(), b.len())));
    }
    Ok(a.symbols.iter().zip(&b.symbols).filter(|(x, y)| x != y).count())
}
