//! Sentence-level cleaning of parallel text.
//!
//! Each side of a pair goes through, in order:
//!
//! 1. encoding validation (the whole pair is dropped on failure),
//! 2. a single code point character mapping (traditional → simplified),
//! 3. fullwidth → halfwidth folding,
//! 4. HTML character reference decoding.
//!
//! Steps 2–4 are repeated until the text stops changing, so that a
//! reference spelled with fullwidth characters, or one that decodes to
//! another reference, ends up fully normalized and the pipeline is
//! idempotent.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An aligned, cleaned sentence pair. `line_no` is 1-based in the input files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: String,
    pub tgt: String,
    pub line_no: usize,
}

/// A not-yet-validated pair as read from disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub src: Vec<u8>,
    pub tgt: Vec<u8>,
    pub line_no: usize,
}

/// Single code point to single code point replacement table.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CharMapping {
    entries: HashMap<char, char>,
}

/// A small traditional → simplified sample, enough for demos and tests.
pub const SAMPLE_MAPPING_TSV: &str = include_str!("../data/t2s_sample.tsv");

impl CharMapping {
    /// Builds a mapping, resolving chains (`a→b`, `b→c` becomes `a→c`).
    ///
    /// Duplicate keys with different values, cycles longer than one and
    /// targets that are fullwidth forms are rejected.
    pub fn new(pairs: impl IntoIterator<Item = (char, char)>) -> Result<Self> {
        let mut raw: HashMap<char, char> = HashMap::new();
        for (from, to) in pairs {
            if let Some(prev) = raw.insert(from, to) {
                if prev != to {
                    return Err(Error::Data(format!(
                        "mapping lists {from:?} twice ({prev:?} and {to:?})"
                    )));
                }
            }
        }
        if let Some((from, to)) = raw.iter().find(|(_, &to)| halfwidth_char(to) != to) {
            return Err(Error::Data(format!(
                "mapping sends {from:?} to the fullwidth form {to:?}"
            )));
        }
        let mut entries = HashMap::with_capacity(raw.len());
        for &start in raw.keys() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(&next) = raw.get(&cur) {
                if next == cur {
                    break;
                }
                cur = next;
                steps += 1;
                if steps > raw.len() {
                    return Err(Error::Data(format!(
                        "mapping contains a cycle through {start:?}"
                    )));
                }
            }
            entries.insert(start, cur);
        }
        Ok(CharMapping { entries })
    }

    /// Parses "FROM<TAB>TO" lines; `#` starts a comment. Each field is either
    /// the literal character or a `U+XXXX` code point.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = match line.find('#') {
                Some(0) => continue,
                Some(at) => &line[..at],
                None => line,
            };
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split('\t').map(str::trim).filter(|f| !f.is_empty());
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Data(format!(
                    "mapping line {}: expected two tab-separated code points",
                    i + 1
                )));
            };
            pairs.push((parse_code_point(a, i + 1)?, parse_code_point(b, i + 1)?));
        }
        Self::new(pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }

    pub fn sample() -> Self {
        Self::parse_tsv(SAMPLE_MAPPING_TSV).expect("bundled mapping is well-formed")
    }

    pub fn get(&self, c: char) -> Option<char> {
        self.entries.get(&c).copied()
    }

    /// Resolved entries, sorted by key.
    pub fn pairs(&self) -> Vec<(char, char)> {
        let mut v: Vec<(char, char)> = self.entries.iter().map(|(&a, &b)| (a, b)).collect();
        v.sort_unstable();
        v
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn parse_code_point(field: &str, line: usize) -> Result<char> {
    let bad = || Error::Data(format!("mapping line {line}: bad code point {field:?}"));
    if let Some(hex) = field.strip_prefix("U+").or_else(|| field.strip_prefix("u+")) {
        let v = u32::from_str_radix(hex, 16).map_err(|_| bad())?;
        return char::from_u32(v).ok_or_else(bad);
    }
    let mut chars = field.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => Ok(c),
        _ => Err(bad()),
    }
}

/// Characters that count as an encoding error when present in decoded text.
fn is_disallowed(c: char) -> bool {
    c == '\u{FFFD}' || (c.is_ascii_control() && c != '\t' && c != '\u{7F}')
}

/// Decodes `raw` as UTF-8, rejecting malformed bytes, U+FFFD and C0 control
/// characters other than tab.
pub fn validate_encoding(raw: &[u8]) -> Option<String> {
    let text = std::str::from_utf8(raw).ok()?;
    if text.chars().any(is_disallowed) {
        return None;
    }
    Some(text.to_owned())
}

const FULLWIDTH_OFFSET: u32 = 0xFEE0;

/// Folds U+FF01..=U+FF5E onto ASCII and U+3000 onto a space.
pub fn to_halfwidth(s: &str) -> String {
    s.chars().map(halfwidth_char).collect()
}

fn halfwidth_char(c: char) -> char {
    match c as u32 {
        0xFF01..=0xFF5E => char::from_u32(c as u32 - FULLWIDTH_OFFSET).unwrap_or(c),
        0x3000 => ' ',
        _ => c,
    }
}

pub fn map_chars(s: &str, m: &CharMapping) -> String {
    s.chars().map(|c| m.get(c).unwrap_or(c)).collect()
}

/// Named references recognised without an extra table.
pub const BASE_ENTITIES: [(&str, char); 6] = [
    ("amp", '&'),
    ("lt", '<'),
    ("gt", '>'),
    ("quot", '"'),
    ("apos", '\''),
    ("nbsp", '\u{A0}'),
];

/// Named character references, extensible from a "name<TAB>char" file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTable {
    names: BTreeMap<String, char>,
    longest: usize,
}

impl Default for EntityTable {
    fn default() -> Self {
        let names: BTreeMap<String, char> = BASE_ENTITIES
            .iter()
            .map(|&(n, c)| (n.to_owned(), c))
            .collect();
        let longest = names.keys().map(String::len).max().unwrap_or(0);
        EntityTable { names, longest }
    }
}

impl EntityTable {
    /// Adds entries from "name<TAB>char" lines (char may be `U+XXXX`).
    pub fn extend_from_tsv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("entity line {}: expected name<TAB>char", i + 1))
            })?;
            let name = name.trim().trim_start_matches('&').trim_end_matches(';');
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(Error::Data(format!("entity line {}: bad name {name:?}", i + 1)));
            }
            let c = parse_code_point(value.trim(), i + 1)?;
            if is_disallowed(c) {
                return Err(Error::Data(format!(
                    "entity line {}: {name} maps to a disallowed character",
                    i + 1
                )));
            }
            self.longest = self.longest.max(name.len());
            self.names.insert(name.to_owned(), c);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<char> {
        self.names.get(name).copied()
    }
}

/// Single-pass decoding of `&name;`, `&#N;` and `&#xN;` using the base table.
pub fn decode_html_refs(s: &str) -> String {
    decode_html_refs_with(s, &EntityTable::default())
}

/// Like [`decode_html_refs`] with a caller-supplied named-entity table.
///
/// Unknown or malformed references, and numeric references to characters
/// that [`validate_encoding`] would reject, are left untouched.
pub fn decode_html_refs_with(s: &str, table: &EntityTable) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(at) = rest.find('&') {
        out.push_str(&rest[..at]);
        let tail = &rest[at..];
        match parse_reference(tail, table) {
            Some((c, used)) => {
                out.push(c);
                rest = &tail[used..];
            }
            None => {
                out.push('&');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Parses a reference at the start of `s` (which begins with '&').
/// Returns the character and the number of bytes consumed.
fn parse_reference(s: &str, table: &EntityTable) -> Option<(char, usize)> {
    let body = &s[1..];
    let semi = body.find(';')?;
    let inner = &body[..semi];
    let used = semi + 2;
    let c = if let Some(num) = inner.strip_prefix('#') {
        let (digits, radix) = match num.strip_prefix(['x', 'X']) {
            Some(hex) => (hex, 16),
            None => (num, 10),
        };
        if digits.is_empty() || digits.len() > 8 || !digits.chars().all(|c| c.is_digit(radix)) {
            return None;
        }
        let c = char::from_u32(u32::from_str_radix(digits, radix).ok()?)?;
        if c == '\0' || is_disallowed(c) {
            return None;
        }
        c
    } else {
        if inner.len() > table.longest {
            return None;
        }
        table.get(inner)?
    };
    Some((c, used))
}

/// Per-rule counts of sides (source or target) that a rule changed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCounts {
    pub char_mapping: usize,
    pub halfwidth: usize,
    pub html_refs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input: usize,
    pub kept: usize,
    pub dropped_encoding: usize,
    pub dropped_empty: usize,
    pub transformed: RuleCounts,
}

impl CleaningReport {
    /// Associative merge, for reports computed over disjoint chunks.
    pub fn merge(&mut self, other: &CleaningReport) {
        self.input += other.input;
        self.kept += other.kept;
        self.dropped_encoding += other.dropped_encoding;
        self.dropped_empty += other.dropped_empty;
        self.transformed.char_mapping += other.transformed.char_mapping;
        self.transformed.halfwidth += other.transformed.halfwidth;
        self.transformed.html_refs += other.transformed.html_refs;
    }
}

/// Stateless cleaner holding the mapping and entity table.
#[derive(Debug, Clone, Default)]
pub struct Cleaner {
    pub mapping: CharMapping,
    pub entities: EntityTable,
}

impl Cleaner {
    pub fn new(mapping: CharMapping) -> Self {
        Cleaner {
            mapping,
            entities: EntityTable::default(),
        }
    }

    /// Normalizes one already-validated side; records which rules fired.
    pub fn normalize(&self, text: &str, fired: &mut RuleCounts) -> String {
        let (mut mapped, mut folded, mut decoded) = (false, false, false);
        let mut cur = text.to_owned();
        loop {
            let m = map_chars(&cur, &self.mapping);
            mapped |= m != cur;
            let h = to_halfwidth(&m);
            folded |= h != m;
            let d = decode_html_refs_with(&h, &self.entities);
            decoded |= d != h;
            if d == cur {
                break;
            }
            cur = d;
        }
        fired.char_mapping += mapped as usize;
        fired.halfwidth += folded as usize;
        fired.html_refs += decoded as usize;
        cur
    }

    /// Validates and normalizes one pair; `Err` carries the drop reason.
    pub fn clean_pair(&self, raw: &RawPair, report: &mut CleaningReport) -> Option<SentencePair> {
        report.input += 1;
        let (Some(src), Some(tgt)) = (validate_encoding(&raw.src), validate_encoding(&raw.tgt))
        else {
            report.dropped_encoding += 1;
            return None;
        };
        let src = self.normalize(&src, &mut report.transformed);
        let tgt = self.normalize(&tgt, &mut report.transformed);
        if src.trim().is_empty() || tgt.trim().is_empty() {
            report.dropped_empty += 1;
            return None;
        }
        report.kept += 1;
        Some(SentencePair {
            src,
            tgt,
            line_no: raw.line_no,
        })
    }
}

/// Runs the full cleaning pipeline over a stream of raw pairs, preserving order.
pub fn clean_corpus<I>(pairs: I, mapping: &CharMapping) -> (Vec<SentencePair>, CleaningReport)
where
    I: IntoIterator<Item = RawPair>,
{
    Cleaner::new(mapping.clone()).clean_all(pairs)
}

impl Cleaner {
    pub fn clean_all<I>(&self, pairs: I) -> (Vec<SentencePair>, CleaningReport)
    where
        I: IntoIterator<Item = RawPair>,
    {
        let mut report = CleaningReport::default();
        let kept = pairs
            .into_iter()
            .filter_map(|raw| self.clean_pair(&raw, &mut report))
            .collect();
        (kept, report)
    }
}

/// Greedy longest-match word segmentation against a lexicon.
///
/// Whitespace already present in the input is kept as a boundary; runs of
/// characters not covered by the lexicon become single-character words.
#[derive(Debug, Clone, Default)]
pub struct LexiconSegmenter {
    words: std::collections::HashSet<String>,
    longest: usize,
}

impl LexiconSegmenter {
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut seg = LexiconSegmenter::default();
        for w in words {
            let w = w.as_ref().trim();
            if w.is_empty() {
                continue;
            }
            seg.longest = seg.longest.max(w.chars().count());
            seg.words.insert(w.to_owned());
        }
        seg
    }

    /// One word per line; anything after a tab (e.g. a frequency) is ignored.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(text.lines().map(|l| l.split('\t').next().unwrap_or(""))))
    }

    pub fn segment(&self, line: &str) -> Vec<String> {
        let mut out = Vec::new();
        for chunk in line.split_whitespace() {
            let chars: Vec<char> = chunk.chars().collect();
            let mut i = 0;
            while i < chars.len() {
                let max = self.longest.min(chars.len() - i);
                let len = (2..=max)
                    .rev()
                    .find(|&len| {
                        let cand: String = chars[i..i + len].iter().collect();
                        self.words.contains(&cand)
                    })
                    .unwrap_or(1);
                out.push(chars[i..i + len].iter().collect());
                i += len;
            }
        }
        out
    }
}
