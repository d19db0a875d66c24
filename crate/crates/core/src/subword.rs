//! Independent byte-pair encoding per language.
//!
//! A corpus is reduced to word counts (words are whitespace-separated
//! chunks); the single space is itself a word whose count is the number of
//! word gaps, so the id-level representation of a line is
//! `tokens(w1) " " tokens(w2) ...` and decoding is plain concatenation.
//!
//! The text interchange format marks word-internal continuation with a `@@`
//! suffix instead: `low@@ er newest`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Continuation marker used by the text format.
pub const CONTINUATION: &str = "@@";

/// The word-gap token.
pub const SPACE: &str = " ";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeTable {
    pub merges: Vec<(String, String)>,
    pub separator: String,
    ranks: HashMap<String, HashMap<String, usize>>,
}

impl MergeTable {
    /// Builds a table, rejecting duplicates and merges whose operands are
    /// neither single characters nor products of earlier merges.
    pub fn new(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks: HashMap<String, HashMap<String, usize>> = HashMap::new();
        let mut products: HashSet<String> = HashSet::new();
        for (i, (l, r)) in merges.iter().enumerate() {
            for side in [l, r] {
                let single = side.chars().count() == 1;
                if side.is_empty() || side.chars().any(char::is_whitespace) || !(single || products.contains(side)) {
                    return Err(Error::Data(format!(
                        "merge {} ({l:?}, {r:?}): operand {side:?} is not constructible",
                        i + 1
                    )));
                }
            }
            if ranks.entry(l.clone()).or_default().insert(r.clone(), i).is_some() {
                return Err(Error::Data(format!("merge {} ({l:?}, {r:?}) is duplicated", i + 1)));
            }
            products.insert(format!("{l}{r}"));
        }
        Ok(MergeTable {
            merges,
            separator: CONTINUATION.to_owned(),
            ranks,
        })
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn rank(&self, left: &str, right: &str) -> Option<usize> {
        self.ranks.get(left)?.get(right).copied()
    }

    /// Truncates to the first `n` merges (the table learned with a smaller budget).
    pub fn prefix(&self, n: usize) -> MergeTable {
        MergeTable::new(self.merges[..n.min(self.merges.len())].to_vec()).expect("prefix of a valid table")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_owned(), r.to_owned()))
                }
                _ => return Err(Error::Data(format!("merge line {}: expected \"left right\"", i + 1))),
            }
        }
        Self::new(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    counts: Vec<u64>,
    /// Number of single-character tokens (they follow the reserved block).
    n_chars: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabStats {
    pub size: usize,
    pub characters: usize,
    pub merge_products: usize,
}

impl Vocabulary {
    /// Reserved symbols, then `chars`, then `products`; repeated strings are
    /// kept once at their first position.
    pub fn build<'a>(
        chars: impl IntoIterator<Item = &'a str>,
        products: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
            counts: Vec::new(),
            n_chars: 0,
        };
        for r in RESERVED {
            v.push(r);
        }
        for c in chars {
            if v.push(c) {
                v.n_chars += 1;
            }
        }
        for p in products {
            v.push(p);
        }
        v
    }

    fn push(&mut self, tok: &str) -> bool {
        if self.ids.contains_key(tok) {
            return false;
        }
        self.ids.insert(tok.to_owned(), self.tokens.len() as u32);
        self.tokens.push(tok.to_owned());
        self.counts.push(0);
        true
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn stats(&self) -> VocabStats {
        VocabStats {
            size: self.len(),
            characters: self.n_chars,
            merge_products: self.len() - RESERVED.len() - self.n_chars,
        }
    }

    /// Tokens to ids; unknown tokens become UNK.
    pub fn encode(&self, tokens: &[String], add_bos_eos: bool) -> Vec<u32> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        if add_bos_eos {
            out.push(BOS);
        }
        out.extend(tokens.iter().map(|t| self.id(t).unwrap_or(UNK)));
        if add_bos_eos {
            out.push(EOS);
        }
        out
    }

    /// Ids back to surface text. Reserved ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or_else(|| {
                Error::InvalidArgument(format!("id {id} out of range for vocabulary of {}", self.len()))
            })?;
            if (id as usize) >= RESERVED.len() {
                s.push_str(tok);
            }
        }
        Ok(s)
    }

    /// Segments and encodes a whitespace-tokenized line.
    pub fn encode_line(&self, line: &str, table: &MergeTable, add_bos_eos: bool) -> Vec<u32> {
        self.encode(&segment_line(line, table), add_bos_eos)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{i}\t{}", self.counts[i]);
        }
        s
    }

    /// Parses "token<TAB>id<TAB>count" lines; ids must be 0..n in order
    /// and the reserved block must come first.
    pub fn parse(text: &str) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            ids: HashMap::new(),
            counts: Vec::new(),
            n_chars: 0,
        };
        for (i, line) in text.split('\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Data(format!("vocabulary line {}: {what}", i + 1));
            let mut f = line.split('\t');
            let (Some(tok), Some(id), Some(count), None) = (f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad("expected token<TAB>id<TAB>count"));
            };
            let id: usize = id.parse().map_err(|_| bad("bad id"))?;
            let count: u64 = count.parse().map_err(|_| bad("bad count"))?;
            if id != v.tokens.len() {
                return Err(bad("ids must be consecutive from 0"));
            }
            if id < RESERVED.len() && tok != RESERVED[id] {
                return Err(bad("reserved symbols must occupy ids 0..3"));
            }
            if tok.is_empty() || !v.push(tok) {
                return Err(bad("empty or duplicate token"));
            }
            v.counts[id] = count;
            if id >= RESERVED.len() && tok.chars().count() == 1 {
                v.n_chars += 1;
            }
        }
        if v.tokens.len() < RESERVED.len() {
            return Err(Error::Data("vocabulary lacks the reserved symbols".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

pub fn vocab_stats(v: &Vocabulary) -> VocabStats {
    v.stats()
}

/// How far learning goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeBudget {
    /// Perform at most this many merges.
    Merges(usize),
    /// Stop once the vocabulary (reserved symbols included) reaches this size.
    VocabSize(usize),
}

/// Whitespace word counts for a set of lines, including the gap token.
pub fn word_counts<'a>(lines: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for line in lines {
        let mut n = 0u64;
        for w in line.split_whitespace() {
            *counts.entry(w.to_owned()).or_insert(0) += 1;
            n += 1;
        }
        if n > 1 {
            *counts.entry(SPACE.to_owned()).or_insert(0) += n - 1;
        }
    }
    counts
}

/// Learns up to `merges` merge operations.
pub fn learn_bpe<S: AsRef<str>>(words: &[(S, u64)], merges: usize) -> Result<(MergeTable, Vocabulary)> {
    learn_bpe_with(words, MergeBudget::Merges(merges))
}

/// Learns BPE merges from word counts.
///
/// At every step the most frequent adjacent pair is merged; ties go to the
/// lexicographically smallest `(left, right)`. Learning stops when the
/// budget is exhausted or no pair remains.
pub fn learn_bpe_with<S: AsRef<str>>(words: &[(S, u64)], budget: MergeBudget) -> Result<(MergeTable, Vocabulary)> {
    let mut interner = Interner::default();
    let mut merged: BTreeMap<String, u64> = BTreeMap::new();
    for (w, c) in words {
        if *c > 0 && !w.as_ref().is_empty() {
            *merged.entry(w.as_ref().to_owned()).or_insert(0) += c;
        }
    }
    if merged.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut chars: Vec<String> = merged
        .keys()
        .flat_map(|w| w.chars())
        .collect::<std::collections::BTreeSet<char>>()
        .into_iter()
        .map(String::from)
        .collect();
    chars.sort();
    for c in &chars {
        interner.intern(c);
    }
    let mut segs: Vec<Vec<u32>> = Vec::with_capacity(merged.len());
    let mut freqs: Vec<u64> = Vec::with_capacity(merged.len());
    for (w, &c) in &merged {
        let mut buf = [0u8; 4];
        segs.push(w.chars().map(|ch| interner.intern(ch.encode_utf8(&mut buf))).collect());
        freqs.push(c);
    }

    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    let mut where_: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, seg) in segs.iter().enumerate() {
        for p in seg.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_insert(0) += freqs[wi];
            where_.entry((p[0], p[1])).or_default().insert(wi);
        }
    }
    let mut heap: BinaryHeap<(u64, Reverse<(String, String)>, u32, u32)> = pair_counts
        .iter()
        .map(|(&(l, r), &c)| (c, Reverse((interner.get(l).to_owned(), interner.get(r).to_owned())), l, r))
        .collect();

    let mut table: Vec<(String, String)> = Vec::new();
    let mut products: Vec<String> = Vec::new();
    let mut known: HashSet<String> = chars.iter().cloned().collect();
    loop {
        match budget {
            MergeBudget::Merges(n) if table.len() >= n => break,
            MergeBudget::VocabSize(n) if RESERVED.len() + known.len() >= n => break,
            _ => {}
        }
        let best = loop {
            let Some((c, Reverse(_), l, r)) = heap.pop() else { break None };
            if pair_counts.get(&(l, r)).copied() == Some(c) && c > 0 {
                break Some((l, r));
            }
        };
        let Some((l, r)) = best else { break };
        let left = interner.get(l).to_owned();
        let right = interner.get(r).to_owned();
        let product = format!("{left}{right}");
        let m = interner.intern(&product);
        let affected: Vec<usize> = {
            let mut v: Vec<usize> = where_.remove(&(l, r)).unwrap_or_default().into_iter().collect();
            v.sort_unstable();
            v
        };
        let mut touched: HashSet<(u32, u32)> = HashSet::new();
        for wi in affected {
            let f = freqs[wi];
            let seg = &mut segs[wi];
            if !seg.windows(2).any(|p| p[0] == l && p[1] == r) {
                continue;
            }
            for p in seg.windows(2) {
                let key = (p[0], p[1]);
                let e = pair_counts.get_mut(&key).expect("pair counted");
                *e -= f;
                touched.insert(key);
            }
            *seg = merge_pair(seg, l, r, m);
            for p in seg.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_insert(0) += f;
                where_.entry(key).or_default().insert(wi);
                touched.insert(key);
            }
        }
        pair_counts.remove(&(l, r));
        touched.remove(&(l, r));
        for key in touched {
            if let Some(&c) = pair_counts.get(&key) {
                if c > 0 {
                    heap.push((
                        c,
                        Reverse((interner.get(key.0).to_owned(), interner.get(key.1).to_owned())),
                        key.0,
                        key.1,
                    ));
                }
            }
        }
        if known.insert(product.clone()) {
            products.push(product);
        }
        table.push((left, right));
    }

    let table = MergeTable::new(table)?;
    let mut vocab = Vocabulary::build(chars.iter().map(String::as_str), products.iter().map(String::as_str));
    for (wi, seg) in segs.iter().enumerate() {
        for &s in seg {
            let id = vocab.id(interner.get(s)).expect("segment token in vocabulary");
            vocab.counts[id as usize] += freqs[wi];
        }
    }
    Ok((table, vocab))
}

fn merge_pair(seg: &[u32], l: u32, r: u32, m: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(seg.len());
    let mut i = 0;
    while i < seg.len() {
        if i + 1 < seg.len() && seg[i] == l && seg[i + 1] == r {
            out.push(m);
            i += 2;
        } else {
            out.push(seg[i]);
            i += 1;
        }
    }
    out
}

#[derive(Default)]
struct Interner {
    ids: HashMap<String, u32>,
    strs: Vec<String>,
}

impl Interner {
    fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.strs.len() as u32;
        self.ids.insert(s.to_owned(), id);
        self.strs.push(s.to_owned());
        id
    }

    fn get(&self, id: u32) -> &str {
        &self.strs[id as usize]
    }
}

/// Splits a word into characters and applies the merges in table order,
/// each merge left to right without overlap.
///
/// Equivalent to replaying the whole table, but only visits merges that
/// can fire: the next merge is always the lowest-ranked applicable pair
/// ranked after the previous one.
pub fn apply_bpe(word: &str, table: &MergeTable) -> Vec<String> {
    let mut seg: Vec<String> = word.chars().map(String::from).collect();
    if table.is_empty() {
        return seg;
    }
    let mut after: Option<usize> = None;
    loop {
        let next = seg
            .windows(2)
            .filter_map(|p| table.rank(&p[0], &p[1]))
            .filter(|&r| after.is_none_or(|a| r > a))
            .min();
        let Some(rank) = next else { break };
        let (l, r) = &table.merges[rank];
        let mut out = Vec::with_capacity(seg.len());
        let mut i = 0;
        while i < seg.len() {
            if i + 1 < seg.len() && &seg[i] == l && &seg[i + 1] == r {
                out.push(format!("{l}{r}"));
                i += 2;
            } else {
                out.push(std::mem::take(&mut seg[i]));
                i += 1;
            }
        }
        seg = out;
        after = Some(rank);
    }
    seg
}

/// Segments a whitespace-tokenized line, inserting the gap token between words.
pub fn segment_line(line: &str, table: &MergeTable) -> Vec<String> {
    let mut out = Vec::new();
    for (i, w) in line.split_whitespace().enumerate() {
        if i > 0 {
            out.push(SPACE.to_owned());
        }
        out.extend(apply_bpe(w, table));
    }
    out
}

/// `low@@ er newest` style rendering of a line.
pub fn to_marked_text(line: &str, table: &MergeTable) -> String {
    let mut s = String::new();
    for w in line.split_whitespace() {
        let toks = apply_bpe(w, table);
        let last = toks.len() - 1;
        for (i, t) in toks.iter().enumerate() {
            if !s.is_empty() {
                s.push(' ');
            }
            s.push_str(t);
            if i < last {
                s.push_str(CONTINUATION);
            }
        }
    }
    s
}

/// Inverse of [`to_marked_text`] at the token level: returns the token
/// sequence with explicit gap tokens.
pub fn parse_marked_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word_open = false;
    for piece in text.split_whitespace() {
        if !word_open && !out.is_empty() {
            out.push(SPACE.to_owned());
        }
        match piece.strip_suffix(CONTINUATION) {
            Some(stem) if !stem.is_empty() => {
                out.push(stem.to_owned());
                word_open = true;
            }
            _ => {
                out.push(piece.to_owned());
                word_open = false;
            }
        }
    }
    out
}

/// Removes the continuation markers: `low@@ er` becomes `lower`.
pub fn strip_markers(text: &str) -> String {
    let joined = format!("{text} ").replace(&format!("{CONTINUATION} "), "");
    joined.split_whitespace().collect::<Vec<_>>().join(" ")
}
