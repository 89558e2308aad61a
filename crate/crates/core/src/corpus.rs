//! Parallel and unlabeled data, plus token-budget batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bpe::{special, MergeTable, TokenSeq};
use crate::error::{Error, Result};
use crate::style::StyleLabel;

/// Sentences longer than this (in tokens) are rejected at load time.
pub const DEFAULT_MAX_LEN: usize = 64;
/// Token budget per batch.
pub const DEFAULT_MAX_TOKENS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelExample {
    pub id: usize,
    /// SOURCE-style side.
    pub src: TokenSeq,
    /// TARGET-style side.
    pub tgt: TokenSeq,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPool {
    pub style: StyleLabel,
    pub sentences: Vec<TokenSeq>,
}

impl UnlabeledPool {
    pub fn new(style: StyleLabel, sentences: Vec<TokenSeq>) -> Result<Self> {
        if sentences.iter().any(TokenSeq::is_empty) {
            return Err(Error::Empty("sentence in unlabeled pool"));
        }
        Ok(UnlabeledPool { style, sentences })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let lines: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect();
    if lines.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    for (i, l) in lines.iter().enumerate() {
        if l.trim().is_empty() {
            return Err(Error::EmptyLine {
                path: path.to_path_buf(),
                line: i + 1,
            });
        }
    }
    Ok(lines)
}

/// Loads two aligned files; line `i` of each forms example `i`. Pairs with a
/// side longer than `max_len` tokens are dropped and counted.
pub fn load_parallel(
    src_path: impl AsRef<Path>,
    tgt_path: impl AsRef<Path>,
    table: &MergeTable,
    max_len: usize,
) -> Result<(Vec<ParallelExample>, usize)> {
    let src = read_lines(src_path.as_ref())?;
    let tgt = read_lines(tgt_path.as_ref())?;
    if src.len() != tgt.len() {
        return Err(Error::LineCountMismatch(src.len(), tgt.len()));
    }
    let mut rejected = 0;
    let mut out = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let (s, t) = (table.encode(s), table.encode(t));
        if s.len() > max_len || t.len() > max_len {
            rejected += 1;
            continue;
        }
        out.push(ParallelExample { id: i, src: s, tgt: t });
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} overlong pairs", src_path.as_ref().display());
    }
    Ok((out, rejected))
}

pub fn load_unlabeled(
    path: impl AsRef<Path>,
    style: StyleLabel,
    table: &MergeTable,
    max_len: usize,
) -> Result<(UnlabeledPool, usize)> {
    let lines = read_lines(path.as_ref())?;
    let mut rejected = 0;
    let mut sentences = Vec::with_capacity(lines.len());
    for l in &lines {
        let toks = table.encode(l);
        if toks.len() > max_len {
            rejected += 1;
        } else {
            sentences.push(toks);
        }
    }
    if rejected > 0 {
        log::warn!("{}: rejected {rejected} overlong sentences", path.as_ref().display());
    }
    Ok((UnlabeledPool::new(style, sentences)?, rejected))
}

/// Tokenizes in-memory parallel text.
pub fn encode_parallel(pairs: &[(String, String)], table: &MergeTable) -> Vec<ParallelExample> {
    pairs
        .iter()
        .enumerate()
        .map(|(id, (s, t))| ParallelExample {
            id,
            src: table.encode(s),
            tgt: table.encode(t),
        })
        .collect()
}

pub fn encode_pool(style: StyleLabel, sentences: &[String], table: &MergeTable) -> Result<UnlabeledPool> {
    UnlabeledPool::new(style, sentences.iter().map(|s| table.encode(s)).collect())
}

/// Rows of token ids right-padded with PAD.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedMatrix {
    pub width: usize,
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
}

impl PaddedMatrix {
    pub fn from_rows(rows: &[&TokenSeq]) -> Self {
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * width);
        for r in rows {
            ids.extend_from_slice(r.ids());
            ids.extend(std::iter::repeat_n(special::PAD, width - r.len()));
        }
        PaddedMatrix {
            width,
            ids,
            lengths: rows.iter().map(|r| r.len()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }

    /// Row `i` without its padding.
    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn padded_tokens(&self) -> usize {
        self.rows() * self.width
    }

    pub fn real_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchKind {
    Parallel,
    Unlabeled,
}

/// One micro-batch. For parallel batches `src` holds SOURCE sides and `tgt`
/// the aligned TARGET sides; unlabeled batches carry only `src`, with the
/// per-row style in `styles`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub kind: BatchKind,
    pub ids: Vec<usize>,
    pub styles: Vec<StyleLabel>,
    pub src: PaddedMatrix,
    pub tgt: Option<PaddedMatrix>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn src_seq(&self, i: usize) -> TokenSeq {
        TokenSeq(self.src.row(i).to_vec())
    }

    pub fn tgt_seq(&self, i: usize) -> Option<TokenSeq> {
        self.tgt.as_ref().map(|t| TokenSeq(t.row(i).to_vec()))
    }
}

/// Greedy packing in shuffled order: a row joins the open batch while
/// `rows * longest_row` stays within `max_tokens` on every side.
fn pack(lengths: &[Vec<usize>], max_tokens: usize, order: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let sides = lengths.first().map_or(0, Vec::len);
    let mut widths = vec![0usize; sides];
    for &i in order {
        let lens = &lengths[i];
        if let Some(&too_long) = lens.iter().find(|&&l| l > max_tokens) {
            return Err(Error::ExampleExceedsBudget {
                id: i,
                len: too_long,
                budget: max_tokens,
            });
        }
        let fits = widths
            .iter()
            .zip(lens)
            .all(|(&w, &l)| (current.len() + 1) * w.max(l) <= max_tokens);
        if !fits {
            batches.push(std::mem::take(&mut current));
            widths.iter_mut().for_each(|w| *w = 0);
        }
        current.push(i);
        for (w, &l) in widths.iter_mut().zip(lens) {
            *w = (*w).max(l);
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

fn shuffled(n: usize, seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Packs parallel examples into batches. `shuffle_seed = None` keeps input
/// order.
pub fn make_batches(examples: &[ParallelExample], max_tokens: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    let lengths: Vec<Vec<usize>> = examples.iter().map(|e| vec![e.src.len(), e.tgt.len()]).collect();
    let groups = pack(&lengths, max_tokens, &shuffled(examples.len(), shuffle_seed))?;
    Ok(groups
        .into_iter()
        .map(|g| {
            let src: Vec<&TokenSeq> = g.iter().map(|&i| &examples[i].src).collect();
            let tgt: Vec<&TokenSeq> = g.iter().map(|&i| &examples[i].tgt).collect();
            Batch {
                kind: BatchKind::Parallel,
                ids: g.iter().map(|&i| examples[i].id).collect(),
                styles: vec![StyleLabel::Source; g.len()],
                src: PaddedMatrix::from_rows(&src),
                tgt: Some(PaddedMatrix::from_rows(&tgt)),
            }
        })
        .collect())
}

/// A sentence drawn from an unlabeled pool.
#[derive(Clone, Debug, PartialEq)]
pub struct Unlabeled {
    pub id: usize,
    pub style: StyleLabel,
    pub seq: TokenSeq,
}

/// Flattens pools into one id space: ids run through `pools[0]` first.
pub fn flatten_pools(pools: &[&UnlabeledPool]) -> Vec<Unlabeled> {
    let mut out = Vec::new();
    for pool in pools {
        for s in &pool.sentences {
            out.push(Unlabeled {
                id: out.len(),
                style: pool.style,
                seq: s.clone(),
            });
        }
    }
    out
}

/// Packs unlabeled sentences; when `limit` is given, stops after that many
/// batches, cycling through fresh shuffles if the pool runs out.
pub fn make_unlabeled_batches(
    items: &[Unlabeled],
    max_tokens: usize,
    shuffle_seed: Option<u64>,
    limit: Option<usize>,
) -> Result<Vec<Batch>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let lengths: Vec<Vec<usize>> = items.iter().map(|u| vec![u.seq.len()]).collect();
    let mut groups = Vec::new();
    let mut round = 0u64;
    loop {
        let seed = shuffle_seed.map(|s| s.wrapping_add(round.wrapping_mul(0x9e37_79b9)));
        let mut more = pack(&lengths, max_tokens, &shuffled(items.len(), seed))?;
        match limit {
            Some(n) => {
                more.truncate(n - groups.len().min(n));
                groups.extend(more);
                if groups.len() >= n {
                    break;
                }
            }
            None => {
                groups.extend(more);
                break;
            }
        }
        round += 1;
    }
    Ok(groups
        .into_iter()
        .map(|g| {
            let rows: Vec<&TokenSeq> = g.iter().map(|&i| &items[i].seq).collect();
            Batch {
                kind: BatchKind::Unlabeled,
                ids: g.iter().map(|&i| items[i].id).collect(),
                styles: g.iter().map(|&i| items[i].style).collect(),
                src: PaddedMatrix::from_rows(&rows),
                tgt: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn table() -> MergeTable {
        crate::bpe::train_bpe(&["one two three four five six", "a b c"], 60).unwrap()
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_aligned_files_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "x.src", "one\ntwo\nthree\n");
        let t = write(dir.path(), "x.tgt", "four\nfive\nsix\n");
        let (ex, rejected) = load_parallel(&s, &t, &table(), 64).unwrap();
        assert_eq!(rejected, 0);
        assert_eq!(ex.len(), 3);
        assert_eq!(table().decode(&ex[2].tgt).unwrap(), "six");
        assert_eq!(ex.iter().map(|e| e.id).collect::<Vec<_>>(), [0, 1, 2]);
    }

    #[test]
    fn mismatched_and_empty_lines_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "a.src", "a\nb\nc\na\nb\n");
        let t = write(dir.path(), "a.tgt", "a\nb\nc\na\n");
        let err = load_parallel(&s, &t, &table(), 64).unwrap_err();
        assert_eq!(err.to_string(), "line count mismatch 5 vs 4");
        let e = write(dir.path(), "e.src", "a\n\nc\n");
        let err = load_parallel(&e, &e, &table(), 64).unwrap_err();
        assert!(matches!(err, Error::EmptyLine { line: 2, .. }));
    }

    #[test]
    fn unlabeled_pool_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "u.txt", "one two\nthree\nfour five six\n");
        let (pool, _) = load_unlabeled(&p, StyleLabel::Target, &table(), 64).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool.style, StyleLabel::Target);
        let empty = write(dir.path(), "empty.txt", "");
        assert!(matches!(load_unlabeled(&empty, StyleLabel::Source, &table(), 64), Err(Error::EmptyFile(_))));
    }

    #[test]
    fn overlong_sentences_are_rejected_not_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let s = write(dir.path(), "l.src", "one\none two three four five six\n");
        let (ex, rejected) = load_parallel(&s, &s, &table(), 4).unwrap();
        assert_eq!((ex.len(), rejected), (1, 1));
    }

    #[test]
    fn single_short_example_is_one_batch() {
        let ex = vec![ParallelExample { id: 0, src: TokenSeq(vec![7; 10]), tgt: TokenSeq(vec![8; 12]) }];
        let batches = make_batches(&ex, DEFAULT_MAX_TOKENS, Some(1)).unwrap();
        assert_eq!(batches.len(), 1);
        let too_long = vec![ParallelExample { id: 0, src: TokenSeq(vec![7; 65]), tgt: TokenSeq(vec![8; 2]) }];
        assert!(matches!(make_batches(&too_long, 64, None), Err(Error::ExampleExceedsBudget { .. })));
    }

    #[test]
    fn unlabeled_limit_cycles_the_pool() {
        let items: Vec<Unlabeled> = (0..5)
            .map(|id| Unlabeled { id, style: StyleLabel::Source, seq: TokenSeq(vec![9; 3]) })
            .collect();
        let batches = make_unlabeled_batches(&items, 6, Some(3), Some(7)).unwrap();
        assert_eq!(batches.len(), 7);
        assert!(batches.iter().all(|b| b.kind == BatchKind::Unlabeled && b.tgt.is_none()));
    }

    proptest! {
        #[test]
        fn batching_conserves_examples_and_respects_budget(
            lens in prop::collection::vec((1usize..30, 1usize..30), 1..80),
            budget in 30usize..200,
            seed in any::<u64>(),
        ) {
            let ex: Vec<ParallelExample> = lens.iter().enumerate().map(|(id, &(a, b))| ParallelExample {
                id, src: TokenSeq(vec![6; a]), tgt: TokenSeq(vec![6; b]),
            }).collect();
            let batches = make_batches(&ex, budget, Some(seed)).unwrap();
            let mut ids: Vec<usize> = batches.iter().flat_map(|b| b.ids.clone()).collect();
            ids.sort();
            prop_assert_eq!(ids, (0..ex.len()).collect::<Vec<_>>());
            for b in &batches {
                prop_assert_eq!(b.kind, BatchKind::Parallel);
                prop_assert!(b.src.padded_tokens() <= budget);
                prop_assert!(b.tgt.as_ref().unwrap().padded_tokens() <= budget);
                for r in 0..b.len() {
                    // padding only as a suffix
                    let full = &b.src.ids[r * b.src.width..(r + 1) * b.src.width];
                    prop_assert!(full[b.src.lengths[r]..].iter().all(|&t| t == special::PAD));
                    prop_assert!(b.src.row(r).iter().all(|&t| t != special::PAD));
                }
            }
        }
    }
}
