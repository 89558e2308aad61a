//! Byte-pair-encoding subword tokenizer.
//!
//! Words are whitespace-delimited. Each word is split into characters and
//! terminated with an end-of-word marker symbol before merging, so decoding
//! can restore word boundaries without a separate word tokenizer. Training
//! greedily merges the most frequent adjacent pair (ties go to the
//! lexicographically smaller pair) until the vocabulary budget is reached or
//! no pair occurs at least twice. No case folding is applied.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{format_err, Error, Result};

/// Reserved ids. They are never produced by merges.
pub mod special {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const BOS: u32 = 2;
    pub const EOS: u32 = 3;
    pub const STYLE_SOURCE: u32 = 4;
    pub const STYLE_TARGET: u32 = 5;
    pub const COUNT: usize = 6;
    pub const NAMES: [&str; COUNT] = ["<pad>", "<unk>", "<s>", "</s>", "<source>", "<target>"];
}

pub const END_OF_WORD: &str = "</w>";
const HEADER_TAG: &str = "#styleforge-bpe";
const FORMAT_VERSION: u32 = 1;

/// Content token ids of one sentence, without BOS/EOS or style markers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn contains_unk(&self) -> bool {
        self.0.contains(&special::UNK)
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq(ids)
    }
}

#[derive(Clone, Debug)]
pub struct MergeTable {
    budget: usize,
    merges: Vec<(String, String)>,
    symbols: Vec<String>,
    index: HashMap<String, u32>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for MergeTable {
    fn eq(&self, other: &Self) -> bool {
        self.budget == other.budget && self.merges == other.merges && self.symbols == other.symbols
    }
}

impl MergeTable {
    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    fn from_parts(budget: usize, merges: Vec<(String, String)>, symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(format_err("merge table", format!("duplicate symbol {s:?}")));
            }
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                index
                    .get(s)
                    .copied()
                    .ok_or_else(|| format_err("merge table", format!("merge uses unknown symbol {s:?}")))
            };
            let (li, ri) = (lookup(l)?, lookup(r)?);
            let merged = lookup(&format!("{l}{r}"))?;
            ranks.entry((li, ri)).or_insert((rank, merged));
        }
        Ok(MergeTable {
            budget,
            merges,
            symbols,
            index,
            ranks,
        })
    }

    /// Segments one word (without the marker) into symbol ids; unknown
    /// characters become UNK.
    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let mut syms: Vec<u32> = word
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id_of(c.encode_utf8(&mut buf)).unwrap_or(special::UNK)
            })
            .collect();
        syms.push(self.id_of(END_OF_WORD).expect("marker is always in the vocabulary"));
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, l, r, merged)) = best else { break };
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(syms[i]);
                    i += 1;
                }
            }
            syms = next;
        }
        out.extend(syms);
    }

    pub fn encode(&self, text: &str) -> TokenSeq {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            self.encode_word(word, &mut ids);
        }
        TokenSeq(ids)
    }

    /// Inverse of [`MergeTable::encode`]. Control tokens (PAD, BOS, EOS,
    /// style markers) are skipped; UNK renders as `<unk>`.
    pub fn decode(&self, tokens: &TokenSeq) -> Result<String> {
        self.decode_ids(tokens.ids())
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut pending_space = false;
        for &id in ids {
            let sym = self.symbol(id).ok_or(Error::InvalidTokenId(id))?;
            if (id as usize) < special::COUNT && id != special::UNK {
                continue;
            }
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            match sym.strip_suffix(END_OF_WORD) {
                Some(body) => {
                    out.push_str(body);
                    pending_space = true;
                }
                None => out.push_str(sym),
            }
        }
        Ok(out)
    }

    /// Serialized text form: header, one `left right` merge per line, then
    /// `symbol<TAB>id` vocabulary lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{HEADER_TAG} v{FORMAT_VERSION} budget={} merges={} vocab={}",
            self.budget,
            self.merges.len(),
            self.symbols.len()
        );
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        for (i, sym) in self.symbols.iter().enumerate() {
            let _ = writeln!(s, "{sym}\t{i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |m: String| format_err("merge table", m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("missing header".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(HEADER_TAG) {
            return Err(err(format!("bad header {header:?}")));
        }
        if fields.next() != Some(&format!("v{FORMAT_VERSION}")[..]) {
            return Err(err(format!("unsupported version in {header:?}")));
        }
        let mut kv = HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| err(format!("bad header field {f:?}")))?;
            let v: usize = v.parse().map_err(|_| err(format!("bad number in {f:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| err(format!("header lacks {k}")));
        let (budget, n_merges, n_vocab) = (get("budget")?, get("merges")?, get("vocab")?);
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| err("truncated merge list".into()))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| err(format!("bad merge line {line:?}")))?;
            merges.push((l.to_string(), r.to_string()));
        }
        let mut symbols = Vec::with_capacity(n_vocab);
        for i in 0..n_vocab {
            let line = lines.next().ok_or_else(|| err("truncated vocabulary".into()))?;
            let (sym, id) = line.rsplit_once('\t').ok_or_else(|| err(format!("bad vocab line {line:?}")))?;
            if id.parse::<usize>().ok() != Some(i) {
                return Err(err(format!("vocabulary ids out of order at {line:?}")));
            }
            symbols.push(sym.to_string());
        }
        for (i, name) in special::NAMES.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*name) {
                return Err(err(format!("special token {name} missing at id {i}")));
            }
        }
        MergeTable::from_parts(budget, merges, symbols)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MergeTable::from_text(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Learns a merge table from whitespace-tokenized sentences.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_budget: usize) -> Result<MergeTable> {
    let mut word_counts: HashMap<&str, usize> = HashMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let mut symbols: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
    symbols.push(END_OF_WORD.to_string());
    symbols.extend(alphabet.iter().map(|c| c.to_string()));
    if vocab_budget < symbols.len() {
        return Err(Error::BudgetTooSmall {
            budget: vocab_budget,
            required: symbols.len(),
        });
    }
    let mut index: HashMap<String, u32> = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();

    // distinct words in a fixed order so counting is reproducible
    let mut words: Vec<(Vec<u32>, usize)> = word_counts
        .iter()
        .map(|(w, &c)| {
            let mut syms: Vec<u32> = w.chars().map(|ch| index[&ch.to_string()]).collect();
            syms.push(index[END_OF_WORD]);
            (syms, c)
        })
        .collect();
    words.sort();

    let mut merges = Vec::new();
    while symbols.len() < vocab_budget {
        let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += c;
            }
        }
        let best = pair_counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .max_by(|a, b| {
                a.1.cmp(&b.1).then_with(|| {
                    let ka = (&symbols[a.0 .0 as usize], &symbols[a.0 .1 as usize]);
                    let kb = (&symbols[b.0 .0 as usize], &symbols[b.0 .1 as usize]);
                    kb.cmp(&ka)
                })
            });
        let Some(((l, r), _)) = best else { break };
        let merged_str = format!("{}{}", symbols[l as usize], symbols[r as usize]);
        let merged = match index.get(&merged_str) {
            Some(&id) => id,
            None => {
                symbols.push(merged_str.clone());
                let id = (symbols.len() - 1) as u32;
                index.insert(merged_str, id);
                id
            }
        };
        merges.push((symbols[l as usize].clone(), symbols[r as usize].clone()));
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut i = 0;
            let mut out = Vec::with_capacity(syms.len());
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(merged);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
    }
    MergeTable::from_parts(vocab_budget, merges, symbols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base_size(corpus: &[&str]) -> usize {
        let alphabet: BTreeSet<char> = corpus.iter().flat_map(|s| s.chars()).filter(|c| !c.is_whitespace()).collect();
        special::COUNT + 1 + alphabet.len()
    }

    /// Exhaustive adjacent-pair count, independent of the trainer.
    fn brute_force_top_pair(corpus: &[&str]) -> (String, String) {
        let mut counts: Vec<((String, String), usize)> = Vec::new();
        for line in corpus {
            for word in line.split_whitespace() {
                let mut syms: Vec<String> = word.chars().map(|c| c.to_string()).collect();
                syms.push(END_OF_WORD.into());
                for w in syms.windows(2) {
                    let key = (w[0].clone(), w[1].clone());
                    match counts.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((key, 1)),
                    }
                }
            }
        }
        let max = counts.iter().map(|(_, c)| *c).max().unwrap();
        counts.into_iter().filter(|(_, c)| *c == max).map(|(k, _)| k).min().unwrap()
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let corpus = ["low low lower"];
        let table = train_bpe(&corpus, base_size(&corpus) + 1).unwrap();
        assert_eq!(table.merges().len(), 1);
        assert_eq!(table.merges()[0], brute_force_top_pair(&corpus));
        assert_eq!(table.merges()[0], ("l".to_string(), "o".to_string()));
    }

    #[test]
    fn budget_at_alphabet_gives_character_vocabulary() {
        let corpus = ["hello world", "hello there"];
        let table = train_bpe(&corpus, base_size(&corpus)).unwrap();
        assert!(table.merges().is_empty());
        let toks = table.encode("hello");
        assert_eq!(toks.len(), 6);
    }

    #[test]
    fn errors_on_empty_corpus_and_small_budget() {
        let empty: [&str; 1] = ["   "];
        assert!(matches!(train_bpe(&empty, 100), Err(Error::EmptyCorpus)));
        let corpus = ["abc"];
        assert!(matches!(train_bpe(&corpus, 5), Err(Error::BudgetTooSmall { .. })));
    }

    #[test]
    fn lower_segments_by_hand_applied_merges() {
        let symbols: Vec<String> = special::NAMES
            .iter()
            .map(|s| s.to_string())
            .chain([END_OF_WORD, "e", "l", "o", "r", "w", "lo", "low"].iter().map(|s| s.to_string()))
            .collect();
        let merges = vec![("l".to_string(), "o".to_string()), ("lo".to_string(), "w".to_string())];
        let table = MergeTable::from_parts(64, merges, symbols).unwrap();
        let toks = table.encode("lower");
        let pieces: Vec<&str> = toks.ids().iter().map(|&i| table.symbol(i).unwrap()).collect();
        assert_eq!(pieces, ["low", "e", "r", END_OF_WORD]);
        assert_eq!(table.decode(&toks).unwrap(), "lower");
    }

    #[test]
    fn unknown_characters_become_unk() {
        let table = train_bpe(&["abc abd"], 20).unwrap();
        let toks = table.encode("abz");
        assert!(toks.contains_unk());
    }

    #[test]
    fn decode_edge_cases() {
        let table = train_bpe(&["hello world"], 30).unwrap();
        assert_eq!(table.decode(&TokenSeq::default()).unwrap(), "");
        assert_eq!(table.decode(&table.encode("hello world")).unwrap(), "hello world");
        assert!(matches!(table.decode(&TokenSeq(vec![9999])), Err(Error::InvalidTokenId(9999))));
    }

    #[test]
    fn text_form_round_trips() {
        let table = train_bpe(&["the cat sat on the mat", "The Cat."], 40).unwrap();
        let back = MergeTable::from_text(&table.to_text()).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.hash(), table.hash());
        assert!(MergeTable::from_text("garbage").is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["a b ab ab abc bca", "cab cab abc"];
        assert_eq!(train_bpe(&corpus, 30).unwrap(), train_bpe(&corpus, 30).unwrap());
    }

    proptest! {
        #[test]
        fn round_trip_over_training_alphabet(words in prop::collection::vec("[a-eA-C.,']{1,6}", 1..8), budget in 0usize..40) {
            let sentence = words.join(" ");
            let corpus = [sentence.as_str(), "abcde ABC ., '"];
            let base = base_size(&corpus);
            let table = train_bpe(&corpus, base + budget).unwrap();
            prop_assert!(table.vocab_size() <= base + budget);
            let toks = table.encode(&sentence);
            prop_assert!(!toks.contains_unk());
            prop_assert_eq!(table.decode(&toks).unwrap(), sentence);
        }

        #[test]
        fn larger_budget_never_lengthens(words in prop::collection::vec("[a-d]{1,7}", 2..12), small in 0usize..10, extra in 0usize..20) {
            let sentence = words.join(" ");
            let corpus = [sentence.as_str()];
            let base = base_size(&corpus);
            let t1 = train_bpe(&corpus, base + small).unwrap();
            let t2 = train_bpe(&corpus, base + small + extra).unwrap();
            prop_assert!(t2.encode(&sentence).len() <= t1.encode(&sentence).len());
        }
    }
}
