//! Deterministic synthetic formality corpus.
//!
//! Formal (TARGET) sentences come from a small template grammar. Informal
//! (SOURCE) versions are produced by [`informalize`]: the final period is
//! dropped, a sentence-opening interjection loses its comma, everything is
//! lowercased and fixed lexicon phrases are replaced by their informal
//! spellings. [`formalize`] inverts it exactly, so SOURCE -> TARGET is a
//! deterministic function of the SOURCE sentence.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Formal phrase (lowercase) -> informal word. Informal spellings never occur
/// in formal text.
const LEXICON: &[(&str, &str)] = &[
    ("i am", "im"),
    ("you are", "ur"),
    ("do not", "dont"),
    ("does not", "doesnt"),
    ("cannot", "cant"),
    ("going to", "gonna"),
    ("want to", "wanna"),
    ("have to", "hafta"),
    ("you", "u"),
    ("are", "r"),
    ("your", "yr"),
    ("because", "cuz"),
    ("please", "pls"),
    ("thanks", "thx"),
    ("tonight", "tonite"),
    ("tomorrow", "tmrw"),
    ("really", "rly"),
    ("probably", "prob"),
    ("though", "tho"),
    ("about", "abt"),
    ("people", "ppl"),
    ("great", "gr8"),
    ("before", "b4"),
    ("for", "4"),
    ("see", "c"),
    ("to", "2"),
];

/// Words whose capitalization is restored by the inverse mapping.
const CAPITALIZED: &[&str] = &[
    "I", "John", "Mary", "Sarah", "David", "Emma", "Monday", "Friday", "Saturday",
];

/// Sentence-opening words that take a comma in formal text.
const INTERJECTIONS: &[&str] = &["Honestly", "Well", "Actually", "Also", "However"];

#[derive(Clone, Copy, PartialEq)]
enum Person {
    First,
    Second,
    ThirdSingular,
    Plural,
}

const SUBJECTS: &[(&str, Person)] = &[
    ("I", Person::First),
    ("You", Person::Second),
    ("He", Person::ThirdSingular),
    ("She", Person::ThirdSingular),
    ("John", Person::ThirdSingular),
    ("Mary", Person::ThirdSingular),
    ("Sarah", Person::ThirdSingular),
    ("David", Person::ThirdSingular),
    ("Emma", Person::ThirdSingular),
    ("My friend", Person::ThirdSingular),
    ("My sister", Person::ThirdSingular),
    ("Our teacher", Person::ThirdSingular),
    ("The manager", Person::ThirdSingular),
    ("We", Person::Plural),
    ("They", Person::Plural),
    ("People", Person::Plural),
    ("My parents", Person::Plural),
    ("Our neighbors", Person::Plural),
];

const VERBS: &[&str] = &[
    "watch", "finish", "read", "see", "buy", "cook", "clean", "fix", "visit", "review", "share", "plan",
];

const OBJECTS: &[&str] = &[
    "the movie",
    "the new song",
    "the game",
    "the homework",
    "the project",
    "the book",
    "the party",
    "the concert",
    "the restaurant",
    "my car",
    "the dinner",
    "the report",
    "the show",
    "the album",
    "your plan",
    "the old house",
];

const PLACES: &[&str] = &[
    "the library",
    "the park",
    "the store",
    "the beach",
    "the gym",
    "the office",
    "the mall",
    "the museum",
    "the station",
    "the market",
];

const TIMES: &[&str] = &[
    "tonight",
    "tomorrow",
    "today",
    "this weekend",
    "next week",
    "later",
    "on Monday",
    "on Friday",
    "on Saturday",
    "after work",
];

const ADJECTIVES: &[&str] = &[
    "great",
    "boring",
    "amazing",
    "expensive",
    "difficult",
    "funny",
    "terrible",
    "really good",
    "quite long",
    "very strange",
];

const DEADLINES: &[&str] = &["tonight", "tomorrow", "Friday", "Monday", "the weekend", "next week"];

const ADVERBS: &[&str] = &["", "really ", "probably ", "still "];

fn be(p: Person) -> &'static str {
    match p {
        Person::First => "am",
        Person::ThirdSingular => "is",
        _ => "are",
    }
}

fn do_not(p: Person) -> &'static str {
    if p == Person::ThirdSingular {
        "does not"
    } else {
        "do not"
    }
}

fn third(p: Person, verb: &str) -> String {
    if p == Person::ThirdSingular {
        if verb.ends_with('h') || verb.ends_with('x') {
            format!("{verb}es")
        } else {
            format!("{verb}s")
        }
    } else {
        verb.to_string()
    }
}

fn capitalize_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [&'a str]) -> &'a str {
    items.choose(rng).copied().expect("non-empty list")
}

/// Draws one formal sentence from the template grammar.
pub fn formal_sentence<R: Rng>(rng: &mut R) -> String {
    let &(subj, person) = SUBJECTS.choose(rng).expect("subjects");
    let verb = pick(rng, VERBS);
    let obj = pick(rng, OBJECTS);
    let time = pick(rng, TIMES);
    let adv = pick(rng, ADVERBS);
    match rng.random_range(0..9) {
        0 => format!("{subj} {} going to {} {time}.", be(person), pick(rng, PLACES)),
        1 => format!("{subj} {} want to {verb} {obj} {time}.", do_not(person)),
        2 => format!("{subj} {adv}{} {obj}.", third(person, "like")),
        3 => format!("{} {} going to {verb} {obj} {time}?", capitalize_first(be(person)), subj_lower(subj)),
        4 => format!(
            "{}, {} {} that {obj} is {}.",
            pick(rng, INTERJECTIONS),
            subj_lower(subj),
            third(person, "think"),
            pick(rng, ADJECTIVES)
        ),
        5 => format!("{subj} cannot {verb} {obj} because it is {}.", pick(rng, ADJECTIVES)),
        6 => format!("Can you please {verb} {obj} before {}?", pick(rng, DEADLINES)),
        7 => format!("{subj} {} to {verb} {obj} {time}.", if person == Person::ThirdSingular { "has" } else { "have" }),
        _ => format!("Thanks for the help with {obj} {time}."),
    }
}

/// Subject as it appears after the first word of a sentence.
fn subj_lower(subj: &str) -> String {
    let first = subj.split(' ').next().unwrap_or(subj);
    if CAPITALIZED.contains(&first) {
        subj.to_string()
    } else {
        let mut c = subj.chars();
        match c.next() {
            Some(f) => f.to_lowercase().collect::<String>() + c.as_str(),
            None => String::new(),
        }
    }
}

/// Formal -> informal.
pub fn informalize(formal: &str) -> String {
    let (body, question) = match formal.strip_suffix('?') {
        Some(b) => (b, true),
        None => (formal.strip_suffix('.').unwrap_or(formal), false),
    };
    let mut words: Vec<String> = body.split_whitespace().map(|w| w.to_string()).collect();
    if let Some(first) = words.first_mut() {
        if let Some(stripped) = first.strip_suffix(',') {
            if INTERJECTIONS.contains(&stripped) {
                *first = stripped.to_string();
            }
        }
    }
    let lowered: Vec<String> = words.iter().map(|w| w.to_lowercase()).collect();
    let mut out: Vec<&str> = Vec::with_capacity(lowered.len());
    let mut i = 0;
    'outer: while i < lowered.len() {
        for n in (1..=2).rev() {
            if i + n > lowered.len() {
                continue;
            }
            let phrase = lowered[i..i + n].join(" ");
            if let Some(&(_, informal)) = LEXICON.iter().find(|(f, _)| *f == phrase) {
                out.push(informal);
                i += n;
                continue 'outer;
            }
        }
        out.push(&lowered[i]);
        i += 1;
    }
    let mut s = out.join(" ");
    if question {
        s.push('?');
    }
    s
}

/// Informal -> formal; exact inverse of [`informalize`] on grammar output.
pub fn formalize(informal: &str) -> String {
    let (body, punct) = match informal.strip_suffix('?') {
        Some(b) => (b, '?'),
        None => (informal, '.'),
    };
    let mut words: Vec<String> = Vec::new();
    for w in body.split_whitespace() {
        match LEXICON.iter().find(|(_, inf)| *inf == w) {
            Some((formal, _)) => words.extend(formal.split(' ').map(|s| s.to_string())),
            None => words.push(w.to_string()),
        }
    }
    for w in &mut words {
        if let Some(cap) = CAPITALIZED.iter().find(|c| c.to_lowercase() == *w) {
            *w = cap.to_string();
        }
    }
    if let Some(first) = words.first_mut() {
        *first = capitalize_first(first);
        if INTERJECTIONS.contains(&first.as_str()) {
            first.push(',');
        }
    }
    let mut s = words.join(" ");
    s.push(punct);
    s
}

/// Sizes of every split emitted by [`synth_splits`].
#[derive(Clone, Copy, Debug)]
pub struct SynthSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub unlabeled_per_style: usize,
    pub heldout_per_style: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        SynthSizes {
            train: 5000,
            valid: 300,
            test: 300,
            unlabeled_per_style: 10_000,
            heldout_per_style: 1000,
        }
    }
}

/// A text-level synthetic corpus. Parallel pairs are `(source, target)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
    pub pool_source: Vec<String>,
    pub pool_target: Vec<String>,
    pub heldout_source: Vec<String>,
    pub heldout_target: Vec<String>,
}

/// Every split is drawn from one stream of distinct formal sentences, so no
/// sentence content is shared between splits or pools.
pub fn synth_splits(seed: u64, sizes: SynthSizes) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut draw = |n: usize| -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = formal_sentence(&mut rng);
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
        out
    };
    let pair = |v: Vec<String>| v.into_iter().map(|t| (informalize(&t), t)).collect::<Vec<_>>();
    let train = pair(draw(sizes.train));
    let valid = pair(draw(sizes.valid));
    let test = pair(draw(sizes.test));
    let pool_target = draw(sizes.unlabeled_per_style);
    let pool_source = draw(sizes.unlabeled_per_style).iter().map(|s| informalize(s)).collect();
    let heldout_target = draw(sizes.heldout_per_style);
    let heldout_source = draw(sizes.heldout_per_style).iter().map(|s| informalize(s)).collect();
    SynthCorpus {
        train,
        valid,
        test,
        pool_source,
        pool_target,
        heldout_source,
        heldout_target,
    }
}

/// Parallel pairs plus one unlabeled pool per style.
pub fn synth_corpus(
    seed: u64,
    n_parallel: usize,
    n_unlabeled_per_style: usize,
) -> (Vec<(String, String)>, Vec<String>, Vec<String>) {
    let c = synth_splits(
        seed,
        SynthSizes {
            train: n_parallel.max(1),
            valid: 0,
            test: 0,
            unlabeled_per_style: n_unlabeled_per_style.max(1),
            heldout_per_style: 0,
        },
    );
    (c.train, c.pool_source, c.pool_target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn edit_distance(a: &[&str], b: &[&str]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for (i, x) in a.iter().enumerate() {
            let mut cur = vec![i + 1; b.len() + 1];
            for (j, y) in b.iter().enumerate() {
                cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn informalizer_examples() {
        assert_eq!(informalize("I am going to the park tonight."), "im gonna the park tonite");
        assert_eq!(informalize("Honestly, you are great."), "honestly ur gr8");
        assert_eq!(informalize("Can you please fix my car before Friday?"), "can u pls fix my car b4 friday?");
        assert_eq!(formalize("can u pls fix my car b4 friday?"), "Can you please fix my car before Friday?");
    }

    #[test]
    fn inverse_recovers_every_generated_sentence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20_000 {
            let s = formal_sentence(&mut rng);
            assert_eq!(formalize(&informalize(&s)), s, "sentence {s:?}");
        }
    }

    #[test]
    fn same_seed_gives_identical_corpus() {
        let a = synth_corpus(3, 50, 40);
        let b = synth_corpus(3, 50, 40);
        assert_eq!(a, b);
        assert_ne!(synth_corpus(4, 50, 40).0, a.0);
    }

    #[test]
    fn pairs_differ_in_almost_all_cases() {
        let (pairs, _, _) = synth_corpus(11, 2000, 1);
        let changed = pairs
            .iter()
            .filter(|(s, t)| {
                let a: Vec<&str> = s.split_whitespace().collect();
                let b: Vec<&str> = t.split_whitespace().collect();
                edit_distance(&a, &b) > 0
            })
            .count();
        assert!(changed as f64 >= 0.95 * pairs.len() as f64, "{changed} of {}", pairs.len());
    }

    #[test]
    fn pools_are_disjoint_from_parallel_data() {
        let c = synth_splits(5, SynthSizes { train: 300, valid: 20, test: 20, unlabeled_per_style: 300, heldout_per_style: 50 });
        let parallel: HashSet<&String> = c.train.iter().map(|(_, t)| t).collect();
        let src: HashSet<&String> = c.train.iter().map(|(s, _)| s).collect();
        assert!(c.pool_target.iter().all(|t| !parallel.contains(t)));
        assert!(c.pool_source.iter().all(|s| !src.contains(s)));
        assert!(c.test.iter().all(|(_, t)| !parallel.contains(t)));
    }

    #[test]
    fn grammar_has_room_for_the_acceptance_corpus() {
        let c = synth_splits(1, SynthSizes::default());
        assert_eq!(c.pool_source.len(), 10_000);
        assert_eq!(c.train.len(), 5000);
    }
}
