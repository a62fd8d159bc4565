//! Labeled utterances, vocabularies, the synthetic corpus generator and
//! stream stitching.
//!
//! Corpus files are UTF-8 text with one utterance per line:
//!
//! ```text
//! flight<TAB>show me flights to denver
//! ```
//!
//! Stitching concatenates shuffled utterances into unsegmented token streams,
//! which is how continuous recognizer output is simulated.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved id of the unknown-word token.
pub const UNK_ID: usize = 0;
pub const UNK_TOKEN: &str = "<unk>";

/// One single-intent utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub intent: String,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, intent: impl Into<String>) -> Result<Self> {
        let intent = intent.into();
        if intent.is_empty() || intent.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("bad intent label `{intent}`")));
        }
        if tokens.is_empty() {
            return Err(Error::invalid("utterance has no tokens"));
        }
        if let Some(t) = tokens
            .iter()
            .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
        {
            return Err(Error::invalid(format!("bad token `{t}`")));
        }
        Ok(Utterance { tokens, intent })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    intent_set: Vec<String>,
}

impl Corpus {
    /// Builds a corpus; the intent set is ordered by first appearance.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut intent_set: Vec<String> = Vec::new();
        for u in &utterances {
            if !intent_set.contains(&u.intent) {
                intent_set.push(u.intent.clone());
            }
        }
        Ok(Corpus {
            utterances,
            intent_set,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn intent_set(&self) -> &[String] {
        &self.intent_set
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.utterances.iter().map(Utterance::len).sum()
    }

    pub fn intent_id(&self, label: &str) -> Option<usize> {
        self.intent_set.iter().position(|l| l == label)
    }

    /// Serializes in the corpus file format. `load_corpus` inverts this exactly.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for u in &self.utterances {
            let _ = writeln!(out, "{}\t{}", u.intent, u.tokens.join(" "));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Reads a corpus file. Tokens are lowercased and nothing else is normalized.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut utterances = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let parse_err = |message: &str| Error::Parse {
            line: line_no,
            message: message.to_string(),
        };
        let (intent, rest) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("missing TAB between intent and tokens"))?;
        let intent = intent.trim();
        if intent.is_empty() {
            return Err(parse_err("empty intent label"));
        }
        let tokens: Vec<String> = rest.split_whitespace().map(str::to_lowercase).collect();
        if tokens.is_empty() {
            return Err(parse_err("no tokens"));
        }
        utterances.push(Utterance::new(tokens, intent).map_err(|e| parse_err(&e.to_string()))?);
    }
    Corpus::new(utterances)
}

/// Word to id map with `<unk>` reserved at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list (`<unk>` first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::invalid("vocabulary must start with <unk>"));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Unseen words map to [`UNK_ID`].
    pub fn lookup(&self, word: &str) -> usize {
        self.token_to_id.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.lookup(w.as_ref())).collect()
    }

    /// One token per line in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Ids are assigned by descending count, ties broken lexicographically.
/// A `min_count` of 0 behaves like 1.
pub fn build_vocab(corpus: &Corpus, min_count: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for u in corpus.utterances() {
        for t in &u.tokens {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let mut tokens = Vec::with_capacity(kept.len() + 1);
    tokens.push(UNK_TOKEN.to_string());
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens).expect("counted tokens are unique")
}

/// A multi-utterance token stream with no boundary markers in its input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSample {
    pub token_ids: Vec<usize>,
    /// 1 at the last token of every constituent utterance.
    pub eos_flags: Vec<bool>,
    /// Intent of the enclosing utterance at every position.
    pub intent_ids: Vec<usize>,
    /// Half-open `[start, end)` utterance spans partitioning the stream.
    pub utt_spans: Vec<(usize, usize)>,
    /// Index of each constituent utterance in the source corpus.
    pub sources: Vec<usize>,
}

impl StreamSample {
    /// Builds a sample from already encoded utterances.
    pub fn from_utterances(parts: &[(Vec<usize>, usize)]) -> Result<Self> {
        let mut s = StreamSample {
            token_ids: Vec::new(),
            eos_flags: Vec::new(),
            intent_ids: Vec::new(),
            utt_spans: Vec::new(),
            sources: Vec::new(),
        };
        for (i, (ids, intent)) in parts.iter().enumerate() {
            if ids.is_empty() {
                return Err(Error::invalid("empty utterance in stream"));
            }
            let start = s.token_ids.len();
            s.token_ids.extend_from_slice(ids);
            s.intent_ids.extend(std::iter::repeat(*intent).take(ids.len()));
            s.eos_flags.extend(std::iter::repeat(false).take(ids.len() - 1));
            s.eos_flags.push(true);
            s.utt_spans.push((start, s.token_ids.len()));
            s.sources.push(i);
        }
        if s.token_ids.is_empty() {
            return Err(Error::invalid("stream has no utterances"));
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_utterances(&self) -> usize {
        self.utt_spans.len()
    }

    /// Gold intent of each constituent utterance.
    pub fn utterance_intents(&self) -> Vec<usize> {
        self.utt_spans.iter().map(|&(s, _)| self.intent_ids[s]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSet {
    pub samples: Vec<StreamSample>,
    pub max_utts: usize,
    pub seed: u64,
}

impl StreamSet {
    pub fn token_count(&self) -> usize {
        self.samples.iter().map(StreamSample::len).sum()
    }

    pub fn utterance_count(&self) -> usize {
        self.samples.iter().map(StreamSample::n_utterances).sum()
    }

    /// Debug dump: one line per sample, `|` appended to utterance-final tokens.
    pub fn dump(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let words: Vec<String> = s
                .token_ids
                .iter()
                .zip(&s.eos_flags)
                .map(|(&id, &eos)| {
                    let w = vocab.token(id).unwrap_or(UNK_TOKEN);
                    if eos {
                        format!("{w}|")
                    } else {
                        w.to_string()
                    }
                })
                .collect();
            out.push_str(&words.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Stitches with intent ids taken from the corpus' own intent set.
pub fn stitch_streams(
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_utts: usize,
    seed: u64,
) -> Result<StreamSet> {
    stitch_streams_labeled(corpus, vocab, corpus.intent_set(), max_utts, seed)
}

/// Shuffles the corpus with a seeded generator and consumes it in runs of
/// `uniform{1..=max_utts}` utterances (clamped by what remains). Intent ids
/// index into `labels`, which lets dev and test streams share the training
/// label order.
pub fn stitch_streams_labeled(
    corpus: &Corpus,
    vocab: &Vocabulary,
    labels: &[String],
    max_utts: usize,
    seed: u64,
) -> Result<StreamSet> {
    if max_utts == 0 {
        return Err(Error::invalid("max_utts must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let label_ids = corpus
        .intent_set()
        .iter()
        .map(|l| {
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::UnknownIntent(l.clone()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng);

    let mut samples = Vec::new();
    let mut next = 0;
    while next < order.len() {
        let k = rng.gen_range(1..=max_utts).min(order.len() - next);
        let parts: Vec<(Vec<usize>, usize)> = order[next..next + k]
            .iter()
            .map(|&i| {
                let u = &corpus.utterances()[i];
                let local = corpus.intent_id(&u.intent).expect("intent in own set");
                (vocab.encode(&u.tokens), label_ids[local])
            })
            .collect();
        let mut sample = StreamSample::from_utterances(&parts)?;
        sample.sources = order[next..next + k].to_vec();
        samples.push(sample);
        next += k;
    }
    Ok(StreamSet {
        samples,
        max_utts,
        seed,
    })
}

/// Size of the shared filler pool: body words plus utterance-closing words.
pub const FILLER_POOL: usize = 50;
const CLOSING_WORDS: usize = 10;
const KEYWORDS_PER_INTENT: usize = 3;

pub fn synthetic_intent_label(intent: usize) -> String {
    format!("intent_{intent:02}")
}

/// The three keywords owned by an intent.
pub fn synthetic_keywords(intent: usize) -> Vec<String> {
    (0..KEYWORDS_PER_INTENT)
        .map(|j| format!("key{intent:02}{}", (b'a' + j as u8) as char))
        .collect()
}

fn filler_word(i: usize) -> String {
    if i < FILLER_POOL - CLOSING_WORDS {
        format!("w{i:02}")
    } else {
        format!("end{}", i - (FILLER_POOL - CLOSING_WORDS))
    }
}

/// Generates a keyword-separable corpus.
///
/// Intents are assigned round-robin. Every utterance ends with one of the ten
/// closing fillers (which only ever occur utterance-finally, giving the stream
/// a lexical end-of-sentence cue), carries one keyword of its intent (two with
/// probability 1/2 once the length reaches 5) and fills the remaining slots
/// from the forty body fillers.
pub fn gen_synthetic(
    n_intents: usize,
    n_utts: usize,
    len_range: (usize, usize),
    seed: u64,
) -> Result<Corpus> {
    let (min_len, max_len) = len_range;
    if n_intents < 2 {
        return Err(Error::invalid("need at least 2 intents"));
    }
    if n_utts == 0 {
        return Err(Error::invalid("need at least 1 utterance"));
    }
    if min_len < 2 || min_len > max_len {
        return Err(Error::invalid(format!(
            "invalid length range ({min_len}, {max_len})"
        )));
    }
    let body = FILLER_POOL - CLOSING_WORDS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut utterances = Vec::with_capacity(n_utts);
    for n in 0..n_utts {
        let intent = n % n_intents;
        let len = rng.gen_range(min_len..=max_len);
        let keywords = synthetic_keywords(intent);
        let n_kw = if len >= 5 && rng.gen_bool(0.5) { 2 } else { 1 };

        let mut tokens: Vec<String> = (0..len - 1)
            .map(|_| filler_word(rng.gen_range(0..body)))
            .collect();
        tokens.push(filler_word(body + rng.gen_range(0..CLOSING_WORDS)));
        let slots = rand::seq::index::sample(&mut rng, len - 1, n_kw);
        for slot in slots.iter() {
            tokens[slot] = keywords[rng.gen_range(0..KEYWORDS_PER_INTENT)].clone();
        }
        utterances.push(Utterance::new(tokens, synthetic_intent_label(intent))?);
    }
    Corpus::new(utterances)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[(&str, &str)]) -> Corpus {
        Corpus::new(
            lines
                .iter()
                .map(|(i, t)| {
                    Utterance::new(t.split(' ').map(String::from).collect(), *i).unwrap()
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn parses_one_line() {
        let c = parse_corpus("flight\tshow me flights to denver\n").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.utterances()[0].tokens.len(), 5);
        assert_eq!(c.utterances()[0].intent, "flight");
    }

    #[test]
    fn lowercases_tokens() {
        let c = parse_corpus("flight\tShow ME Denver").unwrap();
        assert_eq!(c.utterances()[0].tokens, ["show", "me", "denver"]);
    }

    #[test]
    fn empty_text_is_empty_corpus() {
        assert!(matches!(parse_corpus(""), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn intent_set_in_first_appearance_order() {
        let c = parse_corpus("b\tx y\na\tz\nb\tq\n").unwrap();
        assert_eq!(c.intent_set(), ["b", "a"]);
    }

    #[test]
    fn malformed_lines_report_line_number() {
        match parse_corpus("a\tx\nno tab here\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        match parse_corpus("a\tx\nb\t   \n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_corpus("\tx y"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_corpus("/nonexistent/corpus.tsv"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let c = gen_synthetic(3, 12, (2, 6), 5).unwrap();
        assert_eq!(parse_corpus(&c.to_tsv()).unwrap(), c);
    }

    #[test]
    fn vocab_orders_by_count_then_lexically() {
        let c = corpus(&[("x", "a b"), ("x", "a")]);
        let v = build_vocab(&c, 1);
        assert_eq!(v.tokens(), [UNK_TOKEN, "a", "b"]);
        assert_eq!(v.lookup("a"), 1);
        assert_eq!(v.lookup("b"), 2);
        assert_eq!(v.lookup("unseen-word"), UNK_ID);

        let v2 = build_vocab(&c, 2);
        assert_eq!(v2.lookup("b"), UNK_ID);
        assert_eq!(v2.len(), 2);
    }

    #[test]
    fn vocab_ties_are_lexical() {
        let c1 = corpus(&[("x", "zeta alpha"), ("x", "mid")]);
        let c2 = corpus(&[("x", "mid"), ("x", "alpha zeta")]);
        assert_eq!(build_vocab(&c1, 1), build_vocab(&c2, 1));
        assert_eq!(build_vocab(&c1, 1).tokens(), [UNK_TOKEN, "alpha", "mid", "zeta"]);
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = build_vocab(&gen_synthetic(2, 20, (3, 6), 1).unwrap(), 1);
        assert_eq!(Vocabulary::parse(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::parse("a\nb\n").is_err());
    }

    #[test]
    fn max_utts_one_is_identity_segmentation() {
        let c = gen_synthetic(3, 9, (2, 5), 3).unwrap();
        let v = build_vocab(&c, 1);
        let set = stitch_streams(&c, &v, 1, 11).unwrap();
        assert_eq!(set.samples.len(), c.len());
        for s in &set.samples {
            let n = s.len();
            assert!(s.eos_flags[..n - 1].iter().all(|f| !f));
            assert!(s.eos_flags[n - 1]);
        }
    }

    #[test]
    fn two_utterance_stream_flags() {
        let c = corpus(&[("a", "x y z"), ("b", "p q r s")]);
        let v = build_vocab(&c, 1);
        let seed = (0..1000)
            .find(|&s| stitch_streams(&c, &v, 2, s).unwrap().samples.len() == 1)
            .expect("some seed stitches both utterances together");
        let set = stitch_streams(&c, &v, 2, seed).unwrap();
        let s = &set.samples[0];
        assert_eq!(s.len(), 7);
        let flagged: Vec<usize> = (0..7).filter(|&i| s.eos_flags[i]).collect();
        assert_eq!(flagged, [2, 6]);
    }

    #[test]
    fn stitch_rejects_zero_max_utts() {
        let c = corpus(&[("a", "x")]);
        let v = build_vocab(&c, 1);
        assert!(stitch_streams(&c, &v, 0, 0).is_err());
    }

    #[test]
    fn stitch_rejects_unknown_labels() {
        let c = corpus(&[("a", "x"), ("zz", "y")]);
        let v = build_vocab(&c, 1);
        let labels = vec!["a".to_string()];
        assert!(matches!(
            stitch_streams_labeled(&c, &v, &labels, 2, 0),
            Err(Error::UnknownIntent(l)) if l == "zz"
        ));
    }

    #[test]
    fn dump_marks_utterance_ends() {
        let c = corpus(&[("a", "x y"), ("b", "z")]);
        let v = build_vocab(&c, 1);
        let s = StreamSample::from_utterances(&[
            (v.encode(&["x", "y"]), 0),
            (v.encode(&["z"]), 1),
        ])
        .unwrap();
        let set = StreamSet {
            samples: vec![s],
            max_utts: 2,
            seed: 0,
        };
        assert_eq!(set.dump(&v), "x y| z|\n");
    }

    #[test]
    fn synthetic_corpus_properties() {
        let c = gen_synthetic(2, 10, (3, 6), 7).unwrap();
        assert_eq!(c.len(), 10);
        for u in c.utterances() {
            let intent: usize = u.intent["intent_".len()..].parse().unwrap();
            let kws = synthetic_keywords(intent);
            assert!(u.tokens.iter().any(|t| kws.contains(t)));
            assert!((3..=6).contains(&u.len()));
        }
        assert_eq!(gen_synthetic(2, 10, (3, 6), 7).unwrap(), c);
        let a = synthetic_keywords(0);
        let b = synthetic_keywords(1);
        assert!(a.iter().all(|k| !b.contains(k)));
    }

    #[test]
    fn synthetic_filler_pool_is_fifty_words() {
        let c = gen_synthetic(4, 2000, (2, 10), 1).unwrap();
        let mut fillers: Vec<&String> = c
            .utterances()
            .iter()
            .flat_map(|u| &u.tokens)
            .filter(|t| !t.starts_with("key"))
            .collect();
        fillers.sort();
        fillers.dedup();
        assert_eq!(fillers.len(), FILLER_POOL);
    }

    #[test]
    fn synthetic_rejects_bad_ranges() {
        assert!(gen_synthetic(1, 10, (3, 6), 0).is_err());
        assert!(gen_synthetic(2, 10, (1, 6), 0).is_err());
        assert!(gen_synthetic(2, 10, (6, 3), 0).is_err());
    }
}
