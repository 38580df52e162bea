//! Merge-based subword tokenizer trained on normalized function text.
//!
//! Training starts from single characters and repeatedly merges the most
//! frequent adjacent pair (ties go to the lexicographically smallest pair)
//! until the vocabulary target is met or no pair occurs twice. Encoding
//! replays the merges in training order.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const N_SPECIALS: usize = 4;
pub const DEFAULT_VOCAB_SIZE: usize = 30_000;
pub const PUNCTUATION: [char; 6] = ['[', ']', ':', '+', '-', ','];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub pad: u32,
    pub unk: u32,
    pub cls: u32,
    pub sep: u32,
}

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: 0,
            unk: 1,
            cls: 2,
            sep: 3,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    specials: Specials,
    punctuation_split: bool,
    vocab_size_target: usize,
}

#[derive(Debug, Clone)]
pub struct TokenizerModel {
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
    specials: Specials,
    vocab_size_target: usize,
    punctuation_split: bool,
    index: HashMap<String, u32>,
    merge_table: HashMap<(u32, u32), (usize, u32)>,
}

impl PartialEq for TokenizerModel {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.merges == other.merges
            && self.specials == other.specials
            && self.vocab_size_target == other.vocab_size_target
            && self.punctuation_split == other.punctuation_split
    }
}

/// Split on whitespace and, optionally, around `[ ] : + - ,`.
pub fn pre_split(text: &str, punctuation_split: bool) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if !punctuation_split {
            out.push(word);
            continue;
        }
        let mut start = 0;
        for (i, c) in word.char_indices() {
            if PUNCTUATION.contains(&c) {
                if start < i {
                    out.push(&word[start..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
                start = i + c.len_utf8();
            }
        }
        if start < word.len() {
            out.push(&word[start..]);
        }
    }
    out
}

impl TokenizerModel {
    fn from_parts(
        vocab: Vec<String>,
        merges: Vec<(String, String)>,
        specials: Specials,
        vocab_size_target: usize,
        punctuation_split: bool,
    ) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, tok) in vocab.iter().enumerate().skip(N_SPECIALS) {
            index.entry(tok.clone()).or_insert(i as u32);
        }
        let ids = [specials.pad, specials.unk, specials.cls, specials.sep];
        if ids.iter().collect::<BTreeSet<_>>().len() != N_SPECIALS
            || ids.iter().any(|&i| i as usize >= vocab.len())
        {
            return Err(PulseError::Data("tokenizer special ids are not distinct".into()));
        }
        let mut merge_table = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |t: &str| {
                index
                    .get(t)
                    .copied()
                    .ok_or_else(|| PulseError::Data(format!("merge references unknown token {t:?}")))
            };
            let out = lookup(&format!("{l}{r}"))?;
            merge_table.entry((lookup(l)?, lookup(r)?)).or_insert((rank, out));
        }
        Ok(TokenizerModel {
            vocab,
            merges,
            specials,
            vocab_size_target,
            punctuation_split,
            index,
            merge_table,
        })
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn punctuation_split(&self) -> bool {
        self.punctuation_split
    }

    pub fn vocab_size_target(&self) -> usize {
        self.vocab_size_target
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_text(&self, id: u32) -> &str {
        &self.vocab[id as usize]
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut symbols: Vec<u32> = piece
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.index
                    .get(c.encode_utf8(&mut buf) as &str)
                    .copied()
                    .unwrap_or(self.specials.unk)
            })
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_table.get(&(w[0], w[1])).map(|&(rank, id)| (rank, i, id)))
                .min();
            let Some((rank, _, _)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() {
                    if let Some(&(r, id)) = self.merge_table.get(&(symbols[i], symbols[i + 1])) {
                        if r == rank {
                            merged.push(id);
                            i += 2;
                            continue;
                        }
                    }
                }
                merged.push(symbols[i]);
                i += 1;
            }
            symbols = merged;
        }
        out.extend(symbols);
    }

    /// Token ids for `text`, without special tokens.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pre_split(text, self.punctuation_split) {
            self.encode_piece(piece, &mut out);
        }
        out
    }

    pub fn tokenize_to_strings(&self, text: &str) -> Vec<&str> {
        self.tokenize(text).into_iter().map(|id| self.token_text(id)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TokenizerFile {
            vocab: self.vocab.clone(),
            merges: self.merges.clone(),
            specials: self.specials,
            punctuation_split: self.punctuation_split,
            vocab_size_target: self.vocab_size_target,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: TokenizerFile = serde_json::from_str(text)?;
        Self::from_parts(f.vocab, f.merges, f.specials, f.vocab_size_target, f.punctuation_split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| PulseError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PulseError::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn train_tokenizer<I, S>(corpus: I, vocab_size: usize, punctuation_split: bool) -> Result<TokenizerModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut any = false;
    for text in corpus {
        any = true;
        for piece in pre_split(text.as_ref(), punctuation_split) {
            *word_counts.entry(piece.to_string()).or_default() += 1;
        }
    }
    if !any || word_counts.is_empty() {
        return Err(PulseError::InsufficientData("tokenizer corpus is empty".into()));
    }

    let alphabet: BTreeSet<char> = word_counts.keys().flat_map(|w| w.chars()).collect();
    let minimum = N_SPECIALS + alphabet.len();
    if vocab_size < minimum {
        return Err(PulseError::Config(format!(
            "vocab_size {vocab_size} too small: corpus needs at least {minimum}"
        )));
    }

    let mut vocab: Vec<String> = vec![PAD.into(), UNK.into(), CLS.into(), SEP.into()];
    vocab.extend(alphabet.iter().map(|c| c.to_string()));
    let mut index: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .skip(N_SPECIALS)
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    let mut sorted: Vec<(String, u64)> = word_counts.into_iter().collect();
    sorted.sort();
    let mut words: Vec<(Vec<u32>, u64)> = sorted
        .into_iter()
        .map(|(w, c)| (w.chars().map(|ch| index[&ch.to_string()]).collect(), c))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    while vocab.len() < vocab_size {
        pair_counts.clear();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += count;
            }
        }
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c >= 2)
            .max_by(|(a, ca), (b, cb)| {
                ca.cmp(cb).then_with(|| {
                    // smaller pair wins ties
                    let ka = (&vocab[a.0 as usize], &vocab[a.1 as usize]);
                    let kb = (&vocab[b.0 as usize], &vocab[b.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(&p, _)| p);
        let Some((left, right)) = best else { break };

        let text = format!("{}{}", vocab[left as usize], vocab[right as usize]);
        let new_id = match index.get(&text) {
            Some(&id) => id,
            None => {
                let id = vocab.len() as u32;
                vocab.push(text.clone());
                index.insert(text, id);
                id
            }
        };
        merges.push((vocab[left as usize].clone(), vocab[right as usize].clone()));

        for (symbols, _) in words.iter_mut() {
            if symbols.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(symbols[i]);
                    i += 1;
                }
            }
            *symbols = out;
        }
    }

    TokenizerModel::from_parts(vocab, merges, Specials::default(), vocab_size, punctuation_split)
}

/// Fixed-length encoded function: `[CLS] tokens.. [SEP] [PAD]..`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub n_real: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// Encode with head truncation. `max_len` below 2 is raised to 2.
pub fn encode(model: &TokenizerModel, text: &str, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    let sp = model.specials();
    let mut tokens = model.tokenize(text);
    tokens.truncate(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(sp.cls);
    ids.extend(tokens);
    ids.push(sp.sep);
    let n_real = ids.len();
    ids.resize(max_len, sp.pad);
    let attention_mask = (0..max_len).map(|i| u8::from(i < n_real)).collect();
    TokenSequence {
        ids,
        attention_mask,
        n_real,
    }
}

/// Mean tokens per whitespace-separated word, specials excluded.
pub fn fragmentation_rate<I, S>(model: &TokenizerModel, corpus: I) -> f64
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut words = 0usize;
    let mut tokens = 0usize;
    for text in corpus {
        for word in text.as_ref().split_whitespace() {
            words += 1;
            tokens += model.tokenize(word).len();
        }
    }
    if words == 0 {
        1.0
    } else {
        tokens as f64 / words as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent trainer over plain strings: recount every adjacent pair of
    /// every word occurrence each round and merge the top pair.
    fn simulate_merges(corpus: &[&str], rounds: usize) -> Vec<(String, String)> {
        let mut words: Vec<Vec<String>> = corpus
            .iter()
            .flat_map(|t| t.split_whitespace())
            .map(|w| w.chars().map(|c| c.to_string()).collect())
            .collect();
        let mut merges = Vec::new();
        for _ in 0..rounds {
            let mut counts: Vec<((String, String), u64)> = Vec::new();
            for w in &words {
                for p in w.windows(2) {
                    let key = (p[0].clone(), p[1].clone());
                    match counts.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((key, 1)),
                    }
                }
            }
            counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let Some(((l, r), c)) = counts.first().cloned() else { break };
            if c < 2 {
                break;
            }
            for w in words.iter_mut() {
                let mut out = Vec::new();
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                        out.push(format!("{l}{r}"));
                        i += 2;
                    } else {
                        out.push(w[i].clone());
                        i += 1;
                    }
                }
                *w = out;
            }
            merges.push((l, r));
        }
        merges
    }

    #[test]
    fn whole_words_emerge() {
        let corpus: Vec<&str> = vec!["popesi popebx"; 10_000];
        let model = train_tokenizer(&corpus, 300, false).unwrap();
        assert_eq!(model.tokenize_to_strings("popesi popebx"), ["popesi", "popebx"]);

        // oracle replay on a smaller copy of the corpus gives the same merge order
        let small: Vec<&str> = vec!["popesi popebx"; 50];
        assert_eq!(model.merges(), simulate_merges(&small, 100).as_slice());
    }

    #[test]
    fn merge_order_matches_oracle_on_mixed_corpus() {
        let corpus = [
            "movespesi popebx popedi popesi popebp ret0x10",
            "moveaxdwordptrfs:[0x30] moveaxdwordptr[eax+0x50] testeaxeax jnz memoryaddress ret",
            "pushebp movebpesp popebp ret",
            "pushebp movebpesp subesp0x10 calleax",
        ];
        let model = train_tokenizer(corpus, 10_000, false).unwrap();
        assert_eq!(model.merges(), simulate_merges(&corpus, 10_000).as_slice());
    }

    #[test]
    fn single_character_corpus() {
        let model = train_tokenizer(["a"], 10, false).unwrap();
        assert_eq!(model.vocab(), [PAD, UNK, CLS, SEP, "a"]);
        assert!(model.merges().is_empty());
    }

    #[test]
    fn errors() {
        assert!(matches!(
            train_tokenizer(Vec::<String>::new(), 100, false),
            Err(PulseError::InsufficientData(_))
        ));
        let err = train_tokenizer(["abc"], 6, false).unwrap_err();
        assert!(err.to_string().contains("at least 7"), "{err}");
    }

    #[test]
    fn custom_tokenizer_keeps_whole_instructions() {
        let mut corpus = Vec::new();
        for _ in 0..20 {
            corpus.push("moveaxdwordptrfs:[0x30] moveaxdwordptr[eax+0x50] testeaxeax jnz memoryaddress ret");
            corpus.push("pushebp movebpesp testeaxeax jnz memoryaddress calleax");
        }
        let model = train_tokenizer(&corpus, 30_000, false).unwrap();
        let toks = model.tokenize_to_strings("testeaxeax jnz memoryaddress ret");
        assert!(toks.len() <= 6, "{toks:?}");
        assert_eq!(toks, ["testeaxeax", "jnz", "memoryaddress", "ret"]);
    }

    #[test]
    fn punctuation_split_pieces() {
        assert_eq!(
            pre_split("moveaxdwordptrfs:[0x30] ret", true),
            ["moveaxdwordptrfs", ":", "[", "0x30", "]", "ret"]
        );
        assert_eq!(pre_split("[ebp-0x19]", true), ["[", "ebp", "-", "0x19", "]"]);
        let corpus = vec!["moveaxdwordptrfs:[0x30] moveaxdwordptr[eax+0x30]"; 10];
        let model = train_tokenizer(&corpus, 30_000, true).unwrap();
        assert_eq!(
            model.tokenize_to_strings("moveaxdwordptrfs:[0x30]"),
            ["moveaxdwordptrfs", ":", "[", "0x30", "]"]
        );
    }

    #[test]
    fn encode_pads_and_truncates() {
        let model = train_tokenizer(vec!["popesi popebx"; 10], 300, false).unwrap();
        let sp = model.specials();
        let seq = encode(&model, "popesi popebx", 8);
        assert_eq!(seq.n_real, 4);
        assert_eq!(seq.ids[0], sp.cls);
        assert_eq!(seq.ids[3], sp.sep);
        assert!(seq.ids[4..].iter().all(|&i| i == sp.pad));
        assert_eq!(seq.attention_mask, [1, 1, 1, 1, 0, 0, 0, 0]);

        let long = vec!["popesi"; 20].join(" ");
        let seq = encode(&model, &long, 8);
        assert_eq!(seq.ids.len(), 8);
        assert_eq!(seq.n_real, 8);
        assert_eq!(seq.ids[7], sp.sep);
        assert_eq!(seq.ids[1], model.token_id("popesi").unwrap());
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let model = train_tokenizer(vec!["popesi"; 5], 300, false).unwrap();
        let ids = model.tokenize("pop%");
        assert_eq!(*ids.last().unwrap(), model.specials().unk);
    }

    #[test]
    fn fragmentation() {
        let corpus = vec!["popesi popebx"; 10];
        let full = train_tokenizer(&corpus, 300, false).unwrap();
        assert_eq!(fragmentation_rate(&full, &corpus), 1.0);
        // alphabet {b,e,i,o,p,s,x}: no room for merges
        let chars = train_tokenizer(&corpus, N_SPECIALS + 7, false).unwrap();
        assert_eq!(chars.vocab_len(), N_SPECIALS + 7);
        assert_eq!(fragmentation_rate(&chars, ["popesi"]), 6.0);
    }

    #[test]
    fn json_round_trip_is_byte_stable() {
        let model = train_tokenizer(vec!["movespesi popebx ret0x10"; 4], 100, true).unwrap();
        let json = model.to_json().unwrap();
        let back = TokenizerModel::from_json(&json).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), json);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for k in ["vocab", "merges", "specials", "punctuation_split"] {
            assert!(v.get(k).is_some());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn corpus() -> impl Strategy<Value = Vec<String>> {
            proptest::collection::vec(
                proptest::collection::vec("(mov|pop|push|xor)(eax|esi|ebx)(0x[0-9]{1,2})?", 1..6).prop_map(|w| w.join(" ")),
                1..30,
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn deterministic_bounded_and_total(
                corpus in corpus(),
                extra in 0usize..80,
                punct in any::<bool>(),
                text in "[a-z0-9 %\\[\\]]{0,40}",
                max_len in 2usize..24
            ) {
                let alphabet: BTreeSet<char> = corpus.iter().flat_map(|t| t.chars()).filter(|c| !c.is_whitespace()).collect();
                let vs = N_SPECIALS + alphabet.len() + extra;
                let a = train_tokenizer(&corpus, vs, punct).unwrap();
                let b = train_tokenizer(&corpus, vs, punct).unwrap();
                prop_assert_eq!(&a, &b);
                prop_assert!(a.vocab_len() <= vs);
                for (l, r) in a.merges() {
                    let joined = format!("{l}{r}");
                    prop_assert!(a.token_id(&joined).is_some());
                }
                let seq = encode(&a, &text, max_len);
                prop_assert_eq!(seq.ids.len(), max_len);
                prop_assert_eq!(seq.attention_mask.iter().map(|&m| m as usize).sum::<usize>(), seq.n_real);
                prop_assert_eq!(seq.ids[0], a.specials().cls);
                prop_assert_eq!(seq.ids[seq.n_real - 1], a.specials().sep);
            }

            #[test]
            fn frequent_words_are_covered(corpus in corpus(), extra in 0usize..200) {
                let alphabet: BTreeSet<char> = corpus.iter().flat_map(|t| t.chars()).filter(|c| !c.is_whitespace()).collect();
                let vs = N_SPECIALS + alphabet.len() + extra;
                let model = train_tokenizer(&corpus, vs, false).unwrap();
                let unk = model.specials().unk;
                for t in &corpus {
                    prop_assert!(!model.tokenize(t).contains(&unk));
                }
            }
        }
    }
}
