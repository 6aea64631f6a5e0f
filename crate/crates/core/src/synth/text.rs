use std::collections::HashMap;
use std::sync::LazyLock;

use rand::Rng as _;

use super::{Audience, LatentFactors, Theme};
use crate::rng::Rng;

/// Token sequences are truncated to this length.
pub const MAX_TOKENS: usize = 256;

const SPECIAL: [&str; 3] = ["<pad>", "<unk>", "<mask>"];
const PUNCT: [&str; 6] = [".", "!", "?", ",", "'", "-"];
const STOP_WORDS: [&str; 24] = [
    "the", "a", "an", "and", "with", "for", "to", "this", "is", "of", "in", "our", "your", "you",
    "it", "on", "at", "all", "by", "be", "are", "more", "its", "now",
];
const KIDS: [&str; 3] = ["kids", "children", "toddlers"];
const NEUTRAL: [&str; 3] = ["everyone", "players", "gamers"];
const ADULTS: [&str; 3] = ["adults", "grownups", "mature"];
const NO_THEME: [&str; 4] = ["puzzle", "relax", "garden", "cozy"];
const CASINO: [&str; 4] = ["casino", "poker", "slots", "jackpot"];
const BATTLE: [&str; 4] = ["battle", "war", "combat", "army"];
const FILLER: [&str; 42] = [
    "fun", "game", "play", "new", "levels", "daily", "rewards", "free", "download", "enjoy",
    "world", "explore", "build", "collect", "challenge", "best", "time", "today", "join",
    "millions", "amazing", "adventure", "story", "win", "every", "day", "made", "great", "easy",
    "unlock", "events", "bonus", "coins", "tap", "swipe", "match", "season", "crew", "hours",
    "simple", "will", "love",
];

/// Fixed synthetic vocabulary. Ids are positions in the word list.
#[derive(Debug)]
pub struct Vocab {
    words: Vec<&'static str>,
    index: HashMap<&'static str, u32>,
    n_stop: usize,
}

static STANDARD: LazyLock<Vocab> = LazyLock::new(|| {
    let words: Vec<&'static str> = SPECIAL
        .iter()
        .chain(&PUNCT)
        .chain(&STOP_WORDS)
        .chain(&KIDS)
        .chain(&NEUTRAL)
        .chain(&ADULTS)
        .chain(&NO_THEME)
        .chain(&CASINO)
        .chain(&BATTLE)
        .chain(&FILLER)
        .copied()
        .collect();
    let index = words
        .iter()
        .enumerate()
        .map(|(i, w)| (*w, i as u32))
        .collect();
    Vocab {
        words,
        index,
        n_stop: SPECIAL.len() + PUNCT.len() + STOP_WORDS.len(),
    }
});

impl Vocab {
    pub const PAD: u32 = 0;
    pub const UNK: u32 = 1;
    pub const MASK: u32 = 2;

    pub fn standard() -> &'static Vocab {
        &STANDARD
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(Self::UNK)
    }

    pub fn word(&self, id: u32) -> &'static str {
        self.words.get(id as usize).copied().unwrap_or("<unk>")
    }

    /// Specials, punctuation and function words: the ids attention
    /// visualisations skip. The leading block of the vocabulary.
    pub fn stop_ids(&self) -> impl Iterator<Item = u32> {
        0..self.n_stop as u32
    }

    pub fn is_punct(&self, id: u32) -> bool {
        let start = SPECIAL.len() as u32;
        (start..start + PUNCT.len() as u32).contains(&id)
    }
}

/// Lower-cased word/punctuation tokenizer over the synthetic vocabulary,
/// truncated to [`MAX_TOKENS`].
pub fn tokenize(text: &str) -> Vec<u32> {
    let vocab = Vocab::standard();
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<u32>| {
        if !word.is_empty() {
            out.push(vocab.id(word));
            word.clear();
        }
    };
    for ch in text.chars() {
        if out.len() >= MAX_TOKENS {
            break;
        }
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            flush(&mut word, &mut out);
            if !ch.is_whitespace() {
                let mut buf = [0u8; 4];
                out.push(vocab.id(ch.encode_utf8(&mut buf)));
            }
        }
    }
    flush(&mut word, &mut out);
    out.truncate(MAX_TOKENS);
    out
}

/// Sentences with their terminators, surrounding whitespace trimmed.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, ch) in text.char_indices() {
        if matches!(ch, '.' | '!' | '?') {
            let s = text[start..i + 1].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

pub const MIN_CHUNK_SENTENCES: usize = 4;

/// Random window of at least four consecutive sentences, drawn uniformly over
/// all valid `(start, length)` pairs. Short texts come back whole.
pub fn chunk_description(text: &str, rng: &mut Rng) -> String {
    let sentences = split_sentences(text);
    let n = sentences.len();
    if n <= MIN_CHUNK_SENTENCES {
        return text.to_string();
    }
    // windows of length L: n - L + 1 starts
    let total: usize = (MIN_CHUNK_SENTENCES..=n).map(|l| n - l + 1).sum();
    let mut k = rng.random_range(0..total);
    for len in MIN_CHUNK_SENTENCES..=n {
        let starts = n - len + 1;
        if k < starts {
            return sentences[k..k + len].join(" ");
        }
        k -= starts;
    }
    unreachable!("window index within total")
}

const TEMPLATES: [&str; 12] = [
    "{Theme} fun for {aud}.",
    "Best {theme} game for {aud}!",
    "{Theme} levels made for {aud}.",
    "Join {aud} in {theme} adventure.",
    "Play {theme} events with {aud}.",
    "Collect {theme} coins, {aud}!",
    "Is {theme} best for {aud}?",
    "Explore a {theme} world, {aud}.",
    "Daily {theme} rewards for {aud}.",
    "Win {theme} bonus, {aud}!",
    "{Aud} will love {theme} hours.",
    "Build a {theme} world with {aud}.",
];

fn audience_word(a: Audience, rng: &mut Rng) -> &'static str {
    let list = match a {
        Audience::Kids => &KIDS,
        Audience::Neutral => &NEUTRAL,
        Audience::Adults => &ADULTS,
    };
    list[rng.random_range(0..list.len())]
}

fn theme_word(t: Theme, rng: &mut Rng) -> &'static str {
    let list = match t {
        Theme::None => &NO_THEME,
        Theme::Casino => &CASINO,
        Theme::Battle => &BATTLE,
    };
    list[rng.random_range(0..list.len())]
}

fn capitalize(word: &str) -> String {
    let mut c = word.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Template-grammar description whose sentences carry the audience and
/// theme tokens of `latent`.
pub fn describe(latent: &LatentFactors, n_sentences: usize, rng: &mut Rng) -> String {
    let mut sentences = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let t = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
        let theme = theme_word(latent.theme, rng);
        let aud = audience_word(latent.audience, rng);
        sentences.push(
            t.replace("{Theme}", &capitalize(theme))
                .replace("{theme}", theme)
                .replace("{Aud}", &capitalize(aud))
                .replace("{aud}", aud),
        );
    }
    sentences.join(" ")
}
