//! Deterministic synthetic text for desk-scale runs.
//!
//! Sentences follow a small grammar over a generated lexicon of a few
//! thousand pseudo-words with Zipf-distributed frequencies. Subjects and
//! verbs agree in number, every noun prefers a few verbs and every verb a
//! few objects, and some lines carry three-digit sums or copied spans. A
//! byte-level model has to memorise spellings and associations well past
//! what fits in a small network, so weight precision shows up in the loss.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LEXICON_SEED: u64 = 0x7e7a_1e71_c0de;
const NOUNS: usize = 1600;
const VERBS: usize = 600;
const ADJECTIVES: usize = 400;
const PREFERRED: usize = 4;
const ZIPF_EXPONENT: f64 = 1.1;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br",
    "cl", "dr", "fl", "gr", "pl", "sk", "st", "tr", "th", "sh", "ch",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "l", "m", "st", "nd", "x"];

struct Class {
    words: Vec<String>,
    freq: WeightedIndex<f64>,
    preferred: Vec<[usize; PREFERRED]>,
}

struct Lexicon {
    nouns: Class,
    verbs: Class,
    adjectives: Class,
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.random_range(1..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    w
}

fn zipf(n: usize) -> WeightedIndex<f64> {
    WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-ZIPF_EXPONENT))).unwrap()
}

impl Lexicon {
    fn build() -> Lexicon {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let mut seen = std::collections::HashSet::new();
        let mut draw = |n: usize, rng: &mut ChaCha8Rng| {
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let w = pseudo_word(rng);
                // plural and third-person forms append "s", so keep stems distinct
                if !w.ends_with('s') && seen.insert(w.clone()) {
                    out.push(w);
                }
            }
            out
        };
        let nouns = draw(NOUNS, &mut rng);
        let verbs = draw(VERBS, &mut rng);
        let adjectives = draw(ADJECTIVES, &mut rng);
        let links = |n: usize, targets: usize, rng: &mut ChaCha8Rng| {
            (0..n)
                .map(|_| core::array::from_fn(|_| rng.random_range(0..targets)))
                .collect::<Vec<[usize; PREFERRED]>>()
        };
        let noun_verbs = links(NOUNS, VERBS, &mut rng);
        let verb_objects = links(VERBS, NOUNS, &mut rng);
        Lexicon {
            nouns: Class {
                words: nouns,
                freq: zipf(NOUNS),
                preferred: noun_verbs,
            },
            verbs: Class {
                words: verbs,
                freq: zipf(VERBS),
                preferred: verb_objects,
            },
            adjectives: Class {
                words: adjectives,
                freq: zipf(ADJECTIVES),
                preferred: Vec::new(),
            },
        }
    }

    fn noun_phrase(&self, rng: &mut ChaCha8Rng, noun: usize, plural: bool, out: &mut String) {
        out.push_str(if plural && rng.random_bool(0.5) {
            "some "
        } else {
            "the "
        });
        if rng.random_bool(0.4) {
            let a = self.adjectives.freq.sample(rng);
            out.push_str(&self.adjectives.words[a]);
            out.push(' ');
        }
        out.push_str(&self.nouns.words[noun]);
        if plural {
            out.push('s');
        }
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, out: &mut String) {
        let subject = self.nouns.freq.sample(rng);
        let plural = rng.random_bool(0.4);
        self.noun_phrase(rng, subject, plural, out);
        out.push(' ');
        let verb = if rng.random_bool(0.85) {
            *self.nouns.preferred[subject].choose(rng).unwrap()
        } else {
            self.verbs.freq.sample(rng)
        };
        out.push_str(&self.verbs.words[verb]);
        if !plural {
            out.push('s');
        }
        out.push(' ');
        let object = if rng.random_bool(0.85) {
            *self.verbs.preferred[verb].choose(rng).unwrap()
        } else {
            self.nouns.freq.sample(rng)
        };
        let object_plural = rng.random_bool(0.3);
        self.noun_phrase(rng, object, object_plural, out);
        out.push_str(". ");
    }
}

/// Generates exactly `len` bytes of ASCII text. The lexicon is fixed, and
/// `seed` only chooses which sentences are drawn.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    let lex = Lexicon::build();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 256);
    while out.len() < len {
        match rng.random_range(0..10) {
            0 => {
                let a: u32 = rng.random_range(100..1000);
                let b: u32 = rng.random_range(100..1000);
                out.push_str(&format!("{a} + {b} = {}. ", a + b));
            }
            1 => {
                let n = rng.random_range(2..5);
                let span: Vec<&str> = (0..n)
                    .map(|_| lex.nouns.words[lex.nouns.freq.sample(&mut rng)].as_str())
                    .collect();
                let span = span.join(" ");
                out.push_str(&format!("say {span} : {span}. "));
            }
            _ => lex.sentence(&mut rng, &mut out),
        }
        if rng.random_bool(0.1) {
            out.push('\n');
        }
    }
    out.truncate(len);
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_length_and_deterministic() {
        let a = synthetic_corpus(5000, 1);
        assert_eq!(a.len(), 5000);
        assert_eq!(a, synthetic_corpus(5000, 1));
        assert_ne!(a, synthetic_corpus(5000, 2));
        assert!(a.is_ascii());
    }

    #[test]
    fn sums_are_correct() {
        let text = String::from_utf8(synthetic_corpus(50_000, 4)).unwrap();
        let mut checked = 0;
        for part in text.split(". ") {
            let part = part.trim();
            let Some((lhs, rhs)) = part.split_once(" = ") else {
                continue;
            };
            let Some((a, b)) = lhs.split_once(" + ") else {
                continue;
            };
            let (Ok(a), Ok(b), Ok(c)) = (a.parse::<u32>(), b.parse::<u32>(), rhs.parse::<u32>())
            else {
                continue;
            };
            assert_eq!(a + b, c);
            checked += 1;
        }
        assert!(checked > 100);
    }
}
