//! Line text sampling.

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Between `min_words` and `max_words` uniform draws from `vocab`, joined
/// by single spaces.
pub fn sample_text(
    vocab: &[String],
    min_words: usize,
    max_words: usize,
    rng: &mut Rng,
) -> Result<String> {
    if vocab.is_empty() {
        return Err(Error::contract("vocabulary is empty"));
    }
    check_counts(min_words, max_words)?;
    let n = rng.random_range(min_words..=max_words);
    let words: Vec<&str> = (0..n)
        .map(|_| vocab.choose(rng).expect("nonempty").as_str())
        .collect();
    Ok(words.join(" "))
}

fn check_counts(min_words: usize, max_words: usize) -> Result<()> {
    if min_words == 0 || min_words > max_words {
        return Err(Error::contract(format!(
            "word count range {min_words}..={max_words} is empty"
        )));
    }
    Ok(())
}

/// A word list drawn from with relative weight `weight`.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabGroup {
    pub name: String,
    pub words: Vec<String>,
    pub weight: f64,
}

/// Draws each word by first picking a group in proportion to its weight.
#[derive(Clone, Debug, PartialEq)]
pub struct TextSampler {
    pub groups: Vec<VocabGroup>,
}

impl TextSampler {
    pub fn new(groups: Vec<VocabGroup>) -> Result<Self> {
        if groups.is_empty() || groups.iter().any(|g| g.words.is_empty()) {
            return Err(Error::contract(
                "every vocabulary group needs at least one word",
            ));
        }
        if groups
            .iter()
            .any(|g| !(g.weight > 0.0 && g.weight.is_finite()))
        {
            return Err(Error::contract("group weights must be positive and finite"));
        }
        Ok(TextSampler { groups })
    }

    pub fn single(words: Vec<String>) -> Result<Self> {
        Self::new(vec![VocabGroup {
            name: "words".into(),
            words,
            weight: 1.0,
        }])
    }

    pub fn sample(&self, min_words: usize, max_words: usize, rng: &mut Rng) -> Result<String> {
        if self.groups.len() == 1 {
            return sample_text(&self.groups[0].words, min_words, max_words, rng);
        }
        check_counts(min_words, max_words)?;
        let n = rng.random_range(min_words..=max_words);
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            let g = self
                .groups
                .choose_weighted(rng, |g| g.weight)
                .expect("validated weights");
            words.push(g.words.choose(rng).expect("nonempty").as_str());
        }
        Ok(words.join(" "))
    }
}

/// `size` random words over `alphabet` with lengths in `min_len..=max_len`.
pub fn procedural_vocab(
    alphabet: &[char],
    size: usize,
    min_len: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<String>> {
    if alphabet.is_empty() || size == 0 || min_len == 0 || min_len > max_len {
        return Err(Error::contract(
            "procedural vocabulary needs letters, a size and a valid length range",
        ));
    }
    Ok((0..size)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            (0..len)
                .map(|_| *alphabet.choose(rng).expect("nonempty"))
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[test]
    fn single_word_vocab() {
        let v = vec!["w".to_string()];
        assert_eq!(sample_text(&v, 1, 1, &mut rng(0)).unwrap(), "w");
        assert!(sample_text(&[], 1, 1, &mut rng(0)).is_err());
        assert!(sample_text(&v, 2, 1, &mut rng(0)).is_err());
    }

    #[test]
    fn weighted_groups_follow_weights() {
        let s = TextSampler::new(vec![
            VocabGroup {
                name: "a".into(),
                words: vec!["a".into()],
                weight: 3.0,
            },
            VocabGroup {
                name: "b".into(),
                words: vec!["b".into()],
                weight: 1.0,
            },
        ])
        .unwrap();
        let mut r = rng(5);
        let text = s.sample(4000, 4000, &mut r).unwrap();
        let a = text.chars().filter(|&c| c == 'a').count() as f64;
        assert!((a / 4000.0 - 0.75).abs() < 0.03, "{a}");
    }
}
