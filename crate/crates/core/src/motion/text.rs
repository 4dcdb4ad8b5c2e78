use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::Real;

/// The fixed 64-word vocabulary covering every template.
pub const VOCABULARY: [&str; 64] = [
    "one", "person", "walks", "toward", "the", "other", "a", "slowly", "approaches", "another",
    "first", "up", "to", "second", "and", "waves", "around", "in", "circle", "circles", "moves",
    "who", "turns", "watch", "two", "people", "dance", "mirror", "each", "copies", "of", "perform",
    "together", "pushes", "steps", "back", "shoves", "away", "retreats", "quickly", "gently",
    "left", "right", "forward", "backward", "hands", "arms", "stands", "still", "while", "facing",
    "partner", "both", "close", "far", "fast", "friend", "softly", "spins", "follows", "leans",
    "raises", "hand", "with",
];

pub const VOCAB_SIZE: usize = VOCABULARY.len();

pub fn token_id(word: &str) -> Option<u32> {
    VOCABULARY.iter().position(|w| *w == word).map(|i| i as u32)
}

/// Whitespace tokenization against the fixed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|w| {
            let w = w.to_lowercase();
            token_id(&w).ok_or_else(|| invalid("tokenize", format!("word {w:?} is not in the vocabulary")))
        })
        .collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<String> {
    let words = tokens
        .iter()
        .map(|&t| VOCABULARY.get(t as usize).copied().ok_or(Error::UnknownToken(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(words.join(" "))
}

/// A prompt: its words and token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrompt {
    pub text: String,
    pub tokens: Vec<u32>,
}

impl TextPrompt {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self {
            text: text.to_string(),
            tokens: tokenize(text)?,
        })
    }
}

/// Token ids together with their pooled embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextCondition<T> {
    pub tokens: Vec<u32>,
    pub embedding: Tensor<T>,
}

/// Mean-pooled learned token embeddings.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, rng: &mut R) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn([VOCAB_SIZE, dim], 0.5, rng));
        Self { table, dim }
    }

    /// `[B, V]` bag-of-words averaging matrix; an empty list gives a zero row.
    pub fn pooling_matrix<T: Real>(batch: &[&[u32]]) -> Result<Tensor<T>> {
        let mut m = Tensor::zeros([batch.len(), VOCAB_SIZE]);
        for (b, tokens) in batch.iter().enumerate() {
            let w = 1.0 / tokens.len().max(1) as f64;
            for &t in *tokens {
                if t as usize >= VOCAB_SIZE {
                    return Err(Error::UnknownToken(t));
                }
                m.data_mut()[b * VOCAB_SIZE + t as usize] += T::of(w);
            }
        }
        Ok(m)
    }

    /// `[B, dim]` pooled embeddings on the tape.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, batch: &[&[u32]]) -> Result<Var> {
        let pool = tape.constant(Self::pooling_matrix(batch)?);
        let table = tape.param(self.table);
        tape.matmul(pool, table)
    }

    pub fn encode<T: Real>(&self, store: &ParamStore<T>, tokens: &[u32]) -> Result<TextCondition<T>> {
        let mut tape = Tape::bind(store, false);
        let v = self.forward(&mut tape, &[tokens])?;
        let embedding = tape.value(v).clone().reshape([self.dim])?;
        Ok(TextCondition {
            tokens: tokens.to_vec(),
            embedding,
        })
    }
}
