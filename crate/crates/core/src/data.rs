//! Training data: a bundled character corpus and a teacher-student regression task.

use crate::error::{Error, Result};
use crate::net::{Batch, Targets};
use crate::numerics::{gaussian_fill, Matrix, RngStream};

const BUNDLED: &str = include_str!("../data/corpus.txt");

/// Lowercased text with whitespace runs collapsed to one space, encoded over a sorted vocabulary.
#[derive(Debug, Clone)]
pub struct CharCorpus {
    tokens: Vec<usize>,
    vocab: Vec<char>,
    context: usize,
}

impl CharCorpus {
    pub fn bundled(context: usize) -> Result<Self> {
        Self::from_text(BUNDLED, context)
    }

    pub fn from_text(text: &str, context: usize) -> Result<Self> {
        if context == 0 {
            return Err(Error::domain("context length must be >= 1"));
        }
        let cleaned = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
        let mut vocab: Vec<char> = cleaned.chars().collect();
        vocab.sort_unstable();
        vocab.dedup();
        let tokens: Vec<usize> = cleaned
            .chars()
            .map(|c| vocab.binary_search(&c).expect("vocab built from the same text"))
            .collect();
        if tokens.len() <= context {
            return Err(Error::domain(format!(
                "corpus of {} characters is too short for context {context}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, vocab, context })
    }

    pub fn vocab(&self) -> &[char] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn input_dim(&self) -> usize {
        self.context * self.vocab.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of (context, next character) examples.
    pub fn n_examples(&self) -> usize {
        self.tokens.len() - self.context
    }

    /// One-hot contexts starting at each position, with the following character as target.
    pub fn batch_at(&self, positions: &[usize]) -> Result<Batch> {
        let v = self.vocab.len();
        let n = positions.len();
        if n == 0 {
            return Err(Error::domain("batch must contain at least one example"));
        }
        let mut x = Matrix::zeros(self.input_dim(), n);
        let mut targets = Vec::with_capacity(n);
        for (j, &p) in positions.iter().enumerate() {
            if p >= self.n_examples() {
                return Err(Error::domain(format!("position {p} out of range")));
            }
            for k in 0..self.context {
                x.data_mut()[(k * v + self.tokens[p + k]) * n + j] = 1.0;
            }
            targets.push(self.tokens[p + self.context]);
        }
        Batch::new(x, Targets::Classes(targets))
    }

    pub fn sample_batch(&self, batch: usize, rng: &mut RngStream) -> Result<Batch> {
        let positions: Vec<usize> = (0..batch)
            .map(|_| rng.below(self.n_examples() as u64) as usize)
            .collect();
        self.batch_at(&positions)
    }

    /// Every example in order, split into chunks of at most `chunk`.
    pub fn full_batches(&self, chunk: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let n = self.n_examples();
        let chunk = chunk.max(1);
        (0..n).step_by(chunk).map(move |start| {
            let positions: Vec<usize> = (start..(start + chunk).min(n)).collect();
            self.batch_at(&positions)
        })
    }
}

/// Regression targets `T x` from a fixed random teacher with iid standard-normal inputs.
#[derive(Debug, Clone)]
pub struct TeacherStudent {
    teacher: Matrix,
}

impl TeacherStudent {
    pub fn new(d_in: usize, d_out: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(Self {
            teacher: gaussian_fill(d_out, d_in, 0.0, 1.0 / d_in as f64, rng)?,
        })
    }

    pub fn teacher(&self) -> &Matrix {
        &self.teacher
    }

    pub fn sample_batch(&self, batch: usize, rng: &mut RngStream) -> Result<Batch> {
        let x = gaussian_fill(self.teacher.cols(), batch, 0.0, 1.0, rng)?;
        let t = self.teacher.matmul(&x)?;
        Batch::new(x, Targets::Values(t))
    }
}
