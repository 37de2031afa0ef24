use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantic_indexer::SemanticId;

/// Token-id layout: `M·K` codebook tokens (level-major), then the collision
/// digits, then PAD, BOS and EOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub levels: usize,
    pub codebook_size: usize,
    pub collision_vocab: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Code { level: usize, code: usize },
    Collision(usize),
    Pad,
    Bos,
    Eos,
}

impl Vocab {
    pub fn new(levels: usize, codebook_size: usize, collision_vocab: usize) -> Self {
        Vocab {
            levels,
            codebook_size,
            collision_vocab,
        }
    }

    pub fn num_codes(&self) -> usize {
        self.levels * self.codebook_size
    }

    /// Rows of the special table: collision digits plus PAD/BOS/EOS.
    pub fn num_special(&self) -> usize {
        self.collision_vocab + 3
    }

    pub fn size(&self) -> usize {
        self.num_codes() + self.num_special()
    }

    pub fn code(&self, level: usize, code: usize) -> usize {
        debug_assert!(level < self.levels && code < self.codebook_size);
        level * self.codebook_size + code
    }

    pub fn collision(&self, k: usize) -> usize {
        debug_assert!(k < self.collision_vocab);
        self.num_codes() + k
    }

    pub fn pad(&self) -> usize {
        self.num_codes() + self.collision_vocab
    }

    pub fn bos(&self) -> usize {
        self.pad() + 1
    }

    pub fn eos(&self) -> usize {
        self.pad() + 2
    }

    /// Tokens per item: `M` codes plus the collision digit.
    pub fn item_len(&self) -> usize {
        self.levels + 1
    }

    pub fn kind(&self, token: usize) -> Result<TokenKind> {
        let nc = self.num_codes();
        Ok(match token {
            t if t < nc => TokenKind::Code {
                level: t / self.codebook_size,
                code: t % self.codebook_size,
            },
            t if t < self.pad() => TokenKind::Collision(t - nc),
            t if t == self.pad() => TokenKind::Pad,
            t if t == self.bos() => TokenKind::Bos,
            t if t == self.eos() => TokenKind::Eos,
            t => return Err(Error::UnknownToken(t)),
        })
    }

    /// Codebook level of a token, or `None` for special tokens.
    pub fn level_of(&self, token: usize) -> Option<usize> {
        (token < self.num_codes()).then(|| token / self.codebook_size)
    }

    pub fn item_tokens(&self, sid: &SemanticId) -> Result<Vec<usize>> {
        if sid.codes.len() != self.levels
            || sid.codes.iter().any(|&c| c >= self.codebook_size)
            || sid.collision >= self.collision_vocab
        {
            return Err(Error::Data(format!(
                "semantic id {sid:?} does not fit vocabulary {self:?}"
            )));
        }
        let mut out: Vec<usize> = sid.codes.iter().enumerate().map(|(l, &c)| self.code(l, c)).collect();
        out.push(self.collision(sid.collision));
        Ok(out)
    }
}
