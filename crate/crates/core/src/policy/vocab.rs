use crate::error::{Error, Result};
use crate::scene::instruction::{grammar_words, Instruction};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
const SPECIALS: usize = 2;

/// `[BOS, SEP, words…, bins…]`, disjoint contiguous ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    bins: usize,
}

impl Vocabulary {
    pub fn new(words: Vec<String>, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Parameter("vocabulary needs at least one action bin".into()));
        }
        let mut sorted = words.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != words.len() {
            return Err(Error::Parameter("duplicate vocabulary word".into()));
        }
        Ok(Self { words, bins })
    }

    /// The closed instruction grammar with `bins` action ids.
    pub fn for_grammar(bins: usize) -> Self {
        Self::new(grammar_words().into_iter().map(String::from).collect(), bins).unwrap()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn len(&self) -> usize {
        SPECIALS + self.words.len() + self.bins
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word_id(&self, w: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|x| x == w)
            .map(|i| SPECIALS + i)
            .ok_or_else(|| Error::Instruction(format!("word {w:?} not in vocabulary")))
    }

    pub fn bin_id(&self, bin: usize) -> usize {
        debug_assert!(bin < self.bins);
        SPECIALS + self.words.len() + bin
    }

    /// `[BOS, words…, SEP]`.
    pub fn encode_instruction(&self, ins: &Instruction) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in ins.words() {
            ids.push(self.word_id(&w)?);
        }
        ids.push(SEP);
        Ok(ids)
    }
}
