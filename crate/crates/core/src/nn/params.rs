//! Flat parameter storage shared by every trainable model.
//!
//! A model owns one `Params` buffer and records `ParamRange`s into it; its
//! gradient is a plain `Vec<f64>` of the same length. This keeps the
//! optimizer, checkpointing and finite-difference checks model-agnostic.

use std::ops::Range;

use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRange {
    pub offset: usize,
    pub len: usize,
}

impl ParamRange {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn end(&self) -> usize {
        self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub range: ParamRange,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub values: Vec<f64>,
    pub entries: Vec<ParamEntry>,
}

pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Uniform(f64),
    Identity(usize),
}

#[derive(Default)]
pub struct ParamBuilder {
    params: Params,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> ParamRange {
        let len: usize = shape.iter().product();
        let offset = self.params.values.len();
        match init {
            Init::Zeros => self.params.values.extend(std::iter::repeat_n(0.0, len)),
            Init::Ones => self.params.values.extend(std::iter::repeat_n(1.0, len)),
            Init::FanIn(fan_in) => {
                let s = 1.0 / (fan_in.max(1) as f64).sqrt();
                self.params.values.extend((0..len).map(|_| rng.gen_range(-s..s)));
            }
            Init::Uniform(s) => {
                self.params.values.extend((0..len).map(|_| rng.gen_range(-s..s)));
            }
            Init::Identity(n) => {
                assert_eq!(len, n * n, "identity init needs a square shape");
                self.params
                    .values
                    .extend((0..len).map(|i| if i / n == i % n { 1.0 } else { 0.0 }));
            }
        }
        let range = ParamRange { offset, len };
        self.params.entries.push(ParamEntry {
            name: name.to_string(),
            range,
            shape: shape.to_vec(),
        });
        range
    }

    pub fn finish(self) -> Params {
        self.params
    }
}

impl Params {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, r: ParamRange) -> &[f64] {
        &self.values[r.range()]
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// Layout fingerprint: names and shapes, not values.
    pub fn same_layout(&self, other: &Params) -> bool {
        self.entries == other.entries && self.values.len() == other.values.len()
    }
}

/// Disjoint mutable views of two adjacent ranges (`a` immediately followed by `b`).
pub fn split_pair(grads: &mut [f64], a: ParamRange, b: ParamRange) -> (&mut [f64], &mut [f64]) {
    assert_eq!(a.end(), b.offset, "ranges must be adjacent");
    grads[a.offset..b.end()].split_at_mut(a.len)
}
