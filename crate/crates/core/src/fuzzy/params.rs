//! Learnable parameters of the token branch.
//!
//! Every container is generic over its leaf type so the same layout can hold
//! owned matrices, tape handles, or gradients.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numeric::Matrix;

macro_rules! leaf_struct {
    ($name:ident { $($field:ident),+ $(,)? }) => {
        impl<T> $name<T> {
            pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> $name<U> {
                $name { $($field: f(&self.$field)),+ }
            }

            pub(crate) fn collect<'a>(&'a self, out: &mut Vec<&'a T>) {
                $(out.push(&self.$field);)+
            }

            pub(crate) fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
                $(out.push(&mut self.$field);)+
            }
        }
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm<T = Matrix> {
    pub gain: T,
    pub bias: T,
}
leaf_struct!(LayerNorm { gain, bias });

/// Single-head attention projections, all `D x D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attention<T = Matrix> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}
leaf_struct!(Attention { wq, wk, wv, wo });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward<T = Matrix> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}
leaf_struct!(FeedForward { w1, b1, w2, b2 });

/// Linear -> GELU -> linear with a scalar output (the log-scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaMlp<T = Matrix> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}
leaf_struct!(SigmaMlp { w1, b1, w2, b2 });

/// Pre-norm self-attention + feed-forward block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfBlock<T = Matrix> {
    pub norm_attn: LayerNorm<T>,
    pub attn: Attention<T>,
    pub norm_ffn: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T> SelfBlock<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> SelfBlock<U> {
        SelfBlock {
            norm_attn: self.norm_attn.map(f),
            attn: self.attn.map(f),
            norm_ffn: self.norm_ffn.map(f),
            ffn: self.ffn.map(f),
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a T>) {
        self.norm_attn.collect(out);
        self.attn.collect(out);
        self.norm_ffn.collect(out);
        self.ffn.collect(out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.norm_attn.collect_mut(out);
        self.attn.collect_mut(out);
        self.norm_ffn.collect_mut(out);
        self.ffn.collect_mut(out);
    }
}

/// One cross-attention layer followed by `blocks.len()` self blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFormerParams<T = Matrix> {
    pub norm_query: LayerNorm<T>,
    pub norm_context: LayerNorm<T>,
    pub cross: Attention<T>,
    pub blocks: Vec<SelfBlock<T>>,
}

impl<T> CrossFormerParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> CrossFormerParams<U> {
        CrossFormerParams {
            norm_query: self.norm_query.map(f),
            norm_context: self.norm_context.map(f),
            cross: self.cross.map(f),
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
        }
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a T>) {
        self.norm_query.collect(out);
        self.norm_context.collect(out);
        self.cross.collect(out);
        self.blocks.iter().for_each(|b| b.collect(out));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.norm_query.collect_mut(out);
        self.norm_context.collect_mut(out);
        self.cross.collect_mut(out);
        self.blocks.iter_mut().for_each(|b| b.collect_mut(out));
    }
}

/// The shared learnable query, `K x D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedQuery {
    pub tokens: Matrix,
}

impl SharedQuery {
    /// Normal entries with standard deviation 0.02.
    pub fn init(num_queries: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            tokens: normal_matrix(num_queries, dim, 0.02, rng),
        }
    }
}

/// Everything the token branch learns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyParams<T = Matrix> {
    pub query: T,
    pub crossformer: CrossFormerParams<T>,
    pub sigma_text: SigmaMlp<T>,
    pub sigma_aerial: SigmaMlp<T>,
}

impl<T> FuzzyParams<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> FuzzyParams<U> {
        FuzzyParams {
            query: f(&self.query),
            crossformer: self.crossformer.map(f),
            sigma_text: self.sigma_text.map(f),
            sigma_aerial: self.sigma_aerial.map(f),
        }
    }

    /// Leaves in a fixed traversal order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = vec![&self.query];
        self.crossformer.collect(&mut out);
        self.sigma_text.collect(&mut out);
        self.sigma_aerial.collect(&mut out);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.query];
        self.crossformer.collect_mut(&mut out);
        self.sigma_text.collect_mut(&mut out);
        self.sigma_aerial.collect_mut(&mut out);
        out
    }

    /// Rebuilds this layout from leaves given in [`FuzzyParams::leaves`] order.
    pub fn rebuild<U: Clone>(&self, leaves: &[U]) -> FuzzyParams<U> {
        let mut it = leaves.iter();
        self.map(&mut |_| it.next().expect("leaf count").clone())
    }
}

/// Shapes of the token branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuzzyShape {
    pub num_queries: usize,
    pub depth: usize,
    pub ffn_mult: usize,
    pub sigma_hidden: usize,
}

impl Default for FuzzyShape {
    fn default() -> Self {
        Self {
            num_queries: 4,
            depth: 2,
            ffn_mult: 4,
            sigma_hidden: 32,
        }
    }
}

pub(crate) fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

fn layer_norm(dim: usize) -> LayerNorm {
    LayerNorm {
        gain: Matrix::filled(1, dim, 1.0),
        bias: Matrix::zeros(1, dim),
    }
}

fn attention(dim: usize, rng: &mut impl Rng) -> Attention {
    let std = 1.0 / (dim as f64).sqrt();
    Attention {
        wq: normal_matrix(dim, dim, std, rng),
        wk: normal_matrix(dim, dim, std, rng),
        wv: normal_matrix(dim, dim, std, rng),
        wo: normal_matrix(dim, dim, std, rng),
    }
}

impl CrossFormerParams {
    pub fn init(dim: usize, depth: usize, ffn_mult: usize, rng: &mut impl Rng) -> Self {
        let hidden = dim * ffn_mult;
        Self {
            norm_query: layer_norm(dim),
            norm_context: layer_norm(dim),
            cross: {
                let mut a = attention(dim, rng);
                a.wv = Matrix::identity(dim);
                a.wo = Matrix::identity(dim);
                a
            },
            blocks: (0..depth)
                .map(|_| SelfBlock {
                    norm_attn: layer_norm(dim),
                    attn: attention(dim, rng),
                    norm_ffn: layer_norm(dim),
                    ffn: FeedForward {
                        w1: normal_matrix(dim, hidden, 1.0 / (dim as f64).sqrt(), rng),
                        b1: Matrix::zeros(1, hidden),
                        w2: normal_matrix(hidden, dim, 1.0 / (hidden as f64).sqrt(), rng),
                        b2: Matrix::zeros(1, dim),
                    },
                })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.cross.wq.rows()
    }
}

impl SigmaMlp {
    pub fn init(dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: normal_matrix(dim, hidden, 1.0 / (dim as f64).sqrt(), rng),
            b1: Matrix::zeros(1, hidden),
            w2: normal_matrix(hidden, 1, 0.1 / (hidden as f64).sqrt(), rng),
            b2: Matrix::zeros(1, 1),
        }
    }
}

impl FuzzyParams {
    pub fn init(dim: usize, shape: FuzzyShape, rng: &mut impl Rng) -> Self {
        Self {
            query: SharedQuery::init(shape.num_queries, dim, rng).tokens,
            crossformer: CrossFormerParams::init(dim, shape.depth, shape.ffn_mult, rng),
            sigma_text: SigmaMlp::init(dim, shape.sigma_hidden, rng),
            sigma_aerial: SigmaMlp::init(dim, shape.sigma_hidden, rng),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.query.rows()
    }

    pub fn dim(&self) -> usize {
        self.query.cols()
    }
}
