//! Reverse-mode gradient capture.
//!
//! A [`Tape`] records a short chain of tensor operations starting at one or
//! more leaf activations and can propagate a seed gradient from any recorded
//! output back to them. Model weights are borrowed, never copied onto the
//! tape, and never receive gradients.
//!
//! Model code is written once against [`Ops`] and runs either eagerly
//! ([`Eager`], no bookkeeping) or recorded ([`Tape`]).

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gelu_grad_scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<'w> {
    Leaf,
    Linear {
        x: usize,
        weight: &'w Tensor,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    /// `a @ b^T`
    MatMulNt {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Softmax {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: &'w Tensor,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu {
        x: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
        width: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    Row {
        x: usize,
        row: usize,
    },
    Sum {
        x: usize,
    },
}

struct Node<'w> {
    value: Tensor,
    op: Op<'w>,
}

pub struct Tape<'w> {
    id: u64,
    nodes: Vec<Node<'w>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'w> Tape<'w> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.index(v)?].value)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op<'w>) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.index(x)?;
        let s = self.val(xi).sum();
        Ok(self.push(Tensor::new(vec![1], vec![s])?, Op::Sum { x: xi }))
    }

    /// Gradient of `output[element]` with respect to `target`.
    pub fn grad_of_element(&self, output: Var, element: usize, target: Var) -> Result<Tensor> {
        let out = self.index(output)?;
        let len = self.val(out).len();
        if element >= len {
            return Err(Error::Usage(format!(
                "output element {element} out of range for {len} values"
            )));
        }
        let mut seed = Tensor::zeros(self.val(out).shape());
        seed.data_mut()[element] = 1.0;
        self.backward(output, seed, target)
    }

    /// Propagates `seed` (shaped like `output`) back to `target`.
    pub fn backward(&self, output: Var, seed: Tensor, target: Var) -> Result<Tensor> {
        let out = self.index(output)?;
        let tgt = self.index(target)?;
        if seed.shape() != self.val(out).shape() {
            return Err(Error::shape(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.val(out).shape()
            )));
        }
        if tgt > out {
            return Err(Error::Usage("target was recorded after the output".into()));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; out + 1];
        grads[out] = Some(seed);

        // Nodes only reference earlier indices, so a reverse sweep is a valid
        // topological order.
        for i in (tgt + 1..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            for (input, contribution) in self.local_grads(i, &g)? {
                accumulate(&mut grads[input], contribution)?;
            }
        }
        Ok(grads[tgt]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.val(tgt).shape())))
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Linear { x, weight } => vec![(*x, g.matmul(weight)?)],
            Op::MatMul { a, b } => vec![
                (*a, g.matmul_nt(self.val(*b))?),
                (*b, self.val(*a).matmul_tn(g)?),
            ],
            Op::MatMulNt { a, b } => vec![
                (*a, g.matmul(self.val(*b))?),
                (*b, g.matmul_tn(self.val(*a))?),
            ],
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale { x, factor } => vec![(*x, g.scale(*factor))],
            Op::Softmax { x } => {
                let y = &node.value;
                let d = *y.shape().last().unwrap_or(&1);
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out
                    .chunks_exact_mut(d)
                    .zip(y.data().chunks_exact(d))
                    .zip(g.data().chunks_exact(d))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), out)?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                xhat,
                inv_std,
            } => {
                let d = gamma.len();
                let mut out = vec![0.0; xhat.len()];
                for (r, ((o, h), gr)) in out
                    .chunks_exact_mut(d)
                    .zip(xhat.data().chunks_exact(d))
                    .zip(g.data().chunks_exact(d))
                    .enumerate()
                {
                    let dh: Vec<f64> = gr.iter().zip(gamma.data()).map(|(a, b)| a * b).collect();
                    let mean_dh = dh.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        o[j] = inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
                    }
                }
                vec![(*x, Tensor::new(xhat.shape().to_vec(), out)?)]
            }
            Op::Gelu { x } => {
                let xv = self.val(*x);
                let dx = g.zip_grad(xv, |gv, xv| gv * gelu_grad_scalar(xv))?;
                vec![(*x, dx)]
            }
            Op::SliceCols { x, start, width } => {
                let (r, c) = self.val(*x).dims2()?;
                let mut out = vec![0.0; r * c];
                for row in 0..r {
                    out[row * c + start..row * c + start + width]
                        .copy_from_slice(&g.data()[row * width..(row + 1) * width]);
                }
                vec![(*x, Tensor::new(vec![r, c], out)?)]
            }
            Op::ConcatCols { parts } => {
                let mut grads = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let w = self.val(p).dims2()?.1;
                    grads.push((p, g.slice_cols(start, start + w)?));
                    start += w;
                }
                grads
            }
            Op::Row { x, row } => {
                let (r, c) = self.val(*x).dims2()?;
                let mut out = vec![0.0; r * c];
                out[row * c..(row + 1) * c].copy_from_slice(g.data());
                vec![(*x, Tensor::new(vec![r, c], out)?)]
            }
            Op::Sum { x } => {
                let shape = self.val(*x).shape().to_vec();
                vec![(*x, Tensor::full(&shape, g.data()[0]))]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

impl Tensor {
    fn zip_grad(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape("gradient shape mismatch"));
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape().to_vec(), data)
    }
}

/// The tensor operations a transformer block needs, evaluated either eagerly
/// or on a tape.
pub trait Ops<'w> {
    type Value: Clone;

    fn get<'a>(&'a self, v: &'a Self::Value) -> Result<&'a Tensor>;
    fn linear(&mut self, x: &Self::Value, w: &'w Tensor, b: Option<&'w Tensor>)
        -> Result<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn matmul_nt(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, factor: f64) -> Result<Self::Value>;
    fn softmax_rows(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn layer_norm(
        &mut self,
        x: &Self::Value,
        gamma: &'w Tensor,
        beta: &'w Tensor,
        eps: f64,
    ) -> Result<Self::Value>;
    fn gelu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn slice_cols(&mut self, x: &Self::Value, start: usize, end: usize) -> Result<Self::Value>;
    fn concat_cols(&mut self, parts: &[Self::Value]) -> Result<Self::Value>;
    fn row(&mut self, x: &Self::Value, row: usize) -> Result<Self::Value>;
}

/// Plain evaluation with no recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl<'w> Ops<'w> for Eager {
    type Value = Tensor;

    fn get<'a>(&'a self, v: &'a Tensor) -> Result<&'a Tensor> {
        Ok(v)
    }
    fn linear(&mut self, x: &Tensor, w: &'w Tensor, b: Option<&'w Tensor>) -> Result<Tensor> {
        x.linear(w, b)
    }
    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul(b)
    }
    fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.matmul_nt(b)
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn scale(&mut self, x: &Tensor, factor: f64) -> Result<Tensor> {
        Ok(x.scale(factor))
    }
    fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        x.softmax_rows()
    }
    fn layer_norm(&mut self, x: &Tensor, g: &'w Tensor, b: &'w Tensor, eps: f64) -> Result<Tensor> {
        x.layer_norm(g, b, eps)
    }
    fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(x.gelu())
    }
    fn slice_cols(&mut self, x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        x.slice_cols(start, end)
    }
    fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat_cols(&refs)
    }
    fn row(&mut self, x: &Tensor, row: usize) -> Result<Tensor> {
        x.row(row)
    }
}

impl<'w> Ops<'w> for Tape<'w> {
    type Value = Var;

    fn get<'a>(&'a self, v: &'a Var) -> Result<&'a Tensor> {
        self.value(*v)
    }

    fn linear(&mut self, x: &Var, w: &'w Tensor, b: Option<&'w Tensor>) -> Result<Var> {
        let xi = self.index(*x)?;
        let y = self.val(xi).linear(w, b)?;
        Ok(self.push(y, Op::Linear { x: xi, weight: w }))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ai, bi) = (self.index(*a)?, self.index(*b)?);
        let y = self.val(ai).matmul(self.val(bi))?;
        Ok(self.push(y, Op::MatMul { a: ai, b: bi }))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ai, bi) = (self.index(*a)?, self.index(*b)?);
        let y = self.val(ai).matmul_nt(self.val(bi))?;
        Ok(self.push(y, Op::MatMulNt { a: ai, b: bi }))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (ai, bi) = (self.index(*a)?, self.index(*b)?);
        let y = self.val(ai).add(self.val(bi))?;
        Ok(self.push(y, Op::Add { a: ai, b: bi }))
    }

    fn scale(&mut self, x: &Var, factor: f64) -> Result<Var> {
        let xi = self.index(*x)?;
        let y = self.val(xi).scale(factor);
        Ok(self.push(y, Op::Scale { x: xi, factor }))
    }

    fn softmax_rows(&mut self, x: &Var) -> Result<Var> {
        let xi = self.index(*x)?;
        let y = self.val(xi).softmax_rows()?;
        Ok(self.push(y, Op::Softmax { x: xi }))
    }

    fn layer_norm(&mut self, x: &Var, gamma: &'w Tensor, beta: &'w Tensor, eps: f64) -> Result<Var> {
        let xi = self.index(*x)?;
        let (y, xhat, inv_std) = self.val(xi).layer_norm_parts(gamma, beta, eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x: xi,
                gamma,
                xhat,
                inv_std,
            },
        ))
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let xi = self.index(*x)?;
        let y = self.val(xi).gelu();
        Ok(self.push(y, Op::Gelu { x: xi }))
    }

    fn slice_cols(&mut self, x: &Var, start: usize, end: usize) -> Result<Var> {
        let xi = self.index(*x)?;
        let y = self.val(xi).slice_cols(start, end)?;
        Ok(self.push(
            y,
            Op::SliceCols {
                x: xi,
                start,
                width: end - start,
            },
        ))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|p| self.index(*p))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = idx.iter().map(|&i| self.val(i)).collect();
        let y = Tensor::concat_cols(&refs)?;
        Ok(self.push(y, Op::ConcatCols { parts: idx }))
    }

    fn row(&mut self, x: &Var, row: usize) -> Result<Var> {
        let xi = self.index(*x)?;
        let y = self.val(xi).row(row)?;
        Ok(self.push(y, Op::Row { x: xi, row }))
    }
}
