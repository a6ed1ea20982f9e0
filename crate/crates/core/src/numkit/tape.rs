use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::params::GradSet;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    ScaleAdd { lhs: Var, rhs: Var, alpha: f64 },
    Concat(Vec<Var>),
    Gather { src: Var, index: Vec<usize> },
    Propagate { src: Var, edges: Vec<(usize, usize, f64)>, group: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Records primitive ops during a forward pass and replays them backwards.
///
/// Parameters enter the tape by name through [`GradTape::param`]; the
/// backward pass returns one gradient per registered name.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor2 {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("tape already consumed by backward".into()));
        }
        Ok(())
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a named trainable parameter.
    pub fn param(&mut self, name: &str, value: &Tensor2) -> Var {
        self.push(value.clone(), Op::Param(name.to_owned()), true)
    }

    pub fn matmul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.check_live()?;
        let value = self.value(lhs).matmul(self.value(rhs))?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, Op::MatMul(lhs, rhs), needs))
    }

    /// Adds a `1 × cols` bias row to every row of `input`.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        self.check_live()?;
        let x = self.value(input);
        let b = self.value(bias);
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("1x{}", x.cols()),
                format!("{}x{}", b.rows(), b.cols()),
            ));
        }
        let mut value = x.clone();
        for r in 0..value.rows() {
            for (o, bv) in value.row_mut(r).iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(input, bias), needs))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check_live()?;
        let mut value = self.value(input).clone();
        value.data_mut().iter_mut().for_each(|v| {
            if *v < 0.0 {
                *v = 0.0
            }
        });
        let needs = self.needs(input);
        Ok(self.push(value, Op::Relu(input), needs))
    }

    /// `lhs + alpha · rhs`.
    pub fn scale_add(&mut self, lhs: Var, rhs: Var, alpha: f64) -> Result<Var> {
        self.check_live()?;
        let mut value = self.value(lhs).clone();
        value.add_scaled(self.value(rhs), alpha)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, Op::ScaleAdd { lhs, rhs, alpha }, needs))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.scale_add(lhs, rhs, 1.0)
    }

    /// Column-wise concatenation of equally tall parts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let rows = match parts.first() {
            Some(v) => self.value(*v).rows(),
            None => return Err(Error::Usage("concat of zero parts".into())),
        };
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!("{rows} rows"),
                    format!("{} rows", t.rows()),
                ));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor2::new(rows, cols, data)?;
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    /// Output row `r` is row `index[r]` of `src`.
    pub fn gather_rows(&mut self, src: Var, index: Vec<usize>) -> Result<Var> {
        self.check_live()?;
        let s = self.value(src);
        let mut data = Vec::with_capacity(index.len() * s.cols());
        for &i in &index {
            if i >= s.rows() {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index < {}", s.rows()),
                    format!("index {i}"),
                ));
            }
            data.extend_from_slice(s.row(i));
        }
        let value = Tensor2::new(index.len(), s.cols(), data)?;
        let needs = self.needs(src);
        Ok(self.push(value, Op::Gather { src, index }, needs))
    }

    /// Weighted scatter within groups of `group` consecutive rows: for every
    /// group offset `o` and edge `(from, to, w)`,
    /// `out[o + to] += w · src[o + from]`. Rows with no incoming edge are zero.
    pub fn propagate(&mut self, src: Var, edges: &[(usize, usize, f64)], group: usize) -> Result<Var> {
        self.check_live()?;
        let s = self.value(src);
        if group == 0 || s.rows() % group != 0 {
            return Err(Error::shape(
                "propagate",
                format!("rows divisible by {group}"),
                format!("{} rows", s.rows()),
            ));
        }
        if let Some(&(f, t, _)) = edges.iter().find(|(f, t, _)| *f >= group || *t >= group) {
            return Err(Error::shape(
                "propagate",
                format!("edge endpoints < {group}"),
                format!("edge {f}->{t}"),
            ));
        }
        let cols = s.cols();
        let mut value = Tensor2::zeros(s.rows(), cols);
        for base in (0..s.rows()).step_by(group) {
            for &(from, to, w) in edges {
                let src_row = &s.data()[(base + from) * cols..(base + from + 1) * cols];
                let out_row = &mut value.data_mut()[(base + to) * cols..(base + to + 1) * cols];
                for (o, v) in out_row.iter_mut().zip(src_row) {
                    *o += w * v;
                }
            }
        }
        let needs = self.needs(src);
        Ok(self.push(
            value,
            Op::Propagate {
                src,
                edges: edges.to_vec(),
                group,
            },
            needs,
        ))
    }

    /// Replays the tape backwards from its last recorded value, seeded with
    /// `loss_grad`, and returns the gradient of every registered parameter.
    /// The tape is consumed.
    pub fn backward(&mut self, loss_grad: &Tensor2) -> Result<GradSet> {
        self.check_live()?;
        let last = match self.nodes.last() {
            Some(n) => n,
            None => return Err(Error::Usage("backward on an empty tape".into())),
        };
        if !last.value.same_shape(loss_grad) {
            return Err(Error::shape(
                "backward",
                format!("{}x{}", last.value.rows(), last.value.cols()),
                format!("{}x{}", loss_grad.rows(), loss_grad.cols()),
            ));
        }
        let nodes = core::mem::take(&mut self.nodes);
        self.consumed = true;

        let mut grads: Vec<Option<Tensor2>> = vec![None; nodes.len()];
        grads[nodes.len() - 1] = Some(loss_grad.clone());
        let mut out = GradSet::default();

        for idx in (0..nodes.len()).rev() {
            let node = &nodes[idx];
            if let Op::Param(name) = &node.op {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor2::zeros(node.value.rows(), node.value.cols()));
                out.accumulate(name, g)?;
                continue;
            }
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        let ga = g.matmul_transposed(&nodes[b.0].value)?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if nodes[b.0].needs_grad {
                        let gb = nodes[a.0].value.transposed_matmul(&g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::AddBias(x, b) => {
                    if nodes[b.0].needs_grad {
                        let mut gb = Tensor2::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *b, gb)?;
                    }
                    if nodes[x.0].needs_grad {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, ov) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        if *ov <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::ScaleAdd { lhs, rhs, alpha } => {
                    if nodes[rhs.0].needs_grad {
                        let mut gr = g.clone();
                        gr.scale(*alpha);
                        accumulate(&mut grads, *rhs, gr)?;
                    }
                    if nodes[lhs.0].needs_grad {
                        accumulate(&mut grads, *lhs, g)?;
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = nodes[p.0].value.cols();
                        if nodes[p.0].needs_grad {
                            let mut data = Vec::with_capacity(g.rows() * width);
                            for r in 0..g.rows() {
                                data.extend_from_slice(&g.row(r)[offset..offset + width]);
                            }
                            accumulate(&mut grads, *p, Tensor2::new(g.rows(), width, data)?)?;
                        }
                        offset += width;
                    }
                }
                Op::Gather { src, index } => {
                    let s = &nodes[src.0].value;
                    let mut gs = Tensor2::zeros(s.rows(), s.cols());
                    for (r, &i) in index.iter().enumerate() {
                        for (o, v) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *src, gs)?;
                }
                Op::Propagate { src, edges, group } => {
                    let cols = g.cols();
                    let mut gs = Tensor2::zeros(g.rows(), cols);
                    for base in (0..g.rows()).step_by(*group) {
                        for &(from, to, w) in edges {
                            let g_row = &g.data()[(base + to) * cols..(base + to + 1) * cols];
                            let o_row = &mut gs.data_mut()[(base + from) * cols..(base + from + 1) * cols];
                            for (o, v) in o_row.iter_mut().zip(g_row) {
                                *o += w * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *src, gs)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], var: Var, g: Tensor2) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
