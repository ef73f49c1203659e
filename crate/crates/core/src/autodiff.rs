//! A small reverse-mode differentiation tape over [`Mat`] values.
//!
//! Only the operations the prompt-learning graph needs are provided. Each
//! node records its forward value and the op that produced it; `backward`
//! walks the tape in reverse and accumulates adjoints. Nodes that do not
//! depend on a trainable leaf are skipped entirely.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::loss::FOCAL_CLAMP;
use crate::tensor::{matmul_into, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-sparse linear operator `y = S · x`, used for bilinear resampling.
#[derive(Clone, Debug)]
pub struct SparseRows {
    pub in_rows: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn apply(&self, x: &Mat) -> Mat {
        let c = x.cols();
        let mut out = Mat::zeros(self.rows.len(), c);
        for (r, taps) in self.rows.iter().enumerate() {
            let o = out.row_mut(r);
            for &(src, w) in taps {
                for (ov, xv) in o.iter_mut().zip(x.row(src)) {
                    *ov += w * xv;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Mat) -> Mat {
        let c = g.cols();
        let mut out = Mat::zeros(self.in_rows, c);
        for (r, taps) in self.rows.iter().enumerate() {
            for &(src, w) in taps {
                let gr = g.row(r).to_vec();
                for (ov, gv) in out.row_mut(src).iter_mut().zip(gr) {
                    *ov += w * gv;
                }
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    NormalizeRows(Var),
    Transpose(Var),
    Linear(Var, Arc<SparseRows>),
    Focal {
        pred: Var,
        gt: Arc<[f64]>,
        alpha: f64,
        gamma: f64,
    },
    Dice {
        pred: Var,
        gt: Arc<[f64]>,
        eps: f64,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` if it received none.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(like.rows(), like.cols()))
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// `a + 1·row` where `row` is `1 × cols(a)`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let r = self.value(row);
        if r.rows() != 1 {
            return Err(shape_err("add_row expects a row vector", r.shape(), (1, 0)));
        }
        let value = self.value(a).add_row_broadcast(r.as_slice())?;
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(value, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|v| self.value(*v).cols())
            .ok_or_else(|| Error::Shape("concat of zero parts".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            if m.cols() != cols {
                return Err(shape_err("concat_rows", m.shape(), (m.rows(), cols)));
            }
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        let value = Mat::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let m = self.value(a);
        if start > end || end > m.rows() {
            return Err(Error::Shape(format!(
                "row slice {start}..{end} of {} rows",
                m.rows()
            )));
        }
        let value = m.slice_rows(start, end);
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).normalize_rows();
        let ng = self.ng(a);
        self.push(value, Op::NormalizeRows(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn linear(&mut self, a: Var, op: Arc<SparseRows>) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != op.in_rows {
            return Err(shape_err("linear operator", m.shape(), (op.in_rows, m.cols())));
        }
        let value = op.apply(m);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Linear(a, op), ng))
    }

    /// Scalar balanced focal loss of `pred` (all entries) against `gt`.
    pub fn focal(&mut self, pred: Var, gt: Arc<[f64]>, alpha: f64, gamma: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != gt.len() {
            return Err(shape_err("focal", (p.len(), 1), (gt.len(), 1)));
        }
        let value = crate::loss::focal_loss(p.as_slice(), &gt, alpha, gamma)?;
        let ng = self.ng(pred);
        Ok(self.push(
            Mat::row_vector(vec![value]),
            Op::Focal {
                pred,
                gt,
                alpha,
                gamma,
            },
            ng,
        ))
    }

    /// Scalar dice loss of `pred` against `gt`.
    pub fn dice(&mut self, pred: Var, gt: Arc<[f64]>, eps: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.len() != gt.len() {
            return Err(shape_err("dice", (p.len(), 1), (gt.len(), 1)));
        }
        let value = crate::loss::dice_loss(p.as_slice(), &gt, eps)?;
        let ng = self.ng(pred);
        Ok(self.push(Mat::row_vector(vec![value]), Op::Dice { pred, gt, eps }, ng))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("sum of zero terms".into()))?;
        let mut acc = self.value(*first).clone();
        for p in &parts[1..] {
            acc = acc.add(self.value(*p))?;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(acc, Op::Sum(parts.to_vec()), ng))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                ov.shape()
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Mat::filled(ov.rows(), ov.cols(), 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .as_mut_slice()
                    .iter_mut()
                    .zip(delta.as_slice())
                    .for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    matmul_into(g, &bv.transpose(), &mut da);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    matmul_into(&av.transpose(), g, &mut db);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    let mut s = g.mean_rows();
                    let n = g.rows() as f64;
                    s.as_mut_slice().iter_mut().for_each(|v| *v *= n);
                    acc(*row, s);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Tanh(a) => {
                let y = &node.value;
                let d = g
                    .as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                acc(*a, Mat::from_vec(y.rows(), y.cols(), d).expect("shape"));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .as_slice()
                    .iter()
                    .zip(y.as_slice())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                acc(*a, Mat::from_vec(y.rows(), y.cols(), d).expect("shape"));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows() as f64;
                let mut d = Mat::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for (dv, gv) in d.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *dv = gv * inv;
                    }
                }
                acc(*a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).rows();
                    if self.ng(*p) {
                        acc(*p, g.slice_rows(offset, offset + n));
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a) => {
                // y = x/|x|  =>  dx = (g - y (g·y)) / |x|
                let x = self.value(*a);
                let y = &node.value;
                let mut d = Mat::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = crate::tensor::norm(x.row(r));
                    if n == 0.0 {
                        continue;
                    }
                    let gy = crate::tensor::dot(g.row(r), y.row(r));
                    for ((dv, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *dv = (gv - yv * gy) / n;
                    }
                }
                acc(*a, d);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Linear(a, op) => acc(*a, op.apply_transpose(g)),
            Op::Focal {
                pred,
                gt,
                alpha,
                gamma,
            } => {
                let p = self.value(*pred);
                let scale = g.as_slice()[0];
                let d = focal_grad(p.as_slice(), gt, *alpha, *gamma)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                acc(*pred, Mat::from_vec(p.rows(), p.cols(), d).expect("shape"));
            }
            Op::Dice { pred, gt, eps } => {
                let p = self.value(*pred);
                let scale = g.as_slice()[0];
                let d = dice_grad(p.as_slice(), gt, *eps)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                acc(*pred, Mat::from_vec(p.rows(), p.cols(), d).expect("shape"));
            }
            Op::Sum(parts) => {
                for p in parts {
                    acc(*p, g.clone());
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn focal_grad(pred: &[f64], gt: &[f64], alpha: f64, gamma: f64) -> Vec<f64> {
    let n = pred.len() as f64;
    pred.iter()
        .zip(gt)
        .map(|(&raw, &g)| {
            if !(FOCAL_CLAMP..=1.0 - FOCAL_CLAMP).contains(&raw) {
                return 0.0;
            }
            let p = raw;
            let mut d = 0.0;
            if g > 0.0 {
                // -a (1-p)^y log p
                let mut t = -(1.0 - p).powf(gamma) / p;
                if gamma != 0.0 {
                    t += gamma * (1.0 - p).powf(gamma - 1.0) * p.ln();
                }
                d += g * alpha * t;
            }
            if g < 1.0 {
                // -(1-a) p^y log(1-p)
                let mut t = p.powf(gamma) / (1.0 - p);
                if gamma != 0.0 {
                    t -= gamma * p.powf(gamma - 1.0) * (1.0 - p).ln();
                }
                d += (1.0 - g) * (1.0 - alpha) * t;
            }
            d / n
        })
        .collect()
}

fn dice_grad(pred: &[f64], gt: &[f64], eps: f64) -> Vec<f64> {
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let denom: f64 = pred.iter().sum::<f64>() + gt.iter().sum::<f64>() + eps;
    pred.iter()
        .zip(gt)
        .map(|(_, g)| -2.0 * (g * denom - inter) / (denom * denom))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of a scalar function of one leaf.
    fn numeric_grad(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let h = 1e-6;
        let mut out = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            out.as_mut_slice()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        out
    }

    fn chain(tape: &mut Tape, x: Var, w: Var) -> Var {
        let h = tape.matmul(x, w).unwrap();
        let m = tape.mean_rows(h);
        let h = tape.add_row(h, m).unwrap();
        let h = tape.tanh(h);
        let h = tape.normalize_rows(h);
        let t = tape.transpose(h);
        let s = tape.slice_rows(t, 0, 1).unwrap();
        let s = tape.sigmoid(s);
        let c = tape.concat_rows(&[s, s]).unwrap();
        let c = tape.scale(c, 0.7);
        let gt: Arc<[f64]> = vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0].into();
        let f = tape.focal(c, gt.clone(), 0.25, 2.0).unwrap();
        let d = tape.dice(c, gt, 1e-6).unwrap();
        tape.sum(&[f, d]).unwrap()
    }

    #[test]
    fn chain_matches_finite_differences() {
        let x = Mat::from_rows(&[
            vec![0.3, -0.2, 0.5],
            vec![0.1, 0.4, -0.6],
            vec![-0.5, 0.2, 0.05],
        ])
        .unwrap();
        let w = Mat::from_rows(&[vec![0.2, -0.3], vec![0.5, 0.1], vec![-0.4, 0.6]]).unwrap();

        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.constant(w.clone());
        let out = chain(&mut tape, xv, wv);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.get(xv).unwrap();
        assert!(grads.get(wv).is_none());

        let numeric = numeric_grad(&x, |xx| {
            let mut t = Tape::new();
            let a = t.constant(xx.clone());
            let b = t.constant(w.clone());
            let o = chain(&mut t, a, b);
            t.value(o).as_slice()[0]
        });
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            assert!((a - n).abs() < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn linear_operator_adjoint() {
        let op = Arc::new(SparseRows {
            in_rows: 2,
            rows: vec![vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)]],
        });
        let mut tape = Tape::new();
        let x = tape.param(Mat::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
        let y = tape.linear(x, op).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[1.0, 2.0, 3.0]);
        let t = tape.transpose(y);
        let w = tape.constant(Mat::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let s = tape.matmul(t, w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().as_slice(), &[2.0, 4.0]);
    }
}
