//! Tensor operations and their backward rules.
//!
//! Shapes are row-major. Dimension mismatches are bugs, so they panic with
//! the offending shapes in the message. Every op that can appear in a loss
//! records a closure that routes the output gradient to its tracked inputs.

use super::{BackOp, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// `a [m,k] @ b [k,n] -> [m,n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a [m,k] @ b^T, b [n,k] -> [m,n]`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for t in 0..k {
                acc += arow[t] * brow[t];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `x^T @ y, x [p,q], y [p,r] -> [q,r]`
pub(crate) fn mm_tn(x: &[f64], y: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; q * r];
    for i in 0..p {
        let xrow = &x[i * q..(i + 1) * q];
        let yrow = &y[i * r..(i + 1) * r];
        for (t, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let orow = &mut out[t * r..(t + 1) * r];
            for j in 0..r {
                orow[j] += xv * yrow[j];
            }
        }
    }
    out
}

fn dims2(t: &Tensor, opname: &str) -> (usize, usize) {
    assert_eq!(
        t.shape.len(),
        2,
        "{opname}: expected a 2-D tensor, got shape {:?}",
        t.shape
    );
    (t.shape[0], t.shape[1])
}

fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(
        axis < shape.len(),
        "axis {axis} out of range for shape {shape:?}"
    );
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tensor {
    fn unary_ctx(&self) -> (Tape, bool) {
        let tape = self.tape_handle();
        let tracked = tape.grad_enabled() && self.is_tracked();
        (tape, tracked)
    }

    fn binary_ctx(&self, b: &Tensor, opname: &str) -> (Tape, bool, bool, bool) {
        assert!(self.same_tape(b), "{opname}: operands on different tapes");
        let tape = self.tape_handle();
        let (at, bt) = (self.is_tracked(), b.is_tracked());
        let tracked = tape.grad_enabled() && (at || bt);
        (tape, tracked, at, bt)
    }

    pub fn add(&self, b: &Tensor) -> Tensor {
        let (tape, tracked, at, bt) = self.binary_ctx(b, "add");
        assert_eq!(self.shape, b.shape, "add: shape mismatch {:?} vs {:?}", self.shape, b.shape);
        let (ad, bd) = (self.data(), b.data());
        let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect();
        let backop: Option<BackOp> = if tracked {
            let (aid, bid, oid, n) = (self.id, b.id, tape.next_id(), self.numel());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                if at {
                    let da = gb.buf(aid, n);
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                if bt {
                    let db = gb.buf(bid, n);
                    for (d, gv) in db.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    /// `[m,n] + row [n]` (also accepts a `[1,n]` row).
    pub fn add_row(&self, b: &Tensor) -> Tensor {
        let (tape, tracked, at, bt) = self.binary_ctx(b, "add_row");
        let (m, n) = dims2(self, "add_row");
        let bn = b.numel();
        assert_eq!(bn, n, "add_row: row length {} does not match width {}", bn, n);
        let (ad, bd) = (self.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = ad[i * n + j] + bd[j];
            }
        }
        let backop: Option<BackOp> = if tracked {
            let (aid, bid, oid) = (self.id, b.id, tape.next_id());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                if at {
                    let da = gb.buf(aid, m * n);
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                if bt {
                    let db = gb.buf(bid, n);
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    pub fn sub(&self, b: &Tensor) -> Tensor {
        let (tape, tracked, at, bt) = self.binary_ctx(b, "sub");
        assert_eq!(self.shape, b.shape, "sub: shape mismatch {:?} vs {:?}", self.shape, b.shape);
        let (ad, bd) = (self.data(), b.data());
        let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x - y).collect();
        let backop: Option<BackOp> = if tracked {
            let (aid, bid, oid, n) = (self.id, b.id, tape.next_id(), self.numel());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                if at {
                    let da = gb.buf(aid, n);
                    for (d, gv) in da.iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                if bt {
                    let db = gb.buf(bid, n);
                    for (d, gv) in db.iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    /// Elementwise product, equal shapes.
    pub fn mul(&self, b: &Tensor) -> Tensor {
        let (tape, tracked, at, bt) = self.binary_ctx(b, "mul");
        assert_eq!(self.shape, b.shape, "mul: shape mismatch {:?} vs {:?}", self.shape, b.shape);
        let (ad, bd) = (self.data(), b.data());
        let out: Vec<f64> = ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect();
        let backop: Option<BackOp> = if tracked {
            let (aid, bid, oid, n) = (self.id, b.id, tape.next_id(), self.numel());
            let (ad, bd) = (Rc::clone(&ad), Rc::clone(&bd));
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                if at {
                    let da = gb.buf(aid, n);
                    for i in 0..n {
                        da[i] += g[i] * bd[i];
                    }
                }
                if bt {
                    let db = gb.buf(bid, n);
                    for i in 0..n {
                        db[i] += g[i] * ad[i];
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    /// `[m,n] * col [m,1]`, broadcasting the column across the row.
    pub fn mul_col(&self, b: &Tensor) -> Tensor {
        let (tape, tracked, at, bt) = self.binary_ctx(b, "mul_col");
        let (m, n) = dims2(self, "mul_col");
        assert_eq!(
            b.shape,
            vec![m, 1],
            "mul_col: expected column [{m},1], got {:?}",
            b.shape
        );
        let (ad, bd) = (self.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = ad[i * n + j] * bd[i];
            }
        }
        let backop: Option<BackOp> = if tracked {
            let (aid, bid, oid) = (self.id, b.id, tape.next_id());
            let (ad, bd) = (Rc::clone(&ad), Rc::clone(&bd));
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                if at {
                    let da = gb.buf(aid, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[i * n + j] * bd[i];
                        }
                    }
                }
                if bt {
                    let db = gb.buf(bid, m);
                    for i in 0..m {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * ad[i * n + j];
                        }
                        db[i] += acc;
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let out: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let backop: Option<BackOp> = if tracked {
            let (aid, oid, n) = (self.id, tape.next_id(), self.numel());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n);
                for i in 0..n {
                    da[i] += g[i] * c;
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// `[m,k] @ [k,n]`
    pub fn matmul(&self, b: &Tensor) -> Tensor {
        let (tape, tracked, at, bt) = self.binary_ctx(b, "matmul");
        let (m, k) = dims2(self, "matmul");
        let (k2, n) = dims2(b, "matmul");
        assert_eq!(k, k2, "matmul: inner dims differ, {:?} @ {:?}", self.shape, b.shape);
        let (ad, bd) = (self.data(), b.data());
        let out = mm(&ad, &bd, m, k, n);
        let backop: Option<BackOp> = if tracked {
            let (aid, bid, oid) = (self.id, b.id, tape.next_id());
            let (ad, bd) = (Rc::clone(&ad), Rc::clone(&bd));
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                if at {
                    let da_add = mm_nt(&g, &bd, m, n, k);
                    let da = gb.buf(aid, m * k);
                    for (d, v) in da.iter_mut().zip(&da_add) {
                        *d += v;
                    }
                }
                if bt {
                    let db_add = mm_tn(&ad, &g, m, k, n);
                    let db = gb.buf(bid, k * n);
                    for (d, v) in db.iter_mut().zip(&db_add) {
                        *d += v;
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![m, n], tracked, backop)
    }

    /// `[m,k] @ [n,k]^T -> [m,n]`
    pub fn matmul_nt(&self, b: &Tensor) -> Tensor {
        let (tape, tracked, at, bt) = self.binary_ctx(b, "matmul_nt");
        let (m, k) = dims2(self, "matmul_nt");
        let (n, k2) = dims2(b, "matmul_nt");
        assert_eq!(k, k2, "matmul_nt: inner dims differ, {:?} @ {:?}^T", self.shape, b.shape);
        let (ad, bd) = (self.data(), b.data());
        let out = mm_nt(&ad, &bd, m, k, n);
        let backop: Option<BackOp> = if tracked {
            let (aid, bid, oid) = (self.id, b.id, tape.next_id());
            let (ad, bd) = (Rc::clone(&ad), Rc::clone(&bd));
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                if at {
                    let da_add = mm(&g, &bd, m, n, k);
                    let da = gb.buf(aid, m * k);
                    for (d, v) in da.iter_mut().zip(&da_add) {
                        *d += v;
                    }
                }
                if bt {
                    let db_add = mm_tn(&g, &ad, m, n, k);
                    let db = gb.buf(bid, n * k);
                    for (d, v) in db.iter_mut().zip(&db_add) {
                        *d += v;
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![m, n], tracked, backop)
    }

    pub fn relu(&self) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let ad = self.data();
        let out: Vec<f64> = ad.iter().map(|x| x.max(0.0)).collect();
        let backop: Option<BackOp> = if tracked {
            let (aid, oid, n) = (self.id, tape.next_id(), self.numel());
            let ad = Rc::clone(&ad);
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n);
                for i in 0..n {
                    if ad[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    pub fn sigmoid(&self) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let out = Rc::new(self.data().iter().map(|&x| stable_sigmoid(x)).collect::<Vec<f64>>());
        let backop: Option<BackOp> = if tracked {
            let (aid, oid, n) = (self.id, tape.next_id(), self.numel());
            let y = Rc::clone(&out);
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n);
                for i in 0..n {
                    da[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }))
        } else {
            None
        };
        tape.push_rc(out, self.shape.clone(), tracked, backop)
    }

    /// `log(sigmoid(x))`, computed as `-softplus(-x)`.
    pub fn log_sigmoid(&self) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let ad = self.data();
        let out: Vec<f64> = ad.iter().map(|&x| -softplus(-x)).collect();
        let backop: Option<BackOp> = if tracked {
            let (aid, oid, n) = (self.id, tape.next_id(), self.numel());
            let ad = Rc::clone(&ad);
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n);
                for i in 0..n {
                    da[i] += g[i] * stable_sigmoid(-ad[i]);
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    /// Summed binary cross-entropy on logits against 0/1 targets; scalar out.
    /// Stable for large |logit|.
    pub fn bce_with_logits_sum(&self, targets: &[f64]) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let n = self.numel();
        assert_eq!(targets.len(), n, "bce_with_logits_sum: {} targets for {} logits", targets.len(), n);
        let ad = self.data();
        let mut loss = 0.0;
        for (&s, &y) in ad.iter().zip(targets) {
            loss += s.max(0.0) - s * y + softplus(-s.abs());
        }
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            let ad = Rc::clone(&ad);
            let targets = targets.to_vec();
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g[0],
                    None => return,
                };
                let da = gb.buf(aid, n);
                for i in 0..n {
                    da[i] += g * (stable_sigmoid(ad[i]) - targets[i]);
                }
            }))
        } else {
            None
        };
        tape.push(vec![loss], vec![1], tracked, backop)
    }

    pub fn softmax(&self, axis: usize) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (outer, len, inner) = axis_dims(&self.shape, axis);
        let ad = self.data();
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(ad[idx(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (ad[idx(l)] - mx).exp();
                    out[idx(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[idx(l)] /= sum;
                }
            }
        }
        let out = Rc::new(out);
        let backop: Option<BackOp> = if tracked {
            let (aid, oid, n) = (self.id, tape.next_id(), self.numel());
            let y = Rc::clone(&out);
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut dot = 0.0;
                        for l in 0..len {
                            dot += g[idx(l)] * y[idx(l)];
                        }
                        for l in 0..len {
                            da[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }))
        } else {
            None
        };
        tape.push_rc(out, self.shape.clone(), tracked, backop)
    }

    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (outer, len, inner) = axis_dims(&self.shape, axis);
        let ad = self.data();
        let mut out = vec![0.0; self.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    mx = mx.max(ad[idx(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    sum += (ad[idx(l)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for l in 0..len {
                    out[idx(l)] = ad[idx(l)] - lse;
                }
            }
        }
        let out = Rc::new(out);
        let backop: Option<BackOp> = if tracked {
            let (aid, oid, n) = (self.id, tape.next_id(), self.numel());
            let y = Rc::clone(&out);
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n);
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let mut gsum = 0.0;
                        for l in 0..len {
                            gsum += g[idx(l)];
                        }
                        for l in 0..len {
                            da[idx(l)] += g[idx(l)] - y[idx(l)].exp() * gsum;
                        }
                    }
                }
            }))
        } else {
            None
        };
        tape.push_rc(out, self.shape.clone(), tracked, backop)
    }

    /// Row-wise softmax over a 2-D tensor where `mask[i*n+j] == false` removes
    /// key `j` from row `i`. Masked outputs are exactly `0.0`; a fully masked
    /// row is all zeros.
    pub fn masked_softmax(&self, mask: &[bool]) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (m, n) = dims2(self, "masked_softmax");
        assert_eq!(mask.len(), m * n, "masked_softmax: mask length {} for shape {:?}", mask.len(), self.shape);
        let ad = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ad[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if mrow[j] {
                    mx = mx.max(row[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..n {
                if mrow[j] {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                if mrow[j] {
                    out[i * n + j] /= sum;
                }
            }
        }
        let out = Rc::new(out);
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            let y = Rc::clone(&out);
            let mask = mask.to_vec();
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, m * n);
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        if mask[i * n + j] {
                            dot += g[i * n + j] * y[i * n + j];
                        }
                    }
                    for j in 0..n {
                        if mask[i * n + j] {
                            da[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                        }
                    }
                }
            }))
        } else {
            None
        };
        tape.push_rc(out, self.shape.clone(), tracked, backop)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// Uses population variance.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        assert!(
            self.same_tape(gamma) && self.same_tape(beta),
            "layer_norm: operands on different tapes"
        );
        let d = *self.shape.last().expect("layer_norm: empty shape");
        let rows = self.numel() / d;
        assert_eq!(gamma.numel(), d, "layer_norm: gain length {} for width {}", gamma.numel(), d);
        assert_eq!(beta.numel(), d, "layer_norm: bias length {} for width {}", beta.numel(), d);
        let tape = self.tape_handle();
        let (xt, gt, bt) = (self.is_tracked(), gamma.is_tracked(), beta.is_tracked());
        let tracked = tape.grad_enabled() && (xt || gt || bt);
        let (xd, gd, bd) = (self.data(), gamma.data(), beta.data());
        let mut out = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = &xd[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (x[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = gd[j] * xh + bd[j];
            }
        }
        let backop: Option<BackOp> = if tracked {
            let (xid, gid, bid, oid) = (self.id, gamma.id, beta.id, tape.next_id());
            let gd = Rc::clone(&gd);
            let xhat = Rc::new(xhat);
            let inv_std = Rc::new(inv_std);
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                if gt {
                    let dg = gb.buf(gid, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if bt {
                    let db = gb.buf(bid, d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
                if xt {
                    let dx = gb.buf(xid, rows * d);
                    for r in 0..rows {
                        let mut u_mean = 0.0;
                        let mut ux_mean = 0.0;
                        for j in 0..d {
                            let u = g[r * d + j] * gd[j];
                            u_mean += u;
                            ux_mean += u * xhat[r * d + j];
                        }
                        u_mean /= d as f64;
                        ux_mean /= d as f64;
                        for j in 0..d {
                            let u = g[r * d + j] * gd[j];
                            dx[r * d + j] += inv_std[r] * (u - u_mean - xhat[r * d + j] * ux_mean);
                        }
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }

    pub fn sum_all(&self) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let s: f64 = self.data().iter().sum();
        let backop: Option<BackOp> = if tracked {
            let (aid, oid, n) = (self.id, tape.next_id(), self.numel());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g[0],
                    None => return,
                };
                let da = gb.buf(aid, n);
                for d in da.iter_mut() {
                    *d += g;
                }
            }))
        } else {
            None
        };
        tape.push(vec![s], vec![1], tracked, backop)
    }

    /// Column sums: `[m,n] -> [n]`.
    pub fn sum_axis0(&self) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (m, n) = dims2(self, "sum_axis0");
        let ad = self.data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += ad[i * n + j];
            }
        }
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, m * n);
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += g[j];
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![n], tracked, backop)
    }

    /// Row lookup: `[r,d]` indexed by `ids -> [ids.len(),d]`. Duplicate ids
    /// accumulate gradient, which is what embedding lookups need.
    pub fn gather_rows(&self, ids: &[usize]) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (r, d) = dims2(self, "gather_rows");
        for &i in ids {
            assert!(i < r, "gather_rows: row {i} out of range for {r} rows");
        }
        let ad = self.data();
        let mut out = vec![0.0; ids.len() * d];
        for (t, &i) in ids.iter().enumerate() {
            out[t * d..(t + 1) * d].copy_from_slice(&ad[i * d..(i + 1) * d]);
        }
        let m = ids.len();
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            let ids = ids.to_vec();
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, r * d);
                for (t, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        da[i * d + j] += g[t * d + j];
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![m, d], tracked, backop)
    }

    /// One element per row: `[m,n]` with `idx` of length `m -> [m]`.
    pub fn take_per_row(&self, idx: &[usize]) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (m, n) = dims2(self, "take_per_row");
        assert_eq!(idx.len(), m, "take_per_row: {} indices for {} rows", idx.len(), m);
        let ad = self.data();
        let mut out = vec![0.0; m];
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < n, "take_per_row: column {j} out of range for width {n}");
            out[i] = ad[i * n + j];
        }
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            let idx = idx.to_vec();
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, m * n);
                for (i, &j) in idx.iter().enumerate() {
                    da[i * n + j] += g[i];
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![m], tracked, backop)
    }

    /// Element lookup on a 1-D tensor; duplicates accumulate gradient.
    pub fn take(&self, idx: &[usize]) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        assert_eq!(self.shape.len(), 1, "take: expected 1-D, got {:?}", self.shape);
        let n = self.numel();
        let ad = self.data();
        let mut out = vec![0.0; idx.len()];
        for (t, &i) in idx.iter().enumerate() {
            assert!(i < n, "take: index {i} out of range for length {n}");
            out[t] = ad[i];
        }
        let m = idx.len();
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            let idx = idx.to_vec();
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n);
                for (t, &i) in idx.iter().enumerate() {
                    da[i] += g[t];
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![m], tracked, backop)
    }

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (m, n) = dims2(self, "slice_rows");
        assert!(r0 < r1 && r1 <= m, "slice_rows: range {r0}..{r1} out of {m} rows");
        let ad = self.data();
        let out = ad[r0 * n..r1 * n].to_vec();
        let rows = r1 - r0;
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, m * n);
                for (d, gv) in da[r0 * n..r1 * n].iter_mut().zip(&g) {
                    *d += gv;
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![rows, n], tracked, backop)
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (m, n) = dims2(self, "slice_cols");
        assert!(c0 < c1 && c1 <= n, "slice_cols: range {c0}..{c1} out of {n} columns");
        let ad = self.data();
        let w = c1 - c0;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&ad[i * n + c0..i * n + c1]);
        }
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, m * n);
                for i in 0..m {
                    for j in 0..w {
                        da[i * n + c0 + j] += g[i * w + j];
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![m, w], tracked, backop)
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: no parts");
        let first = parts[0];
        let tape = first.tape_handle();
        let (m, _) = dims2(first, "concat_cols");
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            assert!(first.same_tape(p), "concat_cols: operands on different tapes");
            let (pm, pn) = dims2(p, "concat_cols");
            assert_eq!(pm, m, "concat_cols: row count mismatch {pm} vs {m}");
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let datas: Vec<Rc<Vec<f64>>> = parts.iter().map(|p| p.data()).collect();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (pd, &w) in datas.iter().zip(&widths) {
                out[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
                off += w;
            }
        }
        let flags: Vec<bool> = parts.iter().map(|p| p.is_tracked()).collect();
        let tracked = tape.grad_enabled() && flags.iter().any(|&t| t);
        let backop: Option<BackOp> = if tracked {
            let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
            let oid = tape.next_id();
            let widths = widths.clone();
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let mut off = 0;
                for ((&pid, &w), &tr) in ids.iter().zip(&widths).zip(&flags) {
                    if tr {
                        let da = gb.buf(pid, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                da[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![m, total], tracked, backop)
    }

    /// Vertical concatenation of 2-D tensors with equal widths.
    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let first = parts[0];
        let tape = first.tape_handle();
        let (_, n) = dims2(first, "concat_rows");
        let mut heights = Vec::with_capacity(parts.len());
        for p in parts {
            assert!(first.same_tape(p), "concat_rows: operands on different tapes");
            let (pm, pn) = dims2(p, "concat_rows");
            assert_eq!(pn, n, "concat_rows: width mismatch {pn} vs {n}");
            heights.push(pm);
        }
        let total: usize = heights.iter().sum();
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(&p.data());
        }
        let flags: Vec<bool> = parts.iter().map(|p| p.is_tracked()).collect();
        let tracked = tape.grad_enabled() && flags.iter().any(|&t| t);
        let backop: Option<BackOp> = if tracked {
            let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
            let oid = tape.next_id();
            let heights = heights.clone();
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let mut off = 0;
                for ((&pid, &h), &tr) in ids.iter().zip(&heights).zip(&flags) {
                    if tr {
                        let da = gb.buf(pid, h * n);
                        for (d, gv) in da.iter_mut().zip(&g[off * n..(off + h) * n]) {
                            *d += gv;
                        }
                    }
                    off += h;
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![total, n], tracked, backop)
    }

    /// Expand per-bucket relative scores `[n, 2k+1]` to pairwise logits
    /// `[n, n]` where `out[i][j]` reads bucket `clamp(j-i, -k, k) + k`.
    pub fn relative_logits(&self, k: usize) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (n, w) = dims2(self, "relative_logits");
        assert_eq!(w, 2 * k + 1, "relative_logits: got {w} buckets, expected {}", 2 * k + 1);
        let ad = self.data();
        let kk = k as i64;
        let bucket = move |i: usize, j: usize| -> usize {
            ((j as i64 - i as i64).clamp(-kk, kk) + kk) as usize
        };
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = ad[i * w + bucket(i, j)];
            }
        }
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n * w);
                for i in 0..n {
                    for j in 0..n {
                        da[i * w + bucket(i, j)] += g[i * n + j];
                    }
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![n, n], tracked, backop)
    }

    /// Per-column max over the rows where `mask` is true: `[n,d] -> [1,d]`.
    /// At least one row must be unmasked. Gradient flows to the argmax row
    /// (first winner on ties).
    pub fn masked_max_rows(&self, mask: &[bool]) -> Tensor {
        let (tape, tracked) = self.unary_ctx();
        let (n, d) = dims2(self, "masked_max_rows");
        assert_eq!(mask.len(), n, "masked_max_rows: mask length {} for {} rows", mask.len(), n);
        assert!(mask.iter().any(|&m| m), "masked_max_rows: all rows masked");
        let ad = self.data();
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut arg = vec![0usize; d];
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            for j in 0..d {
                let v = ad[i * d + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n * d);
                for j in 0..d {
                    da[arg[j] * d + j] += g[j];
                }
            }))
        } else {
            None
        };
        tape.push(out, vec![1, d], tracked, backop)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)` so the
    /// expectation is unchanged. `rate == 0` is the identity.
    pub fn dropout(&self, rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} outside [0,1)");
        if rate == 0.0 {
            return self.clone();
        }
        let (tape, tracked) = self.unary_ctx();
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let n = self.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
            .collect();
        let ad = self.data();
        let out: Vec<f64> = ad.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let backop: Option<BackOp> = if tracked {
            let (aid, oid) = (self.id, tape.next_id());
            let mask = Rc::new(mask);
            Some(Box::new(move |gb| {
                let g = match gb.get(oid) {
                    Some(g) => g.to_vec(),
                    None => return,
                };
                let da = gb.buf(aid, n);
                for i in 0..n {
                    da[i] += g[i] * mask[i];
                }
            }))
        } else {
            None
        };
        tape.push(out, self.shape.clone(), tracked, backop)
    }
}

/// Index of the largest element; first winner on ties.
pub fn argmax(xs: &[f64]) -> usize {
    assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_small_known_product() {
        let t = Tape::no_grad();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = t.constant(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]);
        let c = a.matmul(&b);
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let t = Tape::no_grad();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        // b = [[5, 6], [7, 8]]; a @ b^T = [[5+12, 7+16], [15+24, 21+32]]
        let b = t.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = a.matmul_nt(&b);
        assert_eq!(c.to_vec(), vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_hand_value() {
        let t = Tape::no_grad();
        let x = t.constant(vec![0.0, f64::ln(3.0)], &[1, 2]);
        let y = x.softmax(1).to_vec();
        assert!(close(y[0], 0.25, 1e-12));
        assert!(close(y[1], 0.75, 1e-12));
    }

    #[test]
    fn log_softmax_agrees_with_softmax_log() {
        let t = Tape::no_grad();
        let x = t.constant(vec![0.3, -1.2, 2.0, 0.0, 0.5, 0.5], &[2, 3]);
        let a = x.softmax(1).to_vec();
        let b = x.log_softmax(1).to_vec();
        for (av, bv) in a.iter().zip(&b) {
            assert!(close(av.ln(), *bv, 1e-12));
        }
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_renormalizes() {
        let t = Tape::no_grad();
        let x = t.constant(vec![1.0, 2.0, 3.0], &[1, 3]);
        let y = x.masked_softmax(&[true, false, true]).to_vec();
        assert_eq!(y[1], 0.0);
        let e1 = 1.0f64.exp();
        let e3 = 3.0f64.exp();
        assert!(close(y[0], e1 / (e1 + e3), 1e-12));
        assert!(close(y[2], e3 / (e1 + e3), 1e-12));
        assert!(close(y[0] + y[2], 1.0, 1e-12));
    }

    #[test]
    fn masked_softmax_fully_masked_row_is_zero() {
        let t = Tape::no_grad();
        let x = t.constant(vec![5.0, -2.0], &[1, 2]);
        let y = x.masked_softmax(&[false, false]).to_vec();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let t = Tape::no_grad();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[1, 4]);
        let g = t.constant(vec![1.0; 4], &[4]);
        let b = t.constant(vec![0.0; 4], &[4]);
        let y = x.layer_norm(&g, &b, 1e-5).to_vec();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(close(mean, 0.0, 1e-9));
        assert!(close(var, 1.0, 1e-3));
    }

    #[test]
    fn relative_logits_clips_at_window_edges() {
        let t = Tape::no_grad();
        // k = 1, buckets [left, same, right] per row
        let x = t.constant(vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0], &[3, 3]);
        let y = x.relative_logits(1).to_vec();
        // row 0: j-i = 0,1,2 -> buckets 1,2,2
        assert_eq!(&y[0..3], &[20.0, 30.0, 30.0]);
        // row 2: j-i = -2,-1,0 -> buckets 0,0,1
        assert_eq!(&y[6..9], &[70.0, 70.0, 80.0]);
    }

    #[test]
    fn gather_rows_copies_and_accumulates_grad_on_duplicates() {
        let t = Tape::new();
        let w = t.var(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let e = w.gather_rows(&[1, 1, 0]);
        assert_eq!(e.to_vec(), vec![3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        e.sum_all().backward();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn masked_max_rows_respects_mask() {
        let t = Tape::no_grad();
        let x = t.constant(vec![9.0, 0.0, 1.0, 5.0, 2.0, 7.0], &[3, 2]);
        let y = x.masked_max_rows(&[false, true, true]).to_vec();
        assert_eq!(y, vec![2.0, 7.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        use rand::SeedableRng;
        let t = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t.constant(vec![1.0, 2.0], &[2]);
        let y = x.dropout(0.0, &mut rng);
        assert_eq!(y.to_vec(), vec![1.0, 2.0]);
    }

    #[test]
    fn dropout_preserves_expectation() {
        use rand::SeedableRng;
        let t = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let x = t.constant(vec![1.0; n], &[n]);
        let y = x.dropout(0.3, &mut rng);
        let mean = y.to_vec().iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn bce_with_logits_matches_naive_formula() {
        let t = Tape::no_grad();
        let s = t.constant(vec![0.5, -1.2, 3.0], &[3]);
        let y = [1.0, 0.0, 1.0];
        let loss = s.bce_with_logits_sum(&y).item();
        let naive: f64 = s
            .to_vec()
            .iter()
            .zip(&y)
            .map(|(&sv, &yv)| {
                let p = 1.0 / (1.0 + (-sv).exp());
                -(yv * p.ln() + (1.0 - yv) * (1.0 - p).ln())
            })
            .sum();
        assert!(close(loss, naive, 1e-12));
    }

    #[test]
    fn concat_cols_routes_gradients_to_parts() {
        let t = Tape::new();
        let a = t.var(vec![1.0, 2.0], &[2, 1]);
        let b = t.var(vec![3.0, 4.0, 5.0, 6.0], &[2, 2]);
        let c = Tensor::concat_cols(&[&a, &b]);
        assert_eq!(c.to_vec(), vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = t.constant(vec![1.0, 10.0, 100.0, 1.0, 10.0, 100.0], &[2, 3]);
        let loss = c.mul(&w).sum_all();
        loss.backward();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![10.0, 100.0, 10.0, 100.0]);
    }
}
