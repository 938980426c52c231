//! Differentiable operations. Sequence tensors are batch-major and
//! channels-last: `[batch, time, channels]`.

use rand::Rng;

use super::gemm::gemm;
use super::graph::{Graph, Var};
use super::{ParamId, Tensor};
use crate::error::{Error, Result};

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Standardized batch-norm statistics kept for the backward pass.
struct BnCache {
    xhat: Vec<f64>,
    inv: Vec<f64>,
}

impl<'a> Graph<'a> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), v)?;
        Ok(self.push("add", t, &[a, b], Box::new(move |_, g, gr| {
            gr.add(a, g);
            gr.add(b, g);
        })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), v)?;
        Ok(self.push("sub", t, &[a, b], Box::new(move |_, g, gr| {
            gr.add(a, g);
            if let Some(s) = gr.slot(b) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
        })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), v)?;
        Ok(self.push("mul", t, &[a, b], Box::new(move |vals, g, gr| {
            if let Some(s) = gr.slot(a) {
                for ((x, y), gg) in s.iter_mut().zip(vals[b.0].data()).zip(g) {
                    *x += y * gg;
                }
            }
            if let Some(s) = gr.slot(b) {
                for ((x, y), gg) in s.iter_mut().zip(vals[a.0].data()).zip(g) {
                    *x += y * gg;
                }
            }
        })))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = Tensor::new(self.shape(a).to_vec(), self.value(a).data().iter().map(|x| x * k).collect()).unwrap();
        self.push("scale", t, &[a], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(a) {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
            }
        }))
    }

    fn unary(&mut self, op: &'static str, a: Var, f: fn(f64) -> f64, df_from_out: fn(f64, f64) -> f64) -> Var {
        let t = Tensor::new(self.shape(a).to_vec(), self.value(a).data().iter().map(|&x| f(x)).collect()).unwrap();
        let out = self.next_id();
        self.push(op, t, &[a], Box::new(move |vals, g, gr| {
            let x = vals[a.0].data();
            let y = vals[out].data();
            if let Some(s) = gr.slot(a) {
                for i in 0..s.len() {
                    s[i] += g[i] * df_from_out(x[i], y[i]);
                }
            }
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary("relu", a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary("tanh", a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary("sigmoid", a, sigmoid, |_, y| y * (1.0 - y))
    }

    /// `x·w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != din || xs.is_empty() {
            return Err(shape_err("linear", &xs, &ws));
        }
        let dout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear bias", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din.max(1);
        let mut y = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in y.chunks_exact_mut(dout) {
                r.copy_from_slice(bv);
            }
        }
        gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), false, if b.is_some() { 1.0 } else { 0.0 }, &mut y);
        let mut os = xs.clone();
        *os.last_mut().unwrap() = dout;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push("linear", Tensor::new(os, y)?, &parents, Box::new(move |vals, g, gr| {
            if let Some(s) = gr.slot(x) {
                gemm(rows, dout, din, g, false, vals[w.0].data(), true, 1.0, s);
            }
            if let Some(s) = gr.slot(w) {
                gemm(din, rows, dout, vals[x.0].data(), true, g, false, 1.0, s);
            }
            if let Some(b) = b {
                if let Some(s) = gr.slot(b) {
                    for r in g.chunks_exact(dout) {
                        s.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                }
            }
        })))
    }

    /// Zero-padded cross-correlation. `x` is `[B, T, Cin]`, `w` is
    /// `[K, Cin, Cout]`; output length is `T + 2·pad - dilation·(K-1)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize, dilation: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[2] || dilation == 0 {
            return Err(shape_err("conv1d", &xs, &ws));
        }
        let (bsz, t_in, cin) = (xs[0], xs[1], xs[2]);
        let (k, cout) = (ws[0], ws[2]);
        let span = dilation * (k - 1);
        if t_in + 2 * pad <= span {
            return Err(shape_err("conv1d", &xs, &ws));
        }
        let t_out = t_in + 2 * pad - span;
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv1d bias", &ws, self.shape(b)));
            }
        }
        let kc = k * cin;
        let im2col = move |xd: &[f64]| {
            let mut cols = vec![0.0; bsz * t_out * kc];
            for bi in 0..bsz {
                for t in 0..t_out {
                    let row = &mut cols[(bi * t_out + t) * kc..(bi * t_out + t + 1) * kc];
                    for kk in 0..k {
                        let src = t + kk * dilation;
                        if src < pad || src - pad >= t_in {
                            continue;
                        }
                        let s = (bi * t_in + src - pad) * cin;
                        row[kk * cin..(kk + 1) * cin].copy_from_slice(&xd[s..s + cin]);
                    }
                }
            }
            cols
        };
        let cols = im2col(self.value(x).data());
        let rows = bsz * t_out;
        let mut y = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in y.chunks_exact_mut(cout) {
                r.copy_from_slice(bv);
            }
        }
        gemm(rows, kc, cout, &cols, false, self.value(w).data(), false, if b.is_some() { 1.0 } else { 0.0 }, &mut y);
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push("conv1d", Tensor::new(vec![bsz, t_out, cout], y)?, &parents, Box::new(move |vals, g, gr| {
            if gr.slot(w).is_some() {
                let cols = im2col(vals[x.0].data());
                let s = gr.slot(w).unwrap();
                gemm(kc, rows, cout, &cols, true, g, false, 1.0, s);
            }
            if let Some(b) = b {
                if let Some(s) = gr.slot(b) {
                    for r in g.chunks_exact(cout) {
                        s.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                }
            }
            if let Some(s) = gr.slot(x) {
                let mut gcols = vec![0.0; rows * kc];
                gemm(rows, cout, kc, g, false, vals[w.0].data(), true, 0.0, &mut gcols);
                for bi in 0..bsz {
                    for t in 0..t_out {
                        let row = &gcols[(bi * t_out + t) * kc..(bi * t_out + t + 1) * kc];
                        for kk in 0..k {
                            let src = t + kk * dilation;
                            if src < pad || src - pad >= t_in {
                                continue;
                            }
                            let d = (bi * t_in + src - pad) * cin;
                            for c in 0..cin {
                                s[d + c] += row[kk * cin + c];
                            }
                        }
                    }
                }
            }
        })))
    }

    /// Batch normalization over all rows of `x` (`[.., C]`). `mask` holds one
    /// weight per row; masked rows are excluded from the statistics and output
    /// zero. In training mode the batch statistics are used and, when
    /// `running` is given, a running-average update is queued.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mask: Option<&[f64]>,
        running: Option<(ParamId, ParamId)>,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| shape_err("batch_norm", &xs, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let rows = self.value(x).len() / c;
        let mask: Vec<f64> = match mask {
            Some(m) if m.len() != rows => return Err(shape_err("batch_norm mask", &xs, &[m.len()])),
            Some(m) => m.to_vec(),
            None => vec![1.0; rows],
        };
        let n: f64 = mask.iter().sum();
        let xd = self.value(x).data();
        let (mean, var_b, use_batch) = if self.training {
            if n < 1.0 {
                return Err(Error::Length("batch norm needs at least one unmasked row".into()));
            }
            let mut mean = vec![0.0; c];
            for (r, &m) in xd.chunks_exact(c).zip(&mask) {
                if m != 0.0 {
                    mean.iter_mut().zip(r).for_each(|(a, v)| *a += m * v);
                }
            }
            mean.iter_mut().for_each(|a| *a /= n);
            let mut var = vec![0.0; c];
            for (r, &m) in xd.chunks_exact(c).zip(&mask) {
                if m != 0.0 {
                    for j in 0..c {
                        var[j] += m * (r[j] - mean[j]).powi(2);
                    }
                }
            }
            var.iter_mut().for_each(|a| *a /= n);
            (mean, var, true)
        } else {
            let (rm, rv) = running.ok_or_else(|| Error::Config("eval-mode batch norm needs running statistics".into()))?;
            (self.params().get(rm).data().to_vec(), self.params().get(rv).data().to_vec(), false)
        };
        let mut pending = Vec::new();
        if use_batch {
            if let Some((rm, rv)) = running {
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let old_m = self.params().get(rm).data();
                let old_v = self.params().get(rv).data();
                let nm: Vec<f64> = old_m.iter().zip(&mean).map(|(o, b)| (1.0 - momentum) * o + momentum * b).collect();
                let nv: Vec<f64> = old_v.iter().zip(&var_b).map(|(o, b)| (1.0 - momentum) * o + momentum * b * unbias).collect();
                pending.push((rm, Tensor::new(vec![c], nm)?));
                pending.push((rv, Tensor::new(vec![c], nv)?));
            }
        }
        let inv: Vec<f64> = var_b.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; rows * c];
        let mut y = vec![0.0; rows * c];
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            for j in 0..c {
                let h = (xd[r * c + j] - mean[j]) * inv[j];
                xhat[r * c + j] = h;
                y[r * c + j] = mask[r] * (gd[j] * h + bd[j]);
            }
        }
        let cache = BnCache { xhat, inv };
        self.buffer_updates.extend(pending);
        Ok(self.push("batch_norm", Tensor::new(xs, y)?, &[x, gamma, beta], Box::new(move |vals, g, gr| {
            let gd = vals[gamma.0].data();
            let BnCache { xhat, inv } = &cache;
            let mut sg = vec![0.0; c];
            let mut sgx = vec![0.0; c];
            for r in 0..rows {
                let m = mask[r];
                if m == 0.0 {
                    continue;
                }
                for j in 0..c {
                    let gv = m * g[r * c + j];
                    sg[j] += gv;
                    sgx[j] += gv * xhat[r * c + j];
                }
            }
            if let Some(s) = gr.slot(gamma) {
                s.iter_mut().zip(&sgx).for_each(|(a, v)| *a += v);
            }
            if let Some(s) = gr.slot(beta) {
                s.iter_mut().zip(&sg).for_each(|(a, v)| *a += v);
            }
            if let Some(s) = gr.slot(x) {
                for r in 0..rows {
                    let m = mask[r];
                    if m == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        let gv = m * g[r * c + j];
                        s[r * c + j] += if use_batch {
                            m * gd[j] * inv[j] * (gv - (sg[j] + xhat[r * c + j] * sgx[j]) / n)
                        } else {
                            gd[j] * inv[j] * gv
                        };
                    }
                }
            }
        })))
    }

    /// Pointwise LSTM update from pre-activation `gates` (`[B, 4H]`, order
    /// input, forget, cell, output) and cell state `c` (`[B, H]`). Returns
    /// `[B, 2H]` holding the new hidden state followed by the new cell state.
    pub fn lstm_cell(&mut self, gates: Var, c: Var) -> Result<Var> {
        let gs = self.shape(gates).to_vec();
        let cs = self.shape(c).to_vec();
        if gs.len() != 2 || cs.len() != 2 || gs[0] != cs[0] || gs[1] != 4 * cs[1] {
            return Err(shape_err("lstm_cell", &gs, &cs));
        }
        let (b, h) = (cs[0], cs[1]);
        let act = move |a: &[f64], r: usize, j: usize| {
            let base = r * 4 * h;
            (
                sigmoid(a[base + j]),
                sigmoid(a[base + h + j]),
                a[base + 2 * h + j].tanh(),
                sigmoid(a[base + 3 * h + j]),
            )
        };
        let gv = self.value(gates).data();
        let cv = self.value(c).data();
        let mut out = vec![0.0; b * 2 * h];
        for r in 0..b {
            for j in 0..h {
                let (i, f, gg, o) = act(gv, r, j);
                let cn = f * cv[r * h + j] + i * gg;
                out[r * 2 * h + j] = o * cn.tanh();
                out[r * 2 * h + h + j] = cn;
            }
        }
        let out_id = self.next_id();
        Ok(self.push("lstm_cell", Tensor::new(vec![b, 2 * h], out)?, &[gates, c], Box::new(move |vals, g, gr| {
            let gv = vals[gates.0].data();
            let cv = vals[c.0].data();
            let ov = vals[out_id].data();
            let mut dgates = vec![0.0; b * 4 * h];
            let mut dc = vec![0.0; b * h];
            for r in 0..b {
                for j in 0..h {
                    let (i, f, gg, o) = act(gv, r, j);
                    let cn = ov[r * 2 * h + h + j];
                    let tc = cn.tanh();
                    let gh = g[r * 2 * h + j];
                    let dcn = g[r * 2 * h + h + j] + gh * o * (1.0 - tc * tc);
                    let base = r * 4 * h;
                    dgates[base + j] = dcn * gg * i * (1.0 - i);
                    dgates[base + h + j] = dcn * cv[r * h + j] * f * (1.0 - f);
                    dgates[base + 2 * h + j] = dcn * i * (1.0 - gg * gg);
                    dgates[base + 3 * h + j] = gh * tc * o * (1.0 - o);
                    dc[r * h + j] = dcn * f;
                }
            }
            gr.add(gates, &dgates);
            gr.add(c, &dc);
        })))
    }

    /// `len` entries of the last axis starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap_or(&0);
        if start + len > d || len == 0 {
            return Err(shape_err("slice_last", &xs, &[start, len]));
        }
        let rows = self.value(x).len() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in self.value(x).data().chunks_exact(d) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let mut os = xs;
        *os.last_mut().unwrap() = len;
        Ok(self.push("slice_last", Tensor::new(os, out)?, &[x], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                for (r, gg) in s.chunks_exact_mut(d).zip(g.chunks_exact(len)) {
                    r[start..start + len].iter_mut().zip(gg).for_each(|(a, v)| *a += v);
                }
            }
        })))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(shape_err("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(xs[0]).len() / widths[0];
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            for (r, src) in self.value(v).data().chunks_exact(w).enumerate() {
                out[r * total + off..r * total + off + w].copy_from_slice(src);
            }
            off += w;
        }
        let mut os = first.clone();
        *os.last_mut().unwrap() = total;
        let parts: Vec<Var> = xs.to_vec();
        Ok(self.push("concat_last", Tensor::new(os, out)?, xs, Box::new(move |_, g, gr| {
            let mut off = 0;
            for (&v, &w) in parts.iter().zip(&widths) {
                if let Some(s) = gr.slot(v) {
                    for (r, dst) in s.chunks_exact_mut(w).enumerate() {
                        dst.iter_mut().zip(&g[r * total + off..r * total + off + w]).for_each(|(a, b)| *a += b);
                    }
                }
                off += w;
            }
        })))
    }

    /// Per-row blend `m·new + (1-m)·old`; `mask` has one entry per row.
    pub fn blend(&mut self, new: Var, old: Var, mask: &[f64]) -> Result<Var> {
        self.same_shape("blend", new, old)?;
        let d = self.value(new).last_dim();
        let rows = self.value(new).rows();
        if mask.len() != rows {
            return Err(shape_err("blend mask", self.shape(new), &[mask.len()]));
        }
        let mask = mask.to_vec();
        let nv = self.value(new).data();
        let ov = self.value(old).data();
        let out: Vec<f64> = (0..rows * d).map(|i| mask[i / d] * nv[i] + (1.0 - mask[i / d]) * ov[i]).collect();
        let t = Tensor::new(self.shape(new).to_vec(), out)?;
        Ok(self.push("blend", t, &[new, old], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(new) {
                s.iter_mut().enumerate().for_each(|(i, a)| *a += mask[i / d] * g[i]);
            }
            if let Some(s) = gr.slot(old) {
                s.iter_mut().enumerate().for_each(|(i, a)| *a += (1.0 - mask[i / d]) * g[i]);
            }
        })))
    }

    /// Row lookup into `table` (`[V, E]`); output shape is `shape + [E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", &ts, shape));
        }
        let (v, e) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("embedding index {bad} outside table of {v} rows")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&td[i * e..(i + 1) * e]);
        }
        let mut os = shape.to_vec();
        os.push(e);
        let ids = ids.to_vec();
        Ok(self.push("embedding", Tensor::new(os, out)?, &[table], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(table) {
                for (r, &i) in ids.iter().enumerate() {
                    s[i * e..(i + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(a, b)| *a += b);
                }
            }
        })))
    }

    /// Stacks `[B, C]` tensors along a new time axis: `[B, T, C]`.
    pub fn stack_time(&mut self, xs: &[Var]) -> Result<Var> {
        let s0 = self.shape(xs[0]).to_vec();
        if s0.len() != 2 {
            return Err(shape_err("stack_time", &s0, &[]));
        }
        for &v in xs {
            if self.shape(v) != s0.as_slice() {
                return Err(shape_err("stack_time", &s0, self.shape(v)));
            }
        }
        let (b, c, t) = (s0[0], s0[1], xs.len());
        let mut out = vec![0.0; b * t * c];
        for (ti, &v) in xs.iter().enumerate() {
            for (bi, r) in self.value(v).data().chunks_exact(c).enumerate() {
                out[(bi * t + ti) * c..(bi * t + ti + 1) * c].copy_from_slice(r);
            }
        }
        let parts = xs.to_vec();
        Ok(self.push("stack_time", Tensor::new(vec![b, t, c], out)?, xs, Box::new(move |_, g, gr| {
            for (ti, &v) in parts.iter().enumerate() {
                if let Some(s) = gr.slot(v) {
                    for bi in 0..b {
                        s[bi * c..(bi + 1) * c].iter_mut().zip(&g[(bi * t + ti) * c..(bi * t + ti + 1) * c]).for_each(|(a, v)| *a += v);
                    }
                }
            }
        })))
    }

    /// Time step `t` of a `[B, T, C]` tensor.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || t >= xs[1] {
            return Err(shape_err("select_time", &xs, &[t]));
        }
        let (b, tt, c) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c);
        for bi in 0..b {
            out.extend_from_slice(&xd[(bi * tt + t) * c..(bi * tt + t + 1) * c]);
        }
        Ok(self.push("select_time", Tensor::new(vec![b, c], out)?, &[x], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                for bi in 0..b {
                    s[(bi * tt + t) * c..(bi * tt + t + 1) * c].iter_mut().zip(&g[bi * c..(bi + 1) * c]).for_each(|(a, v)| *a += v);
                }
            }
        })))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push("reshape", t, &[x], Box::new(move |_, g, gr| gr.add(x, g))))
    }

    /// Softmax over the last axis. Entries with zero `mask` get probability 0;
    /// a row must keep at least one entry.
    pub fn softmax_last(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let l = self.value(x).last_dim();
        let n = self.value(x).len();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(shape_err("softmax mask", &xs, &[m.len()]));
            }
        }
        let mut out = vec![0.0; n];
        for (r, (o, xr)) in out.chunks_exact_mut(l).zip(self.value(x).data().chunks_exact(l)).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * l + j] != 0.0);
            let mx = (0..l).filter(|&j| keep(j)).map(|j| xr[j]).fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                return Err(Error::Data("softmax row is fully masked".into()));
            }
            let mut z = 0.0;
            for j in 0..l {
                if keep(j) {
                    o[j] = (xr[j] - mx).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let out_id = self.next_id();
        Ok(self.push("softmax", Tensor::new(xs, out)?, &[x], Box::new(move |vals, g, gr| {
            let y = vals[out_id].data();
            if let Some(s) = gr.slot(x) {
                for ((sr, yr), gg) in s.chunks_exact_mut(l).zip(y.chunks_exact(l)).zip(g.chunks_exact(l)) {
                    let dot: f64 = yr.iter().zip(gg).map(|(a, b)| a * b).sum();
                    for j in 0..l {
                        sr[j] += yr[j] * (gg[j] - dot);
                    }
                }
            }
        })))
    }

    /// `out[b] = Σ_l a[b,l]·m[b,l,:]` for `a` `[B, L]` and `m` `[B, L, D]`.
    pub fn weighted_sum(&mut self, a: Var, m: Var) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let ms = self.shape(m).to_vec();
        if as_.len() != 2 || ms.len() != 3 || as_[0] != ms[0] || as_[1] != ms[1] {
            return Err(shape_err("weighted_sum", &as_, &ms));
        }
        let (b, l, d) = (ms[0], ms[1], ms[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            gemm(1, l, d, &self.value(a).data()[bi * l..(bi + 1) * l], false, &self.value(m).data()[bi * l * d..(bi + 1) * l * d], false, 0.0, &mut out[bi * d..(bi + 1) * d]);
        }
        Ok(self.push("weighted_sum", Tensor::new(vec![b, d], out)?, &[a, m], Box::new(move |vals, g, gr| {
            if gr.slot(a).is_some() {
                let md = vals[m.0].data();
                let s = gr.slot(a).unwrap();
                for bi in 0..b {
                    gemm(1, d, l, &g[bi * d..(bi + 1) * d], false, &md[bi * l * d..(bi + 1) * l * d], true, 1.0, &mut s[bi * l..(bi + 1) * l]);
                }
            }
            if gr.slot(m).is_some() {
                let ad = vals[a.0].data();
                let s = gr.slot(m).unwrap();
                for bi in 0..b {
                    gemm(l, 1, d, &ad[bi * l..(bi + 1) * l], false, &g[bi * d..(bi + 1) * d], false, 1.0, &mut s[bi * l * d..(bi + 1) * l * d]);
                }
            }
        })))
    }

    /// Broadcast add of `q` (`[B, A]`) to every step of `x` (`[B, L, A]`).
    pub fn add_rows(&mut self, x: Var, q: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let qs = self.shape(q).to_vec();
        if xs.len() != 3 || qs.len() != 2 || xs[0] != qs[0] || xs[2] != qs[1] {
            return Err(shape_err("add_rows", &xs, &qs));
        }
        let (l, a) = (xs[1], xs[2]);
        let qd = self.value(q).data();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, v)| v + qd[(i / (l * a)) * a + i % a]).collect();
        Ok(self.push("add_rows", Tensor::new(xs, out)?, &[x, q], Box::new(move |_, g, gr| {
            gr.add(x, g);
            if let Some(s) = gr.slot(q) {
                for (i, v) in g.iter().enumerate() {
                    s[(i / (l * a)) * a + i % a] += v;
                }
            }
        })))
    }

    /// Masked mean over time of `[B, T, C]`; `mask` is `[B·T]`.
    pub fn mean_time(&mut self, x: Var, mask: Option<&[f64]>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("mean_time", &xs, &[]));
        }
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        let mask: Vec<f64> = match mask {
            Some(m) if m.len() != b * t => return Err(shape_err("mean_time mask", &xs, &[m.len()])),
            Some(m) => m.to_vec(),
            None => vec![1.0; b * t],
        };
        let counts: Vec<f64> = (0..b).map(|bi| mask[bi * t..(bi + 1) * t].iter().sum::<f64>()).collect();
        if counts.iter().any(|&n| n <= 0.0) {
            return Err(Error::Length("mean over an empty time range".into()));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for ti in 0..t {
                let m = mask[bi * t + ti];
                if m == 0.0 {
                    continue;
                }
                for j in 0..c {
                    out[bi * c + j] += m * xd[(bi * t + ti) * c + j] / counts[bi];
                }
            }
        }
        Ok(self.push("mean_time", Tensor::new(vec![b, c], out)?, &[x], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                for bi in 0..b {
                    for ti in 0..t {
                        let m = mask[bi * t + ti];
                        for j in 0..c {
                            s[(bi * t + ti) * c + j] += m * g[bi * c + j] / counts[bi];
                        }
                    }
                }
            }
        })))
    }

    /// `x[b,t,c] · s[b,c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() != 3 || ss != [xs[0], xs[2]] {
            return Err(shape_err("scale_channels", &xs, &ss));
        }
        let (t, c) = (xs[1], xs[2]);
        let sd = self.value(s).data();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, v)| v * sd[(i / (t * c)) * c + i % c]).collect();
        Ok(self.push("scale_channels", Tensor::new(xs, out)?, &[x, s], Box::new(move |vals, g, gr| {
            let xd = vals[x.0].data();
            let sd = vals[s.0].data();
            if let Some(out) = gr.slot(x) {
                for (i, a) in out.iter_mut().enumerate() {
                    *a += g[i] * sd[(i / (t * c)) * c + i % c];
                }
            }
            if let Some(out) = gr.slot(s) {
                for (i, gv) in g.iter().enumerate() {
                    out[(i / (t * c)) * c + i % c] += gv * xd[i];
                }
            }
        })))
    }

    /// Attentive statistics pooling. `h` and `logits` are `[B, T, C]`; weights
    /// are a softmax over time per channel. Returns `[B, 2C]` = `[μ; σ]`, with
    /// σ set to zero where the weighted variance is at most 1e-12.
    pub fn attentive_stats(&mut self, h: Var, logits: Var, mask: Option<&[f64]>) -> Result<Var> {
        self.same_shape("attentive_stats", h, logits)?;
        let xs = self.shape(h).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("attentive_stats", &xs, &[]));
        }
        let (b, t, c) = (xs[0], xs[1], xs[2]);
        let mask: Vec<f64> = match mask {
            Some(m) if m.len() != b * t => return Err(shape_err("attentive_stats mask", &xs, &[m.len()])),
            Some(m) => m.to_vec(),
            None => vec![1.0; b * t],
        };
        let hd = self.value(h).data();
        let ed = self.value(logits).data();
        let idx = move |bi: usize, ti: usize, j: usize| (bi * t + ti) * c + j;
        let mut alpha = vec![0.0; b * t * c];
        let mut out = vec![0.0; b * 2 * c];
        for bi in 0..b {
            if mask[bi * t..(bi + 1) * t].iter().all(|&m| m == 0.0) {
                return Err(Error::Length("attentive pooling over an empty sequence".into()));
            }
            for j in 0..c {
                let mx = (0..t).filter(|&ti| mask[bi * t + ti] != 0.0).map(|ti| ed[idx(bi, ti, j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for ti in 0..t {
                    if mask[bi * t + ti] != 0.0 {
                        let e = (ed[idx(bi, ti, j)] - mx).exp();
                        alpha[idx(bi, ti, j)] = e;
                        z += e;
                    }
                }
                let mut mu = 0.0;
                for ti in 0..t {
                    alpha[idx(bi, ti, j)] /= z;
                    mu += alpha[idx(bi, ti, j)] * hd[idx(bi, ti, j)];
                }
                let var: f64 = (0..t).map(|ti| alpha[idx(bi, ti, j)] * (hd[idx(bi, ti, j)] - mu).powi(2)).sum();
                out[bi * 2 * c + j] = mu;
                out[bi * 2 * c + c + j] = if var > 1e-12 { var.sqrt() } else { 0.0 };
            }
        }
        let out_id = self.next_id();
        Ok(self.push("attentive_stats", Tensor::new(vec![b, 2 * c], out)?, &[h, logits], Box::new(move |vals, g, gr| {
            let hd = vals[h.0].data();
            let od = vals[out_id].data();
            let mut gh = vec![0.0; b * t * c];
            let mut ge = vec![0.0; b * t * c];
            for bi in 0..b {
                for j in 0..c {
                    let mu = od[bi * 2 * c + j];
                    let sigma = od[bi * 2 * c + c + j];
                    let gmu = g[bi * 2 * c + j];
                    let gvar = if sigma > 0.0 { g[bi * 2 * c + c + j] / (2.0 * sigma) } else { 0.0 };
                    let mut ga = vec![0.0; t];
                    let mut dot = 0.0;
                    for ti in 0..t {
                        let a = alpha[idx(bi, ti, j)];
                        let d = hd[idx(bi, ti, j)] - mu;
                        ga[ti] = gmu * hd[idx(bi, ti, j)] + gvar * d * d;
                        dot += a * ga[ti];
                        gh[idx(bi, ti, j)] = a * (gmu + 2.0 * gvar * d);
                    }
                    for ti in 0..t {
                        let a = alpha[idx(bi, ti, j)];
                        ge[idx(bi, ti, j)] = a * (ga[ti] - dot);
                    }
                }
            }
            gr.add(h, &gh);
            gr.add(logits, &ge);
        })))
    }

    /// Inverted dropout. Active in training mode, or always with `always`.
    pub fn dropout(&mut self, x: Var, p: f64, always: bool) -> Var {
        if p <= 0.0 || !(self.training || always) {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let out: Vec<f64> = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).unwrap();
        self.push("dropout", t, &[x], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                for ((a, gv), m) in s.iter_mut().zip(g).zip(&mask) {
                    *a += gv * m;
                }
            }
        }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v: f64 = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(v), &[x], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                s.iter_mut().for_each(|a| *a += g[0]);
            }
        }))
    }

    /// `Σ x·r` against a fixed tensor of the same shape.
    pub fn dot_const(&mut self, x: Var, r: &Tensor) -> Result<Var> {
        if self.shape(x) != r.shape() {
            return Err(shape_err("dot_const", self.shape(x), r.shape()));
        }
        let v: f64 = self.value(x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let r = r.data().to_vec();
        Ok(self.push("dot_const", Tensor::scalar(v), &[x], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(x) {
                s.iter_mut().zip(&r).for_each(|(a, b)| *a += g[0] * b);
            }
        })))
    }

    /// Weighted sum of scalars.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut v = 0.0;
        for &(t, w) in terms {
            if self.value(t).len() != 1 {
                return Err(shape_err("combine", self.shape(t), &[]));
            }
            v += w * self.value(t).item();
        }
        let terms = terms.to_vec();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push("combine", Tensor::scalar(v), &parents, Box::new(move |_, g, gr| {
            for &(t, w) in &terms {
                gr.add(t, &[w * g[0]]);
            }
        })))
    }

    /// Mean squared error over rows (`[.., M]`) with per-row `mask`, averaged
    /// over the unmasked elements.
    pub fn mse_masked(&mut self, pred: Var, target: &Tensor, mask: Option<&[f64]>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::Contract(format!(
                "reconstruction shapes differ: {:?} vs {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let m = self.value(pred).last_dim();
        let rows = self.value(pred).rows();
        let mask: Vec<f64> = match mask {
            Some(k) if k.len() != rows => return Err(shape_err("mse mask", self.shape(pred), &[k.len()])),
            Some(k) => k.to_vec(),
            None => vec![1.0; rows],
        };
        let count = mask.iter().sum::<f64>() * m as f64;
        if count <= 0.0 {
            return Err(Error::Length("mse over an empty mask".into()));
        }
        let diff: Vec<f64> = self.value(pred).data().iter().zip(target.data()).enumerate().map(|(i, (p, t))| mask[i / m] * (p - t)).collect();
        let v = diff.iter().map(|d| d * d).sum::<f64>() / count;
        Ok(self.push("mse", Tensor::scalar(v), &[pred], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(pred) {
                for (i, a) in s.iter_mut().enumerate() {
                    *a += g[0] * 2.0 * diff[i] / count;
                }
            }
        })))
    }

    /// Binary cross-entropy on logits, averaged over unmasked entries, with
    /// positive examples weighted by `pos_weight`.
    pub fn bce_logits(&mut self, logits: Var, target: &[f64], mask: Option<&[f64]>, pos_weight: f64) -> Result<Var> {
        let n = self.value(logits).len();
        if target.len() != n || mask.is_some_and(|m| m.len() != n) {
            return Err(shape_err("bce_logits", self.shape(logits), &[target.len()]));
        }
        let mask: Vec<f64> = mask.map_or_else(|| vec![1.0; n], |m| m.to_vec());
        let count: f64 = mask.iter().sum();
        if count <= 0.0 {
            return Err(Error::Length("bce over an empty mask".into()));
        }
        let xd = self.value(logits).data();
        let mut v = 0.0;
        for i in 0..n {
            let (x, y) = (xd[i], target[i]);
            v += mask[i] * (pos_weight * y * softplus(-x) + (1.0 - y) * softplus(x));
        }
        v /= count;
        let target = target.to_vec();
        Ok(self.push("bce", Tensor::scalar(v), &[logits], Box::new(move |vals, g, gr| {
            let xd = vals[logits.0].data();
            if let Some(s) = gr.slot(logits) {
                for i in 0..n {
                    let p = sigmoid(xd[i]);
                    let y = target[i];
                    s[i] += g[0] * mask[i] * (-pos_weight * y * (1.0 - p) + (1.0 - y) * p) / count;
                }
            }
        })))
    }

    /// Mean cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(shape_err("cross_entropy", &s, &[labels.len()]));
        }
        let (b, c) = (s[0], s[1]);
        let mut probs = vec![0.0; b * c];
        let mut v = 0.0;
        for (r, (p, x)) in probs.chunks_exact_mut(c).zip(self.value(logits).data().chunks_exact(c)).enumerate() {
            let mx = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                p[j] = (x[j] - mx).exp() / z;
            }
            v += -(x[labels[r]] - mx - z.ln());
        }
        v /= b as f64;
        let labels = labels.to_vec();
        Ok(self.push("cross_entropy", Tensor::scalar(v), &[logits], Box::new(move |_, g, gr| {
            if let Some(s) = gr.slot(logits) {
                for r in 0..b {
                    for j in 0..c {
                        let y = if labels[r] == j { 1.0 } else { 0.0 };
                        s[r * c + j] += g[0] * (probs[r * c + j] - y) / b as f64;
                    }
                }
            }
        })))
    }
}
