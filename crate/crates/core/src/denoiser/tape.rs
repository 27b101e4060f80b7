//! Reverse-mode differentiation over a recorded sequence of tensor ops.
//!
//! Tensors are dense `f64` with shape `[n, c, h, w]`; `n` indexes views.

use std::rc::Rc;

use super::params::ParamStore;
use crate::attention::{assemble_batch, attend, attend_backward, scatter_rows, scatter_slots, AttentionBatch, Attended, EpipolarPlan};
use crate::error::{Error, Result};

pub(crate) const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub type Shape = [usize; 4];

fn numel(s: &Shape) -> usize {
    s.iter().product()
}

enum Op {
    Input,
    Param(usize),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    ScaleShift {
        x: Var,
        s: Var,
        b: Var,
    },
    Silu(Var),
    Add(Var, Var),
    Concat(Var, Var),
    Upsample(Var),
    Epipolar {
        q: Var,
        k: Var,
        v: Var,
        plan: Rc<EpipolarPlan>,
        batch: Box<AttentionBatch>,
        attended: Box<Attended>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
}

pub struct Tape<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n`, optionally transposed in storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn identity(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.ho * self.wo;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.ho * self.wo;
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Tape<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params.tensors[i].value,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn input(&mut self, value: Vec<f64>, shape: Shape) -> Var {
        self.push(value, shape, Op::Input)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self.params.index(name)?;
        let dims = &self.params.tensors[i].shape;
        let mut shape = [1usize; 4];
        shape[..dims.len()].copy_from_slice(dims);
        self.nodes.push(Node {
            value: Vec::new(),
            shape,
            op: Op::Param(i),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<ConvGeom> {
        let [_, ci, h, wd] = self.shape(x);
        let [_, wci, kh, kw] = self.shape(w);
        if wci != ci {
            return Err(Error::ShapeMismatch(format!("conv expects {wci} input channels, got {ci}")));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::ShapeMismatch("conv kernel larger than padded input".into()));
        }
        Ok(ConvGeom {
            ci,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, stride, pad)?;
        let n = self.shape(x)[0];
        let co = self.shape(w)[0];
        let kk = g.ci * g.kh * g.kw;
        let p = g.ho * g.wo;
        let mut out = vec![0.0; n * co * p];
        let mut cols = if g.identity() { Vec::new() } else { vec![0.0; kk * p] };
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for i in 0..n {
                let xi = &xv[i * g.ci * g.h * g.w..(i + 1) * g.ci * g.h * g.w];
                let src = if g.identity() {
                    xi
                } else {
                    g.im2col(xi, &mut cols);
                    &cols
                };
                gemm(co, kk, p, wv, false, src, false, &mut out[i * co * p..(i + 1) * co * p], 0.0);
            }
            if let Some(b) = b {
                let bv = self.value(b);
                for i in 0..n {
                    for c in 0..co {
                        for o in &mut out[(i * co + c) * p..(i * co + c + 1) * p] {
                            *o += bv[c];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            [n, co, g.ho, g.wo],
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if groups == 0 || c % groups != 0 {
            return Err(Error::ShapeMismatch(format!("{c} channels do not split into {groups} groups")));
        }
        let cg = c / groups;
        let hw = h * w;
        let m = (cg * hw) as f64;
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = vec![0.0; xv.len()];
        let mut mean = vec![0.0; n * groups];
        let mut rstd = vec![0.0; n * groups];
        for i in 0..n {
            for g in 0..groups {
                let range = (i * c + g * cg) * hw..(i * c + (g + 1) * cg) * hw;
                let seg = &xv[range.clone()];
                let mu = seg.iter().sum::<f64>() / m;
                let var = seg.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / m;
                let r = 1.0 / (var + GN_EPS).sqrt();
                mean[i * groups + g] = mu;
                rstd[i * groups + g] = r;
                for (j, o) in out[range].iter_mut().enumerate() {
                    let ch = g * cg + j / hw;
                    *o = (seg[j] - mu) * r * gv[ch] + bv[ch];
                }
            }
        }
        Ok(self.push(
            out,
            [n, c, h, w],
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
        ))
    }

    /// `x · (1 + s) + b` with per-channel `s`, `b` of shape `[n, c, 1, 1]`.
    pub fn scale_shift(&mut self, x: Var, s: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(s) != [n, c, 1, 1] || self.shape(b) != [n, c, 1, 1] {
            return Err(Error::ShapeMismatch("scale/shift must be [n, c, 1, 1]".into()));
        }
        let hw = h * w;
        let (xv, sv, bv) = (self.value(x), self.value(s), self.value(b));
        let out = xv
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let nc = i / hw;
                v * (1.0 + sv[nc]) + bv[nc]
            })
            .collect();
        Ok(self.push(out, [n, c, h, w], Op::ScaleShift { x, s, b }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x);
        self.push(out, shape, Op::Silu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch("add operands differ in shape".into()));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a);
        Ok(self.push(out, shape, Op::Add(a, b)))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::ShapeMismatch("concat operands differ in batch or spatial size".into()));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        Ok(self.push(out, [n, ca + cb, h, w], Op::Concat(a, b)))
    }

    /// Nearest-neighbor 2× upsampling.
    pub fn upsample(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let xv = self.value(x);
        let mut out = vec![0.0; n * c * 4 * h * w];
        for nc in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(nc * 2 * h + y) * 2 * w + xx] = xv[(nc * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, [n, c, 2 * h, 2 * w], Op::Upsample(x))
    }

    /// Epipolar attention; output has `c + heads` channels.
    pub fn epipolar(&mut self, q: Var, k: Var, v: Var, plan: Rc<EpipolarPlan>, heads: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(q);
        if self.shape(k) != [n, c, h, w] || self.shape(v) != [n, c, h, w] {
            return Err(Error::ShapeMismatch("q, k, v shapes differ".into()));
        }
        if (plan.views, plan.height, plan.width) != (n, h, w) {
            return Err(Error::ShapeMismatch("attention plan does not match feature maps".into()));
        }
        let batch = assemble_batch(&plan, self.value(q), self.value(k), self.value(v), c);
        let attended = attend(&batch, heads)?;
        let wide = c + heads;
        let hw = h * w;
        let mut out = vec![0.0; n * wide * hw];
        for (qi, row) in attended.output.chunks_exact(wide).enumerate() {
            let (view, p) = (qi / hw, qi % hw);
            for (ch, val) in row.iter().enumerate() {
                out[(view * wide + ch) * hw + p] = *val;
            }
        }
        Ok(self.push(
            out,
            [n, wide, h, w],
            Op::Epipolar {
                q,
                k,
                v,
                plan,
                batch: Box::new(batch),
                attended: Box::new(attended),
            },
        ))
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::ShapeMismatch("mse target length differs".into()));
        }
        let loss = pv.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pv.len() as f64;
        Ok(self.push(
            vec![loss],
            [1, 1, 1, 1],
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
        ))
    }

    /// Gradients of the scalar `root` with respect to every parameter, indexed like the store.
    pub fn backward(&self, root: Var) -> Vec<Option<Vec<f64>>> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Vec<f64>>> = (0..self.params.tensors.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(i) => {
                    let slot = param_grads[*i].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::Conv { x, w, b, stride, pad } => {
                    let geom = self.conv_geom(*x, *w, *stride, *pad).expect("validated in forward");
                    let n = self.shape(*x)[0];
                    let co = self.shape(*w)[0];
                    let kk = geom.ci * geom.kh * geom.kw;
                    let p = geom.ho * geom.wo;
                    let in_len = geom.ci * geom.h * geom.w;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut gw = vec![0.0; co * kk];
                    let mut gx = vec![0.0; n * in_len];
                    let mut cols = vec![0.0; kk * p];
                    let mut gcols = vec![0.0; kk * p];
                    for i in 0..n {
                        let gi = &g[i * co * p..(i + 1) * co * p];
                        let xi = &xv[i * in_len..(i + 1) * in_len];
                        if geom.identity() {
                            gemm(co, p, kk, gi, false, xi, true, &mut gw, 1.0);
                            gemm(kk, co, p, wv, true, gi, false, &mut gx[i * in_len..(i + 1) * in_len], 1.0);
                        } else {
                            geom.im2col(xi, &mut cols);
                            gemm(co, p, kk, gi, false, &cols, true, &mut gw, 1.0);
                            gemm(kk, co, p, wv, true, gi, false, &mut gcols, 0.0);
                            geom.col2im(&gcols, &mut gx[i * in_len..(i + 1) * in_len]);
                        }
                    }
                    add_into(acc(&mut grads, *w, gw.len()), &gw);
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                    if let Some(b) = b {
                        let mut gb = vec![0.0; co];
                        for i in 0..n {
                            for (c, gbc) in gb.iter_mut().enumerate() {
                                *gbc += g[(i * co + c) * p..(i * co + c + 1) * p].iter().sum::<f64>();
                            }
                        }
                        add_into(acc(&mut grads, *b, co), &gb);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let [n, c, h, w] = self.shape(*x);
                    let hw = h * w;
                    let cg = c / groups;
                    let m = (cg * hw) as f64;
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let mut gx = vec![0.0; xv.len()];
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    let mut dxhat = vec![0.0; cg * hw];
                    for i in 0..n {
                        for gr in 0..*groups {
                            let (mu, r) = (mean[i * groups + gr], rstd[i * groups + gr]);
                            let base = (i * c + gr * cg) * hw;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for j in 0..cg * hw {
                                let ch = gr * cg + j / hw;
                                let xhat = (xv[base + j] - mu) * r;
                                let dy = g[base + j];
                                ggamma[ch] += dy * xhat;
                                gbeta[ch] += dy;
                                dxhat[j] = dy * gv[ch];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xhat;
                            }
                            for j in 0..cg * hw {
                                let xhat = (xv[base + j] - mu) * r;
                                gx[base + j] = r / m * (m * dxhat[j] - s1 - xhat * s2);
                            }
                        }
                    }
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                    add_into(acc(&mut grads, *gamma, c), &ggamma);
                    add_into(acc(&mut grads, *beta, c), &gbeta);
                }
                Op::ScaleShift { x, s, b } => {
                    let [n, c, h, w] = self.shape(*x);
                    let hw = h * w;
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let mut gx = vec![0.0; xv.len()];
                    let mut gs = vec![0.0; n * c];
                    let mut gb = vec![0.0; n * c];
                    for (i, dy) in g.iter().enumerate() {
                        let nc = i / hw;
                        gx[i] = dy * (1.0 + sv[nc]);
                        gs[nc] += dy * xv[i];
                        gb[nc] += dy;
                    }
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                    add_into(acc(&mut grads, *s, n * c), &gs);
                    add_into(acc(&mut grads, *b, n * c), &gb);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let gx: Vec<f64> = xv
                        .iter()
                        .zip(&g)
                        .map(|(&v, dy)| {
                            let s = sigmoid(v);
                            dy * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.shape(*a);
                    let cb = self.shape(*b)[1];
                    let hw = h * w;
                    let mut ga = Vec::with_capacity(n * ca * hw);
                    let mut gb = Vec::with_capacity(n * cb * hw);
                    for i in 0..n {
                        let row = &g[i * (ca + cb) * hw..(i + 1) * (ca + cb) * hw];
                        ga.extend_from_slice(&row[..ca * hw]);
                        gb.extend_from_slice(&row[ca * hw..]);
                    }
                    add_into(acc(&mut grads, *a, ga.len()), &ga);
                    add_into(acc(&mut grads, *b, gb.len()), &gb);
                }
                Op::Upsample(x) => {
                    let [n, c, h, w] = self.shape(*x);
                    let mut gx = vec![0.0; n * c * h * w];
                    for nc in 0..n * c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[(nc * h + y / 2) * w + xx / 2] += g[(nc * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    add_into(acc(&mut grads, *x, gx.len()), &gx);
                }
                Op::Epipolar {
                    q,
                    k,
                    v,
                    plan,
                    batch,
                    attended,
                } => {
                    let [n, c, h, w] = self.shape(*q);
                    let hw = h * w;
                    let wide = node.shape[1];
                    let mut rows = vec![0.0; n * hw * wide];
                    for view in 0..n {
                        for ch in 0..wide {
                            for p in 0..hw {
                                rows[(view * hw + p) * wide + ch] = g[(view * wide + ch) * hw + p];
                            }
                        }
                    }
                    let ag = attend_backward(batch, attended, &rows);
                    let len = n * c * hw;
                    let mut gq = vec![0.0; len];
                    scatter_rows(plan, &ag.q, c, &mut gq);
                    let mut gk = vec![0.0; len];
                    scatter_slots(plan, &ag.k, c, c, &mut gk);
                    let mut gv = vec![0.0; len];
                    scatter_slots(plan, &ag.v, c, c, &mut gv);
                    add_into(acc(&mut grads, *q, len), &gq);
                    add_into(acc(&mut grads, *k, len), &gk);
                    add_into(acc(&mut grads, *v, len), &gv);
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let scale = 2.0 * g[0] / pv.len() as f64;
                    let gp: Vec<f64> = pv.iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                    add_into(acc(&mut grads, *pred, gp.len()), &gp);
                }
            }
        }
        param_grads
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::params::{ParamStore, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(specs: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::default();
        for (name, shape) in specs {
            let len = shape.iter().product();
            s.insert(Tensor {
                name: name.to_string(),
                shape: shape.clone(),
                value: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .unwrap();
        }
        s
    }

    /// Central-difference check of every parameter coordinate of `f`.
    fn check(params: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let grads = {
            let mut tape = Tape::new(params);
            let root = f(&mut tape);
            tape.backward(root)
        };
        let eval = |p: &ParamStore| {
            let mut tape = Tape::new(p);
            let root = f(&mut tape);
            tape.value(root)[0]
        };
        let h = 1e-5;
        for (ti, t) in params.tensors.iter().enumerate() {
            for j in 0..t.value.len() {
                let mut plus = params.clone();
                plus.tensors[ti].value[j] += h;
                let mut minus = params.clone();
                minus.tensors[ti].value[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads[ti].as_ref().map_or(0.0, |g| g[j]);
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "{} [{j}]: {an} vs {fd}", t.name);
            }
        }
    }

    fn target(len: usize) -> Vec<f64> {
        (0..len).map(|i| (i as f64 * 0.7).sin()).collect()
    }

    #[test]
    fn conv_strided_and_padded() {
        let p = store(&[("x", vec![2, 3, 5, 4]), ("w", vec![4, 3, 3, 3]), ("b", vec![4])], 1);
        check(&p, |t| {
            let (x, w, b) = (t.param("x").unwrap(), t.param("w").unwrap(), t.param("b").unwrap());
            let y = t.conv(x, w, Some(b), 2, 1).unwrap();
            let len = t.value(y).len();
            t.mse(y, &target(len)).unwrap()
        });
    }

    #[test]
    fn pointwise_conv() {
        let p = store(&[("x", vec![2, 3, 2, 2]), ("w", vec![5, 3, 1, 1])], 2);
        check(&p, |t| {
            let (x, w) = (t.param("x").unwrap(), t.param("w").unwrap());
            let y = t.conv(x, w, None, 1, 0).unwrap();
            let len = t.value(y).len();
            t.mse(y, &target(len)).unwrap()
        });
    }

    #[test]
    fn norm_scale_shift_silu() {
        let p = store(
            &[
                ("x", vec![2, 4, 3, 3]),
                ("g", vec![4]),
                ("b", vec![4]),
                ("s", vec![2, 4, 1, 1]),
                ("t", vec![2, 4, 1, 1]),
            ],
            3,
        );
        check(&p, |t| {
            let x = t.param("x").unwrap();
            let (g, b) = (t.param("g").unwrap(), t.param("b").unwrap());
            let (s, sh) = (t.param("s").unwrap(), t.param("t").unwrap());
            let y = t.group_norm(x, g, b, 2).unwrap();
            let y = t.scale_shift(y, s, sh).unwrap();
            let y = t.silu(y);
            let len = t.value(y).len();
            t.mse(y, &target(len)).unwrap()
        });
    }

    #[test]
    fn concat_add_upsample() {
        let p = store(&[("a", vec![2, 2, 2, 3]), ("b", vec![2, 1, 2, 3]), ("c", vec![2, 3, 4, 6])], 4);
        check(&p, |t| {
            let (a, b, c) = (t.param("a").unwrap(), t.param("b").unwrap(), t.param("c").unwrap());
            let y = t.concat(a, b).unwrap();
            let y = t.upsample(y);
            let y = t.add(y, c).unwrap();
            let y = t.add(y, y).unwrap();
            let len = t.value(y).len();
            t.mse(y, &target(len)).unwrap()
        });
    }
}
