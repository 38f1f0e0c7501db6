//! Inner loops shared by the value functions, the tape and Adam.
//!
//! Each kernel has one portable body compiled twice: as is, and with AVX2
//! enabled, picked at run time. Both builds perform the same floating-point
//! operations in the same order (no fused multiply-add, fixed reduction
//! tree), so results are bitwise identical across machines.

const LANES: usize = 16;

#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (a[..n].chunks_exact(LANES), b[..n].chunks_exact(LANES));
    let mut tail = 0.0;
    for (x, y) in a.remainder().iter().zip(b.remainder()) {
        tail += x * y;
    }
    let mut acc = [0.0f64; LANES];
    for (x, y) in a.zip(b) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for k in 0..width {
            acc[k] += acc[k + width];
        }
    }
    acc[0] + tail
}

#[inline(always)]
fn matvec_body(w: &[f64], cols: usize, offset: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let start = i * cols + offset;
        *o += dot_body(&w[start..start + x.len()], x);
    }
}

#[inline(always)]
fn axpy_body(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

#[inline(always)]
fn matvec_backward_body(
    w: &[f64],
    cols: usize,
    offset: usize,
    x: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: &mut [f64],
) {
    let n = x.len();
    if let Some(gx) = gx {
        for (r, gr) in g.iter().enumerate() {
            if *gr != 0.0 {
                let start = r * cols + offset;
                axpy_body(*gr, &w[start..start + n], gx);
            }
        }
    }
    for (r, gr) in g.iter().enumerate() {
        if *gr != 0.0 {
            let start = r * cols + offset;
            axpy_body(*gr, x, &mut gw[start..start + n]);
        }
    }
}

/// Moment and parameter update of one Adam step; `step = lr / (1 - b1^t)`,
/// `inv_c2 = 1 / (1 - b2^t)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AdamCoef {
    pub b1: f64,
    pub b2: f64,
    pub step: f64,
    pub inv_c2: f64,
    pub eps: f64,
}

#[inline(always)]
fn adam_body(c: AdamCoef, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]) {
    for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = c.b1 * *m + (1.0 - c.b1) * g;
        *v = c.b2 * *v + (1.0 - c.b2) * g * g;
        *p -= c.step * *m / ((*v * c.inv_c2).sqrt() + c.eps);
    }
}

const EXP_MASK: u64 = 0x7ff0_0000_0000_0000;

#[inline(always)]
fn all_finite_body(a: &[f64]) -> bool {
    // Infinities and NaNs are exactly the values with every exponent bit set.
    a.iter().fold(0u64, |acc, x| acc | u64::from(x.to_bits() & EXP_MASK == EXP_MASK)) == 0
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::AdamCoef;

    #[target_feature(enable = "avx2")]
    pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
        super::dot_body(a, b)
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn matvec(w: &[f64], cols: usize, offset: usize, x: &[f64], out: &mut [f64]) {
        super::matvec_body(w, cols, offset, x, out)
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn matvec_backward(
        w: &[f64],
        cols: usize,
        offset: usize,
        x: &[f64],
        g: &[f64],
        gx: Option<&mut [f64]>,
        gw: &mut [f64],
    ) {
        super::matvec_backward_body(w, cols, offset, x, g, gx, gw)
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn all_finite(a: &[f64]) -> bool {
        super::all_finite_body(a)
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn adam(c: AdamCoef, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]) {
        super::adam_body(c, p, g, m, v)
    }
}

#[inline]
fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

macro_rules! dispatch {
    ($name:ident($($arg:expr),*), $body:ident) => {{
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { avx2::$name($($arg),*) };
        }
        $body($($arg),*)
    }};
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    dispatch!(dot(a, b), dot_body)
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `out += W[:, offset..offset + x.len()] · x` for a row-major `W` with
/// `cols` columns.
pub(crate) fn matvec_cols_acc(w: &[f64], cols: usize, offset: usize, x: &[f64], out: &mut [f64]) {
    dispatch!(matvec(w, cols, offset, x, out), matvec_body)
}

/// Adjoint of [`matvec_cols_acc`]: `gx += Wᵀ g` (when given) and
/// `gW[:, offset..] += g xᵀ`.
pub(crate) fn matvec_cols_backward(
    w: &[f64],
    cols: usize,
    offset: usize,
    x: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: &mut [f64],
) {
    dispatch!(matvec_backward(w, cols, offset, x, g, gx, gw), matvec_backward_body)
}

pub(crate) fn all_finite(a: &[f64]) -> bool {
    dispatch!(all_finite(a), all_finite_body)
}

pub(crate) fn adam_update(c: AdamCoef, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]) {
    dispatch!(adam(c, p, g, m, v), adam_body)
}
