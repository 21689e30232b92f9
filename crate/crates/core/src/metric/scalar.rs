//! Float abstraction so the network runs in `f32` for training and `f64` for
//! gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Strided matrix view into a flat slice: element `(i, j)` lives at
/// `offset + i * rs + j * cs`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn new(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self {
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }

    fn last(&self) -> usize {
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// # Safety
    /// Pointers and strides must describe in-bounds, non-aliasing matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite")
    }
}

impl Scalar for f32 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn raw_gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `C <- alpha * A B + beta * C` on bounds-checked strided views.
pub fn gemm<S: Scalar>(
    alpha: S,
    a: &[S],
    av: View,
    b: &[S],
    bv: View,
    beta: S,
    c: &mut [S],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "inner dimensions");
    assert_eq!(av.rows, cv.rows, "output rows");
    assert_eq!(bv.cols, cv.cols, "output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.rs + j * cv.cs;
                c[idx] = beta * c[idx];
            }
        }
        return;
    }
    assert!(av.last() < a.len() && bv.last() < b.len() && cv.last() < c.len());
    // SAFETY: every view was bounds-checked above and `c` is borrowed
    // mutably, so it cannot alias `a` or `b`. Output views always use
    // strides that map distinct (i, j) to distinct elements.
    unsafe {
        S::raw_gemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

const LANES: usize = 16;
const CHUNK: usize = 1024;

/// Accumulates `f` over aligned lane groups of `xs` and `ys` in `S`
/// within chunks of 1024, and the chunk totals in `f64`.
#[inline(always)]
fn chunked<S: Scalar>(xs: &[S], ys: &[S], f: impl Fn(S, S) -> S) -> f64 {
    let mut total = 0.0f64;
    for (cx, cy) in xs.chunks(CHUNK).zip(ys.chunks(CHUNK)) {
        let mut acc = [S::zero(); LANES];
        let lx = cx.chunks_exact(LANES);
        let ly = cy.chunks_exact(LANES);
        let rest: S = lx
            .remainder()
            .iter()
            .zip(ly.remainder())
            .map(|(a, b)| f(*a, *b))
            .sum();
        for (gx, gy) in lx.zip(ly) {
            for l in 0..LANES {
                acc[l] += f(gx[l], gy[l]);
            }
        }
        total += acc.iter().map(|v| v.f64()).sum::<f64>() + rest.f64();
    }
    total
}

pub fn sum_f64<S: Scalar>(x: &[S]) -> f64 {
    chunked(x, x, |a, _| a)
}

pub fn dot_f64<S: Scalar>(x: &[S], y: &[S]) -> f64 {
    assert_eq!(x.len(), y.len());
    chunked(x, y, |a, b| a * b)
}

/// Sum of squared deviations from `m`.
pub fn sq_dev_f64<S: Scalar>(x: &[S], m: f64) -> f64 {
    let m = S::of(m);
    chunked(x, x, |a, _| (a - m) * (a - m))
}
