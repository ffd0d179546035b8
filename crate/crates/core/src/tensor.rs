use crate::real::Real;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has no dimensions")
    }

    /// Number of rows when viewed as `[-1, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim().max(1)
    }

    pub fn row(&self, i: usize) -> &[F] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::lit(x.as_f64())).collect(),
        }
    }
}

const TILE: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature the function is compiled for was detected at runtime.
        unsafe { matmul_acc_avx2(a, b, c, m, k, n) };
        return;
    }
    matmul_kernel::<F, 2>(a, b, c, m, k, n);
}

// Wider registers and a taller tile. Every output element still sees the
// same sequence of scalar operations, so results match the baseline build.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    matmul_kernel::<F, 4>(a, b, c, m, k, n);
}

/// `R` rows of `a` against a 16-wide column strip accumulated in registers.
#[inline(always)]
fn matmul_kernel<F: Real, const R: usize>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    let full = n / TILE * TILE;
    let mut i = 0;
    while i < m {
        let rows = R.min(m - i);
        if rows == R {
            strip::<F, R>(a, b, c, i, k, n, full);
        } else {
            for r in 0..rows {
                strip::<F, 1>(a, b, c, i + r, k, n, full);
            }
        }
        i += rows;
    }
    if full < n {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n + full..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + full..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn strip<F: Real, const R: usize>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    i: usize,
    k: usize,
    n: usize,
    full: usize,
) {
    let arows: [&[F]; R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    for j0 in (0..full).step_by(TILE) {
        let mut acc = [[F::zero(); TILE]; R];
        for p in 0..k {
            let bs: &[F; TILE] = b[p * n + j0..p * n + j0 + TILE].try_into().unwrap();
            for r in 0..R {
                let x = arows[r][p];
                for j in 0..TILE {
                    acc[r][j] += x * bs[j];
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            let base = (i + r) * n + j0;
            for (cv, &v) in c[base..base + TILE].iter_mut().zip(row) {
                *cv += v;
            }
        }
    }
}

fn transpose<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut t = vec![F::zero(); x.len()];
    for r in 0..rows {
        for (c, &v) in x[r * cols..(r + 1) * cols].iter().enumerate() {
            t[c * rows + r] = v;
        }
    }
    t
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_bt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    if m < 4 || k < TILE {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for p in 0..k {
                c[i * k + p] += dot(arow, &b[p * n..(p + 1) * n]);
            }
        }
        return;
    }
    matmul_acc(a, &transpose(b, k, n), c, m, n, k);
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_at_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    matmul_acc(&transpose(a, m, k), b, c, k, m, n);
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // Four accumulators let the compiler vectorise without reassociating.
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
