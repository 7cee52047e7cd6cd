//! Fully connected layers over a flat parameter vector, batched with dgemm.

/// Weight (out × in, row-major) and bias offsets of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn param_len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    /// `y[n, :] = W x[n, :] + b` for `n` rows; `x` rows are `x_stride` apart.
    pub fn forward(&self, params: &[f64], x: &[f64], x_stride: usize, n: usize, y: &mut [f64], y_stride: usize) {
        let b = &params[self.bias..self.bias + self.outputs];
        for r in 0..n {
            y[r * y_stride..r * y_stride + self.outputs].copy_from_slice(b);
        }
        let w = &params[self.weight..self.weight + self.inputs * self.outputs];
        gemm(
            n,
            self.inputs,
            self.outputs,
            x,
            x_stride,
            1,
            w,
            1,
            self.inputs,
            y,
            y_stride,
            1.0,
        );
    }

    /// Accumulates parameter gradients and optionally writes `dx = dy W`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        x: &[f64],
        x_stride: usize,
        dy: &[f64],
        dy_stride: usize,
        n: usize,
        dx: Option<(&mut [f64], usize)>,
    ) {
        let (wo, bo, len) = (self.weight, self.bias, self.inputs * self.outputs);
        // dW += dyᵀ x
        gemm(
            self.outputs,
            n,
            self.inputs,
            dy,
            1,
            dy_stride,
            x,
            x_stride,
            1,
            &mut grads[wo..wo + len],
            self.inputs,
            1.0,
        );
        let db = &mut grads[bo..bo + self.outputs];
        for r in 0..n {
            for (g, v) in db.iter_mut().zip(&dy[r * dy_stride..r * dy_stride + self.outputs]) {
                *g += v;
            }
        }
        if let Some((dx, dx_stride)) = dx {
            gemm(
                n,
                self.outputs,
                self.inputs,
                dy,
                dy_stride,
                1,
                &params[wo..wo + len],
                self.inputs,
                1,
                dx,
                dx_stride,
                0.0,
            );
        }
    }
}

/// `C = A B + beta C` with A m×k, B k×n, arbitrary row/column strides, C row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
    }
    assert!(c.len() >= span(m, n, rsc, 1));
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}
