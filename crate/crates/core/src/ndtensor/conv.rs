//! Same-padded, stride-1 2-D cross-correlation over NHWC batches.
//!
//! Kernels are laid out `[KH, KW, C_in, C_out]`; out-of-image taps read zero.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
}

impl ConvGeometry {
    fn taps(&self, y: usize, x: usize) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        (0..self.kh).flat_map(move |ky| {
            (0..self.kw).filter_map(move |kx| {
                let yy = (y + ky).checked_sub(ph)?;
                let xx = (x + kx).checked_sub(pw)?;
                (yy < self.h && xx < self.w).then_some((ky * self.kw + kx, yy, xx))
            })
        })
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.h * g.w * g.cout];
    let tap_block = g.cin * g.cout;
    for n in 0..g.n {
        for y in 0..g.h {
            for x in 0..g.w {
                let o = ((n * g.h + y) * g.w + x) * g.cout;
                let out_px = &mut out[o..o + g.cout];
                for (tap, yy, xx) in g.taps(y, x) {
                    let i = ((n * g.h + yy) * g.w + xx) * g.cin;
                    let in_px = &input[i..i + g.cin];
                    let k_tap = &kernel[tap * tap_block..(tap + 1) * tap_block];
                    for (ci, &a) in in_px.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let row = &k_tap[ci * g.cout..(ci + 1) * g.cout];
                        for (o, &k) in out_px.iter_mut().zip(row) {
                            *o += a * k;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoints with respect to input and kernel given the output adjoint.
pub(crate) fn backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gin = want_input.then(|| vec![0.0; input.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kernel.len()]);
    let tap_block = g.cin * g.cout;
    for n in 0..g.n {
        for y in 0..g.h {
            for x in 0..g.w {
                let o = ((n * g.h + y) * g.w + x) * g.cout;
                let go = &grad_out[o..o + g.cout];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for (tap, yy, xx) in g.taps(y, x) {
                    let i = ((n * g.h + yy) * g.w + xx) * g.cin;
                    let base = tap * tap_block;
                    if let Some(gin) = gin.as_mut() {
                        for ci in 0..g.cin {
                            let row = &kernel[base + ci * g.cout..base + (ci + 1) * g.cout];
                            let dot: f64 = row.iter().zip(go).map(|(k, d)| k * d).sum();
                            gin[i + ci] += dot;
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        for ci in 0..g.cin {
                            let a = input[i + ci];
                            if a == 0.0 {
                                continue;
                            }
                            let row = &mut gk[base + ci * g.cout..base + (ci + 1) * g.cout];
                            for (k, d) in row.iter_mut().zip(go) {
                                *k += a * d;
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gk)
}
