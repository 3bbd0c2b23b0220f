//! Batched evaluation of `u`, `u_t`, `u_x` and `u_xx` for many points at once.
//!
//! The four quantities travel through the network as stacked row blocks of one
//! matrix per layer, so each layer costs a single GEMM. For a hidden layer with
//! `a = tanh(z)`, `a' = 1 - a²` and `a'' = -2 a a'`:
//!
//! ```text
//! h    = a
//! h_t  = a' z_t
//! h_x  = a' z_x
//! h_xx = a'' z_x² + a' z_xx
//! ```
//!
//! [`JetTrace::backward`] is the hand-written adjoint of that recurrence.

use super::Architecture;

/// Network output and its derivatives, one entry per point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Jet {
    pub u: Vec<f64>,
    pub u_t: Vec<f64>,
    pub u_x: Vec<f64>,
    pub u_xx: Vec<f64>,
}

/// Loss sensitivities with respect to each entry of a [`Jet`].
/// Derivative slices may be empty for value-only traces.
#[derive(Clone, Copy, Debug)]
pub struct JetAdjoint<'a> {
    pub u: &'a [f64],
    pub u_t: &'a [f64],
    pub u_x: &'a [f64],
    pub u_xx: &'a [f64],
}

/// Forward activations kept for the reverse pass.
#[derive(Clone, Debug)]
pub struct JetTrace {
    n: usize,
    streams: usize,
    /// Stacked layer inputs, `streams·n × fan_in`, one per layer.
    inputs: Vec<Vec<f64>>,
    /// Stacked pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
    jet: Jet,
}

/// `c ← a·b + beta·c` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k.max(1) - 1) * csa || k == 0);
    assert!(b.len() > (k.max(1) - 1) * rsb + (n - 1) * csb || k == 0);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above keep every strided access inside the slices.
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

fn input_block(arch: &Architecture, points: &[(f64, f64)], streams: usize) -> Vec<f64> {
    let n = points.len();
    let [(st, ct), (sx, cx)] = arch
        .input_scaling()
        .map_or([(1.0, 0.0), (1.0, 0.0)], |s| s.coefficients());
    let mut s = vec![0.0; streams * n * 2];
    for (r, &(t, x)) in points.iter().enumerate() {
        s[2 * r] = st * t + ct;
        s[2 * r + 1] = sx * x + cx;
    }
    if streams == 4 {
        for r in 0..n {
            s[2 * (n + r)] = st;
            s[2 * (2 * n + r) + 1] = sx;
        }
    }
    s
}

fn affine(
    params: &[f64],
    fan_in: usize,
    fan_out: usize,
    offset: usize,
    s: &[f64],
    rows: usize,
    n: usize,
) -> Vec<f64> {
    let w = &params[offset..offset + fan_in * fan_out];
    let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
    let mut z = vec![0.0; rows * fan_out];
    gemm(
        rows,
        fan_in,
        fan_out,
        s,
        (fan_in, 1),
        w,
        (fan_out, 1),
        0.0,
        &mut z,
        fan_out,
    );
    for row in z[..n * fan_out].chunks_exact_mut(fan_out) {
        for (zj, bj) in row.iter_mut().zip(b) {
            *zj += bj;
        }
    }
    z
}

/// Network output at every point, without derivatives or a trace.
pub fn eval_values(arch: &Architecture, params: &[f64], points: &[(f64, f64)]) -> Vec<f64> {
    assert_eq!(params.len(), arch.param_count(), "parameter count");
    let n = points.len();
    let mut s = input_block(arch, points, 1);
    let layers: Vec<_> = arch.layers().collect();
    for (l, &(fan_in, fan_out, offset)) in layers.iter().enumerate() {
        let mut z = affine(params, fan_in, fan_out, offset, &s, n, n);
        if l + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = v.tanh());
        }
        s = z;
    }
    s
}

impl JetTrace {
    /// Forward pass over `points`. With `derivatives = false` only `u` is
    /// produced and the derivative fields of the jet stay empty.
    pub fn forward(
        arch: &Architecture,
        params: &[f64],
        points: &[(f64, f64)],
        derivatives: bool,
    ) -> Self {
        assert_eq!(params.len(), arch.param_count(), "parameter count");
        let n = points.len();
        let streams = if derivatives { 4 } else { 1 };
        let rows = streams * n;
        let layers: Vec<_> = arch.layers().collect();
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len() - 1);
        let mut s = input_block(arch, points, streams);

        for (l, &(fan_in, fan_out, offset)) in layers.iter().enumerate() {
            let z = affine(params, fan_in, fan_out, offset, &s, rows, n);
            inputs.push(s);
            if l + 1 == layers.len() {
                s = z;
                break;
            }
            let m = n * fan_out;
            let mut h = vec![0.0; rows * fan_out];
            if streams == 1 {
                for (hv, zv) in h.iter_mut().zip(&z) {
                    *hv = zv.tanh();
                }
            } else {
                let (h0, rest) = h.split_at_mut(m);
                let (h1, rest) = rest.split_at_mut(m);
                let (h2, h3) = rest.split_at_mut(m);
                for i in 0..m {
                    let a = z[i].tanh();
                    let da = 1.0 - a * a;
                    let dda = -2.0 * a * da;
                    let (zt, zx, zxx) = (z[m + i], z[2 * m + i], z[3 * m + i]);
                    h0[i] = a;
                    h1[i] = da * zt;
                    h2[i] = da * zx;
                    h3[i] = dda * zx * zx + da * zxx;
                }
            }
            pre.push(z);
            s = h;
        }

        let mut blocks = s.chunks_exact(n.max(1)).map(<[f64]>::to_vec);
        let jet = if n == 0 {
            Jet::default()
        } else if derivatives {
            Jet {
                u: blocks.next().unwrap(),
                u_t: blocks.next().unwrap(),
                u_x: blocks.next().unwrap(),
                u_xx: blocks.next().unwrap(),
            }
        } else {
            Jet {
                u: blocks.next().unwrap(),
                ..Jet::default()
            }
        };
        Self {
            n,
            streams,
            inputs,
            pre,
            jet,
        }
    }

    pub fn jet(&self) -> &Jet {
        &self.jet
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Adds d(loss)/d(params) into `grad` given the loss sensitivities to the
    /// traced jet.
    pub fn backward(
        &self,
        arch: &Architecture,
        params: &[f64],
        adj: &JetAdjoint<'_>,
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), arch.param_count(), "gradient length");
        let n = self.n;
        if n == 0 {
            return;
        }
        let rows = self.streams * n;
        let mut az = vec![0.0; rows];
        az[..n].copy_from_slice(adj.u);
        if self.streams == 4 {
            for (k, src) in [adj.u_t, adj.u_x, adj.u_xx].into_iter().enumerate() {
                if !src.is_empty() {
                    az[(k + 1) * n..(k + 2) * n].copy_from_slice(src);
                }
            }
        }

        let layers: Vec<_> = arch.layers().collect();
        for l in (0..layers.len()).rev() {
            let (fan_in, fan_out, offset) = layers[l];
            let s = &self.inputs[l];
            let nw = fan_in * fan_out;
            let (gw, gb) = grad[offset..offset + nw + fan_out].split_at_mut(nw);
            gemm(
                fan_in,
                rows,
                fan_out,
                s,
                (1, fan_in),
                &az,
                (fan_out, 1),
                1.0,
                gw,
                fan_out,
            );
            for row in az[..n * fan_out].chunks_exact(fan_out) {
                for (g, a) in gb.iter_mut().zip(row) {
                    *g += a;
                }
            }
            if l == 0 {
                break;
            }

            let w = &params[offset..offset + nw];
            let mut as_ = vec![0.0; rows * fan_in];
            gemm(
                rows,
                fan_out,
                fan_in,
                &az,
                (fan_out, 1),
                w,
                (1, fan_out),
                0.0,
                &mut as_,
                fan_in,
            );

            // Adjoint of the tanh layer feeding this one.
            let m = n * fan_in;
            let a_vals = &s[..m];
            let mut next = vec![0.0; rows * fan_in];
            if self.streams == 1 {
                for i in 0..m {
                    let a = a_vals[i];
                    next[i] = as_[i] * (1.0 - a * a);
                }
            } else {
                let z = &self.pre[l - 1];
                for i in 0..m {
                    let a = a_vals[i];
                    let da = 1.0 - a * a;
                    let dda = -2.0 * a * da;
                    let (zt, zx, zxx) = (z[m + i], z[2 * m + i], z[3 * m + i]);
                    let (gh, ght, ghx, ghxx) = (as_[i], as_[m + i], as_[2 * m + i], as_[3 * m + i]);

                    let g_dda = ghxx * zx * zx;
                    let g_da = ght * zt + ghx * zx + ghxx * zxx + g_dda * (-2.0 * a);
                    let g_a = gh + g_dda * (-2.0 * da) + g_da * (-2.0 * a);

                    next[i] = g_a * da;
                    next[m + i] = ght * da;
                    next[2 * m + i] = ghx * da + ghxx * dda * 2.0 * zx;
                    next[3 * m + i] = ghxx * da;
                }
            }
            az = next;
        }
    }
}
