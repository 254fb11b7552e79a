//! f32 building blocks: 3×3 convolutions, squeeze, actnorm and the
//! checkerboard affine coupling. Activations are `[c, h, w]` row-major.

/// Output of the coupling conditioner, kept for backprop.
pub(super) struct CondCache {
    pub hidden: Vec<f32>,
    pub raw: Vec<f32>,
    pub shift: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
    pub fn squeezed(&self) -> Shape {
        Shape {
            c: self.c * 4,
            h: self.h / 2,
            w: self.w / 2,
        }
    }
}

/// Zero-padded 3×3 convolution, weights `[out, in, 3, 3]`.
pub(super) fn conv3(x: &[f32], s: Shape, w: &[f32], b: &[f32], cout: usize) -> Vec<f32> {
    let (h, wd, p) = (s.h, s.w, s.plane());
    let mut out = vec![0f32; cout * p];
    for o in 0..cout {
        let dst = &mut out[o * p..(o + 1) * p];
        dst.fill(b[o]);
        for c in 0..s.c {
            let src = &x[c * p..(c + 1) * p];
            let k = &w[(o * s.c + c) * 9..(o * s.c + c) * 9 + 9];
            for di in 0..3 {
                for dj in 0..3 {
                    let kv = k[di * 3 + dj];
                    if kv == 0.0 {
                        continue;
                    }
                    let (i0, i1) = (1usize.saturating_sub(di), (h + 1 - di).min(h));
                    let (j0, j1) = (1usize.saturating_sub(dj), (wd + 1 - dj).min(wd));
                    for i in i0..i1 {
                        let si = (i + di - 1) * wd;
                        let row = &mut dst[i * wd..(i + 1) * wd];
                        for j in j0..j1 {
                            row[j] += kv * src[si + j + dj - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Transpose of [`conv3`]: returns the input cotangent and accumulates the
/// weight and bias cotangents.
pub(super) fn conv3_back(
    x: &[f32],
    s: Shape,
    w: &[f32],
    gout: &[f32],
    cout: usize,
    gw: Option<(&mut [f32], &mut [f32])>,
) -> Vec<f32> {
    let (h, wd, p) = (s.h, s.w, s.plane());
    let mut gx = vec![0f32; s.len()];
    let (mut gw, mut gb) = match gw {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    for o in 0..cout {
        let go = &gout[o * p..(o + 1) * p];
        if let Some(gb) = gb.as_deref_mut() {
            gb[o] += go.iter().map(|v| *v as f64).sum::<f64>() as f32;
        }
        for c in 0..s.c {
            let src = &x[c * p..(c + 1) * p];
            let base = (o * s.c + c) * 9;
            for di in 0..3 {
                for dj in 0..3 {
                    let kv = w[base + di * 3 + dj];
                    let (i0, i1) = (1usize.saturating_sub(di), (h + 1 - di).min(h));
                    let (j0, j1) = (1usize.saturating_sub(dj), (wd + 1 - dj).min(wd));
                    let mut acc = 0f64;
                    let gxc = &mut gx[c * p..(c + 1) * p];
                    for i in i0..i1 {
                        let si = (i + di - 1) * wd;
                        for j in j0..j1 {
                            let g = go[i * wd + j];
                            gxc[si + j + dj - 1] += kv * g;
                            acc += (g * src[si + j + dj - 1]) as f64;
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[base + di * 3 + dj] += acc as f32;
                    }
                }
            }
        }
    }
    gx
}

/// `[c, h, w] -> [4c, h/2, w/2]`; sub-pixel `(di, dj)` goes to channel `4c + 2di + dj`.
pub(super) fn squeeze(x: &[f32], s: Shape) -> Vec<f32> {
    let t = s.squeezed();
    let mut out = vec![0f32; x.len()];
    for c in 0..s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                let oc = 4 * c + 2 * (i % 2) + j % 2;
                out[(oc * t.h + i / 2) * t.w + j / 2] = x[(c * s.h + i) * s.w + j];
            }
        }
    }
    out
}

/// Inverse of [`squeeze`]; `s` is the unsqueezed shape.
pub(super) fn unsqueeze(y: &[f32], s: Shape) -> Vec<f32> {
    let t = s.squeezed();
    let mut out = vec![0f32; y.len()];
    for c in 0..s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                let oc = 4 * c + 2 * (i % 2) + j % 2;
                out[(c * s.h + i) * s.w + j] = y[(oc * t.h + i / 2) * t.w + j / 2];
            }
        }
    }
    out
}

/// Fixed channel shuffle: reverse channel order (an involution).
pub(super) fn reverse_channels(x: &[f32], s: Shape) -> Vec<f32> {
    let p = s.plane();
    let mut out = Vec::with_capacity(x.len());
    for c in (0..s.c).rev() {
        out.extend_from_slice(&x[c * p..(c + 1) * p]);
    }
    out
}

/// True where the coupling conditions on the input (kept unchanged).
#[inline]
pub(super) fn kept(i: usize, j: usize, parity: usize) -> bool {
    (i + j + parity) % 2 == 0
}

pub(super) fn checkerboard(s: Shape, parity: usize) -> Vec<f32> {
    let mut m = vec![0f32; s.len()];
    for c in 0..s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                if kept(i, j, parity) {
                    m[(c * s.h + i) * s.w + j] = 1.0;
                }
            }
        }
    }
    m
}

/// Scale squashing: `s = 3 tanh(raw / 3)`, so `exp(s)` lies in `[e⁻³, e³]`.
#[inline]
pub(super) fn squash(raw: f32) -> f32 {
    3.0 * (raw / 3.0).tanh()
}

#[inline]
pub(super) fn squash_grad(raw: f32) -> f32 {
    let t = (raw / 3.0).tanh();
    1.0 - t * t
}
