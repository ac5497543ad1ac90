//! Forward and backward kernels for the layer types the encoder-decoders use.
//!
//! Convolutions are stride 1 with zero "same" padding and weights laid out as
//! `[cout][cin][k][k]`. Inner loops run over a full image row so they
//! vectorize; reductions go through fixed-order row accumulators so results
//! are bitwise reproducible.

use rand::RngCore;

use super::tensor::{Real, Tensor};

pub fn conv2d<F: Real>(input: &Tensor<F>, weight: &[F], bias: Option<&[F]>, cout: usize, k: usize) -> Tensor<F> {
    assert!(k % 2 == 1, "odd kernel");
    assert_eq!(weight.len(), cout * input.c * k * k, "conv weight shape");
    let padded = input.padded(k / 2);
    conv_padded(&padded, input.h, input.w, weight, bias, cout, k)
}

fn conv_padded<F: Real>(
    p: &Tensor<F>,
    h: usize,
    w: usize,
    weight: &[F],
    bias: Option<&[F]>,
    cout: usize,
    k: usize,
) -> Tensor<F> {
    // Outputs are computed on the padded row pitch so each (cout, cin) pair
    // is one long contiguous loop regardless of image width; the `k - 1`
    // wrap-around columns per row are discarded when compacting.
    let wp = p.w;
    let len = (h - 1) * wp + w;
    let mut wide = vec![F::zero(); cout * len];
    let blocked = if k == 3 { cout / 4 * 4 } else { 0 };
    for co in (0..blocked).step_by(4) {
        conv3_block4(p, len, weight, co, &mut wide[co * len..(co + 4) * len]);
    }
    let kk = k * k;
    let cin = p.c;
    for co in blocked..cout {
        let o = &mut wide[co * len..(co + 1) * len];
        for ci in 0..cin {
            let pl = p.plane(ci);
            let wk = &weight[(co * cin + ci) * kk..(co * cin + ci + 1) * kk];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let off = ky * wp + kx;
                    let src = &pl[off..off + len];
                    for i in 0..len {
                        o[i] += wv * src[i];
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros(cout, h, w);
    for co in 0..cout {
        let b = bias.map_or(F::zero(), |b| b[co]);
        let src = &wide[co * len..(co + 1) * len];
        let dst = out.plane_mut(co);
        for y in 0..h {
            let (d, s) = (&mut dst[y * w..(y + 1) * w], &src[y * wp..y * wp + w]);
            for x in 0..w {
                d[x] = b + s[x];
            }
        }
    }
    out
}

/// 3x3 conv into wide rows for output channels `co..co + 4`, sharing each
/// input load across the four outputs.
fn conv3_block4<F: Real>(p: &Tensor<F>, len: usize, weight: &[F], co: usize, block: &mut [F]) {
    let cin = p.c;
    let wp = p.w;
    let (o0, rest) = block.split_at_mut(len);
    let (o1, rest) = rest.split_at_mut(len);
    let (o2, o3) = rest.split_at_mut(len);
    for ci in 0..cin {
        let pl = p.plane(ci);
        let wk = |j: usize| -> [F; 9] {
            let s = &weight[((co + j) * cin + ci) * 9..((co + j) * cin + ci + 1) * 9];
            [s[0], s[1], s[2], s[3], s[4], s[5], s[6], s[7], s[8]]
        };
        let (k0, k1, k2, k3) = (wk(0), wk(1), wk(2), wk(3));
        let tap = |ky: usize, kx: usize| &pl[ky * wp + kx..ky * wp + kx + len];
        let taps = [
            tap(0, 0),
            tap(0, 1),
            tap(0, 2),
            tap(1, 0),
            tap(1, 1),
            tap(1, 2),
            tap(2, 0),
            tap(2, 1),
            tap(2, 2),
        ];
        for i in 0..len {
            let v = [
                taps[0][i], taps[1][i], taps[2][i], taps[3][i], taps[4][i], taps[5][i], taps[6][i], taps[7][i],
                taps[8][i],
            ];
            let dot = |kw: &[F; 9]| {
                kw[0] * v[0]
                    + kw[1] * v[1]
                    + kw[2] * v[2]
                    + kw[3] * v[3]
                    + kw[4] * v[4]
                    + kw[5] * v[5]
                    + kw[6] * v[6]
                    + kw[7] * v[7]
                    + kw[8] * v[8]
            };
            o0[i] += dot(&k0);
            o1[i] += dot(&k1);
            o2[i] += dot(&k2);
            o3[i] += dot(&k3);
        }
    }
}

/// Dot product with eight fixed-order partial sums.
fn dot_lanes<F: Real>(a: &[F], b: &[F]) -> F {
    const L: usize = 8;
    let n = a.len().min(b.len());
    let mut acc = [F::zero(); L];
    let chunks = n / L;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * L..c * L + L], &b[c * L..c * L + L]);
        for l in 0..L {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * L..n {
        tail += a[i] * b[i];
    }
    acc.iter().copied().fold(F::zero(), |s, v| s + v) + tail
}

/// Accumulates weight and bias gradients into `gw`/`gb` and returns the
/// gradient with respect to the input when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Real>(
    input: &Tensor<F>,
    weight: &[F],
    cout: usize,
    k: usize,
    grad_out: &Tensor<F>,
    gw: &mut [F],
    gb: Option<&mut [F]>,
    need_input: bool,
) -> Option<Tensor<F>> {
    let (cin, h, w) = (input.c, input.h, input.w);
    let pad = k / 2;
    let p = input.padded(pad);
    let wp = p.w;
    let kk = k * k;

    // Output gradient on the padded row pitch with zeroed wrap-around
    // columns, so every tap is a single contiguous dot product.
    let len = (h - 1) * wp + w;
    let mut gwide = vec![F::zero(); len];
    for co in 0..cout {
        let g = grad_out.plane(co);
        for y in 0..h {
            gwide[y * wp..y * wp + w].copy_from_slice(&g[y * w..(y + 1) * w]);
        }
        for ci in 0..cin {
            let pl = p.plane(ci);
            let base = (co * cin + ci) * kk;
            for ky in 0..k {
                for kx in 0..k {
                    let off = ky * wp + kx;
                    gw[base + ky * k + kx] += dot_lanes(&gwide, &pl[off..off + len]);
                }
            }
        }
    }
    if let Some(gb) = gb {
        for co in 0..cout {
            gb[co] += grad_out.plane(co).iter().copied().sum::<F>();
        }
    }

    if !need_input {
        return None;
    }
    // Input gradient is a correlation of the padded output gradient with the
    // spatially flipped, channel-transposed kernel.
    let mut flipped = vec![F::zero(); weight.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..kk {
                flipped[(ci * cout + co) * kk + (kk - 1 - t)] = weight[(co * cin + ci) * kk + t];
            }
        }
    }
    let gp = grad_out.padded(pad);
    Some(conv_padded(&gp, h, w, &flipped, None, cin, k))
}

pub fn avg_pool2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "pool needs even dims");
    let (h2, w2) = (x.h / 2, x.w / 2);
    let quarter = F::of(0.25);
    let mut out = Tensor::zeros(x.c, h2, w2);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h2 {
            let r0 = &src[2 * y * x.w..(2 * y + 1) * x.w];
            let r1 = &src[(2 * y + 1) * x.w..(2 * y + 2) * x.w];
            for xx in 0..w2 {
                dst[y * w2 + xx] = quarter * (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Real>(g: &Tensor<F>) -> Tensor<F> {
    let quarter = F::of(0.25);
    let (h, w) = (g.h * 2, g.w * 2);
    let mut out = Tensor::zeros(g.c, h, w);
    for c in 0..g.c {
        let src = g.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = quarter * src[(y / 2) * g.w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<F: Real>(g: &Tensor<F>) -> Tensor<F> {
    let (h2, w2) = (g.h / 2, g.w / 2);
    let mut out = Tensor::zeros(g.c, h2, w2);
    for c in 0..g.c {
        let src = g.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h2 {
            let r0 = &src[2 * y * g.w..(2 * y + 1) * g.w];
            let r1 = &src[(2 * y + 1) * g.w..(2 * y + 2) * g.w];
            for x in 0..w2 {
                dst[y * w2 + x] = r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1];
            }
        }
    }
    out
}

pub fn elu_inplace<F: Real>(x: &mut Tensor<F>) {
    for v in &mut x.data {
        if *v <= F::zero() {
            *v = v.exp_m1();
        }
    }
}

/// Gradient of ELU expressed through its output (`f' = f + 1` on the
/// negative side).
pub fn elu_backward_inplace<F: Real>(g: &mut Tensor<F>, out: &Tensor<F>) {
    for (gv, &o) in g.data.iter_mut().zip(&out.data) {
        if o <= F::zero() {
            *gv *= o + F::one();
        }
    }
}

pub fn sigmoid_inplace<F: Real>(x: &mut Tensor<F>) {
    for v in &mut x.data {
        *v = F::one() / (F::one() + (-*v).exp());
    }
}

pub fn sigmoid_backward_inplace<F: Real>(g: &mut Tensor<F>, out: &Tensor<F>) {
    for (gv, &s) in g.data.iter_mut().zip(&out.data) {
        *gv *= s * (F::one() - s);
    }
}

/// Inverted-dropout multipliers: `0` with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<F: Real>(len: usize, rate: f64, rng: &mut impl RngCore) -> Vec<F> {
    let keep = F::of(1.0 / (1.0 - rate));
    let threshold = (rate * 4_294_967_296.0) as u64;
    (0..len)
        .map(|_| {
            if (rng.next_u32() as u64) < threshold {
                F::zero()
            } else {
                keep
            }
        })
        .collect()
}

pub fn mul_inplace<F: Real>(x: &mut Tensor<F>, mask: &[F]) {
    for (v, &m) in x.data.iter_mut().zip(mask) {
        *v *= m;
    }
}
