//! Kernels and graph ops checked against naive reference implementations
//! and central finite differences.

use filmseg::tensor::kernels::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    maxpool2d_forward, ConvGeometry, ConvTransposeGeometry,
};
use filmseg::tensor::grad_check;
use filmseg::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), random_vec(rng, shape.iter().product())).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct six-loop cross-correlation with zero padding.
fn naive_conv(g: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    for n in 0..g.batch {
        for co in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = if b.is_empty() { 0.0 } else { b[co] };
                    for ci in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                let xi = ((n * g.in_channels + ci) * g.height + iy as usize) * g.width + ix as usize;
                                let wi = ((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * g.out_channels + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn random_geometry(rng: &mut ChaCha8Rng) -> ConvGeometry {
    let kernel_h = rng.random_range(1..=3);
    let kernel_w = rng.random_range(1..=3);
    let padding = rng.random_range(0..=2);
    ConvGeometry {
        batch: rng.random_range(1..=2),
        in_channels: rng.random_range(1..=3),
        height: rng.random_range(kernel_h.max(1)..=7),
        width: rng.random_range(kernel_w.max(1)..=7),
        out_channels: rng.random_range(1..=3),
        kernel_h,
        kernel_w,
        padding,
        stride: rng.random_range(1..=2),
    }
}

#[test]
fn conv2d_matches_six_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let g = random_geometry(&mut rng);
        let x = random_vec(&mut rng, g.batch * g.in_channels * g.height * g.width);
        let w = random_vec(&mut rng, g.out_channels * g.in_channels * g.kernel_h * g.kernel_w);
        let b = random_vec(&mut rng, g.out_channels);
        let fast = conv2d_forward(&g, &x, &w, &b);
        assert!(max_abs_diff(&fast, &naive_conv(&g, &x, &w, &b)) <= 1e-12, "{g:?}");
    }
}

#[test]
fn conv2d_backward_is_the_adjoint() {
    // <conv(x), y> = <x, conv^T(y)> and the weight gradient is linear in x
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let g = random_geometry(&mut rng);
        let x = random_vec(&mut rng, g.batch * g.in_channels * g.height * g.width);
        let w = random_vec(&mut rng, g.out_channels * g.in_channels * g.kernel_h * g.kernel_w);
        let y = random_vec(&mut rng, g.output_shape().iter().product());
        let fx = conv2d_forward(&g, &x, &w, &[]);
        let (gx, gw, gb) = conv2d_backward(&g, &x, &w, &y);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_x).abs() < 1e-10, "{g:?}");
        assert!((lhs - rhs_w).abs() < 1e-10, "{g:?}");
        let plane = g.out_height() * g.out_width();
        for (co, total) in gb.iter().enumerate() {
            let expected: f64 = (0..g.batch)
                .map(|n| y[(n * g.out_channels + co) * plane..][..plane].iter().sum::<f64>())
                .sum();
            assert!((total - expected).abs() < 1e-12);
        }
    }
}

/// Transposed convolution as zero-stuffing followed by a full convolution
/// with the spatially flipped, channel-swapped kernel.
fn naive_conv_transpose(g: &ConvTransposeGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (kh, kw, s) = (g.kernel_h, g.kernel_w, g.stride);
    let (sh, sw) = ((g.height - 1) * s + 1, (g.width - 1) * s + 1);
    let mut stuffed = vec![0.0; g.batch * g.in_channels * sh * sw];
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            for y in 0..g.height {
                for xx in 0..g.width {
                    stuffed[((n * g.in_channels + c) * sh + y * s) * sw + xx * s] =
                        x[((n * g.in_channels + c) * g.height + y) * g.width + xx];
                }
            }
        }
    }
    let mut flipped = vec![0.0; g.out_channels * g.in_channels * kh * kw];
    for ci in 0..g.in_channels {
        for co in 0..g.out_channels {
            for ky in 0..kh {
                for kx in 0..kw {
                    flipped[((co * g.in_channels + ci) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                        w[((ci * g.out_channels + co) * kh + ky) * kw + kx];
                }
            }
        }
    }
    assert_eq!(kh, kw, "oracle pads symmetrically");
    let cg = ConvGeometry {
        batch: g.batch,
        in_channels: g.in_channels,
        height: sh,
        width: sw,
        out_channels: g.out_channels,
        kernel_h: kh,
        kernel_w: kw,
        padding: kh - 1,
        stride: 1,
    };
    naive_conv(&cg, &stuffed, &flipped, b)
}

#[test]
fn conv_transpose_matches_zero_stuffing_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let k = rng.random_range(1..=3);
        let g = ConvTransposeGeometry {
            batch: rng.random_range(1..=2),
            in_channels: rng.random_range(1..=3),
            height: rng.random_range(1..=5),
            width: rng.random_range(1..=5),
            out_channels: rng.random_range(1..=3),
            kernel_h: k,
            kernel_w: k,
            stride: rng.random_range(1..=3),
        };
        let x = random_vec(&mut rng, g.batch * g.in_channels * g.height * g.width);
        let w = random_vec(&mut rng, g.in_channels * g.out_channels * k * k);
        let b = random_vec(&mut rng, g.out_channels);
        let fast = conv_transpose2d_forward(&g, &x, &w, &b);
        assert!(max_abs_diff(&fast, &naive_conv_transpose(&g, &x, &w, &b)) <= 1e-12, "{g:?}");
    }
}

#[test]
fn conv_transpose_is_adjoint_of_strided_conv() {
    // with the same weight tensor read as [cin_t, cout_t] = [cout_c, cin_c]
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (n, a, c) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let t = ConvTransposeGeometry {
            batch: n,
            in_channels: a,
            height: h,
            width: w,
            out_channels: c,
            kernel_h: 2,
            kernel_w: 2,
            stride: 2,
        };
        let cg = ConvGeometry {
            batch: n,
            in_channels: c,
            height: t.out_height(),
            width: t.out_width(),
            out_channels: a,
            kernel_h: 2,
            kernel_w: 2,
            padding: 0,
            stride: 2,
        };
        let weight = random_vec(&mut rng, a * c * 4);
        let x = random_vec(&mut rng, n * a * h * w);
        let y = random_vec(&mut rng, n * c * t.out_height() * t.out_width());
        let tx = conv_transpose2d_forward(&t, &x, &weight, &[]);
        let cy = conv2d_forward(&cg, &y, &weight, &[]);
        let lhs: f64 = tx.iter().zip(&y).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.iter().zip(&cy).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let (gx, gw, _) = conv_transpose2d_backward(&t, &x, &weight, &y);
        assert!(max_abs_diff(&gx, &cy) < 1e-12);
        let rhs_w: f64 = weight.iter().zip(&gw).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }
}

#[test]
fn maxpool_matches_window_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let k = rng.random_range(1..=3);
        let shape = [rng.random_range(1..=2), rng.random_range(1..=3), k * rng.random_range(1..=4), k * rng.random_range(1..=4)];
        let [n, c, h, w] = shape;
        // coarse values so ties occur
        let x: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(0..4) as f64).collect();
        let (out, argmax) = maxpool2d_forward(shape, &x, k);
        for nc in 0..n * c {
            for oy in 0..h / k {
                for ox in 0..w / k {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = nc * h * w + (oy * k + dy) * w + ox * k + dx;
                            if x[i] > best {
                                best = x[i];
                                at = i;
                            }
                        }
                    }
                    let o = (nc * (h / k) + oy) * (w / k) + ox;
                    assert_eq!(out[o], best);
                    assert_eq!(argmax[o], at, "first maximum wins ties");
                }
            }
        }
    }
}

#[test]
fn linear_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_tensor(&mut rng, &[3, 5]);
    let w = random_tensor(&mut rng, &[4, 5]);
    let b = random_tensor(&mut rng, &[4]);
    let mut g = Graph::new();
    let (vx, vw, vb) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(vx, vw, vb).unwrap();
    for i in 0..3 {
        for o in 0..4 {
            let mut dot = b.data()[o];
            for k in 0..5 {
                dot += x.data()[i * 5 + k] * w.data()[o * 5 + k];
            }
            assert!((g.value(y).data()[i * 4 + o] - dot).abs() < 1e-14);
        }
    }
}

#[test]
fn per_channel_affine_example() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let gamma = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.25]).unwrap());
    let beta = g.constant(Tensor::new(vec![1, 2], vec![0.1, 0.0]).unwrap());
    let y = g.per_channel_affine(x, gamma, beta).unwrap();
    let expected = [0.6, 1.1, 0.75, 1.0];
    assert!(max_abs_diff(g.value(y).data(), &expected) < 1e-15);
}

/// Weighted sum against a fixed random tensor so every output coordinate
/// contributes a distinct gradient.
fn probe(g: &mut Graph, y: filmseg::Var, seed: u64) -> filmseg::Var {
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = g.constant(random_tensor(&mut rng, &shape));
    let prod = g.mul(y, weights).unwrap();
    g.sum(prod)
}

#[test]
fn per_operator_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let checks: Vec<(&str, f64)> = vec![
        (
            "conv2d",
            grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                    Ok(probe(g, y, 1))
                },
                &[random_tensor(&mut rng, &[2, 2, 5, 5]), random_tensor(&mut rng, &[3, 2, 3, 3]), random_tensor(&mut rng, &[3])],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "conv2d stride 2",
            grad_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2], 1, 2)?;
                    Ok(probe(g, y, 2))
                },
                &[random_tensor(&mut rng, &[1, 2, 6, 5]), random_tensor(&mut rng, &[2, 2, 3, 3]), random_tensor(&mut rng, &[2])],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "conv_transpose2d",
            grad_check(
                |g, v| {
                    let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
                    Ok(probe(g, y, 3))
                },
                &[random_tensor(&mut rng, &[2, 3, 3, 3]), random_tensor(&mut rng, &[3, 2, 2, 2]), random_tensor(&mut rng, &[2])],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "maxpool2d",
            grad_check(
                |g, v| {
                    let y = g.maxpool2d(v[0], 2)?;
                    Ok(probe(g, y, 4))
                },
                // distinct values keep the argmax away from ties
                &[Tensor::new(vec![1, 2, 4, 4], (0..32).map(|i| ((i * 13) % 32) as f64 * 0.1).collect()).unwrap()],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "per_channel_affine",
            grad_check(
                |g, v| {
                    let y = g.per_channel_affine(v[0], v[1], v[2])?;
                    Ok(probe(g, y, 5))
                },
                &[random_tensor(&mut rng, &[2, 3, 2, 2]), random_tensor(&mut rng, &[2, 3]), random_tensor(&mut rng, &[2, 3])],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "linear",
            grad_check(
                |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    Ok(probe(g, y, 6))
                },
                &[random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[2, 4]), random_tensor(&mut rng, &[2])],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "relu",
            grad_check(
                |g, v| {
                    let y = g.relu(v[0]);
                    Ok(probe(g, y, 7))
                },
                // keep away from the kink at 0
                &[Tensor::new(vec![6], vec![-0.9, -0.4, -0.1, 0.2, 0.5, 1.3]).unwrap()],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "sigmoid",
            grad_check(
                |g, v| {
                    let y = g.sigmoid(v[0]);
                    Ok(probe(g, y, 8))
                },
                &[random_tensor(&mut rng, &[2, 5])],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "concat_channels",
            grad_check(
                |g, v| {
                    let y = g.concat_channels(v[0], v[1])?;
                    Ok(probe(g, y, 9))
                },
                &[random_tensor(&mut rng, &[2, 1, 2, 2]), random_tensor(&mut rng, &[2, 2, 2, 2])],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
        (
            "slice_columns",
            grad_check(
                |g, v| {
                    let y = g.slice_columns(v[0], 1, 2)?;
                    Ok(probe(g, y, 10))
                },
                &[random_tensor(&mut rng, &[2, 4])],
                h,
            )
            .unwrap()
            .max_rel_error(),
        ),
    ];
    for (name, err) in &checks {
        assert!(*err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn sum_of_sigmoid_gradient_is_tight() {
    let x = Tensor::new(vec![5], vec![-2.0, -0.5, 0.0, 0.7, 3.0]).unwrap();
    let check = grad_check(
        |g, v| {
            let s = g.sigmoid(v[0]);
            Ok(g.sum(s))
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(check.max_rel_error() < 1e-8, "{check:?}");
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let doubled = g.add(x, x).unwrap();
    let total = g.sum(doubled);
    g.backward(total).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let total = g.sum(sq);
    g.backward(total).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let c = g.constant(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
    let p = g.mul(x, c).unwrap();
    let total = g.sum(p);
    g.backward(total).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(g.grad(c).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::ones(&[3]));
    assert!(g.backward(x).is_err());
}
