//! Shared fixtures: random tensors, the gradient-check case list and a
//! direct-loop convolution.
#![allow(dead_code)]

use cbamnet::cbam::{
    cbam_apply, channel_attention, spatial_attention, Cbam, ChannelAttention, SpatialAttention,
};
use cbamnet::gradcheck::{check_against_reference, finite_difference_check};
use cbamnet::nn::{
    batch_norm_train, channel_max, channel_mean, conv2d, cross_entropy, global_avg_pool,
    global_max_pool, linear, max_pool2d, one_hot, softmax, Padding, BN_EPSILON,
};
use cbamnet::tensor::{concat_channels, matmul};
use cbamnet::{Element, Result, Shape, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal values times `scale`.
pub fn normal<T: Element>(rng: &mut ChaCha8Rng, shape: [usize; 4], scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of_f64((scale * z) as f32 as f64)
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Shuffled odd multiples of `0.005` centered on zero: values stay within
/// about `[-1.5, 1.5]` and no two values, nor a value and zero, are close
/// enough for a difference step to cross a ReLU or max kink.
pub fn separated<T: Element>(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<T> {
    const STEP: f64 = 0.005;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (2 * i + 1) as f64 * STEP - n as f64 * STEP)
        .collect();
    v.shuffle(rng);
    Tensor::new(
        shape,
        v.into_iter().map(|v| T::of_f64(v as f32 as f64)).collect(),
    )
    .unwrap()
}

fn param<T: Element>(name: &str, t: Tensor<T>) -> Tensor<T> {
    Tensor::parameter(name, t.shape(), t.to_vec()).unwrap()
}

/// Random shape no larger than `(2, 4, 6, 6)` with even spatial extents.
pub fn small_shape(rng: &mut ChaCha8Rng) -> [usize; 4] {
    let even = [2, 4, 6];
    [
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        *even.choose(rng).unwrap(),
        *even.choose(rng).unwrap(),
    ]
}

pub type Op<T> = Box<dyn Fn(&Tensor<T>) -> Result<Tensor<T>>>;

/// Named operations with their inputs. Every value drawn is representable in
/// `f32`, so the `f32` and `f64` lists for one seed hold identical numbers.
pub fn gradient_cases<T: Element>(seed: u64) -> Result<Vec<(String, Op<T>, Tensor<T>)>> {
    let mut r = rng(seed);
    let mut out: Vec<(String, Op<T>, Tensor<T>)> = Vec::new();
    let shape = small_shape(&mut r);
    let [n, c, h, w] = shape;
    let x = normal::<T>(&mut r, shape, 1.0);
    let xs = separated::<T>(&mut r, shape);

    for k in [1usize, 3, 5] {
        let co = r.random_range(1..=3);
        let wt = normal::<T>(&mut r, [co, c, k, k], 0.5);
        let b = normal::<T>(&mut r, [co, 1, 1, 1], 0.5);
        let (w1, b1) = (wt.clone(), b.clone());
        out.push((
            format!("conv2d k{k} same dx"),
            Box::new(move |x| conv2d(x, &w1, Some(&b1), 1, Padding::Same)),
            x.clone(),
        ));
        let (x1, b1) = (x.clone(), b.clone());
        out.push((
            format!("conv2d k{k} same dw"),
            Box::new(move |w| conv2d(&x1, w, Some(&b1), 1, Padding::Same)),
            wt.clone(),
        ));
        let (x1, w1) = (x.clone(), wt.clone());
        out.push((
            format!("conv2d k{k} same db"),
            Box::new(move |b| conv2d(&x1, &w1, Some(b), 1, Padding::Same)),
            b.clone(),
        ));
        if k <= h.min(w) {
            out.push((
                format!("conv2d k{k} valid dx"),
                Box::new(move |x| conv2d(x, &wt, None, 1, Padding::Valid)),
                x.clone(),
            ));
        }
    }

    let gamma = normal::<T>(&mut r, [1, c, 1, 1], 1.0);
    let beta = normal::<T>(&mut r, [1, c, 1, 1], 1.0);
    let (g1, b1) = (gamma.clone(), beta.clone());
    out.push((
        "batchnorm train dx".into(),
        Box::new(move |x| Ok(batch_norm_train(x, &g1, &b1, BN_EPSILON)?.0)),
        x.clone(),
    ));
    let (x1, b1) = (x.clone(), beta.clone());
    out.push((
        "batchnorm train dgamma".into(),
        Box::new(move |g| Ok(batch_norm_train(&x1, g, &b1, BN_EPSILON)?.0)),
        gamma.clone(),
    ));
    let (x1, g1) = (x.clone(), gamma.clone());
    out.push((
        "batchnorm train dbeta".into(),
        Box::new(move |b| Ok(batch_norm_train(&x1, &g1, b, BN_EPSILON)?.0)),
        beta,
    ));

    out.push(("maxpool".into(), Box::new(|x| max_pool2d(x)), xs.clone()));
    out.push((
        "global avg pool".into(),
        Box::new(|x| global_avg_pool(x)),
        x.clone(),
    ));
    out.push((
        "global max pool".into(),
        Box::new(|x| global_max_pool(x)),
        xs.clone(),
    ));
    out.push((
        "channel mean".into(),
        Box::new(|x| channel_mean(x)),
        x.clone(),
    ));
    out.push((
        "channel max".into(),
        Box::new(|x| channel_max(x)),
        xs.clone(),
    ));
    out.push(("relu".into(), Box::new(|x| Ok(x.relu())), xs.clone()));
    out.push(("sigmoid".into(), Box::new(|x| Ok(x.sigmoid())), x.clone()));

    let out_f = r.random_range(1..=4);
    let flat = x.reshape([n, c * h * w, 1, 1])?;
    let dw = normal::<T>(&mut r, [out_f, c * h * w, 1, 1], 0.3);
    let db = normal::<T>(&mut r, [out_f, 1, 1, 1], 0.3);
    let (w1, b1) = (dw.clone(), db.clone());
    out.push((
        "dense dx".into(),
        Box::new(move |x| linear(x, &w1, Some(&b1))),
        flat.clone(),
    ));
    let (x1, b1) = (flat.clone(), db.clone());
    out.push((
        "dense dw".into(),
        Box::new(move |w| linear(&x1, w, Some(&b1))),
        dw.clone(),
    ));
    let (x1, w1) = (flat, dw);
    out.push((
        "dense db".into(),
        Box::new(move |b| linear(&x1, &w1, Some(b))),
        db,
    ));

    let k = r.random_range(2..=4);
    let logits = normal::<T>(&mut r, [n, k, 1, 1], 1.5);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let y = one_hot::<T>(&labels, k)?;
    out.push((
        "softmax cross-entropy".into(),
        Box::new(move |z| cross_entropy(&softmax(z)?, &y)),
        logits.clone(),
    ));
    out.push(("softmax".into(), Box::new(|z| softmax(z)), logits));

    let gate = normal::<T>(&mut r, [n, c, 1, 1], 1.0);
    let x1 = x.clone();
    out.push(("broadcast mul".into(), Box::new(move |g| x1.mul(g)), gate));
    let x1 = x.clone();
    out.push((
        "add sub".into(),
        Box::new(move |a| a.add(&x1)?.sub(&a.mul(a)?)),
        x.clone(),
    ));
    out.push((
        "concat".into(),
        Box::new(|a| concat_channels(&[a.clone(), a.scale(T::of_f64(2.0))])),
        x.clone(),
    ));
    let m1 = normal::<T>(&mut r, [3, 4, 1, 1], 1.0);
    let m2 = normal::<T>(&mut r, [4, 2, 1, 1], 1.0);
    let b1 = m2.clone();
    out.push((
        "matmul lhs".into(),
        Box::new(move |a| matmul(a, &b1)),
        m1.clone(),
    ));
    out.push(("matmul rhs".into(), Box::new(move |b| matmul(&m1, b)), m2));

    // reduction 1 or 2 depending on channel count
    let red = if c % 2 == 0 { 2 } else { 1 };
    let hidden = c / red;
    let ca = ChannelAttention::new(
        param("w1", normal::<T>(&mut r, [hidden, c, 1, 1], 0.8)),
        Some(param("b1", normal::<T>(&mut r, [hidden, 1, 1, 1], 0.3))),
        param("w2", normal::<T>(&mut r, [c, hidden, 1, 1], 0.8)),
        Some(param("b2", normal::<T>(&mut r, [c, 1, 1, 1], 0.3))),
        red,
    )?;
    let sa = SpatialAttention::new(
        param("sw", normal::<T>(&mut r, [1, 2, 7, 7], 0.3)),
        param("sb", normal::<T>(&mut r, [1, 1, 1, 1], 0.3)),
    )?;
    // distinct inputs keep the max branches differentiable
    let ca1 = ca.clone();
    out.push((
        "channel attention dF".into(),
        Box::new(move |f| Ok(channel_attention(&ca1, f)?.1)),
        xs.clone(),
    ));
    let (ca1, xs1) = (ca.clone(), xs.clone());
    out.push((
        "channel attention dw1".into(),
        Box::new(move |w1| {
            let ca = ChannelAttention::new(
                w1.clone(),
                ca1.b1.clone(),
                ca1.w2.clone(),
                ca1.b2.clone(),
                red,
            )?;
            Ok(channel_attention(&ca, &xs1)?.1)
        }),
        ca.w1.clone(),
    ));
    let sa1 = sa.clone();
    out.push((
        "spatial attention dF".into(),
        Box::new(move |f| Ok(spatial_attention(&sa1, f)?.1)),
        xs.clone(),
    ));
    let (bias, xs1) = (sa.bias.clone(), xs.clone());
    out.push((
        "spatial attention dweight".into(),
        Box::new(move |wt| {
            Ok(spatial_attention(&SpatialAttention::new(wt.clone(), bias.clone())?, &xs1)?.1)
        }),
        sa.weight.clone(),
    ));
    let block = Cbam {
        channel: ca,
        spatial: sa,
    };
    out.push((
        "cbam_apply dF".into(),
        Box::new(move |f| cbam_apply(&block, f)),
        xs,
    ));
    Ok(out)
}

/// Central-difference step used by both precisions.
pub const GRADCHECK_EPSILON: f64 = 1e-6;

/// Worst relative error per operation with `f64` gradients and differences.
pub fn double_precision_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    gradient_cases::<f64>(seed)?
        .into_iter()
        .map(|(name, f, x)| Ok((name, finite_difference_check(f, &x, GRADCHECK_EPSILON)?)))
        .collect()
}

/// Worst relative error per operation of `f32` gradients against `f64`
/// differences of the same operation on the same values.
pub fn single_precision_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let single = gradient_cases::<f32>(seed)?;
    let double = gradient_cases::<f64>(seed)?;
    single
        .into_iter()
        .zip(double)
        .map(|((name, f, x), (_, g, _))| {
            Ok((name, check_against_reference(f, g, &x, GRADCHECK_EPSILON)?))
        })
        .collect()
}

/// `(N, C, H, W)` convolution by direct summation, stride 1, zero padding `pad`.
pub fn naive_conv2d(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [co, ci, k, _] = ws;
    assert_eq!(c, ci);
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for i in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y + ky) as isize - pad as isize;
                                let ix = (xx + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[((b * c + i) * h + iy as usize) * wd + ix as usize]
                                    * w[((o * c + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    (out, [n, co, oh, ow])
}

/// Max absolute difference between `conv2d` (f32, same padding) and the
/// direct loop on one random case; kernel size cycles through 3, 5 and 7.
pub fn conv_oracle_case(seed: u64) -> (f64, String) {
    let mut r = rng(seed);
    let k = [3usize, 5, 7][(seed % 3) as usize];
    let xs = [
        r.random_range(1..=2),
        r.random_range(1..=5),
        r.random_range(1..=12),
        r.random_range(1..=12),
    ];
    let co = r.random_range(1..=6);
    let ws = [co, xs[1], k, k];
    let with_bias = r.random_bool(0.5);
    let x = normal::<f32>(&mut r, xs, 1.0);
    let w = normal::<f32>(&mut r, ws, 0.5);
    let b = normal::<f32>(&mut r, [co, 1, 1, 1], 0.5);
    let got = conv2d(&x, &w, with_bias.then_some(&b), 1, Padding::Same).unwrap();
    let to64 = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
    let b64 = to64(&b);
    let (want, shape) = naive_conv2d(
        &to64(&x),
        xs,
        &to64(&w),
        ws,
        with_bias.then_some(&b64[..]),
        k / 2,
    );
    assert_eq!(got.shape(), Shape(shape));
    let err = got
        .data()
        .iter()
        .zip(&want)
        .map(|(&g, &w)| (g as f64 - w).abs())
        .fold(0.0, f64::max);
    (err, format!("x {xs:?} w {ws:?} bias {with_bias}"))
}
