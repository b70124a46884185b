//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates forward values, so it stays independent
//! of the backward rules it verifies.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, PoolKind, Tensor, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check: the worst norm-wise relative error over
/// all inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Some central difference crossed a non-differentiable point (a relu
    /// switched, a max changed winner), so the numeric estimate is invalid.
    pub straddles_kink: bool,
}

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`, with both vectors
/// treated as equal when they are numerically zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Checks `build` against central differences. `build` receives a fresh
/// graph and the input vars and returns an output of any shape; the output
/// is contracted with fixed random weights to form a scalar loss.
pub fn check<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    type Eval = (f64, Vec<Option<Vec<f64>>>, Vec<Var>, u64);
    let forward = |ins: &[Tensor], grads: bool| -> Result<Eval> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let mut wrng = Rng::new(seed ^ 0x5eed);
        let weights = Tensor::uniform(g.shape(out).clone(), 1.0, &mut wrng);
        let w = g.constant(weights);
        let prod = g.mul(out, w)?;
        let loss = g.sum(prod);
        let value = g.value(loss).item()?;
        let grads = if grads { g.backward_full(loss)? } else { Vec::new() };
        Ok((value, grads, vars, g.branch_signature()))
    };
    let (_, grads, vars, base) = forward(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut straddles_kink = false;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads[vars[k].index()].clone().unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        let mut probe: Vec<Tensor> = inputs.to_vec();
        for i in 0..input.len() {
            let orig = input.data()[i];
            probe[k].data_mut()[i] = orig + FD_STEP;
            let (plus, _, _, sig_plus) = forward(&probe, false)?;
            probe[k].data_mut()[i] = orig - FD_STEP;
            let (minus, _, _, sig_minus) = forward(&probe, false)?;
            straddles_kink |= sig_plus != base || sig_minus != base;
            probe[k].data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck {
        max_rel_err: worst,
        straddles_kink,
    })
}

/// Uniform tensor whose entries keep at least `margin` away from zero, so
/// finite differences never straddle a kink at the origin.
pub fn away_from_zero(shape: &[usize], margin: f64, rng: &mut Rng) -> Tensor {
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let m = rng.uniform_range(margin, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Tensor with pairwise-distinct entries spaced at least `gap` apart
/// (randomly permuted), so argmax selections are stable under perturbation.
pub fn distinct(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    rng.shuffle(&mut data);
    for v in &mut data {
        *v += rng.uniform_range(0.0, gap * 0.1);
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Runs `cases` randomized finite-difference checks for every differentiable
/// tensor operator and returns `(operator, worst relative error)`.
pub fn operator_suite(cases: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    type Case = fn(&mut Rng, u64) -> Result<GradCheck>;
    let ops: Vec<(&str, Case)> = vec![
        ("matmul", |r, s| {
            let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            let a = Tensor::uniform([m, k], 1.0, r);
            let b = Tensor::uniform([k, n], 1.0, r);
            check(&[a, b], s, |g, v| g.matmul(v[0], v[1]))
        }),
        ("add", |r, s| {
            let n = dim(r, 1, 6);
            check(
                &[Tensor::uniform([n], 1.0, r), Tensor::uniform([n], 1.0, r)],
                s,
                |g, v| g.add(v[0], v[1]),
            )
        }),
        ("sub", |r, s| {
            let n = dim(r, 1, 6);
            check(
                &[Tensor::uniform([n], 1.0, r), Tensor::uniform([n], 1.0, r)],
                s,
                |g, v| g.sub(v[0], v[1]),
            )
        }),
        ("mul", |r, s| {
            let n = dim(r, 1, 6);
            check(
                &[Tensor::uniform([2, n], 1.0, r), Tensor::uniform([2, n], 1.0, r)],
                s,
                |g, v| g.mul(v[0], v[1]),
            )
        }),
        ("add_bias", |r, s| {
            let (a, b, c) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3));
            let axis = r.below(3);
            let n = [a, b, c][axis];
            check(
                &[Tensor::uniform([a, b, c], 1.0, r), Tensor::uniform([n], 1.0, r)],
                s,
                move |g, v| g.add_bias(v[0], v[1], axis),
            )
        }),
        ("scale_rows", |r, s| {
            let (n, d) = (dim(r, 1, 4), dim(r, 1, 4));
            check(
                &[Tensor::uniform([n, d], 1.0, r), Tensor::uniform([n], 1.0, r)],
                s,
                |g, v| g.scale_rows(v[0], v[1]),
            )
        }),
        ("conv1d", |r, s| {
            let (b, cin, cout, k) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4));
            let stride = dim(r, 1, 2);
            let dilation = dim(r, 1, 2);
            let padding = r.below(3);
            let span = dilation * (k - 1) + 1;
            let len = span + dim(r, 0, 5);
            let x = Tensor::uniform([b, cin, len], 1.0, r);
            let w = Tensor::uniform([cout, cin, k], 1.0, r);
            check(&[x, w], s, move |g, v| g.conv1d(v[0], v[1], stride, dilation, padding))
        }),
        ("mean_pool", |r, s| {
            let k = dim(r, 1, 4);
            let padding = r.below(k);
            let stride = dim(r, 1, 2);
            let len = k + dim(r, 0, 5);
            let x = Tensor::uniform([dim(r, 1, 2), dim(r, 1, 3), len], 1.0, r);
            check(&[x], s, move |g, v| g.pool1d(v[0], PoolKind::Mean, k, stride, padding))
        }),
        ("max_pool", |r, s| {
            let k = dim(r, 1, 4);
            let padding = r.below(k);
            let stride = dim(r, 1, 2);
            let len = k + dim(r, 0, 5);
            let x = distinct(&[dim(r, 1, 2), dim(r, 1, 3), len], 0.05, r);
            check(&[x], s, move |g, v| g.pool1d(v[0], PoolKind::Max, k, stride, padding))
        }),
        ("relu", |r, s| {
            check(&[away_from_zero(&[dim(r, 1, 8)], 1e-3, r)], s, |g, v| Ok(g.relu(v[0])))
        }),
        ("tanh", |r, s| {
            check(&[Tensor::uniform([dim(r, 1, 8)], 2.0, r)], s, |g, v| Ok(g.tanh(v[0])))
        }),
        ("sigmoid", |r, s| {
            check(
                &[Tensor::uniform([dim(r, 1, 8)], 4.0, r)],
                s,
                |g, v| Ok(g.sigmoid(v[0])),
            )
        }),
        ("exp", |r, s| {
            check(&[Tensor::uniform([dim(r, 1, 8)], 2.0, r)], s, |g, v| Ok(g.exp(v[0])))
        }),
        ("log", |r, s| {
            let n = dim(r, 1, 8);
            let x = Tensor::new([n], (0..n).map(|_| r.uniform_range(0.2, 3.0)).collect())?;
            check(&[x], s, |g, v| Ok(g.log(v[0])))
        }),
        ("softmax", |r, s| {
            check(&[Tensor::uniform([dim(r, 1, 3), dim(r, 1, 5)], 2.0, r)], s, |g, v| {
                g.softmax(v[0])
            })
        }),
        ("log_softmax", |r, s| {
            check(&[Tensor::uniform([dim(r, 1, 3), dim(r, 1, 5)], 2.0, r)], s, |g, v| {
                g.log_softmax(v[0])
            })
        }),
        ("dropout", |r, s| {
            let x = Tensor::uniform([dim(r, 1, 10)], 1.0, r);
            let p = r.uniform_range(0.0, 0.8);
            let mseed = r.next_u64();
            check(&[x], s, move |g, v| g.dropout(v[0], p, &mut Rng::new(mseed)))
        }),
        ("embedding", |r, s| {
            let (n, d) = (dim(r, 1, 5), dim(r, 1, 3));
            let ids: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.below(n)).collect();
            check(&[Tensor::uniform([n, d], 1.0, r)], s, move |g, v| {
                g.embedding(v[0], &ids)
            })
        }),
        ("gather", |r, s| {
            let (n, m) = (dim(r, 1, 5), dim(r, 1, 4));
            let idx: Vec<usize> = (0..n).map(|_| r.below(m)).collect();
            check(&[Tensor::uniform([n, m], 1.0, r)], s, move |g, v| g.gather(v[0], &idx))
        }),
        ("scatter_sum", |r, s| {
            let (e, d, n) = (dim(r, 1, 8), dim(r, 1, 3), dim(r, 1, 4));
            let idx: Vec<usize> = (0..e).map(|_| r.below(n)).collect();
            check(&[Tensor::uniform([e, d], 1.0, r)], s, move |g, v| {
                g.scatter_sum(v[0], &idx, n)
            })
        }),
        ("scatter_max", |r, s| {
            let (e, d, n) = (dim(r, 1, 8), dim(r, 1, 3), dim(r, 1, 4));
            let idx: Vec<usize> = (0..e).map(|_| r.below(n)).collect();
            check(&[distinct(&[e, d], 0.05, r)], s, move |g, v| {
                g.scatter_max(v[0], &idx, n)
            })
        }),
        ("segment_softmax", |r, s| {
            let (e, n) = (dim(r, 1, 8), dim(r, 1, 3));
            let idx: Vec<usize> = (0..e).map(|_| r.below(n)).collect();
            check(&[Tensor::uniform([e], 2.0, r)], s, move |g, v| {
                g.segment_softmax(v[0], &idx, n)
            })
        }),
        ("concat", |r, s| {
            let axis = r.below(2);
            let (a, b) = (dim(r, 1, 3), dim(r, 1, 3));
            let mut d1 = [2, 3];
            let mut d2 = [2, 3];
            d1[axis] = a;
            d2[axis] = b;
            check(
                &[Tensor::uniform(d1, 1.0, r), Tensor::uniform(d2, 1.0, r)],
                s,
                move |g, v| g.concat(&[v[0], v[1], v[0]], axis),
            )
        }),
        ("narrow", |r, s| {
            let n = dim(r, 2, 6);
            let start = r.below(n);
            let len = dim(r, 1, n - start);
            check(&[Tensor::uniform([2, n], 1.0, r)], s, move |g, v| {
                g.narrow(v[0], 1, start, len)
            })
        }),
        ("reshape", |r, s| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            check(&[Tensor::uniform([a, b], 1.0, r)], s, move |g, v| {
                g.reshape(v[0], [b, a])
            })
        }),
        ("sum", |r, s| {
            check(&[Tensor::uniform([dim(r, 1, 4), 2], 1.0, r)], s, |g, v| Ok(g.sum(v[0])))
        }),
        ("mean", |r, s| {
            check(
                &[Tensor::uniform([dim(r, 1, 4), 2], 1.0, r)],
                s,
                |g, v| Ok(g.mean(v[0])),
            )
        }),
        ("sum_axis", |r, s| {
            let axis = r.below(3);
            check(
                &[Tensor::uniform([dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)], 1.0, r)],
                s,
                move |g, v| g.sum_axis(v[0], axis),
            )
        }),
        ("mean_axis", |r, s| {
            let axis = r.below(3);
            check(
                &[Tensor::uniform([dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)], 1.0, r)],
                s,
                move |g, v| g.mean_axis(v[0], axis),
            )
        }),
        ("max_axis", |r, s| {
            let axis = r.below(2);
            check(&[distinct(&[dim(r, 1, 4), dim(r, 1, 4)], 0.05, r)], s, move |g, v| {
                g.max_axis(v[0], axis)
            })
        }),
        ("min", |r, s| {
            let n = dim(r, 1, 6);
            let a = distinct(&[n], 0.1, r);
            let b = Tensor::new(
                [n],
                a.data()
                    .iter()
                    .map(|x| x + if r.uniform() < 0.5 { 0.05 } else { -0.05 })
                    .collect(),
            )?;
            check(&[a, b], s, |g, v| g.min(v[0], v[1]))
        }),
        ("clip", |r, s| {
            let n = dim(r, 1, 8);
            // keep inputs off the clip boundaries at +-0.5
            let x = Tensor::new(
                [n],
                (0..n)
                    .map(|_| {
                        let v: f64 = r.uniform_range(-1.0, 1.0);
                        if (v.abs() - 0.5).abs() < 1e-3 {
                            v * 1.1
                        } else {
                            v
                        }
                    })
                    .collect(),
            )?;
            check(&[x], s, |g, v| Ok(g.clip(v[0], -0.5, 0.5)))
        }),
        ("scale", |r, s| {
            let c = r.uniform_range(-2.0, 2.0);
            check(&[Tensor::uniform([dim(r, 1, 5)], 1.0, r)], s, move |g, v| {
                Ok(g.scale(v[0], c))
            })
        }),
    ];
    let mut rng = Rng::new(seed);
    let mut report = Vec::with_capacity(ops.len());
    for (name, case) in ops {
        let r = run_cases(cases, &mut rng, seed, case)?;
        report.push((String::from(name), r.worst));
    }
    Ok(report)
}

/// Outcome of [`run_cases`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaseReport {
    pub worst: f64,
    pub valid: usize,
    pub redrawn: usize,
}

/// Runs `cases` valid checks drawn from `case`. Draws whose central
/// differences straddle a kink are discarded and redrawn; at most `cases`
/// redraws are allowed before giving up with a contract error.
pub fn run_cases<F>(cases: usize, rng: &mut Rng, seed: u64, mut case: F) -> Result<CaseReport>
where
    F: FnMut(&mut Rng, u64) -> Result<GradCheck>,
{
    let mut report = CaseReport {
        worst: 0.0,
        valid: 0,
        redrawn: 0,
    };
    let mut draw = 0u64;
    while report.valid < cases {
        let res = case(rng, seed.wrapping_add(draw))?;
        draw += 1;
        if res.straddles_kink {
            report.redrawn += 1;
            if report.redrawn > cases {
                return Err(Error::Contract(format!(
                    "{} of {draw} draws straddled a kink",
                    report.redrawn
                )));
            }
            continue;
        }
        report.valid += 1;
        report.worst = report.worst.max(res.max_rel_err);
    }
    Ok(report)
}
