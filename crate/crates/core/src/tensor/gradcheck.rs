//! Central finite-difference checks of tape gradients.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{Conv2dSpec, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::Result;

/// Builds a scalar from the given parameter leaves.
pub type GraphFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Largest mismatch between analytic and central-difference gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `max |g - g_fd| / max(|g|, |g_fd|, floor)` over every input entry.
    pub max_rel_err: f64,
    pub entries: usize,
}

/// Denominator floor of the relative error, so entries whose true gradient
/// is (near) zero are judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

fn eval(f: &GraphFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Compares the tape gradient of `f` at `inputs` with central differences
/// of step `h`.
pub fn check_gradients(f: &GraphFn, inputs: &[Tensor], h: f64) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();
    let mut worst: f64 = 0.0;
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (k, g) in analytic.iter().enumerate() {
        for j in 0..g.numel() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + h;
            let up = eval(f, &probe)?;
            probe[k].data_mut()[j] = x0 - h;
            let down = eval(f, &probe)?;
            probe[k].data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * h);
            let a = g.data()[j];
            let denom = a.abs().max(fd.abs()).max(REL_FLOOR);
            worst = worst.max((a - fd).abs() / denom);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_err: worst,
        entries,
    })
}

fn random_tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normals(r, n)).expect("shape and data agree")
}

/// One elementary differentiable primitive on a small random input, by
/// index; `None` past the last one.
pub fn primitive_case(index: usize, seed: u64) -> Option<(&'static str, Box<GraphFn>, Vec<Tensor>)> {
    let mut r = rng::stream(seed, index as u64);
    let a = random_tensor(&mut r, &[3, 4]);
    let b = random_tensor(&mut r, &[3, 4]);
    let w = random_tensor(&mut r, &[3, 4]);
    let reduce = move |tape: &mut Tape, y: Var| -> Result<Var> {
        let wv = tape.constant(w.clone())?;
        let p = tape.mul(y, wv)?;
        tape.sum(p)
    };
    macro_rules! unary {
        ($name:literal, $op:ident) => {
            Some((
                $name,
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.$op(v[0])?;
                    reduce(t, y)
                }) as Box<GraphFn>,
                vec![a],
            ))
        };
    }
    macro_rules! binary {
        ($name:literal, $op:ident) => {
            Some((
                $name,
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.$op(v[0], v[1])?;
                    reduce(t, y)
                }) as Box<GraphFn>,
                vec![a, b],
            ))
        };
    }
    match index {
        0 => binary!("add", add),
        1 => binary!("sub", sub),
        2 => binary!("mul", mul),
        3 => unary!("sigmoid", sigmoid),
        4 => unary!("tanh", tanh),
        5 => unary!("exp", exp),
        6 => unary!("square", square),
        7 => unary!("silu", silu),
        8 => Some((
            "matmul",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.matmul(v[0], v[1])?;
                let s = t.square(y)?;
                t.sum(s)
            }),
            vec![a, random_tensor(&mut r, &[4, 2])],
        )),
        9 => Some((
            "scale_shift",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.scale(v[0], -1.7)?;
                let y = t.shift(y, 0.3)?;
                reduce(t, y)
            }),
            vec![a],
        )),
        10 => Some((
            "mean",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let s = t.square(v[0])?;
                t.mean(s)
            }),
            vec![a],
        )),
        11 => Some((
            "concat_slice_reshape",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 2, 7)?;
                let s = t.reshape(s, &[15])?;
                let q = t.tanh(s)?;
                let q = t.square(q)?;
                t.sum(q)
            }),
            vec![a, b],
        )),
        12 => Some((
            "clamp",
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.clamp(v[0], -0.5, 0.5)?;
                reduce(t, y)
            }),
            vec![a],
        )),
        13 => Some((
            "conv2d",
            Box::new(|t: &mut Tape, v: &[Var]| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, padding: 1 })?;
                let s = t.square(y)?;
                t.sum(s)
            }),
            vec![
                random_tensor(&mut r, &[2, 2, 5, 5]),
                random_tensor(&mut r, &[3, 2, 3, 3]),
                random_tensor(&mut r, &[3]),
            ],
        )),
        _ => None,
    }
}

/// Number of cases served by [`primitive_case`].
pub const PRIMITIVE_CASES: usize = 14;

/// A random composite graph of depth `1..=6` over fresh random leaves.
pub fn random_graph(seed: u64) -> (Box<GraphFn>, Vec<Tensor>) {
    let mut r = rng::seeded(seed);
    let rows = 1 + rng::index(&mut r, 3);
    let cols = 1 + rng::index(&mut r, 4);
    let depth = 1 + rng::index(&mut r, 6);
    // Each step: (op id, auxiliary size, leaf index used by binary ops).
    let mut plan = Vec::with_capacity(depth);
    let mut inputs = vec![random_tensor(&mut r, &[rows, cols])];
    let mut width = cols;
    for _ in 0..depth {
        let op = rng::index(&mut r, 11);
        let aux = 1 + rng::index(&mut r, 3);
        let leaf = match op {
            0..=2 => {
                inputs.push(random_tensor(&mut r, &[rows, width]));
                inputs.len() - 1
            }
            3 => {
                inputs.push(random_tensor(&mut r, &[width, aux]));
                width = aux;
                inputs.len() - 1
            }
            4 => {
                inputs.push(random_tensor(&mut r, &[rows, aux]));
                width += aux;
                inputs.len() - 1
            }
            _ => 0,
        };
        plan.push((op, leaf));
    }
    let weights = random_tensor(&mut r, &[rows, width]);
    let f = move |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut x = v[0];
        for &(op, leaf) in &plan {
            x = match op {
                0 => t.add(x, v[leaf])?,
                1 => t.sub(x, v[leaf])?,
                2 => t.mul(x, v[leaf])?,
                3 => {
                    // Keep magnitudes bounded before mixing.
                    let b = t.tanh(x)?;
                    t.matmul(b, v[leaf])?
                }
                4 => t.concat(&[x, v[leaf]], 1)?,
                5 => t.sigmoid(x)?,
                6 => t.tanh(x)?,
                7 => {
                    let b = t.tanh(x)?;
                    t.exp(b)?
                }
                8 => {
                    let b = t.tanh(x)?;
                    t.square(b)?
                }
                9 => t.silu(x)?,
                _ => {
                    let s = t.scale(x, 0.7)?;
                    t.shift(s, -0.2)?
                }
            };
        }
        let w = t.constant(weights.clone())?;
        let p = t.mul(x, w)?;
        t.sum(p)
    };
    (Box::new(f), inputs)
}
