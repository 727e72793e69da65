//! Central finite-difference verification of tape gradients.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it checks. Errors are reported as
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the gradient
//! of every input of a case taken as one vector. Per-tensor ratios are not
//! used: a parameter deep inside a stack can carry a gradient near 1e-6,
//! where the ratio measures only evaluation roundoff. A coordinate whose stencil `x ± h` changes
//! the sign pattern of any ReLU input straddles a kink, where the central
//! difference does not estimate the derivative; such coordinates are left
//! out of both sides.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::{self, Bound, Conv1d, Dense, LstmCell, LstmStack, Mode, ParamStore};
use crate::res2net::{Backbone, Block, BlockConfig, BlockKind, Gating};
use crate::tape::{GradTape, Var};
use crate::tensor::{Elementwise, Result, Shape, Tensor3};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;

/// Analytic gradients of `f` with respect to each input.
pub fn analytic_gradients<F>(inputs: &[Tensor3], f: &F) -> Result<Vec<Tensor3>>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

fn evaluate<F>(inputs: &[Tensor3], f: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok((tape.value(loss).as_scalar()?, tape.relu_pattern()))
}

/// Central differences `(f(x+h) − f(x−h)) / 2h` for every input element.
pub fn numeric_gradients<F>(inputs: &[Tensor3], f: &F, step: f64) -> Result<Vec<Tensor3>>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    Ok(numeric_with_kinks(inputs, f, step)?.0)
}

/// Numeric gradients plus, per input, the flat indices whose stencil
/// straddles a ReLU kink.
pub fn numeric_with_kinks<F>(inputs: &[Tensor3], f: &F, step: f64) -> Result<(Vec<Tensor3>, Vec<Vec<usize>>)>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let (_, base) = evaluate(inputs, f)?;
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    let mut kinks = Vec::with_capacity(inputs.len());
    for j in 0..inputs.len() {
        let mut g = vec![0.0; inputs[j].shape().len()];
        let mut straddling = Vec::new();
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = inputs[j].data()[k];
            work[j].data_mut()[k] = orig + step;
            let (plus, p_plus) = evaluate(&work, f)?;
            work[j].data_mut()[k] = orig - step;
            let (minus, p_minus) = evaluate(&work, f)?;
            work[j].data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * step);
            if p_plus != base || p_minus != base {
                straddling.push(k);
            }
        }
        out.push(Tensor3::from_raw(inputs[j].shape(), g));
        kinks.push(straddling);
    }
    Ok((out, kinks))
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error between two gradient lists, flattened into one vector.
pub fn relative_error(analytic: &[Tensor3], numeric: &[Tensor3]) -> f64 {
    let a = || analytic.iter().flat_map(|t| t.data().iter().copied());
    let n = || numeric.iter().flat_map(|t| t.data().iter().copied());
    let diff = norm(a().zip(n()).map(|(x, y)| x - y));
    diff / norm(a()).max(norm(n())).max(1e-12)
}

/// Checks `f` at `inputs` and returns the relative error.
pub fn check<F>(inputs: &[Tensor3], f: F) -> Result<f64>
where
    F: Fn(&mut GradTape, &[Var]) -> Result<Var>,
{
    let mut a = analytic_gradients(inputs, &f)?;
    let (mut n, kinks) = numeric_with_kinks(inputs, &f, STEP)?;
    for ((a, n), idx) in a.iter_mut().zip(&mut n).zip(&kinks) {
        for &k in idx {
            a.data_mut()[k] = 0.0;
            n.data_mut()[k] = 0.0;
        }
    }
    Ok(relative_error(&a, &n))
}

/// Contracts an arbitrary output to a scalar with fixed random weights, so
/// every output element contributes a distinct gradient.
pub fn project(tape: &mut GradTape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let weights = Tensor3::from_fn(tape.shape(out), |_, _, _| rng.random_range(-1.0..1.0));
    let w = tape.leaf(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Tensor,
    Nn,
    Res2Net,
    Train,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Tensor, Scope::Nn, Scope::Res2Net, Scope::Train];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Tensor => "tensor",
            Scope::Nn => "nn",
            Scope::Res2Net => "res2net",
            Scope::Train => "train",
        }
    }

    pub fn parse(s: &str) -> Option<Scope> {
        Scope::ALL.into_iter().find(|sc| sc.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub scope: Scope,
    pub operation: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor3 {
    Tensor3::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
}

fn dims(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new(rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=6))
}

/// A case builds inputs from a seed and returns the function to check.
type Case = fn(u64) -> Result<f64>;
type Cases = Vec<(&'static str, Box<dyn Fn(u64) -> Result<f64>>)>;

fn with_params<F>(store: ParamStore, data: Vec<Tensor3>, f: F) -> Result<f64>
where
    F: Fn(&mut GradTape, &Bound, &[Var]) -> Result<Var>,
{
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.extend(data);
    check(&inputs, |tape, vars| {
        let bound = Bound::from_vars(vars[..n].to_vec());
        f(tape, &bound, &vars[n..])
    })
}

fn elementwise_case(op: Elementwise) -> impl Fn(u64) -> Result<f64> {
    move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = dims(&mut rng);
        let mut inputs = vec![random(shape, &mut rng)];
        if op.is_binary() {
            inputs.push(random(shape, &mut rng));
        }
        check(&inputs, |tape, v| {
            let y = tape.elementwise(op, v[0], v.get(1).copied())?;
            project(tape, y, seed)
        })
    }
}

fn tensor_cases() -> Cases {
    let mut cases: Cases = vec![
        ("add", Box::new(elementwise_case(Elementwise::Add))),
        ("sub", Box::new(elementwise_case(Elementwise::Sub))),
        ("mul", Box::new(elementwise_case(Elementwise::Mul))),
        ("tanh", Box::new(elementwise_case(Elementwise::Tanh))),
        ("sigmoid", Box::new(elementwise_case(Elementwise::Sigmoid))),
        ("relu", Box::new(elementwise_case(Elementwise::Relu))),
    ];
    let split: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = rng.random_range(1..=3);
        let shape = Shape::new(rng.random_range(1..=2), groups * rng.random_range(1..=3), rng.random_range(1..=5));
        check(&[random(shape, &mut rng)], |tape, v| {
            let mut parts = tape.split_channels(v[0], groups)?;
            parts.reverse();
            let t = tape.tanh(parts[0]);
            parts[0] = t;
            let y = tape.concat_channels(&parts)?;
            project(tape, y, seed)
        })
    };
    let time_ops: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = dims(&mut rng);
        check(&[random(shape, &mut rng)], |tape, v| {
            let r = tape.reverse_time(v[0]);
            let steps = (0..shape.time).map(|t| tape.time_step(r, t)).collect::<Result<Vec<_>>>()?;
            let mut mixed = Vec::new();
            for (t, s) in steps.iter().enumerate() {
                mixed.push(if t % 2 == 0 { tape.scale(*s, 1.5) } else { tape.sigmoid(*s) });
            }
            let y = tape.stack_time(&mixed)?;
            project(tape, y, seed)
        })
    };
    let composite: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = dims(&mut rng);
        let inputs = [random(shape, &mut rng), random(shape, &mut rng)];
        check(&inputs, |tape, v| {
            let a = tape.mul(v[0], v[1])?;
            let b = tape.tanh(a);
            let c = tape.sub(b, v[0])?;
            let d = tape.sigmoid(c);
            let e = tape.mul(d, v[0])?;
            let f = tape.add(e, a)?;
            Ok(tape.sum(f))
        })
    };
    cases.push(("split/concat", Box::new(split)));
    cases.push(("time ops", Box::new(time_ops)));
    cases.push(("composite", Box::new(composite)));
    cases
}

fn nn_cases() -> Cases {
    let conv: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(dims(&mut rng), &mut rng);
        let k = rng.random_range(1..=5);
        let mut store = ParamStore::new();
        let conv = Conv1d::new(&mut store, "c", x.channels(), rng.random_range(1..=4), k, &mut rng);
        with_params(store, vec![x], |tape, p, d| {
            let y = conv.forward(tape, p, d[0])?;
            project(tape, y, seed)
        })
    };
    let dense: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape::new(rng.random_range(1..=4), rng.random_range(1..=5), 1), &mut rng);
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, "d", x.channels(), rng.random_range(1..=4), &mut rng);
        with_params(store, vec![x], |tape, p, d| {
            let y = layer.forward(tape, p, d[0])?;
            project(tape, y, seed)
        })
    };
    let pool: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(dims(&mut rng), &mut rng);
        check(&[x], |tape, v| {
            let y = nn::global_avg_pool(tape, v[0]);
            project(tape, y, seed)
        })
    };
    let dropout: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(dims(&mut rng), &mut rng);
        check(&[x], |tape, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
            let y = nn::dropout(tape, v[0], 0.5, Mode::Train, &mut mask_rng)?;
            project(tape, y, seed)
        })
    };
    let cell: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (batch, input, hidden) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(1..=4));
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "l", input, hidden, &mut rng);
        let data = vec![
            random(Shape::new(batch, input, 1), &mut rng),
            random(Shape::new(batch, hidden, 1), &mut rng),
            random(Shape::new(batch, hidden, 1), &mut rng),
        ];
        with_params(store, data, |tape, p, d| {
            let st = cell.step(tape, p, d[0], nn::LstmState { h: d[1], s: d[2] })?;
            let both = tape.concat_channels(&[st.state.h, st.state.s])?;
            project(tape, both, seed)
        })
    };
    let sequence: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(Shape::new(2, 2, rng.random_range(1..=4)), &mut rng);
        let mut store = ParamStore::new();
        let stack = LstmStack::new(&mut store, "s", 2, 3, 2, true, &mut rng);
        with_params(store, vec![x], |tape, p, d| {
            let y = stack.forward(tape, p, d[0])?;
            project(tape, y, seed)
        })
    };
    vec![
        ("conv1d", Box::new(conv)),
        ("dense", Box::new(dense)),
        ("global_avg_pool", Box::new(pool)),
        ("dropout", Box::new(dropout)),
        ("lstm_cell_step", Box::new(cell)),
        ("lstm_sequence", Box::new(sequence)),
    ]
}

fn random_block_config(rng: &mut ChaCha8Rng) -> BlockConfig {
    let mut c = BlockConfig::new(
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(2..=4),
        rng.random_range(1..=3),
    );
    c.kernel_size = [1, 3, 5][rng.random_range(0..3)];
    c.gate_channels = rng.random_range(1..=3);
    c
}

fn block_case(gating: Gating) -> impl Fn(u64) -> Result<f64> {
    move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = random_block_config(&mut rng);
        let x = random(Shape::new(rng.random_range(1..=2), config.in_channels, rng.random_range(2..=6)), &mut rng);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", config, &mut rng)?;
        with_params(store, vec![x], |tape, p, d| {
            let y = block.forward(tape, p, d[0], gating)?;
            project(tape, y, seed)
        })
    }
}

fn res2net_cases() -> Cases {
    let gate: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut config = random_block_config(&mut rng);
        config.groups = config.groups.max(3);
        let (n, w) = (config.expanded_channels(), config.group_width);
        let (b, t) = (rng.random_range(1..=2), rng.random_range(1..=5));
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", config, &mut rng)?;
        let unit = block.gates[0].clone();
        let data = vec![
            random(Shape::new(b, n, t), &mut rng),
            random(Shape::new(b, w, t), &mut rng),
            random(Shape::new(b, w, t), &mut rng),
        ];
        with_params(store, data, |tape, p, d| {
            let g = unit.forward(tape, p, d[0], d[1], d[2])?;
            project(tape, g, seed)
        })
    };
    let backbone: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut first = random_block_config(&mut rng);
        first.groups = 3;
        let mut second = random_block_config(&mut rng);
        second.in_channels = first.out_channels;
        let x = random(Shape::new(1, first.in_channels, rng.random_range(2..=5)), &mut rng);
        let mut store = ParamStore::new();
        let bb = Backbone::build(&mut store, "bb", &[first, second], BlockKind::Gated, &mut rng)?;
        with_params(store, vec![x], |tape, p, d| {
            let y = bb.forward(tape, p, d[0])?;
            project(tape, y, seed)
        })
    };
    vec![
        ("gate_compute", Box::new(gate)),
        ("res2net_block_forward", Box::new(block_case(Gating::Ungated))),
        ("gres2net_block_forward", Box::new(block_case(Gating::Gated))),
        ("backbone_forward", Box::new(backbone)),
    ]
}

fn train_cases() -> Cases {
    let ce: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=5));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let logits = random(Shape::new(b, c, 1), &mut rng).map(|v| 3.0 * v);
        check(&[logits], |tape, v| tape.cross_entropy(v[0], &labels))
    };
    let mse: Case = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = dims(&mut rng);
        check(&[random(shape, &mut rng), random(shape, &mut rng)], |tape, v| tape.mse(v[0], v[1]))
    };
    vec![("cross_entropy_loss", Box::new(ce)), ("mse_loss", Box::new(mse))]
}

/// Runs every check of `scope` over `seeds` consecutive seeds.
pub fn run_scope(scope: Scope, seed: u64, seeds: usize) -> Result<Vec<CheckReport>> {
    let cases = match scope {
        Scope::Tensor => tensor_cases(),
        Scope::Nn => nn_cases(),
        Scope::Res2Net => res2net_cases(),
        Scope::Train => train_cases(),
    };
    let mut reports = Vec::with_capacity(cases.len());
    for (operation, case) in cases {
        let start = Instant::now();
        let mut worst = 0.0f64;
        for s in 0..seeds as u64 {
            worst = worst.max(case(seed.wrapping_add(s))?);
        }
        reports.push(CheckReport {
            scope,
            operation,
            cases: seeds,
            max_rel_error: worst,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_gradient_is_detected() {
        let x = Tensor3::from_vec(1, 2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let f = |tape: &mut GradTape, v: &[Var]| -> Result<Var> {
            let t = tape.tanh(v[0]);
            let y = tape.mul(t, v[0])?;
            Ok(tape.sum(y))
        };
        let mut analytic = analytic_gradients(std::slice::from_ref(&x), &f).unwrap();
        let numeric = numeric_gradients(std::slice::from_ref(&x), &f, STEP).unwrap();
        assert!(relative_error(&analytic, &numeric) < TOLERANCE);
        analytic[0].data_mut()[2] *= 1.001;
        assert!(relative_error(&analytic, &numeric) > TOLERANCE);
    }

    #[test]
    fn linearity_of_accumulation() {
        // gradient of a·f(x) + b·g(x) equals a·∇f + b·∇g
        let x = Tensor3::from_vec(1, 3, 2, vec![0.1, -0.4, 0.9, 1.3, -2.0, 0.05]).unwrap();
        let (a, b) = (0.75, -2.5);
        let f = |tape: &mut GradTape, v: Var| -> Result<Var> {
            let t = tape.sigmoid(v);
            let y = tape.mul(t, v)?;
            Ok(tape.sum(y))
        };
        let g = |tape: &mut GradTape, v: Var| -> Result<Var> {
            let t = tape.tanh(v);
            let y = tape.mul(t, t)?;
            Ok(tape.sum(y))
        };
        let xs = std::slice::from_ref(&x);
        let gf = analytic_gradients(xs, &|t: &mut GradTape, v: &[Var]| f(t, v[0])).unwrap();
        let gg = analytic_gradients(xs, &|t: &mut GradTape, v: &[Var]| g(t, v[0])).unwrap();
        let combo = analytic_gradients(xs, &|t: &mut GradTape, v: &[Var]| {
            let fa = f(t, v[0])?;
            let gb = g(t, v[0])?;
            let fa = t.scale(fa, a);
            let gb = t.scale(gb, b);
            t.add(fa, gb)
        })
        .unwrap();
        for i in 0..6 {
            let expected = a * gf[0].data()[i] + b * gg[0].data()[i];
            assert!((combo[0].data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn kink_straddling_coordinates_are_excluded() {
        // relu(x0) + x1²: x0 sits inside the stencil around the kink.
        let x = Tensor3::from_vec(1, 2, 1, vec![0.3 * STEP, 0.8]).unwrap();
        let f = |tape: &mut GradTape, v: &[Var]| -> Result<Var> {
            let r = tape.relu(v[0]);
            let sq = tape.mul(v[0], v[0])?;
            let both = tape.add(r, sq)?;
            Ok(tape.sum(both))
        };
        let (numeric, kinks) = numeric_with_kinks(std::slice::from_ref(&x), &f, STEP).unwrap();
        let analytic = analytic_gradients(std::slice::from_ref(&x), &f).unwrap();
        assert!(relative_error(&analytic, &numeric) > TOLERANCE);
        assert_eq!(kinks, vec![vec![0]]);
        assert!(check(std::slice::from_ref(&x), f).unwrap() < TOLERANCE);
    }

    #[test]
    fn scope_names_roundtrip() {
        for s in Scope::ALL {
            assert_eq!(Scope::parse(s.name()), Some(s));
        }
        assert_eq!(Scope::parse("bogus"), None);
    }

    #[test]
    fn tensor_scope_passes() {
        for r in run_scope(Scope::Tensor, 1, 20).unwrap() {
            assert!(r.passed(), "{} rel err {}", r.operation, r.max_rel_error);
        }
    }
}
