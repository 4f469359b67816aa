//! Finite-difference validation suites for every tape primitive.
//!
//! Each case builds a small double-precision graph, takes the analytic
//! gradients from the reverse pass, and compares them against the central
//! finite-difference oracle, which only re-runs the forward code. A random
//! mixing tensor multiplies each op output before the final sum so that
//! upstream gradients vary per element.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fdcheck::{max_rel_error, numeric_gradients};
use super::graph::{Tape, Var};

/// Outcome of one primitive's check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
}

/// FD step. 1e-4 balances truncation against f64 round-off for these sizes.
const H: f64 = 1e-4;

struct Case {
    name: &'static str,
    inputs: Vec<ArrayD<f64>>,
    mixer: ArrayD<f64>,
    build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>,
}

impl Case {
    fn run(&self) -> CheckReport {
        let forward = |arrays: &[ArrayD<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let vars: Vec<Var> = arrays
                .iter()
                .map(|a| tape.leaf(a.clone(), true))
                .collect();
            let out = (self.build)(&mut tape, &vars);
            let w = tape.leaf(self.mixer.clone(), false);
            let mixed = tape.mul(out, w).expect("mixer matches op output shape");
            let loss = tape.sum(mixed);
            tape.scalar_value(loss)
        };

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = self
            .inputs
            .iter()
            .map(|a| tape.leaf(a.clone(), true))
            .collect();
        let out = (self.build)(&mut tape, &vars);
        let w = tape.leaf(self.mixer.clone(), false);
        let mixed = tape.mul(out, w).expect("mixer matches op output shape");
        let loss = tape.sum(mixed);
        let grads = tape.backward(loss).expect("fresh graph");

        let numeric = numeric_gradients(&self.inputs, forward, H);
        let mut worst = 0.0f64;
        for (var, num) in vars.iter().zip(&numeric) {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(num.raw_dim()));
            worst = worst.max(max_rel_error(&analytic, num));
        }
        CheckReport {
            name: self.name,
            max_rel_err: worst,
        }
    }
}

/// Run the full primitive suite; one report per op variant.
pub fn check_primitives(seed: u64) -> Vec<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<Case> = Vec::new();

    for (name, ta, tb) in [
        ("matmul", false, false),
        ("matmul_ta", true, false),
        ("matmul_tb", false, true),
        ("matmul_ta_tb", true, true),
    ] {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [2, 4] } else { [4, 2] };
        let inputs = vec![
            rand_array(&mut rng, &a_shape, -1.0, 1.0),
            rand_array(&mut rng, &b_shape, -1.0, 1.0),
        ];
        let mixer = rand_array(&mut rng, &[3, 2], -1.0, 1.0);
        cases.push(Case {
            name,
            inputs,
            mixer,
            build: Box::new(move |t, v| t.matmul_t(v[0], ta, v[1], tb).unwrap()),
        });
    }

    cases.push(Case {
        name: "add",
        inputs: vec![
            rand_array(&mut rng, &[3, 5], -1.0, 1.0),
            rand_array(&mut rng, &[3, 5], -1.0, 1.0),
        ],
        mixer: rand_array(&mut rng, &[3, 5], -1.0, 1.0),
        build: Box::new(|t, v| t.add(v[0], v[1]).unwrap()),
    });

    cases.push(Case {
        name: "mul",
        inputs: vec![
            rand_array(&mut rng, &[3, 5], -1.0, 1.0),
            rand_array(&mut rng, &[3, 5], -1.0, 1.0),
        ],
        mixer: rand_array(&mut rng, &[3, 5], -1.0, 1.0),
        build: Box::new(|t, v| t.mul(v[0], v[1]).unwrap()),
    });

    cases.push(Case {
        name: "add_bias",
        inputs: vec![
            rand_array(&mut rng, &[4, 6], -1.0, 1.0),
            rand_array(&mut rng, &[6], -1.0, 1.0),
        ],
        mixer: rand_array(&mut rng, &[4, 6], -1.0, 1.0),
        build: Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
    });

    cases.push(Case {
        name: "scale",
        inputs: vec![rand_array(&mut rng, &[3, 4], -1.0, 1.0)],
        mixer: rand_array(&mut rng, &[3, 4], -1.0, 1.0),
        build: Box::new(|t, v| t.scale(v[0], -1.7)),
    });

    // Keep relu inputs away from the kink.
    let relu_in = rand_array(&mut rng, &[4, 5], -1.0, 1.0).mapv(|v| {
        if v.abs() < 0.05 {
            v + 0.1 * v.signum()
        } else {
            v
        }
    });
    cases.push(Case {
        name: "relu",
        inputs: vec![relu_in],
        mixer: rand_array(&mut rng, &[4, 5], -1.0, 1.0),
        build: Box::new(|t, v| t.relu(v[0])),
    });

    cases.push(Case {
        name: "gelu",
        inputs: vec![rand_array(&mut rng, &[4, 5], -2.0, 2.0)],
        mixer: rand_array(&mut rng, &[4, 5], -1.0, 1.0),
        build: Box::new(|t, v| t.gelu(v[0])),
    });

    cases.push(Case {
        name: "softmax",
        inputs: vec![rand_array(&mut rng, &[3, 6], -2.0, 2.0)],
        mixer: rand_array(&mut rng, &[3, 6], -1.0, 1.0),
        build: Box::new(|t, v| t.softmax_rows(v[0]).unwrap()),
    });

    cases.push(Case {
        name: "layernorm",
        inputs: vec![
            rand_array(&mut rng, &[3, 8], -2.0, 2.0),
            rand_array(&mut rng, &[8], 0.5, 1.5),
            rand_array(&mut rng, &[8], -0.5, 0.5),
        ],
        mixer: rand_array(&mut rng, &[3, 8], -1.0, 1.0),
        build: Box::new(|t, v| t.layernorm(v[0], v[1], v[2], 1e-6).unwrap()),
    });

    cases.push(Case {
        name: "conv2d",
        inputs: vec![
            rand_array(&mut rng, &[2, 6, 5], -1.0, 1.0),
            rand_array(&mut rng, &[3, 2, 3, 3], -1.0, 1.0),
            rand_array(&mut rng, &[3], -1.0, 1.0),
        ],
        mixer: rand_array(&mut rng, &[3, 6, 5], -1.0, 1.0),
        build: Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 1).unwrap()),
    });

    // Max-pool ties would make the gradient non-differentiable; draw until
    // every 2x2 cell has a clear winner.
    let pool_in = loop {
        let x = rand_array(&mut rng, &[2, 4, 6], -1.0, 1.0);
        let mut ok = true;
        for c in 0..2 {
            for oy in 0..2 {
                for ox in 0..3 {
                    let mut vals: Vec<f64> = Vec::with_capacity(4);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            vals.push(x[[c, 2 * oy + dy, 2 * ox + dx]]);
                        }
                    }
                    vals.sort_by(f64::total_cmp);
                    if vals[3] - vals[2] < 10.0 * H {
                        ok = false;
                    }
                }
            }
        }
        if ok {
            break x;
        }
    };
    cases.push(Case {
        name: "maxpool2x2",
        inputs: vec![pool_in],
        mixer: rand_array(&mut rng, &[2, 2, 3], -1.0, 1.0),
        build: Box::new(|t, v| t.maxpool2x2(v[0]).unwrap()),
    });

    cases.push(Case {
        name: "concat_rows",
        inputs: vec![
            rand_array(&mut rng, &[2, 4], -1.0, 1.0),
            rand_array(&mut rng, &[3, 4], -1.0, 1.0),
        ],
        mixer: rand_array(&mut rng, &[5, 4], -1.0, 1.0),
        build: Box::new(|t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
    });

    cases.push(Case {
        name: "concat_cols",
        inputs: vec![
            rand_array(&mut rng, &[3, 2], -1.0, 1.0),
            rand_array(&mut rng, &[3, 5], -1.0, 1.0),
        ],
        mixer: rand_array(&mut rng, &[3, 7], -1.0, 1.0),
        build: Box::new(|t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
    });

    cases.push(Case {
        name: "slice_cols",
        inputs: vec![rand_array(&mut rng, &[3, 8], -1.0, 1.0)],
        mixer: rand_array(&mut rng, &[3, 4], -1.0, 1.0),
        build: Box::new(|t, v| t.slice_cols(v[0], 2, 4).unwrap()),
    });

    cases.push(Case {
        name: "row",
        inputs: vec![rand_array(&mut rng, &[4, 6], -1.0, 1.0)],
        mixer: rand_array(&mut rng, &[1, 6], -1.0, 1.0),
        build: Box::new(|t, v| t.row(v[0], 2).unwrap()),
    });

    cases.push(Case {
        name: "reshape",
        inputs: vec![rand_array(&mut rng, &[4, 6], -1.0, 1.0)],
        mixer: rand_array(&mut rng, &[2, 12], -1.0, 1.0),
        build: Box::new(|t, v| t.reshape(v[0], &[2, 12]).unwrap()),
    });

    cases.push(Case {
        name: "cross_entropy",
        inputs: vec![rand_array(&mut rng, &[1, 9], -2.0, 2.0)],
        mixer: ArrayD::from_elem(IxDyn(&[]), 1.37),
        build: Box::new(|t, v| t.cross_entropy(v[0], 4).unwrap()),
    });

    cases.push(Case {
        name: "sum",
        inputs: vec![rand_array(&mut rng, &[3, 4], -1.0, 1.0)],
        mixer: ArrayD::from_elem(IxDyn(&[]), -0.61),
        build: Box::new(|t, v| t.sum(v[0])),
    });

    cases.iter().map(Case::run).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for report in check_primitives(20_240_817) {
            assert!(
                report.max_rel_err < 1e-4,
                "{}: max relative error {:.3e}",
                report.name,
                report.max_rel_err
            );
        }
    }
}
