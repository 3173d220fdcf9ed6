//! Central finite-difference oracle for the autodiff primitives.
//!
//! The loss for a primitive `f` is `Σ wᵢ·f(x)ᵢ` with fixed random weights,
//! accumulated in `f64`. Numeric derivatives perturb one input element at a
//! time by ±h and use the step that was actually representable in `f32`.

#![allow(dead_code)]

use mnat::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Primitive = Box<dyn Fn(&[Tensor]) -> Tensor>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Vec<f32>>,
    pub shapes: Vec<Vec<usize>>,
    pub f: Primitive,
}

fn weighted_loss(out: &Tensor, weights: &[f32]) -> f64 {
    out.data()
        .iter()
        .zip(weights)
        .map(|(&o, &w)| o as f64 * w as f64)
        .sum()
}

fn params(case: &Case, data: &[Vec<f32>]) -> Vec<Tensor> {
    data.iter()
        .zip(&case.shapes)
        .map(|(d, s)| Tensor::param(s.clone(), d.clone()).unwrap())
        .collect()
}

/// Largest relative error over the case's inputs, measured as
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-2)`.
pub fn relative_error(case: &Case, h: f32, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = (case.f)(&params(case, &case.inputs));
    let weights: Vec<f32> = (0..probe.numel())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    let inputs = params(case, &case.inputs);
    let out = (case.f)(&inputs);
    let loss = out
        .mul(&Tensor::from_vec(out.shape().to_vec(), weights.clone()).unwrap())
        .unwrap()
        .sum();
    let grads = loss.backward().unwrap();

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(input) {
            Some(g) => g.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; input.numel()],
        };
        let mut numeric = vec![0.0f64; input.numel()];
        for j in 0..input.numel() {
            let x = case.inputs[i][j];
            let (up, down) = (x + h, x - h);
            let mut data = case.inputs.clone();
            data[i][j] = up;
            let f_up = weighted_loss(&(case.f)(&params(case, &data)), &weights);
            data[i][j] = down;
            let f_down = weighted_loss(&(case.f)(&params(case, &data)), &weights);
            numeric[j] = (f_up - f_down) / (up as f64 - down as f64);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let denom = norm(&analytic).max(norm(&numeric)).max(1e-2);
        worst = worst.max(norm(&diff) / denom);
    }
    worst
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Values kept at least `gap` away from `kink` so ±h never crosses it.
fn away_from(rng: &mut ChaCha8Rng, n: usize, kink: f32, gap: f32) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(-1.0f32..1.0);
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect()
}

fn case(name: &'static str, shapes: Vec<Vec<usize>>, inputs: Vec<Vec<f32>>, f: Primitive) -> Case {
    Case {
        name,
        inputs,
        shapes,
        f,
    }
}

/// One random instance of every primitive, with 2–8 elements per input.
pub fn cases_for_seed(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let cols = r.gen_range(1..=4usize);
    let rows = r.gen_range(2..=8usize / cols).max(1);
    let rows = if rows * cols < 2 { 2 } else { rows };
    let n = rows * cols;
    let mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
    let gather: Vec<usize> = (0..r.gen_range(1..=4))
        .map(|_| r.gen_range(0..rows))
        .collect();
    let coeffs: Vec<f64> = (0..3).map(|_| r.gen_range(-2.0..2.0)).collect();
    let factor = r.gen_range(-3.0f32..3.0);
    let dropout_seed = r.gen::<u64>();
    let (m, k, nn) = (r.gen_range(1..=2), r.gen_range(2..=4), r.gen_range(1..=2));
    let floor = r.gen_range(-0.5f32..0.5);

    vec![
        case(
            "add",
            vec![vec![rows, cols]; 2],
            vec![uniform(r, n), uniform(r, n)],
            Box::new(|x| x[0].add(&x[1]).unwrap()),
        ),
        case(
            "add_broadcast",
            vec![vec![rows, cols], vec![cols]],
            vec![uniform(r, n), uniform(r, cols)],
            Box::new(|x| x[0].add(&x[1]).unwrap()),
        ),
        case(
            "sub",
            vec![vec![rows, cols]; 2],
            vec![uniform(r, n), uniform(r, n)],
            Box::new(|x| x[0].sub(&x[1]).unwrap()),
        ),
        case(
            "mul",
            vec![vec![rows, cols]; 2],
            vec![uniform(r, n), uniform(r, n)],
            Box::new(|x| x[0].mul(&x[1]).unwrap()),
        ),
        case(
            "mul_broadcast",
            vec![vec![rows, cols], vec![cols]],
            vec![uniform(r, n), uniform(r, cols)],
            Box::new(|x| x[0].mul(&x[1]).unwrap()),
        ),
        case(
            "scale",
            vec![vec![n]],
            vec![uniform(r, n)],
            Box::new(move |x| x[0].scale(factor)),
        ),
        case(
            "matmul",
            vec![vec![m, k], vec![k, nn]],
            vec![uniform(r, m * k), uniform(r, k * nn)],
            Box::new(|x| x[0].matmul(&x[1]).unwrap()),
        ),
        case(
            "matmul_batched",
            vec![vec![2, m, 2], vec![2, 2, nn]],
            vec![uniform(r, 2 * m * 2), uniform(r, 2 * 2 * nn)],
            Box::new(|x| x[0].matmul(&x[1]).unwrap()),
        ),
        case(
            "reshape",
            vec![vec![rows, cols]],
            vec![uniform(r, n)],
            Box::new(move |x| x[0].reshape(&[n]).unwrap()),
        ),
        case(
            "permute",
            vec![vec![2, 1, 3]],
            vec![uniform(r, 6)],
            Box::new(|x| x[0].permute(&[2, 0, 1]).unwrap()),
        ),
        case(
            "transpose",
            vec![vec![rows, cols]],
            vec![uniform(r, n)],
            Box::new(|x| x[0].transpose().unwrap()),
        ),
        case(
            "concat",
            vec![vec![rows, cols], vec![rows, 1]],
            vec![uniform(r, n), uniform(r, rows)],
            Box::new(|x| Tensor::concat(&[x[0].clone(), x[1].clone()], 1).unwrap()),
        ),
        case(
            "gather_rows",
            vec![vec![rows, cols]],
            vec![uniform(r, n)],
            Box::new(move |x| x[0].gather_rows(&gather).unwrap()),
        ),
        case(
            "mask_fill",
            vec![vec![rows, cols]],
            vec![uniform(r, n)],
            Box::new(move |x| x[0].mask_fill(&mask, -7.0).unwrap()),
        ),
        case(
            "sum",
            vec![vec![rows, cols]],
            vec![uniform(r, n)],
            Box::new(|x| x[0].sum()),
        ),
        case(
            "mean",
            vec![vec![rows, cols]],
            vec![uniform(r, n)],
            Box::new(|x| x[0].mean().unwrap()),
        ),
        case(
            "softmax_last",
            vec![vec![rows, cols.max(2)]],
            vec![uniform(r, rows * cols.max(2))],
            Box::new(|x| x[0].softmax(1).unwrap()),
        ),
        case(
            "softmax_first",
            vec![vec![rows, cols]],
            vec![uniform(r, n)],
            Box::new(|x| x[0].softmax(0).unwrap()),
        ),
        case(
            "log_softmax",
            vec![vec![rows, cols.max(2)]],
            vec![uniform(r, rows * cols.max(2))],
            Box::new(|x| x[0].log_softmax(1).unwrap()),
        ),
        case(
            "layer_norm",
            vec![vec![2, 3], vec![3], vec![3]],
            vec![
                uniform(r, 6).iter().map(|v| v * 2.0).collect(),
                uniform(r, 3),
                uniform(r, 3),
            ],
            Box::new(|x| x[0].layer_norm(&x[1], &x[2], 1e-5).unwrap()),
        ),
        case(
            "relu",
            vec![vec![n]],
            vec![away_from(r, n, 0.0, 0.01)],
            Box::new(|x| x[0].relu()),
        ),
        case(
            "clamp_min",
            vec![vec![n]],
            vec![away_from(r, n, floor, 0.01)],
            Box::new(move |x| x[0].clamp_min(floor)),
        ),
        case(
            "dropout",
            vec![vec![n]],
            vec![uniform(r, n)],
            Box::new(move |x| {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                x[0].dropout(0.3, true, &mut rng).unwrap()
            }),
        ),
        case(
            "linear_combination",
            vec![vec![]; 3],
            vec![uniform(r, 1), uniform(r, 1), uniform(r, 1)],
            Box::new(move |x| Tensor::linear_combination(x, &coeffs).unwrap()),
        ),
    ]
}

pub struct Summary {
    pub cases: usize,
    pub worst: f64,
    pub worst_name: &'static str,
    pub failures: Vec<(&'static str, u64, f64)>,
}

/// Runs `rounds` random instances of every primitive.
pub fn run_suite(rounds: u64, h: f32, tolerance: f64) -> Summary {
    let mut summary = Summary {
        cases: 0,
        worst: 0.0,
        worst_name: "",
        failures: Vec::new(),
    };
    for round in 0..rounds {
        for c in cases_for_seed(round) {
            let err = relative_error(&c, h, round ^ 0x5eed);
            summary.cases += 1;
            if err > summary.worst {
                summary.worst = err;
                summary.worst_name = c.name;
            }
            if err > tolerance {
                summary.failures.push((c.name, round, err));
            }
        }
    }
    summary
}
