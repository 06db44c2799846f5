//! Finite-difference and algebraic oracles for the network derivatives:
//! gradients against central differences of the loss, Hessian-vector
//! products against central differences of the gradient, bilinear-form
//! symmetry/linearity, and the Gauss-Newton PSD/exactness properties.

use hessfree::linalg::{dot, Matrix, Vector};
use hessfree::model::{
    gauss_newton_vec, gradient, hessian_vec, init_params, loss, Activation, Batch, NetworkSpec,
    OutputLoss, ParameterVector, Targets,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn combos() -> [(Activation, OutputLoss); 6] {
    [
        (Activation::Sigmoid, OutputLoss::SoftmaxCrossEntropy),
        (Activation::Sigmoid, OutputLoss::MeanSquaredError),
        (Activation::Tanh, OutputLoss::SoftmaxCrossEntropy),
        (Activation::Tanh, OutputLoss::MeanSquaredError),
        (Activation::Relu, OutputLoss::SoftmaxCrossEntropy),
        (Activation::Relu, OutputLoss::MeanSquaredError),
    ]
}

/// A random architecture within the [20,12,8,5] caps, output ≥ 2.
fn random_dims(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let caps = [20usize, 12, 8, 5];
    let depth = rng.gen_range(2..=4);
    let mut dims: Vec<usize> = (0..depth).map(|i| rng.gen_range(1..=caps[i])).collect();
    let last = dims.len() - 1;
    dims[last] = dims[last].max(2);
    dims
}

fn random_problem(
    seed: u64,
    act: Activation,
    out: OutputLoss,
) -> (NetworkSpec, ParameterVector, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_dims(&mut rng);
    let spec = NetworkSpec::new(dims, act, out).unwrap();
    let theta = init_params(&spec, seed ^ 0x5eed);
    let b = rng.gen_range(2..=4);
    let d0 = spec.input_dim();
    let inputs = Matrix::new(
        b,
        d0,
        (0..b * d0).map(|_| rng.gen::<f64>()).collect(),
    )
    .unwrap();
    let targets = match out {
        OutputLoss::SoftmaxCrossEntropy => Targets::Classes(
            (0..b).map(|_| rng.gen_range(0..spec.output_dim())).collect(),
        ),
        OutputLoss::MeanSquaredError => Targets::Values(
            Matrix::new(
                b,
                spec.output_dim(),
                (0..b * spec.output_dim())
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap(),
        ),
    };
    (spec, theta, Batch::new(inputs, targets).unwrap())
}

fn shifted(theta: &ParameterVector, i: usize, h: f64) -> ParameterVector {
    let mut v = theta.theta().as_slice().to_vec();
    v[i] += h;
    ParameterVector::from_vector_unchecked(Vector::from_vec_unchecked(v))
}

/// Central-difference gradient of the batch loss.
fn fd_gradient(spec: &NetworkSpec, theta: &ParameterVector, batch: &Batch, h: f64) -> Vector {
    let p = theta.len();
    let mut out = Vector::zeros(p);
    for i in 0..p {
        let fp = loss(spec, &shifted(theta, i, h), batch).unwrap();
        let fm = loss(spec, &shifted(theta, i, -h), batch).unwrap();
        out[i] = (fp - fm) / (2.0 * h);
    }
    out
}

fn shifted_by(theta: &ParameterVector, v: &Vector, h: f64) -> ParameterVector {
    let mut out = theta.theta().as_slice().to_vec();
    for i in 0..out.len() {
        out[i] += h * v[i];
    }
    ParameterVector::from_vector_unchecked(Vector::from_vec_unchecked(out))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    Vector::new(v).unwrap()
}

#[test]
fn gradient_matches_central_differences_on_all_combos() {
    // ≥ 20 nets: two per activation/loss combo, and a deeper sweep below.
    for (ci, (act, out)) in combos().into_iter().enumerate() {
        for rep in 0..2u64 {
            let seed = 1000 + 17 * ci as u64 + rep;
            let (spec, theta, batch) = random_problem(seed, act, out);
            let g = gradient(&spec, &theta, &batch).unwrap();
            let fd = fd_gradient(&spec, &theta, &batch, 1e-5);
            for i in 0..g.len() {
                let denom = g[i].abs().max(1e-4);
                let rel = (g[i] - fd[i]).abs() / denom;
                assert!(
                    rel < 1e-6,
                    "combo {ci} rep {rep} coord {i}: analytic {} vs fd {} (rel {rel:.2e})",
                    g[i],
                    fd[i]
                );
            }
        }
    }
}

#[test]
fn hessian_vec_matches_gradient_differences_on_all_combos() {
    for (ci, (act, out)) in combos().into_iter().enumerate() {
        for rep in 0..2u64 {
            let seed = 2000 + 23 * ci as u64 + rep;
            let (spec, theta, batch) = random_problem(seed, act, out);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ff);
            let v = random_unit(&mut rng, theta.len());
            let hv = hessian_vec(&spec, &theta, &batch, &v).unwrap();
            let h = 1e-5;
            let gp = gradient(&spec, &shifted_by(&theta, &v, h), &batch).unwrap();
            let gm = gradient(&spec, &shifted_by(&theta, &v, -h), &batch).unwrap();
            let mut diff_sq = 0.0;
            let mut ref_sq = 0.0;
            for i in 0..hv.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                diff_sq += (hv[i] - fd) * (hv[i] - fd);
                ref_sq += hv[i] * hv[i];
            }
            let rel = (diff_sq / ref_sq.max(1e-12)).sqrt();
            assert!(
                rel < 1e-5,
                "combo {ci} rep {rep}: HVP vs directional gradient fd, rel {rel:.2e}"
            );
        }
    }
}

#[test]
fn hessian_bilinear_form_is_symmetric_and_linear() {
    let (spec, theta, batch) = random_problem(
        31337,
        Activation::Tanh,
        OutputLoss::SoftmaxCrossEntropy,
    );
    let p = theta.len();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..20 {
        let u = random_unit(&mut rng, p);
        let v = random_unit(&mut rng, p);
        let w = random_unit(&mut rng, p);
        let hu = hessian_vec(&spec, &theta, &batch, &u).unwrap();
        let hv = hessian_vec(&spec, &theta, &batch, &v).unwrap();
        let hw = hessian_vec(&spec, &theta, &batch, &w).unwrap();
        // Symmetry: uᵀHv = vᵀHu.
        let uhv = dot(&u, &hv).unwrap();
        let vhu = dot(&v, &hu).unwrap();
        assert!(
            (uhv - vhu).abs() <= 1e-8 * uhv.abs().max(1.0),
            "trial {trial}: uᵀHv {uhv} vs vᵀHu {vhu}"
        );
        // Linearity: H(av + bw) = a·Hv + b·Hw.
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mut comb = Vec::with_capacity(p);
        for i in 0..p {
            comb.push(a * v[i] + b * w[i]);
        }
        let h_comb =
            hessian_vec(&spec, &theta, &batch, &Vector::new(comb).unwrap()).unwrap();
        let mut err = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..p {
            let lin = a * hv[i] + b * hw[i];
            err = err.max((h_comb[i] - lin).abs());
            scale = scale.max(lin.abs());
        }
        assert!(
            err <= 1e-8 * scale.max(1.0),
            "trial {trial}: linearity error {err:.2e} at scale {scale:.2e}"
        );
    }
}

#[test]
fn gauss_newton_form_is_positive_semidefinite() {
    for (seed, act, out) in [
        (7u64, Activation::Sigmoid, OutputLoss::SoftmaxCrossEntropy),
        (8, Activation::Tanh, OutputLoss::MeanSquaredError),
        (9, Activation::Relu, OutputLoss::SoftmaxCrossEntropy),
    ] {
        let (spec, theta, batch) = random_problem(seed, act, out);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x65);
        for _ in 0..100 {
            let v = random_unit(&mut rng, theta.len());
            let gv = gauss_newton_vec(&spec, &theta, &batch, &v).unwrap();
            let quad = dot(&v, &gv).unwrap();
            // ‖v‖ = 1, so the slack is just the tolerance.
            assert!(quad >= -1e-8, "vᵀGv = {quad} < 0 (seed {seed})");
        }
    }
}

#[test]
fn gauss_newton_equals_hessian_for_linear_output_mse() {
    // With no hidden layer the network map is linear in θ, so the
    // Gauss-Newton matrix is the exact Hessian.
    let spec =
        NetworkSpec::new(vec![6, 4], Activation::Sigmoid, OutputLoss::MeanSquaredError).unwrap();
    let theta = init_params(&spec, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = Matrix::new(5, 6, (0..30).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let targets = Matrix::new(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let batch = Batch::new(inputs, Targets::Values(targets)).unwrap();
    for _ in 0..10 {
        let v = random_unit(&mut rng, theta.len());
        let hv = hessian_vec(&spec, &theta, &batch, &v).unwrap();
        let gv = gauss_newton_vec(&spec, &theta, &batch, &v).unwrap();
        for i in 0..hv.len() {
            assert!(
                (hv[i] - gv[i]).abs() <= 1e-10 * hv[i].abs().max(1.0),
                "coord {i}: H {} vs G {}",
                hv[i],
                gv[i]
            );
        }
    }
}

#[test]
fn derivatives_hold_at_the_architecture_caps() {
    // The largest admissible net, both losses: a denser FD spot-check on a
    // random coordinate subset (the full sweep above covers small nets).
    for (out, seed) in [
        (OutputLoss::SoftmaxCrossEntropy, 51u64),
        (OutputLoss::MeanSquaredError, 52),
    ] {
        let spec = NetworkSpec::new(vec![20, 12, 8, 5], Activation::Tanh, out).unwrap();
        let theta = init_params(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs =
            Matrix::new(3, 20, (0..60).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let targets = match out {
            OutputLoss::SoftmaxCrossEntropy => {
                Targets::Classes((0..3).map(|_| rng.gen_range(0..5)).collect())
            }
            OutputLoss::MeanSquaredError => Targets::Values(
                Matrix::new(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            ),
        };
        let batch = Batch::new(inputs, targets).unwrap();
        let g = gradient(&spec, &theta, &batch).unwrap();
        let h = 1e-5;
        for _ in 0..40 {
            let i = rng.gen_range(0..theta.len());
            let fp = loss(&spec, &shifted(&theta, i, h), &batch).unwrap();
            let fm = loss(&spec, &shifted(&theta, i, -h), &batch).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(1e-4);
            assert!(rel < 1e-6, "coord {i}: {} vs {} (rel {rel:.2e})", g[i], fd);
        }
    }
}
