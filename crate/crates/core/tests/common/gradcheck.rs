//! Central finite-difference oracle for the autodiff graph (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splitnav::math::{Graph, MathError, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// Builds a scalar loss from input leaves. The same closure is used for the
/// analytic gradient and for every perturbed evaluation.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, MathError> + 'a;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn eval(inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false).unwrap()).collect();
    let loss = build(&mut g, &vars).unwrap();
    g.value(loss).item()
}

/// Max relative error between analytic and central-difference gradients over
/// all input entries. Denominator is floored at `1e-6` so exact zeros compare
/// as absolute error.
pub fn max_rel_error(inputs: &[Tensor<f64>], build: &Build<'_>) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true).unwrap()).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let zeros = Tensor::zeros(t.shape());
        let analytic = grads.wrt(vars[k]).unwrap_or(&zeros);
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * STEP);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Random fixed projection so the loss is `sum(out * w)` rather than a plain sum.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var, MathError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, g.shape(out), 1.0);
    let w = g.constant(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

pub struct LayerCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs drawn from `offset + U(-scale, scale)`.
    pub scale: f64,
    pub offset: f64,
    pub build: Box<Build<'static>>,
}

fn case(name: &'static str, shapes: Vec<Vec<usize>>, build: Box<Build<'static>>) -> LayerCase {
    LayerCase { name, shapes, scale: 1.0, offset: 0.0, build }
}

/// Every op kind the networks use, each wrapped into a scalar loss.
pub fn layer_cases() -> Vec<LayerCase> {
    let mut cases = vec![
        case("matmul", vec![vec![3, 4], vec![4, 5]], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        })),
        case("add_row", vec![vec![3, 4], vec![4]], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            project(g, y, 2)
        })),
        case("conv2d", vec![vec![2, 2, 5, 6], vec![3, 2, 3, 3], vec![3]], Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], v[2])?;
            project(g, y, 3)
        })),
        case("group_norm", vec![vec![2, 4, 3, 3], vec![4], vec![4]], Box::new(|g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 2, 1e-5)?;
            project(g, y, 4)
        })),
        case("elu", vec![vec![4, 5]], Box::new(|g, v| {
            let y = g.elu(v[0])?;
            project(g, y, 5)
        })),
        case("max_pool2", vec![vec![2, 2, 4, 4]], Box::new(|g, v| {
            let y = g.max_pool2(v[0])?;
            project(g, y, 6)
        })),
        case("upsample2", vec![vec![2, 2, 3, 2]], Box::new(|g, v| {
            let y = g.upsample2(v[0])?;
            project(g, y, 7)
        })),
        case("add", vec![vec![3, 3], vec![3, 3]], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 8)
        })),
        case("sub", vec![vec![3, 3], vec![3, 3]], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 9)
        })),
        case("mul", vec![vec![3, 3], vec![3, 3]], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 10)
        })),
        case("softmax", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, 11)
        })),
        case("log_softmax", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.log_softmax(v[0])?;
            project(g, y, 12)
        })),
        case("concat_cols", vec![vec![3, 2], vec![3, 4]], Box::new(|g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            project(g, y, 13)
        })),
        case("gru_cell", vec![vec![2, 3], vec![2, 4], vec![3, 12], vec![4, 12], vec![12], vec![12]], Box::new(|g, v| {
            let y = gru_step(g, v)?;
            project(g, y, 14)
        })),
        case("sigmoid", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.sigmoid(v[0])?;
            project(g, y, 15)
        })),
        case("tanh", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.tanh(v[0])?;
            project(g, y, 16)
        })),
        case("exp", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.exp(v[0])?;
            project(g, y, 17)
        })),
        case("abs", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.abs(v[0])?;
            project(g, y, 19)
        })),
        case("square", vec![vec![4, 3]], Box::new(|g, v| {
            let y = g.square(v[0])?;
            project(g, y, 20)
        })),
        case("normalize_channels", vec![vec![2, 3, 2, 2]], Box::new(|g, v| {
            let y = g.normalize_channels(v[0])?;
            project(g, y, 21)
        })),
        case("slice_cols", vec![vec![3, 6]], Box::new(|g, v| {
            let y = g.slice_cols(v[0], 2, 3)?;
            project(g, y, 22)
        })),
        case("slice_rows", vec![vec![5, 2, 2]], Box::new(|g, v| {
            let y = g.slice_rows(v[0], 1, 3)?;
            project(g, y, 23)
        })),
        case("pick_cols", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.pick_cols(v[0], &[2, 0, 3])?;
            project(g, y, 24)
        })),
        case("minimum", vec![vec![3, 4], vec![3, 4]], Box::new(|g, v| {
            let y = g.minimum(v[0], v[1])?;
            project(g, y, 25)
        })),
        case("clamp", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.clamp(v[0], -0.5, 0.5)?;
            project(g, y, 26)
        })),
        case("scale_add_scalar", vec![vec![3, 4]], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7)?;
            let y = g.add_scalar(y, 0.3)?;
            project(g, y, 27)
        })),
        case("mean_reshape", vec![vec![2, 6]], Box::new(|g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            let y = g.square(y)?;
            g.mean(y)
        })),
    ];
    // log needs strictly positive inputs
    cases.push(LayerCase {
        name: "log",
        shapes: vec![vec![4, 3]],
        scale: 0.5,
        offset: 1.0,
        build: Box::new(|g, v| {
            let y = g.log(v[0])?;
            project(g, y, 18)
        }),
    });
    cases
}

fn gru_step(g: &mut Graph<f64>, v: &[Var]) -> Result<Var, MathError> {
    // same wiring as `nn::GruCell::forward`, on plain inputs
    let hs = g.shape(v[1])[1];
    let gi = g.matmul(v[0], v[2])?;
    let gi = g.add_row(gi, v[4])?;
    let gh = g.matmul(v[1], v[3])?;
    let gh = g.add_row(gh, v[5])?;
    let (i_r, i_z, i_n) = (g.slice_cols(gi, 0, hs)?, g.slice_cols(gi, hs, hs)?, g.slice_cols(gi, 2 * hs, hs)?);
    let (h_r, h_z, h_n) = (g.slice_cols(gh, 0, hs)?, g.slice_cols(gh, hs, hs)?, g.slice_cols(gh, 2 * hs, hs)?);
    let r = g.add(i_r, h_r)?;
    let r = g.sigmoid(r)?;
    let z = g.add(i_z, h_z)?;
    let z = g.sigmoid(z)?;
    let rn = g.mul(r, h_n)?;
    let n = g.add(i_n, rn)?;
    let n = g.tanh(n)?;
    let d = g.sub(v[1], n)?;
    let zd = g.mul(z, d)?;
    g.add(n, zd)
}

/// Worst relative error of `case` over `instances` random draws.
pub fn check_case(case: &LayerCase, instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let inputs: Vec<Tensor<f64>> = case
            .shapes
            .iter()
            .map(|s| random_tensor(&mut rng, s, case.scale).map(|v| v + case.offset))
            .collect();
        worst = worst.max(max_rel_error(&inputs, case.build.as_ref()));
    }
    worst
}
