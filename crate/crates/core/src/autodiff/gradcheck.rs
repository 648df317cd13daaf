use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Tensor, Var};

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compare the backward gradient of the scalar function `f` at `x` against
/// central differences over every coordinate. Returns the largest relative
/// error.
pub fn gradient_check<'a, F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradient_check_coords(f, x, eps, &coords)
}

/// [`gradient_check`] restricted to the listed coordinates.
pub fn gradient_check_coords<'a, F, E>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64, E>
where
    F: Fn(&mut Graph<'a>, Var) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let analytic = {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let y = f(&mut g, xv)?;
        let grads = g.backward(y)?;
        grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |t: Tensor| -> Result<f64, E> {
        let mut g = Graph::new();
        let xv = g.constant(t);
        let y = f(&mut g, xv)?;
        Ok(g.value(y).item())
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

type Unary = fn(&mut Graph<'static>, Var) -> Result<Var, AutodiffError>;

/// Gradient check of every primitive at a random point, each composed with
/// a random linear functional so that every output coordinate matters.
/// Returns `(primitive, max relative error)` pairs.
pub fn primitive_checks(eps: f64) -> Result<Vec<(&'static str, f64)>, AutodiffError> {
    fn weighted(g: &mut Graph<'static>, y: Var, seed: u64) -> Result<Var, AutodiffError> {
        // A random linear functional makes every output coordinate matter.
        let w = random_tensor(g.value(y).shape(), seed);
        let wv = g.constant(w);
        let p = g.mul(y, wv)?;
        g.sum_all(p)
    }
    let cases: Vec<(&'static str, &[usize], u64, Unary)> = vec![
        ("add", &[2, 3], 20, |g, x| {
            let c = g.constant(random_tensor(&[2, 3], 99));
            let y = g.add(x, c)?;
            let y = g.add(y, x)?;
            weighted(g, y, 1)
        }),
        ("sub", &[2, 3], 21, |g, x| {
            let c = g.constant(random_tensor(&[2, 3], 98));
            let y = g.sub(c, x)?;
            weighted(g, y, 2)
        }),
        ("mul", &[2, 3], 22, |g, x| {
            let y = g.mul(x, x)?;
            weighted(g, y, 3)
        }),
        ("matmul-left", &[2, 3], 23, |g, x| {
            let b = g.constant(random_tensor(&[3, 4], 97));
            let y = g.matmul(x, b)?;
            weighted(g, y, 4)
        }),
        ("matmul-right", &[3, 4], 24, |g, x| {
            let a = g.constant(random_tensor(&[2, 3], 96));
            let y = g.matmul(a, x)?;
            weighted(g, y, 5)
        }),
        ("concat0", &[2, 3], 25, |g, x| {
            let c = g.constant(random_tensor(&[1, 3], 95));
            let y = g.concat(&[x, c, x], 0)?;
            weighted(g, y, 6)
        }),
        ("concat1", &[2, 3], 26, |g, x| {
            let c = g.constant(random_tensor(&[2, 2], 94));
            let y = g.concat(&[c, x, x], 1)?;
            weighted(g, y, 7)
        }),
        ("tanh", &[2, 3], 27, |g, x| {
            let y = g.tanh(x)?;
            weighted(g, y, 8)
        }),
        ("sigmoid", &[2, 3], 28, |g, x| {
            let y = g.sigmoid(x)?;
            weighted(g, y, 9)
        }),
        ("exp", &[2, 3], 29, |g, x| {
            let y = g.exp(x)?;
            weighted(g, y, 10)
        }),
        ("log", &[2, 3], 30, |g, x| {
            let e = g.exp(x)?;
            let y = g.log(e)?;
            let y = g.mul(y, e)?;
            weighted(g, y, 11)
        }),
        ("sum0", &[3, 2], 31, |g, x| {
            let y = g.sum(x, Some(0))?;
            weighted(g, y, 12)
        }),
        ("sum1", &[3, 2], 32, |g, x| {
            let y = g.sum(x, Some(1))?;
            weighted(g, y, 13)
        }),
        ("mean0", &[3, 2], 33, |g, x| {
            let y = g.mean(x, 0)?;
            weighted(g, y, 14)
        }),
        ("mean1", &[3, 2], 34, |g, x| {
            let y = g.mean(x, 1)?;
            weighted(g, y, 15)
        }),
        ("add_bias-x", &[3, 2], 35, |g, x| {
            let b = g.constant(random_tensor(&[1, 2], 93));
            let y = g.add_bias(x, b)?;
            weighted(g, y, 16)
        }),
        ("add_bias-b", &[1, 2], 36, |g, b| {
            let x = g.constant(random_tensor(&[3, 2], 92));
            let y = g.add_bias(x, b)?;
            weighted(g, y, 17)
        }),
        ("gather_rows", &[4, 3], 37, |g, t| {
            let y = g.gather_rows(t, &[2, 0, 2, 3])?;
            weighted(g, y, 18)
        }),
        ("softmax1", &[2, 4], 38, |g, x| {
            let y = g.softmax(x, 1)?;
            weighted(g, y, 19)
        }),
        ("softmax0", &[4, 2], 39, |g, x| {
            let y = g.softmax(x, 0)?;
            weighted(g, y, 20)
        }),
        ("log_softmax", &[2, 4], 40, |g, x| {
            let y = g.log_softmax(x)?;
            weighted(g, y, 21)
        }),
        ("scale", &[2, 2], 41, |g, x| {
            let y = g.scale(x, -1.7)?;
            weighted(g, y, 22)
        }),
        ("add_scalar", &[2, 2], 42, |g, x| {
            let y = g.add_scalar(x, 0.3)?;
            let y = g.mul(y, y)?;
            weighted(g, y, 23)
        }),
        ("transpose", &[2, 3], 43, |g, x| {
            let y = g.transpose(x)?;
            weighted(g, y, 24)
        }),
        ("slice_rows", &[4, 3], 44, |g, x| {
            let y = g.slice_rows(x, 1, 2)?;
            weighted(g, y, 25)
        }),
        ("shift_rows", &[4, 3], 45, |g, x| {
            let a = g.shift_rows(x, 1)?;
            let b = g.shift_rows(x, -2)?;
            let y = g.concat(&[a, b], 1)?;
            weighted(g, y, 26)
        }),
        ("pick", &[3, 4], 46, |g, x| {
            let y = g.pick(x, &[3, 0, 3])?;
            weighted(g, y, 27)
        }),
        ("clamp", &[2, 3], 47, |g, x| {
            let y = g.clamp(x, -0.99, 0.99)?;
            let y = g.mul(y, y)?;
            weighted(g, y, 28)
        }),
        ("affine", &[2, 3], 48, |g, x| {
            let w = g.constant(random_tensor(&[3, 4], 91));
            let b = g.constant(random_tensor(&[1, 4], 90));
            let y = g.affine(x, w, b)?;
            weighted(g, y, 29)
        }),
        ("row", &[3, 4], 49, |g, x| {
            let a = g.row(x, 2)?;
            let b = g.row(x, 0)?;
            let y = g.concat(&[a, b], 0)?;
            weighted(g, y, 30)
        }),
    ];
    cases
        .into_iter()
        .map(|(name, shape, seed, f)| Ok((name, gradient_check(f, &random_tensor(shape, seed), eps)?)))
        .collect()
}
