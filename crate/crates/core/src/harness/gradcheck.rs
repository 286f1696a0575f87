use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, finite_diff_check_floored, GradCheckReport, REL_ERROR_FLOOR, Graph, Mode, Tensor, Var};
use crate::error::Result;
use crate::losses::{ce_graph, cons_graph, squint_graph, total_loss_graph, LossConfig, SampleOutput};
use crate::model::{ModelConfig, ModelInput, VqaModel};
use crate::synth::{Image, Point, Region};

pub const FD_EPS: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor for the micro model, whose many-op objective leaves
/// about 1e-11 of rounding noise in each difference quotient.
pub const MODEL_REL_ERROR_FLOOR: f64 = 1e-7;
pub const LOSS_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Passed to [`LossConfig::hinge_grad_scale`]; -1 flips the hinge gradient.
    pub hinge_grad_scale: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { seed: 7, hinge_grad_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn pass(&self) -> bool {
        self.report.pass
    }

    pub fn line(&self) -> String {
        let r = &self.report;
        format!(
            "{} {:<28} max_rel_error {:.3e} (tol {:.0e}) worst coord {} analytic {:.6e} numeric {:.6e}",
            if r.pass { "PASS" } else { "FAIL" },
            self.name,
            r.max_rel_error,
            self.tolerance,
            r.worst_coordinate,
            r.analytic_at_worst,
            r.numeric_at_worst
        )
    }
}

/// Keeps the worse of two reports; coordinates accumulate.
fn merge(acc: Option<GradCheckReport>, r: GradCheckReport) -> GradCheckReport {
    match acc {
        None => r,
        Some(a) => {
            let coordinates = a.coordinates + r.coordinates;
            let pass = a.pass && r.pass;
            let mut worst = if r.max_rel_error > a.max_rel_error || !r.max_rel_error.is_finite() { r } else { a };
            worst.coordinates = coordinates;
            worst.pass = pass;
            worst
        }
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Checks `build` applied to leaves of the given shapes, reduced to a scalar
/// through a fixed random projection.
fn check_op(
    name: &str,
    shapes: &[&[usize]],
    range: (f64, f64),
    rng: &mut ChaCha8Rng,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<SuiteResult> {
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let point = random_vec(rng, sizes.iter().sum(), range.0, range.1);
    let proj_seed: u64 = rng.random();
    let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let mut offset = 0;
        let mut leaves = Vec::new();
        for (shape, &n) in shapes.iter().zip(&sizes) {
            leaves.push(g.leaf(Tensor::from_vec(shape, x[offset..offset + n].to_vec())?));
            offset += n;
        }
        let y = build(&mut g, &leaves)?;
        let len = g.value(y)?.len();
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let proj = Tensor::from_vec(g.shape(y)?, random_vec(&mut prng, len, -1.0, 1.0))?;
        let proj = g.constant(proj);
        let prod = g.mul(y, proj)?;
        let out = g.sum(prod)?;
        let grads = g.backward(out)?;
        let mut grad = Vec::with_capacity(x.len());
        for l in &leaves {
            grad.extend(grads.wrt(*l)?.into_data());
        }
        Ok((g.value(out)?.item(), grad))
    };
    let (_, analytic) = eval(&point)?;
    let report = finite_diff_check(
        |x| eval(x).map(|(v, _)| v).unwrap_or(f64::NAN),
        &point,
        &analytic,
        FD_EPS,
        OP_TOLERANCE,
    );
    Ok(SuiteResult { name: format!("diffcore.{name}"), tolerance: OP_TOLERANCE, report })
}

pub fn diffcore_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let any = (-1.0, 1.0);
    let pos = (0.2, 2.0);
    Ok(vec![
        check_op("add", &[&[3, 4], &[3, 4]], any, r, |g, v| g.add(v[0], v[1]))?,
        check_op("sub", &[&[5], &[5]], any, r, |g, v| g.sub(v[0], v[1]))?,
        check_op("mul", &[&[2, 3], &[2, 3]], any, r, |g, v| g.mul(v[0], v[1]))?,
        check_op("scale", &[&[4]], any, r, |g, v| g.scale(v[0], 1.7))?,
        check_op("matmul", &[&[3, 4], &[4, 2]], any, r, |g, v| g.matmul(v[0], v[1]))?,
        check_op("add_row", &[&[3, 4], &[4]], any, r, |g, v| g.add_row(v[0], v[1]))?,
        check_op("add_col", &[&[3, 4], &[3]], any, r, |g, v| g.add_col(v[0], v[1]))?,
        check_op("conv2d", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], any, r, |g, v| {
            g.conv2d(v[0], v[1], v[2], 1, 1)
        })?,
        check_op("conv2d_strided", &[&[2, 6, 6], &[2, 2, 3, 3], &[2]], any, r, |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 0)
        })?,
        check_op("max_pool2d", &[&[2, 4, 4]], any, r, |g, v| g.max_pool2d(v[0], 2))?,
        check_op("relu", &[&[8]], any, r, |g, v| g.relu(v[0]))?,
        check_op("hinge", &[&[8]], any, r, |g, v| g.hinge(v[0]))?,
        check_op("tanh", &[&[6]], any, r, |g, v| g.tanh(v[0]))?,
        check_op("sigmoid", &[&[6]], any, r, |g, v| g.sigmoid(v[0]))?,
        check_op("ln", &[&[6]], pos, r, |g, v| g.ln(v[0]))?,
        check_op("clamp_min", &[&[6]], pos, r, |g, v| g.clamp_min(v[0], 1.0))?,
        check_op("softmax_rows", &[&[3, 5]], any, r, |g, v| g.softmax(v[0], 1))?,
        check_op("softmax_cols", &[&[3, 5]], any, r, |g, v| g.softmax(v[0], 0))?,
        check_op("embedding", &[&[6, 3]], any, r, |g, v| g.embedding(v[0], &[4, 1, 4]))?,
        check_op("concat", &[&[2, 2], &[3]], any, r, |g, v| g.concat(&[v[0], v[1]]))?,
        check_op("sum", &[&[7]], any, r, |g, v| g.sum(v[0]))?,
        check_op("mean", &[&[7]], any, r, |g, v| g.mean(v[0]))?,
        check_op("index", &[&[5]], any, r, |g, v| g.index(v[0], 3))?,
        check_op("reshape", &[&[2, 3]], any, r, |g, v| g.reshape(v[0], &[3, 2]))?,
        check_op("dropout", &[&[12]], any, r, |g, v| {
            let mut drng = ChaCha8Rng::seed_from_u64(5);
            g.dropout(v[0], 0.5, Mode::Train, &mut drng)
        })?,
        check_op("spatial_weighted_sum", &[&[2, 6], &[3, 6]], any, r, |g, v| {
            g.spatial_weighted_sum(v[0], v[1])
        })?,
    ])
}

/// A random distribution over `n` answers whose `answer` entry equals `pa`.
fn dist_with(rng: &mut ChaCha8Rng, n: usize, answer: usize, pa: f64) -> Vec<f64> {
    let rest = random_vec(rng, n - 1, 0.1, 1.0);
    let total: f64 = rest.iter().sum();
    let mut out = Vec::with_capacity(n);
    let mut it = rest.iter();
    for k in 0..n {
        if k == answer {
            out.push(pa);
        } else {
            out.push((1.0 - pa) * it.next().expect("n - 1 entries") / total);
        }
    }
    out
}

/// Main-question answer probability with entropy `H` kept `margin` away from
/// `gamma` and `p >= 0.2`, so a finite-difference step cannot cross the kink.
fn main_prob(rng: &mut ChaCha8Rng, gamma: f64, margin: f64) -> f64 {
    loop {
        let h: f64 = rng.random_range(0.0..1.6);
        if (h - gamma).abs() > margin {
            return (-h).exp();
        }
    }
}

fn leaves(g: &mut Graph<f64>, x: &[f64], n: usize) -> Result<Vec<Var>> {
    x.chunks(n)
        .map(|c| Ok(g.leaf(Tensor::from_vec(&[n], c.to_vec())?)))
        .collect()
}

fn gradient_of(g: &Graph<f64>, out: Var, vars: &[Var]) -> Result<Vec<f64>> {
    let grads = g.backward(out)?;
    let mut v = Vec::new();
    for &x in vars {
        v.extend(grads.wrt(x)?.into_data());
    }
    Ok(v)
}

/// `eval(context, x)` returns the value and gradient at `x`.
fn check_points<C>(
    name: &str,
    tolerance: f64,
    floor: f64,
    points: Vec<(C, Vec<f64>)>,
    eval: impl Fn(&C, &[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<SuiteResult> {
    let mut acc = None;
    for (c, p) in points {
        let (_, analytic) = eval(&c, &p)?;
        let f = |x: &[f64]| eval(&c, x).map(|(v, _)| v).unwrap_or(f64::NAN);
        acc = Some(merge(acc, finite_diff_check_floored(f, &p, &analytic, FD_EPS, tolerance, floor)));
    }
    Ok(SuiteResult {
        name: name.to_string(),
        tolerance,
        report: acc.expect("at least one point"),
    })
}

/// The penalty composed with the two entropies and the objective over a
/// small paired batch, each at [`LOSS_POINTS`] random points.
pub fn loss_suites(opts: &GradcheckOptions) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let cfg = LossConfig { hinge_grad_scale: opts.hinge_grad_scale, ..LossConfig::default() };
    let margin = 10.0 * FD_EPS;
    const N: usize = 5;

    let mut cons_points = Vec::new();
    for _ in 0..LOSS_POINTS {
        let (a, b) = (rng.random_range(0..N), rng.random_range(0..N));
        let ps = rng.random_range(0.05..0.99);
        let pm = main_prob(&mut rng, cfg.gamma, margin);
        let mut p = dist_with(&mut rng, N, a, ps);
        p.extend(dist_with(&mut rng, N, b, pm));
        cons_points.push(((a, b), p));
    }
    let cons = check_points("cons_loss", LOSS_TOLERANCE, REL_ERROR_FLOOR, cons_points, |&(a, b), x| {
        let mut g = Graph::new();
        let v = leaves(&mut g, x, N)?;
        let hi = ce_graph(&mut g, v[0], a, 1.0)?;
        let hj = ce_graph(&mut g, v[1], b, 1.0)?;
        let out = cons_graph(&mut g, hi, hj, &cfg)?;
        Ok((g.value(out)?.item(), gradient_of(&g, out, &v)?))
    })?;

    // Six samples; (0, 1) and (2, 3) are pairs, 4 and 5 are unpaired.
    let pairs = [(0usize, 1usize), (2, 3)];
    let weights = [1.3, 0.7, 1.0, 2.1, 0.4, 1.0];
    let mut batch_points = Vec::new();
    for _ in 0..LOSS_POINTS {
        let ans: Vec<usize> = (0..6).map(|_| rng.random_range(0..N)).collect();
        let mut p = Vec::new();
        for (k, &a) in ans.iter().enumerate() {
            let pa = if k == 1 || k == 3 {
                main_prob(&mut rng, cfg.gamma, margin)
            } else {
                rng.random_range(0.05..0.99)
            };
            p.extend(dist_with(&mut rng, N, a, pa));
        }
        batch_points.push((ans, p));
    }
    let total = check_points("total_loss", LOSS_TOLERANCE, REL_ERROR_FLOOR, batch_points, |ans: &Vec<usize>, x| {
        let mut g = Graph::new();
        let v = leaves(&mut g, x, N)?;
        let samples: Vec<SampleOutput> = v
            .iter()
            .zip(ans)
            .zip(weights)
            .map(|((&probs, &answer), weight)| SampleOutput { probs, maps: None, answer, weight })
            .collect();
        let out = total_loss_graph(&mut g, &samples, &pairs, &cfg)?.total;
        Ok((g.value(out)?.item(), gradient_of(&g, out, &v)?))
    })?;

    let squint_points = (0..10).map(|_| ((), random_vec(&mut rng, 16, 0.0, 1.0))).collect();
    let squint = check_points("squint_loss", LOSS_TOLERANCE, REL_ERROR_FLOOR, squint_points, |_, x| {
        let mut g = Graph::new();
        let v = leaves(&mut g, x, 8)?;
        let out = squint_graph(&mut g, v[0], v[1])?;
        Ok((g.value(out)?.item(), gradient_of(&g, out, &v)?))
    })?;
    Ok(vec![cons, total, squint])
}

/// End-to-end gradient of the paired objective through the micro model, with
/// respect to every parameter, dropout active under a fixed mask.
pub fn model_suite(opts: &GradcheckOptions) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let config = ModelConfig::micro();
    let side = config.image_size as u32;
    let model = VqaModel::<f64>::init(config.clone(), opts.seed)?;
    let mut image = Image::zeros(side, side, 1);
    for v in &mut image.data {
        *v = rng.random();
    }
    let whole = Region::whole(side, side);
    let region = Region::custom(Point::new(6.0, 9.0), 5.5);
    let main_tokens = [2, 5, 7, 9, 11, 3, 0, 0];
    let sub_tokens = [4, 8, 12, 13, 1, 6, 14, 15];
    let loss = LossConfig { hinge_grad_scale: opts.hinge_grad_scale, ..LossConfig::default() };
    // Zero biases would put every masked-out pixel exactly on the ReLU kink.
    let point: Vec<f64> = model.params.flatten().iter().map(|w| w + rng.random_range(-0.1..0.1)).collect();

    let eval = |_: &(), x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut m = model.clone();
        m.params.assign_flat(x)?;
        let mut g = Graph::new();
        let p = m.bind(&mut g);
        let mut drng = ChaCha8Rng::seed_from_u64(11);
        let sub = m.forward(
            &mut g,
            &p,
            ModelInput { image: &image, region: &region, token_ids: &sub_tokens },
            Mode::Train,
            &mut drng,
        )?;
        let main = m.forward(
            &mut g,
            &p,
            ModelInput { image: &image, region: &whole, token_ids: &main_tokens },
            Mode::Train,
            &mut drng,
        )?;
        let samples = [
            SampleOutput { probs: sub.probs, maps: None, answer: 1, weight: 1.5 },
            SampleOutput { probs: main.probs, maps: None, answer: 3, weight: 0.8 },
        ];
        let out = total_loss_graph(&mut g, &samples, &[(0, 1)], &loss)?.total;
        let mut grads = g.backward(out)?;
        let grad = m.params.collect_grads(&mut grads, &p)?;
        Ok((g.value(out)?.item(), grad.into_iter().flat_map(Tensor::into_data).collect()))
    };
    check_points("vqamodel.micro", MODEL_TOLERANCE, MODEL_REL_ERROR_FLOOR, vec![((), point)], eval)
}

/// Every suite: autodiff operations, loss composites, micro model.
pub fn run_all(opts: &GradcheckOptions) -> Result<Vec<SuiteResult>> {
    let mut out = diffcore_suites(opts.seed)?;
    out.extend(loss_suites(opts)?);
    out.push(model_suite(opts)?);
    Ok(out)
}
