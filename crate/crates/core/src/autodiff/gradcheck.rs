use super::{DiffArray, Graph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`, maximized
    /// over every input coordinate.
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

const DENOMINATOR_FLOOR: f64 = 1e-3;

/// Compares the backward pass of `build` against central differences.
///
/// `build` receives one graph leaf per entry of `inputs` and returns any
/// output; non-scalar outputs are reduced with fixed pseudo-random weights so
/// every output coordinate contributes.
pub fn gradient_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[DiffArray]) -> Result<DiffArray>,
{
    let mut weights: Option<Vec<f64>> = None;
    let mut eval = |inputs: &[Tensor], with_grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let leaves: Vec<DiffArray> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        let scalar = if g.value(out).len() == 1 {
            out
        } else {
            let n = g.value(out).len();
            let w = weights.get_or_insert_with(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
            });
            g.weighted_sum(out, w.clone())?
        };
        let value = g.value(scalar).item();
        let mut grads = Vec::new();
        if with_grad {
            g.backward(scalar)?;
            for (leaf, t) in leaves.iter().zip(inputs) {
                grads.push(g.grad(*leaf).unwrap_or_else(|| Tensor::zeros(t.shape())));
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let (plus, _) = eval(&probe, false)?;
            probe[k].data_mut()[i] = orig - eps;
            let (minus, _) = eval(&probe, false)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}

/// Result of checking one kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelCheck {
    pub kernel: &'static str,
    pub report: GradCheckReport,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Like [`random`] but at least `gap` away from zero, so kinks at 0 are
/// never straddled by a finite-difference probe.
fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Finite-difference checks of every differentiable kernel on seeded random
/// inputs, at `eps = 1e-5`.
pub fn kernel_suite(seed: u64) -> Result<Vec<KernelCheck>> {
    use crate::geometry::AxisAlignedBox;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let mut out = Vec::new();
    let mut check = |kernel: &'static str, report: GradCheckReport| {
        out.push(KernelCheck { kernel, report });
    };

    let x = random(&mut rng, &[2, 2, 5, 5]);
    let k = random(&mut rng, &[3, 2, 3, 3]);
    let b = random(&mut rng, &[3]);
    check(
        "conv2d",
        gradient_check(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1), &[x, k, b], eps)?,
    );
    let x = random(&mut rng, &[1, 2, 4, 4]);
    let k = random(&mut rng, &[2, 2, 1, 1]);
    check(
        "conv2d_1x1",
        gradient_check(|g, v| g.conv2d(v[0], v[1], None, 1, 0), &[x, k], eps)?,
    );
    let x = random_away_from_zero(&mut rng, &[2, 3, 4], 0.05);
    check("relu", gradient_check(|g, v| g.relu(v[0]), &[x], eps)?);
    let x = random(&mut rng, &[1, 2, 5, 6]);
    check("max_pool2", gradient_check(|g, v| g.max_pool2(v[0]), &[x], eps)?);
    let x = random(&mut rng, &[2, 3, 3, 4]);
    check(
        "global_avg_pool",
        gradient_check(|g, v| g.global_avg_pool(v[0]), &[x], eps)?,
    );
    let x = random(&mut rng, &[3, 2, 2]);
    let w = random(&mut rng, &[4, 5]);
    let b = random(&mut rng, &[5]);
    check(
        "affine",
        gradient_check(|g, v| g.affine(v[0], v[1], Some(v[2])), &[x, w, b], eps)?,
    );
    let x = random(&mut rng, &[1, 2, 6, 6]);
    let rois = [
        AxisAlignedBox::from_corners(0.0, 0.0, 48.0, 48.0),
        AxisAlignedBox::from_corners(10.0, 20.0, 40.0, 30.0),
        AxisAlignedBox::from_corners(33.0, 3.0, 35.0, 5.0),
    ];
    check(
        "roi_pool",
        gradient_check(|g, v| g.roi_pool(v[0], &rois, 3, 2, 1.0 / 8.0), &[x], eps)?,
    );
    let x = random(&mut rng, &[3, 4]);
    check(
        "gather",
        gradient_check(|g, v| g.gather(v[0], vec![11, 0, 5, 5, 7, 2], &[2, 3]), &[x], eps)?,
    );
    let x = random(&mut rng, &[4, 5]);
    check(
        "softmax_cross_entropy",
        gradient_check(|g, v| g.softmax_cross_entropy(v[0], &[0, 4, 2, 2]), &[x], eps)?,
    );
    let x = random_away_from_zero(&mut rng, &[2, 4], 0.05);
    let zeros = vec![0.0; 8];
    check(
        "l1_loss",
        gradient_check(|g, v| g.l1_loss(v[0], &zeros, false), std::slice::from_ref(&x), eps)?,
    );
    let x = Tensor::from_fn(&[8], |i| x.data()[i] * 3.0);
    check(
        "smooth_l1_loss",
        gradient_check(|g, v| g.l1_loss(v[0], &zeros, true), &[x], eps)?,
    );
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[2, 3]);
    check("add", gradient_check(|g, v| g.add(v[0], v[1]), &[a, b], eps)?);
    let a = random(&mut rng, &[5]);
    check("scale", gradient_check(|g, v| g.scale(v[0], -2.5), &[a], eps)?);
    let a = random(&mut rng, &[4]);
    check(
        "weighted_sum",
        gradient_check(|g, v| g.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.0]), &[a], eps)?,
    );
    Ok(out)
}
