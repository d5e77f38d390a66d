//! Finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::Padding;
use crate::model::{self, BoundParams, SftConfig, SftParams};
use crate::nn;
use crate::objective::{long_loss_node, LongLossParams};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    pub pass: bool,
}

/// Central-difference step suited to the precision. In 32-bit, rounding of
/// the forward value dominates below about a hundredth; prefer
/// [`grad_check_mixed`] there. In 64-bit, smaller steps than 1e-4 let
/// rounding swamp gradient entries near 1e-7 in the full model.
pub fn default_step<T: Scalar>() -> f64 {
    if std::mem::size_of::<T>() == 4 {
        1e-2
    } else {
        1e-4
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradient of the scalar built by `f` against central
/// differences, element by element, over every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], tol: f64, step: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    let analytic: Vec<Tensor<f64>> = analytic_gradients(&f, inputs)?
        .iter()
        .map(|t| t.cast())
        .collect();
    compare(&f, inputs, &analytic, tol, step)
}

/// Checks 32-bit analytic gradients against central differences of the same
/// function evaluated in 64-bit, so that the oracle's own rounding noise
/// stays far below `tol`.
pub fn grad_check_mixed<F32, F64>(
    f32_fn: F32,
    f64_fn: F64,
    inputs: &[Tensor<f32>],
    tol: f64,
) -> Result<GradCheckReport>
where
    F32: Fn(&mut Graph<f32>, &[NodeId]) -> Result<NodeId>,
    F64: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let analytic: Vec<Tensor<f64>> = analytic_gradients(&f32_fn, inputs)?
        .iter()
        .map(|t| t.cast())
        .collect();
    let wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    compare(&f64_fn, &wide, &analytic, tol, default_step::<f64>())
}

fn analytic_gradients<T, F>(f: &F, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("grad_check inputs must be finite"));
    }
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let root = f(&mut g, &ids)?;
    let mut grads = g.backward(root)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, x)| grads.take(id).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect())
}

fn compare<T, F>(
    f: &F,
    inputs: &[Tensor<T>],
    analytic: &[Tensor<f64>],
    tol: f64,
    step: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
{
    if !(tol > 0.0) || !(step > 0.0) {
        return Err(Error::invalid("grad_check needs tol > 0 and step > 0"));
    }
    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.param(x.clone())).collect();
        let root = f(&mut g, &ids)?;
        g.value(root)
            .item()
            .map(|v| v.as_f64())
            .ok_or_else(|| Error::NonScalarRoot(g.shape(root).to_vec()))
    };
    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
        pass: true,
    };
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = T::from_f64_lossy(orig.as_f64() + step);
            let up = eval(&work)?;
            work[i].data_mut()[e] = T::from_f64_lossy(orig.as_f64() - step);
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic[i].data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, e);
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}

type Builder<T> = Box<dyn Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId> + Send + Sync>;
type Sampler<T> = Box<dyn Fn(&mut Rng) -> Vec<Tensor<T>> + Send + Sync>;

/// A named scalar function plus a generator of random inputs for it.
pub struct GradCase<T: Scalar> {
    pub name: &'static str,
    pub build: Builder<T>,
    pub sample: Sampler<T>,
}

/// Projects `y` onto fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn project<T: Scalar>(g: &mut Graph<T>, y: NodeId) -> Result<NodeId> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut Rng::new(0x00c0_ffee));
    let w = g.constant(w);
    nn::dot(g, y, w)
}

fn normal<T: Scalar>(shapes: &'static [&'static [usize]]) -> Sampler<T> {
    Box::new(move |rng| shapes.iter().map(|s| Tensor::randn(s, 1.0, rng)).collect())
}

fn case<T: Scalar>(
    name: &'static str,
    sample: Sampler<T>,
    build: impl Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId> + Send + Sync + 'static,
) -> GradCase<T> {
    GradCase {
        name,
        build: Box::new(build),
        sample,
    }
}

/// One case per supported op plus the composite layers and losses.
pub fn op_cases<T: Scalar>() -> Vec<GradCase<T>> {
    vec![
        case("add", normal(&[&[3, 4], &[3, 4]]), |g, x| {
            let y = g.add(x[0], x[1])?;
            project(g, y)
        }),
        case("add_broadcast", normal(&[&[3, 4], &[4]]), |g, x| {
            let y = g.add(x[0], x[1])?;
            project(g, y)
        }),
        case("sub", normal(&[&[2, 5], &[5]]), |g, x| {
            let y = g.sub(x[0], x[1])?;
            project(g, y)
        }),
        case("mul", normal(&[&[3, 4], &[3, 4]]), |g, x| {
            let y = g.mul(x[0], x[1])?;
            project(g, y)
        }),
        case("mul_broadcast", normal(&[&[2, 3, 4], &[4]]), |g, x| {
            let y = g.mul(x[0], x[1])?;
            project(g, y)
        }),
        case("scale", normal(&[&[6]]), |g, x| {
            let y = g.scale(x[0], T::from_f64_lossy(-1.75));
            project(g, y)
        }),
        case("add_scalar", normal(&[&[6]]), |g, x| {
            let y = g.add_scalar(x[0], T::from_f64_lossy(0.5));
            let y = g.mul(y, y)?;
            project(g, y)
        }),
        case("exp", normal(&[&[5]]), |g, x| {
            let y = g.exp(x[0]);
            project(g, y)
        }),
        case(
            "log",
            Box::new(|rng| vec![Tensor::rand_uniform(&[5], 0.5, 2.0, rng)]),
            |g, x| {
                let y = g.log(x[0])?;
                project(g, y)
            },
        ),
        case(
            "sqrt",
            Box::new(|rng| vec![Tensor::rand_uniform(&[5], 0.5, 2.0, rng)]),
            |g, x| {
                let y = g.sqrt(x[0])?;
                project(g, y)
            },
        ),
        case("matmul", normal(&[&[3, 4], &[4, 2]]), |g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y)
        }),
        case("transpose", normal(&[&[3, 4]]), |g, x| {
            let y = g.transpose(x[0])?;
            project(g, y)
        }),
        case(
            "conv2d_same_stride2",
            normal(&[&[2, 2, 5, 6], &[3, 2, 3, 3], &[3]]),
            |g, x| {
                let y = g.conv2d(x[0], x[1], x[2], 2, Padding::Same)?;
                project(g, y)
            },
        ),
        case(
            "conv2d_valid",
            normal(&[&[1, 2, 5, 5], &[2, 2, 3, 3], &[2]]),
            |g, x| {
                let y = g.conv2d(x[0], x[1], x[2], 1, Padding::Valid)?;
                project(g, y)
            },
        ),
        case("conv1d", normal(&[&[6, 3], &[2, 3, 3], &[2]]), |g, x| {
            let y = g.conv1d(x[0], x[1], x[2], Padding::Same)?;
            project(g, y)
        }),
        case("relu", normal(&[&[12]]), |g, x| {
            let y = g.relu(x[0]);
            project(g, y)
        }),
        case("gelu", normal(&[&[12]]), |g, x| {
            let y = g.gelu(x[0]);
            project(g, y)
        }),
        case("layer_norm", normal(&[&[3, 5]]), |g, x| {
            let y = g.layer_norm(x[0], T::from_f64_lossy(nn::LAYER_NORM_EPS));
            project(g, y)
        }),
        case("softmax", normal(&[&[2, 4]]), |g, x| {
            let y = g.softmax(x[0]);
            project(g, y)
        }),
        case("mean_axis", normal(&[&[2, 3, 4]]), |g, x| {
            let y = g.mean_axis(x[0], 1)?;
            project(g, y)
        }),
        case("max_axis", normal(&[&[3, 4]]), |g, x| {
            let y = g.max_axis(x[0], 0)?;
            project(g, y)
        }),
        case("sum", normal(&[&[2, 3]]), |g, x| Ok(g.sum(x[0]))),
        case("reshape", normal(&[&[2, 6]]), |g, x| {
            let y = g.reshape(x[0], &[3, 4])?;
            project(g, y)
        }),
        case("concat", normal(&[&[2, 3], &[2, 2]]), |g, x| {
            let y = g.concat(&[x[0], x[1]], 1)?;
            project(g, y)
        }),
        case("narrow_strided", normal(&[&[8, 2]]), |g, x| {
            let y = g.narrow(x[0], 0, 1, 3, 3)?;
            project(g, y)
        }),
        case("cross_entropy", normal(&[&[3, 4]]), |g, x| {
            let y = g.cross_entropy(x[0], &[0, 3, 1])?;
            project(g, y)
        }),
        case(
            "embedding",
            normal(&[&[4, 3], &[3, 5], &[5], &[4, 5]]),
            |g, x| {
                let y = nn::embedding(g, x[0], x[1], x[2], x[3])?;
                project(g, y)
            },
        ),
        case(
            "attention",
            Box::new(|rng| {
                let mut v = vec![Tensor::randn(&[4, 6], 1.0, rng)];
                for i in 0..4 {
                    v.push(Tensor::randn(&[6, 6], 0.5, rng));
                    // no key bias (index 1): its true gradient is exactly zero
                    if i != 1 {
                        v.push(Tensor::randn(&[6], 0.5, rng));
                    }
                }
                v
            }),
            |g, x| {
                let w = nn::AttentionWeights {
                    wq: x[1],
                    bq: x[2],
                    wk: x[3],
                    bk: None,
                    wv: x[4],
                    bv: x[5],
                    wo: x[6],
                    bo: x[7],
                };
                let y = nn::multi_head_attention(g, x[0], &w, 2)?.output;
                project(g, y)
            },
        ),
        case("long_loss", normal(&[&[4, 5]]), |g, x| {
            long_loss_node(
                g,
                x[0],
                &[0, 4, 2, 2],
                &[4.0, 9.5, 15.0, 20.0],
                &LongLossParams::default(),
            )
        }),
    ]
}

/// Full model forward on a 2-clip batch followed by the long-range loss.
/// Inputs are the parameters (declared order) followed by the two clips.
pub fn sft_case<T: Scalar>(config: SftConfig) -> GradCase<T> {
    let sample_cfg = config.clone();
    GradCase {
        name: "sft_forward_long_loss",
        sample: Box::new(move |rng| {
            // Jitter the initialization: zero biases put ReLU inputs exactly
            // on the kink, where one-sided slopes differ.
            let params = SftParams::<T>::init(&sample_cfg, rng).expect("valid config");
            let mut v: Vec<Tensor<T>> = params
                .tensors()
                .iter()
                .map(|t| {
                    let noise = Tensor::<T>::randn(t.shape(), 0.1, rng);
                    let data = t.data().iter().zip(noise.data()).map(|(&a, &b)| a + b).collect();
                    Tensor::new(t.shape().to_vec(), data).expect("same shape")
                })
                .collect();
            for _ in 0..2 {
                v.push(Tensor::rand_uniform(&sample_cfg.input_shape(), 0.0, 1.0, rng));
            }
            v
        }),
        build: Box::new(move |g, x| {
            let n = x.len() - 2;
            let bound = BoundParams::from_ids(&config, &x[..n])?;
            let labels = [1 % config.n_classes, 2 % config.n_classes];
            model::batch_loss(g, &bound, &x[n..], &labels, &[6.0, 17.5], &LongLossParams::default())
        }),
    }
}

/// Result of running one case over several random instances.
#[derive(Debug, Clone, Serialize)]
pub struct CaseSummary {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub fn run_case<T: Scalar>(
    case: &GradCase<T>,
    instances: usize,
    seed: u64,
    tol: f64,
) -> Result<CaseSummary> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = Rng::stream(seed, i as u64);
        let inputs = (case.sample)(&mut rng);
        let r = grad_check(&case.build, &inputs, tol, default_step::<T>())?;
        worst = worst.max(r.max_rel_err);
    }
    Ok(CaseSummary {
        name: case.name,
        instances,
        max_rel_err: worst,
        pass: worst < tol,
    })
}

/// [`run_case`] for 32-bit gradients with the 64-bit difference oracle; both
/// cases must describe the same function.
pub fn run_case_mixed(
    narrow: &GradCase<f32>,
    wide: &GradCase<f64>,
    instances: usize,
    seed: u64,
    tol: f64,
) -> Result<CaseSummary> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = Rng::stream(seed, i as u64);
        let inputs = (narrow.sample)(&mut rng);
        let r = grad_check_mixed(&narrow.build, &wide.build, &inputs, tol)?;
        worst = worst.max(r.max_rel_err);
    }
    Ok(CaseSummary {
        name: narrow.name,
        instances,
        max_rel_err: worst,
        pass: worst < tol,
    })
}
