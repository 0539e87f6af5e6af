use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{check_gradients, BuildFn, GradError, TOLERANCE};
use crate::error::{Error, Result};
use crate::losses::{self, LossParts, LossWeights, Schedules};
use crate::tensor::{avg_pool3_values, fault, softmax_values, BatchNormState, ConvSpec, Graph, Mode, Tensor, Var};

/// Backward rules that can be sabotaged for a self-test of the suite.
pub const FAULTABLE_OPS: [&str; 19] = [
    "conv2d",
    "batch_norm",
    "relu",
    "sigmoid",
    "abs",
    "add",
    "sub",
    "mul",
    "scale",
    "softmax_channels",
    "bilinear_resize",
    "avg_pool_3x3_same",
    "concat_channels",
    "gather_channels",
    "channel_max",
    "narrow_batch",
    "sum",
    "mean",
    "scalar_fn",
];

/// Sign flip of one op's backward rule for the duration of a suite run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub op: &'static str,
}

impl Fault {
    pub fn parse(name: &str) -> Result<Self> {
        FAULTABLE_OPS
            .iter()
            .find(|&&op| op == name)
            .map(|&op| Fault { op })
            .ok_or_else(|| Error::Config(format!("unknown op '{name}'; valid: {}", FAULTABLE_OPS.join(", "))))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub cases: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            cases: 10,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel: f64,
    pub max_abs: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub checks: Vec<CheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>5} {:>12} {:>12}  status\n",
            "check", "cases", "max_rel", "max_abs"
        );
        for c in &self.checks {
            s.push_str(&format!(
                "{:<24} {:>5} {:>12.3e} {:>12.3e}  {}\n",
                c.name,
                c.cases,
                c.max_rel,
                c.max_abs,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

type Gen = fn(&mut ChaCha8Rng) -> Case;

pub(crate) struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Box<BuildFn<'static>>,
}

impl Case {
    fn new(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Self {
        Self {
            inputs,
            build: Box::new(build),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero so kinked ops are differentiable at every probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

fn binary_map(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
}

/// Logits whose softmax differs from its 3×3 mean by at least 0.01 everywhere,
/// so `|M - pool(M)|` is smooth around every probe.
fn kink_free_logits(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    loop {
        let x = uniform(rng, shape, -2.0, 2.0);
        let m = softmax_values(&x).unwrap();
        let p = avg_pool3_values(&m).unwrap();
        if m.data().iter().zip(p.data()).all(|(a, b)| (a - b).abs() > 0.01) {
            return x;
        }
    }
}

fn labels(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<u8> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                crate::boundary_gt::IGNORE
            } else {
                rng.gen_range(0..c as u8)
            }
        })
        .collect()
}

fn registry() -> Vec<(&'static str, Gen)> {
    vec![
        ("conv2d", |r| {
            let groups = r.gen_range(1..3);
            let spec = ConvSpec::new(r.gen_range(1..3), r.gen_range(0..2), groups);
            let x = uniform(r, &[2, 2 * groups, 5, 4], -1.0, 1.0);
            let w = uniform(r, &[2 * groups, 2, 3, 3], -1.0, 1.0);
            let b = uniform(r, &[2 * groups], -1.0, 1.0);
            Case::new(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec))
        }),
        ("conv2d_1x1", |r| {
            let x = uniform(r, &[2, 3, 3, 3], -1.0, 1.0);
            let w = uniform(r, &[2, 3, 1, 1], -1.0, 1.0);
            Case::new(vec![x, w], |g, v| g.conv2d(v[0], v[1], None, ConvSpec::default()))
        }),
        ("batch_norm_train", |r| {
            let x = uniform(r, &[3, 2, 3, 2], -1.0, 1.0);
            let gamma = uniform(r, &[2], 0.5, 1.5);
            let beta = uniform(r, &[2], -1.0, 1.0);
            Case::new(vec![x, gamma, beta], |g, v| {
                let mut st = BatchNormState::new(2, 0.1, 1e-5);
                g.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train)
            })
        }),
        ("batch_norm_eval", |r| {
            let x = uniform(r, &[2, 2, 3, 2], -1.0, 1.0);
            let gamma = uniform(r, &[2], 0.5, 1.5);
            let beta = uniform(r, &[2], -1.0, 1.0);
            let (m, var) = (uniform(r, &[2], -0.5, 0.5), uniform(r, &[2], 0.5, 2.0));
            Case::new(vec![x, gamma, beta], move |g, v| {
                let mut st = BatchNormState::new(2, 0.1, 1e-5);
                st.running_mean = m.data().to_vec();
                st.running_var = var.data().to_vec();
                g.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval)
            })
        }),
        ("relu", |r| {
            Case::new(vec![away_from_zero(r, &[2, 2, 3, 3])], |g, v| Ok(g.relu(v[0])))
        }),
        ("sigmoid", |r| {
            Case::new(vec![uniform(r, &[2, 2, 3, 3], -3.0, 3.0)], |g, v| Ok(g.sigmoid(v[0])))
        }),
        ("abs", |r| {
            Case::new(vec![away_from_zero(r, &[2, 2, 3, 3])], |g, v| Ok(g.abs(v[0])))
        }),
        ("add", |r| {
            let (a, b) = (uniform(r, &[2, 2, 2, 2], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0));
            Case::new(vec![a, b], |g, v| g.add(v[0], v[1]))
        }),
        ("sub", |r| {
            let (a, b) = (
                uniform(r, &[2, 2, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 2, 2, 2], -1.0, 1.0),
            );
            Case::new(vec![a, b], |g, v| g.sub(v[0], v[1]))
        }),
        ("mul", |r| {
            let (a, b) = (
                uniform(r, &[2, 2, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 2, 2, 2], -1.0, 1.0),
            );
            Case::new(vec![a, b], |g, v| g.mul(v[0], v[1]))
        }),
        ("mul_scalar", |r| {
            let (a, b) = (uniform(r, &[1], -1.0, 1.0), uniform(r, &[2, 2, 2, 2], -1.0, 1.0));
            Case::new(vec![a, b], |g, v| g.mul(v[0], v[1]))
        }),
        ("scale", |r| {
            let f = r.gen_range(-2.0..2.0);
            Case::new(vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)], move |g, v| {
                Ok(g.scale(v[0], f))
            })
        }),
        ("softmax_channels", |r| {
            Case::new(vec![uniform(r, &[2, 3, 2, 3], -3.0, 3.0)], |g, v| {
                g.softmax_channels(v[0])
            })
        }),
        ("bilinear_resize", |r| {
            let (oh, ow) = (r.gen_range(1..9), r.gen_range(1..9));
            Case::new(vec![uniform(r, &[1, 2, 3, 4], -1.0, 1.0)], move |g, v| {
                g.bilinear_resize(v[0], oh, ow)
            })
        }),
        ("avg_pool_3x3_same", |r| {
            let (h, w) = (r.gen_range(1..6), r.gen_range(1..6));
            Case::new(vec![uniform(r, &[1, 2, h, w], -1.0, 1.0)], |g, v| {
                g.avg_pool_3x3_same(v[0])
            })
        }),
        ("concat_channels", |r| {
            let (a, b) = (
                uniform(r, &[2, 2, 2, 3], -1.0, 1.0),
                uniform(r, &[2, 1, 2, 3], -1.0, 1.0),
            );
            Case::new(vec![a, b], |g, v| g.concat_channels(&[v[0], v[1], v[0]]))
        }),
        ("slice_interleave", |r| {
            let (a, b) = (
                uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
                uniform(r, &[2, 3, 2, 2], -1.0, 1.0),
            );
            Case::new(vec![a, b], |g, v| g.slice_interleave(v[0], v[1]))
        }),
        ("gather_channels", |r| {
            let idx: Vec<usize> = (0..4).map(|_| r.gen_range(0..3)).collect();
            Case::new(vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)], move |g, v| {
                g.gather_channels(v[0], &idx)
            })
        }),
        ("channel_max", |r| {
            // distinct values keep the argmax stable under the finite-difference probe
            let mut t = uniform(r, &[2, 3, 2, 2], -1.0, 1.0);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.05 * i as f64;
            }
            Case::new(vec![t], |g, v| g.channel_max(v[0]))
        }),
        ("narrow_batch", |r| {
            Case::new(vec![uniform(r, &[3, 2, 2, 2], -1.0, 1.0)], |g, v| {
                g.narrow_batch(v[0], 1, 2)
            })
        }),
        ("sum", |r| {
            Case::new(vec![uniform(r, &[2, 3, 2], -1.0, 1.0)], |g, v| Ok(g.sum(v[0])))
        }),
        ("mean", |r| {
            Case::new(vec![uniform(r, &[2, 3, 2], -1.0, 1.0)], |g, v| Ok(g.mean(v[0])))
        }),
        ("seg_supervised_loss", |r| {
            let y = labels(r, 2 * 9, 3);
            Case::new(vec![uniform(r, &[2, 3, 3, 3], -2.0, 2.0)], move |g, v| {
                Ok(losses::seg_supervised_loss(g, v[0], &y)?.var)
            })
        }),
        ("seg_consistency_loss", |r| {
            let teacher = softmax_values(&uniform(r, &[2, 3, 3, 3], -2.0, 2.0)).unwrap();
            let tau = r.gen_range(0.3..0.6);
            Case::new(vec![uniform(r, &[2, 3, 3, 3], -2.0, 2.0)], move |g, v| {
                losses::seg_consistency_loss(g, v[0], &teacher, tau)
            })
        }),
        ("bdry_bce_reweighted", |r| {
            let z = binary_map(r, &[2, 2, 3, 3]);
            Case::new(vec![uniform(r, &[2, 2, 3, 3], 0.05, 0.95)], move |g, v| {
                losses::bdry_bce_reweighted(g, v[0], &z)
            })
        }),
        ("bdry_supervised_loss", |r| {
            let z = binary_map(r, &[1, 2, 3, 3]);
            let (a, b) = (
                uniform(r, &[1, 2, 3, 3], 0.05, 0.95),
                uniform(r, &[1, 2, 3, 3], 0.05, 0.95),
            );
            Case::new(vec![a, b], move |g, v| {
                losses::bdry_supervised_loss(g, &[v[0], v[1]], &z)
            })
        }),
        ("bdry_consistency_loss", |r| {
            let teacher = uniform(r, &[1, 2, 3, 3], 0.0, 1.0);
            Case::new(vec![uniform(r, &[1, 2, 3, 3], 0.05, 0.95)], move |g, v| {
                losses::bdry_consistency_loss(g, &[v[0]], &teacher, 0.5)
            })
        }),
        ("duality_loss", |r| {
            let z = binary_map(r, &[2, 2, 3, 3]);
            // |q - z| >= 0.05 keeps the probe away from the kink
            Case::new(vec![uniform(r, &[2, 2, 3, 3], 0.05, 0.95)], move |g, v| {
                losses::duality_loss(g, v[0], &z)
            })
        }),
        ("total_loss", |r| {
            let t = r.gen_range(0..100);
            let weights = LossWeights {
                lambda: r.gen_range(0.1..2.0),
                ..Default::default()
            };
            let sch = Schedules::new(&weights, 100);
            let inputs = (0..5).map(|_| uniform(r, &[1], -1.0, 1.0)).collect();
            Case::new(inputs, move |g, v| {
                let parts = LossParts {
                    seg_l: Some(v[0]),
                    bdry_l: Some(v[1]),
                    dual: Some(v[2]),
                    seg_u: Some(v[3]),
                    bdry_u: Some(v[4]),
                };
                Ok(losses::total_loss(g, &parts, &weights, &sch, t)?.0)
            })
        }),
        ("spatial_gradient", |r| {
            Case::new(vec![kink_free_logits(r, &[1, 3, 4, 4])], |g, v| {
                crate::model::spatial_gradient(g, v[0])
            })
        }),
        ("sgf_refine", |r| {
            let q = uniform(r, &[1, 2, 3, 3], 0.05, 0.95);
            let logits = kink_free_logits(r, &[1, 2, 3, 3]);
            let w = uniform(r, &[2, 2, 3, 3], -1.0, 1.0);
            let b = uniform(r, &[2], -0.5, 0.5);
            Case::new(vec![q, logits, w, b], |g, v| {
                let grad_map = crate::model::spatial_gradient(g, v[1])?;
                crate::model::sgf_refine(g, v[0], grad_map, v[2], v[3])
            })
        }),
    ]
}

/// Names of every check the suite runs.
pub fn check_names() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _)| n).collect()
}

/// Run every finite-difference check; each gets its own seeded case stream.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    fault::set_sign_flip(opts.fault.map(|f| f.op));
    let result = registry()
        .into_iter()
        .enumerate()
        .map(|(i, (name, gen))| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1000).wrapping_add(i as u64));
            let mut err = GradError::default();
            for _ in 0..opts.cases {
                let case = gen(&mut rng);
                err = err.merge(check_gradients(&case.inputs, &*case.build, &mut rng)?);
            }
            Ok(CheckReport {
                name: name.to_string(),
                cases: opts.cases,
                max_rel: err.max_rel,
                max_abs: err.max_abs,
                passed: err.max_rel <= TOLERANCE,
            })
        })
        .collect::<Result<Vec<_>>>();
    fault::set_sign_flip(None);
    Ok(SuiteReport {
        tolerance: TOLERANCE,
        checks: result?,
    })
}
