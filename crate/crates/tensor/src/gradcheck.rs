//! Central finite-difference checks of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::Params;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Coordinates checked per group; larger groups are sampled.
    pub max_coords: usize,
    /// Lower bound on the denominator of the relative error, so that
    /// gradients near zero are compared on an absolute scale.
    pub floor: f64,
    pub seed: u64,
    /// When set, losses are evaluated on training tapes seeded with this
    /// value, so dropout masks repeat across evaluations.
    pub training_seed: Option<u64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_coords: 64,
            floor: 1e-3,
            seed: 0,
            training_seed: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
    }
}

fn new_tape(params: &Params, training_seed: Option<u64>) -> Tape<'_> {
    match training_seed {
        Some(seed) => Tape::training(params, seed),
        None => Tape::new(params),
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward pass of `loss` against central differences for
/// every trainable group in `params`. `loss` must be deterministic.
pub fn check_gradients<F>(params: &mut Params, config: &GradCheckConfig, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = new_tape(params, config.training_seed);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |params: &Params| -> Result<f64> {
        let mut tape = new_tape(params, config.training_seed);
        let l = loss(&mut tape)?;
        Ok(tape.scalar(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).requires_grad {
            continue;
        }
        let numel = params.get(id).numel();
        let coords: Vec<usize> = if numel <= config.max_coords {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, config.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let original = params.get(id).values()[i];
            params.get_mut(id).values_mut()[i] = original + config.step;
            let plus = eval(params)?;
            params.get_mut(id).values_mut()[i] = original - config.step;
            let minus = eval(params)?;
            params.get_mut(id).values_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            let a = analytic.param(id).map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric, config.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

/// Checks every primitive at `points` random inputs. Each primitive output
/// is contracted with fixed random weights so that gradients are not
/// trivially zero (a plain sum of a softmax is constant).
pub fn primitive_suite(points: usize, seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use crate::tape::{Axis, Primitive};
    use crate::tensor::Tensor;
    use rand::Rng;

    type Build = fn(&mut Tape<'_>, &[Var], &mut ChaCha8Rng) -> Result<Var>;
    // (name, input shapes, forward)
    let cases: Vec<(&'static str, Vec<[usize; 2]>, Build)> = vec![
        ("matmul", vec![[2, 3], [3, 4]], |t, v, _| t.apply(&Primitive::MatMul, v)),
        ("add", vec![[2, 3], [2, 3]], |t, v, _| t.apply(&Primitive::Add, v)),
        ("add-broadcast-row", vec![[3, 2], [1, 2]], |t, v, _| t.add(v[0], v[1])),
        ("add-broadcast-col", vec![[3, 2], [3, 1]], |t, v, _| t.add(v[0], v[1])),
        ("sub", vec![[2, 2], [2, 2]], |t, v, _| t.sub(v[0], v[1])),
        ("elementwise-mul", vec![[2, 3], [2, 3]], |t, v, _| t.apply(&Primitive::Mul, v)),
        ("concat-cols", vec![[2, 1], [2, 3]], |t, v, _| {
            t.apply(&Primitive::Concat(Axis::Cols), v)
        }),
        ("concat-rows", vec![[1, 2], [3, 2]], |t, v, _| {
            t.apply(&Primitive::Concat(Axis::Rows), v)
        }),
        ("sigmoid", vec![[2, 3]], |t, v, _| t.apply(&Primitive::Sigmoid, v)),
        ("tanh", vec![[2, 3]], |t, v, _| t.apply(&Primitive::Tanh, v)),
        ("relu", vec![[2, 3]], |t, v, _| t.apply(&Primitive::Relu, v)),
        ("softmax", vec![[2, 4]], |t, v, _| t.apply(&Primitive::Softmax, v)),
        ("log-softmax", vec![[2, 4]], |t, v, _| Ok(t.log_softmax(v[0]))),
        ("sum-over-set", vec![[2, 2], [2, 2], [2, 2]], |t, v, _| {
            t.apply(&Primitive::SumSet, v)
        }),
        ("embedding-lookup", vec![[4, 3]], |t, v, rng| {
            let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
            t.apply(&Primitive::Embedding(ids), v)
        }),
        ("dropout-mask", vec![[3, 3]], |t, v, _| t.apply(&Primitive::Dropout(0.3), v)),
        ("scalar-affine", vec![[2, 3]], |t, v, rng| {
            let scale = rng.gen_range(-2.0..2.0);
            t.apply(&Primitive::ScalarAffine { scale, shift: 0.7 }, v)
        }),
        ("reshape", vec![[2, 3]], |t, v, _| t.reshape(v[0], 3, 2)),
        ("slice-cols", vec![[2, 5]], |t, v, _| t.slice_cols(v[0], 1, 3)),
        ("slice-rows", vec![[4, 2]], |t, v, _| t.slice_rows(v[0], 1, 2)),
        ("transpose", vec![[2, 3]], |t, v, _| Ok(t.transpose(v[0]))),
        ("pick", vec![[3, 3]], |t, v, _| t.pick(v[0], &[(0, 1), (2, 2), (0, 1)])),
        ("cross-entropy", vec![[3, 4]], |t, v, _| t.cross_entropy(v[0], &[0, 3, 1])),
        ("bce-with-logits", vec![[2, 2]], |t, v, _| {
            t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0])
        }),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, shapes, build) in cases {
        let mut report = GradCheckReport::default();
        for _ in 0..points {
            let mut params = Params::new();
            for (k, s) in shapes.iter().enumerate() {
                params.add(format!("in{k}"), Tensor::uniform(s, 2.0, &mut rng))?;
            }
            let case_seed: u64 = rng.gen();
            let weights_seed: u64 = rng.gen();
            let config = GradCheckConfig {
                training_seed: Some(case_seed),
                ..GradCheckConfig::default()
            };
            let r = check_gradients(&mut params, &config, |tape| {
                let inputs: Vec<Var> = tape.params().ids().map(|id| tape.param(id)).collect();
                let mut case_rng = ChaCha8Rng::seed_from_u64(case_seed);
                let y = build(tape, &inputs, &mut case_rng)?;
                let (r, c) = tape.dims(y);
                let mut wrng = ChaCha8Rng::seed_from_u64(weights_seed);
                let w = tape.constant(Tensor::uniform(&[r, c], 1.0, &mut wrng))?;
                let prod = tape.mul(y, w)?;
                Ok(tape.sum_all(prod))
            })?;
            report.merge(&r);
        }
        out.push((name, report));
    }
    Ok(out)
}
