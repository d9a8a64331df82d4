//! Central finite-difference validation of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Array, AttnMask, NumericsError, ParamId, ParamStore, Tape, Var};
use crate::geometry::OrientedRect;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Entries whose gradients are both below this magnitude are compared
/// absolutely; above it the error is relative.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences with step `h`, over every element of every input.
pub fn grad_check<F>(f: F, inputs: &[Array], h: f64) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new(0);
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(NumericsError::Contract(format!(
            "grad_check needs a scalar output, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Array]| -> Result<f64, NumericsError> {
        let mut t = Tape::new(0);
        let vs: Vec<Var> = perturbed.iter().map(|a| t.constant(a.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Array> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}

/// Finite-difference check of parameter gradients. For each id, up to
/// `per_param` entries spread evenly over the tensor are perturbed in place.
pub fn param_grad_check<F>(
    store: &ParamStore,
    ids: &[ParamId],
    per_param: usize,
    h: f64,
    f: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new(0);
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> Result<f64, NumericsError> {
        let mut t = Tape::new(0);
        let o = f(&mut t, s)?;
        Ok(t.value(o).item())
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for &id in ids {
        let n = store.get(id).len();
        let take = per_param.min(n).max(1);
        for s in 0..take {
            let j = s * n / take;
            let x0 = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grads.param(id).map_or(0.0, |g| g.data()[j]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (id.index(), j);
            }
        }
    }
    Ok(report)
}

/// Names of the cases run by `primitive_check`, by index.
pub const PRIMITIVE_CASES: [&str; 11] = [
    "matmul",
    "matmul_bt",
    "softmax",
    "layer_norm",
    "attention",
    "cross_entropy",
    "l2_loss",
    "kl_divergence",
    "row ops",
    "clearance_penalty",
    "elementwise",
];

fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape matches data")
}

type LossFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>;

/// Randomized finite-difference check of one differentiable primitive,
/// reduced to a scalar through a random linear functional.
pub fn primitive_check(which: usize, seed: u64) -> Result<GradCheckReport, NumericsError> {
    if which >= PRIMITIVE_CASES.len() {
        return Err(NumericsError::Contract(format!("no primitive case {which}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = |rng: &mut ChaCha8Rng, shape: &[usize]| rand_array(rng, shape, 1.0);
    let (inputs, f): (Vec<Array>, Box<LossFn>) = match which {
        0 => {
            let w = proj(&mut rng, &[3, 2]);
            (
                vec![rand_array(&mut rng, &[3, 4], 1.0), rand_array(&mut rng, &[4, 2], 1.0)],
                Box::new(move |t, v| {
                    let p = t.matmul(v[0], v[1])?;
                    let c = t.constant(w.clone());
                    let m = t.mul(p, c)?;
                    t.sum(m)
                }),
            )
        }
        1 => {
            let w = proj(&mut rng, &[3, 4]);
            (
                vec![rand_array(&mut rng, &[3, 5], 1.0), rand_array(&mut rng, &[4, 5], 1.0)],
                Box::new(move |t, v| {
                    let p = t.matmul_bt(v[0], v[1])?;
                    let c = t.constant(w.clone());
                    let m = t.mul(p, c)?;
                    t.sum(m)
                }),
            )
        }
        2 => {
            let w = proj(&mut rng, &[2, 5]);
            (
                vec![rand_array(&mut rng, &[2, 5], 3.0)],
                Box::new(move |t, v| {
                    let p = t.softmax(v[0])?;
                    let c = t.constant(w.clone());
                    let m = t.mul(p, c)?;
                    t.sum(m)
                }),
            )
        }
        3 => {
            let w = proj(&mut rng, &[3, 4]);
            (
                vec![
                    rand_array(&mut rng, &[3, 4], 2.0),
                    rand_array(&mut rng, &[4], 1.0),
                    rand_array(&mut rng, &[4], 1.0),
                ],
                Box::new(move |t, v| {
                    let p = t.layer_norm(v[0], v[1], v[2])?;
                    let c = t.constant(w.clone());
                    let m = t.mul(p, c)?;
                    t.sum(m)
                }),
            )
        }
        4 => {
            let w = proj(&mut rng, &[2, 4]);
            let mask = AttnMask::new(2, 3, vec![true, false, true, true, true, false])?;
            (
                vec![
                    rand_array(&mut rng, &[2, 4], 1.0),
                    rand_array(&mut rng, &[3, 4], 1.0),
                    rand_array(&mut rng, &[3, 4], 1.0),
                ],
                Box::new(move |t, v| {
                    let p = t.attention(v[0], v[1], v[2], 2, Some(&mask))?;
                    let c = t.constant(w.clone());
                    let m = t.mul(p, c)?;
                    t.sum(m)
                }),
            )
        }
        5 => {
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
            (
                vec![rand_array(&mut rng, &[4, 6], 2.0)],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
            )
        }
        6 => (
            vec![rand_array(&mut rng, &[3, 3], 2.0), rand_array(&mut rng, &[3, 3], 2.0)],
            Box::new(|t, v| t.l2_loss(v[0], v[1])),
        ),
        7 => (
            vec![rand_array(&mut rng, &[2, 5], 2.0), rand_array(&mut rng, &[2, 5], 2.0)],
            Box::new(|t, v| {
                let p = t.softmax(v[0])?;
                let q = t.softmax(v[1])?;
                t.kl_divergence(p, q)
            }),
        ),
        8 => {
            let w = proj(&mut rng, &[1, 3]);
            (
                vec![rand_array(&mut rng, &[4, 3], 1.0), rand_array(&mut rng, &[3], 1.0)],
                Box::new(move |t, v| {
                    let b = t.add_row(v[0], v[1])?;
                    let r = t.relu(b)?;
                    let s = t.scale(r, 1.7)?;
                    let g = t.gather_rows(s, &[3, 0, 0, 2])?;
                    let c = t.concat_rows(&[g, v[0]])?;
                    let sl = t.slice_rows(c, 1, 6)?;
                    let row = t.slice_rows(v[0], 2, 3)?;
                    let rep = t.replace_rows(sl, row, &[true, false, false, true, false])?;
                    let cc = t.concat_cols(&[rep, rep])?;
                    let sc = t.slice_cols(cc, 2, 5)?;
                    let mr = t.mean_rows(sc)?;
                    let cw = t.constant(w.clone());
                    let m = t.mul(mr, cw)?;
                    t.sum(m)
                }),
            )
        }
        9 => {
            let rects = vec![
                vec![OrientedRect::new([1.0, 0.5], 0.3, 4.0, 2.0)],
                vec![OrientedRect::new([-2.0, 1.0], 1.2, 3.0, 1.5), OrientedRect::new([0.0, 0.0], 0.0, 1.0, 1.0)],
            ];
            (
                vec![rand_array(&mut rng, &[2, 2], 3.0)],
                Box::new(move |t, v| t.clearance_penalty(v[0], &rects, 1.5)),
            )
        }
        _ => {
            let w = proj(&mut rng, &[3, 2]);
            (
                vec![rand_array(&mut rng, &[3, 2], 1.0), rand_array(&mut rng, &[3, 2], 1.0)],
                Box::new(move |t, v| {
                    let d = t.sub(v[0], v[1])?;
                    let mx = t.maximum(d, v[1])?;
                    let tr = t.transpose(mx)?;
                    let rs = t.reshape(tr, &[3, 2])?;
                    let c = t.constant(w.clone());
                    let m = t.mul(rs, c)?;
                    t.mean(m)
                }),
            )
        }
    };
    grad_check(f, &inputs, DEFAULT_STEP)
}
