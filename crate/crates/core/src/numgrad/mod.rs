//! Small dense reverse-mode differentiation, parameter sets and Adam.

mod adam;
mod params;
mod tape;
mod tensor;

use std::collections::BTreeMap;

pub use adam::{adam_step, OptState, StepReport};
pub use params::{ParamSet, Role};
pub use tape::{log_sigmoid, log_sum_exp, sigmoid, softmax_in_place, Gradients, Scope, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GradError {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("non-finite value produced at {node}")]
    NonFinite { node: String },
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("duplicate parameter {0}")]
    DuplicateParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Scalar value with gradients for every entry of the evaluated parameter set.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor>,
}

impl GradResult {
    /// Largest absolute gradient component.
    pub fn max_abs(&self) -> f64 {
        self.grads.values().flat_map(|t| t.data().iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn negate(&mut self) {
        self.value = -self.value;
        for t in self.grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = -*v);
        }
    }
}

/// Evaluates a scalar graph built by `graph` and differentiates it w.r.t. `params`.
pub fn evaluate_with_gradients<F>(
    params: &ParamSet,
    inputs: &[Tensor],
    graph: F,
) -> Result<GradResult, GradError>
where
    F: for<'p> Fn(&mut Tape<'p>, Scope, &[Var]) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let scope = tape.bind(params);
    let ins: Vec<Var> = inputs.iter().cloned().map(|t| tape.input(t)).collect();
    let out = graph(&mut tape, scope, &ins)?;
    let value = tape.scalar(out);
    let g = tape.backward(out)?;
    Ok(GradResult { value, grads: tape.grads_for(scope, &g) })
}

/// Forward-only evaluation of a graph.
pub fn evaluate<F>(params: &ParamSet, inputs: &[Tensor], graph: F) -> Result<Tensor, GradError>
where
    F: for<'p> Fn(&mut Tape<'p>, Scope, &[Var]) -> Result<Var, GradError>,
{
    let mut tape = Tape::new();
    let scope = tape.bind(params);
    let ins: Vec<Var> = inputs.iter().cloned().map(|t| tape.input(t)).collect();
    let out = graph(&mut tape, scope, &ins)?;
    Ok(tape.value(out).clone())
}

/// Max relative error between analytic gradients and a five-point central difference.
pub fn grad_check<F>(params: &ParamSet, inputs: &[Tensor], h: f64, graph: F) -> Result<f64, GradError>
where
    F: for<'p> Fn(&mut Tape<'p>, Scope, &[Var]) -> Result<Var, GradError>,
{
    assert!(h > 0.0 && h <= 1e-2, "step must lie in (0, 1e-2]");
    let analytic = evaluate_with_gradients(params, inputs, &graph)?;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (name, g) in &analytic.grads {
        for (i, &a) in g.data().iter().enumerate() {
            let orig = probe.get(name).expect("same names").data()[i];
            let mut at = |dx: f64| -> Result<f64, GradError> {
                probe.get_mut(name).expect("same names").data_mut()[i] = orig + dx;
                evaluate(&probe, inputs, &graph).map(|v| v.item())
            };
            // Five-point stencil, truncation error O(h^4).
            let numeric = (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h);
            probe.get_mut(name).expect("same names").data_mut()[i] = orig;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_vector() {
        let mut p = ParamSet::new(Role::Other);
        p.insert("x", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let r = evaluate_with_gradients(&p, &[], |t, s, _| {
            let x = t.param(s, "x")?;
            t.sum(x)
        })
        .unwrap();
        assert_eq!(r.value, 6.0);
        assert_eq!(r.grads["x"].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn two_logit_log_softmax() {
        // d/dw0 log σ(w0 - w1) = 1 - p0 = 0.5 and d/dw1 = -0.5 at w = 0.
        let mut p = ParamSet::new(Role::Other);
        p.insert("w", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let r = evaluate_with_gradients(&p, &[], |t, s, _| {
            let w = t.param(s, "w")?;
            let ls = t.log_softmax(w)?;
            t.index(ls, 0)
        })
        .unwrap();
        assert!((r.value - 0.5f64.ln()).abs() < 1e-15);
        assert!((r.grads["w"].data()[0] - 0.5).abs() < 1e-15);
        assert!((r.grads["w"].data()[1] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut p = ParamSet::new(Role::Other);
        p.insert("w", Tensor::vector(vec![0.3, 0.1])).unwrap();
        let err = grad_check(&p, &[Tensor::vector(vec![2.0])], 1e-5, |t, _, ins| t.sum(ins[0])).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn shape_mismatch_names_node() {
        let mut p = ParamSet::new(Role::Other);
        p.insert("w", Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
        let e = evaluate(&p, &[Tensor::vector(vec![1.0; 4])], |t, s, ins| {
            let w = t.param(s, "w")?;
            t.affine(w, ins[0], None)
        })
        .unwrap_err();
        match e {
            GradError::Shape { node, .. } => assert!(node.starts_with("affine")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut p = ParamSet::new(Role::Other);
        p.insert("w", Tensor::vector(vec![-1.0])).unwrap();
        let e = evaluate(&p, &[], |t, s, _| {
            let w = t.param(s, "w")?;
            t.log(w)
        })
        .unwrap_err();
        assert!(matches!(e, GradError::NonFinite { .. }));
    }

    fn two_layer(rng: &mut ChaCha8Rng) -> ParamSet {
        let mut p = ParamSet::new(Role::Other);
        p.add_affine("l1", 4, 6, rng).unwrap();
        p.add_affine("l2", 6, 3, rng).unwrap();
        p
    }

    #[test]
    fn random_two_layer_network_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = two_layer(&mut rng);
        let x = Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let err = grad_check(&p, &[x], 1e-5, |t, s, ins| {
            let (w1, b1) = (t.param(s, "l1.w")?, t.param(s, "l1.b")?);
            let (w2, b2) = (t.param(s, "l2.w")?, t.param(s, "l2.b")?);
            let h = t.affine(w1, ins[0], Some(b1))?;
            let h = t.tanh(h)?;
            let o = t.affine(w2, h, Some(b2))?;
            let ls = t.log_softmax(o)?;
            t.index(ls, 1)
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn attention_block_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new(Role::Other);
        p.add_linear("q", 4, 4, &mut rng).unwrap();
        p.add_linear("k", 4, 4, &mut rng).unwrap();
        p.add_linear("v", 4, 4, &mut rng).unwrap();
        let xs: Vec<Tensor> =
            (0..3).map(|_| Tensor::vector((0..4).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let err = grad_check(&p, &xs, 1e-5, |t, s, ins| {
            let (wq, wk, wv) = (t.param(s, "q")?, t.param(s, "k")?, t.param(s, "v")?);
            let q = t.affine(wq, ins[0], None)?;
            let mut ks = Vec::new();
            let mut vs = Vec::new();
            for &x in &ins[1..] {
                ks.push(t.affine(wk, x, None)?);
                vs.push(t.affine(wv, x, None)?);
            }
            let (m, _) = t.attention(q, &ks, &vs)?;
            let m = t.tanh(m)?;
            let sq = t.mul(m, m)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    /// One graph per node kind: `x -> affine -> node -> dot(c)`.
    fn node_graph<'p>(kind: usize, t: &mut Tape<'p>, s: Scope, ins: &[Var]) -> Result<Var, GradError> {
        let (x, c) = (ins[0], ins[1]);
        let (wa, ba) = (t.param(s, "a.w")?, t.param(s, "a.b")?);
        let (wb, bb) = (t.param(s, "b.w")?, t.param(s, "b.b")?);
        let y = t.affine(wa, x, Some(ba))?;
        let z = t.affine(wb, x, Some(bb))?;
        let out = match kind {
            0 => y,
            1 => t.tanh(y)?,
            2 => t.relu(y)?,
            3 => t.softmax(y)?,
            4 => {
                let sg = t.sigmoid(y)?;
                let pos = t.scale_shift(sg, 1.0, 0.5)?;
                t.log(pos)?
            }
            5 => t.add(y, z)?,
            6 => t.mul(y, z)?,
            7 => {
                let cat = t.concat(&[y, z])?;
                let d = t.log_softmax(cat)?;
                let e = t.index(d, 1)?;
                let f = t.index(d, 6)?;
                t.concat(&[e, f, e, f])?
            }
            8 => {
                let q = t.tanh(y)?;
                let (wk, wv) = (t.param(s, "k")?, t.param(s, "v")?);
                let k1 = t.affine(wk, z, None)?;
                let k2 = t.affine(wk, q, None)?;
                let v1 = t.affine(wv, z, None)?;
                let v2 = t.affine(wv, q, None)?;
                t.attention(q, &[k1, k2], &[v1, v2])?.0
            }
            9 => t.gru(s, "cell", y, ins[2])?,
            10 => {
                let e = t.exp(y)?;
                let d = t.sub(e, z)?;
                let m = t.mean(d)?;
                let dd = t.dot(y, z)?;
                let r = t.add(m, dd)?;
                t.concat(&[r, r, r, r])?
            }
            11..=14 => {
                let xs = t.value(x).data().to_vec();
                let both: Vec<f64> = xs.iter().copied().chain(xs.iter().map(|v| -v * 0.5)).collect();
                let xm = t.constant(Tensor::matrix(2, xs.len(), both)?);
                let m = t.affine(wa, xm, Some(ba))?;
                match kind {
                    11 => {
                        let th = t.tanh(m)?;
                        t.mean_rows(th)?
                    }
                    12 => {
                        let a = t.add_row(m, z)?;
                        let r = t.row(a, 1)?;
                        t.log_sigmoid(r)?
                    }
                    13 => {
                        let g = t.gather(m, &[3, 0])?;
                        t.concat(&[g, g])?
                    }
                    _ => {
                        let th = t.tanh(m)?;
                        let cr = t.concat_rows(&[m, th])?;
                        let tr = t.transpose(cr)?;
                        let y = t.affine(tr, z, None)?;
                        t.tanh(y)?
                    }
                }
            }
            _ => unreachable!(),
        };
        t.dot(out, c)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn every_node_matches_finite_differences(seed in 0u64..1_000_000, kind in 0usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamSet::new(Role::Other);
            p.add_affine("a", 3, 4, &mut rng).unwrap();
            p.add_affine("b", 3, 4, &mut rng).unwrap();
            p.add_linear("k", 4, 4, &mut rng).unwrap();
            p.add_linear("v", 4, 4, &mut rng).unwrap();
            for g in ["z", "r", "n"] {
                p.add_affine(&format!("cell.{g}"), 4, 4, &mut rng).unwrap();
                p.add_linear(&format!("cell.{g}.u"), 4, 4, &mut rng).unwrap();
            }
            // Inputs bounded away from zero keep every gradient component well above
            // the round-off floor of a central difference.
            let mut away = |n: usize| -> Tensor {
                Tensor::vector((0..n).map(|_| {
                    let m = rng.random_range(0.25..1.0);
                    if rng.random_bool(0.5) { m } else { -m }
                }).collect())
            };
            let (x, c, h) = (away(3), away(4), away(4));
            if kind == 2 {
                // The stencil reaches 2h into each weight; stay clear of the ReLU kink.
                let (w, b) = (p.get("a.w").unwrap().data(), p.get("a.b").unwrap().data());
                let pre = (0..4).map(|r| (0..3).map(|i| w[r * 3 + i] * x.data()[i]).sum::<f64>() + b[r]);
                prop_assume!(pre.map(f64::abs).fold(f64::INFINITY, f64::min) > 1e-2);
            }
            let err = grad_check(&p, &[x, c, h], 1e-3, |t, s, ins| node_graph(kind, t, s, ins)).unwrap();
            prop_assert!(err < 1e-4, "kind {} err {}", kind, err);
        }

        #[test]
        fn softmax_rows_normalize(xs in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut t = Tape::new();
            let v = t.input(Tensor::vector(xs));
            let s = t.softmax(v).unwrap();
            let vals = t.value(s).data();
            prop_assert!(vals.iter().all(|v| *v >= 0.0));
            prop_assert!((vals.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
