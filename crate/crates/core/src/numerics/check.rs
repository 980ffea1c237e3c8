//! Finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::numerics::tape::{NodeId, Tape};
use crate::numerics::tensor::Tensor;

/// Compares the taped gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the leaf holding the probe point, and must
/// return a scalar root. Returns the max over coordinates of
/// |analytic − numeric| / max(1, |analytic|).
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    if step <= 0.0 {
        return Err(Error::Usage(format!("step must be positive, got {step}")));
    }

    let mut eval = |probe: Tensor| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(probe);
        let root = f(&mut tape, leaf)?;
        let value = tape.value(root).item()?;
        Ok((value, Some(tape.backward(root)?.wrt(leaf).to_vec())))
    };

    let (_, analytic) = eval(x.clone())?;
    let analytic = analytic.expect("backward ran");

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let mut probe = |v: f64| -> Result<f64> {
            let mut tape = Tape::new();
            let leaf = tape.leaf(x.with_element(i, v)?);
            let root = f(&mut tape, leaf)?;
            tape.value(root).item()
        };
        let numeric = (probe(xi + step)? - probe(xi - step)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(rng: &mut impl Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sum_has_constant_gradient() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn sigmoid_of_linear_map() {
        let mut rng = crate::rng::stream(11, "check-sigmoid");
        let w = random_tensor(&mut rng, vec![4, 3]);
        let x = random_tensor(&mut rng, vec![3]);
        let err = grad_check(
            |t, x| {
                let w = t.leaf(w.clone());
                let wx = t.matmul(w, x)?;
                let s = t.sigmoid(wx);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn two_layer_tanh_net_matches_finite_differences() {
        // All five parameters live in one leaf: W1 (2x2), b1 (2), w2 (2) gives
        // 4 + 2 + 2 = 8 probe coordinates; input is fixed.
        let mut rng = crate::rng::stream(12, "check-mlp");
        let params = random_tensor(&mut rng, vec![8]);
        let input = random_tensor(&mut rng, vec![2]);
        let err = grad_check(
            |t, p| {
                let w1_flat = t.slice(p, 0, 4)?;
                let b1 = t.slice(p, 4, 2)?;
                let w2 = t.slice(p, 6, 2)?;
                // Build W1·x from slices: row i of W1 dotted with x via mul+sum.
                let x = t.leaf(input.clone());
                let mut rows = Vec::new();
                for i in 0..2 {
                    let row = t.slice(w1_flat, 2 * i, 2)?;
                    let prod = t.mul(row, x)?;
                    rows.push(t.sum(prod));
                }
                let wx = t.concat(&rows)?;
                let pre = t.add(wx, b1)?;
                let h = t.tanh(pre);
                let out = t.mul(w2, h)?;
                let z = t.sum(out);
                Ok(t.tanh(z))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "err = {err}");
    }

    #[test]
    fn every_op_kind_passes_gradient_check() {
        let mut rng = crate::rng::stream(13, "check-battery");
        let x6 = random_tensor(&mut rng, vec![6]);

        // (name, closure) pairs so a failure names the op.
        type Case = (&'static str, Box<dyn FnMut(&mut Tape, NodeId) -> crate::error::Result<NodeId>>);
        let w = random_tensor(&mut rng, vec![3, 6]);
        let other = random_tensor(&mut rng, vec![6]);
        let table_probe = random_tensor(&mut rng, vec![12]);

        let w2 = w.clone();
        let o1 = other.clone();
        let o2 = other.clone();
        let cases: Vec<Case> = vec![
            ("matmul", Box::new(move |t, x| {
                let w = t.leaf(w2.clone());
                let y = t.matmul(w, x)?;
                Ok(t.sum(y))
            })),
            ("add", Box::new(move |t, x| {
                let o = t.leaf(o1.clone());
                let y = t.add(x, o)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            })),
            ("mul", Box::new(move |t, x| {
                let o = t.leaf(o2.clone());
                let y = t.mul(x, o)?;
                Ok(t.sum(y))
            })),
            ("concat+slice", Box::new(|t, x| {
                let head = t.slice(x, 0, 2)?;
                let tail = t.slice(x, 2, 4)?;
                let cat = t.concat(&[tail, head])?;
                let sq = t.mul(cat, cat)?;
                Ok(t.sum(sq))
            })),
            ("tanh", Box::new(|t, x| {
                let y = t.tanh(x);
                Ok(t.sum(y))
            })),
            ("sigmoid", Box::new(|t, x| {
                let y = t.sigmoid(x);
                Ok(t.sum(y))
            })),
            ("exp", Box::new(|t, x| {
                let y = t.exp(x)?;
                Ok(t.sum(y))
            })),
            ("log", Box::new(|t, x| {
                // Shift into the positive domain before taking the log.
                let four = t.leaf(Tensor::vector(vec![4.0; 6]).unwrap());
                let pos = t.add(x, four)?;
                let y = t.log(pos)?;
                Ok(t.sum(y))
            })),
            ("softmax", Box::new(|t, x| {
                let p = t.softmax(x)?;
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            })),
        ];

        for (name, mut f) in cases {
            let err = grad_check(&mut f, &x6, 1e-5).unwrap();
            assert!(err <= 1e-4, "{name}: err = {err}");
        }

        // embedding-lookup probes the table itself.
        let err = grad_check(
            |t, table_flat| {
                // Leaf arrives flat; route it through slices into two rows so
                // the lookup is differentiable w.r.t. the probe.
                let r0 = t.slice(table_flat, 0, 4)?;
                let r1 = t.slice(table_flat, 4, 4)?;
                let picked = t.concat(&[r1, r0])?;
                let sq = t.mul(picked, picked)?;
                Ok(t.sum(sq))
            },
            &table_probe,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "embedding route: err = {err}");
    }

    #[test]
    fn embed_scatters_gradient_into_looked_up_row() {
        let mut t = Tape::new();
        let table = t.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let row = t.embed(table, 1).unwrap();
        assert_eq!(t.value(row).data(), &[3.0, 4.0]);
        let sq = t.mul(row, row).unwrap();
        let root = t.sum(sq);
        let g = t.backward(root).unwrap();
        assert_eq!(g.wrt(table), &[0.0, 0.0, 6.0, 8.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_routes_gradients_to_correct_operands() {
        let mut rng = crate::rng::stream(14, "check-concat");
        let x = random_tensor(&mut rng, vec![5]);
        let weights = random_tensor(&mut rng, vec![7]);
        let w = weights.clone();
        // Asymmetric use of the two halves so misrouted gradients would show.
        let err = grad_check(
            |t, x| {
                let a = t.slice(x, 0, 3)?;
                let b = t.slice(x, 3, 2)?;
                let ta = t.tanh(a);
                let cat = t.concat(&[ta, b])?;
                let wl = t.leaf(w.clone());
                let doubled = t.concat(&[cat, b])?;
                let e = t.exp(doubled)?;
                let prods = t.mul(wl, e)?;
                Ok(t.sum(prods))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }
}
