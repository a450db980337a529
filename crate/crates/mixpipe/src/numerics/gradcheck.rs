//! Central-difference gradient verification.

use super::graph::{Graph, TensorId};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central-difference estimate.
///
/// `f` must deterministically build a scalar loss from its input node.
/// The relative error at each coordinate is
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn grad_check<F>(f: F, shape: &[usize], x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, TensorId) -> Result<TensorId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidConfig(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }

    let eval = |data: &[f64], with_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut g = Graph::new();
        let id = g.leaf(shape.to_vec(), data.to_vec(), with_grad)?;
        let loss = f(&mut g, id)?;
        if g.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss { shape: g.shape(loss).to_vec() });
        }
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        if with_grad {
            g.backward(loss)?;
            Ok((value, Some(g.grad(id).expect("leaf grad").to_vec())))
        } else {
            Ok((value, None))
        }
    };

    let (_, analytic) = eval(x, true)?;
    let analytic = analytic.unwrap();

    let mut max_rel = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let (plus, _) = eval(&probe, false)?;
        probe[i] = orig - eps;
        let (minus, _) = eval(&probe, false)?;
        probe[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
        max_rel = max_rel.max((analytic[i] - fd).abs() / denom);
    }
    Ok(max_rel)
}

/// Gradient check over a set of named parameter tensors.
///
/// `build` constructs a scalar loss from the bound parameter nodes; the
/// analytic gradients come from one backward pass, the reference from
/// central differences on every coordinate of every parameter.
pub fn grad_check_params<F>(
    build: F,
    params: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    eps: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &BTreeMap<String, TensorId>) -> Result<TensorId>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidConfig(format!("grad_check eps {eps} outside (0, 1e-2]")));
    }

    let eval = |store: &BTreeMap<String, (Vec<usize>, Vec<f64>)>,
                with_grad: bool|
     -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)> {
        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, (shape, data)) in store {
            ids.insert(name.clone(), g.leaf(shape.clone(), data.clone(), with_grad)?);
        }
        let loss = build(&mut g, &ids)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        if with_grad {
            g.backward(loss)?;
            let grads = ids
                .iter()
                .map(|(n, &id)| (n.clone(), g.grad(id).expect("leaf grad").to_vec()))
                .collect();
            Ok((value, Some(grads)))
        } else {
            Ok((value, None))
        }
    };

    let (_, analytic) = eval(params, true)?;
    let analytic = analytic.unwrap();

    let mut max_rel = 0.0f64;
    let mut probe = params.clone();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in &names {
        let len = params[name].1.len();
        for i in 0..len {
            let orig = probe.get_mut(name).unwrap().1[i];
            probe.get_mut(name).unwrap().1[i] = orig + eps;
            let (plus, _) = eval(&probe, false)?;
            probe.get_mut(name).unwrap().1[i] = orig - eps;
            let (minus, _) = eval(&probe, false)?;
            probe.get_mut(name).unwrap().1[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic[name][i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max((a - fd).abs() / denom);
        }
    }
    Ok(max_rel)
}
