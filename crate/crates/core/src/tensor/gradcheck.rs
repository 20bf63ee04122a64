use super::{Graph, NodeId, ParamStore, TensorError};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Checks the gradients of the scalar built by `f` with respect to every
/// trainable coordinate of `store`, using central differences with step `h`.
///
/// `f` must be a pure function of the parameter values. The store's values
/// are restored before returning; its gradients are left holding the
/// analytic result.
pub fn grad_check<E, F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId, E>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("step must be positive, got {h}"),
        }
        .into());
    }
    store.zero_grad();
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out, store)?;

    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        let v = g.value(out);
        v.item()
            .ok_or_else(|| TensorError::NotScalar(v.shape().to_vec()).into())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        coordinates: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).requires_grad() {
            continue;
        }
        let analytic = match store.get(id).grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; store.get(id).numel()],
        };
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(store);
            store.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.coordinates += 1;
            if report.worst_param.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = Some(store.name(id).to_string());
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn affine_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, -0.3]).unwrap());
        let b = store.add("b", Tensor::from_vec(vec![0.7, -0.2]));
        let r = grad_check::<TensorError, _>(&mut store, 1e-5, |g, s| {
            let x = g.input(Tensor::from_vec(vec![1.0, -2.0, 0.5]));
            let (wn, bn) = (g.param(s, w), g.param(s, b));
            let y = g.linear(x, wn, Some(bn))?;
            g.sum(y)
        })
        .unwrap();
        assert_eq!(r.coordinates, 8);
        assert!(r.max_rel_error <= 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_vector_output() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0, 2.0]));
        let r = grad_check::<TensorError, _>(&mut store, 1e-5, |g, s| Ok(g.param(s, w)));
        assert!(matches!(r, Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::from_vec(vec![1.0]));
        let r = grad_check::<TensorError, _>(&mut store, 0.0, |g, s| Ok(g.param(s, w)));
        assert!(r.is_err());
    }
}
