use eici::rng::{normal_tensor, seeded};
use eici::tensor::{grad_check, Graph, NodeId, ParamStore, Tensor, TensorError};
use proptest::prelude::*;

const POINTS: u64 = 20;
const TOL: f64 = 1e-6;
const STEP: f64 = 1e-5;

/// Builds params with the given shapes, maps them through `op`, contracts the
/// result with fixed generic weights and finite-difference checks the scalar.
fn check_op<F>(name: &str, shapes: &[&[usize]], away_from_zero: bool, op: F)
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, TensorError>,
{
    for seed in 0..POINTS {
        let mut rng = seeded(seed * 7919 + 1);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut t = normal_tensor(&mut rng, s, 1.0);
                if away_from_zero {
                    t.data_mut().iter_mut().for_each(|v| *v += 0.2 * v.signum());
                }
                store.add(format!("p{i}"), t)
            })
            .collect();
        let report = grad_check(&mut store, STEP, |g: &mut Graph, store: &ParamStore| {
            let nodes: Vec<NodeId> = ids.iter().map(|&id| g.param(store, id)).collect();
            let out = op(g, &nodes)?;
            let shape = g.shape(out).to_vec();
            let n = g.value(out).numel();
            let w = g.input(Tensor::new(shape, (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect())?);
            let prod = g.mul(out, w)?;
            g.sum(prod)
        })
        .unwrap();
        assert!(
            report.max_rel_error <= TOL,
            "{name} seed {seed}: error {:.3e} at {:?}[{}]",
            report.max_rel_error,
            report.worst_param,
            report.worst_index
        );
    }
}

#[test]
fn elementwise_ops() {
    check_op("add", &[&[3, 4], &[3, 4]], false, |g, p| g.add(p[0], p[1]));
    check_op("mul", &[&[2, 3, 2], &[2, 3, 2]], false, |g, p| g.mul(p[0], p[1]));
    check_op("scale", &[&[5]], false, |g, p| g.scale(p[0], -2.5));
    check_op("relu", &[&[4, 3]], true, |g, p| g.relu(p[0]));
}

#[test]
fn linear_algebra_ops() {
    check_op("matmul", &[&[3, 4], &[4, 2]], false, |g, p| g.matmul(p[0], p[1]));
    check_op("linear vector", &[&[4], &[3, 4], &[3]], false, |g, p| g.linear(p[0], p[1], Some(p[2])));
    check_op("linear batch", &[&[2, 4], &[3, 4]], false, |g, p| g.linear(p[0], p[1], None));
    check_op("transpose", &[&[2, 5]], false, |g, p| g.transpose(p[0]));
}

#[test]
fn convolution_ops() {
    check_op("conv 3x3 pad 1", &[&[2, 5, 5], &[3, 2, 3, 3], &[3]], false, |g, p| {
        g.conv2d(p[0], p[1], Some(p[2]), 1, 1)
    });
    check_op("conv 3x3 stride 2", &[&[2, 6, 6], &[2, 2, 3, 3]], false, |g, p| g.conv2d(p[0], p[1], None, 2, 1));
    check_op("conv 1x1", &[&[4, 3, 3], &[2, 4, 1, 1], &[2]], false, |g, p| {
        g.conv2d(p[0], p[1], Some(p[2]), 1, 0)
    });
    check_op("conv 3x3 stride 2 no pad", &[&[1, 7, 7], &[2, 1, 3, 3]], false, |g, p| {
        g.conv2d(p[0], p[1], None, 2, 0)
    });
}

#[test]
fn structural_ops() {
    check_op("concat axis 0", &[&[2, 3], &[1, 3]], false, |g, p| g.concat(&[p[0], p[1]], 0));
    check_op("concat axis 1", &[&[2, 3], &[2, 2]], false, |g, p| g.concat(&[p[0], p[1]], 1));
    check_op("concat channels", &[&[2, 2, 2], &[1, 2, 2]], false, |g, p| g.concat_channels(&[p[0], p[1]]));
    check_op("slice", &[&[3, 4]], false, |g, p| g.slice(p[0], 1, 1, 2));
    check_op("reshape", &[&[2, 6]], false, |g, p| g.reshape(p[0], &[3, 4]));
    check_op("broadcast", &[&[3]], false, |g, p| g.broadcast_spatial(p[0], 2, 3));
}

#[test]
fn reduction_ops() {
    check_op("mean axis 0", &[&[3, 4]], false, |g, p| g.mean(p[0], 0));
    check_op("mean axis 1", &[&[3, 4]], false, |g, p| g.mean(p[0], 1));
    check_op("global mean pool", &[&[3, 2, 4]], false, |g, p| g.global_mean_pool(p[0]));
    check_op("sum", &[&[2, 3]], false, |g, p| g.sum(p[0]));
}

#[test]
fn normalizing_ops() {
    check_op("softmax axis 0", &[&[3, 4]], false, |g, p| g.softmax(p[0], 0));
    check_op("softmax axis 1", &[&[3, 4]], false, |g, p| g.softmax(p[0], 1));
    check_op("softmax channels", &[&[4, 2, 3]], false, |g, p| g.softmax_channels(p[0]));
    check_op("layer norm", &[&[3, 5], &[5], &[5]], false, |g, p| g.layer_norm(p[0], p[1], p[2]));
    check_op("softmax cross entropy", &[&[3, 4]], false, |g, p| {
        let probs = g.softmax(p[0], 1)?;
        g.cross_entropy(probs, &[0, 3, 1])
    });
}

fn tensor_strategy(max_dim: usize) -> impl Strategy<Value = Tensor> {
    (1..=max_dim, 1..=max_dim, 1..=max_dim).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-30.0f64..30.0, c * h * w)
            .prop_map(move |d| Tensor::new(vec![c, h, w], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn channel_softmax_sums_to_one(t in tensor_strategy(6)) {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut g = Graph::new();
        let x = g.input(t);
        let s = g.softmax_channels(x).unwrap();
        let d = g.value(s).data();
        for i in 0..h * w {
            let total: f64 = (0..c).map(|k| d[k * h * w + i]).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn channel_softmax_ignores_locationwise_shift(t in tensor_strategy(5), shift in prop::collection::vec(-50.0f64..50.0, 25)) {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut shifted = t.clone();
        for k in 0..c {
            for i in 0..h * w {
                shifted.data_mut()[k * h * w + i] += shift[i];
            }
        }
        let mut g = Graph::new();
        let (a, b) = (g.input(t), g.input(shifted));
        let (sa, sb) = (g.softmax_channels(a).unwrap(), g.softmax_channels(b).unwrap());
        for (x, y) in g.value(sa).data().iter().zip(g.value(sb).data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_is_bit_exact(a in tensor_strategy(4), extra in 1usize..4, axis in 0usize..3) {
        let mut shape = a.shape().to_vec();
        shape[axis] = extra;
        let n: usize = shape.iter().product();
        let b = Tensor::new(shape, (0..n).map(|i| (i as f64).sqrt() - 1.5).collect()).unwrap();
        let mut g = Graph::new();
        let (na, nb) = (g.input(a.clone()), g.input(b.clone()));
        let cat = g.concat(&[na, nb], axis).unwrap();
        let len_a = a.shape()[axis];
        let ra = g.slice(cat, axis, 0, len_a).unwrap();
        let rb = g.slice(cat, axis, len_a, extra).unwrap();
        prop_assert_eq!(g.value(ra).data(), a.data());
        prop_assert_eq!(g.value(rb).data(), b.data());
    }

    #[test]
    fn mean_pool_of_constant_is_that_constant(v in -1e6f64..1e6, c in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[c, h, w], v));
        let p = g.global_mean_pool(x).unwrap();
        prop_assert!(g.value(p).data().iter().all(|&m| m == v));
    }
}
