use eici::ecim::{apply_attention, attention_map, ecim};
use eici::encoders::{encode_pair, Encoder, EncoderConfig, ImageKind, SlitLampPair};
use eici::icim::{self, FusionConfig, Transformer};
use eici::model::{random_sample, EiciNet, ModelConfig};
use eici::rng::{normal_tensor, seeded};
use eici::tabular::{broadcast_map, ClinicalRecord, NormStats, TabularEncoder, FLARE_GRADES, NUMERIC_FEATURES};
use eici::tensor::{grad_check, Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn record_strategy() -> impl Strategy<Value = ClinicalRecord> {
    (
        0u8..2,
        5.0f64..90.0,
        0.0f64..1.5,
        4.0f64..40.0,
        0usize..5,
        0usize..6,
        0.0f64..0.5,
        0u32..30,
        1.0f64..2.5,
    )
        .prop_map(|(gender, age, bcva, iop, kp, flare, area, count, ari)| ClinicalRecord {
            gender,
            age,
            bcva,
            iop,
            kp_grade: kp as f64,
            flare_grade: FLARE_GRADES[flare],
            cell_area_mm2: area,
            cell_count: count,
            ari,
        })
}

fn unit_image(seed: u64, shape: [usize; 3]) -> Tensor {
    let mut t = normal_tensor(&mut seeded(seed), &shape, 0.25);
    t.data_mut().iter_mut().for_each(|v| *v = (*v + 0.5).clamp(0.0, 1.0));
    t
}

#[test]
fn swapping_a_pair_swaps_its_encodings() {
    let cfg = EncoderConfig::desk();
    let mut store = ParamStore::new();
    let enc = Encoder::new("ac", cfg.clone(), &mut store, &mut seeded(4)).unwrap();
    let pair = SlitLampPair::new(
        ImageKind::AcObservation,
        unit_image(1, cfg.input_shape()),
        unit_image(2, cfg.input_shape()),
    )
    .unwrap();
    let mut g = Graph::new();
    let a = encode_pair(&mut g, &store, &enc, &pair).unwrap();
    let b = encode_pair(&mut g, &store, &enc, &pair.swapped()).unwrap();
    assert_eq!(g.value(a.first).data(), g.value(b.second).data());
    assert_eq!(g.value(a.second).data(), g.value(b.first).data());
    let half = g.value(a.concat).numel() / 2;
    let (ca, cb) = (g.value(a.concat).data(), g.value(b.concat).data());
    assert_eq!(&ca[..half], &cb[half..]);
    assert_eq!(&ca[half..], &cb[..half]);
}

#[test]
fn encodings_share_the_tabular_grid() {
    for cfg in [ModelConfig::micro(), ModelConfig::desk(), ModelConfig::desk_64()] {
        let net = EiciNet::new(cfg.clone(), 1).unwrap();
        let s = random_sample(&cfg, 5, 1).unwrap();
        let mut g = Graph::new();
        let trace = net.forward(&mut g, &s).unwrap();
        let [f1, f2] = trace.ac_features.unwrap();
        let c = cfg.base_channels();
        let (h, w) = cfg.ac.output_hw();
        assert_eq!(g.shape(f1), &[c, h, w]);
        assert_eq!(g.shape(f2), &[c, h, w]);
        let map = broadcast_map(&mut g, trace.tab_vector.unwrap(), h, w, 2 * c, c).unwrap();
        assert_eq!(&g.shape(map)[1..], &[h, w]);
        let maps = trace.ecim_maps.unwrap();
        assert_eq!(g.shape(maps[0]), g.shape(f1));
    }
}

#[test]
fn ecim_gradients_reach_both_inputs() {
    let mut rng = seeded(8);
    let mut store = ParamStore::new();
    let tab = store.add("tab", normal_tensor(&mut rng, &[2, 2, 2], 1.0));
    let ac = store.add("ac", normal_tensor(&mut rng, &[2, 2, 2], 1.0));
    let report = grad_check(&mut store, 1e-5, |g: &mut Graph, s: &ParamStore| {
        let (t, a) = (g.param(s, tab), g.param(s, ac));
        let map = attention_map(g, t, a)?;
        let out = apply_attention(g, map, a)?;
        let w = g.input(Tensor::new(vec![2, 2, 2], vec![0.3, -1.1, 0.8, 0.5, -0.2, 1.7, -0.9, 0.4])?);
        let p = g.mul(out, w)?;
        Ok::<_, eici::Error>(g.sum(p)?)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-6, "{report:?}");
    for id in [tab, ac] {
        assert!(store.get(id).grad().unwrap().iter().any(|&v| v.abs() > 1e-8));
    }
}

#[test]
fn end_to_end_micro_gradient_check() {
    let cfg = ModelConfig::micro();
    assert_eq!(cfg.base_channels(), 4);
    assert_eq!(cfg.ac.input_shape(), [1, 8, 8]);
    let a = random_sample(&cfg, 11, 0).unwrap();
    let b = random_sample(&cfg, 12, 1).unwrap();
    let mut net = EiciNet::new(cfg, 3).unwrap();
    net.fit_tabular([&a.record, &b.record]).unwrap();
    let report = net.grad_check(&[&a, &b], 1e-5).unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
    assert_eq!(report.coordinates, net.params.num_scalars());
}

#[test]
fn classification_ignores_token_order() {
    let cfg = FusionConfig::with_channels(8);
    let mut store = ParamStore::new();
    let tf = Transformer::new(cfg, &mut store, &mut seeded(2)).unwrap();
    let head = icim::Classifier::new(8, 2, &mut store, &mut seeded(3));
    let tokens = normal_tensor(&mut seeded(9), &[6, 8], 1.0);
    let perm = [4, 0, 5, 2, 1, 3];
    let permuted: Vec<f64> = perm.iter().flat_map(|&r| tokens.data()[r * 8..(r + 1) * 8].to_vec()).collect();
    let mut probs = Vec::new();
    for t in [tokens.clone(), Tensor::new(vec![6, 8], permuted).unwrap()] {
        let mut g = Graph::new();
        let x = g.input(t);
        let (out, _) = tf.forward(&mut g, &store, x).unwrap();
        let pooled = icim::pool_tokens(&mut g, out).unwrap();
        let logits = head.logits(&mut g, &store, pooled).unwrap();
        let p = icim::classify(&mut g, logits).unwrap();
        probs.push(g.value(p).data().to_vec());
    }
    for (a, b) in probs[0].iter().zip(&probs[1]) {
        assert!((a - b).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn tabular_map_is_spatially_uniform(rec in record_strategy(), h in 1usize..6, w in 1usize..6) {
        let mut store = ParamStore::new();
        let mut enc = TabularEncoder::new(4, &mut store, &mut seeded(1));
        enc.stats = NormStats::fit([&rec]).unwrap();
        let mut g = Graph::new();
        let v = enc.encode_record(&mut g, &store, &rec).unwrap();
        let m = broadcast_map(&mut g, v, h, w, 8, 4).unwrap();
        for chan in g.value(m).data().chunks(h * w) {
            prop_assert!(chan.iter().all(|&x| x == chan[0]));
        }
    }

    #[test]
    fn fold_statistics_standardize_the_fold(recs in prop::collection::vec(record_strategy(), 2..40)) {
        let stats = NormStats::fit(&recs).unwrap();
        let z: Vec<_> = recs.iter().map(|r| stats.normalize(r).unwrap()).collect();
        let n = z.len() as f64;
        for &f in &NUMERIC_FEATURES {
            let mean = z.iter().map(|v| v[f]).sum::<f64>() / n;
            let var = z.iter().map(|v| (v[f] - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-9);
            let spread = recs.iter().any(|r| r.features()[f] != recs[0].features()[f]);
            if spread {
                prop_assert!((var - 1.0).abs() <= 1e-9, "feature {} var {}", f, var);
            }
        }
    }

    #[test]
    fn distinct_records_encode_differently(a in record_strategy(), b in record_strategy()) {
        prop_assume!(a != b);
        let mut store = ParamStore::new();
        let mut enc = TabularEncoder::new(32, &mut store, &mut seeded(17));
        enc.stats = NormStats::fit([&a, &b]).unwrap();
        let mut g = Graph::new();
        let (va, vb) = (enc.encode_record(&mut g, &store, &a).unwrap(), enc.encode_record(&mut g, &store, &b).unwrap());
        prop_assert_ne!(g.value(va).data(), g.value(vb).data());
    }

    #[test]
    fn attention_preserves_argmax_on_nonnegative_features(
        tab in prop::collection::vec(-3.0f64..3.0, 4 * 9),
        ac in prop::collection::vec(0.0f64..3.0, 4 * 9),
    ) {
        let mut g = Graph::new();
        let t = g.input(Tensor::new(vec![4, 3, 3], tab).unwrap());
        let a = g.input(Tensor::new(vec![4, 3, 3], ac.clone()).unwrap());
        let out = ecim(&mut g, t, [a, a]).unwrap();
        let map = g.value(out.maps[0]).data().to_vec();
        let weighted = g.value(out.weighted[0]).data().to_vec();
        let argmax = |v: &dyn Fn(usize) -> f64| (0..4).max_by(|&i, &j| v(i).total_cmp(&v(j))).unwrap();
        for loc in 0..9 {
            let by_product = argmax(&|c| weighted[c * 9 + loc]);
            let by_magnitude = argmax(&|c| map[c * 9 + loc] * ac[c * 9 + loc].abs());
            prop_assert_eq!(by_product, by_magnitude);
        }
        prop_assert_eq!(g.shape(out.concat), &[8, 3, 3]);
    }

    #[test]
    fn locationwise_logit_shift_leaves_ecim_unchanged(
        tab in prop::collection::vec(-2.0f64..2.0, 3 * 4),
        mag in prop::collection::vec(0.5f64..2.0, 3 * 4),
        sign in prop::collection::vec(any::<bool>(), 3 * 4),
        shift in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let ac: Vec<f64> = mag.iter().zip(&sign).map(|(m, &s)| if s { *m } else { -m }).collect();
        // f_tab' * f_ac = f_tab * f_ac + shift(loc)
        let tab2: Vec<f64> = (0..12).map(|i| tab[i] + shift[i % 4] / ac[i]).collect();
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![3, 2, 2], ac).unwrap());
        let t1 = g.input(Tensor::new(vec![3, 2, 2], tab).unwrap());
        let t2 = g.input(Tensor::new(vec![3, 2, 2], tab2).unwrap());
        let m1 = attention_map(&mut g, t1, a).unwrap();
        let m2 = attention_map(&mut g, t2, a).unwrap();
        let o1 = apply_attention(&mut g, m1, a).unwrap();
        let o2 = apply_attention(&mut g, m2, a).unwrap();
        for (x, y) in g.value(o1).data().iter().zip(g.value(o2).data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }
}
