use std::collections::BTreeSet;

use proptest::prelude::*;

use sign::cli::checkpoint::Checkpoint;
use sign::datagen::{make_class_catalog, render_sample, Split};
use sign::diffmath::nn::Params;
use sign::diffmath::{Graph, ParamId, ParamStore, Tensor};
use sign::eval::{harmonic_mean, miou, ConfusionMatrix};
use sign::losses::{ast_weights, cross_entropy, mmd_sets};
use sign::posenc::{build_pe_map, PeMode};
use sign::sim::{Sim, SimArch, SimConfig};
use sign::{seeds, LabelMap};

fn vec_f64(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_ignores_constant_shift(logits in vec_f64(12, -5.0, 5.0), shift in -50.0f64..50.0) {
        let mut g = Graph::new();
        let a = g.constant(tensor(vec![4, 3], logits.clone()));
        let b = g.constant(tensor(vec![4, 3], logits.iter().map(|v| v + shift).collect()));
        let (sa, sb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) <= 1e-12);
    }

    #[test]
    fn ast_weights_properties(p in vec_f64(20, 0.0, 1.0), shift in -3.0f64..3.0, t in 0.1f64..10.0) {
        let conf = tensor(vec![20], p.clone());
        let w = ast_weights(&conf, t).unwrap();
        let shifted = ast_weights(&conf.map(|v| v + shift), t).unwrap();
        prop_assert!(w.max_abs_diff(&shifted) <= 1e-12);
        let best = (0..20).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        prop_assert_eq!(w.data()[best], 1.0);
        for i in 0..20 {
            for j in 0..20 {
                if p[i] <= p[j] {
                    prop_assert!(w.data()[i] <= w.data()[j]);
                }
            }
        }
        let w2 = ast_weights(&conf, 2.0).unwrap();
        prop_assert!(w2.data().iter().all(|&v| v >= (-0.5f64).exp()));
    }

    #[test]
    fn mmd_symmetric_and_zero_on_equal_sets(a in vec_f64(12, -2.0, 2.0), b in vec_f64(8, -2.0, 2.0)) {
        let mut g = Graph::new();
        let va = g.constant(tensor(vec![3, 4], a.clone()));
        let vb = g.constant(tensor(vec![2, 4], b));
        let ab = mmd_sets(&mut g, va, vb).unwrap();
        let ba = mmd_sets(&mut g, vb, va).unwrap();
        let aa = mmd_sets(&mut g, va, va).unwrap();
        prop_assert!((g.value(ab).data()[0] - g.value(ba).data()[0]).abs() <= 1e-12);
        prop_assert!(g.value(ab).data()[0] >= -1e-12);
        prop_assert_eq!(g.value(aa).data()[0], 0.0);
    }

    #[test]
    fn unit_weights_match_unweighted_cross_entropy(logits in vec_f64(3 * 12, -4.0, 4.0), ids in prop::collection::vec(0u16..3, 12)) {
        let y = LabelMap::new(3, 4, ids).unwrap();
        let mut g = Graph::new();
        let x = g.constant(tensor(vec![3, 3, 4], logits));
        let plain = cross_entropy(&mut g, x, &y, None).unwrap().loss;
        let ones = Tensor::ones(&[3, 4]);
        let weighted = cross_entropy(&mut g, x, &y, Some(&ones)).unwrap().loss;
        prop_assert_eq!(g.value(plain).data()[0].to_bits(), g.value(weighted).data()[0].to_bits());
    }

    #[test]
    fn harmonic_mean_bounds(s in 0.0f64..1.0, u in 0.0f64..1.0) {
        let h = harmonic_mean(s, u);
        let lo = s.min(u);
        prop_assert!(h >= lo - 1e-15 && h <= 2.0 * lo + 1e-15);
        prop_assert!(h <= (s + u) / 2.0 + 1e-15);
    }

    #[test]
    fn miou_permutation_and_streaming(
        gt in prop::collection::vec(0u16..4, 24),
        pred in prop::collection::vec(0u16..4, 24),
        perm in Just([0u16, 1, 2, 3]).prop_shuffle(),
        cut in 1usize..23,
    ) {
        let all: BTreeSet<u16> = (0..4).collect();
        let map = |v: &[u16]| LabelMap::new(1, v.len(), v.to_vec()).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&map(&pred), &map(&gt)).unwrap();
        let relabel = |v: &[u16]| v.iter().map(|&c| perm[c as usize]).collect::<Vec<_>>();
        let mut cp = ConfusionMatrix::new(4);
        cp.accumulate(&map(&relabel(&pred)), &map(&relabel(&gt))).unwrap();
        let (a, b) = (miou(&cm, &all).unwrap(), miou(&cp, &all).unwrap());
        prop_assert!((a.miou - b.miou).abs() <= 1e-12);

        let mut first = ConfusionMatrix::new(4);
        first.accumulate(&map(&pred[..cut]), &map(&gt[..cut])).unwrap();
        let mut second = ConfusionMatrix::new(4);
        second.accumulate(&map(&pred[cut..]), &map(&gt[cut..])).unwrap();
        let mut streamed = first.clone();
        streamed.accumulate(&map(&pred[cut..]), &map(&gt[cut..])).unwrap();
        prop_assert_eq!(&streamed, &cm);
        let (mut ab, mut ba) = (first.clone(), second.clone());
        ab.merge(&second).unwrap();
        ba.merge(&first).unwrap();
        prop_assert_eq!(&ab, &cm);
        prop_assert_eq!(&ba, &cm);
        prop_assert_eq!(cm.total(), 24);
    }

    #[test]
    fn pe_norms(h in 1usize..9, w in 1usize..9, th in 1usize..6, tw in 1usize..6) {
        for mode in [PeMode::Rpe, PeMode::Ape] {
            let m = build_pe_map(h, w, mode, None).unwrap();
            for r in 0..h {
                for c in 0..w {
                    let n: f64 = m.column(r, c).iter().map(|v| v * v).sum();
                    prop_assert!((n - 300.0).abs() <= 1e-9);
                }
            }
        }
        let m = build_pe_map(h, w, PeMode::ApeInterp, Some((th, tw))).unwrap();
        for r in 0..h {
            for c in 0..w {
                let n: f64 = m.column(r, c).iter().map(|v| v * v).sum();
                prop_assert!((0.0..=300.0 + 1e-6).contains(&n));
            }
        }
        prop_assert_eq!(build_pe_map(h, w, PeMode::Rpe, None).unwrap(), build_pe_map(h, w, PeMode::Rpe, None).unwrap());
    }

    #[test]
    fn rpe_matches_across_sizes(h in 1usize..6, w in 1usize..6, k in 2usize..5) {
        let small = build_pe_map(h, w, PeMode::Rpe, None).unwrap();
        let big = build_pe_map(h * k, w * k, PeMode::Rpe, None).unwrap();
        for r in 0..h {
            for c in 0..w {
                let d = small.column(r, c).iter().zip(big.column(r * k, c * k)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(d <= 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(
        records in prop::collection::vec((prop::collection::vec(1usize..4, 0..3), any::<u32>()), 0..6),
    ) {
        let mut ck = Checkpoint::new();
        for (i, (shape, seed)) in records.iter().enumerate() {
            let n: usize = shape.iter().product();
            let mut rng = seeds::stream(&[*seed as u64]);
            let data = Tensor::randn(&[n.max(1)], 3.0, &mut rng).data()[..n].iter().map(|&v| v as f32).collect();
            ck.push(format!("r{i}/x"), shape.clone(), data).unwrap();
        }
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn catalog_invariants(seed in 0u64..10_000) {
        let cat = make_class_catalog(7, 3, seed).unwrap();
        prop_assert!(cat.seen.is_disjoint(&cat.unseen));
        prop_assert_eq!(cat.seen.len() + cat.unseen.len(), cat.num_classes());
        let attrs = |ids: &BTreeSet<u16>| ids.iter().filter_map(|&i| cat.classes[i as usize].attributes).collect::<Vec<_>>();
        let seen = attrs(&cat.seen);
        for u in attrs(&cat.unseen) {
            prop_assert!(seen.iter().any(|s| s.shape == u.shape));
            prop_assert!(seen.iter().any(|s| s.color == u.color));
        }
        let pair = seen.iter().enumerate().any(|(i, a)| {
            seen[i + 1..].iter().any(|b| a.shape == b.shape && a.color == b.color && a.zone != b.zone)
        });
        prop_assert!(pair);
    }

    #[test]
    fn train_split_is_seen_only(seed in 0u64..1000, index in 0u64..1_000_000) {
        let cat = make_class_catalog(7, 3, seed % 7).unwrap();
        let s = render_sample(&cat, Split::TrainSeen, index, seed, (32, 32)).unwrap();
        prop_assert!(!s.has_unseen);
        prop_assert!(s.labels.classes().is_subset(&cat.seen));
        prop_assert_eq!((s.labels.height(), s.labels.width()), (32, 32));
    }

    #[test]
    fn attention_sim_is_permutation_equivariant_without_pe(seed in 0u64..1000, perm in Just([0usize, 1, 2, 3, 4, 5]).prop_shuffle()) {
        for arch in [SimArch::SelfAttn, SimArch::MultiheadSa] {
            let mut rng = seeds::stream(&[seed]);
            let mut store = ParamStore::new();
            let cfg = SimConfig { arch, heads: 2, feature_channels: 4, latent_channels: 2 };
            let sim = Sim::new(&mut store, cfg, &mut rng).unwrap();
            let ids: Vec<ParamId> = store.ids().collect();
            for id in ids {
                let v = store.value(id).clone();
                let noise = Tensor::randn(v.shape(), 0.2, &mut rng);
                store.set(id, tensor(v.shape().to_vec(), v.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())).unwrap();
            }
            let x = Tensor::randn(&[4, 1, 6], 1.0, &mut rng);
            let xp = Tensor::from_fn(&[4, 1, 6], |i| x.data()[(i / 6) * 6 + perm[i % 6]]);
            let mut g = Graph::new();
            let (a, b) = (g.constant(x), g.constant(xp));
            let oa = sim.forward(&mut g, Params::freeze(&store), a, None).unwrap();
            let ob = sim.forward(&mut g, Params::freeze(&store), b, None).unwrap();
            for (va, vb) in [(oa.features, ob.features), (oa.latent.mu, ob.latent.mu), (oa.latent.logvar, ob.latent.logvar)] {
                let (ta, tb) = (g.value(va), g.value(vb));
                let c = ta.shape()[0];
                let permuted = Tensor::from_fn(&[c, 1, 6], |i| ta.data()[(i / 6) * 6 + perm[i % 6]]);
                prop_assert!(permuted.max_abs_diff(tb) <= 1e-10, "{:?}", arch);
            }
        }
    }
}
