use nalgebra::Point3;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mvp_core::attention::{
    causal_linear_attention, exact_attention_row, exact_causal_attention, AssociativeMemory, KernelFeatureMap, KernelKind,
};
use mvp_core::metrics::{fscore, jaccard};
use mvp_core::numerics::{conv3d, conv_transpose3d, Tensor};
use mvp_core::scenes::{gen_object, make_sequence, ObjectKind, Protocol, SceneConfig};
use mvp_core::voxel::{decode_vxg, encode_vxg, marching_cubes, voxelize, PointCloud, VoxelGrid};
use mvp_core::ExecMode;

fn grid_from(r: usize, bits: &[bool]) -> VoxelGrid {
    let v = bits.iter().map(|&b| b as u8 as f32).collect();
    VoxelGrid::from_values(r, v, Point3::new(-0.1, 0.2, 0.05), 0.01).unwrap()
}

fn arb_grid() -> impl Strategy<Value = VoxelGrid> {
    (1usize..=8).prop_flat_map(|r| prop::collection::vec(any::<bool>(), r * r * r).prop_map(move |b| grid_from(r, &b)))
}

fn arb_pair() -> impl Strategy<Value = (VoxelGrid, VoxelGrid)> {
    (1usize..=8).prop_flat_map(|r| {
        let n = r * r * r;
        (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))
            .prop_map(move |(a, b)| (grid_from(r, &a), grid_from(r, &b)))
    })
}

fn arb_cloud(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 1..max)
        .prop_map(|p| PointCloud::new(p.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect()).unwrap())
}

fn tensor(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(vec![rows, cols], data[..rows * cols].to_vec()).unwrap()
}

fn arb_qkv() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
    (1usize..=12, 1usize..=6, 1usize..=6).prop_flat_map(|(l, dqk, d)| {
        (
            prop::collection::vec(-1.5..1.5f64, l * dqk),
            prop::collection::vec(-1.5..1.5f64, l * dqk),
            prop::collection::vec(-1.5..1.5f64, l * d),
        )
            .prop_map(move |(q, k, v)| (tensor(l, dqk, &q), tensor(l, dqk, &k), tensor(l, d, &v)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jaccard_is_symmetric_and_bounded((a, b) in arb_pair()) {
        let ab = jaccard(&a, &b, 0.5).unwrap();
        prop_assert_eq!(ab, jaccard(&b, &a, 0.5).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(jaccard(&a, &a, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn adding_a_correct_voxel_never_lowers_jaccard((a, b) in arb_pair(), pick in any::<prop::sample::Index>()) {
        // Under-prediction: pred = a ∩ b, target = b.
        let pred: Vec<f64> = a.values().iter().zip(b.values()).map(|(&x, &y)| (x.min(y)) as f64).collect();
        let pred = b.with_values(&pred).unwrap();
        let missing: Vec<usize> = (0..b.len()).filter(|&i| b.values()[i] >= 0.5 && pred.values()[i] < 0.5).collect();
        prop_assume!(!missing.is_empty());
        let i = missing[pick.index(missing.len())];
        let mut grown = pred.to_f64();
        grown[i] = 1.0;
        let grown = b.with_values(&grown).unwrap();
        prop_assert!(jaccard(&grown, &b, 0.5).unwrap() >= jaccard(&pred, &b, 0.5).unwrap());
    }

    #[test]
    fn fscore_swaps_and_grows_with_distance(p in arb_cloud(60), g in arb_cloud(60), d in 0.01..0.4f64) {
        let ab = fscore(&p, &g, d).unwrap();
        let ba = fscore(&g, &p, d).unwrap();
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
        prop_assert_eq!(ab.fscore, ba.fscore);
        let wider = fscore(&p, &g, d * 1.5).unwrap();
        prop_assert!(wider.fscore >= ab.fscore);
    }

    #[test]
    fn vxg_round_trip_is_identity(g in arb_grid()) {
        prop_assert_eq!(decode_vxg(&encode_vxg(&g)).unwrap(), g);
    }

    #[test]
    fn voxelizing_voxel_centers_reproduces_grid(g in arb_grid()) {
        let v = voxelize(&g.occupied_centers(), g.resolution(), g.origin(), g.voxel_size()).unwrap();
        prop_assert_eq!(v.grid, g.binarize(0.5));
        prop_assert_eq!(v.dropped, 0);
    }

    #[test]
    fn padded_solids_mesh_to_closed_manifolds(g in arb_grid()) {
        let mesh = marching_cubes(&g, 0.5).unwrap();
        prop_assert_eq!(mesh.is_empty(), g.occupied_count() == 0);
        if !mesh.is_empty() {
            prop_assert!(mesh.edge_counts().values().all(|&c| c == 2));
        }
    }

    #[test]
    fn linear_attention_is_causal((q, k, v) in arb_qkv(), cut in any::<prop::sample::Index>(), seed in 0u64..100) {
        let l = q.shape()[0];
        let n = cut.index(l) + 1;
        let head = |t: &Tensor| Tensor::new(vec![n, t.shape()[1]], t.data()[..n * t.shape()[1]].to_vec()).unwrap();
        for map in [KernelFeatureMap::relu(q.shape()[1]), KernelFeatureMap::softmax_favor(q.shape()[1], 16, seed).unwrap()] {
            let full = causal_linear_attention(&q, &k, &v, &map).unwrap();
            let short = causal_linear_attention(&head(&q), &head(&k), &head(&v), &map).unwrap();
            prop_assert_eq!(&full.data()[..short.len()], short.data());
        }
    }

    #[test]
    fn streaming_memory_matches_batch((q, k, v) in arb_qkv(), seed in 0u64..100) {
        let map = KernelFeatureMap::softmax_favor_orthogonal(q.shape()[1], 8, seed).unwrap();
        let batch = causal_linear_attention(&q, &k, &v, &map).unwrap();
        let mut mem = AssociativeMemory::for_map(&map, v.shape()[1]);
        let size = mem.byte_size();
        for i in 0..q.shape()[0] {
            mem.update(&map, k.row(i), v.row(i)).unwrap();
            let out = mem.query_or(&map, q.row(i), v.row(i)).unwrap();
            for (a, b) in out.iter().zip(batch.row(i)) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
        prop_assert_eq!(mem.byte_size(), size);
    }

    #[test]
    fn relu_linear_equals_exact((q, k, v) in arb_qkv()) {
        let a = causal_linear_attention(&q, &k, &v, &KernelFeatureMap::relu(q.shape()[1])).unwrap();
        let b = exact_causal_attention(&q, &k, &v, KernelKind::Relu).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_stay_inside_prefix_hull((q, k, v) in arb_qkv()) {
        let out = exact_causal_attention(&q, &k, &v, KernelKind::Softmax).unwrap();
        let d = v.shape()[1];
        for i in 0..q.shape()[0] {
            for c in 0..d {
                let col = (0..=i).map(|j| v.row(j)[c]);
                let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
                let o = out.row(i)[c];
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn well_separated_keys_retrieve_their_value(n in 2usize..8, scale in 3.0..5.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Unit-norm values, so the dot-product nearest neighbor of v_j is v_j.
        let mut values = Tensor::randn(&[n, 16], 1.0, &mut rng);
        for row in values.data_mut().chunks_mut(16) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let mut keys = vec![0.0; n * n];
        for j in 0..n {
            keys[j * n + j] = scale;
        }
        for j in 0..n {
            let q = &keys[j * n..(j + 1) * n];
            for kind in [KernelKind::Softmax, KernelKind::Relu] {
                let out = exact_attention_row(q, &keys, values.data(), kind);
                let score = |i: usize| values.row(i).iter().zip(&out).map(|(a, b)| a * b).sum::<f64>();
                let best = (0..n).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
                prop_assert_eq!(best, j);
            }
        }
    }

    #[test]
    fn transposed_conv_restores_extent(d in 1usize..10, half in 0usize..3, stride in 1usize..4, pad_frac in 0usize..3) {
        let k = 2 * half + 1;
        let pad = pad_frac.min(half);
        prop_assume!(d + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(d as u64);
        let x = Tensor::randn(&[1, 2, d, d, d], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, k, k, k], 1.0, &mut rng);
        let y = conv3d(&x, &w, stride, pad, ExecMode::Sequential).unwrap();
        let wt = Tensor::randn(&[3, 2, k, k, k], 1.0, &mut rng);
        let out_pad = (d + 2 * pad - k) % stride;
        let back = conv_transpose3d(&y, &wt, stride, pad, out_pad, ExecMode::Sequential).unwrap();
        prop_assert_eq!(back.shape(), &[1, 2, d, d, d]);
        let par = conv3d(&x, &w, stride, pad, ExecMode::Parallel).unwrap();
        prop_assert_eq!(par, y);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn pan_targets_agree_under_camera_motion(kind in 0usize..5, seed in 0u64..1000) {
        let scene = SceneConfig { seq_len: 4, ..SceneConfig::default() };
        let obj = gen_object(ObjectKind::ALL[kind], seed);
        let s = make_sequence(Protocol::CameraPan, &[obj], &scene, seed + 1).unwrap();
        let (t0, c0) = (&s.targets[0], &s.cameras[0]);
        let r = scene.resolution;
        for (t, cam) in s.targets.iter().zip(&s.cameras).skip(1) {
            let mut agree = 0;
            for z in 0..r {
                for y in 0..r {
                    for x in 0..r {
                        let w = cam.to_world(&t.voxel_center(x, y, z));
                        let there = c0.to_camera(&w);
                        let v0 = t0.locate(&there).map_or(0.0, |[a, b, c]| t0.get(a, b, c));
                        agree += ((v0 >= 0.5) == (t.get(x, y, z) >= 0.5)) as usize;
                    }
                }
            }
            let frac = agree as f64 / (r * r * r) as f64;
            prop_assert!(frac >= 0.95, "agreement {frac}");
        }
    }

    #[test]
    fn generators_are_deterministic(p in 0usize..5, seed in 0u64..1000) {
        let protocol = Protocol::ALL[p];
        let objs: Vec<_> = (0..protocol.objects_per_scene()).map(|i| gen_object(ObjectKind::ALL[(p + i) % 5], seed + i as u64)).collect();
        let scene = SceneConfig { seq_len: 3, ..SceneConfig::default() };
        let a = make_sequence(protocol, &objs, &scene, seed).unwrap();
        let b = make_sequence(protocol, &objs, &scene, seed).unwrap();
        prop_assert_eq!(a.frames, b.frames);
        prop_assert_eq!(a.targets, b.targets);
    }
}
