use std::collections::BTreeSet;

use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;

use scenelat::align::{icp_align, substitute_landmark, IcpConfig, RigidTransform};
use scenelat::flow::{forward_step, gaussian_tensor, oracle_field, Condition};
use scenelat::fusion::fuse_region;
use scenelat::latent::from_dense;
use scenelat::prior::{normalize, voxelize, LabeledPointCloud, PointLabel};
use scenelat::rng::ConstantNoise;
use scenelat::slat::{read_slat, write_slat};
use scenelat::tiler::plan_patches;
use scenelat::{
    masked_complete, FlowConfig, FlowTensor, PhiloxRng, RegenMask, SceneState, StructuredLatent,
    Voxel, VoxelTag,
};

const K: u32 = 12;

fn voxel(k: u32) -> impl Strategy<Value = Voxel> {
    (0..k, 0..k, 0..k).prop_map(|(x, y, z)| Voxel::new(x, y, z))
}

/// Distinct positions in arbitrary order, with features.
fn latent_parts(k: u32, c: usize) -> impl Strategy<Value = (Vec<Voxel>, Vec<f32>)> {
    prop::collection::btree_set(voxel(k), 0..60)
        .prop_flat_map(move |set| {
            let n = set.len();
            (
                Just(set.into_iter().collect::<Vec<_>>()).prop_shuffle(),
                prop::collection::vec(-1e6f32..1e6, n * c),
            )
        })
}

fn sorted_bits(v: &[f32]) -> Vec<u32> {
    let mut b: Vec<u32> = v.iter().map(|f| f.to_bits()).collect();
    b.sort_unstable();
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn canonicalization_is_an_idempotent_permutation((pos, feat) in latent_parts(K, 3)) {
        let l = StructuredLatent::new(K, 3, pos.clone(), feat.clone()).unwrap();
        let again = StructuredLatent::new(K, 3, l.positions().to_vec(), l.features().to_vec()).unwrap();
        prop_assert_eq!(&again, &l);
        prop_assert!(l.positions().windows(2).all(|w| w[0] < w[1]));
        let mut expected = pos.clone();
        expected.sort_unstable();
        prop_assert_eq!(l.positions(), &expected[..]);
        prop_assert_eq!(sorted_bits(l.features()), sorted_bits(&feat));
        // rows travel with their positions
        for (i, p) in pos.iter().enumerate() {
            let j = l.find(*p).unwrap();
            prop_assert_eq!(l.row(j), &feat[3 * i..3 * i + 3]);
        }
    }

    #[test]
    fn dense_round_trip((pos, feat) in latent_parts(K, 2)) {
        let l = StructuredLatent::new(K, 2, pos, feat).unwrap();
        prop_assert_eq!(from_dense(&l.to_dense(), 0.0), l.positions().to_vec());
    }

    #[test]
    fn full_window_is_identity((pos, feat) in latent_parts(K, 2)) {
        let l = StructuredLatent::new(K, 2, pos, feat).unwrap();
        prop_assert_eq!(l.window([0; 3], [K; 3]).unwrap(), l);
    }

    #[test]
    fn slat_round_trip_is_bit_exact((pos, feat) in latent_parts(K, 4)) {
        let l = StructuredLatent::new(K, 4, pos, feat).unwrap();
        let mut bytes = Vec::new();
        write_slat(&l, &mut bytes).unwrap();
        let back = read_slat(&bytes[..]).unwrap();
        prop_assert_eq!(back.positions(), l.positions());
        prop_assert_eq!(sorted_bits(back.features()), sorted_bits(l.features()));
        let mut again = Vec::new();
        write_slat(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }

    #[test]
    fn plans_are_permutation_invariant_and_cover(
        set in prop::collection::btree_set(voxel(40), 1..80),
        patch in 4u32..20,
        seed in any::<u64>(),
    ) {
        let sorted: Vec<Voxel> = set.into_iter().collect();
        let mut shuffled = sorted.clone();
        let mut rng = PhiloxRng::new(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.next_below(i as u64 + 1) as usize);
        }
        let plan = plan_patches(&sorted, 40, [patch; 3]).unwrap();
        prop_assert_eq!(&plan_patches(&shuffled, 40, [patch; 3]).unwrap(), &plan);
        prop_assert!(plan.origins.windows(2).all(|w| w[0] < w[1]));
        for o in &plan.origins {
            prop_assert!(o.iter().all(|&c| c + patch <= 40));
        }
        for v in &sorted {
            prop_assert!(plan.covering(*v).next().is_some(), "{} uncovered", v);
        }
    }

    #[test]
    fn zero_noise_forward_step_is_linear(
        values in prop::collection::vec(-1e3f32..1e3, 1..50),
        t in 0.0f64..=1.0,
    ) {
        let x = FlowTensor::new(vec![values.len()], values.clone()).unwrap();
        let y = forward_step(&x, t, 0.0, &mut ConstantNoise(0.0)).unwrap();
        for (o, &v) in y.values().iter().zip(&values) {
            prop_assert_eq!(o.to_bits(), (((1.0 - t) * v as f64) as f32).to_bits());
        }
    }

    #[test]
    fn completion_preserves_unmasked_elements(
        regen in prop::collection::vec(any::<bool>(), 1..300),
        steps in 1u32..6,
        resamples in 1u32..4,
        seed in any::<u64>(),
    ) {
        let n = regen.len();
        let mut rng = PhiloxRng::new(seed);
        let known = gaussian_tensor(vec![n], &mut rng);
        let mask = RegenMask::new(vec![n], regen.clone()).unwrap();
        let field = oracle_field(gaussian_tensor(vec![n], &mut rng), 0.0);
        let cfg = FlowConfig { steps, resamples, sigma_min: 0.0, ..Default::default() };
        let out = masked_complete(&known, &mask, &field, &Condition::default(), &cfg, &mut rng)
            .unwrap();
        prop_assert_eq!(out.shape(), known.shape());
        for i in (0..n).filter(|&i| !regen[i]) {
            prop_assert_eq!(out.values()[i].to_bits(), known.values()[i].to_bits());
        }
    }
}

/// A random cloud on a dyadic lattice, so translation and power-of-two
/// scaling are exact in floating point.
fn lattice_cloud() -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec((0i32..256, 0i32..256, 0i32..256), 2..120).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, z)| Vector3::new(x as f64, y as f64, z as f64) / 64.0)
            .collect()
    })
}

fn voxel_set(points: Vec<Vector3<f64>>, m: u32) -> Vec<Voxel> {
    let cloud = LabeledPointCloud::background(points).unwrap();
    let (normalized, _) = normalize(&cloud).unwrap();
    voxelize(&normalized, m).0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn voxelization_ignores_translation_and_scale(
        points in lattice_cloud(),
        shift in (-64i32..64, -64i32..64, -64i32..64),
        scale_exp in -3i32..4,
    ) {
        let base = voxel_set(points.clone(), 32);
        let s = 2f64.powi(scale_exp);
        let t = Vector3::new(shift.0 as f64, shift.1 as f64, shift.2 as f64) / 8.0;
        let moved: Vec<_> = points.iter().map(|p| p * s + t).collect();
        prop_assert!(base.len() <= points.len());
        prop_assert_eq!(voxel_set(moved, 32), base);
    }

    #[test]
    fn icp_on_identical_clouds_is_identity(points in lattice_cloud()) {
        // needs three non-collinear points
        let spread = points.iter().map(|p| (p - points[0]).norm()).fold(0.0, f64::max);
        prop_assume!(points.len() >= 4 && spread > 0.1);
        let first = points[0];
        let far = points.iter().max_by(|a, b| (*a - first).norm().total_cmp(&(*b - first).norm())).unwrap();
        let axis = (far - first).normalize();
        let off_line = points.iter().map(|p| (p - first).cross(&axis).norm()).fold(0.0, f64::max);
        prop_assume!(off_line > 0.1);

        let r = icp_align(&points, &points, &IcpConfig::default()).unwrap();
        prop_assert!(r.transform.is_rigid(1e-9));
        prop_assert!(r.transform.max_abs_diff(&RigidTransform::identity()) <= 1e-9);
        prop_assert!(r.rmse_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn substitution_keeps_other_points(
        points in lattice_cloud(),
        ids in prop::collection::vec(-1i64..3, 120),
        angle in 0.0f64..3.0,
    ) {
        let labels: Vec<PointLabel> = ids[..points.len()].iter().map(|&c| PointLabel::from_code(c)).collect();
        let cloud = LabeledPointCloud::new(points, labels).unwrap();
        let target = PointLabel::Foreground(1);
        prop_assume!(cloud.labels().contains(&target));
        let generated = vec![Vector3::new(0.1, 0.2, 0.3); 7];
        let pose = RigidTransform {
            rotation: *Rotation3::from_axis_angle(&Vector3::x_axis(), angle).matrix(),
            translation: Vector3::new(1.0, 0.0, -1.0),
        };
        let out = substitute_landmark(&cloud, 1, &generated, &pose).unwrap();
        let kept: Vec<_> = cloud.points().iter().zip(cloud.labels()).filter(|(_, l)| **l != target).collect();
        let removed = cloud.len() - kept.len();
        prop_assert_eq!(out.len(), cloud.len() - removed + generated.len());
        for (i, (p, l)) in kept.iter().enumerate() {
            prop_assert_eq!(out.labels()[i], **l);
            for a in 0..3 {
                prop_assert_eq!(out.points()[i][a].to_bits(), p[a].to_bits());
            }
        }
        prop_assert!(out.labels()[kept.len()..].iter().all(|l| *l == target));
    }

    #[test]
    fn fusion_is_idempotent_and_monotone(
        scene_tags in prop::collection::vec(0u8..4, (K * K * K) as usize),
        region_set in prop::collection::btree_set(voxel(6), 0..80),
        origin in (0u32..7, 0u32..7, 0u32..7),
        fill in -5.0f32..5.0,
    ) {
        // scene: tags 1 = prior, 2 = generated, 3 = landmark 9; latent holds every tagged voxel
        let mut state = SceneState::new(K);
        let mut positions = Vec::new();
        for (i, &t) in scene_tags.iter().enumerate() {
            let v = Voxel::from_linear_index(i, [K; 3]);
            let tag = match t {
                1 => VoxelTag::Prior,
                2 => VoxelTag::Generated,
                3 => VoxelTag::Landmark(9),
                _ => continue,
            };
            state.set(v, tag);
            positions.push(v);
        }
        let scene = StructuredLatent::zeros(K, 2, positions).unwrap();
        let region_pos: Vec<Voxel> = region_set.into_iter().collect();
        let region = StructuredLatent::new(6, 2, region_pos.clone(), vec![fill; 2 * region_pos.len()]).unwrap();
        let origin = [origin.0, origin.1, origin.2];

        for partial in [BTreeSet::new(), BTreeSet::from([9])] {
            let (once, s1, _) = fuse_region(&scene, &state, &region, origin, &partial).unwrap();
            let (twice, s2, _) = fuse_region(&once, &s1, &region, origin, &partial).unwrap();
            prop_assert_eq!(&twice, &once);
            prop_assert_eq!(s2.tags(), s1.tags());
            prop_assert!(once.len() >= scene.len());
            for (i, (&before, &after)) in state.tags().iter().zip(s1.tags()).enumerate() {
                let v = Voxel::from_linear_index(i, [K; 3]);
                match before {
                    VoxelTag::Landmark(_) | VoxelTag::Generated => prop_assert_eq!(after, before),
                    VoxelTag::Prior => prop_assert!(matches!(after, VoxelTag::Prior | VoxelTag::Generated)),
                    VoxelTag::Empty => prop_assert!(matches!(after, VoxelTag::Empty | VoxelTag::Generated)),
                }
                if partial.contains(&9) && before == VoxelTag::Landmark(9) {
                    let j = once.find(v).unwrap();
                    prop_assert_eq!(once.row(j), &[0.0, 0.0]);
                }
            }
        }
    }
}
