mod support;

use skelfuse::rng::Rng;
use skelfuse::stgcn::extract_joint_weights;
use skelfuse::stroi::{apply_joint_weights, map_vertex_weights_to_parts, StRoiGeometry, StRoiGrid, SubjectLayout};
use skelfuse::stgcn::JointWeights;
use skelfuse::graph::SkeletonTemplate;
use skelfuse::Tensor;
use support::joint_weight_oracle;

#[test]
fn mean_absolute_activation_matches_triple_loop() {
    let mut rng = Rng::new(401);
    for _ in 0..20 {
        let y = Tensor::normal(&[8, 6, 15], 2.0, &mut rng);
        let got = extract_joint_weights(&y).unwrap();
        for (g, w) in got.values().iter().zip(joint_weight_oracle(&y)) {
            assert!((*g as f64 - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }
}

#[test]
fn sign_flip_and_positive_scaling() {
    let mut rng = Rng::new(402);
    let y = Tensor::normal(&[8, 6, 15], 1.0, &mut rng);
    let base = extract_joint_weights(&y).unwrap();
    assert_eq!(extract_joint_weights(&y.map(|v| -v)).unwrap(), base);
    for c in [0.25f32, 2.0, 8.0] {
        let scaled = extract_joint_weights(&y.map(|v| v * c)).unwrap();
        let want: Vec<f32> = base.values().iter().map(|v| v * c).collect();
        assert_eq!(scaled.values(), want.as_slice());
    }
}

fn random_grid(layout: SubjectLayout, rng: &mut Rng) -> StRoiGrid {
    let geometry = StRoiGeometry::new(5, 5, 8, layout).unwrap();
    let (h, w) = geometry.image_size();
    StRoiGrid {
        image: Tensor::uniform(&[3, h, w], 0.0, 1.0, rng),
        geometry,
        subject_count: layout.groups(),
    }
}

#[test]
fn unit_weights_are_the_identity() {
    let mut rng = Rng::new(403);
    for layout in [SubjectLayout::Single, SubjectLayout::Pair] {
        let grid = random_grid(layout, &mut rng);
        let out = apply_joint_weights(&grid, &vec![1.0; 5 * layout.groups()]).unwrap();
        assert_eq!(out.image, grid.image);
    }
}

#[test]
fn zero_weight_annihilates_exactly_its_rows() {
    let mut rng = Rng::new(404);
    let grid = random_grid(SubjectLayout::Single, &mut rng);
    for part in 0..5 {
        let mut w = vec![1.0; 5];
        w[part] = 0.0;
        let out = apply_joint_weights(&grid, &w).unwrap();
        for s in 0..5 {
            for p in 0..5 {
                let probe = StRoiGrid { image: out.image.clone(), ..grid.clone() };
                let block = probe.block(p, s, 0);
                if p == part {
                    assert!(block.data().iter().all(|&v| v == 0.0));
                } else {
                    assert_eq!(block, grid.block(p, s, 0));
                }
            }
        }
    }
}

#[test]
fn weighting_is_linear() {
    let mut rng = Rng::new(405);
    let grid = random_grid(SubjectLayout::Pair, &mut rng);
    let a: Vec<f32> = (0..10).map(|_| rng.uniform() as f32).collect();
    let b: Vec<f32> = (0..10).map(|_| rng.uniform() as f32).collect();
    let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
    let (ya, yb, ys) = (
        apply_joint_weights(&grid, &a).unwrap().image,
        apply_joint_weights(&grid, &b).unwrap().image,
        apply_joint_weights(&grid, &sum).unwrap().image,
    );
    for ((p, q), s) in ya.data().iter().zip(yb.data()).zip(ys.data()) {
        assert!((p + q - s).abs() <= 1e-6);
    }
}

#[test]
fn part_weights_are_rescaled_to_unit_maximum() {
    let template = SkeletonTemplate::stick_figure();
    let mut w = vec![0.0; 15];
    for (i, &j) in template.part_joints().iter().enumerate() {
        w[j] = (i + 1) as f32;
    }
    w[0] = 100.0;
    let parts = map_vertex_weights_to_parts(&JointWeights::new(w).unwrap(), &template).unwrap();
    assert_eq!(parts, vec![0.2, 0.4, 0.6, 0.8, 1.0]);
}
