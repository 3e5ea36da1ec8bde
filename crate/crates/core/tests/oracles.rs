mod support;

use skelfuse::rng::Rng;
use support::*;

const SHAPES: usize = 50;

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = Rng::new(101);
    for _ in 0..SHAPES {
        let (x, k, spec) = conv_problem(&mut rng);
        let (want, _) = conv_oracle(&x, &k, spec);
        assert!(rel_error(&conv_tape::<f64>(&x, &k, spec), &want, 1e-9) < 1e-5);

        let (x, k) = (x.cast::<f32>().cast::<f64>(), k.cast::<f32>().cast::<f64>());
        let (want, mag) = conv_oracle(&x, &k, spec);
        assert!(rel_error_to_magnitude(&conv_tape::<f32>(&x, &k, spec), &want, &mag) < 1e-5);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::new(102);
    for _ in 0..SHAPES {
        let (a, b) = matmul_problem(&mut rng);
        let (want, _) = matmul_oracle(&a, &b);
        assert!(rel_error(&matmul_tape::<f64>(&a, &b), &want, 1e-9) < 1e-5);

        let (a, b) = (a.cast::<f32>().cast::<f64>(), b.cast::<f32>().cast::<f64>());
        let (want, mag) = matmul_oracle(&a, &b);
        assert!(rel_error_to_magnitude(&matmul_tape::<f32>(&a, &b), &want, &mag) < 1e-5);
    }
}

#[test]
fn reductions_match_index_enumeration() {
    let mut rng = Rng::new(103);
    for _ in 0..SHAPES {
        let (x, axes) = reduce_problem(&mut rng);
        let (want, _) = reduce_oracle(&x, &axes);
        assert!(rel_error(&reduce_tape::<f64>(&x, &axes), &want, 1e-9) < 1e-5);

        let x = x.cast::<f32>().cast::<f64>();
        let (want, mag) = reduce_oracle(&x, &axes);
        assert!(rel_error_to_magnitude(&reduce_tape::<f32>(&x, &axes), &want, &mag) < 1e-5);
    }
}
