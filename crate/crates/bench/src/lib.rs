//! Seeded panels for benchmarks.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdid_core::BlockDesign;

/// A rank-two factor panel with two-way effects and uniform noise, the last
/// `n_tr` rows treated for the last `t_post` periods.
pub fn factor_panel(n: usize, t: usize, n_tr: usize, t_post: usize, seed: u64) -> BlockDesign {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let (a, b) = (draw(n), draw(t));
    let (u1, u2, v1, v2) = (draw(n), draw(n), draw(t), draw(t));
    let noise = draw(n * t);
    let y = DMatrix::from_fn(n, t, |i, s| a[i] + b[s] + 2.0 * u1[i] * v1[s] + u2[i] * v2[s] + 0.3 * noise[i * t + s]);
    BlockDesign::from_matrix(y, n_tr, t_post).expect("valid block shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panel_shape_and_determinism() {
        let d = factor_panel(20, 15, 3, 4, 1);
        assert_eq!((d.n(), d.t(), d.n_tr(), d.t_post()), (20, 15, 3, 4));
        assert_eq!(d.y(), factor_panel(20, 15, 3, 4, 1).y());
    }
}
