use nalgebra::{Vector3, Vector4};
use rand::Rng;

use crate::scene::GaussianCloud;

/// Random Gaussians in front of an identity camera at roughly `depth`.
pub fn random_cloud(rng: &mut impl Rng, n: usize, depth: f64) -> GaussianCloud {
    let mut g = GaussianCloud::new();
    for _ in 0..n {
        let z = depth * rng.random_range(0.8..1.2);
        let pos = Vector3::new(rng.random_range(-0.45..0.45) * z, rng.random_range(-0.45..0.45) * z, z);
        let log_scale = Vector3::from_fn(|_, _| (depth * rng.random_range(0.02..0.08f64)).ln());
        let q = Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0f64));
        let sh = Vector3::from_fn(|_, _| rng.random_range(-1.5..1.5));
        g.push(pos, log_scale, q, sh, rng.random_range(-2.0..2.0));
    }
    g
}
