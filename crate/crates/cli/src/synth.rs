//! Synthetic pose datasets standing in for recorded human grasps.
//!
//! Each pose is `mean + sum_i c_i d_i + noise`. The directions `d_i` are an
//! orthonormal set drawn from the seed, coefficient `c_i` is normal with
//! standard deviation `spread / sqrt(i + 1)`, and the noise is isotropic
//! normal. The mean is a light curl: every finger joint flexed by
//! `mean_flexion` about its y axis.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use xdex::pose_model::{HandPose, NUM_POSE_JOINTS, POSE_DIM};

#[derive(Debug, Clone, Serialize)]
pub struct PoseGenerator {
    pub rank: usize,
    pub spread: f64,
    pub noise: f64,
    pub mean_flexion: f64,
}

impl PoseGenerator {
    pub fn validate(&self) -> xdex::Result<()> {
        let bad = |m: String| Err(xdex::Error::InvalidArgument(m));
        if self.rank > POSE_DIM {
            return bad(format!("rank {} exceeds {POSE_DIM}", self.rank));
        }
        if !(self.spread >= 0.0 && self.noise >= 0.0 && self.spread.is_finite() && self.noise.is_finite()) {
            return bad("spread and noise must be finite and >= 0".into());
        }
        if !self.mean_flexion.is_finite() {
            return bad("mean flexion must be finite".into());
        }
        Ok(())
    }

    pub fn sample(&self, n: usize, seed: u64) -> xdex::Result<Vec<HandPose>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let gaussian = DMatrix::from_fn(POSE_DIM, self.rank.max(1), |_, _| unit.sample(&mut rng));
        let directions = gaussian.qr().q();
        let mut mean = vec![0.0; POSE_DIM];
        for j in 0..NUM_POSE_JOINTS {
            mean[3 * j + 1] = self.mean_flexion;
        }
        let mut poses = Vec::with_capacity(n);
        let mut theta = vec![0.0; POSE_DIM];
        for _ in 0..n {
            theta.copy_from_slice(&mean);
            for i in 0..self.rank {
                let c = unit.sample(&mut rng) * self.spread / ((i + 1) as f64).sqrt();
                for (t, d) in theta.iter_mut().zip(directions.column(i).iter()) {
                    *t += c * d;
                }
            }
            if self.noise > 0.0 {
                for t in theta.iter_mut() {
                    *t += self.noise * unit.sample(&mut rng);
                }
            }
            poses.push(HandPose::from_slice(&theta)?);
        }
        Ok(poses)
    }
}
