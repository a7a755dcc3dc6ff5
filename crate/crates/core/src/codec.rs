//! Fixed linear image ↔ latent transform.
//!
//! Encoding folds every 4×4 pixel block into 48 channels (space-to-depth)
//! and projects them onto the first four rows of a seeded 48×48 orthogonal
//! basis. The first three rows are the per-colour block means and the
//! fourth a luminance ramp across the block; the remaining rows are a
//! seeded Gram-Schmidt completion and are dropped. Decoding is the
//! transpose, so `encode(decode(z)) == z` and `decode(encode(x))` is the
//! orthogonal projection of `x` onto the retained subspace.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::tensors::{rng_for, Image, Latent, IMAGE_CHANNELS, IMAGE_SIDE, LATENT_CHANNELS, LATENT_SIDE};

const BLOCK: usize = 4;
const DEPTH: usize = IMAGE_CHANNELS * BLOCK * BLOCK;

#[derive(Clone, Debug)]
pub struct LatentCodec {
    seed: u64,
    /// Full orthogonal basis, one basis vector per row.
    basis: Array2<f64>,
}

impl LatentCodec {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng_for(seed, "codec", 0);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(DEPTH);
        for c in 0..IMAGE_CHANNELS {
            let mut r = vec![0.0; DEPTH];
            for k in 0..BLOCK * BLOCK {
                r[c * BLOCK * BLOCK + k] = 1.0;
            }
            rows.push(r);
        }
        let mut ramp = vec![0.0; DEPTH];
        for c in 0..IMAGE_CHANNELS {
            for dy in 0..BLOCK {
                for dx in 0..BLOCK {
                    ramp[c * BLOCK * BLOCK + dy * BLOCK + dx] = dx as f64 + dy as f64 - 3.0;
                }
            }
        }
        rows.push(ramp);
        while rows.len() < DEPTH {
            let cand: Vec<f64> = (0..DEPTH).map(|_| StandardNormal.sample(&mut rng)).collect();
            rows.push(cand);
        }
        // Modified Gram-Schmidt, twice for numerical orthogonality.
        for _ in 0..2 {
            for i in 0..DEPTH {
                for j in 0..i {
                    let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let rj = rows[j].clone();
                    for (a, b) in rows[i].iter_mut().zip(&rj) {
                        *a -= d * b;
                    }
                }
                let n = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                for a in rows[i].iter_mut() {
                    *a /= n;
                }
            }
        }
        let basis = Array2::from_shape_fn((DEPTH, DEPTH), |(i, j)| rows[i][j]);
        Self { seed, basis }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn encode(&self, img: &Image) -> Result<Latent> {
        img.check()?;
        let x = &img.0;
        let mut z = Array3::zeros((LATENT_CHANNELS, LATENT_SIDE, LATENT_SIDE));
        for i in 0..LATENT_SIDE {
            for j in 0..LATENT_SIDE {
                for k in 0..LATENT_CHANNELS {
                    let row = self.basis.row(k);
                    let mut acc = 0.0;
                    for c in 0..IMAGE_CHANNELS {
                        for dy in 0..BLOCK {
                            for dx in 0..BLOCK {
                                acc += row[c * BLOCK * BLOCK + dy * BLOCK + dx]
                                    * x[[c, i * BLOCK + dy, j * BLOCK + dx]];
                            }
                        }
                    }
                    z[[k, i, j]] = acc;
                }
            }
        }
        Ok(Latent(z))
    }

    /// Linear decode (not clamped). Its vector-Jacobian product is
    /// [`LatentCodec::decode_vjp`].
    pub fn decode(&self, z: &Latent) -> Result<Image> {
        z.check()?;
        let mut x = Array3::zeros((IMAGE_CHANNELS, IMAGE_SIDE, IMAGE_SIDE));
        for i in 0..LATENT_SIDE {
            for j in 0..LATENT_SIDE {
                for k in 0..LATENT_CHANNELS {
                    let zk = z.0[[k, i, j]];
                    let row = self.basis.row(k);
                    for c in 0..IMAGE_CHANNELS {
                        for dy in 0..BLOCK {
                            for dx in 0..BLOCK {
                                x[[c, i * BLOCK + dy, j * BLOCK + dx]] +=
                                    row[c * BLOCK * BLOCK + dy * BLOCK + dx] * zk;
                            }
                        }
                    }
                }
            }
        }
        Ok(Image(x))
    }

    /// Pulls an image-space cotangent back to latent space. Decode is
    /// linear with transpose equal to encode.
    pub fn decode_vjp(&self, image_cotangent: &Image) -> Result<Latent> {
        self.encode(image_cotangent)
    }

    /// Decodes and clamps into the displayable range.
    pub fn decode_clamped(&self, z: &Latent) -> Result<Image> {
        Ok(self.decode(z)?.clamped())
    }
}

/// Random latent with unit Gaussian entries, for tests and calibration.
pub fn random_latent<R: Rng + ?Sized>(rng: &mut R) -> Latent {
    Latent::randn(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::IMAGE_LEN;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng) -> Image {
        Image::from_vec((0..IMAGE_LEN).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn basis_is_orthonormal() {
        let c = LatentCodec::new(3);
        let g = c.basis().dot(&c.basis().t());
        for i in 0..DEPTH {
            for j in 0..DEPTH {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_maps_to_zero_both_ways() {
        let c = LatentCodec::new(0);
        assert!(c.encode(&Image::zeros()).unwrap().0.iter().all(|&v| v == 0.0));
        assert!(c.decode(&Latent::zeros()).unwrap().0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_after_decode_is_identity() {
        let c = LatentCodec::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let z = Latent::randn(&mut rng);
            let back = c.encode(&c.decode(&z).unwrap()).unwrap();
            let err = (&back.0 - &z.0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-10, "{err}");
        }
    }

    #[test]
    fn maps_are_linear() {
        let c = LatentCodec::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (rand_image(&mut rng), rand_image(&mut rng));
        let (s, t) = (1.7, -0.3);
        let mix = Image(&a.0 * s + &b.0 * t);
        let lhs = c.encode(&mix).unwrap().0;
        let rhs = &c.encode(&a).unwrap().0 * s + &c.encode(&b).unwrap().0 * t;
        assert!((&lhs - &rhs).iter().all(|v| v.abs() <= 1e-12));
        let za = Latent::randn(&mut rng);
        let zb = Latent::randn(&mut rng);
        let lhs = c.decode(&Latent(&za.0 * s + &zb.0 * t)).unwrap().0;
        let rhs = &c.decode(&za).unwrap().0 * s + &c.decode(&zb).unwrap().0 * t;
        assert!((&lhs - &rhs).iter().all(|v| v.abs() <= 1e-12));
        let scaled = c.encode(&Image(&a.0 * 2.5)).unwrap().0;
        assert!((&scaled - &(c.encode(&a).unwrap().0 * 2.5)).iter().all(|v| v.abs() <= 1e-12));
    }

    #[test]
    fn decode_vjp_matches_finite_differences() {
        let c = LatentCodec::new(9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Latent::randn(&mut rng);
        let cot = rand_image(&mut rng);
        let f = |z: &Latent| (c.decode(z).unwrap().0 * &cot.0).sum();
        let analytic = c.decode_vjp(&cot).unwrap();
        for _ in 0..32 {
            let idx = rng.random_range(0..crate::tensors::LATENT_LEN);
            let h = 1e-5;
            let mut zp = z.clone();
            zp.0.as_slice_mut().unwrap()[idx] += h;
            let mut zm = z.clone();
            zm.0.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - analytic.as_slice()[idx]).abs() <= 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let c = LatentCodec::new(0);
        assert!(c.encode(&Image(Array3::zeros((3, 16, 16)))).is_err());
        assert!(c.decode(&Latent(Array3::zeros((4, 4, 4)))).is_err());
    }

    #[test]
    fn rendered_scenes_survive_the_bottleneck() {
        use crate::brain::render_scene;
        use crate::features::SceneParams;
        use crate::tensors::pearson;
        let c = LatentCodec::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = f64::INFINITY;
        for _ in 0..100 {
            let img = render_scene(&SceneParams::random(&mut rng));
            let back = c.decode(&c.encode(&img).unwrap()).unwrap();
            worst = worst.min(pearson(img.as_slice(), back.as_slice()).unwrap());
        }
        assert!(worst >= 0.95, "worst PixCorr {worst}");
    }
}
