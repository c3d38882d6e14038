//! Seeded synthetic LMC datasets with structured and independent noise,
//! and the physical (inverse-square) mixing matrix.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::inference::Dataset;
use crate::kernels::{kernel_matrix, LatentKernelSet};
use crate::linalg::cholesky_escalating;
use crate::scalar::Scalar;

/// How the true mixing matrix is drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HMode {
    #[default]
    Gaussian,
    Physical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataGenConfig {
    pub n_tasks: usize,
    pub n_lat: usize,
    pub n_lat_noise: usize,
    pub n_points: usize,
    pub mu_noise: f64,
    pub mu_str: f64,
    pub l_min: f64,
    pub l_max: f64,
    pub n_test: usize,
    pub seed: u64,
    pub h_mode: HMode,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            n_tasks: 10,
            n_lat: 2,
            n_lat_noise: 3,
            n_points: 50,
            mu_noise: 0.05,
            mu_str: 0.5,
            l_min: 0.1,
            l_max: 0.5,
            n_test: 500,
            seed: 0,
            h_mode: HMode::Gaussian,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.n_lat == 0 || self.n_points == 0 {
            return invalid("n_tasks, n_lat and n_points must be positive");
        }
        if !(0.0..=1.0).contains(&self.mu_noise) || !(0.0..=1.0).contains(&self.mu_str) {
            return invalid("mu_noise and mu_str must lie in [0, 1]");
        }
        if !(self.l_min > 0.0 && self.l_min <= self.l_max && self.l_max.is_finite()) {
            return invalid("need 0 < l_min <= l_max");
        }
        if self.h_mode == HMode::Physical && self.n_tasks < 2 {
            return invalid("physical mixing needs at least two sensors");
        }
        Ok(())
    }

    /// Sets a numeric field by name, for parameter sweeps.
    pub fn set_field(&mut self, name: &str, value: f64) -> Result<()> {
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                invalid(format!("{name} must be a nonnegative integer, got {v}"))
            }
        };
        match name {
            "n_tasks" => self.n_tasks = as_count(value)?,
            "n_lat" => self.n_lat = as_count(value)?,
            "n_lat_noise" => self.n_lat_noise = as_count(value)?,
            "n_points" => self.n_points = as_count(value)?,
            "n_test" => self.n_test = as_count(value)?,
            "mu_noise" => self.mu_noise = value,
            "mu_str" => self.mu_str = value,
            "l_min" => self.l_min = value,
            "l_max" => self.l_max = value,
            _ => return invalid(format!("'{name}' is not a sweepable data parameter")),
        }
        Ok(())
    }
}

/// Latent lengthscales equidistant in `[l_min, l_max]`.
pub fn lengthscale_grid(q: usize, l_min: f64, l_max: f64) -> Vec<f64> {
    if q == 1 {
        return vec![l_min];
    }
    (0..q)
        .map(|i| l_min + (l_max - l_min) * i as f64 / (q - 1) as f64)
        .collect()
}

/// Generating components kept for evaluation.
#[derive(Debug, Clone)]
pub struct GroundTruth<T: Scalar> {
    pub h: DMatrix<T>,
    pub h_noise: DMatrix<T>,
    pub lengthscales: Vec<T>,
    /// `q x (n + m)` latent samples, training points first.
    pub latent: DMatrix<T>,
    /// `p x (n + m)` noise-free signal `H U`.
    pub signal: DMatrix<T>,
    /// `p x (n + m)` structured noise `H_noise W`.
    pub noise_str: DMatrix<T>,
    /// `p x (n + m)` independent noise.
    pub noise_ind: DMatrix<T>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData<T: Scalar> {
    pub train: Dataset<T>,
    /// Noisy test outputs.
    pub test: Dataset<T>,
    /// Noise-free part of the test outputs, `(1 - μ_noise) H U`, `p x m`.
    pub test_signal: DMatrix<T>,
    pub truth: GroundTruth<T>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normals<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<T> {
    // row-major draw order, independent of storage layout
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = T::lit(z);
        }
    }
    m
}

/// `H_noise W` with `W` independent unit white noise.
pub fn structured_noise<T: Scalar>(h_noise: &DMatrix<T>, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<T> {
    h_noise * normals::<T>(rng, h_noise.ncols(), n)
}

/// Draws one dataset. Data = `μ_noise (μ_str Noise_str + (1 - μ_str)
/// Noise_ind) + (1 - μ_noise) H U`, with all parts drawn jointly at
/// training and test inputs. When `μ_noise = 1` the latent processes are
/// not sampled and `latent` is zero.
pub fn generate<T: Scalar>(config: &DataGenConfig) -> Result<SyntheticData<T>> {
    config.validate()?;
    let (p, q, n, m) = (config.n_tasks, config.n_lat, config.n_points, config.n_test);
    let total = n + m;
    let mut x = DMatrix::zeros(1, total);
    for j in 0..n {
        x[(0, j)] = if n == 1 {
            T::zero()
        } else {
            T::lit(-1.0 + 2.0 * j as f64 / (n - 1) as f64)
        };
    }
    let mut rng_x = stream(config.seed, 0);
    for j in 0..m {
        x[(0, n + j)] = T::lit(rng_x.random_range(-1.0..=1.0));
    }

    let h = match config.h_mode {
        HMode::Gaussian => normals::<T>(&mut stream(config.seed, 1), p, q),
        HMode::Physical => physical_h(p, q, config.seed)?,
    };
    let h_noise = normals::<T>(&mut stream(config.seed, 2), p, config.n_lat_noise);
    let lengthscales: Vec<T> = lengthscale_grid(q, config.l_min, config.l_max)
        .into_iter()
        .map(T::lit)
        .collect();

    let mut latent = DMatrix::zeros(q, total);
    if config.mu_noise < 1.0 {
        let kernels = LatentKernelSet::from_lengthscales(&lengthscales)?;
        let mut rng_u = stream(config.seed, 3);
        for (i, k) in kernels.iter().enumerate() {
            let kmat = kernel_matrix(&x, k, T::lit(1e-8))?;
            let factor = cholesky_escalating(kmat, T::one(), &format!("latent {i} prior"))?;
            let z = DVector::from_fn(total, |_, _| {
                let v: f64 = StandardNormal.sample(&mut rng_u);
                T::lit(v)
            });
            let sample = factor.chol.l() * z;
            latent.row_mut(i).copy_from(&sample.transpose());
        }
    }
    let signal = &h * &latent;
    let noise_str = structured_noise(&h_noise, total, &mut stream(config.seed, 4));
    let noise_ind = normals::<T>(&mut stream(config.seed, 5), p, total);

    let mu = T::lit(config.mu_noise);
    let ms = T::lit(config.mu_str);
    let full = (&noise_str * ms + &noise_ind * (T::one() - ms)) * mu + &signal * (T::one() - mu);

    let train = Dataset::new(x.columns(0, n).into_owned(), full.columns(0, n).into_owned())?;
    let test = Dataset::new(x.columns(n, m).into_owned(), full.columns(n, m).into_owned());
    let test = match test {
        Ok(t) => t,
        Err(_) if m == 0 => return invalid("n_test must be positive"),
        Err(e) => return Err(e),
    };
    Ok(SyntheticData {
        train,
        test,
        test_signal: signal.columns(n, m) * (T::one() - mu),
        truth: GroundTruth {
            h,
            h_noise,
            lengthscales,
            latent,
            signal,
            noise_str,
            noise_ind,
        },
    })
}

/// Inverse-square mixing `H_ij = A_j / d_ij²` for sensors on `y = 0`
/// spread evenly over `[-1, 1]` and explicit source positions.
pub fn physical_h_from_sources<T: Scalar>(
    p: usize,
    sources: &[(f64, f64)],
    amplitudes: &[f64],
) -> Result<DMatrix<T>> {
    if p < 2 {
        return invalid("physical mixing needs at least two sensors");
    }
    if sources.len() != amplitudes.len() || sources.is_empty() {
        return invalid("need one amplitude per source and at least one source");
    }
    let mut h = DMatrix::zeros(p, sources.len());
    for i in 0..p {
        let sx = -1.0 + 2.0 * i as f64 / (p - 1) as f64;
        for (j, &(x, y)) in sources.iter().enumerate() {
            let d2 = (x - sx).powi(2) + y * y;
            if d2 < 1e-12 {
                return invalid(format!("source {j} coincides with sensor {i}"));
            }
            h[(i, j)] = T::lit(amplitudes[j] / d2);
        }
    }
    Ok(h)
}

/// Physical mixing with standard-normal source coordinates and amplitudes
/// `A_j = j` (1-based). Sources falling on a sensor are redrawn.
pub fn physical_h<T: Scalar>(p: usize, q: usize, seed: u64) -> Result<DMatrix<T>> {
    if p < 2 || q == 0 {
        return invalid("physical mixing needs p >= 2 and q >= 1");
    }
    let mut rng = stream(seed, 6);
    let mut sources = Vec::with_capacity(q);
    for j in 0..q {
        let mut placed = None;
        for _ in 0..100 {
            let x: f64 = StandardNormal.sample(&mut rng);
            let y: f64 = StandardNormal.sample(&mut rng);
            let clear = (0..p).all(|i| {
                let sx = -1.0 + 2.0 * i as f64 / (p - 1) as f64;
                (x - sx).powi(2) + y * y >= 1e-12
            });
            if clear {
                placed = Some((x, y));
                break;
            }
        }
        match placed {
            Some(s) => sources.push(s),
            None => return invalid(format!("could not place source {j} away from the sensors")),
        }
    }
    let amplitudes: Vec<f64> = (1..=q).map(|j| j as f64).collect();
    physical_h_from_sources(p, &sources, &amplitudes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = DataGenConfig::default();
        assert_eq!((c.n_tasks, c.n_lat, c.n_lat_noise, c.n_points), (10, 2, 3, 50));
        assert_eq!((c.mu_noise, c.mu_str, c.l_min, c.l_max), (0.05, 0.5, 0.1, 0.5));
        assert_eq!(c.n_test, 500);
    }

    #[test]
    fn grid() {
        assert_eq!(lengthscale_grid(1, 0.3, 0.3), vec![0.3]);
        assert_eq!(lengthscale_grid(3, 0.1, 0.5), vec![0.1, 0.30000000000000004, 0.5]);
    }

    #[test]
    fn noiseless_data_is_low_rank() {
        let c = DataGenConfig {
            mu_noise: 0.0,
            n_test: 20,
            ..Default::default()
        };
        let d = generate::<f64>(&c).unwrap();
        assert_eq!(d.train.y, d.truth.signal.columns(0, 50));
        let sv = d.train.y.clone().singular_values();
        assert!(sv[2] < 1e-10 * sv[0]);
        assert_eq!(d.test.y, d.test_signal);
    }

    #[test]
    fn convex_mixing() {
        let c = DataGenConfig {
            mu_noise: 0.3,
            mu_str: 0.2,
            n_test: 10,
            seed: 4,
            ..Default::default()
        };
        let d = generate::<f64>(&c).unwrap();
        let t = &d.truth;
        let noise = &t.noise_str * 0.2 + &t.noise_ind * 0.8;
        let full = &noise * 0.3 + &t.signal * 0.7;
        assert!((full.columns(0, 50) - &d.train.y).amax() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let c = DataGenConfig {
            n_test: 30,
            seed: 9,
            ..Default::default()
        };
        let a = generate::<f64>(&c).unwrap();
        let b = generate::<f64>(&c).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let other = generate::<f64>(&DataGenConfig { seed: 10, ..c }).unwrap();
        assert_ne!(a.train.y, other.train.y);
    }

    #[test]
    fn training_inputs_are_equidistant() {
        let c = DataGenConfig {
            n_points: 5,
            n_test: 3,
            ..Default::default()
        };
        let d = generate::<f64>(&c).unwrap();
        assert_eq!(d.train.x.as_slice(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert!(d.test.x.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn physical_geometry() {
        let h = physical_h_from_sources::<f64>(2, &[(0.0, 0.0)], &[1.0]).unwrap();
        assert_eq!(h.as_slice(), &[1.0, 1.0]);
        let near = physical_h_from_sources::<f64>(3, &[(0.3, 0.4)], &[1.0]).unwrap();
        // doubling distances: sensors at +-2 and the source scaled by 2 is
        // equivalent to dividing the squared distances by 4 in the unit frame
        let d2: Vec<f64> = [-1.0f64, 0.0, 1.0]
            .iter()
            .map(|sx| (0.3 - sx).powi(2) + 0.16)
            .collect();
        for i in 0..3 {
            assert!((near[(i, 0)] - 1.0 / d2[i]).abs() < 1e-12);
            assert!((near[(i, 0)] / 4.0 - 1.0 / (4.0 * d2[i])).abs() < 1e-12);
        }
        assert!(physical_h_from_sources::<f64>(2, &[(1.0, 0.0)], &[1.0]).is_err());
    }

    #[test]
    fn physical_amplitudes_scale_columns() {
        let h = physical_h::<f64>(10, 2, 3).unwrap();
        assert!(h.iter().all(|v| *v > 0.0));
        let mut rng = stream(3, 6);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let s1 = (draw(), draw());
        let s2 = (draw(), draw());
        let unit = physical_h_from_sources::<f64>(10, &[s1, s2], &[1.0, 1.0]).unwrap();
        assert!((h.column(1) - unit.column(1) * 2.0).amax() < 1e-12);
        assert!((h.column(0) - unit.column(0)).amax() < 1e-12);
    }

    #[test]
    fn sweep_fields() {
        let mut c = DataGenConfig::default();
        c.set_field("mu_noise", 0.2).unwrap();
        c.set_field("n_points", 30.0).unwrap();
        assert_eq!((c.mu_noise, c.n_points), (0.2, 30));
        assert!(c.set_field("n_points", 2.5).is_err());
        assert!(c.set_field("seed", 1.0).is_err());
    }
}
