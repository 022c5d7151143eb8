//! Two-dimensional toy densities.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ndtensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toy2DKind {
    /// Four isotropic components at `(+-2, +-2)`, std 0.5, equal weights.
    GaussianMixture,
    /// Two interleaved half circles with Gaussian noise.
    TwoMoons,
    /// Uniform on the dark squares of a 4x4 board over `[-2, 2]^2`.
    Checkerboard,
}

impl FromStr for Toy2DKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-mixture" | "mixture" => Ok(Self::GaussianMixture),
            "two-moons" | "moons" => Ok(Self::TwoMoons),
            "checkerboard" | "checkerboard-density" => Ok(Self::Checkerboard),
            other => Err(Error::Config(format!(
                "unknown toy density '{other}' (expected gaussian-mixture, two-moons or checkerboard)"
            ))),
        }
    }
}

impl fmt::Display for Toy2DKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GaussianMixture => "gaussian-mixture",
            Self::TwoMoons => "two-moons",
            Self::Checkerboard => "checkerboard",
        })
    }
}

pub const MIXTURE_STD: f64 = 0.5;
pub const MIXTURE_CENTERS: [[f64; 2]; 4] = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]];
const MOONS_NOISE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toy2D {
    pub kind: Toy2DKind,
    pub seed: u64,
}

impl Toy2D {
    pub fn new(kind: Toy2DKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    /// `n` points as a `[n, 2]` tensor.
    pub fn sample(&self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Input("toy sample count must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let p = match self.kind {
                Toy2DKind::GaussianMixture => {
                    let c = MIXTURE_CENTERS[rng.random_range(0..4)];
                    let e0: f64 = rng.sample(StandardNormal);
                    let e1: f64 = rng.sample(StandardNormal);
                    [c[0] + MIXTURE_STD * e0, c[1] + MIXTURE_STD * e1]
                }
                Toy2DKind::TwoMoons => {
                    let t = rng.random_range(0.0..PI);
                    let upper = rng.random_bool(0.5);
                    let (x, y) = if upper {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    let e0: f64 = StandardNormal.sample(&mut rng);
                    let e1: f64 = StandardNormal.sample(&mut rng);
                    // centred and scaled to roughly [-3, 3] x [-1.5, 1.5]
                    [2.0 * (x - 0.5 + MOONS_NOISE * e0), 2.0 * (y - 0.25 + MOONS_NOISE * e1)]
                }
                Toy2DKind::Checkerboard => loop {
                    let x = rng.random_range(-2.0..2.0f64);
                    let y = rng.random_range(-2.0..2.0f64);
                    if checker_dark(x, y) {
                        break [x, y];
                    }
                },
            };
            data.extend(p);
        }
        Ok(Tensor::new(vec![n, 2], data)?)
    }

    /// Exact log density where a closed form exists.
    pub fn log_density(&self, p: [f64; 2]) -> Option<f64> {
        match self.kind {
            Toy2DKind::GaussianMixture => Some(mixture_log_density(p)),
            Toy2DKind::Checkerboard => Some(if (-2.0..2.0).contains(&p[0])
                && (-2.0..2.0).contains(&p[1])
                && checker_dark(p[0], p[1])
            {
                (1.0f64 / 8.0).ln()
            } else {
                f64::NEG_INFINITY
            }),
            Toy2DKind::TwoMoons => None,
        }
    }
}

fn checker_dark(x: f64, y: f64) -> bool {
    ((x + 2.0).floor() as i64 + (y + 2.0).floor() as i64) % 2 == 0
}

fn mixture_log_density(p: [f64; 2]) -> f64 {
    let var = MIXTURE_STD * MIXTURE_STD;
    let norm = -(2.0 * PI * var).ln();
    let terms = MIXTURE_CENTERS.map(|c| {
        let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
        norm - d2 / (2.0 * var)
    });
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + (terms.iter().map(|t| (t - m).exp()).sum::<f64>() / 4.0).ln()
}

/// Two-column CSV with an `x,y` header.
pub fn write_points_csv(path: impl AsRef<Path>, points: &Tensor) -> Result<()> {
    if points.rank() != 2 || points.shape()[1] != 2 {
        return Err(Error::Input(format!("expected [n, 2] points, got {:?}", points.shape())));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "y"])?;
    for p in points.data().chunks(2) {
        w.write_record([format!("{:?}", p[0]), format!("{:?}", p[1])])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads two-column CSV; a first row that does not parse as numbers is taken
/// as a header.
pub fn read_points_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(Error::Input(format!("row {row}: expected 2 columns, found {}", rec.len())));
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.iter().all(|x| x.is_finite()) => data.extend(v),
            Ok(_) => return Err(Error::Input(format!("row {row}: non-finite value"))),
            Err(_) if row == 0 => continue,
            Err(e) => return Err(Error::Input(format!("row {row}: {e}"))),
        }
    }
    if data.is_empty() {
        return Err(Error::Input("no points in CSV".into()));
    }
    let n = data.len() / 2;
    Ok(Tensor::new(vec![n, 2], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_rejected() {
        assert!("spiral".parse::<Toy2DKind>().is_err());
        assert_eq!("two-moons".parse::<Toy2DKind>().unwrap(), Toy2DKind::TwoMoons);
    }

    #[test]
    fn seeded_and_finite() {
        for kind in [Toy2DKind::GaussianMixture, Toy2DKind::TwoMoons, Toy2DKind::Checkerboard] {
            let a = Toy2D::new(kind, 4).sample(500).unwrap();
            assert_eq!(a, Toy2D::new(kind, 4).sample(500).unwrap());
            assert_ne!(a, Toy2D::new(kind, 5).sample(500).unwrap());
            assert!(a.all_finite());
        }
    }

    #[test]
    fn mixture_moments() {
        let n = 20_000;
        let x = Toy2D::new(Toy2DKind::GaussianMixture, 1).sample(n).unwrap();
        // per-coordinate variance: 4 (centres) + 0.25 (component)
        let sigma = (4.25f64 / n as f64).sqrt();
        for d in 0..2 {
            let mean: f64 = x.data().iter().skip(d).step_by(2).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 * sigma, "coordinate {d} mean {mean}");
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let step = 0.02;
        let k = (16.0 / step) as usize;
        for kind in [Toy2DKind::GaussianMixture, Toy2DKind::Checkerboard] {
            let toy = Toy2D::new(kind, 0);
            let mut total = 0.0;
            for i in 0..k {
                for j in 0..k {
                    // midpoints avoid the board's cell edges
                    let p = [-8.0 + (i as f64 + 0.5) * step, -8.0 + (j as f64 + 0.5) * step];
                    total += toy.log_density(p).unwrap().exp() * step * step;
                }
            }
            assert!((total - 1.0).abs() < 1e-3, "{kind}: {total}");
        }
    }

    #[test]
    fn checkerboard_samples_in_support() {
        let toy = Toy2D::new(Toy2DKind::Checkerboard, 2);
        let x = toy.sample(300).unwrap();
        for p in x.data().chunks(2) {
            assert!(toy.log_density([p[0], p[1]]).unwrap().is_finite());
        }
    }

    #[test]
    fn csv_roundtrip_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let pts = Toy2D::new(Toy2DKind::TwoMoons, 3).sample(50).unwrap();
        let path = dir.path().join("p.csv");
        write_points_csv(&path, &pts).unwrap();
        assert_eq!(read_points_csv(&path).unwrap(), pts);
        std::fs::write(&path, "1.5,2\n-3,4e-1\n").unwrap();
        assert_eq!(read_points_csv(&path).unwrap().data(), &[1.5, 2.0, -3.0, 0.4]);
    }
}
