//! Seeded point-set generation: Latin-hypercube collocation points, initial
//! and boundary data, scattered interior measurements, and additive noise.

use std::fmt;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conformable::DomainSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Initial,
    Boundary,
    Collocation,
    InteriorData,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Initial => "initial",
            Role::Boundary => "boundary",
            Role::Collocation => "collocation",
            Role::InteriorData => "interior-data",
        })
    }
}

/// Sampled `(t, x)` coordinates, labelled with targets for every role except
/// collocation.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub role: Role,
    pub coords: Vec<(f64, f64)>,
    pub targets: Option<Vec<f64>>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    fn labelled(role: Role, coords: Vec<(f64, f64)>, domain: &DomainSpec) -> Self {
        let targets = coords
            .iter()
            .map(|&(t, x)| {
                domain
                    .exact(t, x)
                    .expect("sampled points lie in a validated domain")
            })
            .collect();
        Self {
            role,
            coords,
            targets: Some(targets),
        }
    }

    /// Appends `role,t,x,target` rows (target blank when unlabelled).
    pub fn write_rows<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (k, &(t, x)) in self.coords.iter().enumerate() {
            match &self.targets {
                Some(u) => writeln!(w, "{},{t:e},{x:e},{:e}", self.role, u[k])?,
                None => writeln!(w, "{},{t:e},{x:e},", self.role)?,
            }
        }
        Ok(())
    }
}

/// Writes several point sets as one comma-separated table with a header.
pub fn write_point_sets<W: Write>(sets: &[&PointSet], mut w: W) -> io::Result<()> {
    writeln!(w, "role,t,x,target")?;
    for s in sets {
        s.write_rows(&mut w)?;
    }
    Ok(())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn strata(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let width = (hi - lo) / n as f64;
    perm.into_iter()
        .map(|k| {
            let u: f64 = rng.random();
            (lo + (k as f64 + u) * width).min(hi)
        })
        .collect()
}

/// Latin-hypercube sample of `n_f` collocation points.
pub fn sample_collocation(domain: &DomainSpec, n_f: usize, seed: u64) -> PointSet {
    let mut rng = rng(seed);
    let ts = strata(&mut rng, n_f, domain.t_lo, domain.t_hi);
    let xs = strata(&mut rng, n_f, domain.x_lo, domain.x_hi);
    PointSet {
        role: Role::Collocation,
        coords: ts.into_iter().zip(xs).collect(),
        targets: None,
    }
}

/// Initial data on the slice `t = t_lo` and boundary data alternating between
/// the faces `x = x_lo` and `x = x_hi`, both labelled with the exact solution.
pub fn sample_ic_bc(
    domain: &DomainSpec,
    n_ic: usize,
    n_bc: usize,
    seed: u64,
) -> (PointSet, PointSet) {
    let mut rng = rng(seed);
    let ic: Vec<_> = (0..n_ic)
        .map(|_| (domain.t_lo, rng.random_range(domain.x_lo..=domain.x_hi)))
        .collect();
    let bc: Vec<_> = (0..n_bc)
        .map(|k| {
            let t = rng.random_range(domain.t_lo..=domain.t_hi);
            (t, if k % 2 == 0 { domain.x_lo } else { domain.x_hi })
        })
        .collect();
    (
        PointSet::labelled(Role::Initial, ic, domain),
        PointSet::labelled(Role::Boundary, bc, domain),
    )
}

/// Uniformly scattered labelled points over the whole rectangle.
pub fn sample_interior_data(domain: &DomainSpec, n_data: usize, seed: u64) -> PointSet {
    let mut rng = rng(seed);
    let coords = (0..n_data)
        .map(|_| {
            (
                rng.random_range(domain.t_lo..=domain.t_hi),
                rng.random_range(domain.x_lo..=domain.x_hi),
            )
        })
        .collect();
    PointSet::labelled(Role::InteriorData, coords, domain)
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Adds `level · σ_u · ε` to every target, with `σ_u` the (population)
/// standard deviation of the clean targets and `ε` standard normal.
///
/// # Panics
/// If `points` carries no targets or `level` is negative.
pub fn add_noise(points: &PointSet, level: f64, seed: u64) -> PointSet {
    let targets = points
        .targets
        .as_ref()
        .expect("noise needs labelled points");
    assert!(level >= 0.0, "noise level must be non-negative");
    if level == 0.0 || targets.is_empty() {
        return points.clone();
    }
    let scale = level * std_dev(targets);
    let mut rng = rng(seed);
    let noisy = targets
        .iter()
        .map(|&u| {
            let e: f64 = rng.sample(StandardNormal);
            u + scale * e
        })
        .collect();
    PointSet {
        role: points.role,
        coords: points.coords.clone(),
        targets: Some(noisy),
    }
}
