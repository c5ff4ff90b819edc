use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ActionLevel, Claim, Corpus, Label, Taxonomy};
use crate::error::{Error, Result};
use crate::rng;

/// Parameters of the synthetic claim generator.
///
/// Each category gets a random unit prototype; one shared "actionability"
/// direction is orthogonal to all prototypes. A claim labeled `(a, y)` sits at
/// `normalize(proto(cat(a)) + rank(y) * step * dir + noise_sigma * N(0, I))`.
/// Dual-label claims use the mean of their two label points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_categories: usize,
    pub aspects_per_category: usize,
    pub n_claims: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub step: f64,
    /// Fraction of claims carrying a second label from another category.
    pub dual_fraction: f64,
    /// Fraction of claims with no labels at all.
    pub unlabeled_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_categories: 6,
            aspects_per_category: 2,
            n_claims: 600,
            dim: 32,
            noise_sigma: 0.15,
            step: 0.5,
            dual_fraction: 0.2,
            unlabeled_fraction: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Synthetic(m));
        if self.n_categories < 2 {
            return fail(format!("n_categories = {} (need >= 2)", self.n_categories));
        }
        if self.aspects_per_category < 1 {
            return fail("aspects_per_category must be >= 1".into());
        }
        if self.n_claims < 1 {
            return fail("n_claims must be >= 1".into());
        }
        if self.dim < 4 {
            return fail(format!("dim = {} (need >= 4)", self.dim));
        }
        if self.dim < self.n_categories + 1 {
            return fail(format!(
                "dim = {} cannot hold {} prototypes plus an orthogonal ordinal direction",
                self.dim, self.n_categories
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma = {}", self.noise_sigma));
        }
        for (name, f) in [
            ("dual_fraction", self.dual_fraction),
            ("unlabeled_fraction", self.unlabeled_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return fail(format!("{name} = {f} not in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn category_name(&self, c: usize) -> String {
        format!("cat{c:02}")
    }

    pub fn aspect_name(&self, c: usize, a: usize) -> String {
        format!("cat{c:02}.a{a}")
    }
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Geometry behind a synthetic corpus; exposed so tests can check the lattice.
#[derive(Debug, Clone)]
pub struct SyntheticGeometry {
    pub prototypes: Vec<Vec<f64>>,
    pub ordinal_direction: Vec<f64>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    generate_with_geometry(spec, seed).map(|(c, _)| c)
}

pub fn generate_with_geometry(spec: &SyntheticSpec, seed: u64) -> Result<(Corpus, SyntheticGeometry)> {
    spec.validate()?;
    let mut rng = rng::seeded(seed, 0);
    let d = spec.dim;

    let prototypes: Vec<Vec<f64>> = (0..spec.n_categories)
        .map(|_| {
            let mut p = gaussian(&mut rng, d);
            unit(&mut p);
            p
        })
        .collect();

    // orthonormal basis of the prototype span, then project it out of a random vector
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for p in &prototypes {
        let mut v = p.clone();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    let mut direction = gaussian(&mut rng, d);
    for _ in 0..2 {
        for b in &basis {
            let dot: f64 = direction.iter().zip(b).map(|(x, y)| x * y).sum();
            direction.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
    }
    unit(&mut direction);

    let taxonomy = Taxonomy::from_pairs(
        (0..spec.n_categories).flat_map(|c| (0..spec.aspects_per_category).map(move |a| (spec.aspect_name(c, a), spec.category_name(c)))),
    )?;

    let mut claims = Vec::with_capacity(spec.n_claims);
    for i in 0..spec.n_claims {
        let id = format!("s{i:05}");
        if rng.random::<f64>() < spec.unlabeled_fraction {
            let mut e = gaussian(&mut rng, d);
            unit(&mut e);
            claims.push(Claim::new(id, e, Vec::new()));
            continue;
        }
        let c1 = rng.random_range(0..spec.n_categories);
        let mut picks = vec![(c1, rng.random_range(0..spec.aspects_per_category), rng.random_range(0..3u8))];
        if rng.random::<f64>() < spec.dual_fraction {
            let mut c2 = rng.random_range(0..spec.n_categories - 1);
            if c2 >= c1 {
                c2 += 1;
            }
            picks.push((c2, rng.random_range(0..spec.aspects_per_category), rng.random_range(0..3u8)));
        }

        let mut e = vec![0.0; d];
        for &(c, _, rank) in &picks {
            for k in 0..d {
                e[k] += prototypes[c][k] + f64::from(rank) * spec.step * direction[k];
            }
        }
        let n_labels = picks.len() as f64;
        e.iter_mut().for_each(|x| *x /= n_labels);
        if spec.noise_sigma > 0.0 {
            for x in e.iter_mut() {
                *x += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        unit(&mut e);
        let labels = picks
            .iter()
            .map(|&(c, a, rank)| Label::new(spec.aspect_name(c, a), ActionLevel::from_rank(rank).expect("rank < 3")))
            .collect();
        claims.push(Claim::new(id, e, labels));
    }

    let corpus = Corpus::new(claims, taxonomy)?;
    Ok((
        corpus,
        SyntheticGeometry {
            prototypes,
            ordinal_direction: direction,
        },
    ))
}
