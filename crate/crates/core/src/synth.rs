//! Synthetic benchmark: ID and OOD clusters on the unit sphere with some
//! corpus labels planted on the OOD cluster centers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::embedding::{l2_normalize, Bundle, Domain, EmbeddingMatrix, LabelBank, TestStream};
use crate::error::{Error, Result};
use crate::math;

/// Rejection attempts per center before giving up on the angle constraint.
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    /// ID classes, one cluster each.
    pub num_id: usize,
    pub num_corpus: usize,
    /// Corpus labels placed exactly on OOD cluster centers.
    pub k_activated: usize,
    pub ood_clusters: usize,
    pub id_per_cluster: usize,
    pub ood_per_cluster: usize,
    /// Standard deviation of each tangent-space component of the sample
    /// perturbation, before projecting back to the sphere.
    pub noise_std: f64,
    /// Minimum angle between any two cluster centers, radians.
    pub min_angle: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            num_id: 20,
            num_corpus: 2000,
            k_activated: 10,
            ood_clusters: 10,
            id_per_cluster: 25,
            ood_per_cluster: 50,
            noise_std: 0.3,
            min_angle: 0.5,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 3 {
            return Err(Error::invalid("dim", "must be at least 3"));
        }
        if self.num_id == 0 || self.num_corpus == 0 {
            return Err(Error::invalid("counts", "need at least one ID class and one corpus label"));
        }
        if self.k_activated > self.num_corpus {
            return Err(Error::invalid("k_activated", "cannot exceed the corpus size"));
        }
        if self.k_activated > 0 && self.ood_clusters == 0 {
            return Err(Error::invalid("k_activated", "planted labels need OOD clusters"));
        }
        if self.id_per_cluster == 0 {
            return Err(Error::invalid("id_per_cluster", "must be positive"));
        }
        if self.ood_clusters > 0 && self.ood_per_cluster == 0 {
            return Err(Error::invalid("ood_per_cluster", "must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise_std", "must be finite and non-negative"));
        }
        if !(0.0..=core::f64::consts::PI).contains(&self.min_angle) {
            return Err(Error::invalid("min_angle", "must lie in [0, pi]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.num_id * self.id_per_cluster + self.ood_clusters * self.ood_per_cluster
    }
}

/// A generated bundle plus where the planted labels went.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub bundle: Bundle,
    /// Corpus index of each planted label; label `i` sits on OOD center
    /// `i % ood_clusters`.
    pub planted: Vec<usize>,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Result<Vec<f32>> {
    let v: Vec<f32> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    l2_normalize(&v)
}

fn centers(rng: &mut ChaCha8Rng, count: usize, dim: usize, min_angle: f64) -> Result<Vec<Vec<f32>>> {
    let max_cos = math::cos(min_angle);
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let c = gaussian_unit(rng, dim)?;
            if out.iter().all(|o| math::dot64(&c, o) <= max_cos) {
                out.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid("min_angle", "cannot place centers this far apart"));
        }
    }
    Ok(out)
}

/// Center plus an isotropic tangent perturbation, projected to the sphere.
fn perturb(rng: &mut ChaCha8Rng, center: &[f32], std: f64) -> Result<Vec<f32>> {
    let t: Vec<f64> = (0..center.len()).map(|_| rng.sample(StandardNormal)).collect();
    let along: f64 = t.iter().zip(center).map(|(a, &c)| a * c as f64).sum();
    let v: Vec<f32> = center
        .iter()
        .zip(&t)
        .map(|(&c, &x)| (c as f64 + std * (x - along * c as f64)) as f32)
        .collect();
    l2_normalize(&v)
}

/// Generates the benchmark. A pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.dim;
    let all = centers(&mut rng, spec.num_id + spec.ood_clusters, dim, spec.min_angle)?;
    let (id_centers, ood_centers) = all.split_at(spec.num_id);

    let mut corpus: Vec<Vec<f32>> = (0..spec.num_corpus)
        .map(|_| gaussian_unit(&mut rng, dim))
        .collect::<Result<_>>()?;
    let planted: Vec<usize> =
        rand::seq::index::sample(&mut rng, spec.num_corpus, spec.k_activated).into_vec();
    for (i, &j) in planted.iter().enumerate() {
        corpus[j] = ood_centers[i % spec.ood_clusters].clone();
    }

    let mut samples: Vec<(Vec<f32>, Domain, i32)> = Vec::with_capacity(spec.num_samples());
    for (k, c) in id_centers.iter().enumerate() {
        for _ in 0..spec.id_per_cluster {
            samples.push((perturb(&mut rng, c, spec.noise_std)?, Domain::Id, k as i32));
        }
    }
    for c in ood_centers {
        for _ in 0..spec.ood_per_cluster {
            samples.push((perturb(&mut rng, c, spec.noise_std)?, Domain::Ood, -1));
        }
    }
    samples.shuffle(&mut rng);

    let flat = |rows: &[Vec<f32>]| rows.iter().flatten().copied().collect::<Vec<f32>>();
    let id_names: Vec<String> = (0..spec.num_id).map(|i| format!("class_{i:03}")).collect();
    let corpus_names: Vec<String> = (0..spec.num_corpus).map(|j| format!("word_{j:05}")).collect();
    let (bank, removed) = LabelBank::new(
        id_names,
        EmbeddingMatrix::new(spec.num_id, dim, flat(id_centers))?,
        corpus_names,
        EmbeddingMatrix::new(spec.num_corpus, dim, flat(&corpus))?,
    )?;
    let t = samples.len();
    let features: Vec<f32> = samples.iter().flat_map(|s| s.0.iter().copied()).collect();
    let stream = TestStream::new(
        EmbeddingMatrix::new(t, dim, features)?,
        Some(samples.iter().map(|s| s.1).collect()),
        Some(samples.iter().map(|s| s.2).collect()),
        spec.batch_size,
    )?;
    Ok(SynthOutput {
        bundle: Bundle {
            bank,
            stream,
            noise: None,
            removed,
        },
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            dim: 16,
            num_id: 4,
            num_corpus: 50,
            k_activated: 3,
            ood_clusters: 3,
            id_per_cluster: 5,
            ood_per_cluster: 4,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn shapes_and_ground_truth() {
        let out = generate(&small()).unwrap();
        let b = &out.bundle;
        assert_eq!(b.bank.num_id(), 4);
        assert_eq!(b.bank.num_corpus(), 50);
        assert_eq!(b.stream.len(), 32);
        let gt = b.stream.gt_domain.as_ref().unwrap();
        assert_eq!(gt.iter().filter(|&&d| d == Domain::Id).count(), 20);
        let cls = b.stream.gt_class.as_ref().unwrap();
        for (d, c) in gt.iter().zip(cls) {
            assert_eq!(*d == Domain::Ood, *c == -1);
        }
        assert!(b.stream.features.max_norm_deviation() < 1e-6);
        assert_eq!(out.planted.len(), 3);
    }

    #[test]
    fn pure_function_of_spec() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.bundle.stream.features.as_slice(), b.bundle.stream.features.as_slice());
        assert_eq!(a.bundle.bank.labels().as_slice(), b.bundle.bank.labels().as_slice());
        assert_eq!(a.planted, b.planted);
    }

    #[test]
    fn centers_respect_min_angle() {
        let spec = small();
        let out = generate(&spec).unwrap();
        let ids = out.bundle.bank.id_embeds();
        for i in 0..ids.rows() {
            for j in 0..i {
                let c = math::dot64(ids.row(i), ids.row(j));
                assert!(c <= math::cos(spec.min_angle) + 1e-6);
            }
        }
    }

    #[test]
    fn zero_noise_samples_sit_on_centers() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..small()
        };
        let out = generate(&spec).unwrap();
        let b = &out.bundle;
        let cls = b.stream.gt_class.as_ref().unwrap();
        for (v, &c) in b.stream.features.iter_rows().zip(cls) {
            if c >= 0 {
                assert!((math::dot64(v, b.bank.id_embeds().row(c as usize)) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SynthSpec { dim: 2, ..small() },
            SynthSpec { k_activated: 51, ..small() },
            SynthSpec { num_id: 0, ..small() },
            SynthSpec { noise_std: -1.0, ..small() },
        ] {
            assert!(generate(&spec).is_err());
        }
        let crowded = SynthSpec {
            dim: 3,
            num_id: 200,
            min_angle: 1.5,
            ..small()
        };
        assert!(generate(&crowded).is_err());
    }
}
