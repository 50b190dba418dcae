//! Scalar forms of the domain-discriminator losses.
//!
//! The training code evaluates the same formulas on tensors; these versions
//! serve as the reference they are checked against and as the backing for
//! the interactive demo.

use serde::{Deserialize, Serialize};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    /// `0` for source, `1` for target.
    pub fn label(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapReduction {
    /// Sum over map locations.
    #[default]
    Sum,
    /// Sum divided by the number of locations.
    Mean,
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Probability the discriminator assigns to the sample's true domain, given
/// its output probability of "target".
pub fn prob_of_true_domain(p_target: f64, domain: Domain) -> f64 {
    match domain {
        Domain::Source => 1.0 - p_target,
        Domain::Target => p_target,
    }
}

/// `-(1 - p)^gamma * ln p` for the probability `p` of the true domain.
pub fn focal_domain_loss(p_true: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p_true);
    -(1.0 - p).powf(gamma) * p.ln()
}

/// Binary cross-entropy of one probability against its domain label.
pub fn domain_bce(p_target: f64, domain: Domain) -> f64 {
    -clamp_prob(prob_of_true_domain(p_target, domain)).ln()
}

fn per_domain_mean<'a, I>(samples: I, per_sample: impl Fn(&'a [f64], Domain) -> f64) -> f64
where
    I: IntoIterator<Item = (&'a [f64], Domain)>,
{
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for (values, domain) in samples {
        let i = domain.label() as usize;
        sums[i] += per_sample(values, domain);
        counts[i] += 1;
    }
    (0..2)
        .filter(|&i| counts[i] > 0)
        .map(|i| sums[i] / counts[i] as f64)
        .sum()
}

/// Spatial discriminator loss: focal loss on each keyframe's probability of
/// "target", averaged per domain and summed over the two domains.
pub fn spatial_focal_loss(samples: &[(f64, Domain)], gamma: f64) -> f64 {
    let views: Vec<([f64; 1], Domain)> = samples.iter().map(|&(p, d)| ([p], d)).collect();
    per_domain_mean(views.iter().map(|(p, d)| (&p[..], *d)), |p, d| {
        focal_domain_loss(prob_of_true_domain(p[0], d), gamma)
    })
}

/// Image-level temporal loss over per-location maps (each map flattened).
pub fn temporal_image_loss(maps: &[(&[f64], Domain)], reduction: MapReduction) -> f64 {
    per_domain_mean(maps.iter().copied(), |q, d| {
        let s: f64 = q.iter().map(|&v| domain_bce(v, d)).sum();
        match reduction {
            MapReduction::Sum => s,
            MapReduction::Mean if q.is_empty() => 0.0,
            MapReduction::Mean => s / q.len() as f64,
        }
    })
}

/// Instance-level temporal loss: per-sample sum over its proposals.
pub fn temporal_instance_loss(rois: &[(&[f64], Domain)]) -> f64 {
    per_domain_mean(rois.iter().copied(), |r, d| {
        r.iter().map(|&v| domain_bce(v, d)).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_examples() {
        let v = focal_domain_loss(0.8, 2.0);
        assert!((v - 0.04 * -(0.8f64.ln())).abs() < 1e-15);
        assert!((v - 0.008926).abs() < 1e-5);
        for i in 1..100 {
            let p = i as f64 / 100.0;
            assert!((focal_domain_loss(p, 0.0) + p.ln()).abs() <= 1e-7);
        }
        assert!(focal_domain_loss(1.0, 2.0) < 1e-12);
        assert!(focal_domain_loss(0.0, 0.0).is_finite());
    }

    #[test]
    fn focal_monotone_in_p_and_gamma() {
        let mut prev = f64::INFINITY;
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let v = focal_domain_loss(p, 2.0);
            assert!(v <= prev);
            prev = v;
            for g in 0..5 {
                let lo = focal_domain_loss(p, g as f64 * 0.5);
                let hi = focal_domain_loss(p, g as f64 * 0.5 + 0.5);
                assert!(hi <= lo);
            }
        }
    }

    #[test]
    fn image_loss_examples() {
        let q = [0.5; 4];
        let v = temporal_image_loss(&[(&q, Domain::Target)], MapReduction::Sum);
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-12);
        let v = temporal_image_loss(&[(&q, Domain::Target)], MapReduction::Mean);
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let zero = [0.0; 4];
        assert!(temporal_image_loss(&[(&zero, Domain::Source)], MapReduction::Sum) < 1e-6);
        // swapping labels with Q -> 1 - Q
        let a = [0.2, 0.7];
        let b = [0.9, 0.4];
        let flip = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
        let (fa, fb) = (flip(&a), flip(&b));
        let l1 = temporal_image_loss(&[(&a, Domain::Source), (&b, Domain::Target)], MapReduction::Sum);
        let l2 = temporal_image_loss(&[(&fa, Domain::Target), (&fb, Domain::Source)], MapReduction::Sum);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn instance_loss_examples() {
        let r = [0.3, 0.6];
        let v = temporal_instance_loss(&[(&r, Domain::Source)]);
        assert!((v + (0.7f64.ln() + 0.4f64.ln())).abs() < 1e-12);
        assert!((v - 1.27297).abs() < 1e-4);
        let empty: [f64; 0] = [];
        assert_eq!(
            temporal_instance_loss(&[(&empty, Domain::Source), (&empty, Domain::Target)]),
            0.0
        );
        // zero-ROI samples still count toward the per-domain mean
        let v2 = temporal_instance_loss(&[(&r, Domain::Source), (&empty, Domain::Source)]);
        assert!((v2 - v / 2.0).abs() < 1e-12);
    }

    #[test]
    fn spatial_loss_averages_per_domain() {
        let s = spatial_focal_loss(&[(0.2, Domain::Source), (0.4, Domain::Source), (0.8, Domain::Target)], 2.0);
        let expect = (focal_domain_loss(0.8, 2.0) + focal_domain_loss(0.6, 2.0)) / 2.0
            + focal_domain_loss(0.8, 2.0);
        assert!((s - expect).abs() < 1e-12);
    }
}
