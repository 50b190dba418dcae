//! Adversarial domain losses on tensors, module switches and the combined
//! objective.
//!
//! Every discriminator sees its features through a gradient reversal layer
//! with scale `lambda`. The graph objective is `L_act + L_adv`: the
//! discriminators receive the unscaled gradient of `L_adv` while the feature
//! extractors receive `-lambda` times it. The reported total is
//! `L_act + lambda * L_adv`.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use tubeshift_core::{Domain, MapReduction};

use crate::detector::{scalar, ActionDetector, DetectionLosses, SourceOutputs, TargetOutputs};
use crate::error::{ModelError, Result};
use crate::grl::{grl, GrlConfig};
use tubeshift_core::losses::PROB_EPS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub map_reduction: MapReduction,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            lambda: 0.1,
            map_reduction: MapReduction::Sum,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !v.is_finite() || v < 0.0 {
                return Err(ModelError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which adaptation modules are active.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModuleFlags {
    pub timg: bool,
    pub tinst: bool,
    pub simg: bool,
}

impl ModuleFlags {
    pub const NONE: Self = Self {
        timg: false,
        tinst: false,
        simg: false,
    };
    pub const ALL: Self = Self {
        timg: true,
        tinst: true,
        simg: true,
    };

    pub fn any(self) -> bool {
        self.timg || self.tinst || self.simg
    }

    /// Short tag usable in file names, e.g. `timg-simg` or `none`.
    pub fn tag(self) -> String {
        let parts: Vec<&str> = [(self.timg, "timg"), (self.tinst, "tinst"), (self.simg, "simg")]
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect();
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("-")
        }
    }
}

impl fmt::Display for ModuleFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.timg, "Timg"), (self.tinst, "Tinst"), (self.simg, "Simg")]
            .iter()
            .filter(|p| p.0)
            .map(|p| p.1)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl FromStr for ModuleFlags {
    type Err = ModelError;

    /// Comma-separated subset of `Timg,Tinst,Simg` (case-insensitive);
    /// `none` or an empty string disables all.
    fn from_str(s: &str) -> Result<Self> {
        let mut flags = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "timg" => flags.timg = true,
                "tinst" => flags.tinst = true,
                "simg" => flags.simg = true,
                "none" => {}
                "all" => flags = Self::ALL,
                _ => {
                    return Err(ModelError::Config(format!(
                        "unknown module {part:?}; expected Timg, Tinst or Simg"
                    )))
                }
            }
        }
        Ok(flags)
    }
}

/// `1 / n_d` for each sample's domain `d`.
fn domain_weights(domains: &[Domain]) -> Vec<f64> {
    let n_s = domains.iter().filter(|&&d| d == Domain::Source).count();
    let n_t = domains.len() - n_s;
    domains
        .iter()
        .map(|d| match d {
            Domain::Source => 1.0 / n_s as f64,
            Domain::Target => 1.0 / n_t as f64,
        })
        .collect()
}

/// Per-element probability of the true domain, clamped like the scalar form.
fn prob_true(p_target: &Tensor, is_target: &Tensor) -> Result<Tensor> {
    // p if target else 1 - p, written as 1 - t + (2t - 1) p
    let flip = ((is_target * 2.0)? - 1.0)?;
    let p = ((p_target.broadcast_mul(&flip))? + (1.0 - is_target)?.broadcast_as(p_target.shape())?)?;
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

/// `values` as a 1-D tensor with the dtype and device of `like`.
fn vector_like(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, n, like.device())?.to_dtype(like.dtype())?)
}

fn labels_tensor(domains: &[Domain], like: &Tensor) -> Result<Tensor> {
    vector_like(domains.iter().map(|d| d.label() as f64).collect(), like)
}

/// Spatial focal loss of `p_target [N]`: mean per domain, summed.
pub fn spatial_focal_loss(p_target: &Tensor, domains: &[Domain], gamma: f64) -> Result<Tensor> {
    let t = labels_tensor(domains, p_target)?;
    let p = prob_true(p_target, &t)?;
    let focal = ((1.0 - &p)?.powf(gamma)? * p.log()?)?.neg()?;
    let w = vector_like(domain_weights(domains), p_target)?;
    Ok((focal * w)?.sum_all()?)
}

/// Image-level loss of `q [N, H, W]`: per-sample sum (or mean) over locations
/// of the domain BCE, mean per domain, summed.
pub fn temporal_image_loss(q: &Tensor, domains: &[Domain], reduction: MapReduction) -> Result<Tensor> {
    let (n, h, w) = q.dims3()?;
    let t = labels_tensor(domains, q)?.reshape((n, 1, 1))?;
    let p = prob_true(q, &t)?;
    let mut per_sample = p.log()?.neg()?.sum((1, 2))?;
    if reduction == MapReduction::Mean {
        per_sample = (per_sample / (h * w) as f64)?;
    }
    let wts = vector_like(domain_weights(domains), q)?;
    Ok((per_sample * wts)?.sum_all()?)
}

/// Instance-level loss of `r [K]`, where sample `i` owns the next
/// `rois_per_sample[i]` entries: per-sample sum of the domain BCE, mean per
/// domain, summed.
pub fn temporal_instance_loss(r: &Tensor, rois_per_sample: &[usize], domains: &[Domain]) -> Result<Tensor> {
    let k = r.dims1()?;
    if rois_per_sample.len() != domains.len() || rois_per_sample.iter().sum::<usize>() != k {
        return Err(ModelError::Shape(format!(
            "{k} instance outputs for ROI counts {rois_per_sample:?}"
        )));
    }
    if k == 0 {
        return Ok(Tensor::zeros((), r.dtype(), r.device())?);
    }
    let sample_w = domain_weights(domains);
    let mut labels = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for ((&count, d), w) in rois_per_sample.iter().zip(domains).zip(&sample_w) {
        labels.extend(std::iter::repeat_n(d.label() as f64, count));
        weights.extend(std::iter::repeat_n(*w, count));
    }
    let t = vector_like(labels, r)?;
    let p = prob_true(r, &t)?;
    let wts = vector_like(weights, r)?;
    Ok((p.log()?.neg()? * wts)?.sum_all()?)
}

/// The three adversarial terms; a disabled module has no tensor.
#[derive(Debug, Clone, Default)]
pub struct AdversarialTerms {
    pub ds: Option<Tensor>,
    pub dtimg: Option<Tensor>,
    pub dtinst: Option<Tensor>,
}

impl AdversarialTerms {
    /// `L_DS + L_DTimg + L_DTinst` over the enabled terms.
    pub fn sum(&self) -> Result<Option<Tensor>> {
        let mut acc: Option<Tensor> = None;
        for t in [&self.ds, &self.dtimg, &self.dtinst].into_iter().flatten() {
            acc = Some(match acc {
                None => t.clone(),
                Some(a) => (a + t)?,
            });
        }
        Ok(acc)
    }

    /// Scalar values, 0 for disabled modules.
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let v = |t: &Option<Tensor>| t.as_ref().map_or(Ok(0.0), scalar);
        Ok((v(&self.ds)?, v(&self.dtimg)?, v(&self.dtinst)?))
    }
}

fn both(a: &Option<Tensor>, b: &Option<Tensor>, what: &str) -> Result<Tensor> {
    match (a, b) {
        (Some(a), Some(b)) => Ok(Tensor::cat(&[a, b], 0)?),
        _ => Err(ModelError::Config(format!("{what} features missing for an enabled module"))),
    }
}

/// Adversarial losses of one mixed batch. Source features come from the
/// training pass, target features from [`ActionDetector::forward_target`].
pub fn adversarial_losses(
    model: &ActionDetector,
    source: &SourceOutputs,
    target: &TargetOutputs,
    flags: ModuleFlags,
    config: &AdaptationConfig,
) -> Result<AdversarialTerms> {
    let n_s = source.rois_per_image.len();
    let n_t = target_batch_size(target);
    if n_s == 0 || n_t == 0 {
        return Err(ModelError::MissingDomain { n_s, n_t });
    }
    let domains: Vec<Domain> = std::iter::repeat_n(Domain::Source, n_s)
        .chain(std::iter::repeat_n(Domain::Target, n_t))
        .collect();
    let g = GrlConfig { lambda: config.lambda };
    let mut terms = AdversarialTerms::default();
    if flags.simg {
        let x = both(&Some(source.features.sf_map.clone()), &target.sf_map, "spatial")?;
        let p = model.spatial_discriminator().discriminate_spatial(&grl(&x, g)?)?;
        terms.ds = Some(spatial_focal_loss(&p, &domains, config.gamma)?);
    }
    if flags.timg {
        let x = both(&Some(source.features.tf1_map.clone()), &target.tf1_map, "temporal image")?;
        let q = model.temporal_image_discriminator().discriminate_temporal_image(&grl(&x, g)?)?;
        terms.dtimg = Some(temporal_image_loss(&q, &domains, config.map_reduction)?);
    }
    if flags.tinst {
        // Both domains contribute their RPN proposals, so the discriminator
        // cannot key on the foreground ratio of the training ROI sample.
        let src = model.instance_vectors(&source.features.tf1_map, &source.proposals, source.image_size)?;
        let x = both(&Some(src), &target.tf2_vectors, "instance")?;
        let r = model.temporal_instance_discriminator().discriminate_temporal_instance(&grl(&x, g)?)?;
        let counts: Vec<usize> = source
            .proposals
            .iter()
            .map(Vec::len)
            .chain(target.rois_per_image.iter().copied())
            .collect();
        terms.dtinst = Some(temporal_instance_loss(&r, &counts, &domains)?);
    }
    Ok(terms)
}

fn target_batch_size(t: &TargetOutputs) -> usize {
    [&t.sf_map, &t.tf1_map]
        .into_iter()
        .flatten()
        .map(|m| m.dims()[0])
        .next()
        .unwrap_or(t.rois_per_image.len())
}

/// Every logged loss of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_rpn: f64,
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_act: f64,
    pub l_ds: f64,
    pub l_dtimg: f64,
    pub l_dtinst: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn new(det: DetectionLosses, l_ds: f64, l_dtimg: f64, l_dtinst: f64, lambda: f64) -> Self {
        let l_adv = l_ds + l_dtimg + l_dtinst;
        Self {
            l_rpn: det.l_rpn,
            l_cls: det.l_cls,
            l_reg: det.l_reg,
            l_act: det.l_act,
            l_ds,
            l_dtimg,
            l_dtinst,
            lambda,
            total: det.l_act + lambda * l_adv,
        }
    }

    pub fn l_adv(&self) -> f64 {
        self.l_ds + self.l_dtimg + self.l_dtinst
    }

    /// Named components in log-column order.
    pub fn components(&self) -> [(&'static str, f64); 9] {
        [
            ("l_rpn", self.l_rpn),
            ("l_cls", self.l_cls),
            ("l_reg", self.l_reg),
            ("l_act", self.l_act),
            ("l_ds", self.l_ds),
            ("l_dtimg", self.l_dtimg),
            ("l_dtinst", self.l_dtinst),
            ("lambda", self.lambda),
            ("total", self.total),
        ]
    }

    /// First non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components().into_iter().find(|(_, v)| !v.is_finite()).map(|(k, _)| k)
    }
}
