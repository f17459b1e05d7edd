//! Stage-2 losses: feature correction of the pseudo-source against a frozen
//! reference extractor, and class-masked mixing with the complementary-
//! learning-wrapped cross-entropy on mixed samples.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::cacl::{build_mask, unit_terms_grad_probs};
use crate::error::{Error, Result};
use crate::field::{Field, LabelField};
use crate::numerics::PROB_FLOOR;

/// Sites selected for feature alignment, with the rule that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaSet {
    pub indices: Vec<usize>,
    pub c_align: Vec<usize>,
    pub tau_pos: f64,
}

impl OmegaSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Sites whose pseudo-label is in `c_align` and whose confidence clears
/// `tau_pos`. An empty result is legal; the alignment loss then vanishes.
pub fn select_omega(
    pseudo_labels: &[usize],
    confidences: &[f64],
    c_align: &[usize],
    tau_pos: f64,
) -> Result<OmegaSet> {
    if pseudo_labels.len() != confidences.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} confidences",
            pseudo_labels.len(),
            confidences.len()
        )));
    }
    let indices = pseudo_labels
        .iter()
        .zip(confidences)
        .enumerate()
        .filter(|(_, (label, &conf))| c_align.contains(label) && conf >= tau_pos)
        .map(|(i, _)| i)
        .collect();
    Ok(OmegaSet { indices, c_align: c_align.to_vec(), tau_pos })
}

fn cosine_and_grad(live: &[f64], reference: &[f64]) -> (f64, Vec<f64>) {
    // identical vectors are perfectly aligned; skip the epsilon noise the
    // smooth path would introduce
    if live == reference {
        return (1.0, vec![0.0; live.len()]);
    }
    let n_live = live.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let n_ref = reference.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let dot: f64 = live.iter().zip(reference).map(|(a, b)| a * b).sum();
    let cos = dot / (n_live * n_ref);
    let grad = live
        .iter()
        .zip(reference)
        .map(|(&f, &g)| g / (n_live * n_ref) - cos * f / (n_live * n_live))
        .collect();
    (cos, grad)
}

/// Mean cosine misalignment over the selected sites,
/// `lambda * (1/|omega|) * sum (1 - cos(f_live, f_ref))`, with the gradient
/// taken only through `f_live`; the reference is a constant.
pub fn dist_loss(
    f_live: &Field,
    f_ref: &Field,
    omega: &OmegaSet,
    lambda_align: f64,
) -> Result<(f64, Field)> {
    if !f_live.same_shape(f_ref) {
        return Err(Error::Shape(format!(
            "live features {:?} vs reference {:?}",
            f_live.shape(),
            f_ref.shape()
        )));
    }
    let mut grad = Field::zeros(f_live.channels(), f_live.height(), f_live.width());
    if omega.is_empty() {
        return Ok((0.0, grad));
    }
    for &i in &omega.indices {
        if i >= f_live.num_sites() {
            return Err(Error::Invalid(format!("omega index {i} out of bounds")));
        }
    }
    let scale = lambda_align / omega.len() as f64;
    let mut loss = 0.0;
    for &i in &omega.indices {
        let (cos, dcos) = cosine_and_grad(f_live.site_by_index(i), f_ref.site_by_index(i));
        loss += 1.0 - cos;
        let dst = grad.site_by_index_mut(i);
        for (d, g) in dst.iter_mut().zip(dcos) {
            *d = -scale * g;
        }
    }
    Ok((loss * scale, grad))
}

/// Region mask for mixing: a binary per-site field in dense mode, a single
/// interpolation weight for vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum MixMask {
    /// 1 x H x W field of {0.0, 1.0}; 1 takes the pseudo-source site.
    Dense(Field),
    /// Whole-sample weight on the pseudo-source input, in [0.5, 1].
    Scalar(f64),
}

/// Dense class mask: pick the ceiling half of the classes present in the
/// pseudo-source pseudo-labels uniformly at random; their sites get 1.
pub fn make_class_mask_dense<R: Rng>(y_ps: &LabelField, rng: &mut R) -> Field {
    let classes = y_ps.classes_present();
    let take = classes.len().div_ceil(2);
    let mut pool = classes;
    // Fisher-Yates over the class pool, then keep the first `take`
    for i in (1..pool.len()).rev() {
        let j = rng.random_range(0..=i);
        pool.swap(i, j);
    }
    let chosen = &pool[..take];
    let mut mask = Field::zeros(1, y_ps.height(), y_ps.width());
    for i in 0..y_ps.num_sites() {
        if chosen.contains(&y_ps.get_index(i)) {
            mask.data_mut()[i] = 1.0;
        }
    }
    mask
}

/// Fold a raw Beta draw into the mixing weight: the larger of the draw and
/// its complement, so mixed samples stay closer to the pseudo-source donor.
pub fn mix_weight_from_draw(lambda: f64) -> f64 {
    lambda.max(1.0 - lambda)
}

/// Sample the classification-mode mixing weight from Beta(0.75, 0.75).
pub fn sample_mix_weight<R: Rng>(rng: &mut R) -> f64 {
    let beta = Beta::new(0.75, 0.75).expect("valid shape parameters");
    mix_weight_from_draw(beta.sample(rng))
}

/// A mixed sample: spliced input, blended per-class label weights, the mask
/// that produced them, and the donor ids.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub x: Field,
    /// Per-class label weights per site (`classes x H x W`).
    pub y: Field,
    pub mask: MixMask,
    /// `(pseudo-source id, remaining-target id)`.
    pub provenance: (u64, u64),
}

/// Splice inputs and one-hot label fields through the mask:
/// `x_mix = M x_ps + (1 - M) x_rt`, same for labels. Binary dense masks
/// select sites exactly, so `M = 1` sites reproduce the pseudo-source donor
/// bit-for-bit.
pub fn class_mix(
    x_ps: &Field,
    y_ps: &Field,
    x_rt: &Field,
    y_rt: &Field,
    mask: &MixMask,
    provenance: (u64, u64),
) -> Result<MixedSample> {
    if !x_ps.same_shape(x_rt) || !y_ps.same_shape(y_rt) {
        return Err(Error::Shape("mixing donors differ in shape".into()));
    }
    if x_ps.num_sites() != y_ps.num_sites() {
        return Err(Error::Shape("inputs and labels differ in site count".into()));
    }
    let (x, y) = match mask {
        MixMask::Dense(m) => {
            if m.channels() != 1 || m.num_sites() != x_ps.num_sites() {
                return Err(Error::Shape("dense mask must be 1-channel over the input sites".into()));
            }
            let mut x = x_rt.clone();
            let mut y = y_rt.clone();
            for i in 0..x.num_sites() {
                if m.data()[i] == 1.0 {
                    x.site_by_index_mut(i).copy_from_slice(x_ps.site_by_index(i));
                    y.site_by_index_mut(i).copy_from_slice(y_ps.site_by_index(i));
                }
            }
            (x, y)
        }
        MixMask::Scalar(weight) => {
            let a = *weight;
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Invalid(format!("mix weight {a} outside [0, 1]")));
            }
            let blend = |ps: &Field, rt: &Field| {
                let mut out = ps.clone();
                for (o, (&p, &r)) in out.data_mut().iter_mut().zip(ps.data().iter().zip(rt.data())) {
                    *o = a * p + (1.0 - a) * r;
                }
                out
            };
            (blend(x_ps, x_rt), blend(y_ps, y_rt))
        }
    };
    Ok(MixedSample { x, y, mask: mask.clone(), provenance })
}

/// Cross-entropy against the mixed labels, wrapped with complementary
/// supervision: each unit also pays for its ternary mask (built from a
/// detached view of the same probabilities). Returns the mean unit loss and
/// the gradient with respect to the probabilities.
pub fn mix_loss(
    probs_on_mix: &Field,
    y_mix: &Field,
    tau_pos: f64,
    tau_neg: f64,
) -> Result<(f64, Field)> {
    if !probs_on_mix.same_shape(y_mix) {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs labels {:?}",
            probs_on_mix.shape(),
            y_mix.shape()
        )));
    }
    let n = probs_on_mix.num_sites();
    let mut total = 0.0;
    let mut grad = Field::zeros(probs_on_mix.channels(), probs_on_mix.height(), probs_on_mix.width());
    for i in 0..n {
        let p_site = probs_on_mix.site_by_index(i);
        let y_site = y_mix.site_by_index(i);
        let dst = grad.site_by_index_mut(i);
        // cross-entropy with soft labels
        for c in 0..p_site.len() {
            if y_site[c] > 0.0 {
                total -= y_site[c] * p_site[c].max(PROB_FLOOR).ln();
                if p_site[c] > PROB_FLOOR {
                    dst[c] -= y_site[c] / p_site[c];
                }
            }
        }
        // complementary terms from the detached mask
        let p = crate::numerics::ProbDist::new(p_site.to_vec())?;
        let mask = build_mask(&p, tau_pos, tau_neg);
        if !mask.is_all_zero() {
            let (term, dterm) = unit_terms_grad_probs(&p, &mask)?;
            total += term;
            for (d, g) in dst.iter_mut().zip(dterm) {
                *d += g;
            }
        }
    }
    let scale = 1.0 / n as f64;
    for v in grad.data_mut() {
        *v *= scale;
    }
    Ok((total * scale, grad))
}
