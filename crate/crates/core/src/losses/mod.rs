//! Segmentation and adversarial objectives.
//!
//! Every loss is a clamped negative log-likelihood of selected entries of a
//! probability map, normalized over its support (pixels, patches or present
//! classes) under [`LossNorm::Mean`] or left as a raw sum under
//! [`LossNorm::Sum`].
//!
//! Gradient routing is part of the signatures:
//!
//! * the adversarial terms ([`gadv_loss`], [`sadv_fc_loss`],
//!   [`sadv_conv_loss`]) take the discriminator by reference and bind it
//!   frozen, so only the generator side receives gradients;
//! * the discriminator terms ([`gd_loss`], [`sd_fc_loss`], [`sd_conv_loss`])
//!   take a trainable binding and refuse inputs that still carry a gradient
//!   path back to the generator.

use serde::{Deserialize, Serialize};

use crate::datagen::{DownsampledLabelMap, LabelMap, IGNORE};
use crate::diffcore::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{
    bind, Bound, GlobalDiscriminator, SemanticDiscriminatorConv, SemanticDiscriminatorFc,
};

/// How a loss aggregates over its support.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    /// Average over pixels, patches or present classes.
    #[default]
    Mean,
    /// Plain sum.
    Sum,
}

impl LossNorm {
    fn scale<T: Real>(self, support: usize) -> T {
        match self {
            LossNorm::Mean if support > 0 => T::one() / T::lit(support as f64),
            _ => T::one(),
        }
    }
}

/// Which domain a discriminator input came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainFlag {
    Source = 0,
    Target = 1,
}

impl DomainFlag {
    pub fn z(self) -> usize {
        self as usize
    }
}

/// Class-averaged features and which classes occur at all.
#[derive(Debug, Clone)]
pub struct SemanticVectorSet {
    /// `[c, n]`; row `k` is meaningful only when `present[k]`.
    pub vectors: Var,
    pub present: Vec<bool>,
}

impl SemanticVectorSet {
    pub fn present_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().enumerate().filter(|(_, &p)| p).map(|(k, _)| k)
    }
}

fn check_map<T: Real>(tape: &Tape<T>, p: Var, y: &LabelMap, what: &str) -> Result<(usize, usize)> {
    let s = tape.shape(p);
    if s.len() != 3 || s[1] != y.height() || s[2] != y.width() {
        return Err(Error::Shape(format!(
            "{what}: map {s:?} does not match a {}x{} label map",
            y.height(),
            y.width()
        )));
    }
    Ok((s[0], s[1] * s[2]))
}

fn require_detached<T: Real>(tape: &Tape<T>, v: Var, what: &str) -> Result<()> {
    if tape.requires_grad(v) {
        return Err(Error::Routing(format!(
            "{what} must receive a detached input; this one would backpropagate into the generator"
        )));
    }
    Ok(())
}

/// Picks channel `label + offset` at every non-ignore pixel.
fn label_picks(y: &LabelMap, offset: usize, l: usize) -> Vec<usize> {
    y.data()
        .iter()
        .enumerate()
        .filter(|(_, &k)| k != IGNORE)
        .map(|(loc, &k)| (k as usize + offset) * l + loc)
        .collect()
}

/// Cross-entropy of a score map `P` `[c, H, W]` against hard labels `Y`.
pub fn seg_loss<T: Real>(tape: &mut Tape<T>, p: Var, y: &LabelMap, norm: LossNorm) -> Result<Var> {
    let (c, l) = check_map(tape, p, y, "seg_loss")?;
    y.validate(c)?;
    let picks = label_picks(y, 0, l);
    let scale = norm.scale(picks.len());
    tape.neg_log_pick(p, picks, scale)
}

/// Picks channel `channel` of a `[2, h', w']` map at every patch.
fn patch_picks<T: Real>(tape: &Tape<T>, d: Var, channel: usize) -> (Vec<usize>, usize) {
    let s = tape.shape(d);
    let l = s[1] * s[2];
    ((0..l).map(|loc| channel * l + loc).collect(), l)
}

/// Generator-side global adversarial loss: source score maps should be
/// scored as target (channel 1) by the frozen discriminator.
pub fn gadv_loss<T: Real>(
    tape: &mut Tape<T>,
    dg: &GlobalDiscriminator<T>,
    p_s: Var,
    norm: LossNorm,
) -> Result<Var> {
    let frozen = bind(dg, tape, false);
    let d = frozen.forward(tape, p_s)?;
    let (picks, l) = patch_picks(tape, d, 1);
    tape.neg_log_pick(d, picks, norm.scale(l))
}

/// Discriminator-side global loss: score a detached map as domain `z`.
pub fn gd_loss<T: Real>(
    tape: &mut Tape<T>,
    dg: &Bound<'_, GlobalDiscriminator<T>>,
    p: Var,
    z: DomainFlag,
    norm: LossNorm,
) -> Result<Var> {
    require_detached(tape, p, "gd_loss")?;
    let d = dg.forward(tape, p)?;
    let (picks, l) = patch_picks(tape, d, z.z());
    tape.neg_log_pick(d, picks, norm.scale(l))
}

/// Mean feature of every class over the pixels carrying that label.
pub fn class_average<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    y: &DownsampledLabelMap,
    classes: usize,
) -> Result<SemanticVectorSet> {
    check_map(tape, features, y, "class_average")?;
    y.validate(classes)?;
    let (vectors, counts) = tape.class_pool(features, y.data(), classes)?;
    Ok(SemanticVectorSet { vectors, present: counts.iter().map(|&n| n > 0).collect() })
}

fn fc_terms<T: Real>(
    tape: &mut Tape<T>,
    ds: &Bound<'_, SemanticDiscriminatorFc<T>>,
    vset: &SemanticVectorSet,
    offset: usize,
    norm: LossNorm,
) -> Result<Var> {
    let c = ds.module.classes;
    if vset.present.len() != c {
        return Err(Error::Shape(format!(
            "semantic vectors cover {} classes, discriminator {c}",
            vset.present.len()
        )));
    }
    let present: Vec<usize> = vset.present_classes().collect();
    let scale = norm.scale(present.len());
    let mut terms = Vec::with_capacity(present.len());
    for k in present {
        let v = tape.row(vset.vectors, k)?;
        let out = ds.forward(tape, v)?;
        terms.push(tape.neg_log_pick(out, vec![k + offset], scale)?);
    }
    tape.add_all(&terms)
}

/// Generator-side FC semantic loss: the source vector of class `k` should be
/// classified as target class `k` (channel `k + c`).
pub fn sadv_fc_loss<T: Real>(
    tape: &mut Tape<T>,
    ds: &SemanticDiscriminatorFc<T>,
    vset_s: &SemanticVectorSet,
    norm: LossNorm,
) -> Result<Var> {
    let frozen = bind(ds, tape, false);
    fc_terms(tape, &frozen, vset_s, ds.classes, norm)
}

/// Discriminator-side FC semantic loss: classify vector `k` of domain `z`
/// into channel `k + z c`.
pub fn sd_fc_loss<T: Real>(
    tape: &mut Tape<T>,
    ds: &Bound<'_, SemanticDiscriminatorFc<T>>,
    vset: &SemanticVectorSet,
    z: DomainFlag,
    norm: LossNorm,
) -> Result<Var> {
    require_detached(tape, vset.vectors, "sd_fc_loss")?;
    fc_terms(tape, ds, vset, z.z() * ds.module.classes, norm)
}

fn conv_terms<T: Real>(
    tape: &mut Tape<T>,
    out: Var,
    y: &DownsampledLabelMap,
    offset: usize,
    classes: usize,
    norm: LossNorm,
) -> Result<Var> {
    let (_, l) = check_map(tape, out, y, "semantic conv loss")?;
    y.validate(classes)?;
    let picks = label_picks(y, offset, l);
    let scale = norm.scale(picks.len());
    tape.neg_log_pick(out, picks, scale)
}

/// Generator-side pixel-wise semantic loss: every source pixel of class `k`
/// should be classified as target class `k`.
pub fn sadv_conv_loss<T: Real>(
    tape: &mut Tape<T>,
    ds: &SemanticDiscriminatorConv<T>,
    f_s: Var,
    y_s: &DownsampledLabelMap,
    norm: LossNorm,
) -> Result<Var> {
    let frozen = bind(ds, tape, false);
    let out = frozen.forward(tape, f_s)?;
    conv_terms(tape, out, y_s, ds.classes, ds.classes, norm)
}

/// Discriminator-side pixel-wise semantic loss for domain `z`.
pub fn sd_conv_loss<T: Real>(
    tape: &mut Tape<T>,
    ds: &Bound<'_, SemanticDiscriminatorConv<T>>,
    f: Var,
    y: &DownsampledLabelMap,
    z: DomainFlag,
    norm: LossNorm,
) -> Result<Var> {
    require_detached(tape, f, "sd_conv_loss")?;
    let out = ds.forward(tape, f)?;
    let c = ds.module.classes;
    conv_terms(tape, out, y, z.z() * c, c, norm)
}

/// Registers a copy of `t` as a constant: the detach used between the
/// generator and discriminator steps.
pub fn detached<T: Real>(tape: &mut Tape<T>, t: &Tensor<T>) -> Var {
    tape.constant(t.clone())
}
