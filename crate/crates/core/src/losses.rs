//! Training objectives. Every loss is recorded on a tape and returns a `[1]`
//! scalar; scale-indexed arrays run small, mid, full.

use crate::error::{bail, Result};
use crate::perception::{FaceEmbedder, FeatureExtractor};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Coefficients of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Adversarial weight per output scale.
    pub alpha_adv: [f64; 3],
    /// Identity weight per output scale.
    pub beta_id: [f64; 3],
    pub lambda_adv: f64,
    pub lambda_id: f64,
    pub lambda_vgg: f64,
    pub lambda_rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_adv: [0.02, 0.02, 1.0],
            beta_id: [0.02, 0.02, 20.0],
            lambda_adv: 1.0,
            lambda_id: 1.0,
            lambda_vgg: 4.0,
            lambda_rec: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_adv, self.lambda_id, self.lambda_vgg, self.lambda_rec];
        for &w in self.alpha_adv.iter().chain(&self.beta_id).chain(&lambdas) {
            if !(w >= 0.0) || !w.is_finite() {
                bail!(Config, "loss weights must be finite and nonnegative, got {w}");
            }
        }
        Ok(())
    }
}

/// Itemized loss values of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub adv: [f64; 3],
    /// `Σ α_s·adv_s`.
    pub adv_total: f64,
    pub id: [f64; 3],
    /// `Σ β_s·id_s`.
    pub id_total: f64,
    pub vgg: f64,
    pub rec: f64,
    pub total_g: f64,
    pub d: [f64; 3],
    pub total_d: f64,
}

impl LossReport {
    /// `λ_adv·adv_total + λ_id·id_total + λ_vgg·vgg + λ_rec·rec`.
    pub fn recombine(&self, w: &LossWeights) -> f64 {
        w.lambda_adv * self.adv_total + w.lambda_id * self.id_total + w.lambda_vgg * self.vgg + w.lambda_rec * self.rec
    }

    /// `(name, value)` for every term, in a fixed order.
    pub fn terms(&self) -> [(&'static str, f64); 15] {
        [
            ("adv_small", self.adv[0]),
            ("adv_mid", self.adv[1]),
            ("adv_full", self.adv[2]),
            ("adv", self.adv_total),
            ("id_small", self.id[0]),
            ("id_mid", self.id[1]),
            ("id_full", self.id[2]),
            ("id", self.id_total),
            ("vgg", self.vgg),
            ("rec", self.rec),
            ("total_g", self.total_g),
            ("d_small", self.d[0]),
            ("d_mid", self.d[1]),
            ("d_full", self.d[2]),
            ("total_d", self.total_d),
        ]
    }
}

fn value<T: Scalar>(tape: &Tape<T>, v: Var) -> f64 {
    tape.value(v).item().as_f64()
}

/// `mean(relu(1 − real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss<T: Scalar>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = tape.scale(real, -T::one())?;
    let r = tape.offset(r, T::one())?;
    let r = tape.relu(r)?;
    let r = tape.mean(r)?;
    let f = tape.offset(fake, T::one())?;
    let f = tape.relu(f)?;
    let f = tape.mean(f)?;
    tape.add(r, f)
}

/// `−mean(fake)`.
pub fn hinge_g_loss<T: Scalar>(tape: &mut Tape<T>, fake: Var) -> Result<Var> {
    let m = tape.mean(fake)?;
    tape.scale(m, -T::one())
}

/// `1 − mean_b cos(e_b, f_b)` for unit-norm rows.
pub fn cosine_distance<T: Scalar>(tape: &mut Tape<T>, e: Var, f: Var) -> Result<Var> {
    let cos = tape.row_dot(e, f)?;
    let m = tape.mean(cos)?;
    let m = tape.scale(m, -T::one())?;
    tape.offset(m, T::one())
}

/// Per-scale identity distances `1 − cos(f_src, embed(X_s))` for the scales
/// whose weight is nonzero, and their `β`-weighted sum.
pub fn identity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    outputs: [Var; 3],
    f_src: Var,
    embedder: &dyn FaceEmbedder<T>,
    beta: [f64; 3],
) -> Result<(Option<Var>, [Option<Var>; 3])> {
    let mut per = [None; 3];
    let mut total: Option<Var> = None;
    for s in 0..3 {
        if beta[s] == 0.0 {
            continue;
        }
        let e = embedder.embed_var(tape, outputs[s])?;
        let d = cosine_distance(tape, e, f_src)?;
        per[s] = Some(d);
        let w = tape.scale(d, T::from_f64(beta[s]))?;
        total = Some(match total {
            Some(t) => tape.add(t, w)?,
            None => w,
        });
    }
    Ok((total, per))
}

/// `Σ_layers mean|F(x) − F(target)|`.
pub fn attribute_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    target: Var,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    if tape.shape(x) != tape.shape(target) {
        bail!(Dimension, "attribute loss: {:?} vs {:?}", tape.shape(x), tape.shape(target));
    }
    let fx = extractor.features(tape, x)?;
    let ft = extractor.features(tape, target)?;
    let mut total: Option<Var> = None;
    for (a, b) in fx.into_iter().zip(ft) {
        let d = tape.sub(a, b)?;
        let d = tape.abs(d)?;
        let m = tape.mean(d)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => bail!(Config, "feature extractor declares no layers"),
    }
}

/// Mean squared error, or `None` when there is no ground truth.
pub fn reconstruction_loss<T: Scalar>(tape: &mut Tape<T>, x: Var, gt: Option<Var>) -> Result<Option<Var>> {
    let Some(gt) = gt else {
        return Ok(None);
    };
    let d = tape.sub(x, gt)?;
    let sq = tape.mul(d, d)?;
    Ok(Some(tape.mean(sq)?))
}

/// Recorded terms of a generator step; `None` means the term is absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    /// Per-scale `−mean D(fake)`.
    pub adv: [Option<Var>; 3],
    /// Per-scale identity distances.
    pub id: [Option<Var>; 3],
    pub vgg: Option<Var>,
    pub rec: Option<Var>,
}

/// Weighted total. Terms with zero weight are left off the tape, so they
/// contribute no gradient; absent terms count as zero in the report.
pub fn total_generator_loss<T: Scalar>(tape: &mut Tape<T>, parts: &LossParts, w: &LossWeights) -> Result<(Var, LossReport)> {
    w.validate()?;
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let mut push = |tape: &mut Tape<T>, v: Var, k: f64| -> Result<()> {
        if k == 0.0 {
            return Ok(());
        }
        let s = tape.scale(v, T::from_f64(k))?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
        Ok(())
    };
    for s in 0..3 {
        if let Some(v) = parts.adv[s] {
            report.adv[s] = value(tape, v);
            push(tape, v, w.lambda_adv * w.alpha_adv[s])?;
        }
        if let Some(v) = parts.id[s] {
            report.id[s] = value(tape, v);
            push(tape, v, w.lambda_id * w.beta_id[s])?;
        }
    }
    if let Some(v) = parts.vgg {
        report.vgg = value(tape, v);
        push(tape, v, w.lambda_vgg)?;
    }
    if let Some(v) = parts.rec {
        report.rec = value(tape, v);
        push(tape, v, w.lambda_rec)?;
    }
    report.adv_total = (0..3).map(|s| w.alpha_adv[s] * report.adv[s]).sum();
    report.id_total = (0..3).map(|s| w.beta_id[s] * report.id[s]).sum();
    report.total_g = report.recombine(w);
    let total = match total {
        Some(t) => t,
        None => tape.constant(crate::tensor::Tensor::scalar(T::zero())),
    };
    Ok((total, report))
}
