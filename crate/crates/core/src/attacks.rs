//! Minimal perturbations (subspace-constrained DeepFool), closed-form linear
//! margins, and L2 projected gradient attacks with box constraints.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{train_with, EpochStats, Model, TrainConfig};
use crate::subspace::{l2_norm, ImageShape, Spectral, Subspace, SubspaceSequence};

/// Relative size below which a projected gradient counts as zero.
const UNINFORMATIVE_TOL: f64 = 1e-12;

fn default_max_iter() -> usize {
    100
}
fn default_overshoot() -> f64 {
    0.02
}
fn default_dykstra_iters() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// DeepFool overshoot η, used only to verify a flip.
    #[serde(default = "default_overshoot")]
    pub overshoot: f64,
    /// PGD step; `None` means `2.5 ε / pgd_steps`.
    #[serde(default)]
    pub step_size: Option<f64>,
    /// PGD ball radius, copied into the [`ConstraintSet`] by callers.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub pgd_steps: usize,
    #[serde(default = "default_dykstra_iters")]
    pub dykstra_iters: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            max_iter: default_max_iter(),
            overshoot: default_overshoot(),
            step_size: None,
            epsilon: 0.0,
            pgd_steps: 0,
            dykstra_iters: default_dykstra_iters(),
        }
    }
}

impl AttackConfig {
    pub fn pgd(epsilon: f64, steps: usize) -> Self {
        Self { epsilon, pgd_steps: steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be >= 1".into()));
        }
        if !(self.overshoot >= 0.0) {
            return Err(Error::InvalidParameter("overshoot must be >= 0".into()));
        }
        if self.dykstra_iters == 0 {
            return Err(Error::InvalidParameter("dykstra_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    Censored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult {
    pub delta: Array1<f64>,
    /// `‖delta‖₂` (without overshoot).
    pub margin: f64,
    pub iterations: usize,
    pub status: Status,
    /// Decision at `x + (1+η)δ` when converged.
    pub flipped_label: Option<usize>,
}

/// Coordinates of a gradient in the subspace (`Bᵀg`), or the gradient itself.
fn coords(g: ArrayView1<'_, f64>, subspace: Option<&Subspace>) -> Array1<f64> {
    match subspace {
        Some(s) => s.basis().t().dot(&g),
        None => g.to_owned(),
    }
}

fn lift(c: &Array1<f64>, subspace: Option<&Subspace>) -> Array1<f64> {
    match subspace {
        Some(s) => s.basis().dot(c),
        None => c.clone(),
    }
}

/// Subspace-constrained DeepFool. The iterate stays in `S`, no box is applied,
/// and the first `δ` with `F(x + (1+η)δ) ≠ F(x)` is returned.
pub fn deepfool(
    model: &Model,
    x: ArrayView1<'_, f64>,
    subspace: Option<&Subspace>,
    config: &AttackConfig,
) -> Result<PerturbationResult> {
    config.validate()?;
    if let Some(s) = subspace {
        if s.ambient_dim() != x.len() {
            return Err(Error::DimensionMismatch { expected: s.ambient_dim(), got: x.len() });
        }
    }
    let (logits, _) = model.logits_and_jacobian(x)?;
    let orig = model.decide(logits.view()).ok_or(Error::LogitTie)?;
    let mut delta = Array1::<f64>::zeros(x.len());
    for iteration in 0..=config.max_iter {
        if iteration > 0 {
            let probe = &x + &(&delta * (1.0 + config.overshoot));
            let (probe_logits, _) = model.logits_and_jacobian(probe.view())?;
            match model.decide(probe_logits.view()) {
                Some(c) if c == orig => {}
                decision => {
                    return Ok(PerturbationResult {
                        margin: l2_norm(delta.view()),
                        delta,
                        iterations: iteration,
                        status: Status::Converged,
                        flipped_label: decision,
                    })
                }
            }
        }
        if iteration == config.max_iter {
            break;
        }
        let point = &x + &delta;
        let (f, jac) = model.logits_and_jacobian(point.view())?;
        let step = if model.is_binary() {
            // signed so the step always heads for g = 0
            let g = f[0];
            let full = jac.row(0);
            let c = coords(full, subspace);
            let nn = c.dot(&c);
            if nn <= (UNINFORMATIVE_TOL * l2_norm(full)).powi(2) || nn == 0.0 {
                return Err(Error::SubspaceUninformative);
            }
            lift(&c.mapv(|v| -g / nn * v), subspace)
        } else {
            closest_class_step(&f, &jac, orig, subspace)?
        };
        delta += &step;
    }
    Ok(PerturbationResult {
        margin: l2_norm(delta.view()),
        delta,
        iterations: config.max_iter,
        status: Status::Censored,
        flipped_label: None,
    })
}

/// Linearized step to the nearest competing class; ties go to the lowest index.
fn closest_class_step(f: &Array1<f64>, jac: &Array2<f64>, orig: usize, subspace: Option<&Subspace>) -> Result<Array1<f64>> {
    let base = coords(jac.row(orig), subspace);
    let mut best: Option<(f64, f64, Array1<f64>)> = None;
    for k in 0..f.len() {
        if k == orig {
            continue;
        }
        let full = &jac.row(k) - &jac.row(orig);
        let w = &coords(jac.row(k), subspace) - &base;
        let nn = w.dot(&w);
        if nn == 0.0 || nn <= (UNINFORMATIVE_TOL * l2_norm(full.view())).powi(2) {
            continue;
        }
        let gap = (f[k] - f[orig]).abs();
        let dist = gap / nn.sqrt();
        if best.as_ref().is_none_or(|(d, _, _)| dist < *d) {
            best = Some((dist, gap / nn, w));
        }
    }
    let (_, scale, w) = best.ok_or(Error::SubspaceUninformative)?;
    Ok(lift(&(w * scale), subspace))
}

/// Distance from `x` to `{wᵀz + b = 0}` moving only inside `S`:
/// `|wᵀx + b| / ‖P_S w‖`.
pub fn linear_margin(w: ArrayView1<'_, f64>, b: f64, x: ArrayView1<'_, f64>, subspace: Option<&Subspace>) -> Result<f64> {
    if w.len() != x.len() {
        return Err(Error::DimensionMismatch { expected: w.len(), got: x.len() });
    }
    if let Some(s) = subspace {
        if s.ambient_dim() != w.len() {
            return Err(Error::DimensionMismatch { expected: s.ambient_dim(), got: w.len() });
        }
    }
    let pw = l2_norm(coords(w, subspace).view());
    if pw <= 1e-12 {
        return Err(Error::InfiniteMargin);
    }
    Ok((w.dot(&x) + b).abs() / pw)
}

/// `δ` rescaled into the ε-ball, then `x_ref + δ` clipped to `[0,1]`;
/// returns the clipped difference.
pub fn project_l2_box(x_ref: ArrayView1<'_, f64>, delta: ArrayView1<'_, f64>, epsilon: f64) -> Array1<f64> {
    let image = ball_box_image(x_ref, delta, epsilon, Some((0.0, 1.0)));
    &image - &x_ref
}

fn ball(delta: ArrayView1<'_, f64>, epsilon: f64) -> Array1<f64> {
    let n = l2_norm(delta);
    if n > epsilon {
        delta.mapv(|v| v * (epsilon / n))
    } else {
        delta.to_owned()
    }
}

/// The projected point itself, so the box holds exactly on it.
fn ball_box_image(x_ref: ArrayView1<'_, f64>, delta: ArrayView1<'_, f64>, epsilon: f64, bounds: Option<(f64, f64)>) -> Array1<f64> {
    let mut image = &x_ref + &ball(delta, epsilon);
    if let Some((lo, hi)) = bounds {
        image.mapv_inplace(|v| v.clamp(lo, hi));
    }
    image
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// `‖δ‖₂ ≤ ε`, `x + δ ∈ box`.
    L2BallBox,
    /// Inputs live in the frequency-flipped domain: `‖δ̂‖₂ ≤ ε` there and
    /// `flip(x̂ + δ̂) ∈ box` in the image domain.
    FlippedL2BallBox,
}

fn default_box() -> Option<(f64, f64)> {
    Some((0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSet {
    pub kind: ConstraintKind,
    pub epsilon: f64,
    /// Pixel bounds; `None` drops the box (unbounded synthetic features).
    #[serde(default = "default_box")]
    pub bounds: Option<(f64, f64)>,
    #[serde(default)]
    pub image_shape: Option<ImageShape>,
}

impl ConstraintSet {
    pub fn l2_ball_box(epsilon: f64) -> Self {
        Self { kind: ConstraintKind::L2BallBox, epsilon, bounds: default_box(), image_shape: None }
    }

    pub fn flipped(epsilon: f64, shape: ImageShape) -> Self {
        Self { kind: ConstraintKind::FlippedL2BallBox, epsilon, bounds: default_box(), image_shape: Some(shape) }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("constraint epsilon must be > 0".into()));
        }
        if let Some((lo, hi)) = self.bounds {
            if !(lo < hi) {
                return Err(Error::InvalidParameter("box lower bound must be below upper bound".into()));
            }
        }
        if self.kind == ConstraintKind::FlippedL2BallBox {
            let shape = self
                .image_shape
                .ok_or_else(|| Error::InvalidParameter("flipped constraint needs image_shape".into()))?;
            if shape.len() != dim {
                return Err(Error::DimensionMismatch { expected: shape.len(), got: dim });
            }
        }
        Ok(())
    }

    /// Projects `candidate` (model-input domain) onto the set around `x_ref`.
    ///
    /// For the flipped set this runs `iters` Dykstra rounds and then retracts
    /// radially toward `x_ref` in the image domain if the ball is still
    /// violated; that keeps both constraints satisfied however few rounds run.
    pub fn project(&self, x_ref: ArrayView1<'_, f64>, candidate: ArrayView1<'_, f64>, iters: usize) -> Result<Projected> {
        match self.kind {
            ConstraintKind::L2BallBox => {
                let point = ball_box_image(x_ref, (&candidate - &x_ref).view(), self.epsilon, self.bounds);
                Ok(Projected { point, image: None })
            }
            ConstraintKind::FlippedL2BallBox => {
                let spectral = Spectral::new(self.image_shape.expect("validated"));
                let out = dykstra_with(&spectral, candidate, x_ref, self.epsilon, iters, self.bounds)?;
                let ref_image = spectral.flip(x_ref)?;
                let offset = &out.image - &ref_image;
                let dist = l2_norm(offset.view());
                if dist <= self.epsilon {
                    return Ok(Projected { point: out.flipped, image: Some(out.image) });
                }
                let mut image = &ref_image + &(offset * (self.epsilon / dist));
                if let Some((lo, hi)) = self.bounds {
                    image.mapv_inplace(|v| v.clamp(lo, hi));
                }
                let point = spectral.flip(image.view())?;
                Ok(Projected { point, image: Some(image) })
            }
        }
    }
}

/// A projected point, plus its image-domain counterpart for flipped sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub point: Array1<f64>,
    pub image: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DykstraOutput {
    /// Final iterate in the flipped domain.
    pub flipped: Array1<f64>,
    /// `flip(flipped)` as produced by the box step, inside `[0,1]` exactly.
    pub image: Array1<f64>,
}

/// Dykstra's alternating projection onto `{x̂ : ‖x̂ − x̂_ref‖ ≤ ε} ∩ {x̂ : flip(x̂) ∈ [0,1]}`.
pub fn dykstra_project(
    x_hat: ArrayView1<'_, f64>,
    x_hat_ref: ArrayView1<'_, f64>,
    epsilon: f64,
    iters: usize,
    shape: ImageShape,
) -> Result<DykstraOutput> {
    dykstra_with(&Spectral::new(shape), x_hat, x_hat_ref, epsilon, iters, Some((0.0, 1.0)))
}

fn dykstra_with(
    spectral: &Spectral,
    x_hat: ArrayView1<'_, f64>,
    x_hat_ref: ArrayView1<'_, f64>,
    epsilon: f64,
    iters: usize,
    bounds: Option<(f64, f64)>,
) -> Result<DykstraOutput> {
    if iters == 0 {
        return Err(Error::InvalidParameter("dykstra iterations must be >= 1".into()));
    }
    let n = spectral.shape().len();
    for len in [x_hat.len(), x_hat_ref.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    let mut z = x_hat.to_owned();
    let mut p = Array1::<f64>::zeros(n);
    let mut q = Array1::<f64>::zeros(n);
    let mut y = Array1::<f64>::zeros(n);
    let mut image = Array1::<f64>::zeros(n);
    for _ in 0..iters {
        // y = ref + ball(z + p − ref); p ← z + p − y
        y.assign(&z);
        y += &p;
        y -= &x_hat_ref;
        let norm = l2_norm(y.view());
        if norm > epsilon {
            y *= epsilon / norm;
        }
        y += &x_hat_ref;
        p += &z;
        p -= &y;
        // image = clip(flip(y + q)); z = flip(image); q ← y + q − z
        q += &y;
        spectral.flip_into(q.view(), image.view_mut())?;
        if let Some((lo, hi)) = bounds {
            image.mapv_inplace(|v| v.clamp(lo, hi));
        }
        spectral.flip_into(image.view(), z.view_mut())?;
        q -= &z;
    }
    Ok(DykstraOutput { flipped: z, image })
}

/// Result of [`pgd_l2`]: the adversarial input (model domain) and, for the
/// flipped set, the corresponding image.
pub type PgdOutput = Projected;

/// L2 PGD on the cross-entropy loss with normalized gradient steps, projecting
/// after every step.
pub fn pgd_l2(model: &Model, x: ArrayView1<'_, f64>, class: usize, constraint: &ConstraintSet, config: &AttackConfig) -> Result<PgdOutput> {
    constraint.validate(x.len())?;
    if config.pgd_steps == 0 {
        let image = match constraint.kind {
            ConstraintKind::L2BallBox => None,
            ConstraintKind::FlippedL2BallBox => {
                Some(Spectral::new(constraint.image_shape.expect("validated")).flip(x)?)
            }
        };
        return Ok(Projected { point: x.to_owned(), image });
    }
    config.validate()?;
    if matches!(config.step_size, Some(a) if !(a > 0.0)) {
        return Err(Error::InvalidParameter("step_size must be > 0".into()));
    }
    let alpha = config.step_size.unwrap_or(2.5 * constraint.epsilon / config.pgd_steps as f64);
    let mut current = x.to_owned();
    let mut image = None;
    for _ in 0..config.pgd_steps {
        let (_, g) = model.loss_input_grad(current.view(), class)?;
        let norm = l2_norm(g.view());
        if norm == 0.0 || !norm.is_finite() {
            break;
        }
        let candidate = &current + &(g * (alpha / norm));
        let projected = constraint.project(x, candidate.view(), config.dykstra_iters)?;
        current = projected.point;
        image = projected.image;
    }
    if image.is_none() && constraint.kind == ConstraintKind::FlippedL2BallBox {
        image = Some(Spectral::new(constraint.image_shape.expect("validated")).flip(current.view())?);
    }
    Ok(Projected { point: current, image })
}

/// One crafted perturbation in the adversarial-training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub epoch: usize,
    pub sample_id: usize,
    pub norm: f64,
    /// `‖P_S δ‖² / ‖δ‖²` per subspace of the logging sequence (zeros when `δ = 0`).
    pub energy: Vec<f64>,
}

/// Energy fraction of `delta` in each subspace.
pub fn energy_fractions(delta: ArrayView1<'_, f64>, sequence: &SubspaceSequence) -> Result<Vec<f64>> {
    let total = delta.dot(&delta);
    sequence
        .items
        .iter()
        .map(|s| Ok(if total > 0.0 { s.energy(delta)? / total } else { 0.0 }))
        .collect()
}

/// Adversarial training: every mini-batch is replaced by PGD examples before
/// the SGD step. The perturbations are logged against `log_sequence` when given.
pub fn adversarial_train(
    model: Model,
    dataset: &LabeledDataset,
    test: Option<&LabeledDataset>,
    constraint: &ConstraintSet,
    attack: &AttackConfig,
    train: &TrainConfig,
    log_sequence: Option<&SubspaceSequence>,
) -> Result<(Model, Vec<EpochStats>, Vec<PerturbationRecord>)> {
    constraint.validate(dataset.dim())?;
    attack.validate()?;
    if let Some(seq) = log_sequence {
        if seq.ambient_dim() != Some(dataset.dim()) {
            return Err(Error::DimensionMismatch { expected: dataset.dim(), got: seq.ambient_dim().unwrap_or(0) });
        }
    }
    let mut log = Vec::new();
    let (model, history) = train_with(model, dataset, test, train, |model, epoch, ids, batch| {
        let rows: Vec<_> = ids.iter().copied().zip(batch.outer_iter()).collect();
        let crafted = rows
            .into_par_iter()
            .map(|(id, x)| {
                let class = model.class_of_label(dataset.labels[id]);
                let out = pgd_l2(model, x, class, constraint, attack)?;
                let delta = &out.point - &x;
                let energy = match log_sequence {
                    Some(seq) => energy_fractions(delta.view(), seq)?,
                    None => Vec::new(),
                };
                let record = PerturbationRecord { epoch, sample_id: id, norm: l2_norm(delta.view()), energy };
                Ok((out.point, record))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut out = Array2::zeros(batch.raw_dim());
        for (i, (point, record)) in crafted.into_iter().enumerate() {
            out.row_mut(i).assign(&point);
            log.push(record);
        }
        Ok(out)
    })?;
    Ok((model, history, log))
}

/// Perturbation log as CSV: `epoch,sample_id,norm,<subspace labels…>`.
pub fn perturbation_log_csv(log: &[PerturbationRecord], labels: &[String]) -> String {
    let mut out = String::from("epoch,sample_id,norm");
    for l in labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for r in log {
        out.push_str(&format!("{},{},{}", r.epoch, r.sample_id, r.norm));
        for e in &r.energy {
            out.push_str(&format!(",{e}"));
        }
        out.push('\n');
    }
    out
}
