//! Training objectives: the transformation-vector constraint, the Siamese
//! margin hinge, the identity mapping loss, and the adversarial hinge pair.
//!
//! All losses are built on an existing tape from already-computed network
//! outputs, so one backward pass yields every gradient.

use crate::error::TensorError;
use crate::tensorcore::{Element, Tape, Var};

/// Weights of the composite generator objective and the margin of the
/// Siamese hinge.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_id: f64,
    pub delta: f64,
    /// Use the printed form of the transformation constraint (`+cos` instead
    /// of `1 - cos`) for comparison runs.
    pub eq1_literal: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 10.0,
            lambda_id: 5.0,
            delta: 1.0,
            eq1_literal: false,
        }
    }
}

/// Elementwise difference of two embedding batches `(P, d)`.
pub fn transformation_vector<T: Element>(
    tape: &Tape<T>,
    e1: Var,
    e2: Var,
) -> Result<Var, TensorError> {
    let (s1, s2) = (tape.shape(e1), tape.shape(e2));
    if s1 != s2 {
        return Err(TensorError::Shape(format!(
            "transformation vector dimension mismatch: {s1:?} vs {s2:?}"
        )));
    }
    Ok(tape.sub(e1, e2))
}

/// Row-wise dot products of two `(P, d)` batches, as a `(P,)` tensor.
fn row_dot<T: Element>(tape: &Tape<T>, a: Var, b: Var) -> Result<Var, TensorError> {
    let shape = tape.shape(a);
    let (p, d) = (shape[0], shape[1]);
    let ar = tape.reshape(a, vec![p, 1, d])?;
    let br = tape.reshape(b, vec![p, d, 1])?;
    let dots = tape.bmm(ar, br, false, false)?;
    tape.reshape(dots, vec![p])
}

const DEGENERATE_NORM: f64 = 1e-8;

/// Row-wise cosine similarity of two `(P, d)` batches. Pairs where either
/// vector has norm below 1e-8 report 0 and are flagged degenerate.
pub fn cosine_pi<T: Element>(
    tape: &Tape<T>,
    t: Var,
    t_prime: Var,
) -> Result<(Vec<T>, Vec<bool>), TensorError> {
    let dots = row_dot(tape, t, t_prime)?;
    let n1 = row_dot(tape, t, t)?;
    let n2 = row_dot(tape, t_prime, t_prime)?;
    let (dots, n1, n2) = (
        tape.value_clone(dots),
        tape.value_clone(n1),
        tape.value_clone(n2),
    );
    let thresh = T::cast_from(DEGENERATE_NORM);
    let mut cos = Vec::with_capacity(dots.len());
    let mut degenerate = Vec::with_capacity(dots.len());
    for i in 0..dots.len() {
        let (na, nb) = (n1.data[i].sqrt(), n2.data[i].sqrt());
        if na < thresh || nb < thresh {
            cos.push(T::zero());
            degenerate.push(true);
        } else {
            cos.push(dots.data[i] / (na * nb));
            degenerate.push(false);
        }
    }
    Ok((cos, degenerate))
}

/// Outcome of the transformation-vector loss: the scalar node plus the
/// number of degenerate pairs excluded from the mean.
pub struct SiameseTransformLoss {
    pub loss: Var,
    pub degenerate_pairs: usize,
}

/// Mean over pairs of `(1 - cos(t, t')) + ||t - t'||^2` (or `cos + ||.||^2`
/// in literal mode), where `t = S(a1) - S(a2)` and `t' = S(G(a1)) - S(G(a2))`.
/// Degenerate pairs (either vector near zero) are excluded and counted.
pub fn loss_siamese_transform<T: Element>(
    tape: &Tape<T>,
    e_a1: Var,
    e_a2: Var,
    e_ga1: Var,
    e_ga2: Var,
    eq1_literal: bool,
) -> Result<SiameseTransformLoss, TensorError> {
    let t = transformation_vector(tape, e_a1, e_a2)?;
    let t_prime = transformation_vector(tape, e_ga1, e_ga2)?;
    let (_, degenerate) = cosine_pi(tape, t, t_prime)?;
    let valid: Vec<usize> = degenerate
        .iter()
        .enumerate()
        .filter(|(_, &d)| !d)
        .map(|(i, _)| i)
        .collect();
    let degenerate_pairs = degenerate.len() - valid.len();
    if valid.is_empty() {
        return Ok(SiameseTransformLoss {
            loss: tape.constant(crate::tensorcore::TensorData::scalar(T::zero())),
            degenerate_pairs,
        });
    }
    let (t, t_prime) = if degenerate_pairs > 0 {
        (tape.gather_rows(t, &valid)?, tape.gather_rows(t_prime, &valid)?)
    } else {
        (t, t_prime)
    };
    // cos on the tape so gradients flow: dot / (|t| |t'|).
    let dots = row_dot(tape, t, t_prime)?;
    let norm_t = tape.sqrt(row_dot(tape, t, t)?);
    let norm_tp = tape.sqrt(row_dot(tape, t_prime, t_prime)?);
    let cos = tape.mul(dots, tape.recip(tape.mul(norm_t, norm_tp)));
    let cos_term = if eq1_literal {
        cos
    } else {
        // Minimizing the printed +cos drives the vectors anti-parallel;
        // 1 - cos rewards keeping them parallel.
        tape.add_const(tape.scale(cos, -T::one()), T::one())
    };
    let diff = tape.sub(t, t_prime);
    let sq = row_dot(tape, diff, diff)?;
    let per_pair = tape.add(cos_term, sq);
    Ok(SiameseTransformLoss {
        loss: tape.mean_all(per_pair),
        degenerate_pairs,
    })
}

/// Mean over pairs of `max(0, delta - ||S(a1) - S(a2)||_2)`.
pub fn loss_siamese_margin<T: Element>(
    tape: &Tape<T>,
    e_a1: Var,
    e_a2: Var,
    delta: T,
) -> Result<Var, TensorError> {
    let t = transformation_vector(tape, e_a1, e_a2)?;
    let sq = row_dot(tape, t, t)?;
    // Small epsilon keeps the sqrt differentiable at collapsed pairs.
    let norm = tape.sqrt(tape.add_const(sq, T::cast_from(1e-12)));
    let hinge = tape.relu(tape.add_const(tape.scale(norm, -T::one()), delta));
    Ok(tape.mean_all(hinge))
}

/// Mean over the batch of per-segment L1 distance `||G(b) - b||_1`.
pub fn loss_identity<T: Element>(
    tape: &Tape<T>,
    g_b: Var,
    b: Var,
) -> Result<Var, TensorError> {
    let shape = tape.shape(g_b);
    if shape != tape.shape(b) {
        return Err(TensorError::Shape(format!(
            "identity loss shape mismatch: {:?} vs {:?}",
            shape,
            tape.shape(b)
        )));
    }
    let n = shape[0];
    let l1 = tape.sum_all(tape.abs(tape.sub(g_b, b)));
    Ok(tape.scale(l1, T::one() / T::cast_from(n as f64)))
}

/// Discriminator hinge: `mean(max(0, 1 - D(b))) + mean(max(0, 1 + D(fake)))`.
pub fn loss_d_hinge<T: Element>(tape: &Tape<T>, d_real: Var, d_fake: Var) -> Var {
    let one = T::one();
    let real = tape.mean_all(tape.relu(tape.add_const(tape.scale(d_real, -one), one)));
    let fake = tape.mean_all(tape.relu(tape.add_const(d_fake, one)));
    tape.add(real, fake)
}

/// Generator adversarial term: `-mean(D(G(a)))`.
pub fn loss_g_adv<T: Element>(tape: &Tape<T>, d_fake: Var) -> Var {
    tape.scale(tape.mean_all(d_fake), -T::one())
}

/// Scalar values of the individual terms, reported per step.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLossParts<T> {
    pub adv: T,
    pub siamese_transform: T,
    pub siamese_margin: T,
    pub identity: T,
    pub total: T,
}

/// Combined objective backing a single backward pass.
///
/// The generator's parameters receive `adv + lambda_s * transform +
/// lambda_id * identity`; the Siamese parameters receive `lambda_s *
/// transform + margin` (the margin term has no generator path, so adding it
/// to the combined scalar perturbs nothing else).
pub fn total_generator_loss<T: Element>(
    tape: &Tape<T>,
    adv: Var,
    siamese_transform: Var,
    siamese_margin: Var,
    identity: Var,
    weights: &LossWeights,
) -> (Var, GeneratorLossParts<T>) {
    let ls = tape.scale(siamese_transform, T::cast_from(weights.lambda_s));
    let lid = tape.scale(identity, T::cast_from(weights.lambda_id));
    let g_total = tape.add(tape.add(adv, ls), lid);
    let combined = tape.add(g_total, siamese_margin);
    let parts = GeneratorLossParts {
        adv: tape.scalar_value(adv),
        siamese_transform: tape.scalar_value(siamese_transform),
        siamese_margin: tape.scalar_value(siamese_margin),
        identity: tape.scalar_value(identity),
        total: tape.scalar_value(g_total),
    };
    (combined, parts)
}
