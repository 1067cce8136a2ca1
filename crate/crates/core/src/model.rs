//! Frozen toy text encoder, softmax classification over feature similarities,
//! and the training objectives with hand-written backpropagation.
//!
//! The encoder reads the prompt tokens followed by one class embedding,
//! applies a single tanh hidden layer and a linear read-out, then projects the
//! result onto the unit sphere:
//!
//! ```text
//! x = [v_1, ..., v_M, c]      a = W1 x + b1      h = tanh(a)
//! o = W2 h + b2               w = o / |o|
//! ```
//!
//! Prompts are flattened token-major: token `m` occupies entries
//! `m*d .. (m+1)*d`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, axpy, dot, norm};

/// Default softmax temperature.
pub const DEFAULT_TAU: f64 = 1.0;

/// Default weight of the feature-similarity term in the total loss.
pub const DEFAULT_LAMBDA: f64 = 1.0;

/// Learnable context tokens, stored flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptState {
    d: usize,
    m: usize,
    data: Vec<f64>,
}

impl PromptState {
    pub fn new(d: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::ZeroDimension("token dimension d"));
        }
        if m == 0 {
            return Err(Error::ZeroDimension("token count M"));
        }
        if data.len() != d * m {
            return Err(Error::DimensionMismatch {
                what: "prompt length d*M",
                expected: d * m,
                got: data.len(),
            });
        }
        if !all_finite(&data) {
            return Err(Error::NonFinite("prompt entries"));
        }
        Ok(Self { d, m, data })
    }

    pub fn zeros(d: usize, m: usize) -> Result<Self> {
        Self::new(d, m, vec![0.0; d * m])
    }

    /// Draws every entry from N(0, std^2).
    pub fn random(d: usize, m: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = gaussian_vec(&mut rng, d * m, std);
        Self::new(d, m, data)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Fixed unit-norm embedding of one class name.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding(Vec<f64>);

impl ClassEmbedding {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        Ok(Self(unit(v, "class embedding")?))
    }

    /// Keeps `v` bit-for-bit; it must already have unit norm within 1e-12.
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        if !all_finite(&v) {
            return Err(Error::NonFinite("class embedding"));
        }
        let n = norm(&v);
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::ConfigInvalid(format!("class embedding norm {n} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn random(d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::new(gaussian_vec(rng, d, 1.0))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Image or text feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Feature(Vec<f64>);

impl Feature {
    /// Wraps `v` without normalizing it.
    pub fn from_raw(v: Vec<f64>) -> Result<Self> {
        if !all_finite(&v) {
            return Err(Error::NonFinite("feature entries"));
        }
        Ok(Self(v))
    }

    /// Normalizes `v` to unit length.
    pub fn normalized(v: Vec<f64>) -> Result<Self> {
        Ok(Self(unit(v, "feature")?))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Feature) -> f64 {
        dot(&self.0, &other.0)
    }
}

fn unit(mut v: Vec<f64>, what: &'static str) -> Result<Vec<f64>> {
    if !all_finite(&v) {
        return Err(Error::NonFinite(what));
    }
    let n = norm(&v);
    if n == 0.0 {
        return Err(Error::NonFinite(what));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

pub(crate) fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            std * x
        })
        .collect()
}

/// Frozen two-layer text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    seed: u64,
    d: usize,
    m: usize,
    hidden: usize,
    out: usize,
    /// Fixed factor on the class embedding as it enters the first layer.
    class_gain: f64,
    /// hidden x (M+1)d, row-major
    w1: Vec<f64>,
    b1: Vec<f64>,
    /// out x hidden, row-major
    w2: Vec<f64>,
    b2: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
struct Forward {
    hidden: Vec<f64>,
    raw_norm: f64,
    feature: Vec<f64>,
}

impl Encoder {
    /// Draws all weights and biases from N(0, 1/fan_in) with a ChaCha8 stream
    /// seeded by `seed`, in the order W1, b1, W2, b2.
    pub fn build(seed: u64, d: usize, m: usize, hidden: usize, out: usize) -> Result<Self> {
        Self::build_with_class_gain(seed, d, m, hidden, out, 1.0)
    }

    /// Same weights as [`Encoder::build`], but the class embedding is scaled
    /// by `class_gain` before the first layer. With unit-norm class embeddings
    /// and N(0, 1/fan_in) weights the class signal is otherwise too weak to
    /// give different classes different hidden-unit patterns.
    pub fn build_with_class_gain(
        seed: u64,
        d: usize,
        m: usize,
        hidden: usize,
        out: usize,
        class_gain: f64,
    ) -> Result<Self> {
        if !class_gain.is_finite() {
            return Err(Error::NonFinite("class gain"));
        }
        for (v, name) in [
            (d, "token dimension d"),
            (m, "token count M"),
            (hidden, "hidden width H"),
            (out, "feature dimension D"),
        ] {
            if v == 0 {
                return Err(Error::ZeroDimension(name));
            }
        }
        let input = (m + 1) * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = (1.0 / input as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        let w1 = gaussian_vec(&mut rng, hidden * input, s1);
        let b1 = gaussian_vec(&mut rng, hidden, s1);
        let w2 = gaussian_vec(&mut rng, out * hidden, s2);
        let b2 = gaussian_vec(&mut rng, out, s2);
        Ok(Self {
            seed,
            d,
            m,
            hidden,
            out,
            class_gain,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn class_gain(&self) -> f64 {
        self.class_gain
    }

    /// Whitespace-free identifier of the construction arguments.
    pub fn tag(&self) -> String {
        format!(
            "seed={},d={},M={},H={},D={},class_gain={:?}",
            self.seed, self.d, self.m, self.hidden, self.out, self.class_gain
        )
    }

    pub fn token_dim(&self) -> usize {
        self.d
    }

    pub fn token_count(&self) -> usize {
        self.m
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn feature_dim(&self) -> usize {
        self.out
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// All parameters concatenated as W1, b1, W2, b2.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        p.extend_from_slice(&self.w1);
        p.extend_from_slice(&self.b1);
        p.extend_from_slice(&self.w2);
        p.extend_from_slice(&self.b2);
        p
    }

    fn check(&self, prompt: &PromptState, c: &ClassEmbedding) -> Result<()> {
        if prompt.d != self.d || prompt.m != self.m {
            return Err(Error::DimensionMismatch {
                what: "prompt size d*M",
                expected: self.d * self.m,
                got: prompt.d * prompt.m,
            });
        }
        if c.dim() != self.d {
            return Err(Error::DimensionMismatch {
                what: "class embedding dimension",
                expected: self.d,
                got: c.dim(),
            });
        }
        Ok(())
    }

    fn forward(&self, prompt: &[f64], c: &[f64]) -> Forward {
        let input = (self.m + 1) * self.d;
        let split = self.m * self.d;
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|k| {
                let row = &self.w1[k * input..(k + 1) * input];
                let a = dot(&row[..split], prompt) + self.class_gain * dot(&row[split..], c) + self.b1[k];
                a.tanh()
            })
            .collect();
        let raw: Vec<f64> = (0..self.out)
            .map(|j| dot(&self.w2[j * self.hidden..(j + 1) * self.hidden], &hidden) + self.b2[j])
            .collect();
        let raw_norm = norm(&raw);
        let feature = raw.iter().map(|x| x / raw_norm).collect();
        Forward {
            hidden,
            raw_norm,
            feature,
        }
    }

    /// Accumulates `d loss / d prompt` into `grad` given `d loss / d feature`.
    fn backward(&self, fwd: &Forward, feature_grad: &[f64], grad: &mut [f64]) {
        let w = &fwd.feature;
        let radial = dot(w, feature_grad);
        // (I - w w^T) / |o|
        let raw_grad: Vec<f64> = feature_grad
            .iter()
            .zip(w)
            .map(|(g, wi)| (g - wi * radial) / fwd.raw_norm)
            .collect();
        let input = (self.m + 1) * self.d;
        let split = self.m * self.d;
        for k in 0..self.hidden {
            let back: f64 = (0..self.out).map(|j| self.w2[j * self.hidden + k] * raw_grad[j]).sum();
            let h = fwd.hidden[k];
            let pre = back * (1.0 - h * h);
            if pre != 0.0 {
                axpy(pre, &self.w1[k * input..k * input + split], grad);
            }
        }
    }

    /// Unit-norm text feature for `c` under `prompt`.
    pub fn encode_text(&self, prompt: &PromptState, c: &ClassEmbedding) -> Result<Feature> {
        self.check(prompt, c)?;
        Ok(Feature(self.forward(&prompt.data, c.as_slice()).feature))
    }

    /// Text features for a list of classes.
    pub fn encode_all(&self, prompt: &PromptState, classes: &[ClassEmbedding]) -> Result<Vec<Feature>> {
        classes.iter().map(|c| self.encode_text(prompt, c)).collect()
    }

    /// Jacobian of `encode_text` with respect to the flattened prompt, one row
    /// per feature coordinate.
    pub fn text_jacobian(&self, prompt: &PromptState, c: &ClassEmbedding) -> Result<Vec<Vec<f64>>> {
        self.check(prompt, c)?;
        let fwd = self.forward(&prompt.data, c.as_slice());
        Ok((0..self.out)
            .map(|j| {
                let mut e = vec![0.0; self.out];
                e[j] = 1.0;
                let mut row = vec![0.0; self.d * self.m];
                self.backward(&fwd, &e, &mut row);
                row
            })
            .collect())
    }
}

/// Softmax over `z . w_i / tau`.
pub fn predict_proba(z: &Feature, text_feats: &[Feature], tau: f64) -> Result<Vec<f64>> {
    if text_feats.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    let logits: Vec<f64> = text_feats.iter().map(|w| z.dot(w) / tau).collect();
    Ok(softmax(&logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// A labeled image feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub feature: Feature,
    pub label: usize,
}

/// Loss value with its gradient with respect to the flattened prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Cross-entropy pass that also reports how many samples were classified
/// correctly, so the trainer gets train accuracy for free.
#[derive(Debug, Clone)]
pub(crate) struct CePass {
    pub value: LossGrad,
    pub correct: usize,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTau(tau));
    }
    Ok(())
}

/// How per-sample cross-entropy terms are combined over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::ConfigInvalid(format!("unknown reduction {s:?} (sum|mean)"))),
        }
    }
}

pub(crate) fn ce_pass(
    enc: &Encoder,
    prompt: &PromptState,
    classes: &[ClassEmbedding],
    batch: &[Sample],
    tau: f64,
    reduction: Reduction,
) -> Result<CePass> {
    check_tau(tau)?;
    if classes.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in batch {
        if s.label >= classes.len() {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: classes.len(),
            });
        }
        if s.feature.dim() != enc.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "image feature dimension",
                expected: enc.feature_dim(),
                got: s.feature.dim(),
            });
        }
    }
    for c in classes {
        enc.check(prompt, c)?;
    }
    let fwds: Vec<Forward> = classes
        .iter()
        .map(|c| enc.forward(&prompt.data, c.as_slice()))
        .collect();
    let dim = enc.feature_dim();
    let mut feature_grads = vec![vec![0.0; dim]; classes.len()];
    let mut loss = 0.0;
    let mut correct = 0;
    for s in batch {
        let z = s.feature.as_slice();
        let logits: Vec<f64> = fwds.iter().map(|f| dot(z, &f.feature) / tau).collect();
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        loss += lse - logits[s.label];
        if argmax(&logits) == s.label {
            correct += 1;
        }
        // d loss / d logit_k = p_k - y_k; d logit_k / d w_k = z / tau
        for (k, g) in feature_grads.iter_mut().enumerate() {
            let p = (logits[k] - lse).exp();
            let coeff = (p - if k == s.label { 1.0 } else { 0.0 }) / tau;
            axpy(coeff, z, g);
        }
    }
    if reduction == Reduction::Mean {
        let n = batch.len() as f64;
        loss /= n;
        feature_grads.iter_mut().flatten().for_each(|x| *x /= n);
    }
    let mut grad = vec![0.0; prompt.data.len()];
    for (f, g) in fwds.iter().zip(&feature_grads) {
        enc.backward(f, g, &mut grad);
    }
    Ok(CePass {
        value: LossGrad { loss, grad },
        correct,
    })
}

/// Summed cross-entropy of the batch under the prompt, with its exact gradient.
pub fn ce_loss_and_grad(
    enc: &Encoder,
    prompt: &PromptState,
    classes: &[ClassEmbedding],
    batch: &[Sample],
    tau: f64,
) -> Result<LossGrad> {
    Ok(ce_pass(enc, prompt, classes, batch, tau, Reduction::Sum)?.value)
}

/// Mean cosine distance `1 - w_i . w*_i` between the prompt's text features
/// and the frozen teacher features. Teachers receive no gradient.
pub fn nfl_loss_and_grad(
    enc: &Encoder,
    prompt: &PromptState,
    target_classes: &[ClassEmbedding],
    teacher: &[Feature],
) -> Result<LossGrad> {
    if target_classes.len() != teacher.len() {
        return Err(Error::LengthMismatch {
            targets: target_classes.len(),
            teachers: teacher.len(),
        });
    }
    if target_classes.is_empty() {
        return Err(Error::EmptyTargets);
    }
    let n = target_classes.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; prompt.data.len()];
    for (c, t) in target_classes.iter().zip(teacher) {
        enc.check(prompt, c)?;
        if t.dim() != enc.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "teacher feature dimension",
                expected: enc.feature_dim(),
                got: t.dim(),
            });
        }
        let fwd = enc.forward(&prompt.data, c.as_slice());
        loss += 1.0 - dot(&fwd.feature, t.as_slice());
        let fg: Vec<f64> = t.as_slice().iter().map(|x| -x / n).collect();
        enc.backward(&fwd, &fg, &mut grad);
    }
    Ok(LossGrad { loss: loss / n, grad })
}

/// Inputs of the cross-entropy term.
#[derive(Debug, Clone, Copy)]
pub struct CeInputs<'a> {
    pub classes: &'a [ClassEmbedding],
    pub batch: &'a [Sample],
    pub tau: f64,
    pub reduction: Reduction,
}

/// Inputs of the feature-similarity term.
#[derive(Debug, Clone, Copy)]
pub struct NflInputs<'a> {
    pub targets: &'a [ClassEmbedding],
    pub teacher: &'a [Feature],
}

/// `L_ce + lambda * L_cs` and its gradient.
///
/// With `lambda == 0` the cross-entropy result is returned untouched.
pub fn total_loss_and_grad(
    enc: &Encoder,
    prompt: &PromptState,
    ce: CeInputs<'_>,
    nfl: NflInputs<'_>,
    lambda: f64,
) -> Result<LossGrad> {
    if !(lambda >= 0.0) {
        return Err(Error::NegativeLambda(lambda));
    }
    let mut out = ce_pass(enc, prompt, ce.classes, ce.batch, ce.tau, ce.reduction)?.value;
    let cs = nfl_loss_and_grad(enc, prompt, nfl.targets, nfl.teacher)?;
    if lambda != 0.0 {
        out.loss += lambda * cs.loss;
        axpy(lambda, &cs.grad, &mut out.grad);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup(seed: u64, d: usize, m: usize, h: usize, out: usize) -> (Encoder, PromptState) {
        let enc = Encoder::build(seed, d, m, h, out).unwrap();
        let prompt = PromptState::random(d, m, 0.5, seed + 1000).unwrap();
        (enc, prompt)
    }

    fn classes(n: usize, d: usize, seed: u64) -> Vec<ClassEmbedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| ClassEmbedding::random(d, &mut rng).unwrap()).collect()
    }

    #[test]
    fn build_is_deterministic() {
        let a = Encoder::build(0, 8, 16, 32, 16).unwrap();
        let b = Encoder::build(0, 8, 16, 32, 16).unwrap();
        let c = Encoder::build(1, 8, 16, 32, 16).unwrap();
        let pa = a.parameters();
        assert!(pa.iter().zip(b.parameters()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(pa.iter().zip(c.parameters()).any(|(x, y)| x != &y));
        // ((16 + 1) * 8) * 32 + 32 + 32 * 16 + 16
        assert_eq!(a.param_count(), 4912);
        assert_eq!(pa.len(), 4912);
    }

    #[test]
    fn build_rejects_zero_dims() {
        assert!(matches!(Encoder::build(0, 0, 16, 32, 16), Err(Error::ZeroDimension(_))));
        assert!(matches!(Encoder::build(0, 8, 16, 32, 0), Err(Error::ZeroDimension(_))));
    }

    #[test]
    fn encode_checks_dimensions() {
        let (enc, _) = setup(0, 4, 3, 8, 6);
        let bad = PromptState::zeros(4, 2).unwrap();
        let c = classes(1, 4, 0);
        assert!(matches!(
            enc.encode_text(&bad, &c[0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn encode_is_pure_and_unit() {
        let (enc, prompt) = setup(3, 4, 3, 8, 6);
        let c = classes(1, 4, 9);
        let a = enc.encode_text(&prompt, &c[0]).unwrap();
        let b = enc.encode_text(&prompt, &c[0]).unwrap();
        assert_eq!(a, b);
        assert!((norm(a.as_slice()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn proba_examples() {
        let z = Feature::normalized(vec![1.0, 0.0]).unwrap();
        let one = predict_proba(&z, std::slice::from_ref(&z), 1.0).unwrap();
        assert_eq!(one, vec![1.0]);
        let e1 = z.clone();
        let e2 = Feature::normalized(vec![0.0, 1.0]).unwrap();
        let p = predict_proba(&z, &[e1, e2.clone()], 1.0).unwrap();
        assert!((p[0] - 0.731059).abs() < 1e-6 && (p[1] - 0.268941).abs() < 1e-6);
        let p = predict_proba(&z, &[e2.clone(), e2.clone(), e2], 1.0).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert!(matches!(predict_proba(&z, &[], 1.0), Err(Error::EmptyClassSet)));
        assert!(matches!(
            predict_proba(&z, std::slice::from_ref(&z), 0.0),
            Err(Error::NonPositiveTau(_))
        ));
    }

    #[test]
    fn ce_uniform_case_is_ln_c() {
        // Four classes sharing one embedding give four identical logits.
        let (enc, prompt) = setup(2, 4, 3, 8, 6);
        let c = classes(1, 4, 7).remove(0);
        let cls = vec![c; 4];
        let z = Feature::normalized(vec![0.2, -0.4, 1.0, 0.3, 0.0, -0.7]).unwrap();
        let batch = [Sample { feature: z, label: 2 }];
        let lg = ce_loss_and_grad(&enc, &prompt, &cls, &batch, 1.0).unwrap();
        assert!((lg.loss - 4f64.ln()).abs() < 1e-12);
        assert!((lg.loss - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn logit_level_gradient_example() {
        // logits (1, 0), label 0: loss = ln(1 + e^-1), dL/dlogits = p - y.
        let p = softmax(&[1.0, 0.0]);
        let loss = -p[0].ln();
        assert!((loss - 0.313262).abs() < 1e-6);
        assert!((p[0] - 1.0 + 0.268941).abs() < 1e-6);
        assert!((p[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_bad_batches() {
        let (enc, prompt) = setup(0, 4, 3, 8, 6);
        let cls = classes(2, 4, 0);
        assert!(matches!(
            ce_loss_and_grad(&enc, &prompt, &cls, &[], 1.0),
            Err(Error::EmptyBatch)
        ));
        let z = Feature::normalized(vec![1.0; 6]).unwrap();
        let batch = [Sample { feature: z, label: 2 }];
        assert!(matches!(
            ce_loss_and_grad(&enc, &prompt, &cls, &batch, 1.0),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn nfl_perfect_and_antipodal() {
        let (enc, prompt) = setup(4, 4, 3, 8, 6);
        let cls = classes(3, 4, 2);
        let feats = enc.encode_all(&prompt, &cls).unwrap();
        let zero = nfl_loss_and_grad(&enc, &prompt, &cls, &feats).unwrap();
        assert!(zero.loss.abs() < 1e-12);
        assert!(zero.grad.iter().all(|g| g.abs() < 1e-10));
        let flipped: Vec<Feature> = feats
            .iter()
            .map(|f| Feature::from_raw(f.as_slice().iter().map(|x| -x).collect()).unwrap())
            .collect();
        let two = nfl_loss_and_grad(&enc, &prompt, &cls, &flipped).unwrap();
        assert!((two.loss - 2.0).abs() < 1e-12);
        assert!(matches!(
            nfl_loss_and_grad(&enc, &prompt, &cls, &feats[..2]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            nfl_loss_and_grad(&enc, &prompt, &[], &[]),
            Err(Error::EmptyTargets)
        ));
    }

    #[test]
    fn total_with_zero_lambda_is_ce() {
        let (enc, prompt) = setup(5, 4, 3, 8, 6);
        let cls = classes(3, 4, 3);
        let teach = enc.encode_all(&PromptState::zeros(4, 3).unwrap(), &cls).unwrap();
        let z = Feature::normalized(vec![0.3, -1.0, 0.2, 0.0, 0.5, 0.1]).unwrap();
        let batch = [Sample { feature: z, label: 1 }];
        let ce = CeInputs {
            classes: &cls,
            batch: &batch,
            tau: 0.5,
            reduction: Reduction::Sum,
        };
        let nfl = NflInputs {
            targets: &cls,
            teacher: &teach,
        };
        let plain = ce_loss_and_grad(&enc, &prompt, &cls, &batch, 0.5).unwrap();
        let total = total_loss_and_grad(&enc, &prompt, ce, nfl, 0.0).unwrap();
        assert_eq!(plain.loss.to_bits(), total.loss.to_bits());
        assert!(plain
            .grad
            .iter()
            .zip(&total.grad)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(
            total_loss_and_grad(&enc, &prompt, ce, nfl, -1.0),
            Err(Error::NegativeLambda(_))
        ));
        let two = total_loss_and_grad(&enc, &prompt, ce, nfl, 2.0).unwrap();
        let cs = nfl_loss_and_grad(&enc, &prompt, &cls, &teach).unwrap();
        assert!((two.loss - (plain.loss + 2.0 * cs.loss)).abs() < 1e-12);
    }

    #[test]
    fn mean_reduction_divides_by_batch_size() {
        let (enc, prompt) = setup(6, 4, 3, 8, 6);
        let cls = classes(3, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch: Vec<Sample> = (0..5)
            .map(|i| Sample {
                feature: Feature::normalized(gaussian_vec(&mut rng, 6, 1.0)).unwrap(),
                label: i % 3,
            })
            .collect();
        let sum = ce_pass(&enc, &prompt, &cls, &batch, 0.7, Reduction::Sum).unwrap();
        let mean = ce_pass(&enc, &prompt, &cls, &batch, 0.7, Reduction::Mean).unwrap();
        assert!((mean.value.loss * 5.0 - sum.value.loss).abs() < 1e-12);
        for (m, s) in mean.value.grad.iter().zip(&sum.value.grad) {
            assert!((m * 5.0 - s).abs() < 1e-12);
        }
        assert_eq!(mean.correct, sum.correct);
        assert_eq!("mean".parse::<Reduction>().unwrap(), Reduction::Mean);
        assert!("avg".parse::<Reduction>().is_err());
    }

    #[test]
    fn unit_class_gain_is_plain_build() {
        let a = Encoder::build(4, 3, 2, 5, 4).unwrap();
        let b = Encoder::build_with_class_gain(4, 3, 2, 5, 4, 1.0).unwrap();
        assert_eq!(a, b);
        let c = Encoder::build_with_class_gain(4, 3, 2, 5, 4, 10.0).unwrap();
        assert_eq!(a.parameters(), c.parameters());
        let p = PromptState::random(3, 2, 0.3, 1).unwrap();
        let e = ClassEmbedding::new(vec![1.0, 2.0, 0.5]).unwrap();
        assert_ne!(a.encode_text(&p, &e).unwrap(), c.encode_text(&p, &e).unwrap());
        assert!(Encoder::build_with_class_gain(4, 3, 2, 5, 4, f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(
            sims in proptest::collection::vec(-5.0f64..5.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let a = softmax(&sims);
            let shifted: Vec<f64> = sims.iter().map(|s| s + shift).collect();
            let b = softmax(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(a.iter().all(|&p| p > 0.0));
        }

        #[test]
        fn text_feature_is_unit(seed in 0u64..500, scale in 0.0f64..20.0) {
            let enc = Encoder::build(seed, 3, 2, 5, 4).unwrap();
            let prompt = PromptState::random(3, 2, scale, seed).unwrap();
            let c = classes(1, 3, seed)[0].clone();
            let w = enc.encode_text(&prompt, &c).unwrap();
            prop_assert!((norm(w.as_slice()) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn losses_stay_in_range(seed in 0u64..500) {
            let (enc, prompt) = setup(seed, 3, 2, 5, 4);
            let cls = classes(3, 3, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let teach: Vec<Feature> = (0..3)
                .map(|_| Feature::normalized(gaussian_vec(&mut rng, 4, 1.0)).unwrap())
                .collect();
            let cs = nfl_loss_and_grad(&enc, &prompt, &cls, &teach).unwrap();
            prop_assert!((0.0..=2.0).contains(&cs.loss));
            let batch: Vec<Sample> = teach
                .iter()
                .enumerate()
                .map(|(i, f)| Sample { feature: f.clone(), label: i })
                .collect();
            let ce = ce_loss_and_grad(&enc, &prompt, &cls, &batch, 0.1).unwrap();
            prop_assert!(ce.loss >= 0.0);
        }
    }
}
