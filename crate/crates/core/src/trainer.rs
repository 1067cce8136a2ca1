//! Full-batch gradient descent on the prompt, optionally confined to a PCA
//! subspace, plus the three-stage subspace pipeline and its diagnostics.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::linalg::{axpy, norm};
use crate::model::{ce_pass, nfl_loss_and_grad, ClassEmbedding, Encoder, Feature, PromptState, Reduction, Sample};
use crate::subspace::{leading_alignment, pca_fit, project, Subspace};
use crate::synth::SyntheticTask;
use crate::textio;
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NflTarget {
    None,
    Base,
    Novel,
    Whole,
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Coop,
    Projected,
    SubptPipeline,
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(Error::ConfigInvalid(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), s
                    ))),
                }
            }
        }
    };
}

text_enum!(LrSchedule { Constant => "constant", Cosine => "cosine" });
text_enum!(NflTarget { None => "none", Base => "base", Novel => "novel", Whole => "whole", Pool => "pool" });
text_enum!(Mode { Coop => "coop", Projected => "projected", SubptPipeline => "subpt" });

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub tokens: usize,
    pub token_dim: usize,
    pub hidden: usize,
    pub class_gain: f64,
    pub encoder_seed: u64,
    pub init_std: f64,
    pub tau: f64,
    pub ce_reduction: Reduction,
    pub lambda: f64,
    pub nfl_target: NflTarget,
    pub t_early: usize,
    pub r: usize,
    pub mode: Mode,
    /// Seeds the prompt initialization.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 2.5,
            lr_schedule: LrSchedule::Constant,
            momentum: 0.85,
            tokens: 16,
            token_dim: 8,
            hidden: 128,
            class_gain: 15.0,
            encoder_seed: 0,
            init_std: 0.02,
            tau: 0.03,
            ce_reduction: Reduction::Mean,
            lambda: 1.0,
            nfl_target: NflTarget::None,
            t_early: 5,
            r: 2,
            mode: Mode::Coop,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be finite and >= 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::NegativeLambda(self.lambda));
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTau(self.tau));
        }
        if !(self.init_std >= 0.0) {
            return bad(format!("init_std {} must be >= 0", self.init_std));
        }
        if !self.class_gain.is_finite() {
            return Err(Error::NonFinite("class_gain"));
        }
        if self.tokens == 0 || self.token_dim == 0 || self.hidden == 0 {
            return Err(Error::ZeroDimension("tokens, token_dim and hidden"));
        }
        if self.mode != Mode::Coop {
            if self.r == 0 || self.t_early < 2 || self.r > self.t_early - 1 {
                return bad(format!(
                    "need 1 <= r <= t_early - 1 (r = {}, t_early = {})",
                    self.r, self.t_early
                ));
            }
            if self.t_early > self.epochs {
                return bad(format!("t_early {} exceeds epochs {}", self.t_early, self.epochs));
            }
        }
        Ok(())
    }

    pub fn param_dim(&self) -> usize {
        self.tokens * self.token_dim
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("lr", textio::fmt_f64(self.lr)),
            ("lr_schedule", self.lr_schedule.to_string()),
            ("momentum", textio::fmt_f64(self.momentum)),
            ("tokens", self.tokens.to_string()),
            ("token_dim", self.token_dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("class_gain", textio::fmt_f64(self.class_gain)),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("init_std", textio::fmt_f64(self.init_std)),
            ("tau", textio::fmt_f64(self.tau)),
            ("ce_reduction", self.ce_reduction.to_string()),
            ("lambda", textio::fmt_f64(self.lambda)),
            ("nfl_target", self.nfl_target.to_string()),
            ("t_early", self.t_early.to_string()),
            ("r", self.r.to_string()),
            ("mode", self.mode.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its config-file key; `Ok(false)` for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::ConfigInvalid(format!("bad value {v:?} for {key}")))
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_schedule" => self.lr_schedule = value.parse()?,
            "momentum" => self.momentum = num(key, value)?,
            "tokens" | "M" => self.tokens = num(key, value)?,
            "token_dim" | "d" => self.token_dim = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "class_gain" => self.class_gain = num(key, value)?,
            "encoder_seed" => self.encoder_seed = num(key, value)?,
            "init_std" => self.init_std = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "ce_reduction" => self.ce_reduction = value.parse()?,
            "lambda" => self.lambda = num(key, value)?,
            "nfl_target" => self.nfl_target = value.parse()?,
            "t_early" => self.t_early = num(key, value)?,
            "r" => self.r = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn fingerprint(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Learning rate for the step taken during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = epoch as f64 / self.epochs as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn build_encoder(&self, feature_dim: usize) -> Result<Encoder> {
        Encoder::build_with_class_gain(
            self.encoder_seed,
            self.token_dim,
            self.tokens,
            self.hidden,
            feature_dim,
            self.class_gain,
        )
    }

    pub fn init_prompt(&self) -> Result<PromptState> {
        PromptState::random(self.token_dim, self.tokens, self.init_std, self.seed)
    }
}

/// One row of the metrics CSV.
///
/// `train_loss`, `train_acc`, the gradient norms and `nfl_loss` are measured
/// at the prompt the epoch's step starts from; the test accuracies at the
/// checkpoint it ends on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub base_test_acc: f64,
    pub novel_test_acc: f64,
    pub grad_norm_raw: f64,
    pub grad_norm_projected: f64,
    pub nfl_loss: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,train_loss,train_acc,base_test_acc,novel_test_acc,grad_norm_raw,grad_norm_projected,nfl_loss";

/// Formats with 9 significant digits.
fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            sig9(self.train_loss),
            sig9(self.train_acc),
            sig9(self.base_test_acc),
            sig9(self.novel_test_acc),
            sig9(self.grad_norm_raw),
            sig9(self.grad_norm_projected),
            sig9(self.nfl_loss)
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::bad_format("metrics", format!("expected 8 fields in {line:?}")));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|_| Error::bad_format("metrics", format!("bad number {:?}", f[i])))
        };
        Ok(Self {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::bad_format("metrics", format!("bad epoch {:?}", f[0])))?,
            train_loss: num(1)?,
            train_acc: num(2)?,
            base_test_acc: num(3)?,
            novel_test_acc: num(4)?,
            grad_norm_raw: num(5)?,
            grad_norm_projected: num(6)?,
            nfl_loss: num(7)?,
        })
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::bad_format("metrics", "missing metrics header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(EpochMetrics::parse_csv_row)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub trajectory: Trajectory,
    pub metrics: Vec<EpochMetrics>,
    pub final_prompt: PromptState,
    pub subspace: Option<Subspace>,
}

/// Fraction of `split` whose highest-scoring class matches its label.
pub fn evaluate(enc: &Encoder, prompt: &PromptState, classes: &[ClassEmbedding], split: &[Sample]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let feats = enc.encode_all(prompt, classes)?;
    accuracy(&feats, split)
}

fn accuracy(text_feats: &[Feature], split: &[Sample]) -> Result<f64> {
    if text_feats.is_empty() {
        return Err(Error::EmptyClassSet);
    }
    let mut correct = 0usize;
    for s in split {
        if s.label >= text_feats.len() {
            return Err(Error::LabelOutOfRange {
                label: s.label,
                classes: text_feats.len(),
            });
        }
        let scores: Vec<f64> = text_feats.iter().map(|w| s.feature.dot(w)).collect();
        if crate::model::argmax(&scores) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Target classes and teacher features of the regularizer, if any.
fn nfl_targets(task: &SyntheticTask, target: NflTarget) -> Option<(Vec<ClassEmbedding>, Vec<Feature>)> {
    let (classes, teacher): (Vec<ClassEmbedding>, Vec<Feature>) = match target {
        NflTarget::None => return None,
        NflTarget::Base => (task.base_classes.clone(), task.base_teacher().to_vec()),
        NflTarget::Novel => (task.novel_classes.clone(), task.novel_teacher().to_vec()),
        NflTarget::Whole => (
            task.base_classes.iter().chain(&task.novel_classes).cloned().collect(),
            task.base_teacher()
                .iter()
                .chain(task.novel_teacher())
                .cloned()
                .collect(),
        ),
        NflTarget::Pool => (task.pool_classes.clone(), task.pool_teacher().to_vec()),
    };
    Some((classes, teacher))
}

fn check_dims(cfg: &TrainConfig, task: &SyntheticTask, enc: &Encoder) -> Result<()> {
    let pairs = [
        ("encoder token dimension", cfg.token_dim, enc.token_dim()),
        ("encoder token count", cfg.tokens, enc.token_count()),
        ("task class-embedding dimension", enc.token_dim(), task.embed_dim()),
        ("task feature dimension", enc.feature_dim(), task.feature_dim()),
    ];
    for (what, expected, got) in pairs {
        if expected != got {
            return Err(Error::DimensionMismatch { what, expected, got });
        }
    }
    if let Some(tag) = &task.aligned_to {
        if *tag != enc.tag() {
            return Err(Error::ConfigInvalid(format!(
                "task was generated for encoder {tag}, got {}",
                enc.tag()
            )));
        }
    }
    Ok(())
}

/// Runs `cfg.epochs` full-batch steps from the seeded initialization.
///
/// `sub` must be given exactly when `cfg.mode` is [`Mode::Projected`].
pub fn train(cfg: &TrainConfig, task: &SyntheticTask, enc: &Encoder, sub: Option<&Subspace>) -> Result<RunResult> {
    cfg.validate()?;
    match (cfg.mode, sub) {
        (Mode::Coop, None) | (Mode::Projected, Some(_)) => {}
        (Mode::Coop, Some(_)) => return Err(Error::ConfigInvalid("mode coop takes no subspace".into())),
        (Mode::Projected, None) => return Err(Error::ConfigInvalid("mode projected needs a subspace".into())),
        (Mode::SubptPipeline, _) => return Err(Error::ConfigInvalid("mode subpt runs through subpt_pipeline".into())),
    }
    train_from(cfg, task, enc, sub, cfg.init_prompt()?)
}

fn train_from(
    cfg: &TrainConfig,
    task: &SyntheticTask,
    enc: &Encoder,
    sub: Option<&Subspace>,
    init: PromptState,
) -> Result<RunResult> {
    check_dims(cfg, task, enc)?;
    if let Some(s) = sub {
        if s.param_dim() != cfg.param_dim() {
            return Err(Error::DimensionMismatch {
                what: "subspace dimension",
                expected: cfg.param_dim(),
                got: s.param_dim(),
            });
        }
    }
    let nfl = nfl_targets(task, cfg.nfl_target);
    let mut traj = Trajectory::new(cfg.param_dim(), cfg.fingerprint())?;
    traj.record(init.as_slice())?;
    let mut params = init.into_vec();
    let mut velocity = vec![0.0; params.len()];
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let prompt = PromptState::new(cfg.token_dim, cfg.tokens, params.clone())?;
        let ce = ce_pass(enc, &prompt, &task.base_classes, &task.train, cfg.tau, cfg.ce_reduction)?;
        let mut loss = ce.value.loss;
        let mut grad = ce.value.grad;
        let mut nfl_loss = 0.0;
        if let Some((classes, teacher)) = &nfl {
            let cs = nfl_loss_and_grad(enc, &prompt, classes, teacher)?;
            nfl_loss = cs.loss;
            if cfg.lambda != 0.0 {
                loss += cfg.lambda * cs.loss;
                axpy(cfg.lambda, &cs.grad, &mut grad);
            }
        }
        let grad_norm_raw = norm(&grad);
        let step = match sub {
            Some(s) => project(s, &grad)?,
            None => grad,
        };
        let grad_norm_projected = norm(&step);
        let lr = cfg.lr_at(epoch);
        if cfg.momentum == 0.0 {
            axpy(-lr, &step, &mut params);
        } else {
            for (v, g) in velocity.iter_mut().zip(&step) {
                *v = cfg.momentum * *v + g;
            }
            axpy(-lr, &velocity, &mut params);
        }
        traj.record(params.as_slice())?;

        let next = PromptState::new(cfg.token_dim, cfg.tokens, params.clone())?;
        metrics.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss,
            train_acc: ce.correct as f64 / task.train.len() as f64,
            base_test_acc: evaluate(enc, &next, &task.base_classes, &task.base_test)?,
            novel_test_acc: evaluate(enc, &next, &task.novel_classes, &task.novel_test)?,
            grad_norm_raw,
            grad_norm_projected,
            nfl_loss,
        });
    }
    Ok(RunResult {
        trajectory: traj,
        metrics,
        final_prompt: PromptState::new(cfg.token_dim, cfg.tokens, params)?,
        subspace: sub.cloned(),
    })
}

/// Output of the three-stage pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub stage1: RunResult,
    pub subspace: Subspace,
    pub stage3: RunResult,
}

/// Plain run, PCA over epochs `1..=t_early` with rank `r`, then a projected
/// rerun from the plain run's initial checkpoint.
pub fn subpt_pipeline(cfg: &TrainConfig, task: &SyntheticTask, enc: &Encoder) -> Result<PipelineResult> {
    cfg.validate()?;
    if cfg.mode != Mode::SubptPipeline {
        return Err(Error::ConfigInvalid(format!(
            "subpt_pipeline needs mode subpt, got {}",
            cfg.mode
        )));
    }
    let plain = TrainConfig {
        mode: Mode::Coop,
        ..cfg.clone()
    };
    let stage1 = train(&plain, task, enc, None)?;
    let subspace = pca_fit(&stage1.trajectory, (1, cfg.t_early), cfg.r)?;
    let init = PromptState::new(
        cfg.token_dim,
        cfg.tokens,
        stage1
            .trajectory
            .row(0)
            .expect("trajectory has its initial row")
            .to_vec(),
    )?;
    let projected = TrainConfig {
        mode: Mode::Projected,
        ..cfg.clone()
    };
    let stage3 = train_from(&projected, task, enc, Some(&subspace), init)?;
    Ok(PipelineResult {
        stage1,
        subspace,
        stage3,
    })
}

/// Leading-direction alignment between two windows of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityReport {
    pub alignment: f64,
    pub early_ratios: Vec<f64>,
    pub later_ratios: Vec<f64>,
}

pub fn analyze_orthogonality(
    traj: &Trajectory,
    early: (usize, usize),
    later: (usize, usize),
    r: usize,
) -> Result<OrthogonalityReport> {
    let a = pca_fit(traj, early, r)?;
    let b = pca_fit(traj, later, r)?;
    Ok(OrthogonalityReport {
        alignment: leading_alignment(&a, &b)?,
        early_ratios: a.variance_ratios().to_vec(),
        later_ratios: b.variance_ratios().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_task, SynthConfig};

    fn tiny() -> (TrainConfig, SyntheticTask, Encoder) {
        let task = generate_task(&SynthConfig {
            n_pool: 4,
            test_per_class: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 12,
            tokens: 4,
            hidden: 16,
            ..TrainConfig::default()
        };
        let enc = cfg.build_encoder(task.feature_dim()).unwrap();
        (cfg, task, enc)
    }

    #[test]
    fn rejects_task_aligned_to_another_encoder() {
        let (cfg, task, enc) = tiny();
        let aligned = crate::synth::generate_task_for(&task.config, &enc).unwrap();
        assert!(train(&cfg, &aligned, &enc, None).is_ok());
        let other = TrainConfig {
            encoder_seed: 7,
            ..cfg.clone()
        };
        let enc7 = other.build_encoder(task.feature_dim()).unwrap();
        assert!(matches!(
            train(&other, &aligned, &enc7, None),
            Err(Error::ConfigInvalid(_))
        ));
    }

    #[test]
    fn zero_lr_keeps_initialization() {
        let (cfg, task, enc) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            ..cfg
        };
        let run = train(&cfg, &task, &enc, None).unwrap();
        let v0 = cfg.init_prompt().unwrap();
        assert_eq!(run.final_prompt, v0);
        assert_eq!(run.trajectory.rows(), &[v0.as_slice().to_vec(), v0.as_slice().to_vec()]);
        assert_eq!(run.metrics.len(), 1);
    }

    #[test]
    fn config_validation() {
        let (cfg, task, enc) = tiny();
        for bad in [
            TrainConfig {
                epochs: 0,
                ..cfg.clone()
            },
            TrainConfig {
                momentum: 1.0,
                ..cfg.clone()
            },
            TrainConfig {
                mode: Mode::Projected,
                r: 5,
                t_early: 5,
                ..cfg.clone()
            },
            TrainConfig {
                mode: Mode::Projected,
                r: 2,
                t_early: 20,
                ..cfg.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        assert!(matches!(
            train(
                &TrainConfig {
                    lambda: -1.0,
                    ..cfg.clone()
                },
                &task,
                &enc,
                None
            ),
            Err(Error::NegativeLambda(_))
        ));
        let proj = TrainConfig {
            mode: Mode::Projected,
            ..cfg.clone()
        };
        assert!(matches!(train(&proj, &task, &enc, None), Err(Error::ConfigInvalid(_))));
        let wrong = Encoder::build(0, 8, 3, 16, 32).unwrap();
        assert!(matches!(
            train(&cfg, &task, &wrong, None),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 4,
            lr: 1.0,
            lr_schedule: LrSchedule::Cosine,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert!((cfg.lr_at(2) - 0.5).abs() < 1e-15);
        assert!(cfg.lr_at(3) > 0.0);
        let flat = TrainConfig {
            lr_schedule: LrSchedule::Constant,
            ..cfg
        };
        assert_eq!(flat.lr_at(3), 1.0);
    }

    #[test]
    fn evaluate_contracts() {
        let (cfg, task, enc) = tiny();
        let p = cfg.init_prompt().unwrap();
        assert!(matches!(
            evaluate(&enc, &p, &task.base_classes, &[]),
            Err(Error::EmptySplit)
        ));
        let feats = enc.encode_all(&p, &task.base_classes).unwrap();
        let s = Sample {
            feature: feats[3].clone(),
            label: 3,
        };
        assert_eq!(accuracy(&feats, &[s]).unwrap(), 1.0);
        let acc = evaluate(&enc, &p, &task.base_classes, &task.base_test).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn metrics_csv_round_trip() {
        let (cfg, task, enc) = tiny();
        let run = train(&cfg, &task, &enc, None).unwrap();
        let text = metrics_csv(&run.metrics);
        assert!(text.starts_with(METRICS_HEADER));
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back.len(), cfg.epochs);
        assert_eq!(metrics_csv(&back), text);
    }

    #[test]
    fn momentum_keeps_projected_runs_in_span() {
        let (cfg, task, enc) = tiny();
        let cfg = TrainConfig {
            mode: Mode::SubptPipeline,
            momentum: 0.85,
            t_early: 6,
            r: 3,
            ..cfg
        };
        let out = subpt_pipeline(&cfg, &task, &enc).unwrap();
        let v0 = out.stage3.trajectory.row(0).unwrap().to_vec();
        for row in out.stage3.trajectory.rows() {
            let d: Vec<f64> = row.iter().zip(&v0).map(|(a, b)| a - b).collect();
            let p = project(&out.subspace, &d).unwrap();
            let resid: f64 = d.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(resid <= 1e-8 * norm(&d).max(1.0));
        }
    }

    #[test]
    fn config_keys_round_trip() {
        let cfg = TrainConfig {
            lr: 0.125,
            mode: Mode::SubptPipeline,
            nfl_target: NflTarget::Pool,
            ..TrainConfig::default()
        };
        let mut back = TrainConfig::default();
        for (k, v) in cfg.entries() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("beta", "1").unwrap());
    }
}
