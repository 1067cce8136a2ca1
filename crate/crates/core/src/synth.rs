//! Synthetic few-shot task with a train-only spurious direction per base class.
//!
//! Every base and novel class `i` owns a generalizable unit direction `g_i`;
//! every base class also owns a spurious direction `s_i`. All of them are
//! mutually orthonormal. Samples live directly in feature space:
//!
//! ```text
//! train      normalize(g_i + beta * s_i + sigma * eps)
//! base test  normalize(g_i + sigma * eps)                     (absent)
//!            normalize(g_i + flip * beta * s_i + sigma * eps)  (flipped, flip = +-1)
//! novel test normalize(g_j + sigma * eps)
//! ```
//!
//! With [`generate_task_for`] the generalizable directions are not fully
//! random: each one leans toward the frozen encoder's zero-prompt text
//! feature of its class (weight `prior`), so the untrained prompt already
//! classifies above chance, as a pretrained text encoder would.
//!
//! Teacher features are noisy copies of the generalizable directions. The
//! pool classes used by the `pool` regularization target get random
//! (non-orthogonal) directions, since there are usually more of them than
//! feature dimensions.
//!
//! # File format
//!
//! ```text
//! SUBPT-TASK 1 <n_base> <n_novel> <n_pool> <feature_dim> <embed_dim>
//! # <config as space-separated key=value pairs>
//! # encoder <encoder tag | none>
//! @<section> <rows> <cols>
//! <rows lines>
//! ...
//! ```
//!
//! Sections, in order: `base_classes`, `novel_classes`, `pool_classes`
//! (class embeddings), `generalizable`, `spurious`, `pool_directions`,
//! `train`, `base_test`, `novel_test` (first column is the integer label),
//! `teacher` (base, then novel, then pool).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, orthonormalize, DenseMatrix};
use crate::model::{gaussian_vec, ClassEmbedding, Encoder, Feature, PromptState, Sample};
use crate::textio;

pub const MAGIC: &str = "SUBPT-TASK";

// Independent ChaCha streams per generation stage.
const STREAM_DIRECTIONS: u64 = 1;
const STREAM_EMBEDDINGS: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_TEST: u64 = 4;
const STREAM_TEACHER: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpuriousTestMode {
    Absent,
    Flipped,
}

impl fmt::Display for SpuriousTestMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Absent => "absent",
            Self::Flipped => "flipped",
        })
    }
}

impl FromStr for SpuriousTestMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absent" => Ok(Self::Absent),
            "flipped" => Ok(Self::Flipped),
            _ => Err(Error::ConfigInvalid(format!("unknown spurious_test_mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_base: usize,
    pub n_novel: usize,
    pub n_pool: usize,
    pub feature_dim: usize,
    /// Dimension of the class-name embeddings; must equal the encoder's token dimension.
    pub embed_dim: usize,
    pub shots: usize,
    pub test_per_class: usize,
    pub beta: f64,
    pub sigma: f64,
    pub teacher_eps: f64,
    /// Pull of each generalizable direction toward the encoder's zero-shot
    /// feature of its class; only used by [`generate_task_for`].
    pub prior: f64,
    pub spurious_test_mode: SpuriousTestMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_base: 8,
            n_novel: 8,
            n_pool: 100,
            feature_dim: 32,
            embed_dim: 8,
            shots: 4,
            test_per_class: 50,
            beta: 1.5,
            sigma: 0.15,
            teacher_eps: 0.1,
            prior: 0.85,
            spurious_test_mode: SpuriousTestMode::Flipped,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.n_base, "n_base"),
            (self.n_novel, "n_novel"),
            (self.n_pool, "n_pool"),
            (self.feature_dim, "feature_dim"),
            (self.embed_dim, "embed_dim"),
            (self.shots, "shots"),
            (self.test_per_class, "test_per_class"),
        ] {
            if v == 0 {
                return Err(Error::ZeroDimension(name));
            }
        }
        for (v, name) in [
            (self.beta, "beta"),
            (self.sigma, "sigma"),
            (self.teacher_eps, "teacher_eps"),
            (self.prior, "prior"),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::ConfigInvalid(format!("{name} must be finite and >= 0")));
            }
        }
        let needed = 2 * self.n_base + self.n_novel;
        if self.feature_dim < needed {
            return Err(Error::DimensionTooSmall {
                dim: self.feature_dim,
                needed,
            });
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; keys match the config-file keys.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_base", self.n_base.to_string()),
            ("n_novel", self.n_novel.to_string()),
            ("n_pool", self.n_pool.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("shots", self.shots.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("beta", textio::fmt_f64(self.beta)),
            ("sigma", textio::fmt_f64(self.sigma)),
            ("teacher_eps", textio::fmt_f64(self.teacher_eps)),
            ("prior", textio::fmt_f64(self.prior)),
            ("spurious_test_mode", self.spurious_test_mode.to_string()),
            ("task_seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its config-file key. Returns `Ok(false)` for keys
    /// this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::ConfigInvalid(format!("bad value {v:?} for {key}")))
        }
        match key {
            "n_base" => self.n_base = num(key, value)?,
            "n_novel" => self.n_novel = num(key, value)?,
            "n_pool" => self.n_pool = num(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "shots" => self.shots = num(key, value)?,
            "test_per_class" => self.test_per_class = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "teacher_eps" => self.teacher_eps = num(key, value)?,
            "prior" => self.prior = num(key, value)?,
            "spurious_test_mode" => self.spurious_test_mode = value.parse()?,
            "task_seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn fingerprint(&self) -> String {
        self.entries()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: SynthConfig,
    pub base_classes: Vec<ClassEmbedding>,
    pub novel_classes: Vec<ClassEmbedding>,
    pub pool_classes: Vec<ClassEmbedding>,
    /// One per base class, then one per novel class.
    pub generalizable: Vec<Vec<f64>>,
    /// One per base class.
    pub spurious: Vec<Vec<f64>>,
    pub pool_directions: Vec<Vec<f64>>,
    pub train: Vec<Sample>,
    pub base_test: Vec<Sample>,
    /// Labels index `novel_classes`.
    pub novel_test: Vec<Sample>,
    /// Base, then novel, then pool.
    pub teacher: Vec<Feature>,
    /// [`Encoder::tag`] of the encoder the directions were aligned to.
    pub aligned_to: Option<String>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn noisy_unit(parts: &[(f64, &[f64])], sigma: f64, rng: &mut ChaCha8Rng) -> Result<Feature> {
    let dim = parts[0].1.len();
    let mut v = gaussian_vec(rng, dim, sigma);
    for (coef, dir) in parts {
        for (x, d) in v.iter_mut().zip(*dir) {
            *x += coef * d;
        }
    }
    Feature::normalized(v)
}

/// Builds the whole task deterministically from `cfg.seed`.
pub fn generate_task(cfg: &SynthConfig) -> Result<SyntheticTask> {
    build_task(cfg, None)
}

/// Like [`generate_task`], but each generalizable direction leans toward
/// the text feature `enc` produces for its class at the zero prompt, with
/// weight `cfg.prior` against a random unit vector. This mirrors a
/// pretrained encoder whose zero-shot text features already point roughly
/// at the right image features.
pub fn generate_task_for(cfg: &SynthConfig, enc: &Encoder) -> Result<SyntheticTask> {
    build_task(cfg, Some(enc))
}

// Zero-prompt text features of `classes`, centered and scaled to unit norm.
fn zero_shot_directions(enc: &Encoder, classes: &[ClassEmbedding]) -> Result<Vec<Vec<f64>>> {
    let prompt = PromptState::zeros(enc.token_dim(), enc.token_count())?;
    let feats = enc.encode_all(&prompt, classes)?;
    let mut mean = vec![0.0; enc.feature_dim()];
    for f in &feats {
        axpy(1.0 / feats.len() as f64, f.as_slice(), &mut mean);
    }
    feats
        .iter()
        .map(|f| {
            let mut c = f.as_slice().to_vec();
            axpy(-1.0, &mean, &mut c);
            Feature::normalized(c).map(|f| f.as_slice().to_vec())
        })
        .collect()
}

fn build_task(cfg: &SynthConfig, enc: Option<&Encoder>) -> Result<SyntheticTask> {
    cfg.validate()?;
    let dim = cfg.feature_dim;
    let n_dirs = 2 * cfg.n_base + cfg.n_novel;
    let n_gen = cfg.n_base + cfg.n_novel;

    let mut rng = rng_for(cfg.seed, STREAM_EMBEDDINGS);
    let mut embeddings = |n: usize| {
        (0..n)
            .map(|_| ClassEmbedding::random(cfg.embed_dim, &mut rng))
            .collect::<Result<Vec<_>>>()
    };
    let base_classes = embeddings(cfg.n_base)?;
    let novel_classes = embeddings(cfg.n_novel)?;
    let pool_classes = embeddings(cfg.n_pool)?;

    let mut rng = rng_for(cfg.seed, STREAM_DIRECTIONS);
    let mut raw = DenseMatrix::new(n_dirs, dim, gaussian_vec(&mut rng, n_dirs * dim, 1.0))?;
    let aligned_to = match enc {
        None => None,
        Some(enc) => {
            for (what, expected, got) in [
                ("encoder feature dimension", dim, enc.feature_dim()),
                ("encoder token dimension", cfg.embed_dim, enc.token_dim()),
            ] {
                if expected != got {
                    return Err(Error::DimensionMismatch { what, expected, got });
                }
            }
            if cfg.prior > 0.0 {
                let classes: Vec<ClassEmbedding> = base_classes.iter().chain(&novel_classes).cloned().collect();
                let zs = zero_shot_directions(enc, &classes)?;
                let noise_scale = 1.0 / (dim as f64).sqrt();
                for (i, z) in zs.iter().enumerate() {
                    for (q, x) in raw.row_mut(i).iter_mut().enumerate() {
                        *x = cfg.prior * z[q] + noise_scale * *x;
                    }
                }
            }
            Some(enc.tag())
        }
    };
    let dirs = orthonormalize(&raw)?;
    let generalizable: Vec<Vec<f64>> = (0..n_gen).map(|i| dirs.row(i).to_vec()).collect();
    let spurious: Vec<Vec<f64>> = (n_gen..n_dirs).map(|i| dirs.row(i).to_vec()).collect();
    let pool_directions = (0..cfg.n_pool)
        .map(|_| Feature::normalized(gaussian_vec(&mut rng, dim, 1.0)).map(|f| f.as_slice().to_vec()))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = rng_for(cfg.seed, STREAM_TRAIN);
    let mut train = Vec::with_capacity(cfg.n_base * cfg.shots);
    for i in 0..cfg.n_base {
        for _ in 0..cfg.shots {
            let f = noisy_unit(
                &[(1.0, &generalizable[i]), (cfg.beta, &spurious[i])],
                cfg.sigma,
                &mut rng,
            )?;
            train.push(Sample { feature: f, label: i });
        }
    }

    let mut rng = rng_for(cfg.seed, STREAM_TEST);
    let mut base_test = Vec::with_capacity(cfg.n_base * cfg.test_per_class);
    for i in 0..cfg.n_base {
        for _ in 0..cfg.test_per_class {
            let f = match cfg.spurious_test_mode {
                SpuriousTestMode::Absent => noisy_unit(&[(1.0, &generalizable[i])], cfg.sigma, &mut rng)?,
                SpuriousTestMode::Flipped => {
                    let flip = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    noisy_unit(
                        &[(1.0, &generalizable[i]), (flip * cfg.beta, &spurious[i])],
                        cfg.sigma,
                        &mut rng,
                    )?
                }
            };
            base_test.push(Sample { feature: f, label: i });
        }
    }
    let mut novel_test = Vec::with_capacity(cfg.n_novel * cfg.test_per_class);
    for j in 0..cfg.n_novel {
        for _ in 0..cfg.test_per_class {
            let f = noisy_unit(&[(1.0, &generalizable[cfg.n_base + j])], cfg.sigma, &mut rng)?;
            novel_test.push(Sample { feature: f, label: j });
        }
    }

    let mut task = SyntheticTask {
        config: cfg.clone(),
        base_classes,
        novel_classes,
        pool_classes,
        generalizable,
        spurious,
        pool_directions,
        train,
        base_test,
        novel_test,
        teacher: Vec::new(),
        aligned_to,
    };
    task.teacher = teacher_features(&task, cfg.teacher_eps, cfg.seed)?;
    Ok(task)
}

/// `w*_i = normalize(g_i + eps * e_i)` for base, novel and pool classes in
/// that order.
pub fn teacher_features(task: &SyntheticTask, eps: f64, seed: u64) -> Result<Vec<Feature>> {
    if !(eps >= 0.0) {
        return Err(Error::ConfigInvalid(format!("teacher eps {eps} must be >= 0")));
    }
    let mut rng = rng_for(seed, STREAM_TEACHER);
    task.generalizable
        .iter()
        .chain(&task.pool_directions)
        .map(|g| {
            if eps == 0.0 {
                Feature::from_raw(g.clone())
            } else {
                noisy_unit(&[(1.0, g)], eps, &mut rng)
            }
        })
        .collect()
}

impl SyntheticTask {
    pub fn n_base(&self) -> usize {
        self.base_classes.len()
    }

    pub fn n_novel(&self) -> usize {
        self.novel_classes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn base_teacher(&self) -> &[Feature] {
        &self.teacher[..self.n_base()]
    }

    pub fn novel_teacher(&self) -> &[Feature] {
        &self.teacher[self.n_base()..self.n_base() + self.n_novel()]
    }

    pub fn pool_teacher(&self) -> &[Feature] {
        &self.teacher[self.n_base() + self.n_novel()..]
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "{MAGIC} 1 {} {} {} {} {}\n# {}\n# encoder {}\n",
            c.n_base,
            c.n_novel,
            c.n_pool,
            c.feature_dim,
            c.embed_dim,
            c.fingerprint(),
            self.aligned_to.as_deref().unwrap_or("none")
        );
        let mut section = |name: &str, rows: Vec<String>, cols: usize| {
            s.push_str(&format!("@{name} {} {cols}\n", rows.len()));
            for r in rows {
                s.push_str(&r);
                s.push('\n');
            }
        };
        let emb = |v: &[ClassEmbedding]| v.iter().map(|e| textio::fmt_row(e.as_slice())).collect();
        let vecs = |v: &[Vec<f64>]| v.iter().map(|e| textio::fmt_row(e)).collect();
        let samples = |v: &[Sample]| {
            v.iter()
                .map(|x| format!("{} {}", x.label, textio::fmt_row(x.feature.as_slice())))
                .collect()
        };
        let (d, e) = (c.feature_dim, c.embed_dim);
        section("base_classes", emb(&self.base_classes), e);
        section("novel_classes", emb(&self.novel_classes), e);
        section("pool_classes", emb(&self.pool_classes), e);
        section("generalizable", vecs(&self.generalizable), d);
        section("spurious", vecs(&self.spurious), d);
        section("pool_directions", vecs(&self.pool_directions), d);
        section("train", samples(&self.train), d + 1);
        section("base_test", samples(&self.base_test), d + 1);
        section("novel_test", samples(&self.novel_test), d + 1);
        section(
            "teacher",
            self.teacher.iter().map(|f| textio::fmt_row(f.as_slice())).collect(),
            d,
        );
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = textio::check_header(lines.next(), MAGIC, origin)?;
        if head.len() != 5 {
            return Err(Error::bad_format(origin, "dimension line must list 5 counts"));
        }
        let dims: Vec<usize> = head
            .iter()
            .map(|t| textio::parse_usize(Some(t), origin, "dimension"))
            .collect::<Result<_>>()?;
        let mut config = SynthConfig::default();
        let fp = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::bad_format(origin, "line 2 must be '# <config>'"))?;
        for pair in fp.split_whitespace() {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::bad_format(origin, format!("bad config pair {pair:?}")))?;
            if !config.set(k, v)? {
                return Err(Error::bad_format(origin, format!("unknown config key {k:?}")));
            }
        }
        let aligned_to = match lines.next().and_then(|l| l.strip_prefix("# encoder ")) {
            Some("none") => None,
            Some(tag) if !tag.trim().is_empty() && !tag.contains(char::is_whitespace) => Some(tag.to_string()),
            _ => return Err(Error::bad_format(origin, "line 3 must be '# encoder <tag|none>'")),
        };
        if [
            config.n_base,
            config.n_novel,
            config.n_pool,
            config.feature_dim,
            config.embed_dim,
        ] != dims[..]
        {
            return Err(Error::bad_format(origin, "header dimensions disagree with config"));
        }
        let (d, e) = (config.feature_dim, config.embed_dim);

        let mut section = |name: &str, rows: usize, cols: usize| -> Result<Vec<Vec<f64>>> {
            let want = format!("@{name} {rows} {cols}");
            match lines.next() {
                Some(l) if l.trim() == want => {}
                other => {
                    return Err(Error::bad_format(
                        origin,
                        format!("expected section header {want:?}, found {other:?}"),
                    ))
                }
            }
            (0..rows)
                .map(|_| {
                    let l = lines
                        .next()
                        .ok_or_else(|| Error::bad_format(origin, format!("section {name} truncated")))?;
                    textio::parse_row(l, cols, origin, name)
                })
                .collect()
        };
        let embeddings = |rows: Vec<Vec<f64>>| -> Result<Vec<ClassEmbedding>> {
            rows.into_iter().map(ClassEmbedding::from_unit).collect()
        };
        let samples = |rows: Vec<Vec<f64>>, classes: usize| -> Result<Vec<Sample>> {
            rows.into_iter()
                .map(|mut r| {
                    let label = r[0];
                    if label < 0.0 || label.fract() != 0.0 || label as usize >= classes {
                        return Err(Error::bad_format(origin, format!("bad label {label}")));
                    }
                    r.remove(0);
                    Ok(Sample {
                        feature: Feature::from_raw(r)?,
                        label: label as usize,
                    })
                })
                .collect()
        };
        let c = &config;
        let base_classes = embeddings(section("base_classes", c.n_base, e)?)?;
        let novel_classes = embeddings(section("novel_classes", c.n_novel, e)?)?;
        let pool_classes = embeddings(section("pool_classes", c.n_pool, e)?)?;
        let generalizable = section("generalizable", c.n_base + c.n_novel, d)?;
        let spurious = section("spurious", c.n_base, d)?;
        let pool_directions = section("pool_directions", c.n_pool, d)?;
        let train = samples(section("train", c.n_base * c.shots, d + 1)?, c.n_base)?;
        let base_test = samples(section("base_test", c.n_base * c.test_per_class, d + 1)?, c.n_base)?;
        let novel_test = samples(section("novel_test", c.n_novel * c.test_per_class, d + 1)?, c.n_novel)?;
        let teacher = section("teacher", c.n_base + c.n_novel + c.n_pool, d)?
            .into_iter()
            .map(Feature::from_raw)
            .collect::<Result<Vec<_>>>()?;
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::bad_format(origin, "trailing data"));
        }
        Ok(Self {
            config,
            base_classes,
            novel_classes,
            pool_classes,
            generalizable,
            spurious,
            pool_directions,
            train,
            base_test,
            novel_test,
            teacher,
            aligned_to,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        textio::write(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&textio::read(path)?, &path.display().to_string())
    }
}
