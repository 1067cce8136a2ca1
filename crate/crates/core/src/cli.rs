//! Command-line front end.
//!
//! Config precedence is defaults, then the `--config` file, then `--set`
//! pairs, then the dedicated flags. Config files hold `key = value` lines with
//! `#` comments; every `TrainConfig` and `SynthConfig` key is accepted.
//!
//! Exit codes: 0 on success, 1 on usage errors (subcommand help goes to
//! stderr), 2 on runtime errors (`error: <Variant>: ...` on stderr).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, CommandFactory, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::subspace::{leading_alignment, pca_fit, Subspace, NULL_EIGEN_RATIO};
use crate::synth::{generate_task, generate_task_for, SynthConfig, SyntheticTask};
use crate::textio;
use crate::trainer::{
    metrics_csv, parse_metrics_csv, subpt_pipeline, train, EpochMetrics, Mode, NflTarget, TrainConfig,
};
use crate::trajectory::Trajectory;

pub const MANIFEST: &str = "manifest.txt";

const TOOL_VERSION: &str = concat!("subpt ", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "subpt", version, about = "Subspace prompt tuning on a frozen toy encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic few-shot task file.
    GenData(GenDataArgs),
    /// Train a prompt (coop, projected or the full subpt pipeline).
    Train(TrainArgs),
    /// Fit a PCA subspace over a trajectory window and print its spectrum.
    Pca(PcaArgs),
    /// Leading-direction alignment between an early and a later window.
    Analyze(AnalyzeArgs),
    /// Aggregate finished runs into mean/std tables and curve CSVs.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Task seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_name = "FILE")]
    task: PathBuf,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_parser = ["coop", "projected", "subpt"])]
    mode: Option<String>,
    #[arg(long)]
    t_early: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long, value_parser = ["none", "base", "novel", "whole", "pool"])]
    nfl_target: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Prompt initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Subspace file for `--mode projected`.
    #[arg(long, value_name = "FILE")]
    subspace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PcaArgs {
    #[arg(long, value_name = "FILE")]
    traj: PathBuf,
    #[arg(long, num_args = 2, value_names = ["T1", "T2"], required = true)]
    window: Vec<usize>,
    #[arg(long)]
    r: usize,
    /// Save the fitted subspace here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long, value_name = "FILE")]
    traj: PathBuf,
    /// Take the later window from this trajectory instead.
    #[arg(long, value_name = "FILE")]
    traj_later: Option<PathBuf>,
    #[arg(long, num_args = 2, value_names = ["T1", "T2"], required = true)]
    early: Vec<usize>,
    #[arg(long, num_args = 2, value_names = ["T3", "T4"], required = true)]
    later: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    r: usize,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run directories written by `train`.
    #[arg(long, num_args = 1.., required = true, value_name = "DIR")]
    runs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

enum Failure {
    Usage(Option<&'static str>, String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Runs one subcommand; `argv` excludes the program name.
pub fn run_command(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(std::iter::once("subpt".to_string()).chain(argv.iter().cloned())) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprint!("{e}");
            print_help(argv.first().map(String::as_str));
            return 1;
        }
    };
    let started = Instant::now();
    let name = subcommand_name(&cli.command);
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Pca(a) => pca_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match outcome {
        Ok(()) => {
            eprintln!("{name}: done in {:.3} s", started.elapsed().as_secs_f64());
            0
        }
        Err(Failure::Usage(sub, msg)) => {
            eprintln!("error: {msg}");
            print_help(sub);
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::Train(_) => "train",
        Command::Pca(_) => "pca",
        Command::Analyze(_) => "analyze",
        Command::Report(_) => "report",
    }
}

fn print_help(sub: Option<&str>) {
    let mut cmd = Cli::command();
    cmd.build();
    let help = match sub.and_then(|s| cmd.find_subcommand_mut(s)) {
        Some(sc) => sc.render_help(),
        None => cmd.render_help(),
    };
    eprintln!("\n{help}");
}

/// Both configs after merging defaults, the config file and `--set` pairs.
#[derive(Debug, Clone, Default)]
struct Resolved {
    train: TrainConfig,
    synth: SynthConfig,
    path: Option<PathBuf>,
}

impl Resolved {
    fn load(args: &ConfigArgs) -> Result<Self> {
        let mut r = Resolved {
            path: args.config.clone(),
            ..Resolved::default()
        };
        if let Some(path) = &args.config {
            for (key, value) in parse_config(&textio::read(path)?, &path.display().to_string())? {
                r.apply(&key, &value)?;
            }
        }
        for pair in &args.set {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::ConfigInvalid(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            r.apply(key.trim(), value.trim())?;
        }
        Ok(r)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? || self.synth.set(key, value)? {
            Ok(())
        } else {
            Err(Error::ConfigInvalid(format!("unknown config key {key:?}")))
        }
    }

    fn config_path(&self) -> String {
        self.path.as_ref().map_or("none".into(), |p| p.display().to_string())
    }
}

/// Parses `key = value` lines; `#` starts a comment.
fn parse_config(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::bad_format(origin, format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::bad_format(origin, format!("line {}: empty key or value", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    fn new(command: &str, config_path: String, out: &Path) -> Self {
        let mut m = Manifest { lines: Vec::new() };
        m.push("tool_version", TOOL_VERSION);
        m.push("command", command);
        m.push("config_path", config_path);
        m.push("output_dir", out.display().to_string());
        m
    }

    fn push(&mut self, k: impl Into<String>, v: impl Into<String>) {
        self.lines.push((k.into(), v.into()));
    }

    fn push_entries(&mut self, prefix: &str, entries: Vec<(&'static str, String)>) {
        for (k, v) in entries {
            self.push(format!("{prefix}.{k}"), v);
        }
    }

    /// Writes the manifest last, listing `files` plus itself.
    fn finish(mut self, dir: &Path, files: &[&str]) -> Result<()> {
        let mut list: Vec<&str> = files.to_vec();
        list.push(MANIFEST);
        self.push("files", list.join(" "));
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        textio::write(&dir.join(MANIFEST), &s)
    }
}

/// Reads a manifest back into key -> value.
pub fn parse_manifest(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::bad_format(origin, format!("bad manifest line {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn gen_data(a: GenDataArgs) -> std::result::Result<(), Failure> {
    let mut res = Resolved::load(&a.cfg)?;
    if let Some(seed) = a.seed {
        res.synth.seed = seed;
    }
    let task = if res.synth.prior > 0.0 {
        let enc = res.train.build_encoder(res.synth.feature_dim)?;
        generate_task_for(&res.synth, &enc)?
    } else {
        generate_task(&res.synth)?
    };
    task.save(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> std::result::Result<(), Failure> {
    let mut res = Resolved::load(&a.cfg)?;
    let flags: [(&str, Option<String>); 8] = [
        ("mode", a.mode.clone()),
        ("t_early", a.t_early.map(|v| v.to_string())),
        ("r", a.r.map(|v| v.to_string())),
        ("nfl_target", a.nfl_target.clone()),
        ("lambda", a.lambda.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            res.apply(k, &v)?;
        }
    }
    let cfg = res.train.clone();
    match (cfg.mode, &a.subspace) {
        (Mode::Projected, None) => {
            return Err(Failure::Usage(
                Some("train"),
                "--mode projected needs --subspace FILE".into(),
            ))
        }
        (Mode::Coop | Mode::SubptPipeline, Some(_)) => {
            return Err(Failure::Usage(
                Some("train"),
                "--subspace is only used with --mode projected".into(),
            ))
        }
        _ => {}
    }
    let task = SyntheticTask::load(&a.task)?;
    let enc = cfg.build_encoder(task.feature_dim())?;
    let out = &a.out;

    let mut manifest = Manifest::new("train", res.config_path(), out);
    manifest.push("task", a.task.display().to_string());
    if let Some(s) = &a.subspace {
        manifest.push("subspace_in", s.display().to_string());
    }
    manifest.push_entries("config", cfg.entries());
    manifest.push_entries("task_config", task.config.entries());

    let files: Vec<&str> = match cfg.mode {
        Mode::SubptPipeline => {
            let p = subpt_pipeline(&cfg, &task, &enc)?;
            p.stage1.trajectory.save(out.join("stage1_traj.txt"))?;
            textio::write(&out.join("stage1_metrics.csv"), &metrics_csv(&p.stage1.metrics))?;
            p.subspace.save(out.join("subspace.txt"))?;
            p.stage3.trajectory.save(out.join("traj.txt"))?;
            textio::write(&out.join("metrics.csv"), &metrics_csv(&p.stage3.metrics))?;
            print_final(&p.stage3.metrics);
            vec![
                "stage1_traj.txt",
                "stage1_metrics.csv",
                "subspace.txt",
                "traj.txt",
                "metrics.csv",
            ]
        }
        Mode::Projected => {
            let sub = Subspace::load(a.subspace.as_ref().expect("checked above"))?;
            let run = train(&cfg, &task, &enc, Some(&sub))?;
            run.trajectory.save(out.join("traj.txt"))?;
            textio::write(&out.join("metrics.csv"), &metrics_csv(&run.metrics))?;
            sub.save(out.join("subspace.txt"))?;
            print_final(&run.metrics);
            vec!["traj.txt", "metrics.csv", "subspace.txt"]
        }
        Mode::Coop => {
            let run = train(&cfg, &task, &enc, None)?;
            run.trajectory.save(out.join("traj.txt"))?;
            textio::write(&out.join("metrics.csv"), &metrics_csv(&run.metrics))?;
            print_final(&run.metrics);
            vec!["traj.txt", "metrics.csv"]
        }
    };
    manifest.finish(out, &files)?;
    Ok(())
}

fn print_final(metrics: &[EpochMetrics]) {
    if let Some(m) = metrics.last() {
        println!(
            "epoch {}: train_loss {:.6} base_acc {:.4} novel_acc {:.4}",
            m.epoch, m.train_loss, m.base_test_acc, m.novel_test_acc
        );
    }
}

fn window(v: &[usize]) -> (usize, usize) {
    (v[0], v[1])
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|x| textio::fmt_f64(*x)).collect::<Vec<_>>().join(" ")
}

fn pca_cmd(a: PcaArgs) -> std::result::Result<(), Failure> {
    let traj = Trajectory::load(&a.traj)?;
    let sub = pca_fit(&traj, window(&a.window), a.r)?;
    let (t1, t2) = sub.window();
    let mut s = String::new();
    let _ = writeln!(s, "window = {t1} {t2}");
    let _ = writeln!(s, "rank = {}", sub.rank());
    let _ = writeln!(s, "eigenvalues = {}", join_f64(sub.eigenvalues()));
    let _ = writeln!(s, "variance_ratios = {}", join_f64(sub.variance_ratios()));
    let lead = sub.eigenvalues().first().copied().unwrap_or(0.0);
    let null = sub
        .eigenvalues()
        .iter()
        .filter(|&&e| e < NULL_EIGEN_RATIO * lead)
        .count();
    let _ = writeln!(s, "numerically_null = {null}");
    print!("{s}");
    if let Some(out) = &a.out {
        sub.save(out)?;
    }
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs) -> std::result::Result<(), Failure> {
    let early_traj = Trajectory::load(&a.traj)?;
    let later_traj = match &a.traj_later {
        Some(p) => Trajectory::load(p)?,
        None => early_traj.clone(),
    };
    let early = pca_fit(&early_traj, window(&a.early), a.r)?;
    let later = pca_fit(&later_traj, window(&a.later), a.r)?;
    let alignment = leading_alignment(&early, &later)?;
    let mut s = String::new();
    let _ = writeln!(s, "early_window = {} {}", a.early[0], a.early[1]);
    let _ = writeln!(s, "later_window = {} {}", a.later[0], a.later[1]);
    let _ = writeln!(s, "r = {}", a.r);
    let _ = writeln!(s, "alignment = {}", textio::fmt_f64(alignment));
    let _ = writeln!(s, "early_ratios = {}", join_f64(early.variance_ratios()));
    let _ = writeln!(s, "later_ratios = {}", join_f64(later.variance_ratios()));
    print!("{s}");
    if let Some(out) = &a.out {
        textio::write(out, &s)?;
    }
    Ok(())
}

/// Group label for a run: its mode, plus the feature-loss target when active.
fn group_label(m: &BTreeMap<String, String>, origin: &str) -> Result<String> {
    let get = |k: &str| {
        m.get(k)
            .ok_or_else(|| Error::bad_format(origin, format!("manifest lacks {k}")))
    };
    let mode: Mode = get("config.mode")?.parse()?;
    let target: NflTarget = get("config.nfl_target")?.parse()?;
    let lambda: f64 = get("config.lambda")?
        .parse()
        .map_err(|_| Error::bad_format(origin, "bad config.lambda"))?;
    Ok(if target != NflTarget::None && lambda != 0.0 {
        format!("{mode}_nfl_{target}")
    } else {
        mode.to_string()
    })
}

const CURVE_FIELDS: [&str; 7] = [
    "train_loss",
    "train_acc",
    "base_test_acc",
    "novel_test_acc",
    "grad_norm_raw",
    "grad_norm_projected",
    "nfl_loss",
];

fn fields(m: &EpochMetrics) -> [f64; 7] {
    [
        m.train_loss,
        m.train_acc,
        m.base_test_acc,
        m.novel_test_acc,
        m.grad_norm_raw,
        m.grad_norm_projected,
        m.nfl_loss,
    ]
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

fn report_cmd(a: ReportArgs) -> std::result::Result<(), Failure> {
    let mut groups: BTreeMap<String, Vec<Vec<EpochMetrics>>> = BTreeMap::new();
    for dir in &a.runs {
        let mpath = dir.join(MANIFEST);
        let origin = mpath.display().to_string();
        let manifest = parse_manifest(&textio::read(&mpath)?, &origin)?;
        if manifest.get("command").map(String::as_str) != Some("train") {
            return Err(Error::bad_format(origin, "not a train manifest").into());
        }
        let label = group_label(&manifest, &origin)?;
        let listed: Vec<&str> = manifest.get("files").map_or(vec![], |f| f.split(' ').collect());
        for (file, suffix) in [("metrics.csv", ""), ("stage1_metrics.csv", "_stage1")] {
            if !listed.contains(&file) {
                continue;
            }
            let path = dir.join(file);
            let rows = parse_metrics_csv(&textio::read(&path)?)?;
            if rows.is_empty() {
                return Err(Error::bad_format(path.display().to_string(), "no metric rows").into());
            }
            groups.entry(format!("{label}{suffix}")).or_default().push(rows);
        }
    }

    let mut summary = String::from(
        "group,runs,epochs,peak_base_epoch,peak_base_mean,final_base_mean,final_base_std,\
         final_novel_mean,final_novel_std,final_train_loss_mean,final_train_loss_std\n",
    );
    let mut files: Vec<String> = vec!["summary.csv".into()];
    for (group, runs) in &groups {
        let epochs = runs[0].len();
        if runs.iter().any(|r| r.len() != epochs) {
            return Err(Error::ConfigInvalid(format!("runs in group {group} have different epoch counts")).into());
        }
        let mut curves = String::from("epoch");
        for f in CURVE_FIELDS {
            let _ = write!(curves, ",{f}_mean,{f}_std");
        }
        curves.push('\n');
        let mut base_means = Vec::with_capacity(epochs);
        for t in 0..epochs {
            let _ = write!(curves, "{}", runs[0][t].epoch);
            for (i, _) in CURVE_FIELDS.iter().enumerate() {
                let xs: Vec<f64> = runs.iter().map(|r| fields(&r[t])[i]).collect();
                let (m, s) = mean_std(&xs);
                if i == 2 {
                    base_means.push(m);
                }
                let _ = write!(curves, ",{},{}", sig9(m), sig9(s));
            }
            curves.push('\n');
        }
        let name = format!("curves_{group}.csv");
        textio::write(&a.out.join(&name), &curves)?;
        files.push(name);

        // first epoch attaining the maximum mean base accuracy
        let peak = base_means
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > base_means[best] { i } else { best });
        let last = |f: fn(&EpochMetrics) -> f64| mean_std(&runs.iter().map(|r| f(&r[epochs - 1])).collect::<Vec<_>>());
        let (fb, fbs) = last(|m| m.base_test_acc);
        let (fnv, fnvs) = last(|m| m.novel_test_acc);
        let (fl, fls) = last(|m| m.train_loss);
        let _ = writeln!(
            summary,
            "{group},{},{epochs},{},{},{},{},{},{},{},{}",
            runs.len(),
            runs[0][peak].epoch,
            sig9(base_means[peak]),
            sig9(fb),
            sig9(fbs),
            sig9(fnv),
            sig9(fnvs),
            sig9(fl),
            sig9(fls)
        );
    }
    textio::write(&a.out.join("summary.csv"), &summary)?;
    print!("{summary}");

    let mut manifest = Manifest::new("report", "none".into(), &a.out);
    manifest.push(
        "runs",
        a.runs
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    let names: Vec<&str> = files.iter().map(String::as_str).collect();
    manifest.finish(&a.out, &names)?;
    Ok(())
}
