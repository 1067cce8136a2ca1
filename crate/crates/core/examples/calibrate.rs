//! Prints the reference-protocol summary for one configuration.
//!
//! ```text
//! cargo run --release --example calibrate -- momentum=0.85 lr=2.5 seeds=5
//! ```
//!
//! Any `TrainConfig` or `SynthConfig` key can be given as `key=value`. Each
//! seed `s` uses task seed = prompt seed = s and the configured encoder seed.

use subpt::*;

struct SeedRun {
    plain: Vec<EpochMetrics>,
    subpt: Vec<EpochMetrics>,
    nfl: Vec<EpochMetrics>,
    alignment: f64,
    top1: f64,
    monotone: bool,
}

fn run_seed(tc: &TrainConfig, sc: &SynthConfig, seed: u64) -> Result<SeedRun> {
    let cfg = TrainConfig {
        seed,
        mode: Mode::SubptPipeline,
        nfl_target: NflTarget::None,
        ..tc.clone()
    };
    let enc = cfg.build_encoder(sc.feature_dim)?;
    let task = generate_task_for(&SynthConfig { seed, ..sc.clone() }, &enc)?;
    let p = subpt_pipeline(&cfg, &task, &enc)?;
    let later = (cfg.epochs * 3 / 5 + 1, cfg.epochs);
    let orth = analyze_orthogonality(&p.stage1.trajectory, (1, 10.min(cfg.epochs)), later, 1)?;
    let nfl_cfg = TrainConfig {
        mode: Mode::Coop,
        nfl_target: NflTarget::Novel,
        ..cfg
    };
    let nfl = train(&nfl_cfg, &task, &enc, None)?;
    let monotone = p
        .stage1
        .metrics
        .windows(2)
        .take(9)
        .all(|w| w[1].train_loss < w[0].train_loss);
    Ok(SeedRun {
        plain: p.stage1.metrics,
        subpt: p.stage3.metrics,
        nfl: nfl.metrics,
        alignment: orth.alignment,
        top1: orth.early_ratios[0],
        monotone,
    })
}

fn mean_curve(runs: &[&Vec<EpochMetrics>], f: fn(&EpochMetrics) -> f64) -> Vec<f64> {
    (0..runs[0].len())
        .map(|t| runs.iter().map(|r| f(&r[t])).sum::<f64>() / runs.len() as f64)
        .collect()
}

fn peak(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::MIN), |a, (i, &x)| if x > a.1 { (i, x) } else { a })
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut tc = TrainConfig::default();
    let mut sc = SynthConfig::default();
    let mut seeds = 5u64;
    for a in &args {
        let (k, v) = a
            .split_once('=')
            .ok_or_else(|| Error::ConfigInvalid(format!("expected key=value, got {a:?}")))?;
        if k == "seeds" {
            seeds = v
                .parse()
                .map_err(|_| Error::ConfigInvalid(format!("bad seeds {v:?}")))?;
        } else if !tc.set(k, v)? && !sc.set(k, v)? {
            return Err(Error::ConfigInvalid(format!("unknown key {k:?}")));
        }
    }
    let runs: Vec<SeedRun> = (0..seeds).map(|s| run_seed(&tc, &sc, s)).collect::<Result<_>>()?;

    let plain = mean_curve(&runs.iter().map(|r| &r.plain).collect::<Vec<_>>(), |m| m.base_test_acc);
    let subpt = mean_curve(&runs.iter().map(|r| &r.subpt).collect::<Vec<_>>(), |m| m.base_test_acc);
    let plain_novel = mean_curve(&runs.iter().map(|r| &r.plain).collect::<Vec<_>>(), |m| m.novel_test_acc);
    let nfl_novel = mean_curve(&runs.iter().map(|r| &r.nfl).collect::<Vec<_>>(), |m| m.novel_test_acc);
    let last = plain.len() - 1;
    let (pi, pv) = peak(&plain);
    let (_, sv) = peak(&subpt);

    println!(
        "config: {}",
        if args.is_empty() {
            "defaults".into()
        } else {
            args.join(" ")
        }
    );
    println!(
        "plain base acc: peak {pv:.4} at epoch {}, final {:.4}, drop {:.1} pts",
        pi + 1,
        plain[last],
        100.0 * (pv - plain[last])
    );
    println!(
        "subpt base acc: peak {sv:.4}, final {:.4}, gap {:.2} pts",
        subpt[last],
        100.0 * (sv - subpt[last])
    );
    println!(
        "nfl novel acc: final {:.4} vs plain {:.4} ({:+.1} pts)",
        nfl_novel[last],
        plain_novel[last],
        100.0 * (nfl_novel[last] - plain_novel[last])
    );
    for (s, r) in runs.iter().enumerate() {
        println!(
            "seed {s}: alignment {:+.3} top-1 ratio {:.4} loss monotone over 10 epochs {}",
            r.alignment, r.top1, r.monotone
        );
    }
    Ok(())
}
