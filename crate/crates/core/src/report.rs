//! Post-hoc CSV and SVG emission from a run directory. Read-only on its inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::metrics::{read_jsonl, MetricsRow, TrajectoryRow, METRICS_FILE, TRAJECTORY_FILE};
use crate::orchestrator::{AblationSeries, FinalReport, ABLATION_FILE, REPORT_FILE};
use crate::{Error, Result};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const BEST_REWARD_CSV: &str = "best_reward.csv";
pub const LOSSES_CSV: &str = "losses.csv";
pub const BEST_REWARD_SVG: &str = "best_reward.svg";
pub const LOSSES_SVG: &str = "losses.svg";
pub const ABLATION_CSV: &str = "ablation_curves.csv";
pub const EMBEDDING_SVG: &str = "ablation_embedding.svg";
pub const EPISODES_SVG: &str = "ablation_episodes.svg";

/// Table-style row, accuracies and FLOPs in percent at two decimals.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub baseline_acc: String,
    pub pruned_acc: String,
    pub delta_acc: String,
    pub pruned_flops_pct: String,
}

impl SummaryRow {
    /// Δ is taken between the rounded accuracies so the printed row adds up.
    pub fn from_report(r: &FinalReport) -> Self {
        let round = |x: f64| (x * 10_000.0).round() / 100.0;
        let (b, p) = (round(r.baseline_acc), round(r.pruned_acc));
        SummaryRow {
            baseline_acc: format!("{b:.2}"),
            pruned_acc: format!("{p:.2}"),
            delta_acc: format!("{:+.2}", p - b),
            pruned_flops_pct: format!("{:.2}", r.pruned_flops_pct),
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "baseline_acc,pruned_acc,delta_acc,pruned_flops_pct\n{},{},{},{}\n",
            self.baseline_acc, self.pruned_acc, self.delta_acc, self.pruned_flops_pct
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReportArtifacts {
    pub files: Vec<PathBuf>,
    pub summary: Option<SummaryRow>,
    /// Best reward per epoch, recomputed from the trajectory log when present.
    pub best_reward: Curve,
}

fn write(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    files.push(path);
    Ok(())
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

/// Running maximum of episode rewards per epoch, for every epoch in `epochs`.
pub fn best_reward_series(epochs: &[usize], traj: &[TrajectoryRow]) -> Curve {
    let mut per_epoch: BTreeMap<usize, f64> = BTreeMap::new();
    for r in traj {
        let e = per_epoch.entry(r.epoch).or_insert(f64::NEG_INFINITY);
        *e = e.max(r.reward);
    }
    let mut best: Option<f64> = None;
    epochs
        .iter()
        .map(|&t| {
            if let Some(&r) = per_epoch.get(&t) {
                best = Some(best.map_or(r, |b| b.max(r)));
            }
            (t, best)
        })
        .collect()
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn line_plot(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-3);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn points(s: &[(usize, Option<f64>)]) -> Vec<(f64, f64)> {
    s.iter().filter_map(|&(t, v)| v.map(|v| (t as f64, v))).collect()
}

/// Emit CSVs and plots for the run in `run_dir` into `out` (defaults to `run_dir`).
///
/// Fails when the metrics stream is missing or has a malformed line.
pub fn report_run(run_dir: &Path, out: Option<&Path>) -> Result<ReportArtifacts> {
    let out = out.unwrap_or(run_dir);
    let metrics_path = run_dir.join(METRICS_FILE);
    if !metrics_path.exists() {
        return Err(Error::Config(format!("no metrics stream at {}", metrics_path.display())));
    }
    let metrics: Vec<MetricsRow> = read_jsonl(&metrics_path)?;
    if metrics.is_empty() {
        return Err(Error::Config(format!("metrics stream {} is empty", metrics_path.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut art = ReportArtifacts::default();

    let epochs: Vec<usize> = metrics.iter().map(|m| m.epoch).collect();
    let traj_path = run_dir.join(TRAJECTORY_FILE);
    art.best_reward = if traj_path.exists() {
        best_reward_series(&epochs, &read_jsonl(&traj_path)?)
    } else {
        metrics.iter().map(|m| (m.epoch, m.best_reward)).collect()
    };

    let mut csv = String::from("epoch,best_reward,best_flops\n");
    for (m, (t, b)) in metrics.iter().zip(&art.best_reward) {
        let flops = m.best_flops.map(|f| f.to_string()).unwrap_or_default();
        writeln!(csv, "{t},{},{flops}", opt(*b)).unwrap();
    }
    write(out.join(BEST_REWARD_CSV), &csv, &mut art.files)?;

    let mut csv = String::from("epoch,lr,train_loss,l_class,l_align,l_recons,critic1_loss,critic2_loss,policy_loss,wall_clock_s\n");
    for m in &metrics {
        let (c1, c2) = match m.critic_losses {
            Some([a, b]) => (Some(a), Some(b)),
            None => (None, None),
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            m.epoch,
            m.lr,
            m.train_loss,
            m.l_class,
            m.l_align,
            opt(m.l_recons),
            opt(c1),
            opt(c2),
            opt(m.policy_loss),
            m.wall_clock_s
        )
        .unwrap();
    }
    write(out.join(LOSSES_CSV), &csv, &mut art.files)?;

    let p = out.join(BEST_REWARD_SVG);
    line_plot(
        &p,
        "Best reward vs epoch",
        "best reward",
        &[Series {
            label: "best reward".into(),
            points: points(&art.best_reward),
        }],
    )?;
    art.files.push(p);

    let col = |f: &dyn Fn(&MetricsRow) -> Option<f64>| -> Vec<(f64, f64)> {
        metrics.iter().filter_map(|m| f(m).map(|v| (m.epoch as f64, v))).collect()
    };
    let p = out.join(LOSSES_SVG);
    line_plot(
        &p,
        "Losses",
        "loss",
        &[
            Series { label: "L_w".into(), points: col(&|m| Some(m.train_loss)) },
            Series { label: "L_class".into(), points: col(&|m| Some(m.l_class)) },
            Series { label: "L_align".into(), points: col(&|m| Some(m.l_align)) },
            Series { label: "L_recons".into(), points: col(&|m| m.l_recons) },
            Series { label: "critic 1".into(), points: col(&|m| m.critic_losses.map(|c| c[0])) },
            Series { label: "critic 2".into(), points: col(&|m| m.critic_losses.map(|c| c[1])) },
            Series { label: "policy".into(), points: col(&|m| m.policy_loss) },
        ],
    )?;
    art.files.push(p);

    let report_path = run_dir.join(REPORT_FILE);
    if report_path.exists() {
        let text = fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        let report: FinalReport = serde_json::from_str(&text)?;
        let row = SummaryRow::from_report(&report);
        write(out.join(SUMMARY_CSV), &row.to_csv(), &mut art.files)?;
        art.summary = Some(row);
    }
    Ok(art)
}

/// Best reward per epoch, `None` before the first episode.
pub type Curve = Vec<(usize, Option<f64>)>;

#[derive(Clone, Debug, Default)]
pub struct AblationArtifacts {
    pub files: Vec<PathBuf>,
    /// Seed-averaged curves per label in the embedding comparison.
    pub embedding: Vec<(String, Curve)>,
    pub episodes: Vec<(String, Curve)>,
}

fn seed_mean(series: &[&AblationSeries]) -> Curve {
    let len = series.iter().map(|s| s.best_reward.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = series.iter().filter_map(|s| s.best_reward.get(i).copied().flatten()).collect();
            let mean = (vals.len() == series.len() && !vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            (i + 1, mean)
        })
        .collect()
}

fn grouped(all: &[AblationSeries], group: &str) -> Vec<(String, Curve)> {
    let mut labels: Vec<&str> = Vec::new();
    for s in all.iter().filter(|s| s.group == group) {
        if !labels.contains(&s.label.as_str()) {
            labels.push(&s.label);
        }
    }
    labels
        .into_iter()
        .map(|l| {
            let members: Vec<&AblationSeries> = all.iter().filter(|s| s.group == group && s.label == l).collect();
            (l.to_string(), seed_mean(&members))
        })
        .collect()
}

/// Overlay the ablation curves in `dir/ablation.jsonl`.
pub fn report_ablation(dir: &Path, out: Option<&Path>) -> Result<AblationArtifacts> {
    let out = out.unwrap_or(dir);
    let path = dir.join(ABLATION_FILE);
    if !path.exists() {
        return Err(Error::Config(format!("no ablation stream at {}", path.display())));
    }
    let all: Vec<AblationSeries> = read_jsonl(&path)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut art = AblationArtifacts {
        embedding: grouped(&all, "embedding"),
        episodes: grouped(&all, "episodes"),
        ..Default::default()
    };

    let mut csv = String::from("group,label,seed,epoch,best_reward\n");
    for s in &all {
        for (i, b) in s.best_reward.iter().enumerate() {
            writeln!(csv, "{},{},{},{},{}", s.group, s.label, s.seed, i + 1, opt(*b)).unwrap();
        }
    }
    write(out.join(ABLATION_CSV), &csv, &mut art.files)?;

    for (file, title, curves) in [
        (EMBEDDING_SVG, "Best reward with and without embeddings", &art.embedding),
        (EPISODES_SVG, "Best reward by episodes per epoch", &art.episodes),
    ] {
        if curves.is_empty() {
            continue;
        }
        let series: Vec<Series> = curves
            .iter()
            .map(|(l, c)| Series {
                label: l.clone(),
                points: points(c),
            })
            .collect();
        let p = out.join(file);
        line_plot(&p, title, "best reward", &series)?;
        art.files.push(p);
    }
    Ok(art)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(epoch: usize, reward: f64) -> TrajectoryRow {
        TrajectoryRow {
            epoch,
            episode: 0,
            raw_actions: vec![],
            executed_actions: vec![],
            kept: vec![],
            reward,
            realized_flops: 0,
        }
    }

    #[test]
    fn best_series_is_running_max_with_gaps() {
        let s = best_reward_series(&[1, 2, 3, 4], &[traj(2, 0.5), traj(2, 0.7), traj(3, 0.6), traj(4, 0.9)]);
        assert_eq!(s, vec![(1, None), (2, Some(0.7)), (3, Some(0.7)), (4, Some(0.9))]);
    }

    #[test]
    fn summary_delta_adds_up_after_rounding() {
        let r = FinalReport {
            baseline_acc: 0.91234,
            pruned_acc: 0.90876,
            delta_acc: 0.90876 - 0.91234,
            pruned_flops_pct: 50.123,
            full_flops: 0,
            pruned_flops: 0,
            prunable_budget: 0,
            realized_prunable: 0,
            best_reward: 0.0,
            best_epoch: 0,
            kept: vec![],
            masked_eval_subset_acc: 0.0,
            pre_finetune_subset_acc: 0.0,
            pre_finetune_test_acc: 0.0,
            unpruned_test_acc: 0.0,
            masked_to_kept_norm_ratio: None,
            finetune_epochs: 0,
        };
        let row = SummaryRow::from_report(&r);
        assert_eq!(row.baseline_acc, "91.23");
        assert_eq!(row.pruned_acc, "90.88");
        assert_eq!(row.delta_acc, "-0.35");
        assert_eq!(row.pruned_flops_pct, "50.12");
    }
}
