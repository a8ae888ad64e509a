use std::path::PathBuf;

use actseg::io::read_labels;
use actseg::metrics::{evaluate, EvalOptions, MatchingRule, MetricAccumulator};

use crate::common::{
    list_files, load_catalog, required, usage, write_file, CmdResult, Manifest, MANIFEST,
};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Directory of predicted label files.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth label files with the same names.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Segment matching for F1: optimal or greedy.
    #[arg(long, default_value = "optimal")]
    matching: String,
    /// Class name excluded from all metrics.
    #[arg(long)]
    ignore: Option<String>,
    /// Directory for per-video and aggregate reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(a: Args) -> CmdResult {
    let catalog = load_catalog(&a.catalog)?;
    let rule = match a.matching.as_str() {
        "optimal" => MatchingRule::Optimal,
        "greedy" => MatchingRule::Greedy,
        other => return usage(format!("unknown matching rule {other:?}")),
    };
    let ignore = match &a.ignore {
        Some(name) => match catalog.id(name) {
            Some(id) => Some(id),
            None => return usage(format!("unknown class {name:?}")),
        },
        None => None,
    };
    let opts = EvalOptions { rule, ignore };
    let preds = list_files(&a.pred, &["txt"])?;
    let mut acc = MetricAccumulator::new(opts);
    let mut per_video = serde_json::Map::new();
    let mut lines = String::new();
    let mut manifest = Manifest::new(
        "eval",
        serde_json::json!({ "matching": a.matching, "ignore": a.ignore }),
        None,
    );
    for (name, path) in &preds {
        let gt_path = required(&a.gt, name, "txt")?;
        let pred = read_labels(path, &catalog)?;
        let gt = read_labels(&gt_path, &catalog)?;
        let report = evaluate(&pred, &gt, opts)?;
        acc.add(&pred, &gt)?;
        lines.push_str(&format!("{name}\t{report}\n"));
        per_video.insert(
            name.clone(),
            serde_json::from_str(&report.to_json()).expect("valid json"),
        );
        manifest.input(path);
        manifest.input(&gt_path);
    }
    let total = acc.report();
    print!("{}", total.to_key_value());
    if let Some(out) = &a.out {
        let json = serde_json::json!({
            "videos": per_video,
            "aggregate": serde_json::from_str::<serde_json::Value>(&total.to_json()).expect("valid json"),
        });
        let files = [
            (
                out.join("metrics.json"),
                serde_json::to_string_pretty(&json).expect("json") + "\n",
            ),
            (out.join("metrics.txt"), total.to_key_value()),
            (out.join("per_video.tsv"), lines),
        ];
        for (path, text) in files {
            write_file(&path, text)?;
            manifest.output(&path);
        }
        manifest.write(&out.join(MANIFEST))?;
    }
    Ok(())
}
