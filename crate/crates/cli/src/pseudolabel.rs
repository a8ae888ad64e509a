use std::path::PathBuf;

use actseg::io::{read_features, read_timestamps, segments_text};
use actseg::pseudolabel::{constrained_kmedoids, unconstrained_kmedoids, Distance};
use actseg::segcore::to_segments;
use rayon::prelude::*;

use crate::common::{
    feature_inputs, load_catalog, pool, required, write_file, CmdResult, Manifest, MANIFEST,
};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Feature file or directory of feature files.
    #[arg(long)]
    features: PathBuf,
    /// Directory of `frame<TAB>class` timestamp files named like the features.
    #[arg(long)]
    timestamps: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// euclidean, cosine or l1.
    #[arg(long, default_value = "euclidean")]
    dist: String,
    /// Plain k-medoids seeded at the timestamps, without order constraints.
    #[arg(long, conflicts_with = "constrained")]
    unconstrained: bool,
    /// Constrained k-medoids (the default).
    #[arg(long)]
    constrained: bool,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

pub fn run(a: Args) -> CmdResult {
    let catalog = load_catalog(&a.catalog)?;
    let dist: Distance = a.dist.parse()?;
    let inputs = feature_inputs(&a.features)?;
    let stamps = inputs
        .iter()
        .map(|(name, _)| required(&a.timestamps, name, "txt"))
        .collect::<CmdResult<Vec<_>>>()?;
    let results = pool(a.jobs)?.install(|| {
        inputs
            .par_iter()
            .zip(&stamps)
            .map(|((name, fpath), tpath)| -> CmdResult<(String, String)> {
                let feats = read_features(fpath)?;
                let ts = read_timestamps(tpath, &catalog, feats.frames())?;
                let seg = if a.unconstrained {
                    to_segments(&unconstrained_kmedoids(&feats, &ts, dist, a.max_iters)?)
                } else {
                    constrained_kmedoids(&feats, &ts, dist, a.max_iters)?
                };
                Ok((name.clone(), segments_text(&seg, &catalog)))
            })
            .collect::<Vec<_>>()
    });
    let mut manifest = Manifest::new(
        "pseudolabel",
        serde_json::json!({
            "dist": dist.to_string(),
            "constrained": !a.unconstrained,
            "max_iters": a.max_iters,
        }),
        None,
    );
    for ((_, fpath), tpath) in inputs.iter().zip(&stamps) {
        manifest.input(fpath);
        manifest.input(tpath);
    }
    for r in results {
        let (name, text) = r?;
        let path = a.out.join(format!("{name}.txt"));
        write_file(&path, text)?;
        manifest.output(&path);
    }
    println!(
        "wrote {} pseudo-segmentations to {}",
        inputs.len(),
        a.out.display()
    );
    manifest.write(&a.out.join(MANIFEST))
}
