use std::path::PathBuf;

use actseg::align::FifaConfig;
use actseg::io::{load_checkpoint, read_features, segments_text, transcript_text};
use actseg::model::{InferMode, InferOptions};
use rayon::prelude::*;

use crate::common::{
    feature_inputs, load_catalog, pool, usage, write_file, CmdResult, Manifest, MANIFEST,
};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature file or directory of feature files.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// none, alignment, viterbi or fifa.
    #[arg(long, default_value = "alignment")]
    duration: String,
    /// Frame sampling stride for Viterbi.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long, default_value_t = 3000)]
    fifa_epochs: usize,
    #[arg(long, default_value_t = 80.0)]
    fifa_sharpness: f64,
    #[arg(long, default_value_t = 0.01)]
    fifa_step: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

pub fn run(a: Args) -> CmdResult {
    let mode: InferMode = a.duration.parse()?;
    if a.stride == 0 {
        return usage("--stride must be at least 1");
    }
    let catalog = load_catalog(&a.catalog)?;
    let model = load_checkpoint(&a.checkpoint)?;
    if model.config().num_classes != catalog.len() {
        return usage(format!(
            "checkpoint has {} classes, catalog {}",
            model.config().num_classes,
            catalog.len()
        ));
    }
    let opts = InferOptions {
        mode,
        stride: a.stride,
        fifa: FifaConfig {
            epochs: a.fifa_epochs,
            sharpness: a.fifa_sharpness,
            step_size: a.fifa_step,
            init_durations: None,
        },
    };
    let inputs = feature_inputs(&a.features)?;
    let results = pool(a.jobs)?.install(|| {
        inputs
            .par_iter()
            .map(|(name, path)| -> CmdResult<(String, String)> {
                let x = read_features(path)?;
                let p = model.predict(&x, &opts)?;
                if p.truncated {
                    eprintln!("warning: {name}: decoding stopped at the length limit");
                }
                if p.fallback {
                    eprintln!("warning: {name}: empty decoder output, used frame-level transcript");
                }
                Ok(match &p.segmentation {
                    Some(seg) => (format!("{name}.txt"), segments_text(seg, &catalog)),
                    None => (
                        format!("{name}.transcript"),
                        transcript_text(&p.transcript, &catalog),
                    ),
                })
            })
            .collect::<Vec<_>>()
    });
    let mut manifest = Manifest::new(
        "infer",
        serde_json::json!({
            "duration": mode.to_string(),
            "stride": a.stride,
            "fifa": opts.fifa,
        }),
        None,
    );
    manifest.input(&a.checkpoint);
    for (_, p) in &inputs {
        manifest.input(p);
    }
    for r in results {
        let (file, text) = r?;
        let path = a.out.join(file);
        write_file(&path, text)?;
        manifest.output(&path);
    }
    println!("wrote {} predictions to {}", inputs.len(), a.out.display());
    manifest.write(&a.out.join(MANIFEST))
}
