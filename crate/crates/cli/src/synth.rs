use std::path::PathBuf;

use actseg::io::{catalog_text, encode_features, frames_text, timestamps_text};
use actseg::segcore::ClassCatalog;
use actseg::synth::{generate, SynthConfig};

use crate::common::{
    write_file, CmdResult, Manifest, CATALOG, FEATURES, GROUND_TRUTH, MANIFEST, TIMESTAMPS,
};

#[derive(clap::Args, Debug)]
pub struct Args {
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    videos: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Total drift over a video, in prototype-scale units.
    #[arg(long, default_value_t = 0.0)]
    drift: f64,
    #[arg(long, default_value_t = 3)]
    min_segments: usize,
    #[arg(long, default_value_t = 6)]
    max_segments: usize,
    #[arg(long, default_value_t = 20)]
    min_duration: usize,
    #[arg(long, default_value_t = 60)]
    max_duration: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(a: Args) -> CmdResult {
    let cfg = SynthConfig {
        num_classes: a.classes,
        feature_dim: a.dim,
        prototype_scale: a.scale,
        noise_sigma: a.noise,
        temporal_drift: a.drift,
        min_segments: a.min_segments,
        max_segments: a.max_segments,
        min_duration: a.min_duration,
        max_duration: a.max_duration,
        transition: None,
        seed: a.seed,
    };
    let videos = generate(&cfg, a.videos)?;
    let catalog = ClassCatalog::numbered(a.classes);
    let mut manifest = Manifest::new(
        "synth",
        serde_json::to_value(&cfg).expect("config serializes"),
        Some(a.seed),
    );
    let path = a.out.join(CATALOG);
    write_file(&path, catalog_text(&catalog))?;
    manifest.output(&path);
    for v in &videos {
        let outputs = [
            (
                a.out.join(FEATURES).join(format!("{}.feat", v.name)),
                encode_features(&v.features),
            ),
            (
                a.out.join(GROUND_TRUTH).join(format!("{}.txt", v.name)),
                frames_text(&v.gt, &catalog).into_bytes(),
            ),
            (
                a.out.join(TIMESTAMPS).join(format!("{}.txt", v.name)),
                timestamps_text(&v.timestamps, &catalog).into_bytes(),
            ),
        ];
        for (path, bytes) in outputs {
            write_file(&path, bytes)?;
            manifest.output(&path);
        }
    }
    println!("wrote {} videos to {}", videos.len(), a.out.display());
    manifest.write(&a.out.join(MANIFEST))
}
