use std::path::PathBuf;

use actseg::io::{
    load_checkpoint, read_features, read_labels, read_text, read_timestamps, save_checkpoint,
};
use actseg::model::{EpochLog, Model, ModelConfig, TrainConfig, TrainSample};
use actseg::pseudolabel::Distance;
use actseg::segcore::{split_segments, ClassCatalog};
use actseg::synth::{generate, SynthConfig};

use crate::common::{
    list_files, load_catalog, required, usage, write_file, CmdResult, Failure, Manifest, CATALOG,
    FEATURES, FEATURE_EXTENSIONS, GROUND_TRUTH, MANIFEST, TIMESTAMPS,
};

/// Overrides `--config`.
pub const CONFIG_ENV: &str = "ACTSEG_CONFIG";

#[derive(clap::Args, Debug)]
pub struct Args {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    /// Corpus directory with catalog.txt, features/, groundTruth/, timestamps/.
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    data: Option<PathBuf>,
    /// Train on this many in-memory synthetic videos instead.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
    #[arg(long, default_value_t = 0.1)]
    synth_noise: f64,
    /// full: ground-truth frame labels; timestamp: k-medoids pseudo-labels.
    #[arg(long, default_value = "full")]
    supervision: String,
    /// Distance for timestamp pseudo-labels.
    #[arg(long, default_value = "euclidean")]
    dist: String,
    /// Model configuration as key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stage-1 checkpoint to start stage 2 from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::toy().lr)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_data(
    a: &Args,
    timestamps: bool,
    manifest: &mut Manifest,
) -> CmdResult<(ClassCatalog, Vec<TrainSample>)> {
    let dist: Distance = a.dist.parse()?;
    if let Some(n) = a.synth {
        let sc = SynthConfig {
            noise_sigma: a.synth_noise,
            seed: a.synth_seed,
            ..Default::default()
        };
        let samples = generate(&sc, n)?
            .into_iter()
            .map(|v| {
                if timestamps {
                    TrainSample::from_timestamps(v.name, v.features, &v.timestamps, dist)
                } else {
                    TrainSample::new(v.name, v.features, v.gt)
                }
            })
            .collect::<actseg::Result<Vec<_>>>()?;
        return Ok((ClassCatalog::numbered(sc.num_classes), samples));
    }
    let dir = a.data.as_deref().expect("clap requires --data or --synth");
    let catalog_path = dir.join(CATALOG);
    let catalog = load_catalog(&catalog_path)?;
    manifest.input(&catalog_path);
    let mut samples = Vec::new();
    for (name, fpath) in list_files(&dir.join(FEATURES), FEATURE_EXTENSIONS)? {
        let features = read_features(&fpath)?;
        manifest.input(&fpath);
        let sample = if timestamps {
            let tpath = required(&dir.join(TIMESTAMPS), &name, "txt")?;
            manifest.input(&tpath);
            let ts = read_timestamps(&tpath, &catalog, features.frames())?;
            TrainSample::from_timestamps(name, features, &ts, dist)?
        } else {
            let gpath = required(&dir.join(GROUND_TRUTH), &name, "txt")?;
            manifest.input(&gpath);
            TrainSample::new(name, features, read_labels(&gpath, &catalog)?)?
        };
        samples.push(sample);
    }
    Ok((catalog, samples))
}

fn stage1_config(a: &Args, catalog: &ClassCatalog, data: &[TrainSample]) -> CmdResult<ModelConfig> {
    let path = std::env::var_os(CONFIG_ENV)
        .map(PathBuf::from)
        .or_else(|| a.config.clone());
    let mut cfg = match &path {
        Some(p) => ModelConfig::from_kv(&read_text(p)?)?,
        None => ModelConfig::default(),
    };
    cfg.input_dim = data[0].features.dim();
    cfg.num_classes = catalog.len();
    cfg.seed = a.seed;
    let mut longest = 0;
    for s in data {
        longest = longest.max(split_segments(&s.target, cfg.split_fraction)?.len() + 1);
    }
    cfg.max_decode_len = 2 * longest;
    cfg.validate()?;
    Ok(cfg)
}

fn loss_csv(logs: &[EpochLog], stage: u8) -> String {
    let mut out = if stage == 1 {
        String::from("epoch,loss,frame,segment,group_frame,group_segment,cross_attention\n")
    } else {
        String::from("epoch,loss\n")
    };
    for l in logs {
        if stage == 1 {
            let p = &l.parts;
            out.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}\n",
                l.epoch,
                l.loss,
                p.frame,
                p.segment,
                p.group_frame,
                p.group_segment,
                p.cross_attention
            ));
        } else {
            out.push_str(&format!("{},{:.10}\n", l.epoch, l.loss));
        }
    }
    out
}

fn progress(l: &EpochLog, epochs: usize) {
    if l.epoch.is_multiple_of(10) || l.epoch + 1 == epochs {
        eprintln!("epoch {:>4}  loss {:.6}", l.epoch, l.loss);
    }
}

pub fn run(a: Args) -> CmdResult {
    let timestamps = match a.supervision.as_str() {
        "full" => false,
        "timestamp" => true,
        other => return usage(format!("unknown supervision {other:?}")),
    };
    if a.stage == 2 && a.checkpoint.is_none() {
        return usage("stage 2 needs --checkpoint");
    }
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..TrainConfig::toy()
    };
    let mut manifest = Manifest::new("train", serde_json::Value::Null, Some(a.seed));
    let (catalog, data) = load_data(&a, timestamps, &mut manifest)?;
    if data.is_empty() {
        return usage("no training videos");
    }

    let mut model = if a.stage == 1 {
        Model::new(stage1_config(&a, &catalog, &data)?)?
    } else {
        let ck = a.checkpoint.as_deref().expect("checked above");
        manifest.input(ck);
        load_checkpoint(ck)?
    };
    if model.config().num_classes != catalog.len() {
        return usage(format!(
            "checkpoint has {} classes, catalog {}",
            model.config().num_classes,
            catalog.len()
        ));
    }

    let mut logs = Vec::new();
    let result = if a.stage == 1 {
        model.train_stage1(&data, &tc, |l| {
            progress(l, tc.epochs);
            logs.push(*l);
        })
    } else {
        model.train_stage2(&data, &tc, |l| {
            progress(l, tc.epochs);
            logs.push(*l);
        })
    };

    let ckpt = a.out.join("model.ckpt");
    save_checkpoint(&ckpt, &model)?;
    let csv = a.out.join("loss.csv");
    write_file(&csv, loss_csv(&logs, a.stage))?;
    let cfg_path = a.out.join("config.txt");
    write_file(&cfg_path, model.config().to_kv())?;
    for p in [&ckpt, &csv, &cfg_path] {
        manifest.output(p);
    }
    manifest = manifest_with_config(manifest, &a, &tc, model.config());
    manifest.write(&a.out.join(MANIFEST))?;
    match result {
        Ok(_) => {
            if let Some(last) = logs.last() {
                println!("stage {} finished: loss {:.6}", a.stage, last.loss);
            }
            Ok(())
        }
        Err(e) => Err(Failure::from(e)),
    }
}

fn manifest_with_config(
    mut m: Manifest,
    a: &Args,
    tc: &TrainConfig,
    cfg: &ModelConfig,
) -> Manifest {
    m.set_config(serde_json::json!({
        "stage": a.stage,
        "supervision": a.supervision,
        "synth": a.synth,
        "synth_seed": a.synth_seed,
        "train": tc,
        "model": cfg,
    }));
    m
}
