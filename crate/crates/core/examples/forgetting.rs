//! Two-domain run with and without the distillation terms; prints first-domain mAP after each task.
//!
//! `cargo run --release -p lreid-core --example forgetting -- [seeds] [epochs]`

use std::time::Instant;

use lreid_core::attribute_text::ManifestAttributes;
use lreid_core::config::{Ablation, RunConfig};
use lreid_core::datakit::{make_synthetic_dataset, SplitConfig, SynthConfig};
use lreid_core::evalkit::evaluate_dataset;
use lreid_core::lifelong::TextCache;
use lreid_core::pipeline::{load_eval_data, load_training_tasks, train};

fn main() -> lreid_core::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let dir = tempfile::tempdir().expect("temp dir");
    for seed in 0..seeds {
        let splits: Vec<_> = (0..2)
            .map(|i| {
                let cfg = SynthConfig::domain(i, seed);
                make_synthetic_dataset(&cfg, &SplitConfig { seed, ..Default::default() }, &dir.path().join(format!("s{seed}d{i}")))
            })
            .collect::<lreid_core::Result<_>>()?;
        let tasks = load_training_tasks(&splits, &ManifestAttributes)?;
        let probe = load_eval_data(&splits[0], &ManifestAttributes)?;
        for distill in [true, false] {
            let mut cfg = RunConfig { seed, ..Default::default() };
            cfg.train.epochs = epochs;
            if !distill {
                cfg.apply(Ablation::NoAf);
                cfg.apply(Ablation::NoKc);
            }
            let start = Instant::now();
            let mut maps = Vec::new();
            train(&cfg, &tasks, None, &mut |pair, _| {
                let r = evaluate_dataset(&pair.new, &probe, cfg.eval.feature, &mut TextCache::new())?;
                maps.push(r.map);
                Ok(())
            })?;
            println!("seed {seed} distill {distill}: domain-1 mAP per task {maps:?} in {:.1?}", start.elapsed());
        }
    }
    Ok(())
}
