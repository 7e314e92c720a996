//! Trains on planted-patch data and compares against the baselines.
//!
//! Usage: `cargo run --release --example synthetic -- [key=value ...]` where
//! keys are `synth` / `config` JSON patches over the synthetic presets, e.g.
//! `synth='{"occlusion_rate":0.1}' config='{"seed":1}'`.

use std::time::Instant;

use grnet_core::data::config::RunConfig;
use grnet_core::data::manifest::Split;
use grnet_core::data::synth::{generate_synthetic, SynthSpec};
use grnet_core::experiment::{evaluate, fit, synthetic_run_config, synthetic_task, tail_mean};
use grnet_core::retrieval::Scorer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut synth = serde_json::to_value(synthetic_task(0))?;
    let mut config = serde_json::to_value(synthetic_run_config(0))?;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or("expected key=value")?;
        let patch: serde_json::Value = serde_json::from_str(v)?;
        let target = match k {
            "synth" => &mut synth,
            "config" => &mut config,
            _ => return Err(format!("unknown key {k}").into()),
        };
        merge(target, patch);
    }
    let spec: SynthSpec = serde_json::from_value(synth)?;
    let cfg: RunConfig = serde_json::from_value(config)?;
    cfg.validate()?;

    let data = generate_synthetic(&spec)?.cast::<f64>();
    let t = Instant::now();
    let (model, log) = fit(&cfg, &data, &mut |_| {})?;
    println!(
        "train {:.1}s first={:.4} last10={:.4}",
        t.elapsed().as_secs_f64(),
        log.losses[0],
        tail_mean(&log.losses, 10)
    );

    for scorer in [
        Scorer::Grnet(&model),
        Scorer::GlobalCosine,
        Scorer::GreedyLocal { scale: Scorer::<f64>::DEFAULT_GREEDY_SCALE },
    ] {
        let t = Instant::now();
        let (_, eval) = evaluate(&data, Split::Test, &scorer, &cfg.schedule.ks)?;
        println!("# {:.1}s", t.elapsed().as_secs_f64());
        for line in eval.lines() {
            println!("{line}");
        }
    }
    Ok(())
}

fn merge(a: &mut serde_json::Value, b: serde_json::Value) {
    match (a, b) {
        (serde_json::Value::Object(a), serde_json::Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (a, b) => *a = b,
    }
}
