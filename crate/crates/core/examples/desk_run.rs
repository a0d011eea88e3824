//! Trains on the demo scene and prints progress and held-out metrics.
//!
//! `cargo run --release --example desk_run -- [iters] [key=value ...]`
//!
//! With `DESK_RUN_CHECKPOINT=path` set, the trained checkpoint is saved there.

use std::time::Instant;

use render_pretrain::config::RunConfig;
use render_pretrain::rng::{stream, Stream};
use render_pretrain::synth::{make_dataset, AnalyticScene, RingSpec};
use render_pretrain::training::Trainer;

fn main() -> render_pretrain::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = RunConfig::default();
    cfg.apply_preset("desk")?;
    for a in &args[1.min(args.len())..] {
        let (k, v) = a.split_once('=').expect("key=value");
        cfg.set(k, v)?;
    }
    if let Some(n) = args.first() {
        cfg.iters = n.parse().expect("iteration count");
    }
    let scene = AnalyticScene::demo();
    let data = make_dataset(
        &scene,
        8,
        64,
        5,
        &RingSpec::default(),
        &mut stream(cfg.seed, Stream::Synth, 0),
    )?;
    println!(
        "cloud {} points, diameter {:.3}",
        data.cloud.len(),
        scene.diameter().unwrap()
    );
    let mut t = Trainer::new(cfg.clone(), &data)?;
    println!("params {}", t.model.param_count());
    let start = Instant::now();
    let every = (cfg.iters / 20).max(1);
    let mut window = Vec::new();
    t.run_until(cfg.iters, |row| {
        window.push(row.loss);
        if (row.step + 1) % every == 0 {
            let m = window.iter().sum::<f64>() / window.len() as f64;
            println!(
                "step {:5} loss {:.4} (c {:.4} d {:.4} s {:.4}) lr {:.2e} rays {} t {:.1}s",
                row.step + 1,
                m,
                row.loss_c,
                row.loss_d,
                row.loss_sem,
                row.lr,
                row.rays,
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
    })?;
    let train_time = start.elapsed().as_secs_f64();
    let m = t.evaluate_heldout()?;
    let tr = t.evaluate(&[0, 1])?;
    println!(
        "train {train_time:.1}s total {:.1}s log_s {:.3}",
        start.elapsed().as_secs_f64(),
        t.model.fields.log_s
    );
    println!("heldout {m:?}");
    println!("train views {tr:?}");
    if let Ok(path) = std::env::var("DESK_RUN_CHECKPOINT") {
        t.checkpoint()?.save(std::path::Path::new(&path))?;
    }
    Ok(())
}
