//! Pretrain the toy model on the synthetic shapes and probe both branches
//! every few epochs.
//!
//! cargo run --release --example probe_curve -- 20 patch_init=xavier_uniform

use std::time::Instant;

use sdae::data::{generate_synthetic, SyntheticParams};
use sdae::eval::{compare_branches, ProbeConfig};
use sdae::training::{RunConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let mut cfg = RunConfig::toy();
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').ok_or("overrides look like key=value")?;
        cfg.set(k, v)?;
    }
    let p = SyntheticParams { n_items: 5000, seed: 1, ..Default::default() };
    let train = generate_synthetic(&p)?;
    let test = generate_synthetic(&SyntheticParams { n_items: 1000, seed: 2, ..p })?.with_stats_of(&train);
    let probe = ProbeConfig::default();
    let mut trainer = Trainer::new(cfg)?;
    let start = Instant::now();
    println!("epoch,loss,random,student,teacher,seconds");
    for epoch in 1..=epochs {
        let m = trainer.train_epoch(&train, &mut ())?;
        if epoch % 5 == 0 || epoch == epochs {
            let r = compare_branches(&trainer.model, &trainer.teacher, &train, &test, &probe)?;
            println!(
                "{epoch},{:.5},{:.3},{:.3},{:.3},{:.0}",
                m.mean_loss,
                r.random_init.accuracy,
                r.student.accuracy,
                r.teacher.accuracy,
                start.elapsed().as_secs_f64()
            );
        } else {
            eprintln!("epoch {epoch} loss {:.5}", m.mean_loss);
        }
    }
    Ok(())
}
