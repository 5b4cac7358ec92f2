//! Unstable-weight scores and Top-K bit freezing during a short supernet run
//! on synthetic digits.
//!
//! cargo run --release --example bit_freezing

use bitshare::data::{synthetic, SyntheticSpec};
use bitshare::scheduler::k_schedule;
use bitshare::supernet::{BitSpace, Supernet, Topology, TrainConfig, Trainer};

fn main() -> bitshare::Result<()> {
    let data = synthetic(&SyntheticSpec { samples: 512, noise: 0.2, seed: 1, ..Default::default() })?;
    let topo = Topology::reference_cnn();
    let space = BitSpace::new(topo.layers.len(), &[2, 3, 4, 5, 6], &[2, 3, 4, 5, 6], 8)?;
    let model = Supernet::new(topo, space, 0)?;
    let mut cfg = TrainConfig { epochs: 3, batch_size: 32, warmup_epochs: 1, ..Default::default() };
    cfg.schedule.enabled = true;
    cfg.idm.enabled = false;
    let mut trainer = Trainer::new(model, cfg, &data)?;
    let total = trainer.total_steps();
    println!("K over training: {:?}", (0..=4).map(|i| k_schedule(total * i / 4, total, 2)).collect::<Result<Vec<_>, _>>()?);
    while !trainer.is_done() {
        trainer.train_epoch(&data, |m| {
            if let Some(report) = &m.criterion {
                let scores: Vec<String> = report.scores.iter().map(|s| format!("L{}={:.3}", s.layer, s.score)).collect();
                let frozen: Vec<String> = m.frozen.iter().map(|f| format!("L{}:{}b", f.layer, f.bit)).collect();
                println!("step {:>4}  scores {}  frozen [{}]", m.step, scores.join(" "), frozen.join(", "));
            }
        })?;
    }
    Ok(())
}
