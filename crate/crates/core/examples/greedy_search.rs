//! Trains a small supernet on synthetic digits, then runs the bidirectional
//! greedy search down to half of the max-bit BitOps.
//!
//! cargo run --release --example greedy_search -- [budget_fraction]

use bitshare::data::{synthetic, SyntheticSpec};
use bitshare::search::{search, BitOpsModel, SearchConfig, SupernetEvaluator};
use bitshare::supernet::{BitSpace, Supernet, Topology, TrainConfig, Trainer};

fn main() -> bitshare::Result<()> {
    let fraction: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let data = synthetic(&SyntheticSpec { samples: 768, noise: 0.35, seed: 2, ..Default::default() })?;
    let (train, val) = data.split(512);
    let topo = Topology::reference_cnn();
    let space = BitSpace::new(topo.layers.len(), &[2, 3, 4, 5, 6], &[2, 3, 4, 5, 6], 8)?;
    let model = Supernet::new(topo, space.clone(), 0)?;
    let cfg = TrainConfig { epochs: 3, batch_size: 32, warmup_epochs: 1, ..Default::default() };
    let mut trainer = Trainer::new(model, cfg, &train)?;
    while !trainer.is_done() {
        trainer.train_epoch(&train, |_| {})?;
    }

    let model = trainer.model;
    let bitops = BitOpsModel::new(model.macs())?;
    let init = space.max_policy();
    let budget = fraction * bitops.bitops(&init)?;
    let evaluator = SupernetEvaluator {
        model: &model,
        validation: &val,
        calibration: train.batches(64).take(4).collect(),
        recalibrate: true,
        batch_size: 128,
    };
    let config = SearchConfig { budget: Some(budget), ..Default::default() };
    let result = search(init, &space, &bitops, &evaluator, &config)?;
    for rec in &result.state.records {
        let c = rec.accepted();
        println!(
            "step {:>2}: layer {} {:?} -> loss {:.4}, BitOps {:.0}, J {:.3}",
            rec.step, c.mv.layer, c.mv.direction, c.loss, c.bitops, c.j
        );
    }
    let bits: Vec<String> = result.policy.0.iter().map(|b| format!("{}/{}", b.w, b.a)).collect();
    println!("policy [{}]  loss {:.4}  BitOps {:.0} <= {budget:.0}", bits.join(" "), result.loss, result.bitops);
    Ok(())
}
