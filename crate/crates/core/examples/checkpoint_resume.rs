//! Interrupts training after one epoch, saves a checkpoint, resumes in a
//! fresh trainer and checks the result matches an uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use bitshare::checkpoint::Checkpoint;
use bitshare::data::{synthetic, Dataset, SyntheticSpec};
use bitshare::supernet::{BitSpace, Supernet, Topology, TrainConfig, Trainer};

fn trainer(data: &Dataset) -> bitshare::Result<Trainer> {
    let topo = Topology::reference_cnn();
    let space = BitSpace::new(topo.layers.len(), &[2, 3, 4, 5, 6], &[2, 3, 4, 5, 6], 8)?;
    let mut cfg = TrainConfig { epochs: 2, batch_size: 32, warmup_epochs: 1, ..Default::default() };
    cfg.schedule.enabled = true;
    Trainer::new(Supernet::new(topo, space, 0)?, cfg, data)
}

fn main() -> bitshare::Result<()> {
    let data = synthetic(&SyntheticSpec { samples: 256, noise: 0.2, ..Default::default() })?;
    let dir = std::env::temp_dir().join("bitshare-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("epoch1.ckpt");

    let mut straight = trainer(&data)?;
    while !straight.is_done() {
        straight.train_epoch(&data, |_| {})?;
    }

    let mut first = trainer(&data)?;
    first.train_epoch(&data, |_| {})?;
    Checkpoint::from_trainer(&first, serde_json::json!({ "note": "after epoch 1" })).save(&path)?;
    let size = std::fs::metadata(&path)?.len();
    println!("saved {} ({size} bytes) at step {}", path.display(), first.step());

    let mut resumed = trainer(&data)?;
    Checkpoint::load(&path)?.restore_trainer(&mut resumed)?;
    while !resumed.is_done() {
        resumed.train_epoch(&data, |_| {})?;
    }
    let same = straight.model.params().iter().zip(resumed.model.params()).all(|(a, b)| a.data() == b.data());
    println!("resumed run bit-identical to uninterrupted run: {same}");
    Ok(())
}
