//! Trains the reference CNN supernet on the bundled MNIST subset and reports
//! accuracy of a few uniform policies.
//!
//! cargo run --release --example train_supernet -- [epochs]

use std::path::Path;
use std::time::Instant;

use bitshare::data::load_mnist_idx;
use bitshare::supernet::{BitSpace, Supernet, Topology, TrainConfig, Trainer};

fn main() -> bitshare::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let data = load_mnist_idx(
        &root.join("mnist-10k-images-idx3-ubyte.gz"),
        &root.join("mnist-10k-labels-idx1-ubyte.gz"),
    )?;
    let (train, val) = data.split(8000);
    let topo = Topology::reference_cnn();
    let space = BitSpace::new(topo.layers.len(), &[2, 3, 4, 5, 6], &[2, 3, 4, 5, 6], 8)?;
    let model = Supernet::new(topo, space.clone(), 0)?;
    let config = TrainConfig {
        epochs,
        warmup_epochs: 1,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, config, &train)?;
    let t0 = Instant::now();
    while !trainer.is_done() {
        let mut last = 0.0;
        trainer.train_epoch(&train, |m| last = m.mean_loss)?;
        println!(
            "epoch {} done at step {}: last loss {last:.4} ({:.1}s)",
            trainer.step() / trainer.steps_per_epoch(),
            trainer.step(),
            t0.elapsed().as_secs_f64()
        );
    }
    let calib: Vec<_> = train.batches(64).take(8).collect();
    for bits in [2u8, 4, 6] {
        let policy = space.uniform_policy(bits)?;
        let mut m = trainer.model.clone();
        m.bn_recalibrate(&policy, &calib)?;
        let r = m.evaluate(&policy, &val, 256)?;
        println!("{bits}-bit policy: accuracy {:.4}, loss {:.4}", r.accuracy, r.loss);
    }
    Ok(())
}
