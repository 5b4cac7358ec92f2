//! Interference and mitigation ablation on the bundled MNIST subset.
//!
//! Trains four supernets per seed (without 2-bit; with 2-bit and no
//! mitigation; plus bit freezing; plus freezing and feature alignment) and
//! reports uniform-policy accuracies and the 2-bit/6-bit output-density gap.
//!
//! cargo run --release --example mitigation_ablation -- [epochs] [seeds] [beta]

use std::path::Path;
use std::time::Instant;

use bitshare::analysis::{output_density, symmetric_kl};
use bitshare::data::{load_mnist_idx, Dataset};
use bitshare::supernet::{BitSpace, Supernet, Topology, TrainConfig, Trainer};

struct Variant {
    name: &'static str,
    bits: &'static [u8],
    schedule: bool,
    idm: bool,
}

const VARIANTS: [Variant; 4] = [
    Variant { name: "no-2bit", bits: &[3, 4, 5, 6], schedule: false, idm: false },
    Variant { name: "baseline", bits: &[2, 3, 4, 5, 6], schedule: false, idm: false },
    Variant { name: "+schedule", bits: &[2, 3, 4, 5, 6], schedule: true, idm: false },
    Variant { name: "+schedule+idm", bits: &[2, 3, 4, 5, 6], schedule: true, idm: true },
];

fn run(v: &Variant, seed: u64, epochs: usize, beta: f64, train: &Dataset, val: &Dataset) -> bitshare::Result<()> {
    let topo = Topology::reference_cnn();
    let space = BitSpace::new(topo.layers.len(), v.bits, v.bits, 8)?;
    let model = Supernet::new(topo, space.clone(), seed)?;
    let mut cfg = TrainConfig {
        epochs,
        warmup_epochs: 1,
        fairness: false,
        init_seed: seed,
        data_seed: seed + 1,
        ..Default::default()
    };
    cfg.sampler.seed = seed + 2;
    cfg.schedule.enabled = v.schedule;
    cfg.idm.enabled = v.idm;
    cfg.idm.beta = beta;
    let t0 = Instant::now();
    let mut trainer = Trainer::new(model, cfg, train)?;
    while !trainer.is_done() {
        trainer.train_epoch(train, |_| {})?;
    }
    let calib: Vec<_> = train.batches(64).take(8).collect();
    let mut line = format!("seed {seed} {:<14}", v.name);
    for bits in [2u8, 4, 6] {
        let Ok(policy) = space.uniform_policy(bits) else { continue };
        let mut m = trainer.model.clone();
        m.bn_recalibrate(&policy, &calib)?;
        let r = m.evaluate(&policy, val, 500)?;
        line += &format!(" acc{bits}={:.4}", r.accuracy);
    }
    if v.bits.contains(&2) {
        let probe: Vec<usize> = (0..512).collect();
        let d = output_density(&trainer.model, 1, &[2, 6], &val.batch(&probe), 50, &calib, trainer.step())?;
        line += &format!(" skl={:.4}", symmetric_kl(&d[0].density, &d[1].density, 1e-6)?);
    }
    println!("{line} ({:.0}s)", t0.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> bitshare::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let beta: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(bitshare::idm::IdmConfig::default().beta);
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let data = load_mnist_idx(
        &root.join("mnist-10k-images-idx3-ubyte.gz"),
        &root.join("mnist-10k-labels-idx1-ubyte.gz"),
    )?;
    let (train, val) = data.split(8000);
    for seed in 0..seeds {
        for v in &VARIANTS {
            run(v, seed, epochs, beta, &train, &val)?;
        }
    }
    Ok(())
}
