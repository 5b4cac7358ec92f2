//! Desk-scale training protocol shared by the empirical criteria.

use std::path::PathBuf;
use std::sync::OnceLock;

use bitshare::analysis::{loss_perturbation_probe, median, output_density, symmetric_kl};
use bitshare::data::{load_mnist_idx, Batch, Dataset};
use bitshare::supernet::{BitSpace, Supernet, Topology, TrainConfig, Trainer};

pub const EPOCHS: usize = 10;
pub const SEEDS: [u64; 3] = [0, 1, 2];
pub const TRAIN_SAMPLES: usize = 8000;
/// Layer whose output densities are compared.
pub const MONITORED_LAYER: usize = 1;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

pub fn mnist() -> &'static (Dataset, Dataset) {
    static DATA: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let d = data_dir();
        let all = load_mnist_idx(
            &d.join("mnist-10k-images-idx3-ubyte.gz"),
            &d.join("mnist-10k-labels-idx1-ubyte.gz"),
        )
        .expect("bundled MNIST subset");
        all.split(TRAIN_SAMPLES)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    NoLowBit,
    Baseline,
    Schedule,
    ScheduleIdm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::NoLowBit, Variant::Baseline, Variant::Schedule, Variant::ScheduleIdm];

    fn bits(self) -> &'static [u8] {
        match self {
            Variant::NoLowBit => &[3, 4, 5, 6],
            _ => &[2, 3, 4, 5, 6],
        }
    }
}

pub struct Trained {
    pub variant: Variant,
    pub seed: u64,
    pub model: Supernet,
    pub steps: u64,
}

pub fn calibration(train: &Dataset) -> Vec<Batch> {
    train.batches(64).take(8).collect()
}

pub fn train(variant: Variant, seed: u64) -> Trained {
    let (train, _) = mnist();
    let topo = Topology::reference_cnn();
    let bits = variant.bits();
    let space = BitSpace::new(topo.layers.len(), bits, bits, 8).unwrap();
    let model = Supernet::new(topo, space, seed).unwrap();
    let mut cfg = TrainConfig {
        epochs: EPOCHS,
        warmup_epochs: 1,
        fairness: false,
        init_seed: seed,
        data_seed: seed + 1,
        ..Default::default()
    };
    cfg.sampler.seed = seed + 2;
    cfg.schedule.enabled = matches!(variant, Variant::Schedule | Variant::ScheduleIdm);
    cfg.idm.enabled = variant == Variant::ScheduleIdm;
    let mut trainer = Trainer::new(model, cfg, train).unwrap();
    while !trainer.is_done() {
        trainer.train_epoch(train, |_| {}).unwrap();
    }
    Trained { variant, seed, steps: trainer.step(), model: trainer.model }
}

/// Every (variant, seed) run, trained once per test process.
pub fn ablation() -> &'static Vec<Trained> {
    static RUNS: OnceLock<Vec<Trained>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut out = Vec::new();
        for seed in SEEDS {
            for v in Variant::ALL {
                out.push(train(v, seed));
            }
        }
        out
    })
}

pub fn run(variant: Variant, seed: u64) -> &'static Trained {
    ablation().iter().find(|t| t.variant == variant && t.seed == seed).expect("run trained")
}

/// Validation accuracy of the uniform `bits` policy after recalibration.
pub fn accuracy(t: &Trained, bits: u8) -> f64 {
    let (train, val) = mnist();
    let policy = t.model.space().uniform_policy(bits).unwrap();
    let mut m = t.model.clone();
    m.bn_recalibrate(&policy, &calibration(train)).unwrap();
    m.evaluate(&policy, val, 500).unwrap().accuracy
}

pub fn max_bit_accuracy(t: &Trained) -> f64 {
    let (train, val) = mnist();
    let policy = t.model.space().max_policy();
    let mut m = t.model.clone();
    m.bn_recalibrate(&policy, &calibration(train)).unwrap();
    m.evaluate(&policy, val, 500).unwrap().accuracy
}

/// Symmetric KL between the 2-bit and 6-bit output densities of the
/// monitored layer.
pub fn density_gap(t: &Trained) -> f64 {
    let (train, val) = mnist();
    let probe: Vec<usize> = (0..512).collect();
    let d = output_density(&t.model, MONITORED_LAYER, &[2, 6], &val.batch(&probe), 50, &calibration(train), t.steps).unwrap();
    symmetric_kl(&d[0].density, &d[1].density, 1e-6).unwrap()
}

/// Median loss perturbation of the max-bit policy after one step on the
/// uniform `low` policy, over `batches` validation batches.
pub fn perturbation(t: &Trained, low: u8, batches: usize, lr: f64) -> f64 {
    let (_, val) = mnist();
    let space = t.model.space();
    let high = space.max_policy();
    let low = space.uniform_policy(low).unwrap();
    let deltas: Vec<f64> = val
        .batches(64)
        .take(batches)
        .map(|b| loss_perturbation_probe(&t.model, &high, &low, &b, lr).unwrap())
        .collect();
    median(&deltas)
}

pub fn median_of(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    median(&v)
}
