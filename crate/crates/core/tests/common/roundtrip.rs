//! Checkpoint, resume and IDX round trips.

use bitshare::checkpoint::Checkpoint;
use bitshare::data::{encode_idx, load_mnist_idx, parse_idx_images, parse_idx_labels, synthetic, Dataset, SyntheticSpec};
use bitshare::supernet::{BitSpace, Supernet, Topology, TrainConfig, Trainer};
use bitshare::{CheckpointError, Error, IdxError};

use super::checks::Check;
use super::training::data_dir;

pub fn small_data() -> Dataset {
    synthetic(&SyntheticSpec { samples: 256, noise: 0.2, seed: 7, ..Default::default() }).unwrap()
}

pub fn small_trainer(data: &Dataset, epochs: usize) -> Trainer {
    let topo = Topology::reference_cnn();
    let space = BitSpace::new(topo.layers.len(), &[2, 3, 4, 5, 6], &[2, 3, 4, 5, 6], 8).unwrap();
    let model = Supernet::new(topo, space, 3).unwrap();
    let mut cfg = TrainConfig { epochs, batch_size: 32, warmup_epochs: 1, init_seed: 3, data_seed: 4, ..Default::default() };
    cfg.sampler.seed = 5;
    Trainer::new(model, cfg, data).unwrap()
}

fn bytes(t: &Trainer) -> Vec<u8> {
    Checkpoint::from_trainer(t, serde_json::Value::Null).to_bytes().unwrap()
}

/// save -> load -> save reproduces the bytes; restoring into a fresh model
/// gives identical parameters.
pub fn checkpoint_bit_exact() -> Check {
    let data = small_data();
    let mut t = small_trainer(&data, 2);
    t.train_epoch(&data, |_| {}).map_err(|e| e.to_string())?;
    let first = bytes(&t);
    let loaded = Checkpoint::from_bytes(&first).map_err(|e| e.to_string())?;
    let second = loaded.to_bytes().map_err(|e| e.to_string())?;
    if first != second {
        return Err("re-serialized checkpoint differs".into());
    }
    let mut fresh = small_trainer(&data, 2);
    loaded.restore_trainer(&mut fresh).map_err(|e| e.to_string())?;
    if fresh.model.params() != t.model.params() || bytes(&fresh) != first {
        return Err("restored trainer differs from the saved one".into());
    }
    Ok(format!("{} bytes round-trip exactly", first.len()))
}

/// Two epochs straight versus one epoch, checkpoint, restore, one epoch.
pub fn resume_bit_identical() -> Check {
    let data = small_data();
    let mut straight = small_trainer(&data, 2);
    while !straight.is_done() {
        straight.train_epoch(&data, |_| {}).map_err(|e| e.to_string())?;
    }
    let mut first = small_trainer(&data, 2);
    first.train_epoch(&data, |_| {}).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("ckpt.bin");
    Checkpoint::from_trainer(&first, serde_json::Value::Null).save(&path).map_err(|e| e.to_string())?;
    drop(first);
    let mut resumed = small_trainer(&data, 2);
    Checkpoint::load(&path).and_then(|c| c.restore_trainer(&mut resumed)).map_err(|e| e.to_string())?;
    while !resumed.is_done() {
        resumed.train_epoch(&data, |_| {}).map_err(|e| e.to_string())?;
    }
    if bytes(&straight) != bytes(&resumed) {
        return Err("resumed run diverged from the uninterrupted run".into());
    }
    Ok(format!("{} steps identical after resume", resumed.step()))
}

/// Loads the bundled gzip IDX files and rejects damaged variants.
pub fn idx_accepts_and_rejects() -> Check {
    let d = data_dir();
    let ds = load_mnist_idx(&d.join("mnist-10k-images-idx3-ubyte.gz"), &d.join("mnist-10k-labels-idx1-ubyte.gz"))
        .map_err(|e| e.to_string())?;
    if ds.len() != 10_000 || ds.sample_shape() != [1, 28, 28] {
        return Err(format!("unexpected bundled shape {} x {:?}", ds.len(), ds.sample_shape()));
    }
    let idx: Vec<usize> = (0..16).collect();
    let b = ds.batch(&idx);
    let (img, lab) = encode_idx(&b.images, &b.labels);
    let mut bad_magic = img.clone();
    bad_magic[3] = 0x01;
    let cases: Vec<(&str, Result<(), Error>)> = vec![
        ("bad magic", parse_idx_images(&bad_magic).map(|_| ()).map_err(Error::from)),
        ("truncated images", parse_idx_images(&img[..img.len() - 5]).map(|_| ()).map_err(Error::from)),
        ("truncated header", parse_idx_images(&img[..6]).map(|_| ()).map_err(Error::from)),
        ("labels as images", parse_idx_images(&lab).map(|_| ()).map_err(Error::from)),
        ("truncated labels", parse_idx_labels(&lab[..lab.len() - 1]).map(|_| ()).map_err(Error::from)),
    ];
    for (what, r) in &cases {
        match r {
            Err(Error::Idx(_)) => {}
            other => return Err(format!("{what}: expected an IDX error, got {other:?}")),
        }
    }
    Ok(format!("bundled 10k set parsed; {} corrupt variants rejected", cases.len()))
}

/// Version and topology checks on load.
pub fn checkpoint_guards() -> Check {
    let data = small_data();
    let t = small_trainer(&data, 1);
    let good = bytes(&t);
    let mut flipped = good.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    match Checkpoint::from_bytes(&flipped) {
        Err(Error::Checkpoint(CheckpointError::Corrupt(_))) => {}
        other => return Err(format!("flipped payload byte: {:?}", other.map(|_| ()))),
    }
    let text = String::from_utf8_lossy(&good).replacen("\"version\":1", "\"version\":99", 1);
    match Checkpoint::from_bytes(text.as_bytes()) {
        Err(Error::Checkpoint(CheckpointError::Version { found: 99, .. })) => {}
        other => return Err(format!("future version: {:?}", other.map(|_| ()))),
    }
    let ck = Checkpoint::from_bytes(&good).unwrap();
    let space = BitSpace::new(8, &[2, 3, 4], &[2, 3, 4], 8).unwrap();
    let mut other = Supernet::new(Topology::mini_vgg(), space, 0).unwrap();
    match ck.restore_model(&mut other) {
        Err(Error::Checkpoint(CheckpointError::TopologyMismatch { .. })) => {}
        other => return Err(format!("foreign topology: {other:?}")),
    }
    Ok("corrupt, future-version and foreign-topology checkpoints refused".into())
}

pub fn idx_error_kind(bytes: &[u8]) -> Option<IdxError> {
    parse_idx_images(bytes).err()
}
