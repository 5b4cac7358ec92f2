//! Loads the bundled MNIST subset from gzip IDX files and prints its shape,
//! class balance and pixel statistics.
//!
//! cargo run --example load_idx -- [images.idx3-ubyte[.gz] labels.idx1-ubyte[.gz]]

use std::path::{Path, PathBuf};

use bitshare::data::load_mnist_idx;

fn main() -> bitshare::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (images, labels) = match args.as_slice() {
        [i, l] => (PathBuf::from(i), PathBuf::from(l)),
        _ => {
            let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
            (root.join("mnist-10k-images-idx3-ubyte.gz"), root.join("mnist-10k-labels-idx1-ubyte.gz"))
        }
    };
    let data = load_mnist_idx(&images, &labels)?;
    println!("{} samples of shape {:?}, {} classes", data.len(), data.sample_shape(), data.classes);
    let mut counts = vec![0usize; data.classes];
    for &l in &data.labels {
        counts[l] += 1;
    }
    println!("per class: {counts:?}");
    let px = data.images.data();
    let mean = px.iter().map(|&v| v as f64).sum::<f64>() / px.len() as f64;
    let on = px.iter().filter(|&&v| v > 0.5).count() as f64 / px.len() as f64;
    println!("pixel mean {mean:.4}, fraction above 0.5 {on:.4}");
    Ok(())
}
