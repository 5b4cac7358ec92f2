//! Diagnostics on a briefly trained supernet: distance of latent weights to
//! each bit's level set, output densities at 2 and 6 bits, and the max-bit
//! loss change caused by one uniform low-bit gradient step.
//!
//! cargo run --release --example supernet_probes

use bitshare::analysis::{loss_perturbation_probe, output_density, symmetric_kl, weight_distances};
use bitshare::data::{synthetic, SyntheticSpec};
use bitshare::supernet::{BitSpace, Supernet, Topology, TrainConfig, Trainer};

fn main() -> bitshare::Result<()> {
    let data = synthetic(&SyntheticSpec { samples: 512, noise: 0.3, seed: 4, ..Default::default() })?;
    let topo = Topology::reference_cnn();
    let space = BitSpace::new(topo.layers.len(), &[2, 3, 4, 5, 6], &[2, 3, 4, 5, 6], 8)?;
    let model = Supernet::new(topo, space.clone(), 0)?;
    let cfg = TrainConfig { epochs: 2, batch_size: 32, warmup_epochs: 1, ..Default::default() };
    let mut trainer = Trainer::new(model, cfg, &data)?;
    while !trainer.is_done() {
        trainer.train_epoch(&data, |_| {})?;
    }
    let model = &trainer.model;
    let layer = 1;

    let bits = [2u8, 3, 4, 5, 6];
    let d = weight_distances(model, layer, &bits)?;
    for (b, v) in bits.iter().zip(&d) {
        println!("layer {layer}: ||W - Q_{b}(W)|| = {v:.5}");
    }

    let calib: Vec<_> = data.batches(64).take(4).collect();
    let probe: Vec<usize> = (0..256).collect();
    let dens = output_density(model, layer, &[2, 6], &data.batch(&probe), 40, &calib, trainer.step())?;
    println!("2-bit vs 6-bit output density, symmetric KL {:.4}", symmetric_kl(&dens[0].density, &dens[1].density, 1e-6)?);

    let high = space.max_policy();
    let batch = data.batch(&(256..320).collect::<Vec<_>>());
    for low_bits in [2u8, 5] {
        let low = space.uniform_policy(low_bits)?;
        let dl = loss_perturbation_probe(model, &high, &low, &batch, 0.04)?;
        println!("max-bit loss change after one {low_bits}-bit step: {dl:+.5}");
    }
    Ok(())
}
