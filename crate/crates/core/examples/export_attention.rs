//! Trains briefly, then dumps the per-level masks of one target scene as
//! PGM files plus the fusion weights.
//!
//! cargo run --release --example export_attention -- [out_dir]

use std::path::PathBuf;

use sapnet::config::RunConfig;
use sapnet::data::{generate, Domain};
use sapnet::export::export_attention;
use sapnet::train::Trainer;

fn main() -> sapnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sapnet_attention"));
    let mut run = RunConfig::default();
    run.train.iters = 120;
    run.train.pretrain_iters = 40;
    run.train.milestones = vec![100];
    let source = generate(&run.scene, Domain::Source, 40, 1);
    let target = generate(&run.scene, Domain::Target, 40, 2);
    let mut tr = Trainer::new(run)?;
    tr.train_until(&source, &target, usize::MAX, |_| {})?;

    let probe = generate(&tr.run.scene, Domain::Target, 1, 99).remove(0);
    let state = tr.net.attention(&probe.image.to_tensor())?;
    let pool_sizes = tr.net.cfg.pyramid.pool_sizes.clone();
    let files = export_attention(&state, &pool_sizes, &out)?;
    for (f, (k, phi)) in files
        .iter()
        .zip(pool_sizes.iter().zip(state.mean_weights()))
    {
        println!("k={k:2} weight {phi:.4} -> {}", f.display());
    }
    println!("p(target) = {:.4}", state.probability);
    Ok(())
}
