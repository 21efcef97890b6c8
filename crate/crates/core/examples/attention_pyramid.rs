//! Runs the attention pyramid on random features and prints, per level,
//! the pooled side, the mask mass and the channel-averaged fusion weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapnet::autodiff::{Graph, ParamStore};
use sapnet::sap::{PyramidConfig, SapNet};
use sapnet::tensor::{NormMode, Tensor};

fn main() -> sapnet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = PyramidConfig::with_sizes(vec![3, 9, 15, 21, 27], 8);
    let (c_hat, guide, side) = (16, 4, 32);
    let mut store = ParamStore::new();
    let mut net = SapNet::new(cfg.clone(), c_hat, guide, &mut store, &mut rng)?;
    println!(
        "{} parameters in {} tensors",
        store.iter().map(|(_, p)| p.value.len()).sum::<usize>(),
        store.len()
    );
    println!("levels {:?}", cfg.level_sizes(side, side)?);

    let mut g = Graph::new();
    let mut rand_map = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let fs = vec![
        g.input(rand_map(&[c_hat, side, side])),
        g.input(rand_map(&[c_hat, side, side])),
    ];
    let ps = vec![
        Some(g.input(rand_map(&[guide, side, side]))),
        Some(g.input(rand_map(&[guide, side, side]))),
    ];
    let out = net.forward(&mut g, &store, &fs, &ps, NormMode::Train)?;
    for i in 0..2 {
        let st = out.attention_state(&g, i)?;
        println!("sample {i}: p(target) = {:.4}", st.probability);
        for (n, (m, phi)) in st.masks.iter().zip(st.mean_weights()).enumerate() {
            println!(
                "  level {n} k={:2} mask {:?} sum {:.6} peak {:.4} weight {:.4}",
                cfg.pool_sizes[n],
                m.shape(),
                m.sum(),
                m.data().iter().copied().fold(0.0, f64::max),
                phi
            );
        }
        let (err, min) = st.normalization_error();
        println!("  normalization error {err:.1e}, smallest mask entry {min:.1e}");
    }
    Ok(())
}
