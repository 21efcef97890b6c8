//! Generates paired source/target scenes and writes them as PPM/PGM.
//!
//! cargo run --example synth_scenes -- [out_dir]

use std::path::PathBuf;

use sapnet::data::{
    class_frequencies, generate, generate_one, save_dataset, Domain, SceneSpec, NUM_CLASSES,
};

fn main() -> sapnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sapnet_scenes"));
    let spec = SceneSpec::default();

    // same index, same geometry; only the appearance shifts
    let s = generate_one(&spec, Domain::Source, 7, 0);
    let t = generate_one(&spec, Domain::Target, 7, 0);
    let same_labels = s.labels == t.labels;
    let mean_shift: f64 = s
        .image
        .rgb
        .iter()
        .zip(&t.image.rgb)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum::<f64>()
        / s.image.rgb.len() as f64;
    println!(
        "index 0: labels shared {same_labels}, mean |source - target| = {mean_shift:.1} levels"
    );

    let src = generate(&spec, Domain::Source, 200, 7);
    let tgt = generate(&spec, Domain::Target, 200, 7);
    let (fs, ft) = (
        class_frequencies(&src, NUM_CLASSES),
        class_frequencies(&tgt, NUM_CLASSES),
    );
    for c in 0..NUM_CLASSES {
        println!("class {c}: source {:.3} target {:.3}", fs[c], ft[c]);
    }

    let mut both = src[..4].to_vec();
    both.extend_from_slice(&tgt[..4]);
    save_dataset(&out, &both, |_| true)?;
    println!("wrote {} scenes to {}", both.len(), out.display());
    Ok(())
}
