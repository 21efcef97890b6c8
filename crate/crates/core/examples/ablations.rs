//! Builds the model under each ablation and reports what changes:
//! parameter count, the guided conv's input width, and the fused vector.

use sapnet::cli::{build_run_config, Ablation};
use sapnet::data::{generate, Domain};
use sapnet::tasknet::Network;

fn main() -> sapnet::Result<()> {
    let variants: [(&str, &[Ablation]); 5] = [
        ("full", &[]),
        ("w/o GM", &[Ablation::Gm]),
        ("w/o CA", &[Ablation::Ca]),
        ("w/o SA", &[Ablation::Sa]),
        ("maxpool", &[Ablation::Maxpool]),
    ];
    let image = generate(&sapnet::data::SceneSpec::default(), Domain::Target, 1, 5)
        .remove(0)
        .image
        .to_tensor();
    for (name, abl) in variants {
        let run = build_run_config(None, None, abl, None, None, None, false, &[])
            .map_err(|e| sapnet::Error::Config(e.message))?;
        let mut net = Network::new(run.model, 0)?;
        let params: usize = net.store.iter().map(|(_, p)| p.value.len()).sum();
        let guided = net.sap.guided_input_channels(&net.store);
        let st = net.attention(&image)?;
        println!(
            "{name:8} params {params:6} guided-in {guided:?} levels {} weights {:?} p(target) {:.4}",
            st.vectors.len(),
            st.mean_weights().iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>(),
            st.probability
        );
    }
    Ok(())
}
