//! A short adaptation run next to its source-only twin, evaluated on
//! held-out target scenes. Numbers at this length are noisy; the full
//! schedule is what `sapnet train` runs by default.
//!
//! cargo run --release --example adapt_short -- [iters]

use sapnet::config::RunConfig;
use sapnet::data::{generate_splits, Domain};
use sapnet::train::{evaluate, split_domains, Trainer};

fn main() -> sapnet::Result<()> {
    let iters: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let base = RunConfig::default();
    let (train, test) = generate_splits(&base.scene, 0, 200, 60);
    let (source, target) = split_domains(train)?;
    let target_test: Vec<_> = test
        .into_iter()
        .filter(|s| s.domain == Domain::Target)
        .collect();

    for source_only in [true, false] {
        let mut run = RunConfig::default();
        let t = &mut run.train;
        t.iters = iters;
        t.pretrain_iters = iters / 9;
        t.milestones = vec![iters * 7 / 9, iters * 8 / 9];
        t.log_every = (iters / 6).max(1);
        if source_only {
            run.train = run.train.source_only();
        }
        let mut tr = Trainer::new(run)?;
        println!(
            "{}",
            if source_only {
                "source only"
            } else {
                "adapted, lambda=1"
            }
        );
        tr.train_until(&source, &target, usize::MAX, |row| {
            println!(
                "  iter {:5} task {:.4} adv {:.4} disc_acc {:.3} lr {:e}",
                row.iter, row.task_loss, row.adv_loss, row.disc_acc, row.lr
            )
        })?;
        let report = evaluate(&mut tr.net, &target_test, true)?;
        println!(
            "  target mIoU {:.4}, pixel acc {:.4}",
            report.miou, report.pixel_accuracy
        );
    }
    Ok(())
}
