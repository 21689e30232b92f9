//! Scratch-trains the metric on the synthetic toy corpus and reports held-out
//! accuracy and rho/distance rank correlation.
//!
//! `cargo run --release -p jnd-core --example toy_training -- [epochs] [score_every]`

use std::time::Instant;

use jnd_core::metric::{MetricModel, NetConfig, Trainer};
use jnd_core::toy::{score, train_config, ToyCorpus, ToySpec};
use jnd_core::PerturbContext;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(Ok(50), |s| s.parse())?;
    let every: usize = args.next().map_or(Ok(10), |s| s.parse())?;
    let start = Instant::now();
    let corpus = ToyCorpus::generate(&ToySpec::default(), &PerturbContext::builtin())?;
    let pairs = corpus.train_pairs();
    let mut trainer = Trainer::new(
        MetricModel::<f32>::init(NetConfig::default(), 1)?,
        train_config(1, 1),
    )?;
    for epoch in 0..epochs {
        let stats = trainer.fit(&pairs, |_| {})?;
        let (a, b) = trainer.model.head();
        println!(
            "epoch {epoch} loss {:.4} head ({a:.3}, {b:.3}) t {:.0}s",
            stats[0].mean_loss,
            start.elapsed().as_secs_f64()
        );
        if (epoch + 1) % every == 0 || epoch + 1 == epochs {
            let s = score(&trainer.model, &corpus)?;
            println!(
                "  held-out accuracy {:.3} spearman {:.3}",
                s.accuracy, s.spearman
            );
        }
    }
    Ok(())
}
