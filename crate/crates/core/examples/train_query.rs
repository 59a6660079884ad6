//! Trains the lip and upper code queriers on frozen priors.
//!
//! `cargo run --release --example train_query [work_dir] [epochs]`
//!
//! Uses `<work_dir>/prior` from the `train_prior` example and writes
//! `<work_dir>/query`.

use std::path::PathBuf;

use cdface::corpus::{generate_corpus, load_corpus, CorpusConfig};
use cdface::trainer::{train_query, Checkpoint, RunLog, TrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let work = args.next().map(PathBuf::from).unwrap_or_else(|| "target/cdface-demo".into());
    let priors = Checkpoint::load(&work.join("prior"))?;
    let mut config = TrainConfig {
        prior_model: priors.config.prior_model,
        ..TrainConfig::toy()
    };
    if let Some(epochs) = args.next() {
        config.query.epochs = epochs.parse()?;
    }
    let corpus = match load_corpus(&work.join("corpus")) {
        Ok(c) => c,
        Err(_) => generate_corpus(&CorpusConfig::default())?,
    };

    let mut log = RunLog::to_file(work.join("query").join("log.jsonl"));
    let ckpt = train_query(&config, &corpus, &priors, None, &mut log)?;
    ckpt.save(&work.join("query"))?;

    let every = (config.query.epochs / 5).max(1);
    for r in log.records.iter().filter(|r| r.epoch % every == 0) {
        println!(
            "{:<12} epoch {:>4}  L_lip {:>9.4}  L_upper {:>9.4}",
            r.phase,
            r.epoch,
            r.values.get("L_lip").copied().unwrap_or(f64::NAN),
            r.values.get("L_upper").copied().unwrap_or(f64::NAN)
        );
    }
    println!("query checkpoint in {} (prior hash unchanged: {})", work.join("query").display(), ckpt.prior_checksum == priors.prior_checksum);
    Ok(())
}
