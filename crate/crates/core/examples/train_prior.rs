//! Trains the lip and upper-face VQ priors on the synthetic corpus and
//! saves a prior checkpoint.
//!
//! `cargo run --release --example train_prior [work_dir] [epochs]`
//!
//! Reads `<work_dir>/corpus` when present (see the `gen_corpus` example),
//! otherwise generates the default corpus.

use std::path::PathBuf;

use cdface::corpus::{generate_corpus, load_corpus, CorpusConfig, Split};
use cdface::trainer::{prior_rms, train_prior, RunLog, TrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let work = args.next().map(PathBuf::from).unwrap_or_else(|| "target/cdface-demo".into());
    let mut config = TrainConfig::toy();
    if let Some(epochs) = args.next() {
        config.prior.epochs = epochs.parse()?;
    }
    let corpus = match load_corpus(&work.join("corpus")) {
        Ok(c) => c,
        Err(_) => generate_corpus(&CorpusConfig::default())?,
    };

    let mut log = RunLog::to_file(work.join("prior").join("log.jsonl"));
    let ckpt = train_prior(&config, &corpus, None, &mut log)?;
    ckpt.save(&work.join("prior"))?;

    for phase in ["prior.lip", "prior.upper"] {
        if let Some(last) = log.records.iter().rev().find(|r| r.phase == phase) {
            println!("{phase}: epoch {} {:?}", last.epoch, last.values);
        }
    }
    let (store, priors) = ckpt.priors()?;
    let test: Vec<_> = corpus.split(Split::Test).collect();
    println!(
        "held-out per-vertex RMS: lip {:.4}, upper {:.4}",
        prior_rms(&store, &priors.lip, &test, &corpus.partition)?,
        prior_rms(&store, &priors.upper, &test, &corpus.partition)?
    );
    println!("prior hash {}", ckpt.prior_checksum);
    Ok(())
}
