//! Full toy pipeline: corpus, priors, queriers, evaluation.
//!
//! `cargo run --release --example toy_pipeline [config.toml]`

use std::time::Instant;

use cdface::corpus::{generate_corpus, CorpusConfig, Split};
use cdface::trainer::{evaluate, prior_rms, train_prior, train_query, RunLog, TrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let config = match std::env::args().nth(1) {
        Some(path) => TrainConfig::load(path.as_ref())?,
        None => TrainConfig::toy(),
    };
    let corpus = generate_corpus(&CorpusConfig::default())?;

    let t = Instant::now();
    let mut log = RunLog::in_memory();
    let priors = train_prior(&config, &corpus, None, &mut log)?;
    println!("priors trained in {:.1}s", t.elapsed().as_secs_f64());
    let (store, p) = priors.priors()?;
    let clips: Vec<_> = corpus.split(Split::Test).collect();
    println!(
        "prior RMS on test clips: lip {:.4}, upper {:.4}",
        prior_rms(&store, &p.lip, &clips, &corpus.partition)?,
        prior_rms(&store, &p.upper, &clips, &corpus.partition)?
    );

    let t = Instant::now();
    let query = train_query(&config, &corpus, &priors, None, &mut log)?;
    println!("queriers trained in {:.1}s", t.elapsed().as_secs_f64());
    for r in log.records.iter().filter(|r| r.epoch % 10 == 0) {
        println!("{} {:>4} {:?}", r.phase, r.epoch, r.values);
    }
    let (nl, nu) = (config.querier.lip_samples, config.querier.upper_samples);
    for split in [Split::Train, Split::Test] {
        let e = evaluate(&query, &corpus, split, nl, nu, 4)?;
        println!("== {split:?}\n{}", e.report.to_text());
        let mut worst = f64::INFINITY;
        for c in &e.clips {
            let clip = corpus.clip(&c.clip).expect("evaluated clip exists");
            let ratio = c.report.get("APD").unwrap_or(0.0) / corpus.inter_style_apd(clip.sentence)?;
            worst = worst.min(ratio);
        }
        println!("smallest per-clip APD / inter-style APD: {worst:.3}");
    }
    Ok(())
}
