//! Runs the full metric battery on both splits and writes the report files.
//!
//! `cargo run --release --example evaluate [work_dir] [threads]`
//!
//! Needs `<work_dir>/query`. Writes `<work_dir>/eval-train` and
//! `<work_dir>/eval-test`.

use std::path::PathBuf;

use cdface::corpus::{generate_corpus, load_corpus, CorpusConfig, Split};
use cdface::report::write_evaluation;
use cdface::trainer::{evaluate, Checkpoint};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let work = args.first().map(PathBuf::from).unwrap_or_else(|| "target/cdface-demo".into());
    let threads: usize = args.get(1).map_or(Ok(1), |s| s.parse())?;
    let ckpt = Checkpoint::load(&work.join("query"))?;
    let corpus = match load_corpus(&work.join("corpus")) {
        Ok(c) => c,
        Err(_) => generate_corpus(&CorpusConfig::default())?,
    };
    let (nl, nu) = (ckpt.config.querier.lip_samples, ckpt.config.querier.upper_samples);
    for (split, name) in [(Split::Train, "eval-train"), (Split::Test, "eval-test")] {
        let eval = evaluate(&ckpt, &corpus, split, nl, nu, threads)?;
        write_evaluation(&work.join(name), &eval)?;
        println!("== {name} ({} clips)\n{}", eval.clips.len(), eval.report.to_text());
    }
    Ok(())
}
