//! Keeps one lip track fixed and varies the upper face.
//!
//! `cargo run --release --example control [work_dir] [nu]`
//!
//! `nu` defaults to the trained N^u and cannot exceed it.
//!
//! The lip track is taken first from lip head 0 and then from explicit
//! codes of a previous rollout. Either way LPD is exactly zero.

use std::path::PathBuf;

use cdface::corpus::{generate_corpus, load_corpus, CorpusConfig, Split};
use cdface::metrics;
use cdface::querier::LipSource;
use cdface::trainer::Checkpoint;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let work = args.first().map(PathBuf::from).unwrap_or_else(|| "target/cdface-demo".into());
    let ckpt = Checkpoint::load(&work.join("query"))?;
    let nu: usize = args.get(1).map_or(Ok(ckpt.config.querier.upper_samples), |s| s.parse())?;
    let (store, model) = ckpt.model()?;
    let corpus = match load_corpus(&work.join("corpus")) {
        Ok(c) => c,
        Err(_) => generate_corpus(&CorpusConfig::default())?,
    };
    let part = &corpus.partition;

    for clip in corpus.split(Split::Test).take(3) {
        let style = model.style_index(clip.motion.subject_id())?;
        let earlier = model.rollout(&store, &clip.audio, style, 1, 1, clip.frames(), ckpt.fps)?;
        let sources = [
            ("head 0", LipSource::Sample(0)),
            ("saved codes", LipSource::Codes(earlier.lip.codes[0].clone())),
        ];
        for (label, source) in sources {
            let r = model.control(&store, &clip.audio, style, source, nu, ckpt.fps)?;
            println!(
                "{:<24} {:<11} LPD {:e}  UPD {:.4}",
                clip.name,
                label,
                metrics::lpd(&r.faces, part)?,
                metrics::upd(&r.faces, part)?
            );
        }
    }
    Ok(())
}
