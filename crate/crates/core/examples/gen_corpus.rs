//! Generates the synthetic two-style corpus, saves it and prints what it
//! holds.
//!
//! `cargo run --release --example gen_corpus [out_dir]`

use std::path::PathBuf;

use cdface::corpus::{generate_corpus, load_corpus, save_corpus, CorpusConfig, Split};
use cdface::geometry::lip_aperture;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "target/cdface-demo/corpus".into());
    let cfg = CorpusConfig::default();
    let corpus = generate_corpus(&cfg)?;
    save_corpus(&out, &corpus)?;
    let back = load_corpus(&out)?;
    assert_eq!(back.clips.len(), corpus.clips.len());

    println!(
        "{} styles x {} sentences, V = {}, {} frames at {} fps -> {}",
        cfg.styles,
        cfg.sentences,
        cfg.vertices,
        cfg.frames,
        cfg.fps,
        out.display()
    );
    println!(
        "{} train clips, {} held-out clips",
        corpus.split(Split::Train).count(),
        corpus.split(Split::Test).count()
    );
    for clip in corpus.clips.iter().take(4) {
        let ap = lip_aperture(&clip.motion, &corpus.template, &corpus.partition)?;
        let closed = clip.mask_gt.closed_frames().count();
        let max = ap.iter().copied().fold(0.0, f64::max);
        println!(
            "{:<24} style {} closed frames {:>2}  max aperture {:.3}  inter-style APD {:.3}",
            clip.name,
            clip.style,
            closed,
            max,
            corpus.inter_style_apd(clip.sentence)?
        );
    }
    Ok(())
}
