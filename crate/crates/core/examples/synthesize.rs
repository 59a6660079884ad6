//! Rolls out N^l x N^u faces for one held-out clip and prints their
//! diversity and lip apertures.
//!
//! `cargo run --release --example synthesize [work_dir] [nl] [nu]`
//!
//! Needs `<work_dir>/query` from the `train_query` example.

use std::path::PathBuf;

use cdface::corpus::{generate_corpus, load_corpus, CorpusConfig, Split};
use cdface::geometry::lip_aperture;
use cdface::metrics;
use cdface::trainer::Checkpoint;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let work = args.first().map(PathBuf::from).unwrap_or_else(|| "target/cdface-demo".into());
    let nl: usize = args.get(1).map_or(Ok(2), |s| s.parse())?;
    let nu: usize = args.get(2).map_or(Ok(2), |s| s.parse())?;
    let ckpt = Checkpoint::load(&work.join("query"))?;
    let (store, model) = ckpt.model()?;
    let corpus = match load_corpus(&work.join("corpus")) {
        Ok(c) => c,
        Err(_) => generate_corpus(&CorpusConfig::default())?,
    };
    let clip = corpus.split(Split::Test).next().expect("corpus has held-out clips");
    let style = model.style_index(clip.motion.subject_id())?;

    let rollout = model.rollout(&store, &clip.audio, style, nl, nu, clip.frames(), ckpt.fps)?;
    let part = &corpus.partition;
    println!("{}: {} faces from {} lip samples", clip.name, rollout.faces.len(), nl);
    if rollout.faces.len() > 1 {
        println!(
            "APD {:.4}  UPD {:.4}  LPD {:.4}  MPD {:.4}",
            metrics::apd(&rollout.faces)?,
            metrics::upd(&rollout.faces, part)?,
            metrics::lpd(&rollout.faces, part)?,
            metrics::mpd(&rollout.faces)?
        );
    }
    let gt = lip_aperture(&clip.motion, &corpus.template, part)?;
    let curves: Vec<Vec<f64>> = rollout
        .faces
        .iter()
        .map(|f| lip_aperture(f, &corpus.template, part))
        .collect::<Result<_, _>>()?;
    println!("frame  closed  truth  samples");
    for t in 0..clip.frames() {
        let closed = if clip.mask_gt.values()[t] { "" } else { "*" };
        let row: Vec<String> = curves.iter().map(|c| format!("{:.3}", c[t])).collect();
        println!("{t:>5}  {closed:>6}  {:.3}  {}", gt[t], row.join(" "));
    }
    Ok(())
}
