//! The training terms and evaluation metrics on small hand-made inputs.
//!
//! `cargo run --example losses_and_metrics`

use cdface::codebook::Codebook;
use cdface::geometry::{closure_mask, ClosureMask, MotionSequence, Region, RegionPartition};
use cdface::losses::{
    code_regularizer, diversity_loss, lip_diversity_loss, lip_reconstruction_loss, min_reconstruction_loss, MinScope,
};
use cdface::metrics;
use cdface::tensor::Matrix;

fn frames(rows: &[[f64; 6]]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).expect("rectangular")
}

fn main() -> anyhow::Result<()> {
    // two-vertex lip region, three frames; the middle frame is a closure
    let gt = frames(&[[0.0, 0.5, 0.0, 0.0, -0.5, 0.0], [0.0; 6], [0.0, 0.4, 0.0, 0.0, -0.4, 0.0]]);
    let a = frames(&[[0.0, 0.6, 0.0, 0.0, -0.6, 0.0], [0.0, 0.2, 0.0, 0.0, -0.2, 0.0], [0.0, 0.3, 0.0, 0.0, -0.3, 0.0]]);
    let b = frames(&[[0.1, 0.5, 0.0, 0.1, -0.5, 0.0], [0.0, 0.05, 0.0, 0.0, -0.05, 0.0], [0.0, 0.5, 0.0, 0.0, -0.5, 0.0]]);
    let samples = [a, b];

    let apertures: Vec<f64> = (0..3).map(|t| (gt.get(t, 1) - gt.get(t, 4)).abs()).collect();
    let mask: ClosureMask = closure_mask(&apertures, 0.05)?;
    println!("ground-truth apertures {apertures:?} -> open mask {:?}", mask.values());

    println!("diversity              {:.4}", diversity_loss(&samples)?);
    println!("lip diversity (masked) {:.4}", lip_diversity_loss(&samples, &mask)?);
    println!("min-of-N per frame     {:.4}", min_reconstruction_loss(&samples, &gt, MinScope::PerFrame)?);
    println!("min-of-N per sequence  {:.4}", min_reconstruction_loss(&samples, &gt, MinScope::PerSequence)?);
    println!("lip reconstruction     {:.4}", lip_reconstruction_loss(&samples, &gt, &mask, MinScope::PerFrame)?);
    println!("  all-open mask        {:.4}", lip_reconstruction_loss(&samples, &gt, &ClosureMask::all_open(3), MinScope::PerFrame)?);

    let codebook = Codebook::new(Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]])?, Region::Lip)?;
    let codes = Matrix::from_rows(&[vec![0.1, 0.0], vec![0.9, 0.2]])?;
    println!("code regularizer       {:.4}", code_regularizer(&[codes], &codebook)?);

    // metrics on a four-vertex face: vertices 0 and 1 are lips
    let part = RegionPartition::new(4, vec![0, 1], vec![2, 3], (0, 1))?;
    let face = |lip: f64, brow: f64| {
        let rows = vec![vec![0.0, lip, 0.0, 0.0, -lip, 0.0, 0.0, brow, 0.0, 0.0, brow, 0.0]; 2];
        MotionSequence::new(Matrix::from_rows(&rows).expect("rectangular"), 25.0).expect("finite")
    };
    let truth = face(0.5, 0.1);
    let outs = [face(0.4, 0.1), face(0.4, 0.3), face(0.6, 0.0)];
    println!("LVE  {:.4}", metrics::lve(&outs[0], &truth, &part)?);
    println!("MVE  {:.4}", metrics::mve(&outs[0], &truth)?);
    println!("FDD  {:.4}", metrics::fdd(&outs[0], &truth, &part)?);
    println!("ALVE {:.4}", metrics::alve(&outs, &truth, &part)?);
    println!("APD  {:.4}  UPD {:.4}  LPD {:.4}  MPD {:.4}",
        metrics::apd(&outs)?,
        metrics::upd(&outs, &part)?,
        metrics::lpd(&outs, &part)?,
        metrics::mpd(&outs)?
    );
    Ok(())
}
