//! Nearest-token quantization and token usage on a random codebook.
//!
//! `cargo run --example quantize [seed]`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdface::codebook::{Codebook, LatentFrame};
use cdface::geometry::Region;
use cdface::tensor::Matrix;

fn main() -> anyhow::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codebook = Codebook::random(8, 3, Region::Upper, &mut rng)?;

    let mut ids = Vec::new();
    for _ in 0..5 {
        let z = LatentFrame {
            embeddings: Matrix::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-0.2..0.2)).collect())?,
        };
        let q = codebook.quantize(&z)?;
        let again = codebook.quantize(&LatentFrame { embeddings: q.embeddings.clone() })?;
        assert_eq!(again, q);
        println!("z {:?} -> tokens {:?}", z.embeddings.data().iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>(), q.token_ids);
        ids.extend(q.token_ids);
    }
    println!("usage over {} embeddings: {:?}", ids.len(), codebook.usage(&ids));
    Ok(())
}
