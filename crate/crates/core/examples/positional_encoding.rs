//! Relative encodings agree across grid sizes where absolute ones do not.

use sign::posenc::{build_pe_map, PeMode};

fn gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() -> sign::Result<()> {
    for mode in [PeMode::Rpe, PeMode::Ape] {
        let small = build_pe_map(4, 4, mode, None)?;
        let big = build_pe_map(8, 8, mode, None)?;
        let worst = (0..4)
            .flat_map(|r| (0..4).map(move |c| (r, c)))
            .map(|(r, c)| gap(&small.column(r, c), &big.column(2 * r, 2 * c)))
            .fold(0.0, f64::max);
        let norm: f64 = small.column(1, 2).iter().map(|v| v * v).sum();
        println!("{mode:?}: squared norm {norm:.6}, 4x4 vs 8x8 column gap {worst:.3e}");
    }
    let interp = build_pe_map(8, 8, PeMode::ApeInterp, Some((4, 4)))?;
    let train = build_pe_map(4, 4, PeMode::Ape, None)?;
    println!(
        "ape-interp 8x8 from 4x4: far corner gap {:.3e}",
        gap(&interp.column(7, 7), &train.column(3, 3))
    );
    Ok(())
}
