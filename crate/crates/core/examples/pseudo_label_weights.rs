//! Annealed weights versus hard top-fraction selection on one confidence map.

use sign::diffmath::Tensor;
use sign::losses::{ast_weights, st_mask};

fn main() -> sign::Result<()> {
    let conf = Tensor::from_vec(vec![0.98, 0.91, 0.85, 0.72, 0.64, 0.55, 0.41, 0.30]);
    let keep = st_mask(&conf, 0.75)?;
    println!("confidence  st(0.75)  ast(T=0.5)  ast(T=2)  ast(T=8)");
    let ws: Vec<Tensor> = [0.5, 2.0, 8.0].iter().map(|&t| ast_weights(&conf, t)).collect::<sign::Result<_>>()?;
    for i in 0..conf.len() {
        println!(
            "{:>10.2}  {:>8}  {:>10.3}  {:>8.3}  {:>8.3}",
            conf.data()[i],
            if keep.mask[i] { 1 } else { 0 },
            ws[0].data()[i],
            ws[1].data()[i],
            ws[2].data()[i]
        );
    }
    Ok(())
}
