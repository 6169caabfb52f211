//! Differentiate a small expression and compare against central differences.

use sign::diffmath::{finite_difference_check, Graph, Tensor};
use sign::seeds;

fn main() -> sign::Result<()> {
    let mut rng = seeds::stream(&[1]);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 2], 1.0, &mut rng);

    // loss = mean(log_softmax(tanh(x) @ w))
    let f = |g: &mut Graph, x| {
        let h = g.tanh(x);
        let k = g.constant(w.clone());
        let y = g.matmul(h, k)?;
        let y = g.log_softmax(y, 1)?;
        Ok(g.mean_all(y))
    };

    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let loss = f(&mut g, leaf)?;
    let grads = g.backward(loss)?;
    println!("loss {:.6}", g.value(loss).item()?);
    println!("d loss / d x = {:?}", grads.wrt(leaf).map(|t| t.data().to_vec()));

    let report = finite_difference_check(f, &x, 1e-3, 1e-5)?;
    println!(
        "gradcheck over {} coordinates: pass {} (max abs err {:.2e})",
        report.checked, report.pass, report.max_abs_err
    );
    Ok(())
}
