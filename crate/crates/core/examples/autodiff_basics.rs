//! Builds a small graph, runs the reverse pass and checks the gradient
//! against finite differences.

use multibreath::autodiff::{gradient_check, Graph, ParameterSet, Tensor};

fn main() -> multibreath::Result<()> {
    let mut params = ParameterSet::<f64>::new();
    params.insert("w", Tensor::new(&[2, 3], vec![0.5, -1.0, 0.25, 2.0, 0.1, -0.3])?)?;
    params.insert("x", Tensor::new(&[3, 1], vec![1.0, 2.0, -1.5])?)?;

    // loss = sum(sigmoid(W x))
    let loss = |g: &mut Graph<f64>, p: &ParameterSet<f64>| {
        let w = g.param(p, "w")?;
        let x = g.param(p, "x")?;
        let y = g.matmul(w, x)?;
        let s = g.sigmoid(y)?;
        g.sum_all(s)
    };

    let mut g = Graph::new();
    let l = loss(&mut g, &params)?;
    let mut with_grads = params.clone();
    g.backward(l, &mut with_grads)?;
    println!("loss = {:.6}", g.value(l).data()[0]);
    for (name, t) in with_grads.iter() {
        println!("d loss / d {name} = {:?}", t.grad().unwrap());
    }

    let report = gradient_check(&params, loss, 1e-5, 1e-6)?;
    println!("max relative error vs finite differences: {:.2e}", report.max_rel_error());
    Ok(())
}
