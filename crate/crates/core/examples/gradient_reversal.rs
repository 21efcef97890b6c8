//! The reversal node is the identity going forward and multiplies the
//! upstream gradient by -λ going back. A shared weight feeding a
//! discriminator through it therefore moves against the discriminator.

use sapnet::autodiff::Graph;
use sapnet::tensor::Tensor;

fn main() -> sapnet::Result<()> {
    let x = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
    for lambda in [0.0, 0.1, 1.0] {
        let mut g = Graph::new();
        let w = g.variable(x.clone());
        let r = g.grad_reverse(w, lambda)?;
        // loss = sum(r^2), so d/dr = 2r
        let sq = g.mul(r, r)?;
        let loss = g.sum(sq);
        let grads = g.backward(loss)?;
        println!(
            "lambda={lambda:<4} forward={:?} grad={:?}",
            g.value(r).data(),
            grads.get(w).unwrap().data()
        );
    }

    // chaining two reversals multiplies the factors
    let mut g = Graph::new();
    let w = g.variable(x.clone());
    let a = g.grad_reverse(w, 0.5)?;
    let b = g.grad_reverse(a, 3.0)?;
    let loss = g.sum(b);
    let grads = g.backward(loss)?;
    println!(
        "two reversals (0.5, 3.0): grad={:?}",
        grads.get(w).unwrap().data()
    );
    Ok(())
}
