//! Diffusion convolution on a three-node chain, checked against explicit
//! matrix powers.

use stseq2seq::graph::diffusion_conv_values;
use stseq2seq::{Tensor, TrafficGraph};

fn main() -> stseq2seq::Result<()> {
    // 0 -> 1 -> 2 with self-loops
    let a = Tensor::from_rows(&[&[1.0, 1.0, 0.0], &[0.0, 1.0, 1.0], &[0.0, 0.0, 1.0]])?;
    let graph = TrafficGraph::from_adjacency(a)?;
    println!("M_f = {:?}", graph.m_forward().data());
    println!("M_b = {:?}", graph.m_backward().data());

    // a signal at the downstream end spreads upstream through M_f
    let x = Tensor::from_rows(&[&[0.0], &[0.0], &[1.0]])?;
    let one = Tensor::from_rows(&[&[1.0]])?;
    let zero = Tensor::from_rows(&[&[0.0]])?;
    for k in 0..=2 {
        // keep only the k-th forward term
        let wf: Vec<Tensor> = (0..=k).map(|i| if i == k { one.clone() } else { zero.clone() }).collect();
        let wb = vec![zero.clone(); k + 1];
        let y = diffusion_conv_values(&graph, &x, k, &wf, &wb)?;
        let mut power = Tensor::identity(3);
        for _ in 0..k {
            power = power.matmul(graph.m_forward())?;
        }
        let explicit = power.matmul(&x)?;
        println!("M_f^{k} x = {:?}  (explicit {:?})", y.data(), explicit.data());
    }
    Ok(())
}
