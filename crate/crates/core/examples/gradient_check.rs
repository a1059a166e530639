//! Checks reverse-mode gradients of a small attention-style block against
//! central finite differences.
//!
//! ```text
//! cargo run --example gradient_check
//! cargo run --example gradient_check --features f64
//! ```

use ofat::numerics::rng::streams;
use ofat::numerics::{finite_diff_check, Graph, Real, Rng, Tensor, Var, LN_EPS};

fn random(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| (scale * rng.normal()) as Real).collect(),
    )
    .unwrap()
}

fn main() -> ofat::Result<()> {
    let mut rng = Rng::new(1, streams::PROBE);
    let (t, d) = (5, 8);
    let wq = random(&mut rng, &[d, d], 0.5);
    let wk = random(&mut rng, &[d, d], 0.5);
    let gain = Tensor::full(&[d], 1.0);
    let bias = Tensor::zeros(&[d]);
    let probe = random(&mut rng, &[t, d], 1.0);

    // normed input -> single-head attention -> gelu, contracted with a fixed probe
    let block = |g: &mut Graph, x: Var| -> ofat::Result<Var> {
        let (gain, bias) = (g.constant(gain.clone()), g.constant(bias.clone()));
        let h = g.layer_norm(x, gain, bias, LN_EPS)?;
        let (wq, wk) = (g.constant(wq.clone()), g.constant(wk.clone()));
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as Real).sqrt());
        let attn = g.softmax_lastdim(scores);
        let y = g.matmul(attn, h)?;
        let y = g.gelu(y);
        let p = g.constant(probe.clone());
        let yp = g.mul(y, p)?;
        Ok(g.sum(yp))
    };

    let step: Real = if cfg!(feature = "f64") { 1e-5 } else { 5e-3 };
    for trial in 0..5 {
        let x = random(&mut rng, &[t, d], 1.0);
        let r = finite_diff_check(block, &x, step)?;
        println!(
            "trial {trial}: max abs err {:.2e}, norm-relative err {:.2e}",
            r.max_abs_err, r.max_rel_err
        );
    }
    Ok(())
}
