//! One layer with batchwise dropout: the product of the kept submatrices
//! equals the masked full product on the kept columns, at a fraction of the
//! multiplications.

use batchwise_dropout::dropout::{sample_batchwise_exact, Rng};
use batchwise_dropout::tensor::{gather_cols, gather_submatrix, matmul, scatter_add_submatrix, Matrix};

fn main() -> batchwise_dropout::Result<()> {
    let (b, n_in, n_out) = (4, 10, 8);
    let mut rng = Rng::new(4, 0);
    let x = Matrix::<f64>::from_fn(b, n_in, |_, _| rng.uniform());
    let w = Matrix::<f64>::from_fn(n_in, n_out, |_, _| rng.uniform() - 0.5);
    let d_in = sample_batchwise_exact(n_in, 0.5, &mut rng)?;
    let d_out = sample_batchwise_exact(n_out, 0.5, &mut rng)?;
    let (k_in, k_out) = (d_in.keep_set().unwrap(), d_out.keep_set().unwrap());
    println!("kept inputs {:?}, kept outputs {:?}", k_in.as_slice(), k_out.as_slice());

    let compact = matmul(&gather_cols(&x, k_in)?, &gather_submatrix(&w, k_in, k_out)?)?;
    let mut masked = x.clone();
    d_in.apply(&mut masked)?;
    let full = gather_cols(&matmul(&masked, &w)?, k_out)?;
    let diff = compact.as_slice().iter().zip(full.as_slice()).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    println!("largest difference: {diff:e}");
    println!("multiplications: {} compact vs {} full", b * k_in.len() * k_out.len(), b * n_in * n_out);

    // A compact update lands only on the selected block.
    let mut target = Matrix::<f64>::zeros(n_in, n_out);
    scatter_add_submatrix(&mut target, k_in, k_out, &Matrix::filled(k_in.len(), k_out.len(), 1.0))?;
    for i in 0..n_in {
        let row: String = (0..n_out).map(|j| if target.get(i, j) != 0.0 { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    Ok(())
}
