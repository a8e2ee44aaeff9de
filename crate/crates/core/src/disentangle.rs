//! Factor blocks and the distance-correlation independence penalty.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

/// Stabilizer under every square root of the distance correlation.
pub const DCOR_EPS: f64 = 1e-12;

/// `K` contiguous column blocks of one embedding matrix.
#[derive(Clone, Debug)]
pub struct FactorizedEmbeddings {
    pub blocks: Vec<Var>,
    pub width: usize,
}

impl FactorizedEmbeddings {
    pub fn num_factors(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_width(&self) -> usize {
        self.width / self.blocks.len()
    }

    /// Concatenation of all blocks.
    pub fn join(&self, tape: &mut Tape) -> Result<Var> {
        tape.concat(&self.blocks)
    }
}

pub fn check_factors(width: usize, factors: usize) -> Result<usize> {
    if factors == 0 || width % factors != 0 {
        return Err(Error::Config(format!(
            "factor count {factors} must divide embedding width {width}"
        )));
    }
    Ok(width / factors)
}

/// Block `k` holds columns `[k*d/K, (k+1)*d/K)`.
pub fn split(tape: &mut Tape, e: Var, factors: usize) -> Result<FactorizedEmbeddings> {
    let width = tape.shape(e).1;
    let w = check_factors(width, factors)?;
    let blocks = (0..factors)
        .map(|k| tape.slice_cols(e, k * w, (k + 1) * w))
        .collect::<Result<Vec<_>>>()?;
    Ok(FactorizedEmbeddings { blocks, width })
}

/// Distance correlation of two sample matrices with matching row counts,
/// using the biased (V-statistic) double-centering estimator:
///
/// ```text
/// dCor = sqrt(dCov²(X,Y)) / sqrt(sqrt(dVar²(X)) * sqrt(dVar²(Y)))
/// ```
///
/// Returns a constant zero when either sample set has vanishing distance
/// variance.
pub fn dcor(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let (n, _) = tape.shape(x);
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    if tape.shape(y).0 != n {
        return Err(Error::Shape {
            op: "dcor",
            lhs: tape.shape(x),
            rhs: tape.shape(y),
        });
    }
    let dx = tape.pairwise_distances(x);
    let a = tape.double_center(dx)?;
    let dy = tape.pairwise_distances(y);
    let b = tape.double_center(dy)?;
    let aa = tape.mul(a, a)?;
    let dvar_x = tape.mean(aa);
    let bb = tape.mul(b, b)?;
    let dvar_y = tape.mean(bb);
    if tape.value(dvar_x).item() < DCOR_EPS || tape.value(dvar_y).item() < DCOR_EPS {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let ab = tape.mul(a, b)?;
    let dcov_xy = tape.mean(ab);
    let num = tape.sqrt_eps(dcov_xy, DCOR_EPS);
    let sx = tape.sqrt_eps(dvar_x, DCOR_EPS);
    let sy = tape.sqrt_eps(dvar_y, DCOR_EPS);
    let prod = tape.mul(sx, sy)?;
    let den = tape.sqrt_eps(prod, DCOR_EPS);
    tape.div(num, den)
}

/// Distance correlation of plain matrices.
pub fn dcor_value(x: &Matrix, y: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let (vx, vy) = (tape.constant(x.clone()), tape.constant(y.clone()));
    let d = dcor(&mut tape, vx, vy)?;
    Ok(tape.value(d).item())
}

/// `sum_{k<k'} dcor(block_k, block_k')`; a constant zero for `K = 1`.
pub fn pairwise_block_dcor(tape: &mut Tape, f: &FactorizedEmbeddings) -> Result<Var> {
    let mut total = tape.constant(Matrix::scalar(0.0));
    for k in 0..f.blocks.len() {
        for k2 in (k + 1)..f.blocks.len() {
            let d = dcor(tape, f.blocks[k], f.blocks[k2])?;
            total = tape.add(total, d)?;
        }
    }
    Ok(total)
}

/// Independence penalty over a set of embedding matrices, each restricted to
/// its sampled rows before splitting into `factors` blocks.
pub fn independence_loss(
    tape: &mut Tape,
    matrices: &[(Var, &[usize])],
    factors: usize,
) -> Result<Var> {
    let mut total = tape.constant(Matrix::scalar(0.0));
    if factors == 1 {
        return Ok(total);
    }
    for &(m, rows) in matrices {
        let sampled = tape.gather_rows(m, rows)?;
        let f = split(tape, sampled, factors)?;
        let term = pairwise_block_dcor(tape, &f)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Mean pairwise block distance correlation of a plain embedding matrix;
/// zero when `K = 1`.
pub fn mean_block_dcor(e: &Matrix, factors: usize) -> Result<f64> {
    let w = check_factors(e.cols(), factors)?;
    if factors == 1 {
        return Ok(0.0);
    }
    let blocks: Vec<Matrix> = (0..factors).map(|k| e.slice_cols(k * w, (k + 1) * w)).collect();
    let mut sum = 0.0;
    let mut pairs = 0;
    for k in 0..factors {
        for k2 in (k + 1)..factors {
            sum += dcor_value(&blocks[k], &blocks[k2])?;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_contiguous_blocks() {
        let mut t = Tape::new();
        let e = t.constant(Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap());
        let f = split(&mut t, e, 2).unwrap();
        assert_eq!(t.value(f.blocks[0]).data(), &[1.0, 2.0]);
        assert_eq!(t.value(f.blocks[1]).data(), &[3.0, 4.0]);
        let one = split(&mut t, e, 1).unwrap();
        assert_eq!(t.value(one.blocks[0]), t.value(e));
        assert!(matches!(split(&mut t, e, 3), Err(Error::Config(_))));
    }

    #[test]
    fn dcor_needs_two_samples() {
        let x = Matrix::zeros(1, 2);
        assert!(matches!(dcor_value(&x, &x), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn dcor_self_is_one_and_constant_is_zero() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]]).unwrap();
        assert!((dcor_value(&x, &x).unwrap() - 1.0).abs() < 1e-10);
        let c = Matrix::filled(3, 2, 0.7);
        assert_eq!(dcor_value(&x, &c).unwrap(), 0.0);
        assert_eq!(dcor_value(&c, &x).unwrap(), 0.0);
    }

    #[test]
    fn identical_blocks_contribute_one_each() {
        let mut t = Tape::new();
        let half = vec![vec![0.1, 0.9], vec![-0.4, 0.3], vec![0.8, -0.2], vec![0.0, 0.5]];
        let rows: Vec<Vec<f64>> = half.iter().map(|r| [r.clone(), r.clone()].concat()).collect();
        let e = t.constant(Matrix::from_rows(&rows).unwrap());
        let idx = [0, 1, 2, 3];
        let loss = independence_loss(&mut t, &[(e, &idx), (e, &idx)], 2).unwrap();
        assert!((t.value(loss).item() - 2.0).abs() < 1e-10);
        let zero = independence_loss(&mut t, &[(e, &idx)], 1).unwrap();
        assert_eq!(t.value(zero).item(), 0.0);
    }
}
