use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{CosError, Result};

/// Lower bound on the denominator of the relative error, so that entries
/// whose true gradient is zero are judged on absolute agreement.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` against central differences over
/// every element of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_sampled(f, params, h, tol, None, 0)
}

/// Like [`grad_check`], but checks at most `max_entries` elements chosen
/// uniformly with `seed` when a limit is given.
pub fn grad_check_sampled<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
    max_entries: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();
    drop(tape);

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.leaf(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CosError::NonFinite { op: "grad_check" })
        }
    };

    let mut entries: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |e| (pi, e)))
        .collect();
    if let Some(limit) = max_entries {
        if limit < entries.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = sample(&mut rng, entries.len(), limit).into_vec();
            picked.sort_unstable();
            entries = picked.into_iter().map(|i| entries[i]).collect();
        }
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
        tol,
        passed: true,
    };
    for (pi, e) in entries {
        let orig = work[pi].data()[e];
        work[pi].data_mut()[e] = orig + h;
        let plus = eval(&work)?;
        work[pi].data_mut()[e] = orig - h;
        let minus = eval(&work)?;
        work[pi].data_mut()[e] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[pi].data()[e];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_ABS_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((pi, e));
        }
        report.checked += 1;
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_sum() {
        let x = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let m = t.mean(sq)?;
                t.scale(m, 2.0)
            },
            &[x],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let z = t.scale(v[0], 0.0)?;
                t.mean(z)
            },
            &[x],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert_eq!(r.max_abs_error, 0.0);
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn detects_non_finite() {
        let x = Tensor::new([1, 1], vec![700.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.scale(v[0], 1e308)?;
                t.mean(y)
            },
            &[x],
            1e-5,
            1e-3,
        );
        assert!(r.is_err());
    }

    fn random(shape: [usize; 2], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Each differentiable op on a random small shape.
    #[test]
    fn every_op_matches_central_differences() {
        let a = random([3, 4], 1);
        let b = random([4, 2], 2);
        let c = random([3, 4], 3);
        let g = Tensor::randn([4], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let bias = Tensor::randn([4], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let w = random([2, 3], 6);
        let params = [a, b, c, g, bias, w];
        let r = grad_check(
            |t, v| {
                let ab = t.matmul(v[0], v[1])?; // 3x2
                let sm = t.softmax_rows(ab)?;
                let ln = t.layer_norm(v[2], v[3], v[4], 1e-5)?; // 3x4
                let ge = t.gelu(ln)?;
                let pr = t.mul(ge, v[2])?;
                let tr = t.transpose(pr)?; // 4x3
                let rs = t.reshape(tr, &[3, 4])?;
                let diff = t.sub(rs, v[0])?;
                let s1 = t.slice_cols(diff, 1, 3)?; // 3x2
                let g1 = t.gather_rows(s1, &[2, 0, 2])?;
                let cc = t.concat_cols(&[g1, sm])?; // 3x4
                let cr = t.concat_rows(&[cc, ln])?; // 6x4
                let sc = t.scale(cr, 0.7)?;
                let wt = t.matmul(v[5], sm)?; // 2x2
                let sq = t.mul(sc, sc)?;
                let m1 = t.mean(sq)?;
                let m2 = t.mean(wt)?;
                t.add(m1, m2)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, 12 + 8 + 12 + 4 + 4 + 6);
    }

    #[test]
    fn sampled_subset_is_bounded() {
        let x = random([4, 4], 8);
        let r = grad_check_sampled(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.mean(sq)
            },
            &[x],
            1e-5,
            1e-6,
            Some(5),
            1,
        )
        .unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.passed);
    }
}
