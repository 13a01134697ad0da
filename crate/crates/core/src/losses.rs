//! Alignment objectives between token embeddings `e` and pooled visual
//! features `t`, with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::linalg::{sigmoid, softplus};
use crate::tensorcore::{dot, norm};

/// Token-embedding / pooled-feature pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    pub e: Vec<Vec<f64>>,
    pub t: Vec<Vec<f64>>,
}

impl AlignmentBatch {
    pub fn new(e: Vec<Vec<f64>>, t: Vec<Vec<f64>>) -> Result<Self> {
        if e.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if e.len() != t.len() {
            return Err(Error::dims(format!("{} pooled features", e.len()), t.len().to_string()));
        }
        let d = e[0].len();
        for v in e.iter().chain(&t) {
            if v.len() != d {
                return Err(Error::dims(d.to_string(), v.len().to_string()));
            }
        }
        Ok(Self { e, t })
    }

    pub fn len(&self) -> usize {
        self.e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.e.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.e.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_e: Vec<Vec<f64>>,
    pub grad_t: Vec<Vec<f64>>,
    pub grad_k: f64,
    pub grad_b: f64,
}

impl LossOutput {
    fn zeros(batch: &AlignmentBatch) -> Self {
        let z = vec![vec![0.0; batch.dim()]; batch.len()];
        Self {
            value: 0.0,
            grad_e: z.clone(),
            grad_t: z,
            grad_k: 0.0,
            grad_b: 0.0,
        }
    }

    fn add_scaled(&mut self, other: &LossOutput, w: f64) {
        self.value += w * other.value;
        for (a, b) in self.grad_e.iter_mut().zip(&other.grad_e).chain(self.grad_t.iter_mut().zip(&other.grad_t)) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += w * y;
            }
        }
        self.grad_k += w * other.grad_k;
        self.grad_b += w * other.grad_b;
    }
}

/// Which `(i, j)` pairs count as positives in the sigmoid loss.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum PairLabels {
    /// Only `i == j`.
    #[default]
    Diagonal,
    /// `i` and `j` are positive when their group ids agree (e.g. same token id).
    ByGroup(Vec<usize>),
}

impl PairLabels {
    fn z(&self, i: usize, j: usize) -> f64 {
        let pos = match self {
            PairLabels::Diagonal => i == j,
            PairLabels::ByGroup(g) => g[i] == g[j],
        };
        if pos {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SigOptions {
    pub labels: PairLabels,
    /// Unit-normalize `e` and `t` before the dot product.
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dis: f64,
    pub sim: f64,
    pub sig: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dis: 1.0,
            sim: 1.0,
            sig: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.dis, self.sim, self.sig];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidWeights);
        }
        Ok(())
    }
}

/// Mean absolute difference over pairs and dimensions.
pub fn loss_dis(batch: &AlignmentBatch) -> LossOutput {
    let mut out = LossOutput::zeros(batch);
    let scale = 1.0 / (batch.len() * batch.dim()) as f64;
    for i in 0..batch.len() {
        for j in 0..batch.dim() {
            let diff = batch.e[i][j] - batch.t[i][j];
            out.value += diff.abs() * scale;
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            out.grad_e[i][j] = s * scale;
            out.grad_t[i][j] = -s * scale;
        }
    }
    out
}

/// Mean of `1 - cos(e_i, t_i)`.
pub fn loss_sim(batch: &AlignmentBatch) -> Result<LossOutput> {
    let mut out = LossOutput::zeros(batch);
    let scale = 1.0 / batch.len() as f64;
    for i in 0..batch.len() {
        let (e, t) = (&batch.e[i], &batch.t[i]);
        let (ne, nt) = (norm(e), norm(t));
        if ne == 0.0 || nt == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let cos = dot(e, t) / (ne * nt);
        out.value += (1.0 - cos) * scale;
        for j in 0..e.len() {
            out.grad_e[i][j] = -scale * (t[j] / (ne * nt) - cos * e[j] / (ne * ne));
            out.grad_t[i][j] = -scale * (e[j] / (ne * nt) - cos * t[j] / (nt * nt));
        }
    }
    Ok(out)
}

/// One term of the sigmoid loss: `log(1 + exp(z (-k d + b)))`.
pub fn sig_term(d: f64, z: f64, k: f64, b: f64) -> f64 {
    softplus(z * (-k * d + b))
}

/// Pairwise sigmoid loss over all `(i, j)` in the batch, normalized by `|B|`.
pub fn loss_sig(batch: &AlignmentBatch, k: f64, b: f64, opts: &SigOptions) -> Result<LossOutput> {
    let n = batch.len();
    if let PairLabels::ByGroup(g) = &opts.labels {
        if g.len() != n {
            return Err(Error::dims(n.to_string(), g.len().to_string()));
        }
    }
    let mut out = LossOutput::zeros(batch);
    let scale = 1.0 / n as f64;
    let unit = |v: &[f64]| -> Result<(Vec<f64>, f64)> {
        let nv = norm(v);
        if nv == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok((v.iter().map(|x| x / nv).collect(), nv))
    };
    let (es, ts, ne, nt): (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) = if opts.normalize {
        let (es, ne): (Vec<_>, Vec<_>) = batch.e.iter().map(|v| unit(v)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        let (ts, nt): (Vec<_>, Vec<_>) = batch.t.iter().map(|v| unit(v)).collect::<Result<Vec<_>>>()?.into_iter().unzip();
        (es, ts, ne, nt)
    } else {
        (batch.e.clone(), batch.t.clone(), vec![1.0; n], vec![1.0; n])
    };
    // gradients w.r.t. the (possibly normalized) vectors
    let mut ge = vec![vec![0.0; batch.dim()]; n];
    let mut gt = ge.clone();
    for i in 0..n {
        for j in 0..n {
            let z = opts.labels.z(i, j);
            let d = dot(&es[i], &ts[j]);
            let u = z * (-k * d + b);
            out.value += softplus(u) * scale;
            let g = sigmoid(u) * scale;
            out.grad_k += g * (-z * d);
            out.grad_b += g * z;
            let gd = g * (-z * k);
            for c in 0..batch.dim() {
                ge[i][c] += gd * ts[j][c];
                gt[j][c] += gd * es[i][c];
            }
        }
    }
    for i in 0..n {
        if opts.normalize {
            out.grad_e[i] = unit_backward(&es[i], ne[i], &ge[i]);
            out.grad_t[i] = unit_backward(&ts[i], nt[i], &gt[i]);
        } else {
            out.grad_e[i] = std::mem::take(&mut ge[i]);
            out.grad_t[i] = std::mem::take(&mut gt[i]);
        }
    }
    Ok(out)
}

/// Backprop through `u = v / |v|` given `u`, `|v|` and `dL/du`.
fn unit_backward(u: &[f64], nv: f64, g: &[f64]) -> Vec<f64> {
    let proj = dot(u, g);
    u.iter().zip(g).map(|(ui, gi)| (gi - proj * ui) / nv).collect()
}

/// Weighted sum of the three objectives.
pub fn total_alignment_loss(
    batch: &AlignmentBatch,
    k: f64,
    b: f64,
    weights: &LossWeights,
    opts: &SigOptions,
) -> Result<LossOutput> {
    weights.validate()?;
    let mut out = LossOutput::zeros(batch);
    if weights.dis > 0.0 {
        out.add_scaled(&loss_dis(batch), weights.dis);
    }
    if weights.sim > 0.0 {
        out.add_scaled(&loss_sim(batch)?, weights.sim);
    }
    if weights.sig > 0.0 {
        out.add_scaled(&loss_sig(batch, k, b, opts)?, weights.sig);
    }
    if !out.value.is_finite() {
        return Err(Error::NumericalFailure { coordinate: 0 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{LN_10, LN_2};

    fn random_batch(rng: &mut impl Rng, n: usize, d: usize) -> AlignmentBatch {
        let mut v = || (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let e = v();
        let t = v();
        AlignmentBatch::new(e, t).unwrap()
    }

    fn one(e: &[f64], t: &[f64]) -> AlignmentBatch {
        AlignmentBatch::new(vec![e.to_vec()], vec![t.to_vec()]).unwrap()
    }

    #[test]
    fn dis_examples() {
        assert_eq!(loss_dis(&one(&[1.0, 2.0], &[1.0, 2.0])).value, 0.0);
        assert_eq!(loss_dis(&one(&[1.0], &[0.0])).value, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random_batch(&mut rng, 4, 5);
        let mut brute = 0.0;
        for i in 0..4 {
            for j in 0..5 {
                brute += (b.e[i][j] - b.t[i][j]).abs();
            }
        }
        assert!((loss_dis(&b).value - brute / 20.0).abs() < 1e-14);
    }

    #[test]
    fn dis_tie_has_zero_subgradient() {
        let out = loss_dis(&one(&[0.5], &[0.5]));
        assert_eq!(out.grad_e[0][0], 0.0);
        assert_eq!(out.grad_t[0][0], 0.0);
    }

    #[test]
    fn sim_examples() {
        assert!(loss_sim(&one(&[1.0, 2.0], &[1.0, 2.0])).unwrap().value.abs() < 1e-15);
        assert!((loss_sim(&one(&[1.0, -2.0], &[-1.0, 2.0])).unwrap().value - 2.0).abs() < 1e-15);
        assert!((loss_sim(&one(&[1.0, 0.0], &[0.0, 3.0])).unwrap().value - 1.0).abs() < 1e-15);
        assert!(matches!(loss_sim(&one(&[0.0, 0.0], &[1.0, 0.0])), Err(Error::ZeroNorm)));
    }

    #[test]
    fn sig_spot_values() {
        let v = sig_term(1.0, 1.0, LN_10, -10.0);
        let want = (-(LN_10 + 10.0)).exp().ln_1p();
        assert!((v - want).abs() < 1e-18);
        assert!((v - 4.54e-6).abs() < 1e-8);
        for z in [1.0, -1.0] {
            assert!((sig_term(-10.0 / LN_10, z, LN_10, -10.0) - LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn sig_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let e = vec![unit(&mut rng), unit(&mut rng)];
        let t = vec![unit(&mut rng), unit(&mut rng)];
        let b = AlignmentBatch::new(e.clone(), t.clone()).unwrap();
        let (k, bias) = (1.7, -0.3);
        let mut brute = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let z: f64 = if i == j { 1.0 } else { -1.0 };
                let d: f64 = e[i].iter().zip(&t[j]).map(|(a, b)| a * b).sum();
                brute += (1.0 + (z * (-k * d + bias)).exp()).ln();
            }
        }
        let got = loss_sig(&b, k, bias, &SigOptions::default()).unwrap().value;
        assert!((got - brute / 2.0).abs() < 1e-14);
    }

    #[test]
    fn weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random_batch(&mut rng, 3, 4);
        let o = SigOptions::default();
        let w = |dis, sim, sig| LossWeights { dis, sim, sig };
        assert_eq!(total_alignment_loss(&b, LN_10, -10.0, &w(1.0, 0.0, 0.0), &o).unwrap().value, loss_dis(&b).value);
        assert_eq!(
            total_alignment_loss(&b, LN_10, -10.0, &w(0.0, 0.0, 1.0), &o).unwrap().value,
            loss_sig(&b, LN_10, -10.0, &o).unwrap().value
        );
        let sum = loss_dis(&b).value + loss_sim(&b).unwrap().value + loss_sig(&b, LN_10, -10.0, &o).unwrap().value;
        let got = total_alignment_loss(&b, LN_10, -10.0, &LossWeights::default(), &o).unwrap().value;
        assert!((got - sum).abs() < 1e-12);
        assert!(matches!(
            total_alignment_loss(&b, 1.0, 0.0, &w(0.0, 0.0, 0.0), &o),
            Err(Error::InvalidWeights)
        ));
        assert!(matches!(
            total_alignment_loss(&b, 1.0, 0.0, &w(-1.0, 1.0, 0.0), &o),
            Err(Error::InvalidWeights)
        ));
    }

    #[test]
    fn batch_validation() {
        assert!(matches!(AlignmentBatch::new(vec![], vec![]), Err(Error::EmptyBatch)));
        assert!(AlignmentBatch::new(vec![vec![1.0]], vec![vec![1.0, 2.0]]).is_err());
    }

    /// Packs `(e, t, k, b)` into one flat vector for finite differences.
    fn pack(b: &AlignmentBatch, k: f64, bias: f64) -> Vec<f64> {
        let mut x: Vec<f64> = b.e.iter().chain(&b.t).flatten().copied().collect();
        x.push(k);
        x.push(bias);
        x
    }

    fn unpack(x: &[f64], n: usize, d: usize) -> (AlignmentBatch, f64, f64) {
        let rows: Vec<Vec<f64>> = x[..2 * n * d].chunks(d).map(<[f64]>::to_vec).collect();
        let (e, t) = rows.split_at(n);
        (AlignmentBatch::new(e.to_vec(), t.to_vec()).unwrap(), x[2 * n * d], x[2 * n * d + 1])
    }

    fn check(opts: SigOptions, weights: LossWeights, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (3, 4);
        let b = random_batch(&mut rng, n, d);
        let (k, bias) = (rng.gen_range(0.5..3.0), rng.gen_range(-2.0..2.0));
        let out = total_alignment_loss(&b, k, bias, &weights, &opts).unwrap();
        let mut analytic: Vec<f64> = out.grad_e.iter().chain(&out.grad_t).flatten().copied().collect();
        analytic.push(out.grad_k);
        analytic.push(out.grad_b);
        let numeric = finite_diff_grad(
            |x| {
                let (bb, kk, bbias) = unpack(x, n, d);
                total_alignment_loss(&bb, kk, bbias, &weights, &opts).unwrap().value
            },
            &pack(&b, k, bias),
            1e-5,
        )
        .unwrap();
        for (a, g) in analytic.iter().zip(&numeric) {
            assert!((a - g).abs() <= 1e-4 * a.abs().max(g.abs()).max(1e-6), "{a} vs {g}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let only = |dis, sim, sig| LossWeights { dis, sim, sig };
        check(SigOptions::default(), only(0.0, 1.0, 1.0), 1);
        check(
            SigOptions {
                normalize: true,
                labels: PairLabels::ByGroup(vec![0, 1, 0]),
            },
            only(0.0, 0.5, 2.0),
            2,
        );
        check(SigOptions::default(), only(1.0, 0.0, 0.0), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn sim_is_scale_invariant(seed in 0u64..10_000, c in 0.01f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = random_batch(&mut rng, 2, 5);
                let scaled = AlignmentBatch::new(b.e.iter().map(|v| v.iter().map(|x| c * x).collect()).collect(), b.t.clone()).unwrap();
                prop_assert!((loss_sim(&b).unwrap().value - loss_sim(&scaled).unwrap().value).abs() < 1e-12);
            }

            #[test]
            fn positive_term_decreases_in_dot(d in -5.0f64..5.0, delta in 1e-3f64..1.0) {
                prop_assert!(sig_term(d + delta, 1.0, LN_10, -10.0) < sig_term(d, 1.0, LN_10, -10.0)
                    || sig_term(d, 1.0, LN_10, -10.0) == 0.0);
            }

            #[test]
            fn permutation_equivariant(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = 4;
                let b = random_batch(&mut rng, n, 3);
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.gen_range(0..=i));
                }
                let pb = AlignmentBatch::new(perm.iter().map(|&p| b.e[p].clone()).collect(), perm.iter().map(|&p| b.t[p].clone()).collect()).unwrap();
                let o = SigOptions::default();
                let w = LossWeights::default();
                let a = total_alignment_loss(&b, 2.0, -1.0, &w, &o).unwrap();
                let c = total_alignment_loss(&pb, 2.0, -1.0, &w, &o).unwrap();
                prop_assert!((a.value - c.value).abs() < 1e-12);
                for (pi, &p) in perm.iter().enumerate() {
                    for (x, y) in c.grad_e[pi].iter().zip(&a.grad_e[p]) {
                        prop_assert!((x - y).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
