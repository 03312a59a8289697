//! Connectionist temporal classification loss and gradient.
//!
//! All recursions run in the log domain. The loss of target `z` is
//! `-log sum_{paths p : squash(p) = z} prod_t y[t, p_t]`, evaluated with the
//! forward (alpha) recursion over the blank-interleaved target. The backward
//! (beta) recursion gives per-frame label occupancies, from which both the
//! gradient with respect to log-probabilities and with respect to
//! pre-softmax logits follow.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::decode::squash;
use crate::error::{Error, Result};

/// Largest path count `brute_force_loss` will enumerate.
pub const BRUTE_FORCE_MAX_PATHS: f64 = 1e6;

/// Row tolerance for normalized log-probability rows.
pub const ROW_TOLERANCE: f64 = 1e-5;

pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.into_iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax_row(row: ArrayView1<f64>) -> Vec<f64> {
    let lse = log_sum_exp(row.iter().copied());
    row.iter().map(|x| x - lse).collect()
}

/// Per-frame log-probabilities over an alphabet, `T x |A|`.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePosteriors {
    log_probs: Array2<f64>,
    blank: usize,
}

impl FramePosteriors {
    /// Validates that every row log-sum-exps to zero.
    pub fn new(log_probs: Array2<f64>, blank: usize) -> Result<Self> {
        if blank >= log_probs.ncols() {
            return Err(Error::Config(format!(
                "blank index {blank} out of range for {} units",
                log_probs.ncols()
            )));
        }
        for (t, row) in log_probs.rows().into_iter().enumerate() {
            let lse = log_sum_exp(row.iter().copied());
            if lse.is_nan() || lse.abs() > ROW_TOLERANCE {
                return Err(Error::Config(format!(
                    "frame {t} is not a normalized distribution (logsumexp {lse})"
                )));
            }
        }
        Ok(Self { log_probs, blank })
    }

    /// Applies a row-wise log-softmax.
    pub fn from_logits(logits: ArrayView2<f64>, blank: usize) -> Self {
        let mut log_probs = Array2::zeros(logits.raw_dim());
        for (mut out, row) in log_probs.rows_mut().into_iter().zip(logits.rows()) {
            for (o, v) in out.iter_mut().zip(log_softmax_row(row)) {
                *o = v;
            }
        }
        Self { log_probs, blank }
    }

    /// Arbitrary scores treated as log-probabilities. Used by gradient checks
    /// that perturb single entries.
    pub fn unnormalized(log_probs: Array2<f64>, blank: usize) -> Self {
        Self { log_probs, blank }
    }

    pub fn log_probs(&self) -> ArrayView2<'_, f64> {
        self.log_probs.view()
    }

    pub fn frames(&self) -> usize {
        self.log_probs.nrows()
    }

    pub fn alphabet_size(&self) -> usize {
        self.log_probs.ncols()
    }

    pub fn blank(&self) -> usize {
        self.blank
    }
}

/// Minimum number of frames that can emit `z`: one per label plus a blank
/// between each adjacent repeated pair.
pub fn required_frames(z: &[usize]) -> usize {
    z.len() + z.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_feasible(p: &FramePosteriors, z: &[usize]) -> Result<()> {
    let required = required_frames(z);
    if p.frames() < required || p.frames() == 0 {
        return Err(Error::Infeasible {
            frames: p.frames(),
            required: required.max(1),
        });
    }
    if let Some(&bad) = z.iter().find(|&&k| k >= p.alphabet_size() || k == p.blank) {
        return Err(Error::Config(format!("target contains invalid label {bad}")));
    }
    Ok(())
}

/// `blank, z1, blank, z2, ..., blank`.
pub fn extend_with_blanks(z: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * z.len() + 1);
    ext.push(blank);
    for &k in z {
        ext.push(k);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

/// Log forward variables, `T x (2L+1)`; entry includes emission at `t`.
pub fn alpha(p: &FramePosteriors, ext: &[usize]) -> Array2<f64> {
    let lp = &p.log_probs;
    let (t_len, s_len) = (p.frames(), ext.len());
    let mut a = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    a[[0, 0]] = lp[[0, ext[0]]];
    if s_len > 1 {
        a[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = a[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, a[[t - 1, s - 1]]);
            }
            if can_skip(ext, s, p.blank) {
                acc = log_add(acc, a[[t - 1, s - 2]]);
            }
            a[[t, s]] = acc + lp[[t, ext[s]]];
        }
    }
    a
}

/// Log backward variables, `T x (2L+1)`; entry includes emission at `t`.
pub fn beta(p: &FramePosteriors, ext: &[usize]) -> Array2<f64> {
    let lp = &p.log_probs;
    let (t_len, s_len) = (p.frames(), ext.len());
    let mut b = Array2::from_elem((t_len, s_len), f64::NEG_INFINITY);
    let last = t_len - 1;
    b[[last, s_len - 1]] = lp[[last, ext[s_len - 1]]];
    if s_len > 1 {
        b[[last, s_len - 2]] = lp[[last, ext[s_len - 2]]];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut acc = b[[t + 1, s]];
            if s + 1 < s_len {
                acc = log_add(acc, b[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2, p.blank) {
                acc = log_add(acc, b[[t + 1, s + 2]]);
            }
            b[[t, s]] = acc + lp[[t, ext[s]]];
        }
    }
    b
}

fn total_log_prob(a: &Array2<f64>) -> f64 {
    let (t_len, s_len) = a.dim();
    let end = a[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        log_add(end, a[[t_len - 1, s_len - 2]])
    } else {
        end
    }
}

pub fn ctc_loss(p: &FramePosteriors, z: &[usize]) -> Result<f64> {
    check_feasible(p, z)?;
    let ext = extend_with_blanks(z, p.blank);
    Ok(-total_log_prob(&alpha(p, &ext)))
}

#[derive(Debug, Clone)]
pub struct CtcGradient {
    pub loss: f64,
    /// d loss / d log_probs.
    pub wrt_log_probs: Array2<f64>,
    /// d loss / d logits, where log_probs = log_softmax(logits).
    pub wrt_logits: Array2<f64>,
}

pub fn ctc_grad(p: &FramePosteriors, z: &[usize]) -> Result<CtcGradient> {
    check_feasible(p, z)?;
    let ext = extend_with_blanks(z, p.blank);
    let a = alpha(p, &ext);
    let b = beta(p, &ext);
    let log_total = total_log_prob(&a);
    let lp = &p.log_probs;

    // occupancy[t, k] = sum_{s: ext[s] = k} alpha * beta / y
    let mut occupancy = Array2::<f64>::zeros(lp.raw_dim());
    for t in 0..p.frames() {
        for (s, &k) in ext.iter().enumerate() {
            let (av, bv) = (a[[t, s]], b[[t, s]]);
            if av == f64::NEG_INFINITY || bv == f64::NEG_INFINITY {
                continue;
            }
            occupancy[[t, k]] += (av + bv - lp[[t, k]] - log_total).exp();
        }
    }
    let wrt_log_probs = occupancy.mapv(|g| -g);

    let mut wrt_logits = Array2::zeros(lp.raw_dim());
    for ((mut out, g), row) in wrt_logits
        .rows_mut()
        .into_iter()
        .zip(wrt_log_probs.rows())
        .zip(lp.rows())
    {
        let soft: Vec<f64> = log_softmax_row(row).into_iter().map(f64::exp).collect();
        let g_sum = g.sum();
        for ((o, gk), sk) in out.iter_mut().zip(g.iter()).zip(soft) {
            *o = gk - sk * g_sum;
        }
    }

    Ok(CtcGradient {
        loss: -log_total,
        wrt_log_probs,
        wrt_logits,
    })
}

/// Exhaustive evaluation over all `|A|^T` paths.
pub fn brute_force_loss(p: &FramePosteriors, z: &[usize]) -> Result<f64> {
    let (t_len, n) = (p.frames(), p.alphabet_size());
    let paths = (n as f64).powi(t_len as i32);
    if paths > BRUTE_FORCE_MAX_PATHS {
        return Err(Error::InstanceTooLarge { paths });
    }
    let lp = &p.log_probs;
    let mut path = vec![0usize; t_len];
    let mut matching = Vec::new();
    for _ in 0..paths as usize {
        if squash(&path, p.blank).0 == z {
            matching.push(path.iter().enumerate().map(|(t, &k)| lp[[t, k]]).sum::<f64>());
        }
        // odometer increment
        for digit in path.iter_mut().rev() {
            *digit += 1;
            if *digit < n {
                break;
            }
            *digit = 0;
        }
    }
    if matching.is_empty() {
        return Err(Error::Infeasible {
            frames: t_len,
            required: required_frames(z).max(1),
        });
    }
    Ok(-log_sum_exp(matching.iter().copied()))
}

/// Writes alpha and beta as CSV: `matrix,t,s,label,value`.
pub fn dump_alpha_beta(p: &FramePosteriors, z: &[usize], out: &Path) -> Result<()> {
    check_feasible(p, z)?;
    let ext = extend_with_blanks(z, p.blank);
    let a = alpha(p, &ext);
    let b = beta(p, &ext);
    let mut f = std::io::BufWriter::new(std::fs::File::create(out).map_err(|e| Error::io(out, e))?);
    let io = |e| Error::io(out, e);
    writeln!(f, "matrix,t,s,label,value").map_err(io)?;
    for (name, m) in [("alpha", &a), ("beta", &b)] {
        for ((t, s), v) in m.indexed_iter() {
            writeln!(f, "{name},{t},{s},{},{v}", ext[s]).map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

/// Mean of per-utterance losses.
pub fn batch_loss(items: &[(&FramePosteriors, &[usize])]) -> Result<f64> {
    let losses = items
        .iter()
        .map(|(p, z)| ctc_loss(p, z))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Row sums of a gradient, handy for the softmax-gradient invariant.
pub fn row_sums(g: &Array2<f64>) -> Vec<f64> {
    g.sum_axis(Axis(1)).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn uniform(t: usize, n: usize, blank: usize) -> FramePosteriors {
        FramePosteriors::new(Array2::from_elem((t, n), -(n as f64).ln()), blank).unwrap()
    }

    fn random_logits(rng: &mut impl Rng, t: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, n), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn single_frame_single_path() {
        let p = FramePosteriors::new(array![[0.5f64.ln(), 0.5f64.ln()]], 1).unwrap();
        let loss = ctc_loss(&p, &[0]).unwrap();
        assert!((loss - 0.5f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn two_uniform_frames() {
        // paths aa, a-, -a out of four, each 0.25
        let loss = ctc_loss(&uniform(2, 2, 1), &[0]).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn repeated_labels_need_a_separator() {
        let err = ctc_loss(&uniform(2, 2, 1), &[0, 0]).unwrap_err();
        assert!(err.to_string().contains("target longer than input admits"));
        assert!(ctc_loss(&uniform(3, 2, 1), &[0, 0]).is_ok());
        assert!(brute_force_loss(&uniform(2, 2, 1), &[0, 0]).is_err());
    }

    #[test]
    fn empty_target_is_the_all_blank_path() {
        let p = FramePosteriors::from_logits(array![[0.3, 1.0, -0.2], [2.0, 0.1, 0.0]].view(), 2);
        let expected = -(p.log_probs()[[0, 2]] + p.log_probs()[[1, 2]]);
        assert!((ctc_loss(&p, &[]).unwrap() - expected).abs() < 1e-12);
        assert!((brute_force_loss(&p, &[]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_frame_gradient_is_cross_entropy() {
        let logits = array![[0.2, -1.0, 0.7]];
        let p = FramePosteriors::from_logits(logits.view(), 2);
        let g = ctc_grad(&p, &[0]).unwrap();
        let soft: Vec<f64> = p.log_probs().row(0).iter().map(|x| x.exp()).collect();
        let expected = [soft[0] - 1.0, soft[1], soft[2]];
        for (a, b) in g.wrt_logits.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn units_outside_target_are_pulled_down_by_their_probability() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = FramePosteriors::from_logits(random_logits(&mut rng, 5, 4).view(), 3);
        let g = ctc_grad(&p, &[0, 1]).unwrap();
        for t in 0..5 {
            assert!((g.wrt_logits[[t, 2]] - p.log_probs()[[t, 2]].exp()).abs() < 1e-12);
            assert_eq!(g.wrt_log_probs[[t, 2]], 0.0);
        }
        for s in row_sums(&g.wrt_logits) {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn long_sequences_do_not_underflow() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = FramePosteriors::from_logits(random_logits(&mut rng, 10_000, 6).view(), 5);
        let z: Vec<usize> = (0..2000).map(|i| i % 5).collect();
        let loss = ctc_loss(&p, &z).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let g = ctc_grad(&p, &z).unwrap();
        assert!(g.wrt_logits.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn unnormalized_rows_rejected() {
        assert!(FramePosteriors::new(array![[0.0, 0.0]], 1).is_err());
    }

    #[test]
    fn alpha_beta_dump() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ab.csv");
        dump_alpha_beta(&uniform(3, 3, 2), &[0, 1], &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 3 * 5);
    }

    fn small_instance() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, Vec<usize>)> {
        (2usize..=4, 1usize..=6).prop_flat_map(|(n, t)| {
            (
                proptest::collection::vec(-3.0f64..3.0, n * t)
                    .prop_map(move |v| Array2::from_shape_vec((t, n), v).unwrap()),
                proptest::collection::vec(0..n - 1, 0..=3),
                Just((0..n).collect::<Vec<_>>()),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((logits, z, _) in small_instance()) {
            let n = logits.ncols();
            let p = FramePosteriors::from_logits(logits.view(), n - 1);
            match (ctc_loss(&p, &z), brute_force_loss(&p, &z)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
                (Err(Error::Infeasible { .. }), Err(Error::Infeasible { .. })) => {}
                other => prop_assert!(false, "disagreement: {:?}", other),
            }
        }

        #[test]
        fn invariant_under_label_permutation(
            (logits, z, perm) in small_instance(),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let n = logits.ncols();
            let mut perm = perm;
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = FramePosteriors::from_logits(logits.view(), n - 1);
            let mut permuted = Array2::zeros(logits.raw_dim());
            for t in 0..logits.nrows() {
                for k in 0..n {
                    permuted[[t, perm[k]]] = logits[[t, k]];
                }
            }
            let q = FramePosteriors::from_logits(permuted.view(), perm[n - 1]);
            let zq: Vec<usize> = z.iter().map(|&k| perm[k]).collect();
            if let (Ok(a), Ok(b)) = (ctc_loss(&p, &z), ctc_loss(&q, &zq)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn moving_mass_to_the_target_lowers_the_loss() {
        // three frames, target "a": shifting probability from an off-target unit
        // onto "a" at any frame can only help
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let probs = Array2::from_shape_fn((3, 3), |_| rng.random_range(0.05..1.0));
            let norm = |m: &Array2<f64>| {
                let mut m = m.clone();
                for mut r in m.rows_mut() {
                    let s = r.sum();
                    r.mapv_inplace(|x| x / s);
                }
                m
            };
            let base = norm(&probs);
            let t = rng.random_range(0..3);
            let mut moved = base.clone();
            let delta = moved[[t, 1]] * 0.5;
            moved[[t, 1]] -= delta;
            moved[[t, 0]] += delta;
            let lb = brute_force_loss(&FramePosteriors::new(base.mapv(f64::ln), 2).unwrap(), &[0]).unwrap();
            let lm = brute_force_loss(&FramePosteriors::new(moved.mapv(f64::ln), 2).unwrap(), &[0]).unwrap();
            assert!(lm <= lb + 1e-12);
        }
    }
}
