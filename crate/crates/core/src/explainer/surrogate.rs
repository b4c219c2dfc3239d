//! Superpixel on/off perturbations, their proximity weights and the weighted
//! linear surrogate fitted to the classifier's responses.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::slic::SuperpixelMap;
use crate::error::{Error, Result};
use crate::stack::{Stack, STACK_DEPTH};

/// `rows[b][k]` says whether superpixel `k` stays visible in perturbation `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBatch {
    pub rows: Vec<Vec<bool>>,
    pub k: usize,
    pub seed: u64,
    pub on_probability: f64,
}

impl PerturbationBatch {
    /// Row 0 is all-on; rows `1..b` are i.i.d. Bernoulli(`on_probability`).
    pub fn sample(b: usize, k: usize, on_probability: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = on_probability.clamp(0.0, 1.0);
        let mut rows = Vec::with_capacity(b);
        if b > 0 {
            rows.push(vec![true; k]);
        }
        for _ in 1..b {
            rows.push((0..k).map(|_| rng.random_bool(p)).collect());
        }
        Self {
            rows,
            k,
            seed,
            on_probability: p,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// One stack per row with every off superpixel set to `fill` on all slices.
pub fn perturb(
    stack: &Stack,
    spmap: &SuperpixelMap,
    batch: &PerturbationBatch,
    fill: f32,
) -> Result<Vec<Stack>> {
    if batch.k != spmap.num_segments {
        return Err(Error::DimensionMismatch(format!(
            "perturbations over {} superpixels, map has {}",
            batch.k, spmap.num_segments
        )));
    }
    if stack.size() != spmap.size {
        return Err(Error::DimensionMismatch(format!(
            "stack is {0}x{0}, superpixel map is {1}x{1}",
            stack.size(),
            spmap.size
        )));
    }
    let plane = spmap.size * spmap.size;
    batch
        .rows
        .iter()
        .map(|row| {
            if row.len() != batch.k {
                return Err(Error::DimensionMismatch(format!(
                    "row of {} entries, expected {}",
                    row.len(),
                    batch.k
                )));
            }
            let mut out = stack.clone();
            let data = out.data_mut();
            for (i, &l) in spmap.labels.iter().enumerate() {
                if !row[l] {
                    for s in 0..STACK_DEPTH {
                        data[s * plane + i] = fill;
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Proximity of a perturbation to the unperturbed all-on vector:
/// `sqrt(exp(-d^2 / width^2))` with `d = 1 - cos(all-on, z)`.
///
/// For a boolean `z` with `m` of `K` entries on, `cos = sqrt(m / K)`. An all-off
/// row has no defined cosine and gets weight 0.
pub fn perturbation_weight(z: &[bool], kernel_width: f64) -> f64 {
    let on = z.iter().filter(|&&b| b).count();
    if on == 0 {
        log::warn!("all-off perturbation has undefined cosine distance; weight set to 0");
        return 0.0;
    }
    let cos = (on as f64 / z.len() as f64).sqrt();
    let d = 1.0 - cos;
    (-(d * d) / (kernel_width * kernel_width)).exp().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surrogate {
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// Weighted coefficient of determination; 0 when the responses are constant.
    pub r2: f64,
    /// The design was (near) singular and a larger ridge was used.
    pub rank_deficient: bool,
}

impl Surrogate {
    /// Index of the largest coefficient, lowest index on ties.
    pub fn top(&self) -> usize {
        let mut best = 0;
        for (i, &c) in self.coefficients.iter().enumerate() {
            if c > self.coefficients[best] {
                best = i;
            }
        }
        best
    }
}

/// Weighted ridge regression with an unpenalised intercept.
///
/// Minimises `sum_b w_b (y_b - x_b . beta - beta0)^2 / sum_b w_b + ridge |beta|^2`.
/// Normalising by the weight total makes the fit invariant to rescaling all weights.
pub fn fit_surrogate(
    batch: &PerturbationBatch,
    predictions: &[f64],
    weights: &[f64],
    ridge: f64,
) -> Result<Surrogate> {
    let b = batch.len();
    if predictions.len() != b || weights.len() != b {
        return Err(Error::DimensionMismatch(format!(
            "{b} perturbations, {} predictions, {} weights",
            predictions.len(),
            weights.len()
        )));
    }
    let k = batch.k;
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::DimensionMismatch(
            "all perturbation weights are zero".into(),
        ));
    }
    let x = |r: usize, j: usize| if batch.rows[r][j] { 1.0 } else { 0.0 };
    let wn: Vec<f64> = weights.iter().map(|w| w / wsum).collect();
    let xbar: Vec<f64> = (0..k)
        .map(|j| (0..b).map(|r| wn[r] * x(r, j)).sum())
        .collect();
    let ybar: f64 = (0..b).map(|r| wn[r] * predictions[r]).sum();

    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for r in 0..b {
        if wn[r] == 0.0 {
            continue;
        }
        let xc: Vec<f64> = (0..k).map(|j| x(r, j) - xbar[j]).collect();
        let yc = predictions[r] - ybar;
        for i in 0..k {
            rhs[i] += wn[r] * xc[i] * yc;
            for j in 0..k {
                gram[(i, j)] += wn[r] * xc[i] * xc[j];
            }
        }
    }
    let support = wn.iter().filter(|&&w| w > 0.0).count();
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let (emin, emax) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| {
        (lo.min(e), hi.max(e))
    });
    let rank_deficient = support < k + 1 || emin <= 1e-10 * emax.max(f64::MIN_POSITIVE);
    let mut lambda = ridge.max(0.0);
    if rank_deficient {
        lambda = lambda.max(1e-3 * emax.max(1e-12));
        log::warn!("surrogate design is rank deficient ({support} weighted rows, {k} superpixels); ridge raised to {lambda:.3e}");
    }
    let beta = loop {
        let mut a = gram.clone();
        for i in 0..k {
            a[(i, i)] += lambda;
        }
        match a.cholesky() {
            Some(ch) => break ch.solve(&rhs),
            None => lambda = (lambda * 10.0).max(1e-9),
        }
    };
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = ybar
        - coefficients
            .iter()
            .zip(&xbar)
            .map(|(c, m)| c * m)
            .sum::<f64>();
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for r in 0..b {
        let fit = intercept + (0..k).map(|j| coefficients[j] * x(r, j)).sum::<f64>();
        ss_res += wn[r] * (predictions[r] - fit).powi(2);
        ss_tot += wn[r] * (predictions[r] - ybar).powi(2);
    }
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        0.0
    };
    Ok(Surrogate {
        coefficients,
        intercept,
        r2,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_zero_is_reference() {
        let b = PerturbationBatch::sample(10, 6, 0.5, 3);
        assert_eq!(b.rows[0], vec![true; 6]);
        assert_eq!(b, PerturbationBatch::sample(10, 6, 0.5, 3));
    }

    #[test]
    fn hand_evaluated_weights() {
        assert!((perturbation_weight(&[true; 4], 0.25) - 1.0).abs() < 1e-12);
        let half = perturbation_weight(&[true, true, false, false], 0.25);
        let d: f64 = 1.0 - 2.0 / (2.0 * 2f64.sqrt());
        assert!((half - (-(d * d) / 0.0625).exp().sqrt()).abs() < 1e-12);
        assert!((half - 0.50344).abs() < 1e-4);
        let quarter = perturbation_weight(&[true, false, false, false], 0.25);
        assert!((quarter - (-2f64).exp()).abs() < 1e-12);
        assert_eq!(perturbation_weight(&[false; 4], 0.25), 0.0);
    }

    fn spmap_quadrants() -> SuperpixelMap {
        // 4x4 image, 4 superpixels of 2x2
        let labels = (0..16).map(|i| (i / 8) * 2 + (i % 4) / 2).collect();
        SuperpixelMap {
            size: 4,
            labels,
            num_segments: 4,
            degenerate: false,
        }
    }

    #[test]
    fn perturbation_touches_only_off_superpixels() {
        let stack = Stack::new(4, (0..48).map(|i| 1.0 + i as f32).collect()).unwrap();
        let map = spmap_quadrants();
        let batch = PerturbationBatch {
            rows: vec![vec![true; 4], vec![false; 4], vec![true, true, true, false]],
            k: 4,
            seed: 0,
            on_probability: 0.5,
        };
        let out = perturb(&stack, &map, &batch, 0.0).unwrap();
        assert_eq!(out[0], stack);
        assert!(out[1].data().iter().all(|&v| v == 0.0));
        for s in 0..3 {
            for i in 0..16 {
                let changed = out[2].slice(s)[i] != stack.slice(s)[i];
                assert_eq!(changed, map.labels[i] == 3);
            }
        }
        let wrong = PerturbationBatch::sample(3, 5, 0.5, 0);
        assert!(matches!(
            perturb(&stack, &map, &wrong, 0.0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn column_response_selects_its_superpixel() {
        // 6x3 hand design; y equals column 1
        let rows = vec![
            vec![true, true, true],
            vec![true, false, false],
            vec![false, true, false],
            vec![false, false, true],
            vec![true, true, false],
            vec![false, true, true],
        ];
        let y: Vec<f64> = rows.iter().map(|r| if r[1] { 1.0 } else { 0.0 }).collect();
        let batch = PerturbationBatch {
            rows,
            k: 3,
            seed: 0,
            on_probability: 0.5,
        };
        let s = fit_surrogate(&batch, &y, &[1.0; 6], 1e-6).unwrap();
        assert_eq!(s.top(), 1);
        assert!((s.coefficients[1] - 1.0).abs() < 1e-4);
        assert!(s.coefficients[0].abs() < 1e-4 && s.coefficients[2].abs() < 1e-4);
        assert!((s.r2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_response_gives_zero_coefficients() {
        let batch = PerturbationBatch::sample(150, 25, 0.5, 9);
        let w: Vec<f64> = batch
            .rows
            .iter()
            .map(|r| perturbation_weight(r, 0.25))
            .collect();
        let s = fit_surrogate(&batch, &[0.7; 150], &w, 1e-6).unwrap();
        assert!(s.coefficients.iter().all(|c| c.abs() <= 1e-6));
        assert_eq!(s.top(), 0);
        assert_eq!(s.r2, 0.0);
    }

    #[test]
    fn doubling_weights_changes_nothing() {
        let batch = PerturbationBatch::sample(60, 8, 0.5, 2);
        let y: Vec<f64> = (0..60).map(|i| ((i * 13) % 7) as f64 / 7.0).collect();
        let w: Vec<f64> = batch
            .rows
            .iter()
            .map(|r| perturbation_weight(r, 0.25))
            .collect();
        let w2: Vec<f64> = w.iter().map(|v| v * 2.0).collect();
        let a = fit_surrogate(&batch, &y, &w, 1e-6).unwrap();
        let b = fit_surrogate(&batch, &y, &w2, 1e-6).unwrap();
        for (p, q) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_rows_fall_back_to_ridge() {
        let batch = PerturbationBatch::sample(4, 10, 0.5, 1);
        let s = fit_surrogate(&batch, &[0.1, 0.5, 0.2, 0.9], &[1.0; 4], 1e-6).unwrap();
        assert!(s.rank_deficient);
        assert!(s.coefficients.iter().all(|c| c.is_finite()));
    }
}
