//! Supervised contrastive loss over a two-tower anchor pool.
//!
//! Anchors are the 2B concatenated query and key embeddings; positives are
//! all other anchors sharing the label; anchors without positives are
//! excluded from the mean. Gradients flow only through the query side
//! (key embeddings arrive as constants from the no-grad key network).

use crate::error::{Result, SpmixError};
use crate::tensor::{detached_row_max, Graph, Tensor};

/// Validated batch of unit-norm query/key embeddings with labels.
#[derive(Clone, Debug)]
pub struct SCLBatch {
    pub query: Tensor,
    pub key: Tensor,
    pub labels: Vec<usize>,
    pub temperature: f64,
}

impl SCLBatch {
    pub fn new(query: Tensor, key: Tensor, labels: Vec<usize>, temperature: f64) -> Result<Self> {
        if query.ndim() != 2 || key.ndim() != 2 || query.shape() != key.shape() {
            return Err(SpmixError::contract(format!(
                "query/key embeddings must be matching [B, P], got {:?} and {:?}",
                query.shape(),
                key.shape()
            )));
        }
        let b = query.shape()[0];
        if b < 2 {
            return Err(SpmixError::contract(format!(
                "SCL batch needs B >= 2, got {b}"
            )));
        }
        if labels.len() != b {
            return Err(SpmixError::contract(format!(
                "labels length {} does not match batch {b}",
                labels.len()
            )));
        }
        if temperature <= 0.0 {
            return Err(SpmixError::contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let p = query.shape()[1];
        for (name, t) in [("query", &query), ("key", &key)] {
            for (i, row) in t.data().chunks_exact(p).enumerate() {
                let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(SpmixError::contract(format!(
                        "{name} embedding {i} has norm {norm}, expected 1 within 1e-5"
                    )));
                }
            }
        }
        Ok(SCLBatch {
            query,
            key,
            labels,
            temperature,
        })
    }

    pub fn loss(&self, g: &mut Graph) -> Result<Tensor> {
        scl_loss(g, &self.query, &self.key, &self.labels, self.temperature)
    }
}

/// Two-tower loss: pool = [query; key], labels duplicated.
pub fn scl_loss(
    g: &mut Graph,
    query: &Tensor,
    key: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<Tensor> {
    if query.ndim() != 2 || key.ndim() != 2 || query.shape() != key.shape() {
        return Err(SpmixError::contract(format!(
            "query/key embeddings must be matching [B, P], got {:?} and {:?}",
            query.shape(),
            key.shape()
        )));
    }
    let b = query.shape()[0];
    if b < 2 {
        return Err(SpmixError::contract(format!("SCL batch needs B >= 2, got {b}")));
    }
    if labels.len() != b {
        return Err(SpmixError::contract(format!(
            "labels length {} does not match batch {b}",
            labels.len()
        )));
    }
    let pool = g.concat(&[query, key], 0)?;
    let mut pool_labels = labels.to_vec();
    pool_labels.extend_from_slice(labels);
    supcon_pool_loss(g, &pool, &pool_labels, temperature)
}

/// SupCon loss over one anchor pool `[M, P]`: every row is an anchor,
/// A(i) = all others, P(i) = others with the same label.
pub fn supcon_pool_loss(
    g: &mut Graph,
    pool: &Tensor,
    labels: &[usize],
    temperature: f64,
) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(SpmixError::contract(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if pool.ndim() != 2 {
        return Err(SpmixError::contract(format!(
            "anchor pool must be [M, P], got {:?}",
            pool.shape()
        )));
    }
    let m = pool.shape()[0];
    if m < 2 || labels.len() != m {
        return Err(SpmixError::contract(format!(
            "anchor pool needs M >= 2 rows with matching labels, got M={m}, labels={}",
            labels.len()
        )));
    }

    // positive mask, self exclusion, and per-anchor weights as constants
    let mut not_self = vec![1.0; m * m];
    let mut pos_mask = vec![0.0; m * m];
    let mut pos_count = vec![0usize; m];
    for i in 0..m {
        not_self[i * m + i] = 0.0;
        for j in 0..m {
            if i != j && labels[i] == labels[j] {
                pos_mask[i * m + j] = 1.0;
                pos_count[i] += 1;
            }
        }
    }
    let valid = pos_count.iter().filter(|&&c| c > 0).count();
    if valid == 0 {
        // no anchor has a positive: loss is an empty mean, defined as 0
        return Ok(Tensor::scalar(0.0));
    }
    let weights: Vec<f64> = pos_count
        .iter()
        .map(|&c| if c > 0 { 1.0 / (c as f64 * valid as f64) } else { 0.0 })
        .collect();

    let pool_t = g.permute(pool, &[1, 0])?;
    let sims = g.matmul(pool, &pool_t)?;
    let logits = g.mul_scalar(&sims, 1.0 / temperature)?;
    // max-shifted log-sum-exp over A(i); the detached shift cancels exactly
    let shift = detached_row_max(&logits);
    let shifted = g.sub(&logits, &shift)?;
    let exp = g.exp(&shifted)?;
    let masked = g.mul(&exp, &Tensor::from_parts(vec![m, m], not_self, false))?;
    let denom = g.sum_axis(&masked, 1, true)?;
    let log_denom = g.log(&denom)?;
    let log_prob = g.sub(&shifted, &log_denom)?;
    let pos_terms = g.mul(&log_prob, &Tensor::from_parts(vec![m, m], pos_mask, false))?;
    let per_anchor = g.sum_axis(&pos_terms, 1, false)?;
    let weighted = g.mul(&per_anchor, &Tensor::from_parts(vec![m], weights, false))?;
    let total = g.sum_all(&weighted)?;
    g.mul_scalar(&total, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force double-loop SupCon oracle, independent of the graph path.
    pub(crate) fn supcon_oracle(rows: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let m = rows.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        let mut valid = 0usize;
        for i in 0..m {
            let positives: Vec<usize> = (0..m)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            if positives.is_empty() {
                continue;
            }
            let logits: Vec<f64> = (0..m)
                .filter(|&j| j != i)
                .map(|j| dot(&rows[i], &rows[j]) / tau)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            let mut anchor = 0.0;
            for &p in &positives {
                anchor += dot(&rows[i], &rows[p]) / tau - lse;
            }
            total += -anchor / positives.len() as f64;
            valid += 1;
        }
        if valid == 0 {
            0.0
        } else {
            total / valid as f64
        }
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v.iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    fn flat(rows: &[Vec<f64>]) -> Tensor {
        let d = rows[0].len();
        Tensor::from_parts(
            vec![rows.len(), d],
            rows.iter().flatten().copied().collect(),
            false,
        )
    }

    #[test]
    fn hand_computed_three_anchor_pool() {
        // z1 = z2 = (1,0) class A, z3 = (0,1) class B, tau = 1:
        // anchors 1 and 2 each contribute ln(1 + e^-1); z3 has no positive.
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let labels = vec![0, 0, 1];
        let expected = (1.0 + (-1.0_f64).exp()).ln();
        assert!((supcon_oracle(&rows, &labels, 1.0) - expected).abs() < 1e-12);

        let mut g = Graph::new();
        let pool = flat(&rows).requires_grad(true);
        let loss = supcon_pool_loss(&mut g, &pool, &labels, 1.0).unwrap();
        assert!((loss.item() - expected).abs() < 1e-12, "{}", loss.item());
    }

    #[test]
    fn identical_embeddings_single_class_matches_oracle() {
        let rows = vec![vec![1.0, 0.0]; 6];
        let labels = vec![3; 6];
        let expected = supcon_oracle(&rows, &labels, 0.2);
        let mut g = Graph::new();
        let loss = supcon_pool_loss(&mut g, &flat(&rows), &labels, 0.2).unwrap();
        assert!((loss.item() - expected).abs() < 1e-12);
        // all positives at equal similarity: -log(1/(M-1)) = ln(M-1) minus
        // equal logits cancels to ln(5)/ln... oracle is authoritative; the
        // value must also equal ln(5) analytically here
        assert!((loss.item() - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_tower_loss_matches_pool_of_concatenated_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let b = 5;
        let d = 7;
        let q = unit_rows(&mut rng, b, d);
        let k = unit_rows(&mut rng, b, d);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let mut all = q.clone();
        all.extend(k.clone());
        let mut pool_labels = labels.clone();
        pool_labels.extend(labels.clone());
        let expected = supcon_oracle(&all, &pool_labels, 0.2);

        let mut g = Graph::new();
        let loss = scl_loss(&mut g, &flat(&q), &flat(&k), &labels, 0.2).unwrap();
        assert!((loss.item() - expected).abs() < 1e-9);
    }

    #[test]
    fn oracle_equivalence_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..40 {
            let b = rng.random_range(2..=16);
            let d = rng.random_range(2..=8);
            let k = rng.random_range(1..=4);
            let q = unit_rows(&mut rng, b, d);
            let kk = unit_rows(&mut rng, b, d);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
            let mut all = q.clone();
            all.extend(kk.clone());
            let mut pool_labels = labels.clone();
            pool_labels.extend(labels.clone());
            let expected = supcon_oracle(&all, &pool_labels, 0.2);
            let mut g = Graph::new();
            let loss = scl_loss(&mut g, &flat(&q), &flat(&kk), &labels, 0.2).unwrap();
            assert!(
                (loss.item() - expected).abs() < 1e-9,
                "{} vs {expected}",
                loss.item()
            );
        }
    }

    #[test]
    fn temperature_and_dot_scaling_cancel() {
        // scaling tau by c while scaling all dot products by c leaves the
        // loss unchanged; realize it by scaling every row by sqrt(c)
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let rows = unit_rows(&mut rng, 8, 5);
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..2)).collect();
        let c: f64 = 3.7;
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| v * c.sqrt()).collect())
            .collect();
        let a = supcon_oracle(&rows, &labels, 0.2);
        let b = supcon_oracle(&scaled, &labels, 0.2 * c);
        assert!((a - b).abs() < 1e-10);

        let mut g = Graph::new();
        let la = supcon_pool_loss(&mut g, &flat(&rows), &labels, 0.2).unwrap();
        let lb = supcon_pool_loss(&mut g, &flat(&scaled), &labels, 0.2 * c).unwrap();
        assert!((la.item() - lb.item()).abs() < 1e-10);
    }

    #[test]
    fn rotation_invariance() {
        // a common orthogonal rotation preserves all dot products
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let rows = unit_rows(&mut rng, 6, 2);
        let labels = vec![0, 1, 0, 1, 0, 1];
        let theta: f64 = 0.83;
        let rotated: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                vec![
                    theta.cos() * r[0] - theta.sin() * r[1],
                    theta.sin() * r[0] + theta.cos() * r[1],
                ]
            })
            .collect();
        let mut g = Graph::new();
        let a = supcon_pool_loss(&mut g, &flat(&rows), &labels, 0.2).unwrap();
        let b = supcon_pool_loss(&mut g, &flat(&rotated), &labels, 0.2).unwrap();
        assert!((a.item() - b.item()).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences_and_skips_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let b = 4;
        let d = 3;
        let q_rows = unit_rows(&mut rng, b, d);
        let k_rows = unit_rows(&mut rng, b, d);
        let labels = vec![0, 1, 0, 1];
        let q = flat(&q_rows).requires_grad(true);
        let k = flat(&k_rows);
        let mut g = Graph::new();
        let loss = scl_loss(&mut g, &q, &k, &labels, 0.2).unwrap();
        g.backward(&loss).unwrap();
        let analytic = q.grad().unwrap();
        assert!(k.grad().is_none());

        let eval = |data: &[f64]| {
            let qt = Tensor::from_parts(vec![b, d], data.to_vec(), false);
            let mut g = Graph::new();
            scl_loss(&mut g, &qt, &k, &labels, 0.2).unwrap().item()
        };
        let base: Vec<f64> = q.data().to_vec();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += 1e-5;
            let mut minus = base.clone();
            minus[i] -= 1e-5;
            let fd = (eval(&plus) - eval(&minus)) / 2e-5;
            let rel = (analytic[i] - fd).abs() / 1.0_f64.max(analytic[i].abs()).max(fd.abs());
            assert!(rel < 1e-4, "element {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn contract_violations() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let rows = unit_rows(&mut rng, 2, 3);
        let q = flat(&rows);
        let mut g = Graph::new();
        assert!(scl_loss(&mut g, &q, &q, &[0, 1], 0.0).is_err());
        assert!(scl_loss(&mut g, &q, &q, &[0, 1], -0.2).is_err());
        let single = flat(&rows[..1].to_vec());
        assert!(scl_loss(&mut g, &single, &single, &[0], 0.2).is_err());
        // batch type also validates unit norms
        let non_unit = Tensor::from_parts(vec![2, 3], vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0], false);
        assert!(SCLBatch::new(non_unit, q.clone(), vec![0, 1], 0.2).is_err());
        assert!(SCLBatch::new(q.clone(), q.clone(), vec![0, 1], 0.2).is_ok());
    }
}
