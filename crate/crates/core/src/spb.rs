//! Sentence prototype bank: nearest-prototype lookup by cosine similarity with
//! a Gumbel-softmax straight-through relaxation.

use autodiff::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const TEMPERATURE_START: f64 = 0.9;
pub const TEMPERATURE_END: f64 = 0.01;

/// Standard Gaussian rows scaled to unit L1 norm.
pub fn init_bank(rng: &mut impl Rng, k: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(k * d);
    for _ in 0..k {
        let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let l1: f64 = row.iter().map(|v: &f64| v.abs()).sum();
        data.extend(row.into_iter().map(|v| v / l1));
    }
    Tensor::new(vec![k, d], data).expect("shape is consistent")
}

/// Row-wise argmax, lowest index on ties.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.outer()).map(|i| argmax(t.row(i))).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = j;
        }
    }
    best
}

/// `[n, K]` cosine similarities between query rows and bank rows.
pub fn cosine_scores(g: &mut Graph, q: Var, bank: Var) -> Result<Var> {
    if g.value(q)
        .data()
        .chunks(g.value(q).last_dim())
        .any(|r| r.iter().all(|&v| v == 0.0))
    {
        return Err(Error::invalid("prototype query has zero norm"));
    }
    let qn = g.l2_normalize(q)?;
    let sn = g.l2_normalize(bank)?;
    Ok(g.matmul_nt(qn, sn)?)
}

/// Result of querying the bank with a set of rows.
#[derive(Debug, Clone)]
pub struct QueryOutput {
    pub indices: Vec<usize>,
    /// Cosine scores `[n, K]`.
    pub scores: Var,
    /// Querying distribution `softmax(scores / T)`, `[n, K]`.
    pub probs: Var,
    /// `log(probs)`, computed stably.
    pub log_probs: Var,
    /// Selected rows `S[k]`, differentiable into the bank.
    pub hard: Var,
    /// Forward `S[k]`; gradient flows through the relaxed mixture.
    pub quantized: Var,
}

/// Queries `bank` with each row of `q`.
///
/// `noise`, when given, is added to the scores before the relaxed softmax;
/// passing Gumbel draws gives the Gumbel-softmax relaxation.
pub fn query(
    g: &mut Graph,
    q: Var,
    bank: Var,
    temperature: f64,
    noise: Option<&Tensor>,
) -> Result<QueryOutput> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scores = cosine_scores(g, q, bank)?;
    let indices = argmax_rows(g.value(scores));
    let scaled = g.scale(scores, 1.0 / temperature);
    let probs = g.softmax(scaled);
    let log_probs = g.log_softmax(scaled);
    let relaxed = match noise {
        Some(n) => {
            let nv = g.constant(n.clone());
            let noisy = g.add(scores, nv)?;
            let noisy = g.scale(noisy, 1.0 / temperature);
            g.softmax(noisy)
        }
        None => probs,
    };
    let mixture = g.matmul(relaxed, bank)?;
    let hard = g.gather_rows(bank, &indices)?;
    let quantized = g.straight_through(hard, mixture)?;
    Ok(QueryOutput {
        indices,
        scores,
        probs,
        log_probs,
        hard,
        quantized,
    })
}

/// Replaces every prototype not marked in `used` with one of `queries`.
///
/// Rows are filled in index order by farthest-point selection: each takes the
/// query with the largest L1 distance to the nearest used or already
/// re-seeded prototype, ties to the lower query. Returns the re-seeded rows.
pub fn reseed_unused(bank: &mut Tensor, used: &[bool], queries: &Tensor) -> Vec<usize> {
    let dead: Vec<usize> = (0..used.len()).filter(|&k| !used[k]).collect();
    let n = queries.outer();
    if dead.is_empty() || n == 0 {
        return Vec::new();
    }
    let d = bank.last_dim();
    let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| {
            (0..used.len())
                .filter(|&k| used[k])
                .map(|k| l1(queries.row(i), bank.row(k)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut taken = vec![false; n];
    let mut out = Vec::new();
    for &k in &dead {
        let Some(best) = (0..n)
            .filter(|&i| !taken[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if nearest[b] >= nearest[i] => Some(b),
                _ => Some(i),
            })
        else {
            break;
        };
        taken[best] = true;
        let row = queries.row(best).to_vec();
        for (i, near) in nearest.iter_mut().enumerate() {
            *near = near.min(l1(queries.row(i), &row));
        }
        bank.data_mut()[k * d..(k + 1) * d].copy_from_slice(&row);
        out.push(k);
    }
    out
}

/// One standard Gumbel draw.
pub fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

pub fn gumbel_noise(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| scale * gumbel(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is consistent")
}

/// `softmax((logits + noise) / temperature)`.
pub fn gumbel_softmax_with_noise(
    logits: &[f64],
    noise: &[f64],
    temperature: f64,
) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.len() != noise.len() || logits.is_empty() {
        return Err(Error::invalid(
            "logits and noise must be nonempty and equally long",
        ));
    }
    let z: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, n)| (l + n) / temperature)
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Relaxed categorical sample with fresh Gumbel noise.
pub fn gumbel_sample(logits: &[f64], temperature: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let noise: Vec<f64> = (0..logits.len()).map(|_| gumbel(rng)).collect();
    gumbel_softmax_with_noise(logits, &noise, temperature)
}

/// `Σ_rows ‖f - q‖₁ / rows`.
pub fn prototype_loss(g: &mut Graph, f_lr: Var, q_lr: Var) -> Result<Var> {
    let rows = g.value(q_lr).outer();
    let d = g.sub(f_lr, q_lr)?;
    let l1 = g.l1_norm(d);
    Ok(g.scale(l1, 1.0 / rows as f64))
}

/// Linear decay from 0.9 to 0.01 over `total_steps`, clamped at 0.01.
pub fn anneal_temperature(step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return TEMPERATURE_END;
    }
    let frac = (step as f64 / total_steps as f64).min(1.0);
    ((1.0 - frac) * TEMPERATURE_START + frac * TEMPERATURE_END).max(TEMPERATURE_END)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn anneal_endpoints() {
        assert_eq!(anneal_temperature(0, 100), 0.9);
        assert_eq!(anneal_temperature(100, 100), 0.01);
        assert_eq!(anneal_temperature(200, 100), 0.01);
    }

    #[test]
    fn init_rows_have_unit_l1() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let s = init_bank(&mut rng, 4, 6);
        for i in 0..4 {
            let l1: f64 = s.row(i).iter().map(|v| v.abs()).sum();
            assert!((l1 - 1.0).abs() < 1e-12);
        }
    }
}
