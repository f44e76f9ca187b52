//! Dense layers and the segment masks used to batch ragged sets in one graph.

use autodiff::{Graph, Tensor, Var};
use rand::Rng;

use crate::error::Result;
use crate::params::{glorot, Binding, Group, ParamId, ParamStore};

/// Additive bias that removes a logit from a softmax.
pub const NEG_INF: f64 = -1e30;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: Group,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            glorot(rng, &[d_in, d_out], d_in, d_out),
            group,
        );
        // Nonzero biases keep a row whose ReLU inputs all die from mapping to
        // the zero vector, which cosine similarity rejects.
        let bias = bias.then(|| {
            let limit = 1.0 / (d_in as f64).sqrt();
            let data = (0..d_out).map(|_| rng.gen_range(-limit..limit)).collect();
            store.add(format!("{name}.bias"), Tensor::vector(data), group)
        });
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.weight))?;
        Ok(match self.bias {
            Some(b) => g.add_row(y, p.var(b))?,
            None => y,
        })
    }
}

/// Linear, ReLU, linear.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        group: Group,
    ) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), d_in, hidden, true, group),
            second: Linear::new(store, rng, &format!("{name}.1"), hidden, d_out, true, group),
        }
    }

    /// For embedding heads: a shared random output offset would point every
    /// embedding the same way before training.
    pub fn zero_output_bias(self, store: &mut ParamStore) -> Self {
        if let Some(b) = self.second.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
        self
    }

    pub fn forward(&self, g: &mut Graph, p: &Binding, x: Var) -> Result<Var> {
        let h = self.first.forward(g, p, x)?;
        let h = g.relu(h);
        self.second.forward(g, p, h)
    }
}

/// 0/1 matrix with a one where row and column belong to the same segment.
pub fn segment_mask(rows: &[usize], cols: &[usize]) -> Tensor {
    segment_fill(rows, cols, 1.0, 0.0)
}

/// 0/`NEG_INF` matrix that confines a row softmax to its own segment.
pub fn segment_bias(rows: &[usize], cols: &[usize]) -> Tensor {
    segment_fill(rows, cols, 0.0, NEG_INF)
}

fn segment_fill(rows: &[usize], cols: &[usize], inside: f64, outside: f64) -> Tensor {
    let data = rows
        .iter()
        .flat_map(|&r| {
            cols.iter()
                .map(move |&c| if r == c { inside } else { outside })
        })
        .collect();
    Tensor::new(vec![rows.len(), cols.len()], data).expect("shape is consistent")
}

/// Softmax over the last axis restricted by an additive bias.
pub fn masked_softmax(g: &mut Graph, scores: Var, bias: &Tensor) -> Result<Var> {
    let b = g.constant(bias.clone());
    let s = g.add(scores, b)?;
    Ok(g.softmax(s))
}

/// Segment id of every element when segment `i` has `lens[i]` members.
pub fn segments(lens: &[usize]) -> Vec<usize> {
    lens.iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn masked_softmax_zeroes_other_segments() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.1, 9.0]).unwrap());
        let seg_r = [0, 1];
        let seg_c = [0, 0, 1];
        let w = masked_softmax(&mut g, s, &segment_bias(&seg_r, &seg_c)).unwrap();
        let v = g.value(w).data();
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 0.0);
        assert_eq!(v[4], 0.0);
        assert_eq!(v[5], 1.0);
        assert!((v[0] + v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn segments_expand_lengths() {
        assert_eq!(segments(&[2, 1, 3]), vec![0, 0, 1, 2, 2, 2]);
    }

    #[test]
    fn linear_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, &mut rng, "l", 3, 5, true, Group::Encoder);
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| true);
        let x = g.constant(Tensor::zeros(&[4, 3]));
        let y = lin.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 5]);
    }
}
