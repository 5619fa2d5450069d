//! NT-Xent contrastive loss over `2N` projected embeddings.
//!
//! Rows `2k` and `2k + 1` (0-based) are a positive pair. Every other row in
//! the batch is a negative; the softmax denominator excludes only the anchor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Added to the diagonal logits so the anchor drops out of its own softmax.
const SELF_MASK: f32 = -1.0e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f32,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.5 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Cosine similarities between all rows of a `[m, p]` matrix.
pub fn similarity_matrix(z: &Tensor) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(Error::shape("similarity_matrix", format!("{:?}", z.shape())));
    }
    let (m, p) = (z.shape()[0], z.shape()[1]);
    let rows: Vec<&[f32]> = z.data().chunks(p).collect();
    let norms: Vec<f64> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Input(format!("similarity_matrix: row {i} has zero norm")));
    }
    let mut out = vec![0.0f32; m * m];
    for i in 0..m {
        for j in 0..m {
            let dot: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(&a, &b)| (a as f64 / norms[i]) * (b as f64 / norms[j]))
                .sum();
            out[i * m + j] = dot.clamp(-1.0, 1.0) as f32;
        }
    }
    Tensor::new(vec![m, m], out)
}

/// Positive partner of each row under the interleaved pairing.
pub fn positive_index(rows: usize) -> Vec<usize> {
    (0..rows).map(|i| i ^ 1).collect()
}

/// Mean NT-Xent loss over all `2N` anchors of an interleaved `[2N, p]` batch.
pub fn nt_xent(tape: &mut Tape, z: Var, temperature: f32) -> Result<Var> {
    let pos = positive_log_probs(tape, z, temperature)?;
    let mean = tape.mean(pos)?;
    tape.scale(mean, -1.0)
}

/// Per-anchor loss terms `-log p(positive | anchor)`.
pub fn anchor_terms(z: &Tensor, temperature: f32) -> Result<Vec<f32>> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let pos = positive_log_probs(&mut tape, v, temperature)?;
    Ok(tape.value(pos).data().iter().map(|&v| -v).collect())
}

fn positive_log_probs(tape: &mut Tape, z: Var, temperature: f32) -> Result<Var> {
    let s = tape.shape(z).to_vec();
    if s.len() != 2 || s[0] % 2 != 0 {
        return Err(Error::shape("nt_xent", format!("expected [2N, p], got {s:?}")));
    }
    let m = s[0];
    if m < 4 {
        return Err(Error::Input(format!(
            "nt_xent needs N >= 2 pairs for negatives, got {} rows",
            m
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let zn = tape.l2_normalize(z, 1)?;
    let znt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, znt)?;
    let scaled = tape.scale(sim, 1.0 / temperature)?;
    let mut mask = Tensor::zeros(&[m, m]);
    for i in 0..m {
        mask.data_mut()[i * m + i] = SELF_MASK;
    }
    let mask = tape.constant(mask);
    let logits = tape.add(scaled, mask)?;
    let logp = tape.log_softmax(logits, 1)?;
    tape.gather(logp, &positive_index(m))
}

/// Interleaves two `[N, ...]` tensors row by row into `[2N, ...]`.
pub fn interleave(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.shape(a).first().copied().unwrap_or(0);
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(
            "interleave",
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    let both = tape.concat(&[a, b], 0)?;
    let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    tape.select_rows(both, &order)
}

/// Plain-value interleave, for building view batches.
pub fn interleave_tensors(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() == 0 {
        return Err(Error::shape("interleave", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.shape()[0];
    let both = Tensor::stack_leading(&[a, b])?;
    let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
    both.select_leading(&order)
}

/// Loss value of a fixed embedding matrix.
pub fn nt_xent_value(z: &Tensor, temperature: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let l = nt_xent(&mut tape, v, temperature)?;
    tape.scalar_value(l)
}
