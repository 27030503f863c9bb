//! Head/tail projections, bi-affine mention-pair scoring, and log-sum-exp
//! aggregation to entity-pair scores.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Two-layer feed-forward weights for the head and tail argument spaces.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionHeads {
    pub head_w0: Var,
    pub head_w1: Var,
    pub tail_w0: Var,
    pub tail_w1: Var,
}

/// `W1 · relu(W0 · x)` per row, no biases. Dropout applies to the hidden layer.
pub fn project_side<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    w0: Var,
    w1: Var,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<Var> {
    let hidden = tape.matmul(x, w0)?;
    let hidden = tape.relu(hidden)?;
    let hidden = tape.dropout(hidden, dropout, train, rng)?;
    tape.matmul(hidden, w1)
}

pub fn project<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    heads: &ProjectionHeads,
    dropout: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let h = project_side(tape, x, heads.head_w0, heads.head_w1, dropout, train, rng)?;
    let t = project_side(tape, x, heads.tail_w0, heads.tail_w1, dropout, train, rng)?;
    Ok((h, t))
}

/// Averages rows of `x` within each group; `groups[m]` lists row indices of
/// instance `m`. Output has one row per group.
pub fn mean_pool(tape: &mut Tape<'_>, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
    if groups.is_empty() || groups.iter().any(Vec::is_empty) {
        return Err(Error::Precondition("mean_pool needs non-empty groups".into()));
    }
    let rows: Vec<usize> = groups.iter().flatten().copied().collect();
    let owner: Vec<usize> = groups
        .iter()
        .enumerate()
        .flat_map(|(m, g)| std::iter::repeat_n(m, g.len()))
        .collect();
    let weights: Vec<f64> = groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(1.0 / g.len() as f64, g.len()))
        .collect();
    let picked = tape.gather_rows(x, &rows)?;
    let w = tape.constant(Tensor::vector(weights));
    let scaled = tape.mul_col(picked, w)?;
    tape.scatter_add_rows(scaled, &owner, groups.len())
}

/// Entity-pair score per relation:
/// `score_c = ln Σ_{i,j} exp(x_head_i · R[:, c, :] · x_tail_j)`.
pub fn entity_pair_scores(tape: &mut Tape<'_>, x_head: Var, x_tail: Var, r: Var) -> Result<Var> {
    if tape.value(x_head).rows() == 0 || tape.value(x_tail).rows() == 0 {
        return Err(Error::Precondition("empty mention set".into()));
    }
    let pairwise = tape.biaffine(x_head, r, x_tail)?;
    tape.logsumexp(pairwise, 0)
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Softmax cross-entropy against `gold` and the predicted category.
pub fn loss_and_predict(tape: &mut Tape<'_>, scores: Var, gold: usize) -> Result<(Var, usize)> {
    let r = tape.value(scores).numel();
    if r < 2 {
        return Err(Error::Precondition(format!("need at least 2 categories, got {r}")));
    }
    if gold >= r {
        return Err(Error::Label(format!("gold category {gold} outside [0, {r})")));
    }
    let pred = argmax(tape.value(scores).data());
    let loss = tape.softmax_cross_entropy(scores, gold)?;
    Ok((loss, pred))
}
