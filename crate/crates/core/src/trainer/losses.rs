use crate::numerics::{lit, Graph, NumericsError, Scalar, Var};
use crate::reasoner::{Model, ReasonerError};
use crate::text::{BOS, PAD};

/// Mean natural-log cross-entropy over the non-pad targets.
pub fn lm_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
    let masked: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    g.cross_entropy(logits, &masked)
}

/// `Σ_dims (q_proj − m)²`, averaged over the rows of a batch.
pub fn warmup_mse<S: Scalar>(g: &mut Graph<S>, q_proj: Var, m: Var) -> Result<Var, NumericsError> {
    let rows = g.shape(q_proj)[0];
    let diff = g.sub(q_proj, m)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq)?;
    g.scale(total, S::one() / lit(rows as f64))
}

/// InfoNCE with in-batch negatives: row `i` of `m` is the positive for
/// query `i`, every other row a negative. Batch mean.
pub fn info_nce<S: Scalar>(g: &mut Graph<S>, q: Var, m: Var, tau: f64) -> Result<Var, NumericsError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(NumericsError::Usage(format!("temperature must be positive, got {tau}")));
    }
    let scores = g.matmul_nt(q, m)?;
    info_nce_scores(g, scores, tau)
}

/// InfoNCE from a `B×K` score matrix whose diagonal holds the positives.
pub fn info_nce_scores<S: Scalar>(g: &mut Graph<S>, scores: Var, tau: f64) -> Result<Var, NumericsError> {
    let rows = g.shape(scores)[0];
    let z = g.scale(scores, lit(1.0 / tau))?;
    let targets: Vec<Option<usize>> = (0..rows).map(Some).collect();
    g.cross_entropy(z, &targets)
}

/// Decoder logits and shifted targets for reconstructing `target` (which
/// ends in `<eos>`) from encoder input `src` and the memory rows.
pub fn reconstruction_logits<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    src: &[usize],
    memory: Var,
    query: Option<Var>,
    target: &[usize],
) -> Result<(Var, Vec<usize>), ReasonerError> {
    if target.is_empty() {
        return Err(ReasonerError::Usage("empty reconstruction target".into()));
    }
    let mut tgt_in = Vec::with_capacity(target.len());
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(&target[..target.len() - 1]);
    let (logits, _) = model.forward(g, src, &tgt_in, Some(memory), query)?;
    Ok((logits, target.to_vec()))
}

/// Cross-entropy of decoding `target` from a memory with only `<bos>` as
/// encoder input.
pub fn reconstruction_loss<S: Scalar>(
    g: &mut Graph<S>,
    model: &Model<S>,
    memory: Var,
    target: &[usize],
) -> Result<Var, ReasonerError> {
    let (logits, t) = reconstruction_logits(g, model, &[BOS], memory, None, target)?;
    Ok(lm_loss(g, logits, &t)?)
}
