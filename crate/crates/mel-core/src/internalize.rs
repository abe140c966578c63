//! Internalization: likelihood training on validated meta-experiences.
//!
//! Each validated record is serialized into tokens and scored by the policy
//! conditioned on a retrospective context — instruction, query prompt, the
//! successful trajectory, the failed trajectory. The internalization loss
//! is the token-averaged negative log likelihood of the serialized record;
//! its negation is the meta-experience return added to the training
//! objective. Because the return is an average log probability, its
//! gradient coincides with a policy-gradient step whose reward is the
//! constant 1 over the record tokens.

use serde::{Deserialize, Serialize};

use crate::error::{MelError, Result};
use crate::metaexp::{serialize_meta_experience, MeStatus, MetaExperience, SerializeMode};
use crate::policy::{GradMap, PolicyParams};
use crate::taskenv::{Query, TokenId, Trajectory, Vocabulary};

/// Conditioning tokens for internalization: `instruction <sep> prompt <sep>
/// positive <sep> negative <sep>`. The trailing separator keeps record
/// n-grams from blending into trajectory n-grams.
pub fn retrospective_context(
    vocab: &Vocabulary,
    instruction: &[TokenId],
    query: &Query,
    positive: &Trajectory,
    negative: &Trajectory,
) -> Vec<TokenId> {
    let sep = vocab.sep();
    let mut out = Vec::with_capacity(
        instruction.len()
            + query.prompt_tokens.len()
            + positive.tokens.len()
            + negative.tokens.len()
            + 4,
    );
    let push_sep = |out: &mut Vec<TokenId>| {
        if let Some(s) = sep {
            out.push(s);
        }
    };
    out.extend(instruction);
    push_sep(&mut out);
    out.extend(&query.prompt_tokens);
    push_sep(&mut out);
    out.extend(&positive.tokens);
    push_sep(&mut out);
    out.extend(&negative.tokens);
    push_sep(&mut out);
    out
}

/// One scored record: the conditioning context and the serialized target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalizationEntry {
    pub context: Vec<TokenId>,
    pub target: Vec<TokenId>,
    /// Id of the meta-experience this entry came from.
    pub source_id: String,
    /// Serialization that produced the target.
    pub mode: SerializeMode,
}

/// Serialize a record, falling back from natural language to hint tokens
/// when the critique text contains out-of-vocabulary symbols.
pub fn serialize_with_fallback(
    vocab: &Vocabulary,
    me: &MetaExperience,
    preferred: SerializeMode,
) -> Result<(Vec<TokenId>, SerializeMode)> {
    match serialize_meta_experience(vocab, me, preferred) {
        Ok(t) => Ok((t, preferred)),
        Err(MelError::UnknownSymbol(_)) if preferred == SerializeMode::NaturalLanguage => {
            let t = serialize_meta_experience(vocab, me, SerializeMode::HintTokens)?;
            Ok((t, SerializeMode::HintTokens))
        }
        Err(e) => Err(e),
    }
}

/// Build one batch entry from a validated record and the trajectories it
/// was derived from. Refuses unjudged or rejected records.
pub fn build_entry(
    vocab: &Vocabulary,
    instruction: &[TokenId],
    me: &MetaExperience,
    query: &Query,
    positive: &Trajectory,
    negative: &Trajectory,
    preferred: SerializeMode,
) -> Result<InternalizationEntry> {
    if me.status != MeStatus::Validated {
        return Err(MelError::Contract(format!(
            "record `{}` is not validated and cannot be internalized",
            me.id
        )));
    }
    let (target, mode) = serialize_with_fallback(vocab, me, preferred)?;
    if target.is_empty() {
        return Err(MelError::Contract(format!("record `{}` serialized to no tokens", me.id)));
    }
    Ok(InternalizationEntry {
        context: retrospective_context(vocab, instruction, query, positive, negative),
        target,
        source_id: me.id.clone(),
        mode,
    })
}

/// A step's worth of validated records ready for likelihood training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InternalizationBatch {
    pub entries: Vec<InternalizationEntry>,
}

impl InternalizationBatch {
    pub fn new(entries: Vec<InternalizationEntry>) -> Self {
        InternalizationBatch { entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// Token-averaged negative log likelihood of each entry's target given its
/// context, averaged over the batch. Strictly positive unless the policy is
/// deterministic on every target token; an empty batch is a contract
/// violation (the trainer skips the term instead of calling this).
pub fn nll_loss(params: &PolicyParams, batch: &InternalizationBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(MelError::Contract("internalization batch is empty".into()));
    }
    let mut total = 0.0;
    for entry in &batch.entries {
        if entry.target.is_empty() {
            return Err(MelError::Contract(format!(
                "entry `{}` has an empty target",
                entry.source_id
            )));
        }
        let lps = params.sequence_log_prob(&entry.context, &entry.target);
        total += -lps.iter().sum::<f64>() / entry.target.len() as f64;
    }
    Ok(total / batch.entries.len() as f64)
}

/// The meta-experience return: exactly the negated internalization loss.
pub fn meta_return(params: &PolicyParams, batch: &InternalizationBatch) -> Result<f64> {
    Ok(-nll_loss(params, batch)?)
}

/// Gradient of the meta-experience return with respect to the live
/// parameters: the mean over entries of the token-averaged log-likelihood
/// gradient. Apply with a positive learning rate to ascend the return
/// (descend the loss).
pub fn meta_gradient(params: &PolicyParams, batch: &InternalizationBatch) -> Result<GradMap> {
    if batch.is_empty() {
        return Err(MelError::Contract("internalization batch is empty".into()));
    }
    let mut grad = GradMap::new(params.vocab_size());
    let batch_scale = 1.0 / batch.entries.len() as f64;
    for entry in &batch.entries {
        if entry.target.is_empty() {
            return Err(MelError::Contract(format!(
                "entry `{}` has an empty target",
                entry.source_id
            )));
        }
        let g = params.log_prob_grad(&entry.context, &entry.target);
        grad.add_scaled(&g, batch_scale / entry.target.len() as f64);
    }
    Ok(grad)
}
