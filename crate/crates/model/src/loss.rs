//! Triplet hinge loss over two-tower embeddings, with exact analytic
//! gradients.
//!
//! For unit embeddings q, p, n the cosine distance is D = 1 - q.d, so a
//! triplet term is max(0, D(q,p) - D(q,n) + m) = max(0, q.n - q.p + m).
//! The hinge subgradient at exactly zero is defined as 0: a term
//! contributes gradient only when strictly positive.

use crate::encoder::{Gradients, TwoTower};
use crate::ModelError;
use embr_engine::FeatureRecord;

pub struct Triplet<'a> {
    pub query: &'a FeatureRecord,
    pub positive: &'a FeatureRecord,
    pub negatives: Vec<&'a FeatureRecord>,
}

pub struct TripletBatch<'a> {
    pub triplets: Vec<Triplet<'a>>,
    /// Hinge margin, in (0, 2).
    pub margin: f64,
}

impl TripletBatch<'_> {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return Err(ModelError::Config(format!(
                "margin {} outside (0, 2)",
                self.margin
            )));
        }
        if self.triplets.iter().any(|t| t.negatives.is_empty()) {
            return Err(ModelError::Config("every triplet needs at least one negative".into()));
        }
        Ok(())
    }

    /// Total number of (query, positive, negative) terms.
    pub fn num_terms(&self) -> usize {
        self.triplets.iter().map(|t| t.negatives.len()).sum()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Summed hinge loss over the batch plus parameter gradients for each
/// tower. The loss is a sum, not a mean; callers scale the learning rate.
pub fn triplet_loss(
    two: &TwoTower,
    batch: &TripletBatch,
) -> Result<(f64, Gradients, Gradients), ModelError> {
    batch.validate()?;
    let mut query_grads = Gradients::zeros_like(&two.query);
    let mut doc_grads = Gradients::zeros_like(&two.doc);
    let mut loss = 0.0;

    for triplet in &batch.triplets {
        let fq = two.query.forward(triplet.query)?;
        let fp = two.doc.forward(triplet.positive)?;
        let d_pos = 1.0 - dot(&fq.e, &fp.e);

        let mut grad_eq = vec![0.0; fq.e.len()];
        let mut grad_ep = vec![0.0; fp.e.len()];
        let mut any_active = false;

        for negative in &triplet.negatives {
            let fn_ = two.doc.forward(negative)?;
            let d_neg = 1.0 - dot(&fq.e, &fn_.e);
            let term = d_pos - d_neg + batch.margin;
            if term > 0.0 {
                loss += term;
                any_active = true;
                // d(term)/d(e_q) = e_n - e_p; d/d(e_p) = -e_q; d/d(e_n) = e_q.
                for ((g, n), p) in grad_eq.iter_mut().zip(&fn_.e).zip(&fp.e) {
                    *g += n - p;
                }
                for (g, q) in grad_ep.iter_mut().zip(&fq.e) {
                    *g -= q;
                }
                two.doc.backward(negative, &fn_, &fq.e, &mut doc_grads);
            }
        }
        if any_active {
            two.query.backward(triplet.query, &fq, &grad_eq, &mut query_grads);
            two.doc.backward(triplet.positive, &fp, &grad_ep, &mut doc_grads);
        }
    }
    Ok((loss, query_grads, doc_grads))
}
