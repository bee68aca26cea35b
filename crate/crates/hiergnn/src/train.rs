//! Mini-batch training with per-document gradients computed in parallel
//! and reduced in batch order.

use hiergnn_core::corpus::Example;
use hiergnn_core::model::{apply_update, example_gradients, Model, ModelError, Optimizer, StepReport};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Batch `step` of a cyclic pass over `data`.
pub fn batch_at(data: &[Example], step: usize, batch_size: usize) -> Vec<&Example> {
    (0..batch_size.min(data.len()))
        .map(|k| &data[(step * batch_size + k) % data.len()])
        .collect()
}

/// One update. The result is bit-identical to the sequential
/// `hiergnn_core::model::train_step` because the reduction runs in batch
/// order after the parallel map.
pub fn parallel_step(model: &mut Model, batch: &[&Example], opt: &Optimizer) -> Result<StepReport, ModelError> {
    let snapshot = &*model;
    let results = batch
        .par_iter()
        .map(|ex| example_gradients(snapshot, ex))
        .collect::<Result<Vec<_>, _>>()?;
    apply_update(model, &results, opt)
}

/// Runs `steps` updates, calling `on_step` after each one.
pub fn train(
    model: &mut Model,
    data: &[Example],
    steps: usize,
    batch_size: usize,
    opt: &Optimizer,
    mut on_step: impl FnMut(&LossRow),
) -> Result<Vec<LossRow>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = batch_at(data, step, batch_size);
        let r = parallel_step(model, &batch, opt)?;
        let row = LossRow {
            step,
            loss: r.loss,
            grad_norm: r.grad_norm,
        };
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hiergnn_core::corpus::{generate_synthetic, SynthSpec};
    use hiergnn_core::model::{train_step, ModelConfig};
    use hiergnn_core::reasoning::Mode;

    #[test]
    fn batches_wrap_around() {
        let data = generate_synthetic(&SynthSpec::default(), 5).unwrap();
        let ids: Vec<&str> = batch_at(&data, 1, 3).iter().map(|e| e.doc_id.as_str()).collect();
        assert_eq!(ids, [&data[3].doc_id, &data[4].doc_id, &data[0].doc_id]);
        assert_eq!(batch_at(&data, 0, 9).len(), 5);
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let data = generate_synthetic(&SynthSpec::default(), 4).unwrap();
        let cfg = ModelConfig::new(8, 2, Mode::Lir, 200);
        let (mut a, mut b) = (Model::new(cfg.clone(), 1).unwrap(), Model::new(cfg, 1).unwrap());
        let opt = Optimizer::default();
        for _ in 0..2 {
            let batch: Vec<&Example> = data.iter().collect();
            let ra = parallel_step(&mut a, &batch, &opt).unwrap();
            let rb = train_step(&mut b, &data, &opt).unwrap();
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
        assert!(a.params.bit_identical(&b.params));
    }
}
