use rayon::prelude::*;

use super::{Graph, NumericsError, ParamGrads, ParamStore, Var};
use crate::Scalar;

/// Sum of per-item gradients and losses. Items run on independent tapes in
/// parallel; the reduction is sequential in item order, so results do not
/// depend on the thread count.
pub fn batch_gradients<T, I, E, F>(
    store: &ParamStore<T>,
    trainable: &[bool],
    items: &[I],
    loss_fn: F,
) -> Result<(ParamGrads<T>, f64), E>
where
    T: Scalar,
    I: Sync,
    E: From<NumericsError> + Send,
    F: Fn(&mut Graph<'_, T>, &I) -> Result<Var, E> + Sync,
{
    let parts: Vec<(ParamGrads<T>, f64)> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new(store, trainable);
            let loss = loss_fn(&mut g, item)?;
            let value = g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN);
            Ok((g.backward(loss)?, value))
        })
        .collect::<Result<_, E>>()?;
    let mut total = ParamGrads::empty(store.len());
    let mut loss = 0.0;
    for (g, l) in &parts {
        total.accumulate(g);
        loss += l;
    }
    Ok((total, loss))
}
