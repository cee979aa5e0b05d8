use rand::seq::IndexedRandom;
use rand::Rng;

use super::{transformed_view, AugmentConfig, DataError, LabeledSample};
use crate::segmap::TaskKind;

/// Picks the sample that provides context for `anchor`.
///
/// Instance tasks always use a transformed view of the anchor. Category tasks
/// use a view with probability `p_view`, otherwise a different pool sample
/// sharing at least one category. With `fallback_to_view`, a missing partner
/// degrades to a view instead of [`DataError::NoPartner`].
pub fn sample_context_partner<R: Rng + ?Sized>(
    pool: &[LabeledSample],
    anchor: &LabeledSample,
    kind: TaskKind,
    p_view: f64,
    augment: &AugmentConfig,
    fallback_to_view: bool,
    rng: &mut R,
) -> Result<LabeledSample, DataError> {
    if pool.is_empty() {
        return Err(DataError::EmptyPool);
    }
    if kind == TaskKind::Instance || rng.random_bool(p_view.clamp(0.0, 1.0)) {
        return Ok(transformed_view(anchor, augment, rng));
    }
    let cats = anchor.category_set();
    let candidates: Vec<&LabeledSample> = pool
        .iter()
        .filter(|s| !std::ptr::eq(*s, anchor))
        .filter(|s| s.category_set().intersection(&cats).next().is_some())
        .collect();
    match candidates.choose(rng) {
        Some(s) => Ok((*s).clone()),
        None if fallback_to_view => Ok(transformed_view(anchor, augment, rng)),
        None => Err(DataError::NoPartner),
    }
}
