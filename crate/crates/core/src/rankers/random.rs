use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{RankError, RankedEntry, RankedSuite};

/// Seeded uniform permutation. Scores are descending ranks (`n` for the
/// first test down to 1), so the order survives the tie-break sort.
pub fn random_rank<K: Ord + Clone>(
    tests: &[K],
    durations: &[f64],
    seed: u64,
) -> Result<RankedSuite<K>, RankError> {
    if tests.is_empty() {
        return Err(RankError::EmptyTestSet);
    }
    if tests.len() != durations.len() {
        return Err(RankError::KeyMismatch);
    }
    let mut order: Vec<usize> = (0..tests.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    Ok(RankedSuite {
        entries: order
            .into_iter()
            .enumerate()
            .map(|(pos, i)| RankedEntry {
                test: tests[i].clone(),
                score: (n - pos) as f64,
                duration: durations[i],
            })
            .collect(),
    })
}
