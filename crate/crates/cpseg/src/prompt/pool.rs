//! Learnable prompt pool: (key, prompt) vector pairs selected per image by
//! query-key cosine matching.

use super::PromptLevel;
use crate::error::{CpSegError, Result};
use crate::rng::Rng;
use crate::tensor::params::{Init, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub key: ParamId,
    pub prompt: ParamId,
    pub level: PromptLevel,
}

#[derive(Debug, Clone)]
pub struct PromptPool {
    pub entries: Vec<PoolEntry>,
    pub dim: usize,
}

fn raw_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        // Degenerate keys rank below every real cosine.
        return -2.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

impl PromptPool {
    /// Create `size` entries with levels assigned cyclically scene, presence,
    /// quantity so every level is represented.
    pub fn new(store: &mut ParamStore, prefix: &str, size: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if size == 0 {
            return Err(CpSegError::Config("prompt pool must have at least one entry".into()));
        }
        let levels = [
            PromptLevel::Scene,
            PromptLevel::ClassPresence,
            PromptLevel::QuantityCondition,
        ];
        let mut entries = Vec::with_capacity(size);
        for i in 0..size {
            entries.push(PoolEntry {
                key: store.register(
                    &format!("{prefix}.key{i}"),
                    &[dim],
                    Init::ScaledUniform { fan_in: dim },
                    rng,
                )?,
                prompt: store.register(
                    &format!("{prefix}.prompt{i}"),
                    &[1, dim],
                    Init::ScaledUniform { fan_in: dim },
                    rng,
                )?,
                level: levels[i % levels.len()],
            });
        }
        Ok(PromptPool { entries, dim })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-k entries by cosine(key, query), score ties broken by pool index
    /// ascending, then stably reordered by level. Returns entry indices.
    ///
    /// Selection reads current key values and is a pure function of
    /// (pool values, query, k); it is not differentiated.
    pub fn select(&self, store: &ParamStore, query: &[f64], k: usize) -> Result<Vec<usize>> {
        if k > self.entries.len() {
            return Err(CpSegError::Config(format!(
                "cannot select {k} prompts from a pool of {}",
                self.entries.len()
            )));
        }
        let scores: Vec<f64> = self
            .entries
            .iter()
            .map(|e| raw_cosine(store.data(e.key), query))
            .collect();
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut picked: Vec<usize> = order.into_iter().take(k).collect();
        picked.sort_by_key(|&i| self.entries[i].level);
        Ok(picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(size: usize, dim: usize) -> (ParamStore, PromptPool) {
        let mut rng = Rng::new(23);
        let mut store = ParamStore::new();
        let pool = PromptPool::new(&mut store, "pool", size, dim, &mut rng).unwrap();
        (store, pool)
    }

    #[test]
    fn full_selection_returns_everything_level_sorted() {
        let (store, pool) = setup(7, 8);
        let query = vec![0.3; 8];
        let picked = pool.select(&store, &query, 7).unwrap();
        assert_eq!(picked.len(), 7);
        let levels: Vec<_> = picked.iter().map(|&i| pool.entries[i].level).collect();
        for pair in levels.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
        let mut sorted = picked.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn aligned_key_ranks_first_within_level() {
        let (mut store, pool) = setup(6, 4);
        // Make key 3 exactly the query direction, all others orthogonal.
        let query = [1.0, 0.0, 0.0, 0.0];
        for (i, e) in pool.entries.iter().enumerate() {
            let v = if i == 3 {
                vec![2.0, 0.0, 0.0, 0.0]
            } else {
                vec![0.0, 1.0, 0.5, -0.5]
            };
            store.data_mut(e.key).copy_from_slice(&v);
        }
        let picked = pool.select(&store, &query, 6).unwrap();
        let level3 = pool.entries[3].level;
        let first_of_level = picked
            .iter()
            .copied()
            .find(|&i| pool.entries[i].level == level3)
            .unwrap();
        assert_eq!(first_of_level, 3);
    }

    #[test]
    fn oversized_k_is_config_error() {
        let (store, pool) = setup(3, 4);
        assert!(matches!(
            pool.select(&store, &[1.0; 4], 4),
            Err(CpSegError::Config(_))
        ));
    }

    /// Brute-force oracle: selection sort by (score desc, index asc), take k,
    /// then stable level ordering.
    fn oracle_select(pool: &PromptPool, store: &ParamStore, query: &[f64], k: usize) -> Vec<usize> {
        let scores: Vec<f64> = pool
            .entries
            .iter()
            .map(|e| super::raw_cosine(store.data(e.key), query))
            .collect();
        let mut remaining: Vec<usize> = (0..pool.entries.len()).collect();
        let mut ranked = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for j in 1..remaining.len() {
                let (a, b) = (remaining[j], remaining[best]);
                if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                    best = j;
                }
            }
            ranked.push(remaining.remove(best));
        }
        ranked.truncate(k);
        // Stable bubble by level.
        let mut done = false;
        while !done {
            done = true;
            for j in 1..ranked.len() {
                if pool.entries[ranked[j - 1]].level > pool.entries[ranked[j]].level {
                    ranked.swap(j - 1, j);
                    done = false;
                }
            }
        }
        ranked
    }

    #[test]
    fn selection_matches_full_sort_oracle_on_random_pools() {
        let mut rng = Rng::new(40);
        for trial in 0..100 {
            let size = rng.range_inclusive(1, 12);
            let dim = rng.range_inclusive(2, 6);
            let mut store = ParamStore::new();
            let mut pool_rng = Rng::derive(41, trial);
            let pool = PromptPool::new(&mut store, "p", size, dim, &mut pool_rng).unwrap();
            let query: Vec<f64> = (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let k = rng.range_inclusive(1, size);
            let got = pool.select(&store, &query, k).unwrap();
            let want = oracle_select(&pool, &store, &query, k);
            assert_eq!(got, want, "trial {trial}");
        }
    }
}
