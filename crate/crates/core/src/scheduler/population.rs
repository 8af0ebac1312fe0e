use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{AgentId, AgentProfile};
use crate::text::derive_key;

/// Generate `n` profiles with ids `1..=n`. Each agent draws from its own RNG
/// stream keyed by `(seed, id)`, so a profile does not depend on `n`.
pub fn spawn_population<F>(n: usize, generator: F, seed: u64) -> Vec<AgentProfile>
where
    F: Fn(AgentId, &mut ChaCha8Rng) -> AgentProfile,
{
    (1..=n as u64)
        .map(|i| {
            let id = AgentId(i);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_key(&[seed, i, 0x9e0]));
            generator(id, &mut rng)
        })
        .collect()
}
