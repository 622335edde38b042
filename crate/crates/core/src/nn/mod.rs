//! Minimal differentiable-computation kernel: tensors, a recorded tape with
//! reverse-mode gradients, layers, and AdamW.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{AttentionLayout, Graph, Var};
pub use layers::{Activation, Block, CausalSelfAttention, DropoutRates, Embedding, LayerNorm, Linear, Mlp};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamStore};
pub use tensor::{linear_forward, mse_loss, Tensor};

/// The RNG used for initialization, dropout and sampling. ChaCha output is
/// specified independently of platform, which keeps seeded runs reproducible.
pub type NnRng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> NnRng {
    use rand::SeedableRng;
    NnRng::seed_from_u64(seed)
}
