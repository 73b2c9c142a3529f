//! Block-cipher decryption treated as an image-to-image inverse problem.
//!
//! Ground-truth images are serialized, encrypted with AES-128 (CTR or CBC),
//! reinterpreted as multi-channel "cipherimages" and optionally corrupted with
//! Gaussian noise. Three reconstructions are provided: exact keyed decryption,
//! the training-set mean, and a U-Net trained by plain supervised regression.
//!
//! Module map:
//! - [`blockcipher`]: AES-128, CTR keystream, CBC, XOR.
//! - [`codec`]: image/byte/cipherimage conversions, noise, container files, PNG export.
//! - [`pipeline`]: the composed forward operator and the two non-learned baselines.
//! - [`metrics`]: PSNR/SSIM under an extended-real policy and report emission.
//! - [`datakit`]: STL-10 loading, toy images, splits, manifests, materialization.
//! - [`nn`]: tensors, layers with hand-written backward passes, U-Net, Adam, trainer.

pub mod blockcipher;
pub mod codec;
pub mod datakit;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};

/// Order-preserving map over a slice, parallel when the `parallel` feature is on.
pub(crate) fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

/// Threads available to [`par_map`].
pub(crate) fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
