//! V-variable Sierpinski gaskets: random self-similar fractals built from a
//! finite family of post-critically finite IFSs, with their dimensions,
//! Laplacian spectra and heat kernels.

pub mod error;
pub mod experiments;
pub mod graph;
pub mod heat;
pub mod ifs;
pub mod linalg;
pub mod measures;
pub mod pressure;
pub mod rng;
pub mod spectral;
pub mod vtree;

pub use error::{Error, Result};

/// Order-preserving map, parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}
