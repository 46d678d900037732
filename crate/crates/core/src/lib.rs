//! Surrogate modeling of path-dependent composites with a physically
//! recurrent neural network: a linear encoder feeds fictitious material
//! points evaluated by real elastoplastic constitutive updates (the only
//! source of nonlinearity and memory), and a positive decoder returns the
//! homogenized stress. Training data comes from the periodic finite element
//! cell in [`microfe`]; strain paths come from [`pathgen`]; gradients flow
//! through the material layer in [`train`].

pub mod constitutive;
pub mod microfe;
pub mod pathgen;
pub mod prnn;
pub mod train;
