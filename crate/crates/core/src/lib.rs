//! Representative sampling of objects from numeric feature tables.
//!
//! Given a table of objects characterised by real-valued measures, the crate
//! selects a sample of a requested size in three steps:
//!
//! 1. [`table`] — ingest and validate the characterised object set, z-score
//!    the measures and optionally drop redundant ones;
//! 2. [`gmm`] — cluster the objects with an EM-fitted diagonal Gaussian
//!    mixture (component count fixed or chosen by BIC), exposing per-object
//!    membership posteriors;
//! 3. [`sampler`] — give each cluster a proportional quota with a floor of
//!    one, rebalance the quotas to the exact sample size, and select the
//!    maximum-posterior members of each cluster.
//!
//! [`eval`] adds a seeded benchmark comparing this sampler against uniform
//! random sampling on synthetic populations with rare object kinds.
//!
//! Every operation is a pure function of its inputs and an explicit 64-bit
//! seed; repeated runs produce byte-identical artifacts.
//!
//! ```
//! use repsample_core::table::load_table;
//! use repsample_core::sampler::{sample_pipeline, KChoice, PipelineOptions};
//!
//! let csv = "id,width,height\na,1.0,9.1\nb,1.2,8.9\nc,5.1,0.2\nd,4.9,0.4\n";
//! let set = load_table(csv.as_bytes()).unwrap();
//! let options = PipelineOptions {
//!     k: KChoice::Fixed(2),
//!     ..PipelineOptions::default()
//! };
//! let outcome = sample_pipeline(&set, 2, &options).unwrap();
//! assert_eq!(outcome.sample.entries.len(), 2);
//! ```

pub mod eval;
pub mod gmm;
pub mod numfmt;
pub mod sampler;
pub mod seeds;
pub mod table;
