//! Scoring classroom observation items from fixed sentence embeddings.
//!
//! The crate covers the whole experiment loop: transcript ingestion and
//! chapter segmentation, a multitask encoder trained with AdamW or Adamax,
//! and the three evaluation analyses used to judge the resulting scores:
//!
//! - [`metrics`]: multilevel partial Spearman agreement with human raters,
//! - [`gtheory`]: nested variance decomposition of score stability,
//! - [`taucca`]: Kendall-τ kernel canonical correlation against value-added
//!   measures.
//!
//! [`simdata`] generates a hierarchical corpus with planted ground truth so
//! every stage can be checked without restricted data.

pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod gtheory;
pub mod hash;
pub mod items;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod simdata;
pub mod taucca;

pub use error::{Error, Result};
pub use items::{Instrument, ItemRegistry, ItemSpec, N_ITEMS};
