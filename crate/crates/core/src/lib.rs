//! Cross-modality sub-image retrieval.
//!
//! The pipeline: dense grid descriptors ([`features`]) are pooled into a
//! k-means vocabulary ([`bow`]), every repository image becomes a word
//! histogram ([`index`]), queries are ranked by cosine similarity, and the
//! best candidates can be re-scored on query-sized patches ([`rerank`]).
//! [`harness`] runs the top-K evaluation matrix over datasets loaded by
//! [`ingest`].

pub mod bow;
pub mod error;
pub mod features;
pub mod harness;
pub mod index;
pub mod ingest;
pub mod raster;
pub mod rerank;
pub mod synth;

pub use bow::{build_vocabulary, cosine, quantize, BowHistogram, Vocabulary, VocabularyParams};
pub use error::{Error, Result};
pub use features::{extract_grid, select_strongest, Descriptor, ExtractorConfig, FeatureSet};
pub use index::{topk_success, RankedItem, RankedList, RetrievalIndex};
pub use raster::{GrayRaster, IntegralImage, RigidTransform};
