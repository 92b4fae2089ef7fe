//! Instances, bags, vocabulary, relation schema, and their encodings.

mod bags;
mod encode;
mod instance;
mod schema;
mod vocab;

pub use bags::{build_bags, Bag, BagKey, BagMode};
pub use encode::{
    encode_bags, encode_instance, generate_query, position_table_rows, relative_position,
    EncodedBag, EncodedInstance,
};
pub use instance::{
    load_instances, load_unlabelled_instances, parse_instances, Diagnostic, Entity, Instance,
    RawEntity, Record,
};
pub use schema::{RelationId, RelationSchema, NA};
pub use vocab::{EmbeddingTable, Vocabulary, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};
