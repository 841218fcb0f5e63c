//! Images on disk, dataset manifests, synthetic phantoms and checkpoints.

mod checkpoint;
mod manifest;
mod pgm;
mod phantom;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use manifest::{split_by_patient, DatasetManifest, ManifestEntry, Split, MANIFEST_HEADER};
pub use pgm::{decode_pgm, encode_pgm, load_mask_pgm, load_pgm, save_mask_pgm, save_pgm};
pub use phantom::{gen_phantom, PhantomGeometry, PhantomParams, PhantomSample};
