//! Volumes, NIfTI I/O, preprocessing, patch sampling and phantoms.

mod case;
mod nifti;
mod phantom;
mod preprocess;
mod sampler;
mod volume;

pub use case::{crop_bbox, parse_manifest, preprocess_case, read_manifest, write_manifest, BBox, ManifestEntry, PatientCase};
pub use nifti::{volume_read, volume_write};
pub use phantom::{generate_phantom, generate_phantom_with, PhantomConfig};
pub use preprocess::{ct_normalize, pet_zscore, resample_isotropic, resampled_extent, CT_CLIP_HU, ZSCORE_EPS};
pub use sampler::{extract_patch, sample_patch, CaseSampler, Patch, SamplerConfig, CT_PAD, LABEL_PAD, PET_PAD};
pub use volume::{stack_channels, Modality, Volume};
