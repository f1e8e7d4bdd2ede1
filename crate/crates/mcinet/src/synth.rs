//! Writes a synthetic PGM corpus with its manifest.

use std::path::Path;

use mcinet_core::data::{self, DatasetManifest, SynthParams};

use crate::error::{self, Result};
use crate::imageio::encode_pgm;
use crate::manifest;

/// Writes `images/*.pgm` and `manifest.csv` under `out_dir`; three planes per
/// subject, `n_per_class` subjects per class.
pub fn synth_dataset(n_per_class: usize, seed: u64, out_dir: &Path, params: &SynthParams) -> Result<DatasetManifest> {
    let m = data::synth_manifest(n_per_class);
    for r in m.records() {
        let pixels = data::synth_slice(&r.subject_id, r.label, r.plane, seed, params);
        error::write(
            &out_dir.join(&r.image_path),
            &encode_pgm(params.size, params.size, &pixels),
        )?;
    }
    error::write(&out_dir.join("manifest.csv"), &manifest::manifest_csv(&m, None))?;
    manifest::load_manifest(&out_dir.join("manifest.csv"))
}
