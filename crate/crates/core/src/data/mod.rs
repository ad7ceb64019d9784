//! Synthetic try-on data: sprite rendering, the simulated generator hub,
//! and dataset files with a JSON manifest.

pub mod hub;
pub mod render;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vton_tensor::GaussianRng;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::image::Image;
pub use hub::{hub_apply, tryon_region, HubModel};
pub use render::{render_garment, render_pair, render_person, GarmentSpec, PersonSpec};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoInput {
    pub image: Image,
    pub hub_id: usize,
    pub replica: usize,
    pub garment: GarmentSpec,
}

/// Target person `P`, paired garment `G`, and the pseudo-input set.
#[derive(Clone, Debug, PartialEq)]
pub struct TryOnSample {
    pub person_spec: PersonSpec,
    pub garment_spec: GarmentSpec,
    pub person: Image,
    pub garment: Image,
    pub pseudo: Vec<PseudoInput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFiles {
    #[serde(rename = "P")]
    pub person: String,
    #[serde(rename = "G")]
    pub garment: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoEntry {
    pub file: String,
    pub hub_id: usize,
    pub garment_spec: GarmentSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub person_spec: PersonSpec,
    pub garment_spec: GarmentSpec,
    pub files: SampleFiles,
    pub pseudo: Vec<PseudoEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    /// `[height, width]`
    pub image_size: [usize; 2],
    pub samples: Vec<ManifestSample>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Config(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Draws `k` distinct indices from `0..n` uniformly (partial Fisher–Yates).
fn choose_distinct(n: usize, k: usize, rng: &mut GaussianRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn stream_id(sample: usize, hub: usize, replica: usize) -> u64 {
    ((sample as u64) << 32) | ((hub as u64) << 16) | replica as u64
}

/// Generates the full in-memory dataset described by `cfg`.
///
/// Unpaired garments come from a catalog holding every paired garment plus
/// enough extra random garments that each target can draw
/// `replicas_per_hub` distinct garments other than its own.
pub fn generate(cfg: &DataConfig) -> Result<Vec<TryOnSample>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut spec_rng = GaussianRng::with_stream(cfg.seed, 0);
    let mut catalog: Vec<GarmentSpec> = Vec::new();
    let mut persons = Vec::with_capacity(cfg.count);
    let distinct_garment = |rng: &mut GaussianRng, catalog: &[GarmentSpec]| loop {
        let g = GarmentSpec::random(rng);
        if !catalog.iter().any(|c| c.same_garment(&g)) {
            return g;
        }
    };
    for _ in 0..cfg.count {
        persons.push(PersonSpec::random(&mut spec_rng));
        let g = distinct_garment(&mut spec_rng, &catalog);
        catalog.push(g);
    }
    while catalog.len() < cfg.replicas_per_hub + 1 {
        let g = distinct_garment(&mut spec_rng, &catalog);
        catalog.push(g);
    }

    let hubs: Vec<HubModel> = (1..=cfg.n_hubs).map(HubModel::preset).collect();
    let mut samples = Vec::with_capacity(cfg.count);
    for (i, person_spec) in persons.into_iter().enumerate() {
        let garment_spec = catalog[i].clone();
        let (person, garment) = render_pair(&person_spec, &garment_spec, h, w)?;
        let candidates: Vec<&GarmentSpec> = catalog.iter().filter(|c| !c.same_garment(&garment_spec)).collect();
        let mut pick_rng = GaussianRng::with_stream(cfg.seed, stream_id(i + 1, 0, 0));
        let shared = choose_distinct(candidates.len(), cfg.replicas_per_hub, &mut pick_rng);
        let mut pseudo = Vec::with_capacity(cfg.n_hubs * cfg.replicas_per_hub);
        for hub in &hubs {
            let picks = if cfg.shared_unpaired {
                shared.clone()
            } else {
                choose_distinct(candidates.len(), cfg.replicas_per_hub, &mut pick_rng)
            };
            for (r, &c) in picks.iter().enumerate() {
                let unpaired = candidates[c].clone();
                let region = tryon_region(&person_spec, &garment_spec, &unpaired, h, w);
                let mut rng = GaussianRng::with_stream(cfg.seed ^ 0x9e37_79b9, stream_id(i, hub.hub_id, r));
                let image = hub_apply(hub, &person_spec, &unpaired, &region, h, w, &mut rng)?;
                pseudo.push(PseudoInput {
                    image,
                    hub_id: hub.hub_id,
                    replica: r,
                    garment: unpaired,
                });
            }
        }
        samples.push(TryOnSample {
            person_spec,
            garment_spec,
            person,
            garment,
            pseudo,
        });
    }
    Ok(samples)
}

/// Every person, garment, and pseudo-input image, the codec training set.
pub fn all_images(samples: &[TryOnSample]) -> Vec<&Image> {
    let mut out = Vec::new();
    for s in samples {
        out.push(&s.person);
        out.push(&s.garment);
        out.extend(s.pseudo.iter().map(|p| &p.image));
    }
    out
}

/// Writes the dataset images under `out_dir/images` and then the manifest.
pub fn build_dataset(cfg: &DataConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    let out_dir = out_dir.as_ref();
    let samples = generate(cfg)?;
    std::fs::create_dir_all(out_dir.join("images"))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let p = format!("images/P_{i:04}.ppm");
        let g = format!("images/G_{i:04}.ppm");
        s.person.write_ppm(out_dir.join(&p))?;
        s.garment.write_ppm(out_dir.join(&g))?;
        let mut pseudo = Vec::with_capacity(s.pseudo.len());
        for ps in &s.pseudo {
            let file = format!("images/pseudo_{i:04}_h{}_r{:02}.ppm", ps.hub_id, ps.replica);
            ps.image.write_ppm(out_dir.join(&file))?;
            pseudo.push(PseudoEntry {
                file,
                hub_id: ps.hub_id,
                garment_spec: ps.garment.clone(),
            });
        }
        entries.push(ManifestSample {
            person_spec: s.person_spec.clone(),
            garment_spec: s.garment_spec.clone(),
            files: SampleFiles { person: p, garment: g },
            pseudo,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: cfg.seed,
        image_size: [cfg.height, cfg.width],
        samples: entries,
    };
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(manifest)
}

/// Resolves a manifest argument that may name the file or its directory.
pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let p = path.as_ref();
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

/// Loads a dataset written by [`build_dataset`].
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Manifest, Vec<TryOnSample>)> {
    let path = manifest_path(path);
    let manifest = Manifest::load(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let [h, w] = manifest.image_size;
    let read = |f: &str| -> Result<Image> {
        let img = Image::read_ppm(dir.join(f))?;
        if img.dims() != (h, w) {
            return Err(Error::Shape(format!("{f} is {:?}, manifest says {h}x{w}", img.dims())));
        }
        Ok(img)
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let mut replica_counter = std::collections::HashMap::new();
        let pseudo = s
            .pseudo
            .iter()
            .map(|p| {
                let r = replica_counter.entry(p.hub_id).or_insert(0usize);
                let replica = *r;
                *r += 1;
                Ok(PseudoInput {
                    image: read(&p.file)?,
                    hub_id: p.hub_id,
                    replica,
                    garment: p.garment_spec.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(TryOnSample {
            person_spec: s.person_spec.clone(),
            garment_spec: s.garment_spec.clone(),
            person: read(&s.files.person)?,
            garment: read(&s.files.garment)?,
            pseudo,
        });
    }
    Ok((manifest, samples))
}
