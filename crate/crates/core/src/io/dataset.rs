//! In-memory images and label maps for a manifest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::manifest::{Domain, Manifest, Record, Role};
use super::pgm::{load_label_map, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let t = read_tensor(std::io::BufReader::new(std::fs::File::open(path)?))?;
    if t.ndim() != 3 || t.shape()[0] != 3 {
        return Err(Error::dim(format!(
            "{}: expected a 3×H×W image, got {:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t)?;
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Dataset {
    manifest: Manifest,
    images: BTreeMap<u64, Tensor>,
    labels: BTreeMap<u64, LabelMap>,
}

impl Dataset {
    /// Reads every image and label map named by `manifest`. Label ids are
    /// checked against `classes`.
    pub fn load(manifest: Manifest, classes: usize) -> Result<Self> {
        let mut images = BTreeMap::new();
        let mut labels = BTreeMap::new();
        for r in &manifest.records {
            let img = load_image(manifest.resolve(&r.path))?;
            if let Some(lp) = &r.labels {
                let map = load_label_map(manifest.resolve(lp))?;
                let (_, h, w) = img.chw()?;
                if (map.height, map.width) != (h, w) {
                    return Err(Error::dim(format!(
                        "record {}: label map {}×{} does not match image {h}×{w}",
                        r.id, map.height, map.width
                    )));
                }
                map.validate(classes)?;
                labels.insert(r.id, map);
            }
            images.insert(r.id, img);
        }
        Ok(Self {
            manifest,
            images,
            labels,
        })
    }

    pub fn from_parts(manifest: Manifest, images: BTreeMap<u64, Tensor>, labels: BTreeMap<u64, LabelMap>) -> Self {
        Self {
            manifest,
            images,
            labels,
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn record(&self, id: u64) -> Result<&Record> {
        self.manifest
            .get(id)
            .ok_or_else(|| Error::Contract(format!("record {id} is not in the manifest")))
    }

    pub fn image(&self, id: u64) -> Result<&Tensor> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::Contract(format!("no image loaded for record {id}")))
    }

    pub fn labels(&self, id: u64) -> Option<&LabelMap> {
        self.labels.get(&id)
    }

    /// Ids of records with `domain` and one of `roles`, in manifest order.
    pub fn ids(&self, domain: Domain, roles: &[Role]) -> Vec<u64> {
        self.manifest.select(domain, roles).map(|r| r.id).collect()
    }
}
