//! Procedural street-scene fixture with place-specific landmarks, per-view
//! clutter and a target domain offset by a fixed additive field.
//!
//! Landmarks sit in the upper half of the frame, above street level. Clutter
//! lives at street level, is strongly textured and several times brighter
//! than the landmarks, so untrained descriptors are dominated by it.
//!
//! Layout of a generated directory:
//! `source.csv` (labelled `train` views and held-out `query` views),
//! `target.csv` (`gallery` and `query` copies in the target domain),
//! `images/*.vprt` and `labels/*.pgm`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{save_tensor, Dataset};
use super::manifest::{Domain, Manifest, Record, Role};
use super::pgm::{save_label_map, LabelMap};
use crate::error::{Error, Result};
use crate::geo::Coordinate;
use crate::tensor::Tensor;

pub const FIXTURE_CLASSES: usize = 17;

const ROAD: u8 = 0;
const SIDEWALK: u8 = 1;
const SKY: u8 = 10;
/// Static scene parts whose appearance identifies a place.
const LANDMARKS: [u8; 7] = [2, 3, 4, 5, 6, 7, 8];
/// Movable objects that change from view to view.
const CLUTTER: [u8; 7] = [9, 11, 12, 13, 14, 15, 16];

/// Spacing between neighbouring place centres, meters.
pub const PLACE_SPACING_M: f64 = 150.0;
/// Largest offset of a view from its place centre, meters.
pub const VIEW_SCATTER_M: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub seed: u64,
    pub places: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// RMS of the additive target-domain field.
    pub domain_shift: f64,
    /// Landmark blobs per place.
    pub landmarks: usize,
    /// Clutter blobs per view.
    pub clutter: usize,
    /// Largest clutter radius as a fraction of the image side.
    pub clutter_size: f64,
    /// Scale of clutter colours relative to landmark colours.
    pub clutter_contrast: f64,
    /// Amplitude of the stripe texture on clutter; other classes use a tenth.
    pub clutter_texture: f64,
    /// Std of the per-view global brightness offset.
    pub brightness: f64,
    /// Std of per-pixel noise.
    pub noise: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            places: 32,
            views: 4,
            height: 64,
            width: 64,
            domain_shift: 0.3,
            landmarks: 4,
            clutter: 7,
            clutter_size: 0.22,
            clutter_contrast: 3.0,
            clutter_texture: 0.6,
            brightness: 0.2,
            noise: 0.05,
        }
    }
}

/// Source and target datasets of one fixture.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub source: Dataset,
    pub target: Dataset,
}

#[derive(Clone, Debug)]
pub struct FixtureFiles {
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    class: u8,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    color: [f64; 3],
    rect: bool,
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        if self.rect {
            dy.abs() <= 1.0 && dx.abs() <= 1.0
        } else {
            dy * dy + dx * dx <= 1.0
        }
    }
}

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ]
}

/// Class-specific stripe texture; independent of the seed so classes look
/// alike across fixtures.
fn texture(class: u8, c: usize, y: f64, x: f64) -> f64 {
    let k = f64::from(class);
    let theta = (k * 37.0).to_radians();
    let period = 3.0 + f64::from(class % 4) * 1.5;
    let phase = 2.0 * PI * (x * theta.cos() + y * theta.sin()) / period;
    (phase + c as f64 * 2.0 * PI / 3.0).sin()
}

fn place_landmarks(spec: &FixtureSpec, place: usize) -> Vec<Blob> {
    let mut rng = stream(spec.seed, 1_000_000 + place as u64);
    let (h, w) = (spec.height as f64, spec.width as f64);
    (0..spec.landmarks)
        .map(|_| {
            let class = LANDMARKS[rng.random_range(0..LANDMARKS.len())];
            Blob {
                class,
                cy: rng.random_range(0.22 * h..0.42 * h),
                cx: rng.random_range(0.1 * w..0.9 * w),
                ry: rng.random_range(0.10 * h..0.18 * h),
                rx: rng.random_range(0.10 * w..0.20 * w),
                color: color(&mut rng),
                rect: class == LANDMARKS[0],
            }
        })
        .collect()
}

struct View {
    image: Tensor,
    labels: LabelMap,
}

fn render_view(spec: &FixtureSpec, landmarks: &[Blob], tag: u64) -> Result<View> {
    let mut rng = stream(spec.seed, tag);
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f64, w as f64);
    let jitter = Normal::new(0.0, 0.03 * hf).expect("finite");
    let tint = Normal::new(0.0, 0.05).expect("finite");
    // Painted back to front: clutter first so landmarks stay visible.
    let mut blobs = Vec::with_capacity(spec.clutter + landmarks.len());
    for _ in 0..spec.clutter {
        let class = CLUTTER[rng.random_range(0..CLUTTER.len())];
        blobs.push(Blob {
            class,
            cy: rng.random_range(0.62 * hf..0.9 * hf),
            cx: rng.random_range(0.0..wf),
            ry: rng.random_range(0.35..1.0) * spec.clutter_size * hf,
            rx: rng.random_range(0.35..1.0) * spec.clutter_size * wf,
            color: color(&mut rng).map(|v| v * spec.clutter_contrast),
            rect: false,
        });
    }
    for b in landmarks {
        let mut b = *b;
        b.cy += jitter.sample(&mut rng);
        b.cx += jitter.sample(&mut rng);
        for c in &mut b.color {
            *c += tint.sample(&mut rng);
        }
        blobs.push(b);
    }
    let horizon = rng.random_range(0.18..0.28) * hf;
    let kerb = rng.random_range(0.78..0.88) * hf;
    let sky = [0.5 + tint.sample(&mut rng), 0.6, 0.9];
    let road = [-0.3, -0.3, -0.25];
    let walk = [0.1 + tint.sample(&mut rng), 0.05 + tint.sample(&mut rng), 0.0];
    let bright = if spec.brightness > 0.0 {
        Normal::new(0.0, spec.brightness).expect("finite").sample(&mut rng)
    } else {
        0.0
    };
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("finite"));

    let mut data = vec![0.0; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let (mut class, mut base) = if yf < horizon {
                (SKY, sky)
            } else if yf >= kerb {
                (ROAD, road)
            } else {
                (SIDEWALK, walk)
            };
            if let Some(b) = blobs.iter().rev().find(|b| b.contains(yf, xf)) {
                class = b.class;
                base = b.color;
            }
            labels[y * w + x] = class;
            let amp = if CLUTTER.contains(&class) {
                spec.clutter_texture
            } else {
                0.1 * spec.clutter_texture
            };
            for c in 0..3 {
                let n = noise.map_or(0.0, |d| d.sample(&mut rng));
                data[(c * h + y) * w + x] = base[c] + amp * texture(class, c, yf, xf) + bright + n;
            }
        }
    }
    Ok(View {
        image: Tensor::new(vec![3, h, w], data)?,
        labels: LabelMap::new(h, w, labels)?,
    })
}

/// Fixed additive field with RMS `spec.domain_shift`: a per-channel offset
/// plus a low-frequency wave.
pub fn domain_field(spec: &FixtureSpec) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let mut rng = stream(spec.seed, 7);
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let offset: f64 = rng.random_range(-1.0..1.0);
        let amp: f64 = rng.random_range(0.5..1.0);
        let (fy, fx, ph): (f64, f64, f64) = (
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.0..2.0 * PI),
        );
        for y in 0..h {
            for x in 0..w {
                let arg = 2.0 * PI * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64) + ph;
                data[(c * h + y) * w + x] = offset + amp * arg.sin();
            }
        }
    }
    let rms = (data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64).sqrt();
    let scale = if rms > 0.0 { spec.domain_shift / rms } else { 0.0 };
    data.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(vec![3, h, w], data).expect("consistent shape")
}

fn place_centre(p: usize) -> (f64, f64) {
    let per_row = 8;
    (
        (p % per_row) as f64 * PLACE_SPACING_M,
        (p / per_row) as f64 * PLACE_SPACING_M,
    )
}

fn view_coord<R: Rng>(rng: &mut R, p: usize) -> Coordinate {
    let (e, n) = place_centre(p);
    let r = rng.random_range(0.0..VIEW_SCATTER_M);
    let a = rng.random_range(0.0..2.0 * PI);
    Coordinate::utm(e + r * a.cos(), n + r * a.sin())
}

fn image_path(domain: Domain, id: u64) -> PathBuf {
    let prefix = match domain {
        Domain::Source => "s",
        Domain::Target => "t",
    };
    PathBuf::from(format!("images/{prefix}{id:05}.vprt"))
}

fn label_path(id: u64) -> PathBuf {
    PathBuf::from(format!("labels/{id:05}.pgm"))
}

/// Renders a fixture in memory. Ids: source train `p·V+v`, source query
/// `PV + p·V+v`, target gallery `2PV + …`, target query `3PV + …`.
pub fn render_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    if spec.places == 0 || spec.views == 0 {
        return Err(Error::Config("fixture needs at least one place and one view".into()));
    }
    if spec.height < 8 || spec.width < 8 || !(spec.domain_shift >= 0.0) {
        return Err(Error::Config(
            "fixture images must be at least 8×8 and the shift nonnegative".into(),
        ));
    }
    let field = domain_field(spec);
    let pv = (spec.places * spec.views) as u64;
    let mut coords = stream(spec.seed, 3);
    let mut src = (Vec::new(), BTreeMap::new(), BTreeMap::new());
    let mut tgt = (Vec::new(), BTreeMap::new(), BTreeMap::new());
    for (split, (src_role, tgt_role)) in [(Role::Train, Role::Gallery), (Role::Query, Role::Query)]
        .into_iter()
        .enumerate()
    {
        for p in 0..spec.places {
            let landmarks = place_landmarks(spec, p);
            for v in 0..spec.views {
                let local = (p * spec.views + v) as u64;
                let id = split as u64 * pv + local;
                let view = render_view(spec, &landmarks, 2_000_000 + id)?;
                let coord = view_coord(&mut coords, p);
                let labelled = src_role == Role::Train;
                src.0.push(Record {
                    id,
                    path: image_path(Domain::Source, id),
                    coord,
                    role: src_role,
                    domain: Domain::Source,
                    labels: labelled.then(|| label_path(id)),
                });
                let tid = id + 2 * pv;
                let mut shifted = view.image.clone();
                for (a, b) in shifted.data_mut().iter_mut().zip(field.data()) {
                    *a += b;
                }
                tgt.0.push(Record {
                    id: tid,
                    path: image_path(Domain::Target, tid),
                    coord,
                    role: tgt_role,
                    domain: Domain::Target,
                    labels: None,
                });
                tgt.1.insert(tid, shifted);
                src.1.insert(id, view.image);
                if labelled {
                    src.2.insert(id, view.labels);
                }
            }
        }
    }
    Ok(Fixture {
        source: Dataset::from_parts(Manifest::new(src.0, "")?, src.1, src.2),
        target: Dataset::from_parts(Manifest::new(tgt.0, "")?, tgt.1, tgt.2),
    })
}

/// Renders a fixture and writes it under `dir`.
pub fn generate_fixture(spec: &FixtureSpec, dir: impl AsRef<Path>) -> Result<FixtureFiles> {
    let dir = dir.as_ref();
    let fx = render_fixture(spec)?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    let mut files = Vec::new();
    for (ds, name) in [(&fx.source, "source.csv"), (&fx.target, "target.csv")] {
        for r in &ds.manifest().records {
            save_tensor(dir.join(&r.path), ds.image(r.id)?)?;
            if let (Some(lp), Some(map)) = (&r.labels, ds.labels(r.id)) {
                save_label_map(dir.join(lp), map)?;
            }
        }
        let path = dir.join(name);
        let mut m = ds.manifest().clone();
        m.base_dir = dir.to_path_buf();
        m.save(&path)?;
        files.push(path);
    }
    let target_manifest = files.pop().expect("two manifests");
    let source_manifest = files.pop().expect("two manifests");
    Ok(FixtureFiles {
        source_manifest,
        target_manifest,
    })
}
