//! Manifests, label maps, images and the synthetic fixture.

pub mod dataset;
pub mod fixture;
pub mod manifest;
pub mod pgm;

pub use dataset::{load_image, save_tensor, Dataset};
pub use fixture::{generate_fixture, render_fixture, Fixture, FixtureFiles, FixtureSpec, FIXTURE_CLASSES};
pub use manifest::{Domain, Manifest, Record, Role};
pub use pgm::{load_label_map, read_pgm, save_label_map, write_pgm, LabelMap};
