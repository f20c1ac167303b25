//! Toy image-caption data: procedurally rendered shapes, folder ingestion and
//! the pooling codec that stands in for a pretrained autoencoder.

pub mod codec;
pub mod dataset;
pub mod image_io;
pub mod shapes;
pub mod vocab;

pub use codec::LatentCodec;
pub use dataset::{generate_synthetic, ingest_folder, DataSource, Dataset, DatasetManifest, Record};
pub use image_io::{grid, images_to_tensor, tensor_to_images, write_gray, Image};
pub use shapes::{Color, Position, Shape, ShapeSpec, Size};
pub use vocab::Vocabulary;
