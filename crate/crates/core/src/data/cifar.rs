//! CIFAR-10 binary batches: each record is one label byte followed by the
//! red, green and blue 32x32 planes.

use super::DataError;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_PIXELS;
pub const CIFAR_AUTOMOBILE: u8 = 1;
pub const CIFAR_TRUCK: u8 = 9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarBatch {
    /// `n x 32 x 32 x 3`, interleaved per pixel.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl CifarBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * 3 * CIFAR_PIXELS..(i + 1) * 3 * CIFAR_PIXELS]
    }
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<CifarBatch, DataError> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::Parse {
            format: "cifar10",
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            reason: format!(
                "length {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3 * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(DataError::Parse {
                format: "cifar10",
                offset: r * CIFAR_RECORD,
                reason: format!("label byte {label} outside 0..=9"),
            });
        }
        labels.push(label);
        let planes = &record[1..];
        for p in 0..CIFAR_PIXELS {
            for c in 0..3 {
                images.push(planes[c * CIFAR_PIXELS + p]);
            }
        }
    }
    Ok(CifarBatch { images, labels })
}

pub fn write_cifar10(batch: &CifarBatch) -> Vec<u8> {
    let mut out = Vec::with_capacity(batch.len() * CIFAR_RECORD);
    for i in 0..batch.len() {
        out.push(batch.labels[i]);
        let img = batch.image(i);
        for c in 0..3 {
            for p in 0..CIFAR_PIXELS {
                out.push(img[p * 3 + c]);
            }
        }
    }
    out
}
