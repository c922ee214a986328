//! Datasets: the synthetic sinusoid, MNIST IDX ingestion with pooling,
//! and the flat-binary array exchange format.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::corruption::{CorruptionModel, LinearOperator};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Measurement batch plus (usually small) clean reference and optional
/// ground truth for synthetic evaluation.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, m]` corrupted measurements.
    pub corrupted: Tensor,
    /// `[K, d]` clean reference signals, possibly empty.
    pub clean_reference: Tensor,
    /// `[N, d]` noiseless signals behind each measurement (synthetic only).
    pub ground_truth: Option<Tensor>,
}

// ── Sinusoid (synthetic) ─────────────────────────────────────────────

/// Curve point in R^5: `c(s) = (s, sin 2s, 0, 0, 0)`.
pub fn sinusoid_curve_point(s: f64) -> [f64; 5] {
    [s, (2.0 * s).sin(), 0.0, 0.0, 0.0]
}

/// Seeded 3x5 Gaussian embedding with entries ~ N(0, 1/3).
pub fn sinusoid_embedding(rng: &mut impl Rng) -> Tensor {
    let std = (1.0f64 / 3.0).sqrt();
    let data: Vec<f64> = (0..15)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_shape(3, 5, data).expect("3x5")
}

fn embed_curve_point(e: &Tensor, s: f64) -> Vec<f64> {
    let c = sinusoid_curve_point(s);
    (0..3).map(|i| (0..5).map(|j| e.get2(i, j) * c[j]).sum()).collect()
}

/// The sinusoid experiment data: curve points in R^5, embedded into R^3 by a
/// seeded Gaussian matrix, observed under additive noise (identity forward
/// operator on the R^3 data space).
pub fn make_sinusoid_dataset(
    n_corrupt: usize,
    n_clean: usize,
    sigma: f64,
    seed: u64,
) -> Result<(Dataset, CorruptionModel)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = sinusoid_embedding(&mut rng);
    let corruption = CorruptionModel::new(LinearOperator::Identity { dim: 3 }, sigma)?;

    let mut truth = Vec::with_capacity(n_corrupt * 3);
    let mut corrupted = Vec::with_capacity(n_corrupt * 3);
    for _ in 0..n_corrupt {
        let s = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let x = embed_curve_point(&embedding, s);
        truth.extend_from_slice(&x);
        let y = corruption.apply(&x, &mut rng)?;
        corrupted.extend(y);
    }
    let mut clean = Vec::with_capacity(n_clean * 3);
    for _ in 0..n_clean {
        let s = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        clean.extend(embed_curve_point(&embedding, s));
    }

    Ok((
        Dataset {
            corrupted: Tensor::from_shape(n_corrupt, 3, corrupted)?,
            clean_reference: Tensor::from_shape(n_clean, 3, clean)?,
            ground_truth: Some(Tensor::from_shape(n_corrupt, 3, truth)?),
        },
        corruption,
    ))
}

/// Densely sampled noiseless curve for distance-to-manifold evaluation,
/// using the same embedding the seeded dataset was built with.
pub fn sinusoid_dense_curve(seed: u64, count: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = sinusoid_embedding(&mut rng);
    let mut data = Vec::with_capacity(count * 3);
    for i in 0..count {
        let s = -std::f64::consts::PI
            + 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / count as f64;
        data.extend(embed_curve_point(&embedding, s));
    }
    Tensor::from_shape(count, 3, data).expect("curve shape")
}

// ── MNIST (IDX format) ───────────────────────────────────────────────

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(buf: &[u8], offset: usize, source: &str) -> Result<u32> {
    if offset + 4 > buf.len() {
        return Err(Error::Data {
            source_name: source.to_string(),
            offset,
            msg: "truncated while reading big-endian u32".to_string(),
        });
    }
    Ok(u32::from_be_bytes([buf[offset], buf[offset + 1], buf[offset + 2], buf[offset + 3]]))
}

/// Parse IDX images and labels, scale pixels to `[0, 1]`, and average-pool
/// 28x28 down to 14x14 (`d = 196`).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<(Tensor, Vec<u8>)> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let img_name = images_path.display().to_string();

    let magic = read_be_u32(&img_bytes, 0, &img_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data {
            source_name: img_name,
            offset: 0,
            msg: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(&img_bytes, 4, &img_name)? as usize;
    let rows = read_be_u32(&img_bytes, 8, &img_name)? as usize;
    let cols = read_be_u32(&img_bytes, 12, &img_name)? as usize;
    if rows != 28 || cols != 28 {
        return Err(Error::Data {
            source_name: img_name,
            offset: 8,
            msg: format!("expected 28x28 images, got {rows}x{cols}"),
        });
    }
    let payload = 16 + count * rows * cols;
    if img_bytes.len() < payload {
        return Err(Error::Data {
            source_name: img_name,
            offset: img_bytes.len(),
            msg: format!("truncated payload: need {payload} bytes"),
        });
    }

    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;
    let lbl_name = labels_path.display().to_string();
    let lmagic = read_be_u32(&lbl_bytes, 0, &lbl_name)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Data {
            source_name: lbl_name,
            offset: 0,
            msg: format!("bad label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let lcount = read_be_u32(&lbl_bytes, 4, &lbl_name)? as usize;
    if lcount != count {
        return Err(Error::Data {
            source_name: lbl_name,
            offset: 4,
            msg: format!("label count {lcount} != image count {count}"),
        });
    }
    if lbl_bytes.len() < 8 + lcount {
        return Err(Error::Data {
            source_name: lbl_name,
            offset: lbl_bytes.len(),
            msg: format!("truncated payload: need {} bytes", 8 + lcount),
        });
    }
    let labels = lbl_bytes[8..8 + lcount].to_vec();

    // Scale to [0,1] and 2x2 average-pool to 14x14.
    let mut data = Vec::with_capacity(count * 196);
    for n in 0..count {
        let base = 16 + n * 784;
        for r in 0..14 {
            for c in 0..14 {
                let mut s = 0.0;
                for dr in 0..2 {
                    for dc in 0..2 {
                        s += img_bytes[base + (2 * r + dr) * 28 + 2 * c + dc] as f64 / 255.0;
                    }
                }
                data.push(s / 4.0);
            }
        }
    }
    Ok((Tensor::from_shape(count, 196, data)?, labels))
}

/// Seeded Fisher-Yates permutation of `0..n`; `make_mnist_dataset` uses the
/// head for clean references and training, leaving the tail as holdout.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Assemble the blurred-and-noisy MNIST dataset: take a seeded subset,
/// dequantize with U[0, 1/256) noise, hold out clean references, and corrupt
/// the rest through the supplied model.
pub fn make_mnist_dataset(
    images: &Tensor,
    take: usize,
    clean_count: usize,
    corruption: &CorruptionModel,
    seed: u64,
) -> Result<Dataset> {
    if take + clean_count > images.rows() {
        return Err(Error::invalid(
            "make_mnist_dataset",
            format!("take {take} + clean {clean_count} exceeds {} images", images.rows()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = shuffled_indices(images.rows(), &mut rng);

    let d = images.cols();
    let dequant = |row: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        row.iter().map(|v| v + rng.gen_range(0.0..1.0) / 256.0).collect()
    };

    let mut clean = Vec::with_capacity(clean_count * d);
    for &idx in order.iter().take(clean_count) {
        clean.extend(dequant(images.row(idx), &mut rng));
    }
    let mut truth = Vec::with_capacity(take * d);
    let mut corrupted = Vec::with_capacity(take * corruption.operator().output_dim());
    for &idx in order.iter().skip(clean_count).take(take) {
        let x = dequant(images.row(idx), &mut rng);
        let y = corruption.apply(&x, &mut rng)?;
        truth.extend(x);
        corrupted.extend(y);
    }
    Ok(Dataset {
        corrupted: Tensor::from_shape(take, corruption.operator().output_dim(), corrupted)?,
        clean_reference: Tensor::from_shape(clean_count, d, clean)?,
        ground_truth: Some(Tensor::from_shape(take, d, truth)?),
    })
}

// ── Flat-binary array exchange ───────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayManifest {
    pub version: String,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

pub const MANIFEST_VERSION: &str = "1";

/// Write named tensors as little-endian f64 blocks plus a JSON manifest.
pub fn write_arrays(manifest_path: &Path, arrays: &[(&str, &Tensor)]) -> Result<()> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(arrays.len());
    for (name, tensor) in arrays {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(tensor.numel() * 8);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&file), bytes)?;
        entries.push(ArrayEntry {
            name: (*name).to_string(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    let manifest = ArrayManifest { version: MANIFEST_VERSION.to_string(), arrays: entries };
    std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Read back a manifest written by [`write_arrays`].
pub fn read_arrays(manifest_path: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest: ArrayManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Schema {
            expected: MANIFEST_VERSION.to_string(),
            found: manifest.version,
            msg: "array manifest version".to_string(),
        });
    }
    let dir: PathBuf = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let mut out = Vec::with_capacity(manifest.arrays.len());
    for entry in &manifest.arrays {
        let bytes = std::fs::read(dir.join(&entry.file))?;
        let numel: usize = entry.shape.iter().product();
        if bytes.len() != numel * 8 {
            return Err(Error::Data {
                source_name: entry.file.clone(),
                offset: bytes.len(),
                msg: format!("expected {} bytes for shape {:?}", numel * 8, entry.shape),
            });
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
    }
    Ok(out)
}
