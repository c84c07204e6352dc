//! On-disk container for trained models and training checkpoints.
//!
//! Layout: the 4-byte magic `OPGN`, a little-endian u32 format version, a
//! little-endian u64 manifest length, a JSON manifest, then raw
//! little-endian f64 blobs in canonical parameter order — for each layer,
//! the kernel stacks for q = 1..Q followed by the bias. A checkpoint
//! appends the optimizer moment blobs (first moments then second, generator
//! then discriminator) in the same order. Every byte is accounted for:
//! short files and trailing bytes both fail decoding with an offset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::layer::{LayerSpec, OperationalLayer};
use crate::model::{DiscriminatorModel, GeneratorArch, GeneratorModel};
use crate::tensor::Tensor3;
use crate::util::atomic_write;

pub const MAGIC: [u8; 4] = *b"OPGN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Manifest {
    Generator {
        arch: GeneratorArch,
        param_elements: usize,
    },
    Checkpoint {
        config: TrainConfig,
        iteration: usize,
        generator_steps: u64,
        discriminator_steps: u64,
    },
}

/// Complete resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Iterations already completed.
    pub iteration: usize,
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub generator_adam: AdamState,
    pub discriminator_adam: AdamState,
}

// ── Writing ─────────────────────────────────────────────────────────────────

fn encode_header(manifest: &Manifest) -> Result<Vec<u8>> {
    let manifest_json = serde_json::to_vec(manifest)
        .map_err(|e| Error::Config(format!("could not serialize manifest: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + manifest_json.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&manifest_json);
    Ok(bytes)
}

fn push_values(bytes: &mut Vec<u8>, values: &[f64]) {
    bytes.reserve(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_layers(bytes: &mut Vec<u8>, layers: &[OperationalLayer]) {
    for layer in layers {
        for p in layer.params() {
            push_values(bytes, p.data());
        }
    }
}

fn push_moments(bytes: &mut Vec<u8>, state: &AdamState) {
    for buf in state.first_moments() {
        push_values(bytes, buf);
    }
    for buf in state.second_moments() {
        push_values(bytes, buf);
    }
}

/// Serialize a generator (without training state) to `path`.
pub fn save_generator(model: &GeneratorModel, path: &Path) -> Result<()> {
    let manifest = Manifest::Generator {
        arch: model.arch(),
        param_elements: model.param_count(),
    };
    let mut bytes = encode_header(&manifest)?;
    push_layers(&mut bytes, model.layers());
    atomic_write(path, &bytes)
}

/// Serialize the full training state to `path`.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let manifest = Manifest::Checkpoint {
        config: checkpoint.config.clone(),
        iteration: checkpoint.iteration,
        generator_steps: checkpoint.generator_adam.step_count(),
        discriminator_steps: checkpoint.discriminator_adam.step_count(),
    };
    let mut bytes = encode_header(&manifest)?;
    push_layers(&mut bytes, checkpoint.generator.layers());
    push_layers(&mut bytes, checkpoint.discriminator.layers());
    push_moments(&mut bytes, &checkpoint.generator_adam);
    push_moments(&mut bytes, &checkpoint.discriminator_adam);
    atomic_write(path, &bytes)
}

// ── Reading ─────────────────────────────────────────────────────────────────

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.offset;
        if n > available {
            return Err(Error::Decode {
                offset: self.offset as u64,
                message: format!("file ends inside {what}: {available} of {n} bytes present"),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64_le(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<()> {
        let extra = self.bytes.len() - self.offset;
        if extra > 0 {
            return Err(Error::Decode {
                offset: self.offset as u64,
                message: format!("{extra} unexpected trailing bytes"),
            });
        }
        Ok(())
    }
}

fn read_manifest<'a>(reader: &mut Reader<'a>) -> Result<Manifest> {
    let magic = reader.take(4, "the magic number")?;
    if magic != MAGIC {
        return Err(Error::Decode {
            offset: 0,
            message: format!("bad magic {magic:?}; not a model container"),
        });
    }
    let version = reader.u32_le("the format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Decode {
            offset: 4,
            message: format!("unsupported format version {version} (expected {FORMAT_VERSION})"),
        });
    }
    let manifest_len = reader.u64_le("the manifest length")? as usize;
    let manifest_start = reader.offset;
    let manifest_bytes = reader.take(manifest_len, "the manifest")?;
    serde_json::from_slice(manifest_bytes).map_err(|e| Error::Decode {
        offset: manifest_start as u64,
        message: format!("malformed manifest: {e}"),
    })
}

fn read_layers(reader: &mut Reader<'_>, specs: &[LayerSpec]) -> Result<Vec<OperationalLayer>> {
    specs
        .iter()
        .enumerate()
        .map(|(i, &spec)| {
            let kernel_shape = (spec.out_channels, spec.in_channels, spec.kernel_len);
            let kernel_elems = kernel_shape.0 * kernel_shape.1 * kernel_shape.2;
            let mut kernels = Vec::with_capacity(spec.q_order);
            for q in 1..=spec.q_order {
                let what = format!("layer {i} kernel stack q={q}");
                kernels.push(Tensor3::from_vec(reader.f64s(kernel_elems, &what)?, kernel_shape)?);
            }
            let what = format!("layer {i} bias");
            let bias =
                Tensor3::from_vec(reader.f64s(spec.out_channels, &what)?, (1, spec.out_channels, 1))?;
            OperationalLayer::from_parts(spec, kernels, bias)
        })
        .collect()
}

/// Element count of each parameter tensor in canonical order.
fn param_lengths(specs: &[LayerSpec]) -> Vec<usize> {
    let mut lens = Vec::new();
    for s in specs {
        for _ in 0..s.q_order {
            lens.push(s.out_channels * s.in_channels * s.kernel_len);
        }
        lens.push(s.out_channels);
    }
    lens
}

fn read_moment_set(reader: &mut Reader<'_>, lens: &[usize], what: &str) -> Result<Vec<Vec<f64>>> {
    lens.iter()
        .enumerate()
        .map(|(i, &n)| reader.f64s(n, &format!("{what} for parameter {i}")))
        .collect()
}

/// Load a generator saved by [`save_generator`].
pub fn load_generator(path: &Path) -> Result<GeneratorModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Reader { bytes: &bytes, offset: 0 };
    let manifest = read_manifest(&mut reader)?;
    let Manifest::Generator { arch, param_elements } = manifest else {
        return Err(Error::Decode {
            offset: 0,
            message: "expected a generator container, found a checkpoint".into(),
        });
    };
    let specs = arch.layer_specs()?;
    let expected: usize = param_lengths(&specs).iter().sum();
    if param_elements != expected {
        return Err(Error::Decode {
            offset: reader.offset as u64,
            message: format!(
                "manifest declares {param_elements} parameter elements but the architecture has {expected}"
            ),
        });
    }
    let layers = read_layers(&mut reader, &specs)?;
    reader.finish()?;
    GeneratorModel::from_layers(arch, layers)
}

/// Load a checkpoint saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = Reader { bytes: &bytes, offset: 0 };
    let manifest = read_manifest(&mut reader)?;
    let Manifest::Checkpoint { config, iteration, generator_steps, discriminator_steps } = manifest
    else {
        return Err(Error::Decode {
            offset: 0,
            message: "expected a checkpoint container, found a bare generator".into(),
        });
    };
    config.validate()?;
    let gen_specs = config.generator.layer_specs()?;
    let disc_specs = config.discriminator.layer_specs()?;
    let generator = GeneratorModel::from_layers(config.generator, read_layers(&mut reader, &gen_specs)?)?;
    let discriminator =
        DiscriminatorModel::from_layers(config.discriminator, read_layers(&mut reader, &disc_specs)?)?;
    let gen_lens = param_lengths(&gen_specs);
    let disc_lens = param_lengths(&disc_specs);
    let gen_m = read_moment_set(&mut reader, &gen_lens, "generator first moments")?;
    let gen_v = read_moment_set(&mut reader, &gen_lens, "generator second moments")?;
    let disc_m = read_moment_set(&mut reader, &disc_lens, "discriminator first moments")?;
    let disc_v = read_moment_set(&mut reader, &disc_lens, "discriminator second moments")?;
    reader.finish()?;
    Ok(Checkpoint {
        config,
        iteration,
        generator,
        discriminator,
        generator_adam: AdamState::from_parts(gen_m, gen_v, generator_steps)?,
        discriminator_adam: AdamState::from_parts(disc_m, disc_v, discriminator_steps)?,
    })
}
