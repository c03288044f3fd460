//! Model checkpoints: a flat binary format.
//!
//! Layout (integers little-endian u64, floats little-endian f64):
//!
//! ```text
//! magic "CLBM" | version | data_dim | latent_dim | decoder_variance | beta
//! then 4 networks in order: trunk, head_mu, head_logvar, decoder
//!   layer_count
//!   per layer: in_dim | out_dim | activation (u8: 0 ReLU, 1 Identity)
//!              | in·out weights, row-major input-major | out biases
//! ```
//!
//! Checkpoints carry architecture and objective parameters; training-only
//! settings (batch size, epochs, optimizer) are not part of a model and
//! load as defaults.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::nn::{Activation, AdamConfig, Layer, Mlp};
use crate::vae::{VaeHyperParams, VaeModel};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"CLBM";
pub const MODEL_VERSION: u64 = 1;

pub fn write_model<W: Write>(w: &mut W, model: &VaeModel) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(model.hyper.data_dim as u64).to_le_bytes())?;
    w.write_all(&(model.hyper.latent_dim as u64).to_le_bytes())?;
    w.write_all(&model.hyper.decoder_variance.to_le_bytes())?;
    w.write_all(&model.hyper.beta.to_le_bytes())?;
    for net in [&model.trunk, &model.head_mu, &model.head_logvar, &model.decoder] {
        write_mlp(w, net)?;
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &VaeModel) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp) -> Result<()> {
    w.write_all(&(mlp.layers().len() as u64).to_le_bytes())?;
    for layer in mlp.layers() {
        w.write_all(&(layer.in_dim() as u64).to_le_bytes())?;
        w.write_all(&(layer.out_dim() as u64).to_le_bytes())?;
        let act = match layer.activation {
            Activation::ReLU => 0u8,
            Activation::Identity => 1u8,
        };
        w.write_all(&[act])?;
        for v in layer.weight.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &layer.bias {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<VaeModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format {
        offset: 0,
        message: "file too short for magic".into(),
    })?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad checkpoint magic {magic:?}, expected {MODEL_MAGIC:?}"),
        });
    }
    let version = read_u64(r, 4)?;
    if version != MODEL_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let data_dim = read_u64(r, 12)? as usize;
    let latent_dim = read_u64(r, 20)? as usize;
    let decoder_variance = read_f64(r, 28)?;
    let beta = read_f64(r, 36)?;

    let trunk = read_mlp(r)?;
    let head_mu = read_mlp(r)?;
    let head_logvar = read_mlp(r)?;
    let decoder = read_mlp(r)?;

    let encoder_widths: Vec<usize> = trunk.layers().iter().map(|l| l.out_dim()).collect();
    let decoder_widths: Vec<usize> = decoder
        .layers()
        .iter()
        .take(decoder.layers().len().saturating_sub(1))
        .map(|l| l.out_dim())
        .collect();
    let hyper = VaeHyperParams {
        data_dim,
        latent_dim,
        decoder_variance,
        beta,
        encoder_widths,
        decoder_widths,
        batch_size: 256,
        epochs: 1,
        seed: 0,
        adam: AdamConfig::default(),
        final_eval_samples: 8,
    };
    hyper.validate()?;
    let model = VaeModel {
        trunk,
        head_mu,
        head_logvar,
        decoder,
        hyper,
    };
    if model.trunk.in_dim() != data_dim
        || model.head_mu.out_dim() != latent_dim
        || model.head_logvar.out_dim() != latent_dim
        || model.decoder.in_dim() != latent_dim
        || model.decoder.out_dim() != data_dim
    {
        return Err(Error::Format {
            offset: 0,
            message: "checkpoint network shapes do not match the header dimensions".into(),
        });
    }
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<VaeModel> {
    let file = std::fs::File::open(path)?;
    read_model(&mut BufReader::new(file))
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let count = read_u64(r, 0)? as usize;
    if count == 0 || count > 64 {
        return Err(Error::Format {
            offset: 0,
            message: format!("implausible layer count {count}"),
        });
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let in_dim = read_u64(r, 0)? as usize;
        let out_dim = read_u64(r, 0)? as usize;
        if in_dim == 0 || out_dim == 0 || in_dim.saturating_mul(out_dim) > (1 << 28) {
            return Err(Error::Format {
                offset: 0,
                message: format!("implausible layer dimensions {in_dim}x{out_dim}"),
            });
        }
        let mut act_byte = [0u8; 1];
        r.read_exact(&mut act_byte).map_err(|_| Error::Format {
            offset: 0,
            message: "truncated checkpoint".into(),
        })?;
        let activation = match act_byte[0] {
            0 => Activation::ReLU,
            1 => Activation::Identity,
            other => {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("unknown activation code {other}"),
                })
            }
        };
        let mut weight = vec![0.0f64; in_dim * out_dim];
        for v in weight.iter_mut() {
            *v = read_f64(r, 0)?;
        }
        let mut bias = vec![0.0f64; out_dim];
        for v in bias.iter_mut() {
            *v = read_f64(r, 0)?;
        }
        layers.push(Layer {
            weight: Mat::from_vec(in_dim, out_dim, weight),
            bias,
            activation,
        });
    }
    Mlp::new(layers)
}

fn read_u64<R: Read>(r: &mut R, offset: u64) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| Error::Format {
        offset,
        message: "truncated checkpoint".into(),
    })?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R, offset: u64) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|_| Error::Format {
        offset,
        message: "truncated checkpoint".into(),
    })?;
    Ok(f64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat as M;
    use crate::rng;
    use crate::vae::VaeModel;

    fn tiny_model(seed: u64) -> VaeModel {
        let hyper = VaeHyperParams {
            data_dim: 5,
            latent_dim: 2,
            decoder_variance: 1.3,
            beta: 0.7,
            encoder_widths: vec![6, 4],
            decoder_widths: vec![4, 6],
            batch_size: 8,
            epochs: 1,
            seed,
            adam: AdamConfig::default(),
            final_eval_samples: 1,
        };
        VaeModel::init(hyper).unwrap()
    }

    #[test]
    fn round_trip_preserves_weights_and_outputs() {
        let model = tiny_model(17);
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        assert_eq!(&buf[0..4], MODEL_MAGIC);
        let back = read_model(&mut buf.as_slice()).unwrap();

        assert_eq!(back.hyper.data_dim, 5);
        assert_eq!(back.hyper.latent_dim, 2);
        assert_eq!(back.hyper.decoder_variance.to_bits(), 1.3f64.to_bits());
        assert_eq!(back.hyper.beta.to_bits(), 0.7f64.to_bits());
        assert_eq!(back.hyper.encoder_widths, vec![6, 4]);
        assert_eq!(back.hyper.decoder_widths, vec![4, 6]);

        let mut r = rng::stream(18, &[0]);
        let mut x = M::zeros(3, 5);
        rng::fill_standard_normal(&mut r, x.data_mut());
        let (mu_a, lv_a) = model.encode(&x).unwrap();
        let (mu_b, lv_b) = back.encode(&x).unwrap();
        for (a, b) in mu_a.data().iter().zip(mu_b.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in lv_a.data().iter().zip(lv_b.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_and_truncation_rejected() {
        let model = tiny_model(19);
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();

        let mut corrupted = buf.clone();
        corrupted[0] = b'X';
        assert!(matches!(
            read_model(&mut corrupted.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));

        let truncated = &buf[..buf.len() - 5];
        assert!(matches!(
            read_model(&mut &truncated[..]),
            Err(Error::Format { .. })
        ));
    }
}
