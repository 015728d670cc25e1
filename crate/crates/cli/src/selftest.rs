use anyhow::{bail, Result};
use probcodec::codec::{self, synth::synthetic_image, Container};
use probcodec::model::{Model, ModelConfig};
use probcodec::sampler::SampleSpec;

type Check = fn() -> Result<()>;

fn fresh(levels: usize, seed: u64) -> Result<Model> {
    Ok(Model::new(ModelConfig { levels, ..ModelConfig::default() }, seed)?)
}

fn invertibility() -> Result<()> {
    let model = fresh(3, 1)?;
    let img = synthetic_image(1, 0, 32, 24);
    let x = img.plane(0);
    let back = model.inverse_transform(&model.forward_transform(&x)?)?;
    let err = x.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if err > 1e-9 {
        bail!("round-trip error {err:e}");
    }
    Ok(())
}

fn round_trip() -> Result<()> {
    let model = fresh(2, 2)?;
    let img = synthetic_image(2, 0, 21, 13);
    let (a, coeffs) = codec::encode_with_coefficients(&img, &model)?;
    let b = codec::encode(&img, &model)?;
    if a.to_bytes() != b.to_bytes() {
        bail!("encoding is not deterministic");
    }
    let parsed = Container::from_bytes(&a.to_bytes())?;
    if codec::decode_coefficients(&parsed, &model)? != coeffs {
        bail!("decoded coefficients differ");
    }
    let spec = [SampleSpec::new(0.0, 0, 1)?];
    let out = codec::decode(&parsed, &model, &spec)?;
    if (out[0].width, out[0].height) != (21, 13) {
        bail!("wrong output size");
    }
    let psnr = codec::psnr(codec::mse(&img, &out[0])?);
    if psnr < 40.0 {
        bail!("reconstruction PSNR {psnr:.2} dB");
    }
    Ok(())
}

fn corruption() -> Result<()> {
    let model = fresh(2, 3)?;
    let mut bytes = codec::encode(&synthetic_image(3, 0, 16, 16), &model)?.to_bytes();
    let mid = codec::HEADER_LEN + 1;
    bytes[mid] ^= 0x40;
    if Container::from_bytes(&bytes).is_ok() {
        bail!("corrupted payload accepted");
    }
    Ok(())
}

fn wrong_model() -> Result<()> {
    let a = fresh(2, 4)?;
    let mut b = fresh(2, 4)?;
    b.config_hash = 1;
    let c = codec::encode(&synthetic_image(4, 0, 16, 16), &a)?;
    match codec::decode_coefficients(&c, &b) {
        Err(probcodec::Error::ModelMismatch) => Ok(()),
        other => bail!("expected a model mismatch, got {other:?}"),
    }
}

pub fn run() -> Result<()> {
    let checks: [(&str, Check); 4] = [
        ("transform invertibility", invertibility),
        ("encode/decode round trip", round_trip),
        ("payload checksum", corruption),
        ("model fingerprint", wrong_model),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e:#}");
            }
        }
    }
    if failed > 0 {
        bail!(probcodec::Error::Invalid(format!("{failed} self-test check(s) failed")));
    }
    Ok(())
}
