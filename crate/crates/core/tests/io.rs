use dgfd_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use dgfd_core::image::{load_image, save_image, ImageBuffer};
use dgfd_core::{CheckpointError, DgfdNet, Error, ModelConfig, Tensor};
use image::{ImageBuffer as Raw, Luma, Rgb};

fn tiny() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        blocks_per_stage: [1, 1, 1, 1, 1],
        ..ModelConfig::default()
    }
}

#[test]
fn eight_bit_png_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = 12345u32;
    let img = ImageBuffer::from_fn(37, 29, |_, _| {
        let mut q = || {
            s = s.wrapping_mul(1664525).wrapping_add(1013904223);
            (s >> 24) as f32 / 255.0
        };
        [q(), q(), q()]
    })
    .unwrap();
    let p = dir.path().join("a.png");
    save_image(&img, &p).unwrap();
    let back = load_image(&p).unwrap();
    assert_eq!(back.data(), img.data());
    assert_eq!(back.bit_depth(), 8);
    let q = dir.path().join("b.png");
    save_image(&back, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn black_png_loads_as_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("black.png");
    Raw::<Rgb<u8>, _>::new(20, 16).save(&p).unwrap();
    assert!(load_image(&p).unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn sixteen_bit_gradient_spans_the_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("grad16.png");
    Raw::<Luma<u16>, _>::from_fn(64, 16, |x, _| Luma([(x as u32 * 65535 / 63) as u16])).save(&p).unwrap();
    let img = load_image(&p).unwrap();
    assert_eq!(img.bit_depth(), 16);
    let max = img.data().iter().cloned().fold(f32::MIN, f32::max);
    let min = img.data().iter().cloned().fold(f32::MAX, f32::min);
    assert_eq!((min, max), (0.0, 1.0));
}

#[test]
fn missing_file_is_an_error() {
    assert!(load_image("/nonexistent/x.png").is_err());
}

#[test]
fn checkpoint_forward_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let net = DgfdNet::<f32>::build(&ModelConfig { seed: 11, ..tiny() }).unwrap();
    let p = dir.path().join("n.ckpt");
    save_checkpoint(&net, 17, &p).unwrap();
    let (back, step) = load_checkpoint::<f32>(&p).unwrap();
    assert_eq!(step, 17);
    assert_eq!(back.config(), net.config());
    let x = Tensor::<f32>::full(&[1, 3, 16, 16], 0.25);
    assert_eq!(back.infer(&x).unwrap().dehazed.data(), net.infer(&x).unwrap().dehazed.data());
}

fn code(r: Result<(DgfdNet<f32>, u64), Error>) -> u32 {
    match r {
        Err(Error::Checkpoint(e)) => e.code(),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("corrupt checkpoint loaded"),
    }
}

#[test]
fn corruption_is_reported_by_kind() {
    let net = DgfdNet::<f32>::build(&tiny()).unwrap();
    let bytes = encode(&net, 0).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(code(decode(&bad)), CheckpointError::MagicMismatch(*b"XGFD").code());

    assert_eq!(code(decode(&bytes[..bytes.len() - 4])), 12);

    let mut long = bytes.clone();
    long.extend_from_slice(&[0; 4]);
    assert_eq!(code(decode(&long)), 13);

    // shift the second tensor's offset back onto the first
    let key = b"\"offset\":";
    let second = bytes.windows(key.len()).enumerate().filter(|(_, w)| w == key).nth(1).unwrap().0 + key.len();
    let digits = bytes[second..].iter().take_while(|c| c.is_ascii_digit()).count();
    let replacement = format!("{:<digits$}", 0);
    let mut overlap = bytes.clone();
    overlap[second..second + digits].copy_from_slice(replacement.as_bytes());
    assert_eq!(code(decode(&overlap)), 14);
}
