use microdiff::autoencoder::{recon_metrics, train_autoencoder, AeTrainConfig, Autoencoder, AutoencoderConfig};
use microdiff::data::image_io::resize;
use microdiff::data::synthetic::{synthetic_example, SyntheticConfig};
use microdiff_nn::Tensor;

fn low_texture_set(count: usize, seed: u64) -> Vec<Tensor> {
    let cfg = SyntheticConfig {
        count,
        seed,
        small_fraction: 0.0,
        oblong_fraction: 0.0,
        texture_std: 0.02,
        ..Default::default()
    };
    (0..count).map(|i| resize(&synthetic_example(&cfg, i).2, 16, 16)).collect()
}

#[test]
fn trained_toy_autoencoder_reaches_25_db() {
    let images = low_texture_set(500, 0);
    let config = AutoencoderConfig {
        in_channels: 1,
        latent_channels: 4,
        downsample_factor: 4,
        base_channels: 8,
    };
    let t = std::time::Instant::now();
    let out = train_autoencoder(config, &AeTrainConfig::default(), &images).unwrap();
    let ck = out.model.to_checkpoint(Some(&out.ema)).unwrap();
    let ae = Autoencoder::from_checkpoint(&ck, true).unwrap();

    let held = low_texture_set(50, 99);
    let x = Tensor::stack(&held);
    let y = ae.reconstruct(&x.map(|v| 2.0 * v - 1.0)).unwrap().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
    let m = recon_metrics(&x, &y).unwrap();
    eprintln!("psnr {:.2} dB ssim {:.3} in {:?}", m.psnr, m.ssim, t.elapsed());
    assert!(m.psnr >= 25.0, "{m:?}");

    let z = ae.encode(&x.map(|v| 2.0 * v - 1.0)).unwrap();
    assert_eq!(z.shape(), &[50, 4, 4, 4]);
}

#[test]
fn untrained_round_trip_is_deterministic() {
    let ae = Autoencoder::new(AutoencoderConfig::default(), &mut microdiff::rng::rng(0)).unwrap();
    let x = Tensor::uniform(&[2, 3, 16, 16], 1.0, &mut microdiff::rng::rng(1));
    let a = ae.reconstruct(&x).unwrap();
    assert!(a.is_finite());
    assert_eq!(a, ae.reconstruct(&x).unwrap());
}
