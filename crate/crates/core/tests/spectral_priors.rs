use dgfd_core::image::ImageBuffer;
use dgfd_core::metrics::{ssim, SsimSpec};
use dgfd_core::priors::{dark_channel_map, synthesize_haze, synthetic_scene, DarkChannelSpec, HazeParams};
use dgfd_core::spectral::{modify_local_amplitude_planes, swap_components, Component, SpectrumRegion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hazy_pair(size: usize, seed: u64) -> (ImageBuffer, ImageBuffer) {
    let scene = synthetic_scene(size, size, seed).unwrap();
    let params = HazeParams {
        airlight: [0.9, 0.9, 0.92],
        beta: 1.2,
        depth: scene.depth,
    };
    (synthesize_haze(&scene.clean, &params).unwrap(), scene.clean)
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

#[test]
fn phase_donor_sets_the_structure() {
    let spec = SsimSpec::default();
    for seed in 0..10 {
        // amplitude from a hazy view of one scene, phase from a clean, unrelated scene
        let (amplitude_donor, _) = hazy_pair(64, seed + 50);
        let (_, phase_donor) = hazy_pair(64, seed);
        let (swapped, _) = swap_components(&amplitude_donor, &phase_donor, Component::Phase).unwrap();
        let to_phase = ssim(&swapped, &phase_donor, &spec).unwrap();
        let to_amplitude = ssim(&swapped, &amplitude_donor, &spec).unwrap();
        assert!(to_phase > to_amplitude, "seed {seed}: {to_phase} <= {to_amplitude}");
    }
}

#[test]
fn haze_lives_in_amplitude_and_real_part() {
    let spec = SsimSpec::default();
    for which in [Component::Phase, Component::Imaginary] {
        for seed in 0..10 {
            let (hazy, clean) = hazy_pair(64, seed);
            // the clean image with the hazy image's phase or imaginary part still reads as clean
            let (_, restored) = swap_components(&hazy, &clean, which).unwrap();
            let to_clean = ssim(&restored, &clean, &spec).unwrap();
            let to_hazy = ssim(&restored, &hazy, &spec).unwrap();
            assert!(to_clean > to_hazy, "{which} seed {seed}: {to_clean} <= {to_hazy}");
        }
    }
}

#[test]
fn local_amplitude_edit_acts_globally() {
    let (hazy, _) = hazy_pair(64, 7);
    let region = SpectrumRegion { row: 12, col: 12, rows: 8, cols: 8 };
    let base = modify_local_amplitude_planes(&hazy, region, 1.0).unwrap();
    let edited = modify_local_amplitude_planes(&hazy, region, 0.0).unwrap();
    let n = 64 * 64;
    let changed = (0..n)
        .filter(|&i| (0..3).any(|c| (base[c * n + i] - edited[c * n + i]).abs() > 1e-4))
        .count();
    assert!(changed * 2 > n, "{changed} of {n}");
}

#[test]
fn haze_raises_the_dark_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let spec = DarkChannelSpec::default();
    for seed in 0..20 {
        let scene = synthetic_scene(48, 48, seed).unwrap();
        let clean_dark = mean(&dark_channel_map(&scene.clean, spec).unwrap());
        let a: f32 = rng.gen_range(0.7..1.0);
        let params = HazeParams {
            airlight: [a, rng.gen_range(a..1.0), rng.gen_range(a..1.0)],
            beta: rng.gen_range(0.2..2.0),
            depth: scene.depth.clone(),
        };
        let min_a = params.airlight.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        assert!(min_a > clean_dark);
        let hazy = synthesize_haze(&scene.clean, &params).unwrap();
        let hazy_dark = mean(&dark_channel_map(&hazy, spec).unwrap());
        assert!(hazy_dark > clean_dark, "scene {seed}: {hazy_dark} <= {clean_dark}");
    }
}

#[test]
fn zero_density_leaves_the_scene_unchanged() {
    let scene = synthetic_scene(32, 32, 3).unwrap();
    let params = HazeParams {
        airlight: [1.0; 3],
        beta: 0.0,
        depth: scene.depth.clone(),
    };
    assert_eq!(synthesize_haze(&scene.clean, &params).unwrap().data(), scene.clean.data());
}
