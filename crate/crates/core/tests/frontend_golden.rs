use std::path::PathBuf;

use dymn::frontend::wav::read_wav;
use dymn::frontend::{mel_spectrogram, MelConfig};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn golden() -> (usize, usize, Vec<f32>) {
    let bytes = std::fs::read(data("golden_mel.bin")).unwrap();
    let n_mels = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let vals = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    (n_mels, frames, vals)
}

#[test]
fn ten_second_clip_matches_golden_spectrogram() {
    let w = read_wav(&data("golden_clip.wav")).unwrap();
    assert_eq!(w.samples.len(), 320_000);
    let s = mel_spectrogram(&w, &MelConfig::default()).unwrap();
    let (n_mels, frames, want) = golden();
    assert_eq!(s.shape(), &[1, 1, n_mels, frames]);
    assert_eq!(frames, 1 + (320_000 - 800) / 320);
    let worst = s
        .data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0f32, f32::max);
    assert!(worst <= 1e-5, "max deviation {worst}");
}
