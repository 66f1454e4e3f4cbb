"""Independent numpy reference for the log-mel frontend.

Writes a deterministic 10 s test clip (16-bit PCM, 32 kHz) and its log-mel
spectrogram to crates/core/tests/data/. The Rust frontend must reproduce the
spectrogram to 1e-5.

Conventions: periodic Hann window of 800 samples zero-padded to a 1024-point
FFT, hop 320, no centering, magnitude spectrum, Slaney mel scale with area
normalization, 128 bands over 0..16000 Hz, natural log with floor 1e-5.

Output format of golden_mel.bin: u32 n_mels, u32 frames, then n_mels*frames
float32 values (mel-major), all little-endian.
"""

import struct
import wave
from pathlib import Path

import numpy as np

SR = 32000
N_FFT = 1024
WIN = 800
HOP = 320
N_MELS = 128
FMIN, FMAX = 0.0, SR / 2
FLOOR = 1e-5

OUT = Path(__file__).resolve().parent.parent / "crates" / "core" / "tests" / "data"


def clip():
    t = np.arange(10 * SR) / SR
    chirp = 0.3 * np.sin(2 * np.pi * (100 * t + 0.5 * (15000 - 100) / 10 * t**2))
    tones = 0.1 * np.sin(2 * np.pi * 440 * t) + 0.05 * np.sin(2 * np.pi * 3000 * t) * (t > 5)
    # 31-bit LCG noise so the clip is reproducible without numpy's RNG
    state = 12345
    noise = np.empty(t.size)
    for i in range(t.size):
        state = (1103515245 * state + 12345) & 0x7FFFFFFF
        noise[i] = state / 0x7FFFFFFF - 0.5
    x = chirp + tones + 0.05 * noise
    return np.clip(np.round(x * 32768), -32768, 32767).astype(np.int16)


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / (200.0 / 3)
    log = 15.0 + np.log(np.maximum(f, 1e-12) / 1000.0) / (np.log(6.4) / 27.0)
    return np.where(f >= 1000.0, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = m * (200.0 / 3)
    log = 1000.0 * np.exp((np.log(6.4) / 27.0) * (m - 15.0))
    return np.where(m >= 15.0, log, lin)


def filterbank():
    freqs = np.fft.rfftfreq(N_FFT, 1.0 / SR)
    edges = mel_to_hz(np.linspace(hz_to_mel(FMIN), hz_to_mel(FMAX), N_MELS + 2))
    fdiff = np.diff(edges)
    ramps = edges[:, None] - freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    w = np.maximum(0, np.minimum(lower, upper))
    return w * (2.0 / (edges[2:] - edges[:-2]))[:, None]


def logmel(pcm):
    x = pcm.astype(np.float64) / 32768.0
    n_frames = 1 + (x.size - WIN) // HOP
    idx = np.arange(WIN)[None, :] + HOP * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WIN) / WIN)
    spec = np.abs(np.fft.rfft(x[idx] * window, n=N_FFT, axis=1))
    return np.log(filterbank() @ spec.T + FLOOR)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    pcm = clip()
    with wave.open(str(OUT / "golden_clip.wav"), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(SR)
        f.writeframes(pcm.astype("<i2").tobytes())
    mel = logmel(pcm)
    with open(OUT / "golden_mel.bin", "wb") as f:
        f.write(struct.pack("<II", *mel.shape))
        f.write(mel.astype("<f4").tobytes())
    print(f"wrote {mel.shape[0]}x{mel.shape[1]} spectrogram")


if __name__ == "__main__":
    main()
