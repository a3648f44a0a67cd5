"""Seeded synthetic corpus for desk-scale end-to-end runs.

"Real" clips are harmonic tones with vibrato, "fake" clips are noise
shaped by a few random resonances. Both are written as 16-bit WAV files
with a manifest next to them.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .audio_io import AudioClip, CorpusManifest, ManifestEntry, save_manifest, write_wav

__all__ = ["SynthCorpusSpec", "harmonic_tone", "shaped_noise", "generate_corpus"]


@dataclass(frozen=True)
class SynthCorpusSpec:
    n_real: int = 100
    n_fake: int = 100
    duration_s: float = 1.0
    sample_rate: int = 16000
    seed: int = 0
    real_collection: str = "tones"
    fake_collection: str = "shaped_noise"


def harmonic_tone(rng: np.random.Generator, duration_s: float, rate: int) -> np.ndarray:
    n = int(round(duration_s * rate))
    t = np.arange(n) / rate
    f0 = rng.uniform(100.0, 250.0)
    vib_rate, vib_depth = rng.uniform(4.0, 6.0), rng.uniform(0.005, 0.02)
    inst_f0 = f0 * (1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t))
    phase = 2 * np.pi * np.cumsum(inst_f0) / rate
    n_harm = int(min(12, (rate / 2 - 1) // (f0 * 1.05)))
    x = sum(np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k for k in range(1, n_harm + 1))
    x = x + 0.01 * rng.standard_normal(n)
    env = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.02)
    return 0.5 * env * x / np.max(np.abs(x))


def shaped_noise(rng: np.random.Generator, duration_s: float, rate: int) -> np.ndarray:
    n = int(round(duration_s * rate))
    x = rng.standard_normal(n)
    y = np.zeros(n)
    for _ in range(3):
        fc = rng.uniform(300.0, 3500.0)
        b, a = sps.iirpeak(fc, Q=rng.uniform(2.0, 8.0), fs=rate)
        y += sps.lfilter(b, a, x)
    t = np.arange(n) / rate
    env = np.minimum(1.0, np.minimum(t, t[-1] - t) / 0.02)
    return 0.5 * env * y / np.max(np.abs(y))


def generate_corpus(out_dir, spec: SynthCorpusSpec | None = None) -> CorpusManifest:
    """Write the WAV files and ``manifest.json`` under ``out_dir``."""
    spec = spec or SynthCorpusSpec()
    out_dir = Path(out_dir)
    entries = []
    for label, collection, count, make in (
            ("real", spec.real_collection, spec.n_real, harmonic_tone),
            ("fake", spec.fake_collection, spec.n_fake, shaped_noise)):
        for i in range(count):
            rng = np.random.default_rng([spec.seed, 0 if label == "real" else 1, i])
            rel = Path(collection) / f"{collection}_{i:04d}.wav"
            clip = AudioClip(make(rng, spec.duration_s, spec.sample_rate), spec.sample_rate, rel.stem)
            write_wav(out_dir / rel, clip)
            entries.append(ManifestEntry(rel, label, collection))
    manifest = CorpusManifest(Path("."), entries)
    save_manifest(out_dir / "manifest.json", manifest)
    return CorpusManifest(out_dir, entries)
