"""Audio input/output, resampling, silence trimming and corpus manifests.

All audio is handled as mono float64 in [-1, 1]. Only little-endian 16-bit
PCM WAV files are read or written.
"""

from __future__ import annotations

import json
import struct
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import signal as sps

from .exceptions import (
    AudioFormatError,
    EmptyAudioError,
    ManifestError,
    SignalRangeError,
    UnsupportedAudioError,
)

__all__ = [
    "AudioClip",
    "ManifestEntry",
    "CorpusManifest",
    "load_wav",
    "write_wav",
    "resample",
    "trim_silence",
    "synth_signal",
    "load_manifest",
    "save_manifest",
    "preprocess",
]

PCM_SCALE = 32768.0
LABELS = ("real", "fake")


@dataclass(frozen=True)
class AudioClip:
    """Mono PCM samples in [-1, 1] together with their sample rate."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"samples must be 1-D, got shape {samples.shape}")
        if samples.size < 1:
            raise EmptyAudioError("audio clip must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.clip(samples, -1.0, 1.0))
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

def _iter_chunks(data: bytes) -> Iterator[tuple[bytes, bytes]]:
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            # truncated final chunk; a short data chunk is still usable
            if cid != b"data":
                raise AudioFormatError(f"chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def load_wav(path, source_id: str | None = None) -> AudioClip:
    """Read a 16-bit PCM WAV file and return it as a mono clip.

    Multi-channel audio is averaged to mono, integer samples are scaled by
    1/32768.

    Raises
    ------
    AudioFormatError
        The file is not a well-formed RIFF/WAVE container.
    UnsupportedAudioError
        The container holds anything other than 16-bit integer PCM.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise AudioFormatError(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            pcm = body
            break
    if fmt is None or pcm is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")

    format_code, channels, rate, _, block_align, bits = fmt
    if format_code != 1:
        raise UnsupportedAudioError(f"{path}: format code {format_code} is not PCM")
    if bits != 16:
        raise UnsupportedAudioError(f"{path}: {bits}-bit PCM is not supported")
    if channels < 1 or rate < 1 or block_align != 2 * channels:
        raise AudioFormatError(f"{path}: inconsistent fmt chunk")

    n_frames = len(pcm) // block_align
    if n_frames < 1:
        raise EmptyAudioError(f"{path}: no sample frames")
    ints = np.frombuffer(pcm[:n_frames * block_align], dtype="<i2")
    ints = ints.reshape(n_frames, channels).astype(np.float64)
    samples = ints.mean(axis=1) / PCM_SCALE
    return AudioClip(samples, rate, source_id if source_id is not None else path.stem)


def write_wav(path, clip: AudioClip) -> None:
    """Write ``clip`` as mono 16-bit PCM (round to nearest, saturating)."""
    ints = np.clip(np.round(clip.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(ints.tobytes())


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

def _lowpass_taps(up: int, down: int, taps_per_phase: int, beta: float) -> np.ndarray:
    # cutoff at min(Nyquist_in, Nyquist_out), relative to the upsampled rate
    factor = max(up, down)
    numtaps = taps_per_phase * factor + 1
    # resample_poly applies the gain of ``up`` itself
    return sps.firwin(numtaps, 1.0 / factor, window=("kaiser", beta))


def resample(clip: AudioClip, target_rate: int, taps_per_phase: int = 64,
             beta: float = 8.6) -> AudioClip:
    """Band-limited resampling with a Kaiser-windowed sinc polyphase filter.

    ``taps_per_phase`` is the filter length in units of the slower of the
    two rates, so the sinc spans ``taps_per_phase`` zero crossings.
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise SignalRangeError(f"target_rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == clip.sample_rate:
        return clip
    g = gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    taps = _lowpass_taps(up, down, taps_per_phase, beta)
    out = sps.resample_poly(clip.samples, up, down, window=taps)
    n_out = int(round(clip.samples.size * Fraction(up, down)))
    out = out[:max(n_out, 1)]
    return AudioClip(np.clip(out, -1.0, 1.0), target_rate, clip.source_id)


# --------------------------------------------------------------------------
# Silence trimming
# --------------------------------------------------------------------------

def _frame_levels_db(samples: np.ndarray, frame: int) -> np.ndarray:
    n_frames = -(-samples.size // frame)
    padded = np.zeros(n_frames * frame)
    padded[:samples.size] = samples
    counts = np.full(n_frames, frame, dtype=np.float64)
    counts[-1] = samples.size - (n_frames - 1) * frame
    power = (padded.reshape(n_frames, frame) ** 2).sum(axis=1) / counts
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(power)


def trim_silence(clip: AudioClip, max_silence_s: float = 2.0,
                 threshold_dbfs: float = -40.0, frame_s: float = 0.01) -> AudioClip:
    """Shorten every silent stretch longer than ``max_silence_s``.

    Silence is gated per ``frame_s`` frame on its RMS level in dBFS. A run of
    sub-threshold frames longer than the limit keeps its first
    ``round(max_silence_s / frame_s)`` frames; everything else is kept in
    order. The operation is idempotent.
    """
    if max_silence_s < 0:
        raise SignalRangeError("max_silence_s must be >= 0")
    frame = max(1, int(round(frame_s * clip.sample_rate)))
    silent = _frame_levels_db(clip.samples, frame) < threshold_dbfs
    if silent.all():
        raise EmptyAudioError(f"clip {clip.source_id!r} is silent throughout")
    keep_frames = int(round(max_silence_s * clip.sample_rate / frame))

    keep = np.ones(silent.size, dtype=bool)
    start = None
    for i, s in enumerate(np.append(silent, False)):
        if s and start is None:
            start = i
        elif not s and start is not None:
            if i - start > keep_frames:
                keep[start + keep_frames:i] = False
            start = None
    if keep.all():
        return clip
    mask = np.repeat(keep, frame)[:clip.samples.size]
    return AudioClip(clip.samples[mask], clip.sample_rate, clip.source_id)


# --------------------------------------------------------------------------
# Synthetic signals
# --------------------------------------------------------------------------

def synth_signal(kind: str, duration_s: float, sample_rate: int = 16000, *,
                 freq: float = 440.0, f0: float = 100.0, f1: float = 4000.0,
                 seed: int = 0, amplitude: float = 0.5, source_id: str = "") -> AudioClip:
    """Deterministic test signal.

    ``kind`` is one of ``"sine"`` (uses ``freq``), ``"white_noise"`` (uses
    ``seed``), ``"chirp"`` (linear sweep ``f0`` to ``f1``) or ``"silence"``.
    """
    if duration_s <= 0:
        raise SignalRangeError("duration must be positive")
    nyquist = sample_rate / 2.0
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    if kind == "sine":
        if not 0 <= freq < nyquist:
            raise SignalRangeError(f"sine frequency {freq} Hz outside [0, {nyquist})")
        x = amplitude * np.sin(2 * np.pi * freq * t)
    elif kind == "white_noise":
        rng = np.random.default_rng(seed)
        x = np.clip(amplitude * rng.standard_normal(n) / 3.0, -1.0, 1.0)
    elif kind == "chirp":
        if not (0 <= f0 < nyquist and 0 <= f1 < nyquist):
            raise SignalRangeError(f"chirp band ({f0}, {f1}) exceeds Nyquist {nyquist}")
        x = amplitude * sps.chirp(t, f0=f0, t1=duration_s, f1=f1, method="linear", phi=-90)
    elif kind == "silence":
        x = np.zeros(n)
    else:
        raise ValueError(f"unknown signal kind {kind!r}")
    return AudioClip(x, sample_rate, source_id or kind)


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    collection: str

    @property
    def source_id(self) -> str:
        return f"{self.collection}/{Path(self.path).stem}"


@dataclass
class CorpusManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def collections(self, label: str | None = None) -> list[str]:
        """Collection tags in first-appearance order."""
        seen: dict[str, None] = {}
        for e in self.entries:
            if label is None or e.label == label:
                seen.setdefault(e.collection, None)
        return list(seen)

    def subset(self, collection: str | None = None, label: str | None = None) -> list[ManifestEntry]:
        return [e for e in self.entries
                if (collection is None or e.collection == collection)
                and (label is None or e.label == label)]

    def resolve(self, entry: ManifestEntry) -> Path:
        return Path(self.root) / entry.path

    def to_json(self) -> dict:
        return {
            "root": str(self.root),
            "entries": [{"path": Path(e.path).as_posix(), "label": e.label,
                         "collection": e.collection} for e in self.entries],
        }


def load_manifest(path, check_files: bool = True) -> CorpusManifest:
    """Parse a JSON manifest; relative roots resolve against the manifest's folder."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ManifestError(f"{path}: manifest must be an object with 'entries'")
    root = Path(doc.get("root", "."))
    if not root.is_absolute():
        root = path.parent / root

    entries = []
    for i, raw in enumerate(doc["entries"]):
        try:
            entry = ManifestEntry(Path(raw["path"]), raw["label"], raw["collection"])
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: entry {i} malformed") from exc
        if entry.label not in LABELS:
            raise ManifestError(f"{path}: entry {i} has label {entry.label!r}")
        if not entry.collection:
            raise ManifestError(f"{path}: entry {i} has an empty collection tag")
        if check_files and not (root / entry.path).is_file():
            raise ManifestError(f"{path}: entry {i} file {root / entry.path} does not exist")
        entries.append(entry)
    return CorpusManifest(root, entries)


def save_manifest(path, manifest: CorpusManifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")


def preprocess(clip: AudioClip, sample_rate: int = 16000, max_silence_s: float | None = 2.0,
               threshold_dbfs: float = -40.0) -> AudioClip:
    """Resample to ``sample_rate`` and shorten long silences (``None`` disables trimming)."""
    clip = resample(clip, sample_rate)
    if max_silence_s is not None:
        clip = trim_silence(clip, max_silence_s, threshold_dbfs)
    return clip
