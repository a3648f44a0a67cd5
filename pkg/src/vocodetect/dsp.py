"""Spectrograms, triangular filterbanks and cepstral features.

The pipeline is::

    clip -> compute_spectrogram -> apply_filterbank -> cepstrum -> delta -> delta

with a Mel filterbank for MFCC and a linearly spaced one for LFCC.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window
from sklearn.base import BaseEstimator, TransformerMixin

from .audio_io import AudioClip
from .exceptions import ResolutionError, ShapeError, SignalRangeError, TooShortError

__all__ = [
    "FrameConfig",
    "FeatureConfig",
    "Spectrogram",
    "Filterbank",
    "MelSpectrogram",
    "CepstralFeatures",
    "hz_to_mel",
    "mel_to_hz",
    "compute_spectrogram",
    "build_filterbank",
    "apply_filterbank",
    "cepstrum",
    "delta",
    "extract_features",
    "write_feature_cache",
    "read_feature_cache",
    "CepstralExtractor",
]

WINDOWS = ("hann", "hamming", "blackman", "rectangular")
KIND_TAGS = {"mfcc": 0, "lfcc": 1}


def hz_to_mel(f):
    """Mel value of ``f`` Hz: ``2595 * log10(1 + f / 700)``."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise SignalRangeError("frequency must be non-negative")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return out.item() if out.ndim == 0 else out


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return out.item() if out.ndim == 0 else out


@dataclass(frozen=True)
class FrameConfig:
    frame_len_s: float = 0.020
    hop_len_s: float = 0.010
    window: str = "hann"
    dft_size: int = 512
    power: bool = False

    def __post_init__(self):
        if not 0 < self.hop_len_s <= self.frame_len_s:
            raise ValueError("need 0 < hop_len_s <= frame_len_s")
        if self.window not in WINDOWS:
            raise ValueError(f"window must be one of {WINDOWS}")
        if self.dft_size < 1 or self.dft_size & (self.dft_size - 1):
            raise ValueError("dft_size must be a power of two")

    def frame_samples(self, rate: int) -> int:
        return int(round(self.frame_len_s * rate))

    def hop_samples(self, rate: int) -> int:
        return int(round(self.hop_len_s * rate))


@dataclass(frozen=True)
class FeatureConfig:
    """Everything that determines a cepstral feature matrix; doubles as fingerprint."""

    kind: str = "lfcc"
    frame: FrameConfig = field(default_factory=FrameConfig)
    n_filters: int = 40
    n_ceps: int = 20
    delta_window: int = 2
    log_floor: float = 1e-10
    f_min: float = 0.0
    f_max: float | None = None
    sample_rate: int = 16000

    def __post_init__(self):
        if self.kind not in KIND_TAGS:
            raise ValueError(f"kind must be 'mfcc' or 'lfcc', got {self.kind!r}")
        if not 1 <= self.n_ceps <= self.n_filters:
            raise ValueError("need 1 <= n_ceps <= n_filters")
        if self.delta_window < 1:
            raise ValueError("delta_window must be >= 1")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def band(self) -> tuple[float, float]:
        return (self.f_min, self.f_max if self.f_max is not None else self.sample_rate / 2.0)

    def fingerprint(self) -> dict:
        d = asdict(self)
        d["f_max"] = self.band[1]
        return d

    @classmethod
    def from_fingerprint(cls, d: dict) -> FeatureConfig:
        d = dict(d)
        d["frame"] = FrameConfig(**d["frame"])
        return cls(**d)


@dataclass
class Spectrogram:
    values: np.ndarray       # T x (K/2+1)
    bin_freqs: np.ndarray
    frame_times: np.ndarray
    power: bool = False

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.values) if self.power else self.values


@dataclass
class Filterbank:
    weights: np.ndarray      # S x (K/2+1)
    scale: str
    band: tuple[float, float]
    edges: np.ndarray        # S+2 edge frequencies in Hz

    @property
    def centers(self) -> np.ndarray:
        return self.edges[1:-1]


@dataclass
class MelSpectrogram:
    values: np.ndarray       # T x S
    scale: str = "mel"


@dataclass
class CepstralFeatures:
    base: np.ndarray
    delta: np.ndarray
    delta2: np.ndarray
    delta_window: int
    feature_kind: str
    config: FeatureConfig | None = None

    def __post_init__(self):
        if not (self.base.shape == self.delta.shape == self.delta2.shape):
            raise ShapeError("base, delta and delta2 must share one shape")

    @property
    def n_frames(self) -> int:
        return self.base.shape[0]

    def stacked(self) -> np.ndarray:
        """Frame matrix ``T x 3R`` of concatenated (base, delta, delta2) rows."""
        return np.hstack([self.base, self.delta, self.delta2])

    @classmethod
    def from_stacked(cls, frames: np.ndarray, like: CepstralFeatures) -> CepstralFeatures:
        r = like.base.shape[1]
        return cls(frames[:, :r], frames[:, r:2 * r], frames[:, 2 * r:],
                   like.delta_window, like.feature_kind, like.config)


def _window(name: str, n: int) -> np.ndarray:
    if name == "rectangular":
        return np.ones(n)
    return get_window(name, n, fftbins=True)


def compute_spectrogram(clip: AudioClip, cfg: FrameConfig) -> Spectrogram:
    """Short-time DFT magnitude (or power, when ``cfg.power``) per frame.

    Frames are not padded: ``T = 1 + (len - frame) // hop``. Each windowed
    frame is zero-padded to ``cfg.dft_size`` before the real DFT.
    """
    rate = clip.sample_rate
    n_frame, n_hop = cfg.frame_samples(rate), cfg.hop_samples(rate)
    if n_frame > cfg.dft_size:
        raise ValueError(f"frame of {n_frame} samples exceeds dft_size {cfg.dft_size}")
    x = clip.samples
    if x.size < n_frame:
        raise TooShortError(f"clip of {x.size} samples is shorter than one frame ({n_frame})")
    n_frames = 1 + (x.size - n_frame) // n_hop
    idx = np.arange(n_frame)[None, :] + n_hop * np.arange(n_frames)[:, None]
    frames = x[idx] * _window(cfg.window, n_frame)
    spec = np.abs(np.fft.rfft(frames, n=cfg.dft_size, axis=1))
    if cfg.power:
        spec = spec ** 2
    return Spectrogram(
        values=spec,
        bin_freqs=np.arange(cfg.dft_size // 2 + 1) * rate / cfg.dft_size,
        frame_times=np.arange(n_frames) * n_hop / rate,
        power=cfg.power,
    )


def build_filterbank(scale: str, n_filters: int, band: tuple[float, float],
                     dft_size: int, sample_rate: int) -> Filterbank:
    """Triangular filters with edges equally spaced on the Mel or linear scale.

    ``n_filters + 2`` edge points split the band; filter ``s`` rises from
    edge ``s`` to edge ``s+1`` and falls to edge ``s+2``. Each row is then
    scaled so that its largest weight on the bin grid is exactly 1.
    """
    f_min, f_max = band
    nyquist = sample_rate / 2.0
    if n_filters < 1:
        raise ValueError("need at least one filter")
    if not 0 <= f_min < f_max <= nyquist:
        raise SignalRangeError(f"band {band} must satisfy 0 <= f_min < f_max <= {nyquist}")
    if scale == "mel":
        edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_filters + 2))
        edges[0], edges[-1] = f_min, f_max
    elif scale == "linear":
        edges = np.linspace(f_min, f_max, n_filters + 2)
    else:
        raise ValueError(f"scale must be 'mel' or 'linear', got {scale!r}")

    freqs = np.arange(dft_size // 2 + 1) * sample_rate / dft_size
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    peaks = weights.max(axis=1)
    if np.any(peaks <= 0):
        bad = int(np.argmin(peaks))
        raise ResolutionError(
            f"filter {bad} ({edges[bad]:.1f}-{edges[bad + 2]:.1f} Hz) has no DFT bin inside; "
            f"use fewer filters or a larger dft_size")
    weights /= peaks[:, None]
    return Filterbank(weights, scale, (float(f_min), float(f_max)), edges)


def apply_filterbank(spec: Spectrogram, fb: Filterbank) -> MelSpectrogram:
    """``X_f(t, s) = sum_k |X(t, k)| H(s, k)``, always on magnitudes."""
    if spec.values.shape[1] != fb.weights.shape[1]:
        raise ShapeError(
            f"spectrogram has {spec.values.shape[1]} bins, filterbank {fb.weights.shape[1]}")
    return MelSpectrogram(spec.magnitude @ fb.weights.T, fb.scale)


def _dct_matrix(n_filters: int, n_ceps: int) -> np.ndarray:
    r = np.arange(n_ceps)[:, None]
    s = np.arange(n_filters)[None, :]
    return np.cos(np.pi * r * (s + 0.5) / n_filters)


def cepstrum(mel: MelSpectrogram | np.ndarray, n_ceps: int, log_floor: float = 1e-10) -> np.ndarray:
    """Unnormalized DCT-II of the floored log filter energies (``T x n_ceps``)."""
    values = mel.values if isinstance(mel, MelSpectrogram) else np.asarray(mel, dtype=np.float64)
    n_filters = values.shape[1]
    if not 1 <= n_ceps <= n_filters:
        raise ValueError(f"need 1 <= n_ceps <= {n_filters}")
    log_e = np.log(np.maximum(values, log_floor))
    return log_e @ _dct_matrix(n_filters, n_ceps).T


def delta(c: np.ndarray, n: int = 2) -> np.ndarray:
    """Central-difference time derivative over ``+-n`` frames, edges replicated."""
    c = np.asarray(c, dtype=np.float64)
    if n < 1:
        raise ValueError("delta window must be >= 1")
    n_frames = c.shape[0]
    padded = np.pad(c, ((n, n),) + ((0, 0),) * (c.ndim - 1), mode="edge")
    out = np.zeros_like(c)
    for k in range(1, n + 1):
        out += k * (padded[n + k:n + k + n_frames] - padded[n - k:n - k + n_frames])
    return out / (2.0 * sum(k * k for k in range(1, n + 1)))


def extract_features(clip: AudioClip, cfg: FeatureConfig | None = None) -> CepstralFeatures:
    """Full MFCC/LFCC pipeline including delta and double-delta blocks."""
    cfg = cfg or FeatureConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"clip is at {clip.sample_rate} Hz but features expect {cfg.sample_rate} Hz; resample first")
    spec = compute_spectrogram(clip, cfg.frame)
    fb = _cached_filterbank("mel" if cfg.kind == "mfcc" else "linear", cfg.n_filters,
                            cfg.band, cfg.frame.dft_size, cfg.sample_rate)
    base = cepstrum(apply_filterbank(spec, fb), cfg.n_ceps, cfg.log_floor)
    d1 = delta(base, cfg.delta_window)
    d2 = delta(d1, cfg.delta_window)
    return CepstralFeatures(base, d1, d2, cfg.delta_window, cfg.kind, cfg)


_FB_CACHE: dict = {}


def _cached_filterbank(*key) -> Filterbank:
    fb = _FB_CACHE.get(key)
    if fb is None:
        fb = _FB_CACHE[key] = build_filterbank(*key)
    return fb


# --------------------------------------------------------------------------
# Feature cache files: b"WFC1", u32 T, R, kind, N, then base/delta/delta2 as
# little-endian f64, row-major.
# --------------------------------------------------------------------------

_MAGIC = b"WFC1"
_HEADER = struct.Struct("<4sIIII")


def write_feature_cache(path, feats: CepstralFeatures) -> None:
    t, r = feats.base.shape
    header = _HEADER.pack(_MAGIC, t, r, KIND_TAGS[feats.feature_kind], feats.delta_window)
    body = b"".join(np.ascontiguousarray(b, dtype="<f8").tobytes()
                    for b in (feats.base, feats.delta, feats.delta2))
    Path(path).write_bytes(header + body)


def read_feature_cache(path) -> CepstralFeatures:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated feature cache")
    magic, t, r, kind, n = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if len(data) != _HEADER.size + 3 * t * r * 8:
        raise ValueError(f"{path}: size does not match header ({t}x{r})")
    blocks = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(3, t, r).astype(np.float64)
    kinds = {v: k for k, v in KIND_TAGS.items()}
    return CepstralFeatures(blocks[0], blocks[1], blocks[2], n, kinds[kind])


class CepstralExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping audio clips to stacked cepstral frame matrices.

    ``transform`` accepts a sequence of :class:`AudioClip` and returns a list
    of ``T_i x 3R`` arrays (rows are base, delta and delta2 concatenated), the
    input format of :class:`vocodetect.gmm.GmmDetector`.
    """

    def __init__(self, kind="lfcc", frame_len_s=0.020, hop_len_s=0.010, window="hann",
                 dft_size=512, power=False, n_filters=40, n_ceps=20, delta_window=2,
                 log_floor=1e-10, f_min=0.0, f_max=None, sample_rate=16000):
        self.kind = kind
        self.frame_len_s = frame_len_s
        self.hop_len_s = hop_len_s
        self.window = window
        self.dft_size = dft_size
        self.power = power
        self.n_filters = n_filters
        self.n_ceps = n_ceps
        self.delta_window = delta_window
        self.log_floor = log_floor
        self.f_min = f_min
        self.f_max = f_max
        self.sample_rate = sample_rate

    def feature_config(self) -> FeatureConfig:
        return FeatureConfig(
            kind=self.kind,
            frame=FrameConfig(self.frame_len_s, self.hop_len_s, self.window, self.dft_size, self.power),
            n_filters=self.n_filters, n_ceps=self.n_ceps, delta_window=self.delta_window,
            log_floor=self.log_floor, f_min=self.f_min, f_max=self.f_max,
            sample_rate=self.sample_rate)

    def fit(self, X=None, y=None):
        self.config_ = self.feature_config()
        return self

    def transform(self, X):
        cfg = getattr(self, "config_", None) or self.feature_config()
        return [extract_features(clip, cfg).stacked() for clip in X]

    def __sklearn_is_fitted__(self):
        return True
