"""Corpus statistics: pitch, spectral centroid and per-bin energy histograms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .audio_io import AudioClip
from .dsp import FrameConfig, compute_spectrogram
from .exceptions import EmptyInputError, ShapeError, SignalRangeError, UndefinedCentroidError

__all__ = [
    "PitchTrack",
    "CorpusStats",
    "EnergyHistogram",
    "PITCH_FRAME",
    "estimate_pitch",
    "spectral_centroid",
    "corpus_stats",
    "energy_histogram",
    "histogram_difference",
    "stats_csv",
    "histogram_csv",
]

PITCH_FRAME = FrameConfig(frame_len_s=0.040, hop_len_s=0.010, window="rectangular", dft_size=1024)
DB_FLOOR = -120.0


@dataclass
class PitchTrack:
    f0: np.ndarray              # Hz per frame, NaN where unvoiced
    frame_times: np.ndarray
    band: tuple[float, float]
    median_window: int

    @property
    def voiced(self) -> np.ndarray:
        return self.f0[~np.isnan(self.f0)]


@dataclass
class CorpusStats:
    avg_pitch: float
    std_pitch: float
    avg_centroid: float
    n_clips: int


@dataclass
class EnergyHistogram:
    freqs: np.ndarray
    mean_power: np.ndarray      # linear, averaged over frames
    n_frames: int

    @property
    def energy_db(self) -> np.ndarray:
        return 10.0 * np.log10(np.maximum(self.mean_power, 10.0 ** (DB_FLOOR / 10.0)))


def _ncc(x: np.ndarray, start: int, width: int, lags: np.ndarray) -> np.ndarray:
    ref = x[start:start + width]
    e_ref = ref @ ref
    out = np.zeros(lags.size)
    if e_ref <= 0:
        return out
    segs = x[start + lags[:, None] + np.arange(width)[None, :]]
    e_seg = np.einsum("ij,ij->i", segs, segs)
    ok = e_seg > 0
    out[ok] = (segs[ok] @ ref) / np.sqrt(e_ref * e_seg[ok])
    return out


def _pick_lag(ncc: np.ndarray, tolerance: float) -> int:
    """Shortest lag whose correlation is a local peak within ``tolerance`` of the best.

    Plain argmax tends to pick a multiple of the period when the period is
    not an integer number of samples.
    """
    best = ncc.max()
    for j in range(ncc.size):
        left = ncc[j - 1] if j > 0 else -np.inf
        right = ncc[j + 1] if j + 1 < ncc.size else -np.inf
        if ncc[j] >= tolerance * best and ncc[j] >= left and ncc[j] >= right:
            return j
    return int(np.argmax(ncc))


def _lower_median_smooth(values: np.ndarray, window: int) -> np.ndarray:
    out = values.copy()
    half = window // 2
    for i in np.flatnonzero(~np.isnan(values)):
        neigh = values[max(0, i - half):i + half + 1]
        neigh = np.sort(neigh[~np.isnan(neigh)])
        out[i] = neigh[(neigh.size - 1) // 2]
    return out


def estimate_pitch(clip: AudioClip, band: tuple[float, float] = (50.0, 500.0),
                   frame_cfg: FrameConfig = PITCH_FRAME, median_window: int = 5,
                   voicing_threshold: float = 0.6, peak_tolerance: float = 0.95) -> PitchTrack:
    """Frame-wise f0 from the normalized cross-correlation, then median smoothing.

    For each frame the correlation between the frame and its copy shifted by
    every lag in ``[rate / f_max, rate / f_min]`` is computed; the frame is
    voiced when the peak exceeds ``voicing_threshold``. Smoothing takes the
    lower median of the voiced values in a ``median_window`` neighborhood, so
    it only ever outputs values present in the raw track.
    """
    f_min, f_max = band
    rate = clip.sample_rate
    if not 0 < f_min < f_max <= rate / 2:
        raise SignalRangeError(f"pitch band {band} must lie inside (0, {rate / 2}]")
    if median_window < 1 or median_window % 2 == 0:
        raise ValueError("median_window must be a positive odd number")
    lags = np.arange(int(np.ceil(rate / f_max)), int(np.floor(rate / f_min)) + 1)
    width = frame_cfg.frame_samples(rate)
    hop = frame_cfg.hop_samples(rate)
    x = clip.samples
    n_frames = max(0, 1 + (x.size - width - lags[-1]) // hop)
    raw = np.full(n_frames, np.nan)
    for t in range(n_frames):
        ncc = _ncc(x, t * hop, width, lags)
        if ncc.max() >= voicing_threshold:
            raw[t] = rate / lags[_pick_lag(ncc, peak_tolerance)]
    return PitchTrack(_lower_median_smooth(raw, median_window), np.arange(n_frames) * hop / rate,
                      (f_min, f_max), median_window)


def spectral_centroid(clip: AudioClip, frame_cfg: FrameConfig | None = None) -> float:
    """Magnitude-weighted mean frequency, averaged over frames with energy."""
    spec = compute_spectrogram(clip, frame_cfg or FrameConfig())
    mag = spec.magnitude
    totals = mag.sum(axis=1)
    active = totals > 0
    if not active.any():
        raise UndefinedCentroidError(f"clip {clip.source_id!r} has no spectral energy")
    per_frame = (mag[active] @ spec.bin_freqs) / totals[active]
    return float(per_frame.mean())


def corpus_stats(clips: Iterable[AudioClip], frame_cfg: FrameConfig | None = None,
                 pitch_kwargs: dict | None = None) -> CorpusStats:
    """Pooled voiced-frame pitch mean/std and mean per-clip centroid."""
    pitches, centroids = [], []
    for clip in clips:
        pitches.append(estimate_pitch(clip, **(pitch_kwargs or {})).voiced)
        centroids.append(spectral_centroid(clip, frame_cfg))
    if not centroids:
        raise EmptyInputError("corpus_stats needs at least one clip")
    pooled = np.concatenate(pitches)
    avg = float(pooled.mean()) if pooled.size else float("nan")
    std = float(pooled.std()) if pooled.size else float("nan")
    return CorpusStats(avg, std, float(np.mean(centroids)), len(centroids))


def energy_histogram(clips: Iterable[AudioClip], frame_cfg: FrameConfig | None = None) -> EnergyHistogram:
    """Average power per DFT bin over all frames of all clips."""
    cfg = frame_cfg or FrameConfig()
    if not cfg.power:
        cfg = FrameConfig(cfg.frame_len_s, cfg.hop_len_s, cfg.window, cfg.dft_size, power=True)
    total = None
    n_frames = 0
    freqs = None
    for clip in clips:
        spec = compute_spectrogram(clip, cfg)
        s = spec.values.sum(axis=0)
        if total is None:
            total, freqs = s, spec.bin_freqs
        elif s.shape != total.shape or not np.array_equal(freqs, spec.bin_freqs):
            raise ShapeError("clips disagree on the frequency grid (mixed sample rates?)")
        else:
            total = total + s
        n_frames += spec.values.shape[0]
    if total is None:
        raise EmptyInputError("energy_histogram needs at least one clip")
    return EnergyHistogram(freqs, total / n_frames, n_frames)


def histogram_difference(test: EnergyHistogram, reference: EnergyHistogram) -> np.ndarray:
    """Per-bin ``(test - ref) / ref`` on linear energies (floored like the dB view)."""
    if test.freqs.shape != reference.freqs.shape or not np.allclose(test.freqs, reference.freqs):
        raise ShapeError("histograms are on different frequency grids")
    floor = 10.0 ** (DB_FLOOR / 10.0)
    ref = np.maximum(reference.mean_power, floor)
    return (np.maximum(test.mean_power, floor) - ref) / ref


def stats_csv(rows: Sequence[tuple[str, CorpusStats]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["collection", "avg_pitch", "std_pitch", "avg_centroid"])
    for name, st in rows:
        w.writerow([name, repr(st.avg_pitch), repr(st.std_pitch), repr(st.avg_centroid)])
    return buf.getvalue()


def histogram_csv(hist: EnergyHistogram, rel_diff: np.ndarray | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["freq_hz", "energy_db"] + (["rel_diff"] if rel_diff is not None else []))
    db = hist.energy_db
    for i, f in enumerate(hist.freqs):
        row = [repr(float(f)), repr(float(db[i]))]
        if rel_diff is not None:
            row.append(repr(float(rel_diff[i])))
        w.writerow(row)
    return buf.getvalue()
