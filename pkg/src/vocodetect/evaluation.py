"""Equal error rate, experiment grids and the narrowband phone channel."""

from __future__ import annotations

import csv
import io
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal as sps

from .audio_io import AudioClip, CorpusManifest, ManifestEntry, load_wav, preprocess, resample
from .dsp import CepstralFeatures, FeatureConfig, extract_features
from .exceptions import EmptyInputError, ManifestError, ShapeError, SignalRangeError
from .gmm import DetectorPair, TrainConfig, score, train_gd

__all__ = [
    "ScoreSet",
    "EvalReport",
    "PhoneChannelConfig",
    "compute_eer",
    "split_entries",
    "FeatureStore",
    "train_detector",
    "score_entries",
    "run_experiment",
    "run_leave_one_out",
    "simulate_phone",
    "mu_law_encode",
    "mu_law_decode",
]


@dataclass
class ScoreSet:
    real_scores: np.ndarray
    fake_scores: np.ndarray

    def __post_init__(self):
        self.real_scores = np.asarray(self.real_scores, dtype=np.float64).ravel()
        self.fake_scores = np.asarray(self.fake_scores, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.real_scores)) and np.all(np.isfinite(self.fake_scores))):
            raise ValueError("scores must be finite")


def compute_eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its threshold.

    A clip is accepted as genuine when its score is ``>= threshold``, so
    ``FAR(t)`` is the fraction of fake scores ``>= t`` and ``FRR(t)`` the
    fraction of real scores ``< t``. Both curves are evaluated at every
    distinct score plus ``+inf``. If they meet exactly, the rate there is
    returned; otherwise the two rates are linearly interpolated across the
    adjacent pair of thresholds where ``FAR - FRR`` changes sign. The
    returned threshold is the lower threshold of that pair.
    """
    real, fake = scores.real_scores, scores.fake_scores
    if real.size == 0 or fake.size == 0:
        raise EmptyInputError("EER needs at least one real and one fake score")
    thresholds = np.append(np.unique(np.concatenate([real, fake])), np.inf)
    far = (fake.size - np.searchsorted(np.sort(fake), thresholds, side="left")) / fake.size
    frr = np.searchsorted(np.sort(real), thresholds, side="left") / real.size
    diff = far - frr    # non-increasing: +1 at the lowest score, -1 at +inf
    zero = np.flatnonzero(diff == 0)
    if zero.size:
        i = zero[0]
        return float(far[i]), float(thresholds[i])
    i = int(np.flatnonzero(diff > 0)[-1])
    alpha = diff[i] / (diff[i] - diff[i + 1])
    eer = far[i] + alpha * (far[i + 1] - far[i])
    return float(eer), float(thresholds[i])


# --------------------------------------------------------------------------
# Phone channel
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PhoneChannelConfig:
    intermediate_rate: int = 8000
    band: tuple[float, float] = (300.0, 3400.0)
    order: int = 4
    companding: str = "mu_law"
    output_rate: int = 16000

    def __post_init__(self):
        lo, hi = self.band
        if not 0 < lo < hi < self.intermediate_rate / 2:
            raise SignalRangeError(f"band {self.band} must lie inside (0, {self.intermediate_rate / 2})")
        if self.companding not in ("none", "mu_law"):
            raise ValueError("companding must be 'none' or 'mu_law'")


def mu_law_encode(x: np.ndarray, mu: int = 255) -> np.ndarray:
    """Compand and quantize to ``mu + 1`` integer levels (0..mu)."""
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    return np.clip(np.round((y + 1.0) / 2.0 * mu), 0, mu).astype(np.int64)


def mu_law_decode(q: np.ndarray, mu: int = 255) -> np.ndarray:
    y = 2.0 * np.asarray(q, dtype=np.float64) / mu - 1.0
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(mu)) / mu


def simulate_phone(clip: AudioClip, cfg: PhoneChannelConfig | None = None) -> AudioClip:
    """Narrowband telephone channel.

    Downsample to the intermediate rate, Butterworth band-pass, optional
    8-bit mu-law round trip, then resample to the output rate.
    """
    cfg = cfg or PhoneChannelConfig()
    if clip.sample_rate < cfg.output_rate:
        raise SignalRangeError(f"input must be at >= {cfg.output_rate} Hz, got {clip.sample_rate}")
    narrow = resample(clip, cfg.intermediate_rate)
    sos = sps.butter(cfg.order, cfg.band, btype="bandpass", fs=cfg.intermediate_rate, output="sos")
    x = np.clip(sps.sosfilt(sos, narrow.samples), -1.0, 1.0)
    if cfg.companding == "mu_law":
        x = mu_law_decode(mu_law_encode(x))
    return resample(AudioClip(x, cfg.intermediate_rate, clip.source_id), cfg.output_rate)


# --------------------------------------------------------------------------
# Experiment plumbing
# --------------------------------------------------------------------------

def split_entries(entries: list[ManifestEntry], seed: int, test_fraction: float = 0.2,
                  key: str = "") -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Seeded uniform train/hold-out split; both parts keep manifest order.

    The permutation depends only on ``seed``, ``key`` (normally the
    collection tag) and the number of entries.
    """
    n = len(entries)
    n_test = int(round(test_fraction * n))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng([seed, zlib.crc32(key.encode())])
    test_idx = set(rng.permutation(n)[:n_test].tolist())
    train = [e for i, e in enumerate(entries) if i not in test_idx]
    test = [e for i, e in enumerate(entries) if i in test_idx]
    return train, test


class FeatureStore:
    """Loads, preprocesses and featurizes manifest entries, caching by path.

    ``jobs`` threads work on distinct files; results always follow the
    order of the requested entries.
    """

    def __init__(self, manifest: CorpusManifest, cfg: FeatureConfig, jobs: int = 1,
                 max_silence_s: float | None = 2.0):
        self.manifest = manifest
        self.cfg = cfg
        self.jobs = max(1, int(jobs))
        self.max_silence_s = max_silence_s
        self._cache: dict = {}

    def _compute(self, entry: ManifestEntry) -> CepstralFeatures:
        clip = load_wav(self.manifest.resolve(entry), source_id=entry.source_id)
        clip = preprocess(clip, self.cfg.sample_rate, self.max_silence_s)
        return extract_features(clip, self.cfg)

    def get(self, entries: list[ManifestEntry]) -> list[CepstralFeatures]:
        todo = [e for e in dict.fromkeys(entries) if e not in self._cache]
        if self.jobs > 1 and len(todo) > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                results = list(pool.map(self._compute, todo))
        else:
            results = [self._compute(e) for e in todo]
        self._cache.update(zip(todo, results))
        return [self._cache[e] for e in entries]


def _frames(feats: list[CepstralFeatures]) -> np.ndarray:
    if not feats:
        raise EmptyInputError("no clips to train on")
    return np.vstack([f.stacked() for f in feats])


def train_detector(real: list[CepstralFeatures], fake: list[CepstralFeatures],
                   train_cfg: TrainConfig, fingerprint: dict | None = None) -> DetectorPair:
    return DetectorPair(train_gd(_frames(real), train_cfg), train_gd(_frames(fake), train_cfg),
                        fingerprint)


def score_entries(pair: DetectorPair, feats: list[CepstralFeatures]) -> np.ndarray:
    return np.array([score(pair, f) for f in feats])


@dataclass
class EvalReport:
    """EER grid: one row per trained detector, one column per test collection."""

    train_sets: list[str]
    test_sets: list[str]
    eer: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.eer = np.asarray(self.eer, dtype=np.float64)
        if self.eer.shape != (len(self.train_sets), len(self.test_sets)):
            raise ShapeError("EER matrix does not match the row/column labels")

    @property
    def aeer(self) -> np.ndarray:
        return self.eer.mean(axis=1)

    def row(self, name: str) -> dict:
        i = self.train_sets.index(name)
        return dict(zip(self.test_sets, self.eer[i].tolist()), aEER=float(self.aeer[i]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["training_set", *self.test_sets, "aEER"])
        for name, row, avg in zip(self.train_sets, self.eer, self.aeer):
            writer.writerow([name, *(repr(float(v)) for v in row), repr(float(avg))])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"train_sets": self.train_sets, "test_sets": self.test_sets,
               "eer": self.eer.tolist(), "aeer": self.aeer.tolist(),
               "provenance": self.provenance}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _check_collections(manifest: CorpusManifest, names: list[str]) -> None:
    present = set(manifest.collections("fake"))
    missing = [c for c in names if c not in present]
    if missing:
        raise ManifestError(f"fake collections not in manifest: {missing}")
    if not manifest.subset(label="real"):
        raise ManifestError("manifest has no real clips")


class _Splits:
    def __init__(self, manifest: CorpusManifest, seed: int, test_fraction: float):
        self.manifest, self.seed, self.test_fraction = manifest, seed, test_fraction
        self.real_train, self.real_test = [], []
        for c in manifest.collections("real"):
            tr, te = self.of(c, "real")
            self.real_train += tr
            self.real_test += te

    def of(self, collection: str, label: str = "fake"):
        entries = self.manifest.subset(collection, label)
        return split_entries(entries, self.seed, self.test_fraction, f"{label}:{collection}")


def _provenance(feature_cfg, train_cfg, seed, test_fraction, counts) -> dict:
    return {"feature_config": feature_cfg.fingerprint(), "train_config": asdict(train_cfg),
            "split_seed": seed, "test_fraction": test_fraction, "file_counts": counts}


def _score_grid(pair: DetectorPair, store: FeatureStore, splits: _Splits,
                tests: list[str], real_scores: np.ndarray) -> list[float]:
    row = []
    for c in tests:
        fake_scores = score_entries(pair, store.get(splits.of(c)[1]))
        row.append(compute_eer(ScoreSet(real_scores, fake_scores))[0])
    return row


def run_experiment(manifest: CorpusManifest, train_collections: list[str] | None = None,
                   test_collections: list[str] | None = None,
                   feature_cfg: FeatureConfig | None = None, train_cfg: TrainConfig | None = None,
                   split_seed: int = 0, test_fraction: float = 0.2, jobs: int = 1,
                   store: FeatureStore | None = None) -> EvalReport:
    """Single-training-set grid: one detector per fake collection, scored on every hold-out.

    The real model is fit on the training split of all real clips; each row
    adds a fake model fit on that collection's training split.
    """
    feature_cfg = feature_cfg or FeatureConfig()
    train_cfg = train_cfg or TrainConfig()
    fakes = manifest.collections("fake")
    train_collections = list(train_collections or fakes)
    test_collections = list(test_collections or fakes)
    _check_collections(manifest, train_collections + test_collections)
    store = store or FeatureStore(manifest, feature_cfg, jobs)
    splits = _Splits(manifest, split_seed, test_fraction)

    real_model = train_gd(_frames(store.get(splits.real_train)), train_cfg)
    counts = {"real": [len(splits.real_train), len(splits.real_test)]}
    rows = []
    for c in train_collections:
        train, _ = splits.of(c)
        pair = DetectorPair(real_model, train_gd(_frames(store.get(train)), train_cfg),
                            feature_cfg.fingerprint())
        real_scores = score_entries(pair, store.get(splits.real_test))
        rows.append(_score_grid(pair, store, splits, test_collections, real_scores))
    for c in test_collections + train_collections:
        counts[c] = [len(s) for s in splits.of(c)]
    return EvalReport(train_collections, test_collections, np.array(rows),
                      _provenance(feature_cfg, train_cfg, split_seed, test_fraction, counts))


def run_leave_one_out(manifest: CorpusManifest, collections: list[str] | None = None,
                      feature_cfg: FeatureConfig | None = None, train_cfg: TrainConfig | None = None,
                      split_seed: int = 0, test_fraction: float = 0.2, jobs: int = 1,
                      store: FeatureStore | None = None) -> EvalReport:
    """One detector per held-out collection, trained on all other fake collections.

    Rows are labeled by the held-out collection; columns cover every
    collection's hold-out split.
    """
    feature_cfg = feature_cfg or FeatureConfig()
    train_cfg = train_cfg or TrainConfig(components=256)
    collections = list(collections or manifest.collections("fake"))
    if len(collections) < 2:
        raise ManifestError("leave-one-out needs at least two fake collections")
    _check_collections(manifest, collections)
    store = store or FeatureStore(manifest, feature_cfg, jobs)
    splits = _Splits(manifest, split_seed, test_fraction)

    real_model = train_gd(_frames(store.get(splits.real_train)), train_cfg)
    rows = []
    for held_out in collections:
        pool = [e for c in collections if c != held_out for e in splits.of(c)[0]]
        pair = DetectorPair(real_model, train_gd(_frames(store.get(pool)), train_cfg),
                            feature_cfg.fingerprint())
        real_scores = score_entries(pair, store.get(splits.real_test))
        rows.append(_score_grid(pair, store, splits, collections, real_scores))
    counts = {"real": [len(splits.real_train), len(splits.real_test)]}
    for c in collections:
        counts[c] = [len(s) for s in splits.of(c)]
    return EvalReport(collections, collections, np.array(rows),
                      _provenance(feature_cfg, train_cfg, split_seed, test_fraction, counts))
