import numpy as np
import pytest

from vocodetect.audio_io import AudioClip, load_manifest
from vocodetect.corpus import SynthCorpusSpec, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tone(freq, duration=1.0, rate=16000, amp=0.5):
    t = np.arange(int(round(duration * rate))) / rate
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), rate, f"tone{freq}")


def rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """20 + 20 clip synthetic corpus shared by the slower tests."""
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(root, SynthCorpusSpec(n_real=20, n_fake=20, seed=3))
    return load_manifest(root / "manifest.json")
