"""Generated-speech detection toolkit: cepstral features, GMM detectors, evaluation."""

__version__ = "0.1.0"
