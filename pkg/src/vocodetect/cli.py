"""Command-line entry point: ``vocodetect <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    corpus_stats,
    energy_histogram,
    histogram_csv,
    histogram_difference,
    stats_csv,
)
from .attribution import attribution_csv, blur_ig, heatmap_pgm
from .audio_io import (
    CorpusManifest,
    ManifestEntry,
    load_manifest,
    load_wav,
    preprocess,
    resample,
    save_manifest,
    write_wav,
)
from .corpus import SynthCorpusSpec, generate_corpus
from .dsp import FeatureConfig, FrameConfig, extract_features, read_feature_cache, write_feature_cache
from .evaluation import (
    FeatureStore,
    PhoneChannelConfig,
    ScoreSet,
    _Splits,
    compute_eer,
    run_experiment,
    run_leave_one_out,
    score_entries,
    simulate_phone,
    train_detector,
)
from .exceptions import CompatibilityError, ConfigError, ManifestError, VocodetectError
from .gmm import DetectorPair, TrainConfig

log = logging.getLogger("vocodetect")

# excluded from provenance: they must not change any output byte
_NON_SEMANTIC = {"jobs", "out", "config", "force", "func", "verbose"}


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _provenance(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NON_SEMANTIC}


def _feature_config(args) -> FeatureConfig:
    return FeatureConfig(
        kind=args.kind,
        frame=FrameConfig(args.frame_len, args.hop_len, args.window, args.dft_size, args.power),
        n_filters=args.n_filters, n_ceps=args.n_ceps, delta_window=args.delta_window,
        log_floor=args.log_floor, f_min=args.f_min, f_max=args.f_max, sample_rate=args.sample_rate)


def _train_config(args, default_components: int = 128) -> TrainConfig:
    return TrainConfig(components=args.components or default_components, epochs=args.epochs,
                       batch_size=args.batch_size, learning_rate=args.lr, seed=args.seed,
                       variance_floor=args.variance_floor)


def _max_silence(args) -> float | None:
    return None if args.max_silence < 0 else args.max_silence


def _manifest(args) -> CorpusManifest:
    return load_manifest(args.manifest)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _map(fn, items, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _safe(fn):
    """Wrap a per-file function so failures come back as values instead of raising."""
    def run(item):
        try:
            return fn(item), None
        except (VocodetectError, OSError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"
    return run


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_extract(args) -> int:
    manifest = _manifest(args)
    cfg = _feature_config(args)
    out = _out(args)
    index_path = out / "features.json"
    previous = json.loads(index_path.read_text()) if index_path.exists() else None
    same_cfg = previous is not None and previous.get("feature_config") == cfg.fingerprint()

    def target(e: ManifestEntry) -> Path:
        return out / e.collection / f"{Path(e.path).stem}.wfc"

    def work(e: ManifestEntry) -> str:
        dst = target(e)
        src = manifest.resolve(e)
        if (not args.force and same_cfg and dst.exists()
                and dst.stat().st_mtime >= src.stat().st_mtime):
            return "cached"
        clip = preprocess(load_wav(src, e.source_id), cfg.sample_rate, _max_silence(args))
        feats = extract_features(clip, cfg)
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_feature_cache(dst, feats)
        return "computed"

    results = _map(_safe(work), manifest.entries, args.jobs)
    files, errors = [], {}
    for e, (status, err) in zip(manifest.entries, results):
        if err is not None:
            errors[e.source_id] = err
            log.error("%s: %s", e.source_id, err)
        else:
            files.append({"source_id": e.source_id, "label": e.label, "collection": e.collection,
                          "file": target(e).relative_to(out).as_posix()})
    n_new = sum(1 for s, _ in results if s == "computed")
    log.info("extracted %d, reused %d, failed %d", n_new, len(files) - n_new, len(errors))
    _write_json(index_path, {"feature_config": cfg.fingerprint(), "files": files,
                             "errors": errors, "provenance": _provenance(args)})
    return 1 if errors else 0


def cmd_analyze(args) -> int:
    manifest = _manifest(args)
    out = _out(args)
    collections = manifest.collections()
    reference = args.reference or next(iter(manifest.collections("real")), None)
    if reference is None or reference not in collections:
        raise ConfigError(f"reference collection {reference!r} not found in manifest")
    frame = FrameConfig(args.frame_len, args.hop_len, args.window, args.dft_size, power=True)

    def load(e):
        return resample(load_wav(manifest.resolve(e), e.source_id), args.sample_rate)

    stats, hists = [], {}
    for c in collections:
        clips = _map(load, manifest.subset(c), args.jobs)
        stats.append((c, corpus_stats(clips, frame)))
        hists[c] = energy_histogram(clips, frame)
    (out / "stats.csv").write_text(stats_csv(stats))
    for c in collections:
        (out / f"histogram_{c}.csv").write_text(histogram_csv(hists[c]))
        if c != reference:
            diff = histogram_difference(hists[c], hists[reference])
            (out / f"difference_{c}.csv").write_text(histogram_csv(hists[c], diff))
    _write_json(out / "analysis.json", {
        "reference": reference,
        # NaN (no voiced frames) is not valid JSON
        "stats": {c: {k: None if isinstance(v, float) and np.isnan(v) else v
                      for k, v in asdict(s).items()} for c, s in stats},
        "provenance": _provenance(args)})
    return 0


def _train_subsets(manifest: CorpusManifest, args) -> tuple[list[str], _Splits]:
    fakes = manifest.collections("fake")
    chosen = args.train_collection or fakes
    missing = [c for c in chosen if c not in fakes]
    if missing:
        raise ManifestError(f"fake collections not in manifest: {missing}")
    return chosen, _Splits(manifest, args.seed, args.test_fraction)


def cmd_train(args) -> int:
    manifest = _manifest(args)
    cfg = _feature_config(args)
    collections, splits = _train_subsets(manifest, args)
    store = FeatureStore(manifest, cfg, args.jobs, _max_silence(args))
    fake_train = [e for c in collections for e in splits.of(c)[0]]
    pair = train_detector(store.get(splits.real_train), store.get(fake_train),
                          _train_config(args), cfg.fingerprint())
    out = _out(args)
    prov = _provenance(args)
    prov.update(train_collections=collections, n_real_train=len(splits.real_train),
                n_fake_train=len(fake_train))
    pair.save(out / "model.json", prov)
    return 0


def cmd_score(args) -> int:
    manifest = _manifest(args)
    cfg = _feature_config(args)
    pair = DetectorPair.load(args.model)
    if pair.fingerprint is not None and pair.fingerprint != cfg.fingerprint():
        raise CompatibilityError("feature flags differ from those the model was trained with")
    splits = _Splits(manifest, args.seed, args.test_fraction)
    if args.subset == "all":
        entries = list(manifest.entries)
    else:
        part = 0 if args.subset == "train" else 1
        entries = [e for c in manifest.collections()
                   for lab in ("real", "fake") if manifest.subset(c, lab)
                   for e in splits.of(c, lab)[part]]
        entries = [e for e in manifest.entries if e in set(entries)]
    store = FeatureStore(manifest, cfg, args.jobs, _max_silence(args))
    scores = score_entries(pair, store.get(entries))
    out = _out(args)
    lines = ["source_id,collection,label,score"]
    lines += [f"{e.source_id},{e.collection},{e.label},{float(s)!r}" for e, s in zip(entries, scores)]
    (out / "scores.csv").write_text("\n".join(lines) + "\n")

    real = np.array([s for e, s in zip(entries, scores) if e.label == "real"])
    eers = {}
    for c in manifest.collections("fake"):
        fake = np.array([s for e, s in zip(entries, scores) if e.collection == c and e.label == "fake"])
        if real.size and fake.size:
            eers[c] = compute_eer(ScoreSet(real, fake))[0]
    _write_json(out / "scores.json", {"eer": eers, "n_scored": len(entries),
                                      "provenance": _provenance(args)})
    return 0


def _emit_report(report, args) -> None:
    out = _out(args)
    report.provenance["args"] = _provenance(args)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json())
    for name, row in zip(report.train_sets, report.eer):
        log.info("%s: %s aEER=%.4f", name, np.round(row, 4).tolist(), row.mean())


def cmd_eval(args) -> int:
    manifest = _manifest(args)
    cfg = _feature_config(args)
    store = FeatureStore(manifest, cfg, args.jobs, _max_silence(args))
    report = run_experiment(manifest, args.train_collection, args.test_collection, cfg,
                            _train_config(args), args.seed, args.test_fraction, store=store)
    _emit_report(report, args)
    return 0


def cmd_loo(args) -> int:
    manifest = _manifest(args)
    cfg = _feature_config(args)
    store = FeatureStore(manifest, cfg, args.jobs, _max_silence(args))
    report = run_leave_one_out(manifest, args.train_collection, cfg, _train_config(args, 256),
                               args.seed, args.test_fraction, store=store)
    _emit_report(report, args)
    return 0


def cmd_simulate_phone(args) -> int:
    manifest = _manifest(args)
    out = _out(args)
    cfg = PhoneChannelConfig(args.intermediate_rate, (args.band_low, args.band_high),
                             args.filter_order, args.companding, args.output_rate)

    def work(e: ManifestEntry):
        clip = load_wav(manifest.resolve(e), e.source_id)
        if clip.sample_rate < cfg.output_rate:
            clip = resample(clip, cfg.output_rate)
        write_wav(out / e.path, simulate_phone(clip, cfg))

    results = _map(_safe(work), manifest.entries, args.jobs)
    errors = {e.source_id: err for e, (_, err) in zip(manifest.entries, results) if err}
    for sid, err in errors.items():
        log.error("%s: %s", sid, err)
    kept = [e for e in manifest.entries if e.source_id not in errors]
    save_manifest(out / "manifest.json", CorpusManifest(Path("."), kept))
    _write_json(out / "phone_channel.json", {"channel": asdict(cfg), "errors": errors,
                                             "provenance": _provenance(args)})
    return 1 if errors else 0


def cmd_synth_corpus(args) -> int:
    spec = SynthCorpusSpec(args.n_real, args.n_fake, args.duration, args.sample_rate, args.seed)
    manifest = generate_corpus(args.out, spec)
    log.info("wrote %d clips to %s", len(manifest.entries), args.out)
    return 0


def cmd_attribute(args) -> int:
    manifest = _manifest(args)
    cfg = _feature_config(args)
    pair = DetectorPair.load(args.model)
    if pair.fingerprint is not None and pair.fingerprint != cfg.fingerprint():
        raise CompatibilityError("feature flags differ from those the model was trained with")
    if args.features:
        feats = read_feature_cache(args.features)
        feats.config = cfg
        label = Path(args.features).stem
    else:
        matches = [e for e in manifest.entries if e.source_id == args.source_id] if args.source_id \
            else manifest.entries[args.index:args.index + 1]
        if not matches:
            raise ManifestError(f"no manifest entry {args.source_id or args.index!r}")
        entry = matches[0]
        label = entry.source_id
        clip = preprocess(load_wav(manifest.resolve(entry), entry.source_id), cfg.sample_rate,
                          _max_silence(args))
        feats = extract_features(clip, cfg)
    attr = blur_ig(pair, feats, args.sigma_max, args.steps)
    out = _out(args)
    (out / "attribution.csv").write_text(attribution_csv(attr))
    (out / "heatmap.pgm").write_bytes(heatmap_pgm(attr))
    _write_json(out / "attribution.json", {
        "clip": label, "sigma_max": attr.sigma_max, "steps": attr.steps,
        "input_score": attr.input_score, "baseline_score": attr.baseline_score,
        "attribution_sum": attr.total(), "provenance": _provenance(args)})
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def _common(require_manifest: bool = True, require_out: bool = True) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--manifest", required=require_manifest, help="corpus manifest JSON")
    g.add_argument("--out", required=require_out, help="output directory")
    g.add_argument("--seed", type=int, default=0, help="seed for splits, training and synthesis")
    g.add_argument("--jobs", type=int, default=1, help="worker threads for per-file stages")
    g.add_argument("--config", help="JSON file whose keys override flag defaults")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _feature_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("features")
    g.add_argument("--kind", choices=("lfcc", "mfcc"), default="lfcc", help="cepstral feature type")
    g.add_argument("--frame-len", type=float, default=0.020, help="frame length in seconds")
    g.add_argument("--hop-len", type=float, default=0.010, help="hop length in seconds")
    g.add_argument("--window", choices=("hann", "hamming", "blackman", "rectangular"), default="hann",
                   help="analysis window")
    g.add_argument("--dft-size", type=int, default=512, help="DFT size (power of two)")
    g.add_argument("--power", action="store_true", help="filter the power instead of the magnitude spectrum")
    g.add_argument("--n-filters", type=int, default=40, help="number of triangular filters")
    g.add_argument("--n-ceps", type=int, default=20, help="cepstral coefficients per block")
    g.add_argument("--delta-window", type=int, default=2, help="delta half-window N")
    g.add_argument("--log-floor", type=float, default=1e-10, help="floor applied before the logarithm")
    g.add_argument("--f-min", type=float, default=0.0, help="filterbank lower edge in Hz")
    g.add_argument("--f-max", type=float, default=None, help="filterbank upper edge in Hz (default Nyquist)")
    g.add_argument("--sample-rate", type=int, default=16000, help="audio is resampled to this rate")
    g.add_argument("--max-silence", type=float, default=2.0,
                   help="shorten silences longer than this many seconds (negative disables)")
    return p


def _train_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("training")
    g.add_argument("--components", type=int, default=None,
                   help="mixture components (default 128, 256 for loo)")
    g.add_argument("--epochs", type=int, default=10, help="training epochs")
    g.add_argument("--batch-size", type=int, default=128, help="mini-batch size")
    g.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    g.add_argument("--variance-floor", type=float, default=1e-4,
                   help="variance floor relative to the data variance")
    g.add_argument("--test-fraction", type=float, default=0.2, help="hold-out fraction per collection")
    g.add_argument("--train-collection", action="append", default=None,
                   help="fake collection to train on (repeatable; default all)")
    return p


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="vocodetect",
                                     description="Cepstral-feature GMM detection of generated speech.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    feats, train = _feature_flags(), _train_flags()
    subs = {}

    def add(name, fn, help, parents):
        p = sub.add_parser(name, help=help, description=help, parents=parents)
        p.set_defaults(func=fn)
        subs[name] = p
        return p

    p = add("extract", cmd_extract, "extract cepstral feature cache files (WFC1)", [_common(), feats])
    p.add_argument("--force", action="store_true", help="recompute even when caches are up to date")

    p = add("analyze", cmd_analyze, "pitch/centroid statistics and energy histograms per collection",
            [_common()])
    p.add_argument("--reference", help="collection the histogram differences are relative to "
                                       "(default: first real collection)")
    p.add_argument("--frame-len", type=float, default=0.020, help="frame length in seconds")
    p.add_argument("--hop-len", type=float, default=0.010, help="hop length in seconds")
    p.add_argument("--window", choices=("hann", "hamming", "blackman", "rectangular"), default="hann",
                   help="analysis window")
    p.add_argument("--dft-size", type=int, default=512, help="DFT size")
    p.add_argument("--sample-rate", type=int, default=16000, help="audio is resampled to this rate")

    add("train", cmd_train, "train a real/fake GMM pair on the training split", [_common(), feats, train])

    p = add("score", cmd_score, "score clips with a trained model", [_common(), feats])
    p.add_argument("--model", required=True, help="model JSON written by 'train'")
    p.add_argument("--subset", choices=("all", "train", "holdout"), default="all",
                   help="which split of every collection to score")
    p.add_argument("--test-fraction", type=float, default=0.2, help="hold-out fraction per collection")

    p = add("eval", cmd_eval, "single-training-set EER grid", [_common(), feats, train])
    p.add_argument("--test-collection", action="append", default=None,
                   help="fake collection to test on (repeatable; default all)")

    add("loo", cmd_loo, "leave-one-out EER grid", [_common(), feats, train])

    p = add("simulate-phone", cmd_simulate_phone, "pass every clip through a narrowband phone channel",
            [_common()])
    p.add_argument("--intermediate-rate", type=int, default=8000, help="channel sample rate")
    p.add_argument("--band-low", type=float, default=300.0, help="band-pass lower edge in Hz")
    p.add_argument("--band-high", type=float, default=3400.0, help="band-pass upper edge in Hz")
    p.add_argument("--filter-order", type=int, default=4, help="Butterworth prototype order")
    p.add_argument("--companding", choices=("mu_law", "none"), default="mu_law", help="8-bit companding")
    p.add_argument("--output-rate", type=int, default=16000, help="output sample rate")

    p = add("synth-corpus", cmd_synth_corpus, "generate a seeded two-collection synthetic corpus",
            [_common(require_manifest=False)])
    p.add_argument("--n-real", type=int, default=100, help="number of genuine (harmonic tone) clips")
    p.add_argument("--n-fake", type=int, default=100, help="number of generated (shaped noise) clips")
    p.add_argument("--duration", type=float, default=1.0, help="clip duration in seconds")
    p.add_argument("--sample-rate", type=int, default=16000, help="sample rate")

    p = add("attribute", cmd_attribute, "blur-path gradient attribution for one clip", [_common(), feats])
    p.add_argument("--model", required=True, help="model JSON written by 'train'")
    p.add_argument("--source-id", help="manifest source id (collection/stem) of the clip")
    p.add_argument("--index", type=int, default=0, help="manifest index of the clip when no id is given")
    p.add_argument("--features", help="attribute a WFC1 feature cache instead of a manifest clip")
    p.add_argument("--sigma-max", type=float, default=5.0, help="blur of the path baseline, in cells")
    p.add_argument("--steps", type=int, default=100, help="integration steps")
    return parser, subs


def _check_paths(parser: argparse.ArgumentParser, args) -> None:
    for name in ("manifest", "model", "features"):
        value = getattr(args, name, None)
        if value is not None and not Path(value).is_file():
            parser.error(f"--{name} {value}: no such file")


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        if not Path(args.config).is_file():
            parser.error(f"--config {args.config}: no such file")
        try:
            overrides = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            parser.error(f"--config {args.config}: {exc}")
        unknown = sorted(k for k in overrides if k.replace("-", "_") not in vars(args))
        if unknown:
            parser.error(f"--config {args.config}: unknown keys {unknown}")
        subs[args.command].set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    _check_paths(subs[args.command], args)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VocodetectError as exc:
        print(f"vocodetect {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
