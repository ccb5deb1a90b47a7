"""``coughscope`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dsp
from .audio_io import (AudioFormatError, load_spectrogram, read_wav, stream_wav, write_feature_dump,
                       write_spectrogram_dump)
from .detector import CoughDetector, DetectorConfig, Recording, detection_spec, train_detector
from .evaluation import cv_table, format_table, run_cv
from .fewshot import EpisodeError, FewShotConfig, FewShotModel, SupportBank, classify_event, train_fewshot
from .manifest import ManifestError, read_label_track, read_manifest
from .nn.serialize import WeightFormatError
from .records import (Demographics, EncounterRecord, RecordError, RecordStore, RiskConfig, apply_rules,
                      emit_record, events_from_detection, risk_score)

log = logging.getLogger("coughscope")

MODEL_DIR_ENV = "COUGHSCOPE_MODEL_DIR"
DEFAULT_MODEL_DIR = "models"


class UsageError(ValueError):
    """Bad option values or config file contents."""


INPUT_ERRORS = (UsageError, AudioFormatError, ManifestError, RecordError, WeightFormatError, EpisodeError,
                FileNotFoundError, IsADirectoryError)


# -- helpers ----------------------------------------------------------------------------

def model_dir() -> Path:
    return Path(os.environ.get(MODEL_DIR_ENV, DEFAULT_MODEL_DIR))


class Timer:
    """Wall-clock per stage, printed to stderr when --timing is set."""

    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.stages: list[tuple[str, float]] = []

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        yield
        self.stages.append((name, time.perf_counter() - t0))

    def report(self, extra: str = "") -> None:
        if not self.enabled:
            return
        for name, sec in self.stages:
            print(f"timing {name}: {sec * 1000:.1f} ms", file=sys.stderr)
        if extra:
            print(extra, file=sys.stderr)


def _channels(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    try:
        return tuple(int(v) for v in str(text).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"channels must be comma-separated integers, got {text!r}") from None


def load_recordings(manifest: str) -> list[Recording]:
    rows = read_manifest(manifest, ("path", "label_track_path"))
    recs = []
    for row in rows:
        try:
            labels = read_label_track(row["label_track_path"])
        except FileNotFoundError:
            raise ManifestError(f"{manifest}:{row['_line']}: label track {row['label_track_path']} not found") from None
        recs.append(Recording(read_wav(row["path"]), labels, row["path"]))
    return recs


def load_class_manifest(manifest: str) -> tuple[list[str], list]:
    rows = read_manifest(manifest, ("class_name", "spectrogram_path"))
    names, specs = [], []
    for row in rows:
        try:
            specs.append(load_spectrogram(row["spectrogram_path"]))
        except (FileNotFoundError, ValueError) as exc:
            raise ManifestError(f"{manifest}:{row['_line']}: {exc}") from None
        names.append(row["class_name"])
    return names, specs


def group_by_class(names, specs) -> dict[str, list]:
    out: dict[str, list] = {}
    for n, s in zip(names, specs):
        out.setdefault(n, []).append(s)
    return out


def detector_config(ns) -> DetectorConfig:
    return DetectorConfig(context=ns.context, channels=ns.channels, pool=ns.pool, epochs=ns.epochs,
                          batch_size=ns.batch_size, base_lr=ns.lr, weight_decay=ns.weight_decay, C=ns.svm_c,
                          gamma=ns.gamma, seed=ns.seed)


def fewshot_config(ns) -> FewShotConfig:
    return FewShotConfig(c=ns.c, k=ns.k, channels=ns.channels, epochs=ns.epochs,
                         episodes_per_epoch=ns.episodes_per_epoch, episodes_per_step=ns.episodes_per_step,
                         base_lr=ns.lr, weight_decay=ns.weight_decay, seed=ns.seed)


def _event_json(ev) -> dict:
    return {"start_s": round(ev.start_s, 6), "end_s": round(ev.end_s, 6), "frame_start": ev.frame_indices.start,
            "frame_stop": ev.frame_indices.stop, "peak_score": ev.peak_score}


def run_detection(detector: CoughDetector, wav: str, stream: bool, chunk: int):
    """(events, per-frame latencies or None). Streaming reads the file chunk by chunk."""
    if not stream:
        return detector.detect(read_wav(wav)), None
    chunks = stream_wav(wav, chunk)
    first = next(chunks, None)
    if first is None:
        raise AudioFormatError(f"{wav}: no audio samples")
    if first[1] != dsp.TARGET_RATE_HZ:
        # resampling is not chunk-local; fall back to whole-file resampling, still scored incrementally
        buf = read_wav(wav)
        pieces = (buf.samples[i:i + chunk] for i in range(0, len(buf), chunk))
    else:
        pieces = (c for c, _ in [first, *chunks])
    result = detector.stream(pieces)
    return result.events, result.latencies_s


# -- commands -------------------------------------------------------------------------

def cmd_features(ns) -> int:
    timer = Timer(ns.timing)
    with timer.stage("read"):
        buf = read_wav(ns.wav)
    with timer.stage("features"):
        if ns.kind == "spectrogram":
            write_spectrogram_dump(ns.out, dsp.spectrogram(buf))
            n = dsp.FrameSpec.feature_frames().n_frames(len(buf))
        else:
            n = write_feature_dump(ns.out, buf)
    print(f"wrote {n} frames to {ns.out}")
    timer.report()
    return 0


def cmd_detect(ns) -> int:
    timer = Timer(ns.timing)
    with timer.stage("load model"):
        detector = CoughDetector.load(ns.detector)
    with timer.stage("detect"):
        events, latencies = run_detection(detector, ns.wav, ns.stream, ns.chunk)
    print("start_s\tend_s\tscore")
    for ev in events:
        print(f"{ev.start_s:.3f}\t{ev.end_s:.3f}\t{ev.peak_score:.4f}")
    print(f"{len(events)} event(s)")
    if ns.out:
        Path(ns.out).write_text(json.dumps({"wav": str(ns.wav), "events": [_event_json(e) for e in events]},
                                           indent=2) + "\n")
    extra = ""
    if latencies:
        lat = np.asarray(latencies) * 1000
        extra = f"per-frame latency: mean {lat.mean():.2f} ms, max {lat.max():.2f} ms over {len(lat)} frames"
    timer.report(extra)
    return 0


def cmd_train_detector(ns) -> int:
    timer = Timer(ns.timing)
    with timer.stage("load corpus"):
        recordings = load_recordings(ns.manifest)
    with timer.stage("train"):
        detector, info = train_detector(recordings, detector_config(ns))
    detector.save(ns.out)
    print(f"trained on {info['n_frames']} frames, {info['n_support']} support vectors; "
          f"loss {info['initial_loss']:.4f} -> {info['epoch_losses'][-1]:.4f}; saved to {ns.out}")
    timer.report()
    return 0


def cmd_train_fewshot(ns) -> int:
    timer = Timer(ns.timing)
    with timer.stage("load corpus"):
        dataset = group_by_class(*load_class_manifest(ns.manifest))
    with timer.stage("train"):
        model, info = train_fewshot(dataset, fewshot_config(ns))
    model.save(ns.out)
    print(f"trained on {len(dataset)} classes; loss {info['epoch_losses'][0]:.4f} -> "
          f"{info['epoch_losses'][-1]:.4f}; saved to {ns.out}")
    timer.report()
    return 0


def cmd_classify(ns) -> int:
    timer = Timer(ns.timing)
    with timer.stage("load"):
        model = FewShotModel.load(ns.fewshot)
        bank = SupportBank.build(model, group_by_class(*load_class_manifest(ns.bank)))
        spec = load_spectrogram(ns.input)
    with timer.stage("classify"):
        pred, scores = classify_event(spec, bank, model)
    for s in scores:
        print(f"{s.class_name}\t{s.probability:.6f}\t{s.similarity:.6f}")
    print(f"predicted: {pred}")
    timer.report()
    return 0


def session_id_for(wav: str, temperature, timestamp: str) -> str:
    h = hashlib.sha256(Path(wav).read_bytes())
    h.update(f"|{temperature}|{timestamp}".encode())
    return h.hexdigest()[:16]


def cmd_session(ns) -> int:
    timer = Timer(ns.timing)
    rules = RiskConfig(ns.fever_threshold, ns.risk_threshold, ns.covid_class)
    with timer.stage("load models"):
        detector = CoughDetector.load(ns.detector)
        model = FewShotModel.load(ns.fewshot)
        bank = SupportBank.build(model, group_by_class(*load_class_manifest(ns.bank)))
    if rules.covid_class not in bank.class_names:
        raise UsageError(f"support bank has no class {rules.covid_class!r}")
    with timer.stage("detect"):
        events, latencies = run_detection(detector, ns.wav, ns.stream, ns.chunk)
    with timer.stage("classify"):
        entries = events_from_detection(events, [classify_event(e, bank, model) for e in events])
    timestamp = ns.timestamp or dt.datetime.now(dt.timezone.utc).replace(microsecond=0).isoformat()
    sid = ns.session_id or session_id_for(ns.wav, ns.temperature, timestamp)
    demo = Demographics(ns.age, ns.sex) if ns.age is not None or ns.sex is not None else None
    record = EncounterRecord(session_id=sid, timestamp=timestamp, temperature_c=ns.temperature, demographics=demo,
                             audio_refs=(str(ns.wav),), events=entries, risk_score=risk_score(entries, rules.covid_class),
                             location_note=ns.location_note)
    record = apply_rules(record, rules)
    path = RecordStore(ns.out_dir).append(record)
    for e in record.events:
        print(f"event {e.start_s:.3f}-{e.end_s:.3f} s: {e.predicted_class} "
              f"(p_{rules.covid_class}={e.probability_of(rules.covid_class):.3f})")
    print(f"risk score: {record.risk_score:.3f}")
    for a in record.alerts:
        print(f"ALERT {a.kind.value}: {a.detail}")
    for p in record.prompts_issued:
        print(f"PROMPT: {p}")
    if record.incomplete:
        print("record incomplete: no temperature reading")
    print(f"record written to {path}")
    extra = ""
    if latencies:
        extra = f"per-frame latency: max {max(latencies) * 1000:.2f} ms over {len(latencies)} frames"
    timer.report(extra)
    return 0


def _eval_detector(ns):
    recordings = load_recordings(ns.manifest)
    det_spec = detection_spec()
    ids, labels = [], []
    for r, rec in enumerate(recordings):
        n = min(det_spec.n_frames(len(rec.buffer)), len(rec.labels))
        for k in range(n):
            if rec.labels[k] >= 0:
                ids.append((r, k))
                labels.append("cough" if rec.labels[k] == 1 else "other")
    config = detector_config(ns)

    def train_fn(train_ids):
        frames: dict[int, list[int]] = {}
        for r, k in train_ids:
            frames.setdefault(r, []).append(k)
        rs = sorted(frames)
        return train_detector([recordings[r] for r in rs], config, [frames[r] for r in rs])[0]

    def eval_fn(model, test_ids):
        scores = {}
        for r in sorted({r for r, _ in test_ids}):
            scores[r] = model.frame_scores(recordings[r].buffer)[1]
        return ["cough" if scores[r][k] > 0 else "other" for r, k in test_ids]

    result = run_cv(ids, labels, train_fn, eval_fn, ["cough"], ns.folds, ns.seed, ns.stratify, ("cough", "other"))
    return cv_table(result, ("tpr", "fpr", "accuracy"))


def _eval_fewshot(ns):
    names, specs = load_class_manifest(ns.manifest)
    classes = sorted(set(names))
    config = fewshot_config(ns)
    rng = np.random.default_rng(ns.seed)

    def train_fn(train_ids):
        data = group_by_class([names[i] for i in train_ids], [specs[i] for i in train_ids])
        eligible = [c for c in data if len(data[c]) > config.k]
        cfg = FewShotConfig(**{**config.__dict__, "c": min(config.c, len(eligible))})
        model, _ = train_fewshot({c: data[c] for c in eligible}, cfg)
        support = {}
        for c in classes:
            pick = rng.permutation(len(data[c]))[: config.k]
            support[c] = [data[c][j] for j in pick]
        return model, SupportBank.build(model, support)

    def eval_fn(trained, test_ids):
        model, bank = trained
        return [classify_event(specs[i], bank, model)[0] for i in test_ids]

    result = run_cv(list(range(len(names))), names, train_fn, eval_fn, classes, ns.folds, ns.seed, ns.stratify,
                    classes)
    top1 = result.mean[classes[0]]["top1"]
    return cv_table(result) + format_table({"overall": {"top1": top1}}, ("top1",))


def cmd_eval(ns) -> int:
    timer = Timer(ns.timing)
    with timer.stage("cross-validation"):
        table = _eval_detector(ns) if ns.task == "detector" else _eval_fewshot(ns)
    sys.stdout.write(table)
    if ns.out:
        Path(ns.out).write_text(table)
    timer.report()
    return 0


def cmd_records_query(ns) -> int:
    store = Path(ns.store)
    if not store.is_dir():
        raise FileNotFoundError(f"{store}: no record store")
    for row in RecordStore(store).query(ns.session_id, ns.min_risk, ns.min_temperature):
        print(json.dumps(row, sort_keys=True))
    return 0


# -- parser ------------------------------------------------------------------------------

def _add_detector_training(p):
    p.add_argument("--epochs", type=int, default=60, help="training epochs")
    p.add_argument("--context", type=int, default=16, help="sub-frames of context per detection frame")
    p.add_argument("--channels", type=_channels, default=(16, 32, 64, 128), help="conv channels per block")
    p.add_argument("--pool", type=int, default=2, help="max-pool size per block")
    p.add_argument("--batch-size", type=int, default=16, help="frames per SGD step")
    p.add_argument("--lr", type=float, default=0.01, help="base learning rate")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="L2 weight decay")
    p.add_argument("--svm-c", type=float, default=1.0, help="SVM box constraint")
    p.add_argument("--gamma", type=float, default=None, help="RBF gamma (default 1/(d*var))")


def _add_fewshot_training(p):
    p.add_argument("--c", type=int, default=5, help="classes per training episode")
    p.add_argument("--k", type=int, default=5, help="support examples per class")
    p.add_argument("--epochs", type=int, default=60, help="training epochs")
    p.add_argument("--episodes-per-epoch", type=int, default=40, help="episodes per epoch")
    p.add_argument("--episodes-per-step", type=int, default=4, help="episodes averaged per SGD step")
    p.add_argument("--channels", type=_channels, default=(16, 32, 64, 128), help="conv channels per block")
    p.add_argument("--lr", type=float, default=0.01, help="base learning rate")
    p.add_argument("--weight-decay", type=float, default=1e-4, help="L2 weight decay")


def _add_model_paths(p, detector=False, fewshot=False, bank=False):
    if detector:
        p.add_argument("--detector", default=None, help=f"detector bundle (default ${MODEL_DIR_ENV}/detector)")
    if fewshot:
        p.add_argument("--fewshot", default=None, help=f"few-shot bundle (default ${MODEL_DIR_ENV}/fewshot)")
    if bank:
        p.add_argument("--bank", default=None,
                       help=f"support-bank manifest class_name,spectrogram_path (default ${MODEL_DIR_ENV}/bank.csv)")


def _add_stream(p):
    p.add_argument("--stream", action="store_true", help="score frames incrementally while reading the file")
    p.add_argument("--chunk", type=int, default=2560, help="samples per streaming read")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of option defaults")
    common.add_argument("--timing", action="store_true", default=argparse.SUPPRESS,
                        help="report stage timing and per-frame latency on stderr")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS, help="more logging")
    parser = argparse.ArgumentParser(prog="coughscope", description="Cough detection and few-shot cough classification.",
                                     parents=[common], formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs: dict[str, argparse.ArgumentParser] = {}

    def add(name, handler, help_):
        p = sub.add_parser(name, help=help_, description=help_, parents=[common], formatter_class=fmt)
        p.set_defaults(handler=handler)
        subs[name] = p
        return p

    p = add("features", cmd_features, "dump per-sub-frame features (or a spectrogram) of a WAV file")
    p.add_argument("wav")
    p.add_argument("out")
    p.add_argument("--kind", choices=("features", "spectrogram"), default="features", help="what to dump")

    p = add("detect", cmd_detect, "detect cough events in a WAV file")
    p.add_argument("wav")
    p.add_argument("--out", default=None, help="write the event list as JSON here")
    _add_model_paths(p, detector=True)
    _add_stream(p)

    p = add("train-detector", cmd_train_detector, "train the detector from a path,label_track_path manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help=f"output bundle (default ${MODEL_DIR_ENV}/detector)")
    _add_detector_training(p)

    p = add("train-fewshot", cmd_train_fewshot, "train the few-shot classifier from a class_name,spectrogram_path manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help=f"output bundle (default ${MODEL_DIR_ENV}/fewshot)")
    _add_fewshot_training(p)

    p = add("classify", cmd_classify, "classify one cough (WAV or spectrogram dump) against a support bank")
    p.add_argument("input")
    _add_model_paths(p, fewshot=True, bank=True)

    p = add("session", cmd_session, "run one screening encounter and store its record")
    p.add_argument("wav")
    p.add_argument("--temperature", type=float, default=None, help="body temperature in C (omitted: record incomplete)")
    p.add_argument("--out-dir", default="records", help="record store directory")
    p.add_argument("--session-id", default=None, help="default: hash of audio, temperature and timestamp")
    p.add_argument("--timestamp", default=None, help="ISO-8601 time of the encounter (default: now, UTC)")
    p.add_argument("--age", type=int, default=None)
    p.add_argument("--sex", default=None)
    p.add_argument("--location-note", default="", help="free-text location note")
    p.add_argument("--fever-threshold", type=float, default=37.3, help="temperature alert threshold in C")
    p.add_argument("--risk-threshold", type=float, default=0.7, help="risk score alert threshold")
    p.add_argument("--covid-class", default="covid19", help="support-bank class used for the risk score")
    _add_model_paths(p, detector=True, fewshot=True, bank=True)
    _add_stream(p)

    p = add("eval", cmd_eval, "k-fold cross-validation on a manifest")
    p.add_argument("manifest")
    p.add_argument("--task", choices=("detector", "fewshot"), required=True)
    p.add_argument("--folds", type=int, default=10, help="number of folds")
    p.add_argument("--no-stratify", dest="stratify", action="store_false", help="plain random folds")
    p.add_argument("--out", default=None, help="also write the table here")
    _add_detector_training(p)
    p.add_argument("--c", type=int, default=5, help="classes per training episode (fewshot)")
    p.add_argument("--k", type=int, default=5, help="support examples per class (fewshot)")
    p.add_argument("--episodes-per-epoch", type=int, default=40, help="episodes per epoch (fewshot)")
    p.add_argument("--episodes-per-step", type=int, default=4, help="episodes per SGD step (fewshot)")

    p = sub.add_parser("records", help="query the record store", parents=[common])
    rsub = p.add_subparsers(dest="records_command", required=True, metavar="ACTION")
    q = rsub.add_parser("query", help="list index entries matching filters", parents=[common], formatter_class=fmt)
    q.set_defaults(handler=cmd_records_query)
    q.add_argument("--store", default="records", help="record store directory")
    q.add_argument("--session-id", default=None)
    q.add_argument("--min-risk", type=float, default=None)
    q.add_argument("--min-temperature", type=float, default=None)
    subs["records query"] = q
    return parser, subs


def _command_key(ns) -> str:
    return "records query" if ns.command == "records" else ns.command


def load_config(path: str, command: str, sub: argparse.ArgumentParser) -> dict:
    """Top-level keys apply to every command; a key named after the command holds overrides for it."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    scoped = data.get(command, {})
    flat = {k: v for k, v in data.items() if not isinstance(v, dict)}
    flat.update(scoped)
    known = {a.dest for a in sub._actions} | {"seed", "timing"}
    out = {}
    for key, value in flat.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"{path}: unknown option {key!r} for command {command!r}")
        out[dest] = _channels(value) if dest == "channels" else value
    return out


def materialize(ns) -> argparse.Namespace:
    """Fill every remaining default so the effective configuration is explicit."""
    for name, default in (("seed", 0), ("timing", False), ("verbose", 0), ("config", None)):
        if not hasattr(ns, name):
            setattr(ns, name, default)
    root = model_dir()
    for name, sub_path in (("detector", "detector"), ("fewshot", "fewshot"), ("bank", "bank.csv")):
        if hasattr(ns, name) and getattr(ns, name) is None:
            setattr(ns, name, str(root / sub_path))
    if ns.command in ("train-detector", "train-fewshot") and ns.out is None:
        ns.out = str(root / ("detector" if ns.command == "train-detector" else "fewshot"))
    if ns.command in ("train-fewshot", "eval") and getattr(ns, "c", 2) < 2:
        raise UsageError("--c must be at least 2")
    if getattr(ns, "epochs", 1) < 1:
        raise UsageError("--epochs must be at least 1")
    if ns.command == "eval" and ns.folds < 2:
        raise UsageError("--folds must be at least 2")
    return ns


def parse(argv: list[str]) -> argparse.Namespace:
    parser, subs = build_parser()
    ns = parser.parse_args(argv)
    config_path = getattr(ns, "config", None)
    if config_path:
        sub = subs[_command_key(ns)]
        sub.set_defaults(**load_config(config_path, _command_key(ns), sub))
        ns = parser.parse_args(argv)
    return materialize(ns)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        ns = parse(argv)
    except SystemExit as exc:  # argparse usage errors exit with 2, --help with 0
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"coughscope: error: {exc}", file=sys.stderr)
        return 2
    level = logging.DEBUG if ns.verbose > 1 else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("coughscope")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False
    effective = {k: v for k, v in sorted(vars(ns).items()) if k != "handler"}
    log.info("effective config: %s", json.dumps(effective, default=str, sort_keys=True))
    try:
        return ns.handler(ns)
    except INPUT_ERRORS as exc:
        print(f"coughscope: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"coughscope: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
