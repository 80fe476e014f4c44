"""Command-line entry point.

Subcommands::

    iobba synth        generate synthetic labeled traces (CSV)
    iobba fit          fit a detector model from labeled traces
    iobba detect-eval  confusion matrix of a model on labeled traces
    iobba simulate     run an experiment grid, write logs, QoE and aggregates

Every subcommand accepts ``--config FILE``, ``--seed N`` and ``--out-dir DIR``;
flags override values from the config file. The config is YAML::

    traces: [traces/a.csv, traces/b.csv]   # paths or globs, relative to the config file
    # traces: {preset: transition, count: 30}
    ladder:
      segment_duration_s: 4
      representations:
        - {resolution: 320x240, rate_bps: 129000}
        - {resolution: 1920x1080, rate_bps: 3993000}
    bmax_s: [60, 150, 240]
    k_users: [1, 2, 4, 8]
    policies: [baseline, iobba-true, iobba-detected]
    detector_model: model.txt   # or fit_from_traces: true
    video_duration_s: 596
    startup_threshold_s: 8
    m: 3
    network_params:
      4G: {measured_bandwidth_hz: 15000, data_bandwidth_hz: 18000000, sensitivity_threshold_dbm: -94}
    out_dir: results
    seed: 0
    workers: 1
"""

from __future__ import annotations

import argparse
import glob
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import yaml

from . import detector as det
from .errors import ConfigInvalid, IobbaError
from .policy import DEFAULT_LADDER, DEFAULT_M, Ladder
from .qoe import aggregate, aggregates_to_csv, qoe_from_log, reports_to_csv
from .radio import DEFAULT_PARAMS, MAX_USERS, NetworkParams
from .simulator import (
    VIDEO_DURATION_S,
    PolicyKind,
    SessionConfig,
    dumps_log,
    loads_log,
    log_filename,
    run_experiment,
)
from .trace import NetworkType, Trace, concat_samples, labels_of, read_trace, transition_corpus, write_trace

log = logging.getLogger("iobba")

GROUP_BY = ("policy", "k_users", "b_max")


@dataclass
class ExperimentConfig:
    traces: list = field(default_factory=list)
    trace_preset: Optional[dict] = None
    ladder: Ladder = DEFAULT_LADDER
    bmax_s: list = field(default_factory=lambda: [150.0])
    k_users: list = field(default_factory=lambda: [1])
    policies: list = field(default_factory=lambda: [PolicyKind.BASELINE])
    detector_model: Optional[Path] = None
    fit_from_traces: bool = False
    video_duration_s: float = VIDEO_DURATION_S
    startup_threshold_s: float = 8.0
    m: int = DEFAULT_M
    network_params: dict = field(default_factory=lambda: dict(DEFAULT_PARAMS))
    out_dir: Path = Path("out")
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if not (self.traces or self.trace_preset):
            raise ConfigInvalid("traces", "no traces given")
        for name in ("bmax_s", "k_users", "policies"):
            if not getattr(self, name):
                raise ConfigInvalid(name, "must be a non-empty list")
        for k in self.k_users:
            if not (isinstance(k, int) and 1 <= k <= MAX_USERS):
                raise ConfigInvalid("k_users", f"values must be integers in [1, {MAX_USERS}], got {k!r}")
        for p in self.traces:
            if not Path(p).is_file():
                raise ConfigInvalid("traces", f"no such file {p}")
        if PolicyKind.IOBBA_DETECTED in self.policies:
            if self.detector_model is None and not self.fit_from_traces:
                raise ConfigInvalid("detector_model", "iobba-detected needs detector_model or fit_from_traces")
            if self.detector_model is not None and not self.detector_model.is_file():
                raise ConfigInvalid("detector_model", f"no such file {self.detector_model}")


def _as_list(value):
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _parse_ladder(spec) -> Ladder:
    try:
        reps = spec["representations"]
        return Ladder.from_rates(
            [float(r["rate_bps"]) for r in reps],
            float(spec.get("segment_duration_s", 4.0)),
            [str(r.get("resolution", "")) for r in reps],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid("ladder", f"bad ladder definition ({exc})") from None


def _parse_network_params(spec) -> dict:
    params = dict(DEFAULT_PARAMS)
    if not isinstance(spec, dict):
        raise ConfigInvalid("network_params", "must be a mapping keyed by 2G/3G/4G")
    for key, v in spec.items():
        try:
            params[NetworkType.parse(str(key))] = NetworkParams(
                float(v["measured_bandwidth_hz"]), float(v["data_bandwidth_hz"]),
                float(v["sensitivity_threshold_dbm"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigInvalid("network_params", f"bad entry for {key}: {exc}") from None
    return params


def _resolve_paths(patterns: Sequence[str], base: Path) -> list[Path]:
    out: list[Path] = []
    for pat in patterns:
        p = Path(pat)
        p = p if p.is_absolute() else base / p
        matches = sorted(glob.glob(str(p)))
        out.extend(Path(m) for m in matches) if matches else out.append(p)
    return out


def load_config(path: Optional[Path]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None:
        return cfg
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigInvalid("config", str(exc)) from None
    if not isinstance(raw, dict):
        raise ConfigInvalid("config", "top level must be a mapping")
    known = {"traces", "ladder", "bmax_s", "k_users", "policies", "detector_model", "fit_from_traces",
             "video_duration_s", "startup_threshold_s", "m", "network_params", "out_dir", "seed", "workers"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigInvalid(sorted(unknown)[0], "unknown config key")
    base = Path(path).resolve().parent

    traces = raw.get("traces")
    if isinstance(traces, dict):
        if traces.get("preset") != "transition":
            raise ConfigInvalid("traces", "only the 'transition' preset is available")
        cfg.trace_preset = dict(traces)
    elif traces is not None:
        cfg.traces = _resolve_paths([str(t) for t in _as_list(traces)], base)
    if "ladder" in raw:
        cfg.ladder = _parse_ladder(raw["ladder"])
    casts = {
        "bmax_s": lambda v: [float(b) for b in _as_list(v)],
        "k_users": _as_list,
        "policies": lambda v: [PolicyKind(p) for p in _as_list(v)],
        "video_duration_s": float,
        "startup_threshold_s": float,
        "m": int,
        "seed": int,
        "workers": int,
        "fit_from_traces": bool,
    }
    for key, cast in casts.items():
        if key in raw:
            try:
                setattr(cfg, key, cast(raw[key]))
            except (TypeError, ValueError) as exc:
                raise ConfigInvalid(key, str(exc)) from None
    if raw.get("detector_model"):
        cfg.detector_model = _resolve_paths([str(raw["detector_model"])], base)[0]
    if "network_params" in raw:
        cfg.network_params = _parse_network_params(raw["network_params"])
    if "out_dir" in raw:
        out = Path(raw["out_dir"])
        cfg.out_dir = out if out.is_absolute() else base / out
    return cfg


def _merged_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if getattr(args, "traces", None):
        cfg.traces = _resolve_paths(args.traces, Path.cwd())
        cfg.trace_preset = None
    return cfg


def _load_traces(cfg: ExperimentConfig) -> list[Trace]:
    if cfg.trace_preset:
        preset = dict(cfg.trace_preset)
        preset.pop("preset")
        count = int(preset.pop("count", 30))
        seed = int(preset.pop("seed", cfg.seed))
        return transition_corpus(count, seed, **preset)
    return [read_trace(p) for p in cfg.traces]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> int:
    cfg = _merged_config(args)
    overrides = dict(cfg.trace_preset or {})
    overrides.pop("preset", None)
    overrides.pop("seed", None)
    count = args.count if args.count is not None else int(overrides.pop("count", 30))
    overrides.pop("count", None)
    traces = transition_corpus(count, cfg.seed, prefix=args.prefix, **overrides)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for tr in traces:
        path = cfg.out_dir / f"{tr.id}.csv"
        write_trace(tr, path)
        if read_trace(path).samples != tr.samples:
            raise IobbaError(f"{path} did not read back identically")
    print(f"wrote {len(traces)} traces to {cfg.out_dir}")
    return 0


def _model_path(args, cfg: ExperimentConfig) -> Path:
    if args.model is not None:
        return args.model
    if cfg.detector_model is not None:
        return cfg.detector_model
    return cfg.out_dir / "model.txt"


def cmd_fit(args) -> int:
    cfg = _merged_config(args)
    traces = _load_traces(cfg)
    model = det.fit_detector(concat_samples(traces))
    path = _model_path(args, cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    det.save_model(model, path)
    if det.load_model(path) != model:
        raise IobbaError(f"{path} did not reload identically")
    print(f"fitted model from {len(traces)} traces -> {path}")
    return 0


def cmd_detect_eval(args) -> int:
    cfg = _merged_config(args)
    traces = _load_traces(cfg)
    model = det.load_model(_model_path(args, cfg))
    predicted, truth = [], []
    for tr in traces:
        predicted.extend(state for _, state in det.detect_series(model, tr, power_only=args.power_only))
        truth.extend(labels_of(tr))
    cm = det.confusion_matrix(predicted, truth)
    p = cm.probabilities
    print("P(detected|true)   true=indoor  true=outdoor")
    for d in (0, 1):
        name = "detected=indoor " if d == 0 else "detected=outdoor"
        print(f"{name}   {p[d, 0]:11.4f}  {p[d, 1]:12.4f}")
    print(f"accuracy {cm.accuracy:.4f} over {cm.total} samples")
    name = "confusion_power_only.csv" if args.power_only else "confusion.csv"
    _write(cfg.out_dir / name, cm.to_csv())
    return 0


def cmd_simulate(args) -> int:
    cfg = _merged_config(args)
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.validate()
    traces = _load_traces(cfg)
    model = None
    if PolicyKind.IOBBA_DETECTED in cfg.policies:
        model = (det.load_model(cfg.detector_model) if cfg.detector_model is not None
                 else det.fit_detector(concat_samples(traces)))
    base = SessionConfig(
        ladder=cfg.ladder,
        video_duration=cfg.video_duration_s,
        startup_threshold=cfg.startup_threshold_s,
        m=cfg.m,
        network_params=cfg.network_params,
    )
    logs = run_experiment(traces, cfg.k_users, cfg.bmax_s, cfg.policies, base, model, cfg.workers)

    log_dir = cfg.out_dir / "logs"
    for session in logs:
        path = log_dir / log_filename(session.tag)
        text = dumps_log(session)
        _write(path, text)
        if dumps_log(loads_log(path.read_text(encoding="utf-8"))) != text:
            raise IobbaError(f"{path} did not read back identically")
    reports = [qoe_from_log(s) for s in logs]
    _write(cfg.out_dir / "qoe.csv", reports_to_csv(reports))
    stats = aggregate(reports, GROUP_BY)
    _write(cfg.out_dir / "aggregate.csv", aggregates_to_csv(stats, GROUP_BY))
    exhausted = sum(s.trace_exhausted for s in logs)
    capped = sum(s.capped for s in logs)
    if exhausted:
        log.warning("%d sessions outlasted their trace (last rate held)", exhausted)
    if capped:
        log.warning("%d sessions hit the wall-time cap", capped)
    print(f"simulated {len(logs)} sessions -> {cfg.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--seed", type=int, help="random seed (overrides config)")
    common.add_argument("--out-dir", type=Path, help="output directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="iobba", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic outdoor-to-indoor traces")
    p.add_argument("--count", type=int, help="number of traces (default 30)")
    p.add_argument("--prefix", default="transition", help="trace id prefix")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", parents=[common], help="fit a detector model from labeled traces")
    p.add_argument("traces", nargs="*", help="trace CSV files (default: from config)")
    p.add_argument("--model", type=Path, help="output model path (default OUT_DIR/model.txt)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("detect-eval", parents=[common], help="evaluate a detector model on labeled traces")
    p.add_argument("traces", nargs="*", help="trace CSV files (default: from config)")
    p.add_argument("--model", type=Path, help="model path")
    p.add_argument("--power-only", action="store_true", help="ignore the confidence radius")
    p.set_defaults(func=cmd_detect_eval)

    p = sub.add_parser("simulate", parents=[common], help="run the experiment grid")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"error: invalid config field {exc}", file=sys.stderr)
        return 2
    except (IobbaError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
