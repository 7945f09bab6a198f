"""Command-line entry points.

Every command prints machine-parsable CSV on stdout, logs to stderr, and exits
with 0 (ok), 2 (bad input), 3 (config or checkpoint mismatch) or 4 (numeric
failure).
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (
    STEP_SECONDS,
    DataError,
    SpeedSeries,
    ZScore,
    chronological_split,
    fit_zscore,
    format_time,
    load_series,
    make_windows,
    parse_time,
    synth_diffusion,
    write_series,
)
from .dconv import filter_weights, write_filter_weights
from .graph import GraphError, build_adjacency, read_distances, read_graph, read_node_ids, write_graph
from .metrics import DEFAULT_HORIZONS, MetricError, format_report, historical_average, horizon_report
from .seq2seq import ConfigMismatch, ModelConfig, NumericalError, TrainConfig, build_model, load_model, predict, predict_all, train

log = logging.getLogger("dcrnn")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    pass


class ConfigError(Exception):
    pass


# ----------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    series: str = ""
    graph: str = ""
    distances: str = ""
    nodes: str = ""
    kappa: float = math.inf
    out_dir: str = "run"
    missing_value: float = 0.0
    split: tuple = (0.7, 0.1, 0.2)
    max_train_samples: int = 0  # 0 = all
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if not self.series:
            raise ConfigError("paths.series is required")
        if not self.graph and not (self.distances and self.nodes):
            raise ConfigError("set paths.graph or both paths.distances and paths.nodes")
        for p in (self.series, self.graph, self.distances, self.nodes):
            if p and not Path(p).exists():
                raise InputError(f"no such file: {p}")


def _coerce(kind, text: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {text!r}")
        return low in ("true", "1", "yes")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind == "float?":
        return None if text.lower() in ("", "none") else float(text)
    return text


_MODEL_TYPES = {f.name: f.type for f in fields(ModelConfig)}
_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_KINDS = {"int": int, "float": float, "bool": bool, "str": str, "float | None": "float?"}
_PATH_KEYS = {"series", "graph", "distances", "nodes", "out_dir"}


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    """Read an INI config (sections ``paths``, ``data``, ``model``, ``train``) and apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            raise InputError(f"no such config file: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value)
    base = Path(path).parent if path else Path(".")
    cfg = RunConfig()
    model_kw, train_kw = {}, {}
    try:
        for section in parser.sections():
            for key, value in parser.items(section):
                if section == "paths" and key in _PATH_KEYS:
                    p = Path(value)
                    setattr(cfg, key, str(p if p.is_absolute() or not value else base / p))
                elif section == "data" and key == "missing_value":
                    cfg.missing_value = float(value)
                elif section == "data" and key == "split":
                    cfg.split = tuple(float(x) for x in value.split(","))
                elif section == "data" and key == "max_train_samples":
                    cfg.max_train_samples = int(value)
                elif section == "graph" and key == "kappa":
                    cfg.kappa = float(value)
                elif section == "model" and key in _MODEL_TYPES:
                    model_kw[key] = _coerce(_KINDS[_MODEL_TYPES[key]], value)
                elif section == "train" and key in _TRAIN_TYPES:
                    train_kw[key] = _coerce(_KINDS[_TRAIN_TYPES[key]], value)
                else:
                    raise ConfigError(f"unknown config key {section}.{key}")
        cfg.model = ModelConfig(**model_kw)
        cfg.train = TrainConfig(**train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _graph_from(cfg: RunConfig):
    if cfg.graph:
        return read_graph(cfg.graph)
    return build_adjacency(read_distances(cfg.distances), read_node_ids(cfg.nodes), cfg.kappa)


def _check_nodes(series: SpeedSeries, graph) -> None:
    if tuple(series.node_ids) != tuple(graph.node_ids):
        raise ConfigError(
            f"series columns {list(series.node_ids)[:5]}... do not match graph nodes {list(graph.node_ids)[:5]}..."
        )


def _load_checkpointed(cfg: RunConfig, checkpoint: str, graph):
    if not Path(checkpoint).exists():
        raise InputError(f"no such checkpoint: {checkpoint}")
    model, meta = load_model(checkpoint, cfg.model, graph)
    if "zscore" not in meta:
        raise ConfigError("checkpoint has no normalization statistics")
    if meta.get("node_ids", list(graph.node_ids)) != list(graph.node_ids):
        raise ConfigMismatch("checkpoint node ids differ from the graph's")
    return model, meta, ZScore(**meta["zscore"])


# ----------------------------------------------------------------------------
# commands


def _out_path(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_build_graph(args) -> int:
    g = build_adjacency(read_distances(args.distances), read_node_ids(args.nodes), args.kappa)
    write_graph(g, _out_path(args.out))
    print("n,nnz,sigma,kappa")
    print(f"{g.n},{g.weights.nnz},{g.kernel_sigma!r},{g.kernel_kappa!r}")
    return EXIT_OK


def cmd_synth(args) -> int:
    g = read_graph(args.graph)
    s = synth_diffusion(g, args.steps, noise_std=args.noise_std, seed=args.seed, lam=args.lam)
    write_series(_out_path(args.out), s)
    print("steps,nodes,mean,std")
    print(f"{s.steps},{s.n_nodes},{float(s.values.mean())!r},{float(s.values.std())!r}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    cfg.validate()
    graph = _graph_from(cfg)
    series = load_series(cfg.series, cfg.missing_value)
    _check_nodes(series, graph)
    tr, va, _ = chronological_split(series.steps, cfg.split)
    z = fit_zscore(series, tr)
    m = cfg.model
    train_w = make_windows(series, m.history, m.horizon, tr, z, m.time_of_day)
    val_w = make_windows(series, m.history, m.horizon, va, z, m.time_of_day)
    if cfg.max_train_samples:
        train_w = train_w.subset(np.arange(min(cfg.max_train_samples, len(train_w))))
    if len(train_w) == 0 or len(val_w) == 0:
        raise InputError(f"series too short: {len(train_w)} train and {len(val_w)} validation windows")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(m, graph, seed=cfg.train.seed)
    meta = {"zscore": {"mean": z.mean, "std": z.std}, "node_ids": list(graph.node_ids), "train_config": vars(cfg.train)}
    ckpt = out / "checkpoint.ckpt"
    report = train(model, train_w, val_w, cfg.train, checkpoint=ckpt, meta=meta)
    report.write(out / "train_report.csv")
    from . import plotting

    plotting.learning_curves(report.records, out / "learning_curves.png")
    sys.stdout.write(report.to_csv())
    log.info("best epoch %d, %s, %.1fs; wrote %s", report.best_epoch, report.stop_reason, report.wall_clock, ckpt)
    return EXIT_OK


def _eval_files(args) -> int:
    truth = load_series(args.truth, args.missing_value)
    pred = load_series(args.pred, None)
    if truth.node_ids != pred.node_ids:
        raise InputError("truth and prediction files have different columns")
    rows = np.searchsorted(truth.timestamps, pred.timestamps)
    ok = (rows < truth.steps) & (truth.timestamps[np.minimum(rows, truth.steps - 1)] == pred.timestamps)
    if not ok.all():
        raise InputError("prediction timestamps missing from the truth file")
    lead = (pred.timestamps - pred.timestamps[0]) // STEP_SECONDS + 1
    t = truth.values[rows][None]
    m = truth.mask[rows][None] & pred.mask[None]
    horizons = [h for h in DEFAULT_HORIZONS if h <= len(lead)] or list(range(1, len(lead) + 1))
    if np.any(lead != np.arange(1, len(lead) + 1)):
        raise InputError("prediction rows must be consecutive 5-minute steps")
    records = horizon_report(t, pred.values[None], m, horizons)
    sys.stdout.write(format_report(records))
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.truth or args.pred:
        if not (args.truth and args.pred):
            raise InputError("--truth and --pred must be given together")
        return _eval_files(args)
    if not args.checkpoint:
        raise InputError("--checkpoint is required unless --truth/--pred are given")
    cfg = load_run_config(args.config, _overrides(args))
    cfg.validate()
    graph = _graph_from(cfg)
    series = load_series(cfg.series, cfg.missing_value)
    _check_nodes(series, graph)
    model, meta, z = _load_checkpointed(cfg, args.checkpoint, graph)
    spans = dict(zip(("train", "val", "test"), chronological_split(series.steps, cfg.split)))
    m = cfg.model
    w = make_windows(series, m.history, m.horizon, spans[args.split], z, m.time_of_day)
    if len(w) == 0:
        raise InputError(f"{args.split} split has no complete windows")
    pred = z.invert(predict_all(model, w))
    truth = z.invert(w.targets[..., 0])
    horizons = [h for h in DEFAULT_HORIZONS if h <= m.horizon]
    records = horizon_report(truth, pred, w.target_mask, horizons)
    rows = [("DCRNN", r) for r in records]
    if args.baseline == "ha":
        target_rows = w.starts[:, None] + m.history + np.arange(m.horizon)[None, :]
        ha, ha_mask = historical_average(series.values, series.mask, range(series.steps), period=args.ha_period)
        scored = w.target_mask & ha_mask[target_rows]
        if all(scored[:, h - 1].any() for h in horizons):
            rows += [("HA", r) for r in horizon_report(truth, ha[target_rows], scored, horizons)]
        else:
            log.warning("historical average skipped: no same-phase history %d steps back", args.ha_period)
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = format_report(records)
    (out / f"eval_{args.split}.csv").write_text(text)
    if args.baseline == "ha":
        print("model,horizon_minutes,metric,value")
        for name, (minutes, metric, value) in rows:
            print(f"{name},{minutes},{metric},{value!r}")
    else:
        sys.stdout.write(text)
    from . import plotting

    plotting.horizon_metrics(records, out / f"eval_{args.split}.png")
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    cfg.validate()
    graph = _graph_from(cfg)
    series = load_series(cfg.series, cfg.missing_value)
    _check_nodes(series, graph)
    model, meta, z = _load_checkpointed(cfg, args.checkpoint, graph)
    m = cfg.model
    if m.time_of_day:
        raise ConfigError("predict does not support the time-of-day feature; use eval")
    at = _resolve_time(series, args.at)
    if at + 1 < m.history:
        raise InputError(f"need {m.history} steps of history before {format_time(series.timestamps[at])}")
    window = series.values[at + 1 - m.history : at + 1]
    obs = series.mask[at + 1 - m.history : at + 1]
    # masked history cells are fed as the training mean (0 after normalization)
    window = np.where(obs, window, z.mean)
    frames = predict(window, model, z)
    ts = series.timestamps[at] + STEP_SECONDS * np.arange(1, m.horizon + 1)
    vals = np.stack([f[:, 0] for f in frames])
    out_series = SpeedSeries(ts, vals, np.ones_like(vals, dtype=bool), series.node_ids)
    if args.out:
        write_series(_out_path(args.out), out_series)
        from . import plotting

        node = 0
        hist_t = np.arange(-m.history + 1, 1)
        fut_t = np.arange(1, m.horizon + 1)
        truth_end = min(series.steps, at + 1 + m.horizon)
        truth = series.values[at + 1 - m.history : truth_end, node]
        plotting.forecast(
            np.concatenate([hist_t, fut_t])[: len(truth)],
            truth,
            np.concatenate([np.full(m.history, np.nan), vals[:, node]])[: len(truth)],
            series.node_ids[node],
            Path(args.out).with_suffix(".png"),
        )
    else:
        print("timestamp," + ",".join(series.node_ids))
        for t_, row in zip(ts, vals):
            print(format_time(t_) + "," + ",".join(repr(float(v)) for v in row))
    return EXIT_OK


def _resolve_time(series: SpeedSeries, at: str) -> int:
    if at is None or at == "last":
        return series.steps - 1
    try:
        ts = parse_time(at)
    except ValueError:
        raise InputError(f"unparsable --at timestamp {at!r}") from None
    idx = int(np.searchsorted(series.timestamps, ts))
    if idx >= series.steps or series.timestamps[idx] != ts:
        raise InputError(f"--at {at} is not a timestamp in the series")
    return idx


def cmd_export_filter(args) -> int:
    cfg = load_run_config(args.config, _overrides(args))
    if not cfg.graph and not (cfg.distances and cfg.nodes):
        raise ConfigError("set paths.graph or both paths.distances and paths.nodes")
    graph = _graph_from(cfg)
    if not Path(args.checkpoint).exists():
        raise InputError(f"no such checkpoint: {args.checkpoint}")
    model, _ = load_model(args.checkpoint, cfg.model, graph)
    try:
        center = graph.index(args.node)
    except (KeyError, GraphError):
        raise InputError(f"unknown node id {args.node!r}") from None
    params = {p.name: p for p in model.params()}
    if args.param not in params:
        raise InputError(f"no parameter {args.param!r}; choose from {sorted(params)}")
    w = params[args.param].value
    basis = model.basis
    kd = basis.num_matrices
    if w.ndim != 2 or w.shape[0] % kd:
        raise InputError(f"{args.param} is not a graph filter weight")
    feats = w.shape[0] // kd
    if not (0 <= args.input < feats and 0 <= args.output < w.shape[1]):
        raise InputError(f"--input must be < {feats} and --output < {w.shape[1]}")
    theta = w.reshape(basis.k_max, basis.num_directions, feats, w.shape[1])[:, :, args.input, args.output]
    weights = filter_weights(theta, basis, center)
    if args.out:
        write_filter_weights(_out_path(args.out), graph.node_ids, weights)
        from . import plotting

        plotting.filter_weights(graph.node_ids, weights, args.node, Path(args.out).with_suffix(".png"))
    else:
        print("node_id,weight")
        for nid, v in zip(graph.node_ids, weights):
            print(f"{nid},{float(v)!r}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


def _overrides(args) -> list[str]:
    out = list(args.set or [])
    for flag, key in (("seed", "train.seed"), ("epochs", "train.epochs"), ("out_dir", "paths.out_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={value}")
    return out


def _add_config_flags(p, out_dir=True) -> None:
    p.add_argument("--config", help="INI config file with [paths], [data], [graph], [model], [train] sections")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field (repeatable)")
    p.add_argument("--seed", type=int, help="shortcut for --set train.seed=N")
    if out_dir:
        p.add_argument("--out-dir", dest="out_dir", help="shortcut for --set paths.out_dir=DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcrnn", description="Diffusion convolutional recurrent forecasting on road graphs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="thresholded Gaussian kernel graph from road distances")
    p.add_argument("--distances", required=True, help="CSV with header from_id,to_id,distance")
    p.add_argument("--nodes", required=True, help="one sensor id per line")
    p.add_argument("--kappa", type=float, default=math.inf, help="distance threshold (default: keep all)")
    p.add_argument("--out", required=True, help="graph triplet file; metadata goes to OUT.meta.json")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("synth", help="synthetic diffusion speeds on a graph")
    p.add_argument("--graph", required=True, help="graph written by build-graph")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise-std", dest="noise_std", type=float, default=1.0)
    p.add_argument("--lam", type=float, default=0.9, help="diffusion weight of the previous state")
    p.add_argument("--out", required=True, help="series CSV to write")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model; writes train_report.csv, checkpoint.ckpt and learning_curves.png")
    _add_config_flags(p)
    p.add_argument("--epochs", type=int, help="shortcut for --set train.epochs=N")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="horizon report (15/30/60 min) for a checkpoint, or for two series files")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--baseline", choices=("none", "ha"), default="none", help="also score the Historical Average")
    p.add_argument("--ha-period", dest="ha_period", type=int, default=2016, help="HA season length in steps (default: 1 week)")
    p.add_argument("--truth", help="series CSV with observed speeds (file mode)")
    p.add_argument("--pred", help="series CSV of consecutive forecasts, e.g. from predict (file mode)")
    p.add_argument("--missing-value", dest="missing_value", type=float, default=0.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="forecast the next horizon steps after --at, in mph")
    _add_config_flags(p, out_dir=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--at", default="last", help="last observed timestamp to condition on (default: last row)")
    p.add_argument("--out", help="series CSV to write (default: stdout); a PNG is written next to it")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-filter", help="effective filter weights centred at one node")
    _add_config_flags(p, out_dir=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--node", required=True, help="centre sensor id")
    p.add_argument("--param", default="encoder/0/w_u", help="filter weight to read (default: encoder/0/w_u)")
    p.add_argument("--input", type=int, default=0, help="input feature index")
    p.add_argument("--output", type=int, default=0, help="output unit index")
    p.add_argument("--out", help="CSV to write (default: stdout); a PNG is written next to it")
    p.set_defaults(func=cmd_export_filter)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigMismatch, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataError, GraphError, MetricError, ad.CheckpointError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
