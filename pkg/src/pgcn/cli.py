"""Command-line entry point: train, eval, ablate, export-adjacency, plot.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""
import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (DegenerateDataError, SignalParseError, SplitConfigError, SyntheticSpec,
                   WindowLengthError, Scaler, generate_synthetic, load_signal_csv, make_windows,
                   prepare_dataset, synthetic_graph)
from .graph import (GraphDomainError, load_edge_list, progressive_adjacency, transition_matrix,
                    write_node_index)
from .model import (CheckpointError, ConfigError, PGCNConfig, PGCNModel, load_checkpoint,
                    parse_combo)
from .training import DivergenceError, OptimizerState, evaluate, train

log = logging.getLogger("pgcn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

ABLATION_COMBOS = [
    ("P", "P"),
    ("P + SA", "P+SA"),
    ("T + SA", "T+SA"),
    ("T + P (PGCN)", "T+P"),
    ("T + P + SA", "T+P+SA"),
]


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    model: PGCNConfig = field(default_factory=PGCNConfig)
    signals: str = ""
    graph: str = ""
    synthetic: str = ""
    split: str = "0.7,0.1,0.2"
    split_days: str = ""
    time_of_day: bool = False
    mask_zero: bool = True
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    out: str = "runs/pgcn"

    def items(self):
        out = self.model.to_items()
        for f in fields(self):
            if f.name == "model":
                continue
            v = getattr(self, f.name)
            out[f.name] = str(int(v)) if isinstance(v, bool) else str(v)
        return out

    def write(self, path):
        lines = [f"{k}={v}" for k, v in self.items().items()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def optimizer(self):
        return OptimizerState(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                              eps=self.adam_eps, clip_norm=self.clip_norm)


_BOOL_TRUE = ("1", "true", "yes", "on")


def run_config_from_items(items):
    """Build a RunConfig from string key/values, rejecting unknown keys."""
    model_keys = {f.name for f in fields(PGCNConfig)}
    run_types = {f.name: f.type for f in fields(RunConfig) if f.name != "model"}
    model_items, kwargs = {}, {}
    for key, value in items.items():
        if key in model_keys:
            model_items[key] = value
        elif key in run_types:
            default = getattr(RunConfig(), key)
            try:
                if isinstance(default, bool):
                    kwargs[key] = str(value).strip().lower() in _BOOL_TRUE
                elif isinstance(default, int):
                    kwargs[key] = int(value)
                elif isinstance(default, float):
                    kwargs[key] = float(value)
                else:
                    kwargs[key] = str(value)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {value!r}") from None
        elif key in ("num_nodes", "directed", "epoch", "val_mae", "scaler_mean", "scaler_std",
                     "split_hash") or key.startswith("param."):
            continue
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if str(kwargs.get("time_of_day", "")).lower() in _BOOL_TRUE or kwargs.get("time_of_day") is True:
        model_items["input_channels"] = 2
    try:
        model = PGCNConfig.from_items(model_items)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model=model, **kwargs)


def read_config_file(path):
    items = {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        items[key.strip()] = value.strip()
    return items


def _apply_overrides(items, args):
    for flag, key in (("seed", "seed"), ("out", "out"), ("data", "signals"), ("graph", "graph")):
        value = getattr(args, flag, None)
        if value is not None:
            items[key] = str(value)
            if key == "signals":
                items.pop("synthetic", None)
    return items


def load_run_config(args):
    items = read_config_file(args.config) if getattr(args, "config", None) else {}
    return run_config_from_items(_apply_overrides(items, args))


# ---------------------------------------------------------------------------
# data assembly
# ---------------------------------------------------------------------------

@dataclass
class Bundle:
    dataset: object
    graph: object
    transition: object
    groups: object = None


def _split_kwargs(run):
    if run.split_days:
        return {"days": tuple(int(x) for x in run.split_days.split(","))}
    return {"fractions": tuple(float(x) for x in run.split.split(","))}


def load_table(run):
    groups = None
    if run.synthetic:
        if not Path(run.synthetic).exists():
            raise DataError(f"synthetic spec not found: {run.synthetic}")
        table, groups = generate_synthetic(SyntheticSpec.from_file(run.synthetic))
        source = run.synthetic
    else:
        if not run.signals:
            raise ConfigError("no data source: set 'signals' or 'synthetic' (or pass --data)")
        if not Path(run.signals).exists():
            raise DataError(f"signals file not found: {run.signals}")
        table = load_signal_csv(run.signals)
        source = run.signals
    return table, groups, source


def load_bundle(run, split=True, scaler=None):
    table, groups, source = load_table(run)
    if run.graph:
        if not Path(run.graph).exists():
            raise DataError(f"graph file not found: {run.graph}")
        graph = load_edge_list(run.graph, node_names=table.names)
    elif run.synthetic:
        graph = synthetic_graph(table.names)
    else:
        graph = None
    if graph is None and "T" in run.model.adjacency_combo:
        raise ConfigError("adjacency_combo uses T but no graph was given (set 'graph' or pass --graph)")
    T, Tp = run.model.input_window, run.model.output_window
    if split:
        ds = prepare_dataset(table, T, Tp, time_of_day=run.time_of_day, mask_zero=run.mask_zero,
                             source=source, **_split_kwargs(run))
        if scaler is not None:
            ds = replace(ds, scaler=scaler)
    else:
        ds = make_windows(table, T, Tp, time_of_day=run.time_of_day, source=source)
    trans = transition_matrix(graph) if graph is not None else None
    return Bundle(ds, graph, trans, groups)


def _directed(bundle):
    return bool(bundle.transition is not None and not bundle.transition.undirected)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    run = load_run_config(args)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out / "run_config.txt")
    bundle = load_bundle(run)
    return _train_run(run, bundle, out)


def _train_run(run, bundle, out):
    ds = bundle.dataset
    if bundle.graph is not None:
        write_node_index(bundle.graph, out / "node_index.csv")
    log.info("split hash %s (train %d / val %d / test %d windows)", ds.split_hash(),
             len(ds.split("train")), len(ds.split("val")), len(ds.split("test")))
    model = PGCNModel(run.model, ds.num_nodes, directed=_directed(bundle), seed=run.seed)
    meta = {k: v for k, v in run.items().items() if k not in run.model.to_items()}
    meta["split_hash"] = ds.split_hash()
    # the log is rewritten every epoch so a divergent run keeps its history
    report = train(model, ds, epochs=run.epochs, batch_size=run.batch_size, seed=run.seed,
                   transition=bundle.transition, opt=run.optimizer(), mask_zero=run.mask_zero,
                   checkpoint_dir=out / "checkpoint", checkpoint_meta=meta,
                   on_epoch=lambda e, r: r.write_csv(out / "train_log.csv"))
    report.write_csv(out / "train_log.csv")
    if report.best_epoch is not None:
        print(f"best epoch {report.best_epoch}: val MAE {report.best_val_mae:.6f}")
    return EXIT_OK


def _load_model_for_eval(args):
    model, items = load_checkpoint(args.checkpoint)
    items = dict(items)
    if getattr(args, "config", None):
        # data and run settings may change; the architecture comes from the checkpoint
        arch = set(model.config.to_items())
        extra = read_config_file(args.config)
        if "signals" in extra:
            items.pop("synthetic", None)
        items.update({k: v for k, v in extra.items() if k not in arch})
    items = _apply_overrides(items, args)
    run = run_config_from_items(items)
    scaler = Scaler(float(items["scaler_mean"]), float(items["scaler_std"]))
    bundle = load_bundle(run, scaler=scaler)
    ds = bundle.dataset
    if ds.num_nodes != model.num_nodes:
        raise CheckpointError(f"num_nodes: checkpoint has {model.num_nodes}, data has {ds.num_nodes}",
                              field="num_nodes")
    if ds.channels != model.config.input_channels:
        raise CheckpointError(f"input_channels: checkpoint has {model.config.input_channels}, data gives {ds.channels}",
                              field="input_channels")
    if _directed(bundle) != model.directed and "T" in model.config.adjacency_combo:
        raise CheckpointError("directed: graph direction differs from the checkpoint", field="directed")
    return model, run, bundle


def cmd_eval(args):
    if args.baseline:
        if args.baseline != "ha":
            raise ConfigError(f"unknown baseline {args.baseline!r}; available: ha")
        run = load_run_config(args)
        bundle = load_bundle(run)
        predictor = "ha"
        default_out = Path(run.out)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --baseline ha")
        predictor, run, bundle = _load_model_for_eval(args)
        default_out = Path(args.checkpoint).parent
    out = Path(args.out) if args.out else default_out
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(predictor, bundle.dataset, args.split, bundle.transition, run.mask_zero,
                      batch_size=run.batch_size)
    report.write_csv(out / "metrics.csv")
    print(report.table())
    return EXIT_OK


def cmd_ablate(args):
    base = load_run_config(args)
    root = Path(base.out)
    root.mkdir(parents=True, exist_ok=True)
    base.write(root / "run_config.txt")
    rows, hashes, failures = [], [], []
    code = EXIT_OK
    for label, key in ABLATION_COMBOS:
        run = replace(base, model=replace(base.model, adjacency_combo=parse_combo(key)),
                      out=str(root / key.replace("+", "_")))
        out = Path(run.out)
        out.mkdir(parents=True, exist_ok=True)
        run.write(out / "run_config.txt")
        try:
            bundle = load_bundle(run)
            hashes.append((label, bundle.dataset.split_hash()))
            _train_run(run, bundle, out)
            model, _ = load_checkpoint(out / "checkpoint")
            report = evaluate(model, bundle.dataset, "test", bundle.transition, run.mask_zero,
                              batch_size=run.batch_size)
            for h in report.horizons:
                rows.append([label, h.horizon_minutes, repr(h.mae), repr(h.rmse), repr(h.mape_percent)])
        except Exception as exc:  # one failed combo must not stop the others
            failures.append((label, str(exc)))
            code = code or _exit_code(exc)
            log.error("combo %s failed: %s", label, exc)
    with (root / "ablation.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["combo", "horizon_minutes", "mae", "rmse", "mape_percent"])
        w.writerows(rows)
    with (root / "ablation_splits.txt").open("w", encoding="utf-8") as fh:
        for label, h in hashes:
            fh.write(f"{label}={h}\n")
        for label, msg in failures:
            fh.write(f"# failed {label}: {msg}\n")
    print(f"split hashes: {sorted(set(h for _, h in hashes))}")
    return code


def _moving_average(x, window=12):
    """Trailing mean; the first entries average over what is available."""
    c = np.cumsum(np.insert(np.asarray(x, dtype=np.float64), 0, 0.0))
    out = np.empty(len(x))
    for t in range(len(x)):
        lo = max(0, t + 1 - window)
        out[t] = (c[t + 1] - c[lo]) / (t + 1 - lo)
    return out


def _parse_when(value):
    return datetime.fromisoformat(value) if value else None


def cmd_export_adjacency(args):
    if args.checkpoint:
        model, run, bundle = _load_model_for_eval(args)
        adjustor = model.adjustor
    else:
        run = load_run_config(args)
        table, _, source = load_table(run)
        bundle = Bundle(make_windows(table, run.model.input_window, run.model.output_window, source=source),
                        None, None)
        adjustor = ad.Parameter(np.eye(run.model.input_window), "adjustor")
    ds = bundle.dataset
    names = ds.table.names
    lookup = {n: i for i, n in enumerate(names)}
    pair = [s.strip() for s in (args.nodes or "").split(",") if s.strip()]
    if args.nodes is not None and len(pair) != 2:
        raise ConfigError("--nodes expects two node names separated by a comma")
    for name in pair:
        if name not in lookup:
            shown = ", ".join(names[:20]) + (" ..." if len(names) > 20 else "")
            raise ConfigError(f"unknown node {name!r}; candidates: {shown}")
    stamps = ds.table.timestamps
    last = ds.last_input_row(np.arange(ds.num_samples))
    start, end = _parse_when(args.start), _parse_when(args.end)
    chosen = [i for i, r in enumerate(last)
              if (start is None or stamps[r] >= start) and (end is None or stamps[r] <= end)]
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    T = ds.input_window
    vals = ds.table.values

    def adjacency_for(idx):
        rows = np.asarray(idx)[:, None] + np.arange(T)[None, :]
        windows = np.ascontiguousarray(np.transpose(vals[rows], (0, 2, 1)))
        with ad.no_grad():
            return progressive_adjacency(windows, adjustor).matrix.data

    if args.matrix_at:
        when = datetime.fromisoformat(args.matrix_at)
        hits = [i for i, r in enumerate(last) if stamps[r] == when]
        if not hits:
            raise ConfigError(f"no window ends at {args.matrix_at}")
        A = adjacency_for(hits)[0]
        with (out / "adjacency_matrix.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node"] + list(names))
            for n, row in zip(names, A):
                w.writerow([n] + [repr(float(v)) for v in row])
    if pair:
        i, j = lookup[pair[0]], lookup[pair[1]]
        w_ij, w_ji = [], []
        for s in range(0, len(chosen), 256):
            A = adjacency_for(chosen[s:s + 256])
            w_ij.extend(A[:, i, j])
            w_ji.extend(A[:, j, i])
        ma = _moving_average(w_ij, 12) if chosen else []
        with (out / "adjacency_trace.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "speed_i", "speed_j", "weight_ij", "weight_ji", "weight_ij_ma12"])
            for k, s in enumerate(chosen):
                r = last[s]
                w.writerow([stamps[r].isoformat(), repr(float(vals[r, i])), repr(float(vals[r, j])),
                            repr(float(w_ij[k])), repr(float(w_ji[k])), repr(float(ma[k]))])
    if not pair and not args.matrix_at:
        raise ConfigError("nothing to export: give --nodes and/or --matrix-at")
    return EXIT_OK


PLOT_KINDS = ("train_log", "adjacency", "metrics", "ablation")


def _detect_kind(header):
    h = set(header)
    if {"epoch", "train_mae"} <= h:
        return "train_log"
    if {"weight_ij", "speed_i"} <= h:
        return "adjacency"
    if "combo" in h:
        return "ablation"
    if "horizon_steps" in h:
        return "metrics"
    return None


def cmd_plot(args):
    path = Path(args.csv)
    if not path.exists():
        raise DataError(f"CSV not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ConfigError(f"{path} has no data rows")
    header, body = rows[0], rows[1:]
    kind = args.kind or _detect_kind(header)
    if kind not in PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; available: {', '.join(PLOT_KINDS)}")
    col = {name: k for k, name in enumerate(header)}
    needed = {"train_log": ("epoch", "train_mae", "val_mae"),
              "adjacency": ("timestamp", "speed_i", "speed_j", "weight_ij", "weight_ij_ma12"),
              "metrics": ("horizon_minutes", "mae", "rmse", "mape_percent"),
              "ablation": ("combo", "horizon_minutes", "mape_percent")}[kind]
    missing = [c for c in needed if c not in col]
    if missing:
        raise ConfigError(f"{path} lacks columns {missing} required for kind {kind!r}")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tidy = []
    fig, ax = plt.subplots(figsize=(8, 4))
    if kind == "train_log":
        x = [int(r[col["epoch"]]) for r in body]
        for name in ("train_mae", "val_mae"):
            y = [float(r[col[name]]) for r in body]
            ax.plot(x, y, label=name)
            tidy += [(name, a, b) for a, b in zip(x, y)]
        ax.set_xlabel("epoch")
        ax.set_ylabel("MAE")
    elif kind == "adjacency":
        x = [datetime.fromisoformat(r[col["timestamp"]]) for r in body]
        for name in ("speed_i", "speed_j"):
            y = [float(r[col[name]]) for r in body]
            ax.plot(x, y, label=name)
            tidy += [(name, a.isoformat(), b) for a, b in zip(x, y)]
        ax.set_ylabel("speed")
        ax2 = ax.twinx()
        for name, style in (("weight_ij", ":"), ("weight_ij_ma12", "-")):
            y = [float(r[col[name]]) for r in body]
            ax2.plot(x, y, style, color="k", label=name)
            tidy += [(name, a.isoformat(), b) for a, b in zip(x, y)]
        ax2.set_ylabel("weight")
        ax2.legend(loc="upper right")
        fig.autofmt_xdate()
    elif kind == "metrics":
        body = [r for r in body if r[col["horizon_minutes"]] != "all"]
        x = [int(r[col["horizon_minutes"]]) for r in body]
        for name in ("mae", "rmse", "mape_percent"):
            y = [float(r[col[name]]) for r in body]
            ax.plot(x, y, marker="o", label=name)
            tidy += [(name, a, b) for a, b in zip(x, y)]
        ax.set_xlabel("horizon (min)")
    else:
        combos = []
        for r in body:
            if r[col["combo"]] not in combos:
                combos.append(r[col["combo"]])
        for c in combos:
            sel = [r for r in body if r[col["combo"]] == c]
            x = [int(r[col["horizon_minutes"]]) for r in sel]
            y = [float(r[col["mape_percent"]]) for r in sel]
            ax.plot(x, y, marker="o", label=c)
            tidy += [(c, a, b) for a, b in zip(x, y)]
        ax.set_xlabel("horizon (min)")
        ax.set_ylabel("MAPE (%)")
    ax.legend(loc="upper left")
    fig.tight_layout()
    image = path.with_suffix(".png")
    fig.savefig(image, dpi=100)
    plt.close(fig)
    with path.with_name(path.stem + "_tidy.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "x", "y"])
        w.writerows(tidy)
    print(image)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _exit_code(exc):
    if isinstance(exc, (DivergenceError, FloatingPointError, ad.NumericDomainError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, FileNotFoundError, SignalParseError, GraphDomainError,
                        DegenerateDataError, WindowLengthError)):
        return EXIT_DATA
    if isinstance(exc, (ConfigError, CheckpointError, SplitConfigError, ValueError, KeyError)):
        return EXIT_CONFIG
    return None


def build_parser():
    parser = argparse.ArgumentParser(prog="pgcn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="signals CSV (overrides the config)")
        p.add_argument("--graph", help="edge-list CSV (overrides the config)")

    p = sub.add_parser("train", help="train PGCN and keep the best validation checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-horizon metrics of a checkpoint or baseline")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=None)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and test the five adjacency combinations")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-adjacency", help="progressive adjacency weights over time")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--nodes", help="two node names, comma separated")
    p.add_argument("--start", help="first window end timestamp (ISO-8601)")
    p.add_argument("--end", help="last window end timestamp (ISO-8601)")
    p.add_argument("--matrix-at", help="dump the full matrix of the window ending here")
    p.set_defaults(func=cmd_export_adjacency)

    p = sub.add_parser("plot", help="render a CSV produced by this tool")
    p.add_argument("csv")
    p.add_argument("--kind", help=f"one of {', '.join(PLOT_KINDS)} (detected from the header by default)")
    p.set_defaults(func=cmd_plot)
    return parser


def _limit_threads():
    n = int(os.environ.get("PGCN_THREADS", "1") or 1)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _limit_threads()
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
