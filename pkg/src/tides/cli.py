"""Command-line entry point: ``tides synth|cluster|train|evaluate|report``."""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import SynthConfig, generate_synthetic, load_csv, write_csv
from .errors import NumericalError, ValidationError
from .model import TidesConfig, TidesParams
from .params import ParamStore
from .pipeline import (ClusterTask, DLinearModel, Forecast, PipelineConfig, PreparedData, SeasonalNaiveModel,
                       TidesModel, cluster_regions, fit, forecast, merge_forecasts, prediction_rows, prepare, score)
from .train import TrainConfig, write_history

log = logging.getLogger("tides")

CONFIG_VERSION = 1
DEFAULT_SEED = 7
MANIFEST = "manifest.json"

# option name -> (type, default); CLI flags override the config file, which overrides these
OPTIONS = {
    "seed": (int, DEFAULT_SEED),
    "regions": (int, 40),
    "days": (int, 28),
    "spatial_corr": (float, 0.7),
    "noise_std": (float, 0.12),
    "k_clusters": (int, 4),
    "knn": (int, 5),
    "restarts": (int, 10),
    "epochs": (int, 100),
    "patience": (int, 10),
    "lr": (float, 1e-3),
    "batch_size": (int, 16),
    "weight_decay": (float, 1e-4),
    "train_stride": (int, PipelineConfig.train_stride),
    "eval_stride": (int, PipelineConfig.eval_stride),
    "history": (int, 96),
    "horizon": (int, 4),
    "backbone_layers": (int, 4),
    "par_mode": (str, "literal"),
    "loss_space": (str, "revin"),
}


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict
    outputs: list
    version: str
    duration_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def version_string() -> str:
    try:
        res = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+g{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def read_config(path) -> dict:
    """Versioned key-value file: a ``[tides]`` section with ``version = 1`` and option keys."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ValidationError(f"config {path}: {exc}") from exc
    if "tides" not in parser:
        raise ValidationError(f"config {path} needs a [tides] section")
    sec = dict(parser["tides"])
    version = sec.pop("version", None)
    if version is None or version.strip() != str(CONFIG_VERSION):
        raise ValidationError(f"config {path}: unsupported version {version!r} (expected {CONFIG_VERSION})")
    out = {}
    for key, raw in sec.items():
        name = key.replace("-", "_")
        if name not in OPTIONS:
            raise ValidationError(f"config {path}: unknown key {key!r}")
        typ = OPTIONS[name][0]
        try:
            out[name] = typ(raw)
        except ValueError as exc:
            raise ValidationError(f"config {path}: bad value for {key}: {raw!r}") from exc
    return out


def resolve(args: argparse.Namespace, names) -> dict:
    file_cfg = read_config(args.config) if args.config else {}
    out = {}
    for name in names:
        val = getattr(args, name, None)
        out[name] = val if val is not None else file_cfg.get(name, OPTIONS[name][1])
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(data_dir) -> tuple:
    d = Path(data_dir)
    for name in ("regions.csv", "traffic.csv"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"missing input {d / name}")
    return load_csv(d / "regions.csv", d / "traffic.csv")


def _pipeline_cfg(cfg: dict) -> PipelineConfig:
    return PipelineConfig(history=cfg["history"], horizon=cfg["horizon"], train_stride=cfg["train_stride"],
                          eval_stride=cfg["eval_stride"], knn=cfg["knn"], par_mode=cfg["par_mode"])


def read_clusters(path) -> dict[int, list[str]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input {path}")
    groups: dict[int, list[str]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"region_id", "cluster"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected columns region_id,cluster")
        for lineno, row in enumerate(reader, start=2):
            try:
                groups.setdefault(int(row["cluster"]), []).append(row["region_id"])
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: bad cluster label {row['cluster']!r}") from exc
    return dict(sorted(groups.items()))


# ------------------------------------------------------------------ commands
SYNTH_KEYS = ("seed", "regions", "days", "spatial_corr", "noise_std")
CLUSTER_KEYS = ("seed", "k_clusters", "knn", "restarts", "history", "horizon", "train_stride", "eval_stride",
                "par_mode")
TRAIN_KEYS = CLUSTER_KEYS + ("epochs", "patience", "lr", "batch_size", "weight_decay", "backbone_layers",
                             "loss_space")


def cmd_synth(args) -> RunManifest:
    cfg = resolve(args, SYNTH_KEYS)
    sc = SynthConfig(n_regions=cfg["regions"], days=cfg["days"], seed=cfg["seed"],
                     spatial_corr_strength=cfg["spatial_corr"], noise_std=cfg["noise_std"])
    series, regions = generate_synthetic(sc)
    out = _out_dir(args)
    write_csv(series, regions, out / "regions.csv", out / "traffic.csv")
    return RunManifest("synth", cfg, cfg["seed"], {}, ["regions.csv", "traffic.csv"], version_string(),
                       extra={"synth_config": asdict(sc)})


def cmd_cluster(args) -> RunManifest:
    cfg = resolve(args, CLUSTER_KEYS)
    series, regions = _load_data(args.data)
    data = prepare(series, regions, _pipeline_cfg(cfg))
    assign, _, feats = cluster_regions(data, cfg["k_clusters"], cfg["knn"], seed=cfg["seed"],
                                       restarts=cfg["restarts"])
    out = _out_dir(args)
    with open(out / "clusters.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "cluster"])
        for rid, lab in zip(assign.region_ids, assign.labels):
            w.writerow([rid, int(lab)])
    with open(out / "features.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "phi", "lambda", "mean_traffic", "am", "pm", "night", "moran_i", "cluster"])
        for f, lab in zip(feats, assign.labels):
            w.writerow([f.region_id, *(repr(float(x)) for x in f.as_array()), int(lab)])
    sizes = {int(k): len(assign.members(k)) for k in range(assign.K)}
    log.info("cluster sizes %s, objective %.6f", sizes, assign.objective)
    return RunManifest("cluster", cfg, cfg["seed"], {"data": str(args.data)}, ["clusters.csv", "features.csv"],
                       version_string(), extra={"objective": assign.objective, "sizes": sizes,
                                                "objective_history": assign.history})


def _model_cfg(cfg: dict) -> TidesConfig:
    return TidesConfig(history=cfg["history"], horizon=cfg["horizon"], backbone_layers=cfg["backbone_layers"])


def cmd_train(args) -> RunManifest:
    cfg = resolve(args, TRAIN_KEYS)
    kind = args.baseline or "tides"
    series, regions = _load_data(args.data)
    pcfg = _pipeline_cfg(cfg)
    data = prepare(series, regions, pcfg)
    groups = read_clusters(args.clusters)
    if args.cluster is not None:
        if args.cluster not in groups:
            raise ValidationError(f"cluster {args.cluster} not in {args.clusters}")
        groups = {args.cluster: groups[args.cluster]}
    tcfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["epochs"],
                       early_stop_patience=cfg["patience"], weight_decay=cfg["weight_decay"], seed=cfg["seed"])
    out = _out_dir(args)
    outputs = []
    summary = {}
    for k, members in groups.items():
        task = ClusterTask(data, k, members, knn=pcfg.knn, par_mode=pcfg.par_mode)
        model = _build(kind, task, cfg, isolate=args.isolate)
        log.info("training %s on zone %d (%d regions)", kind, k, len(members))
        try:
            history = fit(model, tcfg)
        except NumericalError as exc:
            raise NumericalError(f"zone {k}: {exc}", zone=k, **exc.context) from exc
        stem = out / f"{_prefix(kind)}_zone{k}"
        extra = {"kind": kind, "zone": k, "region_ids": members, "seed": cfg["seed"], "isolate": bool(args.isolate),
                 "model_config": _model_cfg(cfg).to_dict(), "train_config": tcfg.to_dict()}
        model.store.save(stem, extra)
        write_history(history, out / f"history_zone{k}.jsonl")
        outputs += [stem.name + ".bin", stem.name + ".json", f"history_zone{k}.jsonl"]
        best = min(history, key=lambda r: r["val_mae"])
        summary[k] = {"epochs": len(history), "best_epoch": best["epoch"], "best_val_mae": best["val_mae"]}
    return RunManifest("train", cfg | {"baseline": args.baseline, "isolate": bool(args.isolate)}, cfg["seed"],
                       {"data": str(args.data), "clusters": str(args.clusters)}, outputs, version_string(),
                       extra={"zones": summary})


def _prefix(kind: str) -> str:
    return "model" if kind == "tides" else kind


def _build(kind: str, task: ClusterTask, cfg: dict, isolate: bool = False, params=None):
    if kind == "tides":
        return TidesModel(task, _model_cfg(cfg), seed=cfg["seed"], isolate=isolate, params=params,
                          loss_space=cfg["loss_space"])
    if kind == "dlinear":
        return DLinearModel(task, seed=cfg["seed"])
    if kind == "seasonal_naive":
        return SeasonalNaiveModel(task)
    raise ValidationError(f"unknown model kind {kind!r}")


def _load_model(models_dir: Path, kind: str, zone: int, task: ClusterTask, cfg: dict, cross: bool):
    stem = models_dir / f"{_prefix(kind)}_zone{zone}"
    if not stem.with_suffix(".json").is_file():
        raise FileNotFoundError(f"missing checkpoint {stem}.json")
    store, extra = ParamStore.load(stem)
    if not cross and list(extra["region_ids"]) != task.region_ids:
        raise ValidationError(f"checkpoint zone {zone} was trained on different regions than the evaluation set; "
                              "pass --train-zone/--eval-zone for cross-zone evaluation")
    if kind == "tides":
        mc = TidesConfig(**{k: v for k, v in extra["model_config"].items()})
        params = TidesParams(mc, seed=extra["seed"])
        params.store.load_values(store)
        return TidesModel(task, mc, params=params, isolate=extra.get("isolate", False))
    model = DLinearModel(task)
    model.store.load_values(store)
    return model


def read_predictions(path, data: PreparedData, region_ids: list[str], split: str = "test") -> Forecast:
    """Parse an external (region_id, timestamp, horizon, y_pred) CSV onto the given split's windows."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing input {path}")
    starts = data.starts[split]
    h, p = data.history, data.horizon
    pos = {r: i for i, r in enumerate(region_ids)}
    t_index = {str(t.astype("datetime64[s]")): i for i, t in enumerate(data.timestamps)}
    b_of = {int(s): b for b, s in enumerate(starts)}
    pred = np.full((len(starts), len(region_ids), p), np.nan)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"region_id", "timestamp", "horizon", "y_pred"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise ValidationError(f"{path}: expected columns {sorted(need)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                r = pos[row["region_id"]]
                k = int(row["horizon"])
                ts = str(np.datetime64(row["timestamp"], "s"))
                start = t_index[ts] - h - (k - 1)
                b = b_of[start]
                pred[b, r, k - 1] = float(row["y_pred"])
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: row does not match a {split} window ({exc})") from exc
    if np.isnan(pred).any():
        raise ValidationError(f"{path}: {int(np.isnan(pred).sum())} forecasts missing for the {split} split")
    rows = data.rows(region_ids)
    true = data.raw[rows][:, starts[:, None] + h + np.arange(p)].transpose(1, 0, 2)
    return Forecast(list(region_ids), starts, true, pred)


def write_predictions(fc: Forecast, data: PreparedData, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["region_id", "timestamp", "horizon", "y_true", "y_pred"])
        for rid, ts, k, yt, yp in prediction_rows(fc, data):
            w.writerow([rid, ts, k, repr(float(yt)), repr(float(yp))])


def cmd_evaluate(args) -> RunManifest:
    cfg = resolve(args, TRAIN_KEYS)
    series, regions = _load_data(args.data)
    pcfg = _pipeline_cfg(cfg)
    data = prepare(series, regions, pcfg)
    groups = read_clusters(args.clusters)
    out = _out_dir(args)
    kind = args.model
    meta = {"split": "test", "model": kind}
    if (args.train_zone is None) != (args.eval_zone is None):
        raise ValidationError("--train-zone and --eval-zone must be given together")
    if args.external_predictions:
        ids = [r for zone in groups.values() for r in zone] if args.eval_zone is None else groups[args.eval_zone]
        fc = read_predictions(args.external_predictions, data, ids)
        name = args.name or "external"
        meta["source"] = str(args.external_predictions)
    else:
        if args.train_zone is not None:
            for z in (args.train_zone, args.eval_zone):
                if z not in groups:
                    raise ValidationError(f"zone {z} not in {args.clusters}")
            pairs = [(args.train_zone, args.eval_zone)]
            meta.update(source_zone=args.train_zone, destination_zone=args.eval_zone)
        else:
            pairs = [(z, z) for z in groups]
        parts = []
        for src, dst in pairs:
            task = ClusterTask(data, dst, groups[dst], knn=pcfg.knn, par_mode=pcfg.par_mode)
            if kind == "seasonal_naive":
                model = SeasonalNaiveModel(task)
            else:
                if args.models is None:
                    raise ValidationError(f"--models is required to evaluate {kind}")
                model = _load_model(Path(args.models), kind, src, task, cfg, cross=args.train_zone is not None)
            parts.append(forecast(model, "test"))
        fc = merge_forecasts(parts)
        name = args.name or kind
    report = score(fc, data, name, meta)
    paths = report.write(out, name)
    write_predictions(fc, data, out / f"{name}_predictions.csv")
    agg = report.aggregate
    log.info("%s: MAE %.6f RMSE %.6f MAPE %.4f%% r %.6f", name, agg["mae"], agg["rmse"], agg["mape_percent"],
             agg["pearson_r"])
    print(json.dumps({"model": name, **{k: agg[k] for k in ("mae", "rmse", "mape_percent", "pearson_r")}}))
    inputs = {"data": str(args.data), "clusters": str(args.clusters), "models": args.models,
              "external_predictions": args.external_predictions}
    return RunManifest("evaluate", cfg | {"model": kind}, cfg["seed"], inputs,
                       [p.name for p in paths] + [f"{name}_predictions.csv"], version_string(), extra={"meta": meta})


def cmd_report(args) -> RunManifest:
    from .plots import render_reports

    out = _out_dir(args)
    written = render_reports(Path(args.eval_dir), out)
    if not written:
        raise ValidationError(f"no *_report.json files in {args.eval_dir}")
    return RunManifest("report", {}, 0, {"eval_dir": str(args.eval_dir)}, [p.name for p in written],
                       version_string())


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--config", help="versioned key-value config file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tides", description="Cluster-wise spatial-temporal traffic forecasting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic city dataset")
    p.add_argument("--regions", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--spatial-corr", dest="spatial_corr", type=float)
    p.add_argument("--noise-std", dest="noise_std", type=float)

    def data_args(p):
        p.add_argument("--data", required=True, help="directory with regions.csv and traffic.csv")
        p.add_argument("--history", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--train-stride", dest="train_stride", type=int)
        p.add_argument("--eval-stride", dest="eval_stride", type=int)
        p.add_argument("--knn", type=int)
        p.add_argument("--par-mode", dest="par_mode", choices=["literal", "max_over_mean"])

    p = sub.add_parser("cluster", parents=[common], help="group regions into zones")
    data_args(p)
    p.add_argument("--k-clusters", dest="k_clusters", type=int)
    p.add_argument("--restarts", type=int)

    def train_args(p):
        data_args(p)
        p.add_argument("--clusters", required=True, help="clusters.csv from the cluster command")
        p.add_argument("--backbone-layers", dest="backbone_layers", type=int)
        p.add_argument("--loss-space", dest="loss_space", choices=["revin", "series"])

    p = sub.add_parser("train", parents=[common], help="train one model per zone")
    train_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--cluster", type=int, help="train only this zone")
    p.add_argument("--baseline", choices=["dlinear"], help="train a baseline instead of TIDES")
    p.add_argument("--isolate", action="store_true", help="ablation: mask every cross-region attention pair")

    p = sub.add_parser("evaluate", parents=[common], help="score forecasts on the test split")
    train_args(p)
    p.add_argument("--models", help="directory written by train")
    p.add_argument("--model", choices=["tides", "dlinear", "seasonal_naive"], default="tides")
    p.add_argument("--name", help="report file prefix (default: model name)")
    p.add_argument("--train-zone", dest="train_zone", type=int)
    p.add_argument("--eval-zone", dest="eval_zone", type=int)
    p.add_argument("--external-predictions", dest="external_predictions",
                   help="CSV with region_id,timestamp,horizon,y_pred to score instead of a model")

    p = sub.add_parser("report", parents=[common], help="render figures from evaluate outputs")
    p.add_argument("--eval-dir", dest="eval_dir", required=True)
    return parser


COMMANDS = {"synth": cmd_synth, "cluster": cmd_cluster, "train": cmd_train, "evaluate": cmd_evaluate,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.monotonic()
    try:
        manifest = COMMANDS[args.command](args)
        manifest.duration_s = round(time.monotonic() - t0, 3)
        manifest.write(Path(args.out))
    except ValidationError as exc:
        print(f"tides: validation error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is an internal error
        print(f"tides: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
