"""Command line entry point: ``mixlab <command> --config run.json --out dir``.

Every command reads a flat JSON config (unknown keys are rejected), writes its
outputs plus a ``manifest.json`` echoing the fully resolved config into the
output directory, and exits nonzero with a single ``mixlab: error: ...`` line
on failure. A manifest can be passed back as ``--config`` to repeat a run.
"""
from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, data_io, experiments, id_estimation as ide, metrics as mt, model as M, msda
from . import robustness as R
from .errors import ConfigError, MixlabError

log = logging.getLogger("mixlab")

GEN_KEYS = {"generator": "composite", "n": 1000, "d": 2, "ambient": 2, "noise": 0.0,
            "n_per_class": 100, "classes": 10, "easy_strength": 0.4}

DEFAULTS: dict[str, dict] = {
    "ingest": {"format": "cifar", "variant": "c10", "path": "", "images_path": "", "labels_path": "", "seed": 0},
    "gen": {**GEN_KEYS, "seed": 0},
    "augment": {**GEN_KEYS, "input": "", "method": "mixup", "dist": "fixed(0.5)", "k": 4, "decay": 3.0,
                "aux": "", "fill": 0.0, "fraction": 0.5, "seed": 0},
    "train": {**GEN_KEYS, "input": "", "test_input": "", "epochs": 30, "batch_size": 128, "lr": 0.1,
              "momentum": 0.9, "lr_drop_epoch_fraction": 0.5, "lr_drop_factor": 0.01, "hidden": [256],
              "augment": "none", "dist": "beta(1,1)", "decay": 3.0, "seed": 0},
    "id": {**GEN_KEYS, "generator": "hypercube", "source": "generator", "path": "", "method": "mle",
           "discard": 0.1, "bootstrap": 50, "bootstrap_rescale": False, "seed": 0},
    "metrics": {"metric": "affinity", "clean_logits": "", "aug_logits": "", "labels": "", "labels_aug": "",
                "y1": "", "y2": "", "lam": "", "runs": [], "seed": 0},
    "occlusion": {"model": "", "test": "", "train": "", "protocol": "cut", "fractions": [0.1, 0.25, 0.5],
                  "strategy": "uniform_box", "fill": 0.0, "k": 4, "decay": 3.0, "aux": "", "size": "",
                  "runs": 1, "ks": [2, 4], "saliency_train": "", "saliency_test": "", "seed": 0},
    "report": {"inputs": []},
}

RESERVED = "_manifest"


def git_stamp() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def load_config(command: str, path: str | None, preset: str | None = None) -> dict:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"{path}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    manifest = raw.pop(RESERVED, None)
    if manifest and manifest.get("command") != command:
        raise ConfigError(f"manifest was written by '{manifest.get('command')}', not '{command}'")
    if command == "experiment":
        name = raw.get("preset", preset)
        if name not in experiments.PRESET_DEFAULTS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(experiments.PRESET_DEFAULTS)}")
        defaults = {"preset": name, "seed": 0, **experiments.PRESET_DEFAULTS[name]}
    else:
        defaults = DEFAULTS[command]
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key '{key}' for command '{command}'")
        if isinstance(value, dict):
            raise ConfigError(f"config key '{key}' is nested; configs are flat")
    cfg = dict(defaults)
    cfg.update(raw)
    return cfg


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, mt.ClassIncrease):
        return {"increase": o.increase.tolist(), "c_max": o.c_max, "n_test": o.n_test}
    raise TypeError(f"cannot serialise {type(o).__name__}")


# --------------------------------------------------------------------------
# shared helpers


def _generate(cfg: dict, seed: int):
    g = cfg["generator"]
    if g == "hypercube":
        return data_io.gen_hypercube(int(cfg["n"]), int(cfg["d"]), int(cfg["ambient"]), seed)
    if g == "swiss_roll":
        return data_io.gen_swiss_roll(int(cfg["n"]), float(cfg["noise"]), seed)
    if g == "composite":
        return data_io.gen_composite(int(cfg["n_per_class"]), int(cfg["classes"]), float(cfg["easy_strength"]), seed)
    if g == "composite_conflict":
        return data_io.gen_composite_conflict(int(cfg["n_per_class"]), int(cfg["classes"]),
                                              float(cfg["easy_strength"]), seed)
    raise ConfigError(f"unknown generator {g!r}")


def _dataset(cfg: dict, key: str = "input") -> data_io.Dataset:
    if cfg.get(key):
        return data_io.read_dataset(cfg[key])
    ds = _generate(cfg, int(cfg["seed"]))
    if not isinstance(ds, data_io.Dataset):
        raise ConfigError(f"generator {cfg['generator']!r} does not produce images")
    return ds


def write_preview(path: Path, images: np.ndarray, n: int = 16) -> None:
    """Binary PGM (1 channel) or PPM (3 channels) grid of the first ``n`` images."""
    imgs = images[:n]
    c, h, w = imgs.shape[1:]
    cols = int(np.ceil(np.sqrt(len(imgs))))
    rows = int(np.ceil(len(imgs) / cols))
    grid = np.zeros((c, rows * (h + 1), cols * (w + 1)))
    for i, img in enumerate(imgs):
        r, q = divmod(i, cols)
        grid[:, r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = img
    pix = np.rint(np.clip(grid, 0, 1) * 255).astype(np.uint8)
    if c == 3:
        header, body = b"P6", pix.transpose(1, 2, 0).tobytes()
    else:
        header, body = b"P5", pix.mean(axis=0).astype(np.uint8).tobytes() if c > 1 else pix[0].tobytes()
    path.write_bytes(header + f"\n{grid.shape[2]} {grid.shape[1]}\n255\n".encode() + body)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(cfg: dict, out: Path) -> dict:
    fmt = cfg["format"]
    if fmt == "cifar":
        ds = data_io.read_cifar(cfg["path"], cfg["variant"])
    elif fmt == "idx":
        ds = data_io.read_idx(cfg["images_path"], cfg["labels_path"])
    elif fmt == "mbt":
        ds = data_io.read_dataset(cfg["path"])
    else:
        raise ConfigError(f"unknown format {fmt!r}")
    paths = data_io.write_dataset(out / "dataset", ds)
    summary = {"n": len(ds), "image_shape": list(ds.image_shape), "class_count": ds.class_count, "files": paths}
    write_json(out / "summary.json", summary)
    return summary


def cmd_gen(cfg: dict, out: Path) -> dict:
    obj = _generate(cfg, int(cfg["seed"]))
    if isinstance(obj, data_io.PointCloud):
        data_io.write_tensor(out / "points.mbt", data_io.TensorFile.from_array(obj.points.astype(np.float32)))
        summary = {"n": obj.points.shape[0], "ambient": obj.points.shape[1], "true_dim": obj.true_dim}
    else:
        data_io.write_dataset(out / "dataset", obj)
        for key, labels in obj.extras.items():
            data_io.write_tensor(out / f"dataset.{key}.mbt", data_io.TensorFile.from_array(labels.astype(np.uint8)))
        summary = {"n": len(obj), "image_shape": list(obj.image_shape), "class_count": obj.class_count}
    write_json(out / "summary.json", summary)
    return summary


MIX_METHODS = {"mixup": "mixup", "fmix": "fmix", "cutmix": "cutmix"}


def cmd_augment(cfg: dict, out: Path) -> dict:
    ds = _dataset(cfg)
    rng = msda.substream(int(cfg["seed"]), "augment")
    method = cfg["method"]
    dist = msda.MixCoeffDist.parse(cfg["dist"])
    soft = None
    labels = ds.labels
    lam = None
    if method in MIX_METHODS:
        images, soft, _, lam = msda.mix_batch(ds.images, ds.labels, ds.class_count, method, dist, rng, cfg["decay"])
    elif method == "rmixup":
        images, _, _, lam = msda.mix_batch(ds.images, ds.labels, ds.class_count, "mixup", dist, rng,
                                           keep_first_label=True)
    elif method.startswith("inter_") and method[6:] in MIX_METHODS:
        if not cfg["aux"]:
            raise ConfigError("inter-dataset mixing needs an 'aux' dataset prefix")
        aux = data_io.read_dataset(cfg["aux"])
        images, labels, lam = msda.inter_dataset_batch(ds.images, ds.labels, aux, method[6:], dist, rng, cfg["decay"])
    elif method == "cutout":
        h, w = ds.image_shape[1:]
        seed = msda.child_seed(rng)
        images = np.stack([msda.cutout(x, msda.cut_box(h, w, float(cfg["fraction"]), True, msda.substream(seed, i)),
                                       float(cfg["fill"])) for i, x in enumerate(ds.images)])
    elif method == "grid_shuffle":
        seed = msda.child_seed(rng)
        images = np.stack([msda.grid_shuffle(x, int(cfg["k"]), msda.substream(seed, i))
                           for i, x in enumerate(ds.images)])
    else:
        raise ConfigError(f"unknown augmentation method {method!r}")
    aug = data_io.Dataset(images, labels, ds.class_count, soft, name=f"{ds.name}+{method}")
    paths = data_io.write_dataset(out / "augmented", aug)
    if lam is not None:
        data_io.write_tensor(out / "augmented.lam.mbt", data_io.TensorFile.from_array(np.asarray(lam, np.float32)))
    write_preview(out / ("preview.ppm" if ds.image_shape[0] == 3 else "preview.pgm"), images)
    summary = {"n": len(aug), "dims": [len(aug), *aug.image_shape], "method": method, "files": paths}
    write_json(out / "summary.json", summary)
    return summary


def _train_hook(cfg: dict, classes: int):
    name = cfg["augment"]
    dist = msda.MixCoeffDist.parse(cfg["dist"])
    if name == "none":
        return None
    if name in MIX_METHODS:
        return experiments.mix_hook(name, dist, classes, cfg["decay"])
    if name == "rmixup":
        return experiments.rmix_hook("mixup", dist, classes)
    if name == "cutout":
        return experiments.cutout_hook(0.5)
    raise ConfigError(f"unknown training augmentation {name!r}")


def cmd_train(cfg: dict, out: Path) -> dict:
    ds = _dataset(cfg)
    tc = M.TrainConfig(epochs=int(cfg["epochs"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                       momentum=float(cfg["momentum"]), lr_drop_epoch_fraction=float(cfg["lr_drop_epoch_fraction"]),
                       lr_drop_factor=float(cfg["lr_drop_factor"]), hidden=tuple(int(h) for h in cfg["hidden"]),
                       seed=int(cfg["seed"]), augment=_train_hook(cfg, ds.class_count))
    net, history = M.train(ds, tc)
    net.save(out / "model.mbt")
    write_json(out / "history.json", history)
    res = M.evaluate(net, ds)
    data_io.write_tensor(out / "train_logits.mbt", data_io.TensorFile.from_array(res.logits.scores.astype(np.float32)))
    summary = {"train_accuracy": res.accuracy, "model_fingerprint": net.fingerprint(), "epochs": tc.epochs}
    if cfg["test_input"]:
        test = data_io.read_dataset(cfg["test_input"], ds.class_count)
        tres = M.evaluate(net, test)
        data_io.write_tensor(out / "test_logits.mbt", data_io.TensorFile.from_array(tres.logits.scores.astype(np.float32)))
        summary["test_accuracy"] = tres.accuracy
    write_json(out / "summary.json", summary)
    return summary


def cmd_id(cfg: dict, out: Path) -> dict:
    src = cfg["source"]
    seed = int(cfg["seed"])
    if src == "generator":
        pc = _generate(cfg, seed)
        if not isinstance(pc, data_io.PointCloud):
            raise ConfigError("id needs a point-cloud generator (hypercube or swiss_roll)")
        rows = pc.points
    elif src == "embeddings":
        rows = data_io.read_tensor(cfg["path"]).data
    elif src == "dataset":
        ds = data_io.read_dataset(cfg["path"])
        rows = ds.images.reshape(len(ds), -1)
    else:
        raise ConfigError(f"unknown id source {src!r}")
    est = ide.representation_id(rows, cfg["method"], float(cfg["discard"]), int(cfg["bootstrap"]), seed,
                                 bool(cfg["bootstrap_rescale"]))
    report = json.loads(est.to_json())
    write_json(out / "id.json", report)
    return report


def _logits(path: str) -> np.ndarray:
    if not path:
        raise ConfigError("missing logits path")
    return data_io.read_tensor(path).data.astype(np.float64)


def _ints(path: str) -> np.ndarray:
    if not path:
        raise ConfigError("missing label path")
    return data_io.read_tensor(path).data.astype(np.int64).reshape(-1)


def cmd_metrics(cfg: dict, out: Path) -> dict:
    m = cfg["metric"]
    if m == "affinity":
        rep = mt.affinity(_logits(cfg["clean_logits"]), _logits(cfg["aug_logits"]), _ints(cfg["labels"]),
                          _ints(cfg["labels_aug"]) if cfg["labels_aug"] else None)
    elif m == "diversity":
        rep = mt.diversity(_logits(cfg["aug_logits"]), _ints(cfg["labels"]))
    elif m == "mix_diversity":
        lam = data_io.read_tensor(cfg["lam"]).data.astype(np.float64).reshape(-1)
        rep = mt.mix_diversity(_logits(cfg["aug_logits"]), _ints(cfg["y1"]), _ints(cfg["y2"]), lam)
    elif m in ("di_index", "worst_case_di"):
        labels = _ints(cfg["labels"])
        clean = _logits(cfg["clean_logits"])
        k = clean.shape[1]
        w0 = M.wrong_counts(np.argmax(clean, axis=1), labels, k)
        paths = cfg["runs"] or [cfg["aug_logits"]]
        incs = [mt.class_increase(w0, M.wrong_counts(np.argmax(_logits(p), axis=1), labels, k), len(labels))
                for p in paths]
        rep = mt.di_index(incs[0]) if m == "di_index" else mt.worst_case_di(incs)
    else:
        raise ConfigError(f"unknown metric {m!r}")
    rep.seed = int(cfg["seed"])
    rep.config_hash = mt.config_hash(cfg)
    write_json(out / "metric.json", rep.to_dict())
    (out / "metric.csv").write_text(mt.reports_to_csv([rep]))
    return rep.to_dict()


def cmd_occlusion(cfg: dict, out: Path) -> dict:
    if not cfg["model"] or not cfg["test"]:
        raise ConfigError("occlusion needs 'model' and 'test'")
    net = M.MlpModel.load(cfg["model"])
    test = data_io.read_dataset(cfg["test"], net.class_count)
    aux = data_io.read_dataset(cfg["aux"]) if cfg["aux"] else None
    size = msda.MixCoeffDist.parse(cfg["size"]) if cfg["size"] else None
    strat = R.OccluderStrategy(cfg["strategy"], fill=float(cfg["fill"]), aux=aux, decay=float(cfg["decay"]),
                               k=int(cfg["k"]), size=size)
    seed = int(cfg["seed"])
    proto = cfg["protocol"]

    def _sal(key):
        return data_io.read_tensor(cfg[key]).data.astype(np.float64) if cfg[key] else None

    if proto == "cut":
        curve = R.cut_occlusion(net, test, cfg["fractions"], strat, int(cfg["runs"]), seed, _sal("saliency_test"))
    elif proto == "iocc":
        if not cfg["train"]:
            raise ConfigError("iocc needs a 'train' dataset")
        train = data_io.read_dataset(cfg["train"], net.class_count)
        st = strat if cfg["strategy"] != "uniform_box" or cfg["size"] else R.OccluderStrategy("saliency_box", fill=strat.fill)
        curve = R.i_occlusion(net, train, test, cfg["fractions"], _sal("saliency_train"), _sal("saliency_test"),
                              seed, st)
    elif proto == "shuffle":
        res = R.shuffle_sensitivity(net, test, cfg["ks"], int(cfg["runs"]), seed)
        write_json(out / "shuffle.json", {str(k): v for k, v in res.items()})
        return {str(k): {"accuracy_drop": v["accuracy_drop"], "di_mean": v["di_mean"]} for k, v in res.items()}
    elif proto == "di":
        res = R.occlusion_di(net, test, strat, float(cfg["fractions"][-1]), int(cfg["runs"]), seed)
        write_json(out / "di.json", res)
        return {"di_mean": res["di_mean"], "worst_case_di": res["worst_case_di"]}
    else:
        raise ConfigError(f"unknown occlusion protocol {proto!r}")
    (out / "curve.csv").write_text(curve.to_csv())
    summary = json.loads(curve.to_json())
    write_json(out / "curve.json", summary)
    return summary


def cmd_experiment(cfg: dict, out: Path) -> dict:
    params = {k: v for k, v in cfg.items() if k not in ("preset", "seed")}
    params["seeds"] = [int(s) + int(cfg["seed"]) for s in params["seeds"]]
    report, reports = experiments.run_preset(cfg["preset"], params)
    write_json(out / "report.json", report)
    (out / "metrics.csv").write_text(mt.reports_to_csv(reports))
    write_json(out / "metrics.json", [r.to_dict() for r in reports])
    return {"preset": cfg["preset"], "metrics": {r.metric: r.value for r in reports}}


def _load_reports(path: str) -> list[mt.MetricReport]:
    obj = json.loads(Path(path).read_text())
    items = obj if isinstance(obj, list) else obj.get("metrics", [obj]) if isinstance(obj, dict) else []
    out = []
    for it in items:
        if not isinstance(it, dict) or "metric" not in it:
            raise ConfigError(f"{path}: not a metric report")
        out.append(mt.MetricReport(it["metric"], it["value"], it.get("units", ""), it.get("n_runs", 1),
                                   it.get("per_run") or [], it.get("seed"), it.get("config_hash", "")))
    return out


def cmd_report(cfg: dict, out: Path) -> dict:
    reports = []
    for p in cfg["inputs"]:
        reports += _load_reports(p)
    text = mt.reports_to_csv(reports)
    (out / "report.csv").write_text(text)
    return {"rows": len(reports), "csv": str(out / "report.csv")}


COMMANDS = {"ingest": cmd_ingest, "gen": cmd_gen, "augment": cmd_augment, "train": cmd_train, "id": cmd_id,
            "metrics": cmd_metrics, "occlusion": cmd_occlusion, "experiment": cmd_experiment, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mixlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat JSON config or a manifest from a previous run")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", default="mixlab-out", help="output directory")
        sp.add_argument("--quiet", action="store_true")
        if name == "experiment":
            sp.add_argument("preset", nargs="?", help="preset name (or 'preset' in the config)")
        if name == "report":
            sp.add_argument("inputs", nargs="*", help="metric report JSON files")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        cfg = load_config(args.command, args.config, getattr(args, "preset", None))
        if args.seed is not None:
            if "seed" not in cfg:
                raise ConfigError(f"command '{args.command}' takes no seed")
            cfg["seed"] = args.seed
        if args.command == "report" and args.inputs:
            cfg["inputs"] = list(cfg["inputs"]) + list(args.inputs)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        manifest = dict(cfg)
        manifest[RESERVED] = {"command": args.command, "version": __version__, "git": git_stamp(),
                              "seed": cfg.get("seed")}
        write_json(out / "manifest.json", manifest)
        summary = COMMANDS[args.command](cfg, out)
    except (MixlabError, ValueError, OSError, KeyError) as e:
        msg = " ".join(str(e).split())
        print(f"mixlab: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    log.info("mixlab %s: outputs in %s", args.command, out)
    if not args.quiet:
        print(json.dumps(summary, sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
