"""Desk-scale experiment presets built from the library pieces.

Each preset takes a flat parameter dict (already merged with its defaults) and
returns a JSON-serialisable report plus a list of :class:`MetricReport` rows.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import data_io, model as M, msda, robustness as R
from .metrics import MetricReport, config_hash
from .msda import MixCoeffDist

PRESET_DEFAULTS: dict[str, dict] = {
    "composite_bias": {
        "seeds": [0, 1, 2], "classes": 10, "n_per_class": 200, "test_per_class": 50,
        "easy_strength": 0.4, "epochs": 30, "lr": 0.05, "batch_size": 128, "hidden": [256],
        "method": "fmix", "dist": "beta(1,1)", "decay": 3.0, "min_fraction": 1 / 288,
    },
    "random_labels": {
        "seeds": [0, 1, 2], "classes": 10, "n_train": 512, "n_test": 20000, "easy_strength": 0.4,
        "epochs": 300, "lr": 0.05, "batch_size": 128, "hidden": [640], "method": "fmix",
        "dist": "beta(1,1)", "decay": 3.0, "fill": 0.5, "fractions": [1 / 288, 0.1, 0.25, 0.5],
    },
    "drop_class": {
        "seeds": [0], "classes": 10, "drop": 9, "n_per_class": 200, "test_per_class": 50,
        "easy_strength": 0.4, "epochs": 30, "lr": 0.05, "batch_size": 128, "hidden": [256],
        "occlusion_fraction": 0.5, "runs": 3, "cutout_fraction": 0.5,
    },
    "inter_dataset": {
        "seeds": [0], "classes": 10, "aux_classes": 5, "n_per_class": 200, "test_per_class": 50,
        "easy_strength": 0.4, "epochs": 30, "lr": 0.05, "batch_size": 128, "hidden": [256],
        "methods": ["mixup", "fmix"], "dist": "beta(1,1)", "decay": 3.0,
    },
}


def _cfg(p: dict, seed: int, augment=None, epochs=None) -> M.TrainConfig:
    return M.TrainConfig(epochs=int(p["epochs"] if epochs is None else epochs), batch_size=int(p["batch_size"]),
                         lr=float(p["lr"]), hidden=tuple(int(h) for h in p["hidden"]), seed=int(seed),
                         augment=augment)


def _round(v):
    return float(v)


# --------------------------------------------------------------------------
# augmentation hooks (images, soft targets, rng, epoch) -> (images, soft targets)


def region_mix_hook(method: str, dist: MixCoeffDist, rows: slice, classes: int, decay: float = 3.0) -> Callable:
    """Mix only the given image rows with a batch permutation; targets stay untouched."""

    def hook(imgs, tgt, rng, epoch):
        region = imgs[:, :, rows]
        mixed, _, _, _ = msda.mix_batch(region, np.argmax(tgt, axis=1), classes, method, dist, rng, decay)
        out = imgs.copy()
        out[:, :, rows] = mixed
        return out, tgt

    return hook


def mix_hook(method: str, dist: MixCoeffDist, classes: int, decay: float = 3.0) -> Callable:
    """Standard in-batch mixing with interpolated soft targets."""

    def hook(imgs, tgt, rng, epoch):
        out, soft, _, _ = msda.mix_batch(imgs, np.argmax(tgt, axis=1), classes, method, dist, rng, decay)
        return out, soft

    return hook


def rmix_hook(method: str, dist: MixCoeffDist, classes: int, decay: float = 3.0, aux=None) -> Callable:
    """Reformulated objective: mix inputs, keep the primary label.

    With ``aux`` the partner images come from another dataset.
    """

    def hook(imgs, tgt, rng, epoch):
        labels = np.argmax(tgt, axis=1)
        if aux is None:
            out, _, _, _ = msda.mix_batch(imgs, labels, classes, method, dist, rng, decay, keep_first_label=True)
        else:
            out, _, _ = msda.inter_dataset_batch(imgs, labels, aux, method, dist, rng, decay)
        return out, tgt

    return hook


def cutout_hook(fraction: float, fill: float = 0.0) -> Callable:
    def hook(imgs, tgt, rng, epoch):
        h, w = imgs.shape[-2:]
        out = np.stack([msda.cutout(x, msda.cut_box(h, w, fraction, True, rng), fill) for x in imgs])
        return out, tgt

    return hook


# --------------------------------------------------------------------------
# presets


def composite_bias(p: dict) -> tuple[dict, list[MetricReport]]:
    """Simplicity-bias analog: does mixing the easy half push the model onto the hard half?"""
    k = int(p["classes"])
    dist = MixCoeffDist.parse(p["dist"])
    runs = []
    for seed in p["seeds"]:
        train = data_io.gen_composite(int(p["n_per_class"]), k, float(p["easy_strength"]), seed)
        test = data_io.gen_composite(int(p["test_per_class"]), k, float(p["easy_strength"]), seed + 1000)
        conflict = data_io.gen_composite_conflict(int(p["test_per_class"]), k, float(p["easy_strength"]), seed + 2000)
        h = train.image_shape[1] // 2
        row = {"seed": seed}
        for name, hook in (("plain", None), ("mixed", region_mix_hook(p["method"], dist, slice(0, h), k, p["decay"]))):
            net, hist = M.train(train, _cfg(p, seed, hook))
            zeroed = test.images.copy()
            zeroed[:, :, h:] = 0.0
            row[name] = {
                "train_accuracy": hist[-1]["accuracy"] if hist else None,
                "test_accuracy": M.accuracy(net, test.images, test.labels),
                "bottom_zeroed_accuracy": M.accuracy(net, zeroed, test.labels),
                "easy_accuracy": M.accuracy(net, conflict.images, conflict.extras["easy_labels"]),
                "hard_accuracy": M.accuracy(net, conflict.images, conflict.extras["hard_labels"]),
                "i_occlusion_min_fraction": R.i_occlusion(net, train, test, [float(p["min_fraction"])],
                                                          seed=seed).score[0],
                "model_fingerprint": net.fingerprint(),
            }
        row["direction_holds"] = bool(row["plain"]["easy_accuracy"] > row["plain"]["hard_accuracy"]
                                      and row["mixed"]["hard_accuracy"] > row["mixed"]["easy_accuracy"])
        runs.append(row)
    h = config_hash(p)
    reports = []
    for arm in ("plain", "mixed"):
        for half in ("easy", "hard"):
            vals = [100.0 * r[arm][f"{half}_accuracy"] for r in runs]
            reports.append(MetricReport(f"composite_{arm}_{half}_accuracy", float(np.mean(vals)), "pp",
                                        len(vals), vals, seed=int(p["seeds"][0]), config_hash=h))
    return {"preset": "composite_bias", "runs": runs,
            "direction_majority": sum(r["direction_holds"] for r in runs) * 2 > len(runs)}, reports


def random_labels(p: dict) -> tuple[dict, list[MetricReport]]:
    """Memorisers trained on random labels, with and without mixing; CutOcclusion vs iOcclusion."""
    k = int(p["classes"])
    dist = MixCoeffDist.parse(p["dist"])
    fractions = [float(f) for f in p["fractions"]]
    half = int(np.argmin(np.abs(np.asarray(fractions) - 0.5)))
    runs = []
    for seed in p["seeds"]:
        n_train = int(p["n_train"])
        base = data_io.gen_composite(-(-n_train // k), k, float(p["easy_strength"]), seed)
        train = M.randomize_labels(base.subset(np.arange(n_train)), seed)
        # the whole dataset is relabelled, so test accuracy sits at chance before and after occlusion
        test = M.randomize_labels(
            data_io.gen_composite(int(p["n_test"]) // k, k, float(p["easy_strength"]), seed + 1000), seed + 1)
        row = {"seed": seed}
        for name, hook in (("basic", None), ("mixed", mix_hook(p["method"], dist, k, p["decay"]))):
            net, hist = M.train(train, _cfg(p, seed, hook))
            cut = R.cut_occlusion(net, test, [0.5], R.OccluderStrategy("uniform_box", fill=float(p["fill"])),
                                  runs=1, seed=seed)
            iocc = R.i_occlusion(net, train, test, fractions, seed=seed,
                                 strategy=R.OccluderStrategy("saliency_box", fill=float(p["fill"])))
            row[name] = {
                "train_accuracy": M.accuracy(net, train.images, train.labels),
                "test_accuracy": iocc.clean_accuracy,
                "cut_occlusion_50": 100.0 * cut.accuracy[0],
                "i_occlusion_50": iocc.score[half],
                "i_occlusion_curve": {"fractions": fractions, "score": iocc.score,
                                      "train_occ": iocc.train_accuracy, "test_occ": iocc.accuracy},
                "model_fingerprint": net.fingerprint(),
            }
        row["cut_gap"] = abs(row["mixed"]["cut_occlusion_50"] - row["basic"]["cut_occlusion_50"])
        row["iocc_gap"] = row["mixed"]["i_occlusion_50"] - row["basic"]["i_occlusion_50"]
        runs.append(row)
    h = config_hash(p)
    reports = []
    for arm in ("basic", "mixed"):
        for key in ("cut_occlusion_50", "i_occlusion_50"):
            vals = [r[arm][key] for r in runs]
            reports.append(MetricReport(f"random_labels_{arm}_{key}", float(np.mean(vals)), "pp", len(vals), vals,
                                        seed=int(p["seeds"][0]), config_hash=h))
    return {"preset": "random_labels", "runs": runs, "flags": ["iOcclusion (operationalized)"]}, reports


def drop_class(p: dict) -> tuple[dict, list[MetricReport]]:
    """Remove one class, retrain, and measure DI when occluding with patches of the removed class."""
    k = int(p["classes"])
    c = int(p["drop"])
    runs = []
    for seed in p["seeds"]:
        full_train = data_io.gen_composite(int(p["n_per_class"]), k, float(p["easy_strength"]), seed)
        full_test = data_io.gen_composite(int(p["test_per_class"]), k, float(p["easy_strength"]), seed + 1000)
        train, mapping = M.drop_class(full_train, c)
        test, _ = M.drop_class(full_test, c)
        removed = full_test.subset(np.flatnonzero(full_test.labels == c))
        strategies = {"other_image_box": R.OccluderStrategy("other_image_box", aux=removed),
                      "uniform_box": R.OccluderStrategy("uniform_box", fill=0.0)}
        row = {"seed": seed, "mapping": {str(a): b for a, b in mapping.items()}}
        for name, hook in (("basic", None), ("cutout", cutout_hook(float(p["cutout_fraction"])))):
            net, _ = M.train(train, _cfg(p, seed, hook))
            res = {"output_classes": int(net.class_count), "test_accuracy": M.accuracy(net, test.images, test.labels)}
            for sname, strat in strategies.items():
                di = R.occlusion_di(net, test, strat, float(p["occlusion_fraction"]), int(p["runs"]), seed)
                res[sname] = {"di_mean": di["di_mean"], "di_per_run": di["di_per_run"],
                              "worst_case_di": di["worst_case_di"]}
            row[name] = res
        runs.append(row)
    h = config_hash(p)
    reports = []
    for arm in ("basic", "cutout"):
        for sname in ("other_image_box", "uniform_box"):
            vals = [r[arm][sname]["di_mean"] for r in runs]
            reports.append(MetricReport(f"drop_class_{arm}_{sname}_di", float(np.mean(vals)), "pp", len(vals), vals,
                                        seed=int(p["seeds"][0]), config_hash=h))
    return {"preset": "drop_class", "runs": runs, "flags": ["DI (operationalized)"]}, reports


def inter_dataset(p: dict) -> tuple[dict, list[MetricReport]]:
    """Train with mixing against a second dataset whose labels are ignored."""
    k = int(p["classes"])
    dist = MixCoeffDist.parse(p["dist"])
    runs = []
    for seed in p["seeds"]:
        train = data_io.gen_composite(int(p["n_per_class"]), k, float(p["easy_strength"]), seed)
        test = data_io.gen_composite(int(p["test_per_class"]), k, float(p["easy_strength"]), seed + 1000)
        aux = data_io.gen_composite(int(p["n_per_class"]), int(p["aux_classes"]), float(p["easy_strength"]), seed + 3000)
        row = {"seed": seed}
        net, _ = M.train(train, _cfg(p, seed))
        row["plain"] = M.accuracy(net, test.images, test.labels)
        for method in p["methods"]:
            for arm, aux_ds in (("intra", None), ("inter", aux)):
                net, _ = M.train(train, _cfg(p, seed, rmix_hook(method, dist, k, p["decay"], aux_ds)))
                row[f"{method}_{arm}"] = M.accuracy(net, test.images, test.labels)
        runs.append(row)
    h = config_hash(p)
    reports = []
    for key in ["plain"] + [f"{m}_{a}" for m in p["methods"] for a in ("intra", "inter")]:
        vals = [100.0 * r[key] for r in runs]
        reports.append(MetricReport(f"inter_dataset_{key}_accuracy", float(np.mean(vals)), "pp", len(vals), vals,
                                    seed=int(p["seeds"][0]), config_hash=h))
    return {"preset": "inter_dataset", "runs": runs}, reports


PRESETS = {"composite_bias": composite_bias, "random_labels": random_labels,
           "drop_class": drop_class, "inter_dataset": inter_dataset}


def run_preset(name: str, params: dict | None = None):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = dict(PRESET_DEFAULTS[name])
    p.update(params or {})
    return PRESETS[name](p)
