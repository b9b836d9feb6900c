"""Command-line driver for the density experiments.

Every subcommand reads an optional JSON config (``--config``); explicit
flags override the file, and the file overrides built-in defaults.
"""

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import cnn
from . import corpus as cp
from . import evalkit as ek
from . import numerics as nm
from . import synthgen as sg

SIG_DIGITS = 6


class CLIError(Exception):
    category = "error"


class ConfigurationError(CLIError):
    category = "config-error"


class MissingArtifactError(CLIError):
    category = "missing-artifact"


# ---------------------------------------------------------------------------
# serialisation helpers

def rounded(obj, digits=SIG_DIGITS):
    """Copy of ``obj`` with every float cut to ``digits`` significant digits."""
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if not math.isfinite(v) else float(f"{v:.{digits}g}")
    if isinstance(obj, dict):
        return {k: rounded(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [rounded(v, digits) for v in obj]
    if isinstance(obj, np.ndarray):
        return rounded(obj.tolist(), digits)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(rounded(obj), fh, indent=1)
        fh.write("\n")


def require(path, what):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{what} not found at {path}")
    return path


# ---------------------------------------------------------------------------
# data access

class SplitData:
    """Pixel stacks and labels of one partition."""

    def __init__(self, stack, density, birads, exam_ids):
        self.stack = stack
        self.density = np.asarray(density)
        self.birads = np.asarray(birads)
        self.exam_ids = list(exam_ids)

    def __len__(self):
        return len(self.exam_ids)

    def labels(self, kind):
        return self.density if kind == "density" else self.birads

    def pair(self, kind="density"):
        return self.stack, self.labels(kind)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SplitData(self.stack[idx], self.density[idx], self.birads[idx], [self.exam_ids[i] for i in idx])

    def with_birads(self):
        """Rows whose report carried a BI-RADS assessment."""
        keep = np.nonzero(self.birads >= 0)[0]
        return self.subset(keep)


def data_from_exams(exams, manifest, split):
    """Partition in-memory exams (already label-extracted manifest) by ``split``."""
    by_id = {e.exam_id: e for e in exams}
    records = manifest.by_id()
    out = {}
    for name in cp.SPLIT_NAMES:
        ids = split.exam_ids(manifest, name)
        chosen = [by_id[i] for i in ids]
        stack = np.stack([e.pixel_stack() for e in chosen]) if chosen else np.zeros((0, 4, 1, 1), np.uint16)
        density = [records[i].density for i in ids]
        birads = [-1 if records[i].birads is None else records[i].birads for i in ids]
        out[name] = SplitData(stack, density, birads, ids)
    return out


def load_corpus(corpus_dir):
    corpus_dir = Path(corpus_dir)
    manifest = cp.Manifest.read_jsonl(require(corpus_dir / "manifest.jsonl", "corpus manifest"))
    manifest.extract_labels()
    retained, excluded = cp.apply_exclusion(manifest)
    return retained, excluded


def load_partitions(corpus_dir, split_path, names=cp.SPLIT_NAMES):
    manifest, _ = load_corpus(corpus_dir)
    split = cp.SplitAssignment.load(require(split_path, "split file"))
    records = manifest.by_id()
    out = {}
    for name in names:
        ids = split.exam_ids(manifest, name)
        exams = [manifest.load_exam(records[i]) for i in ids]
        stack = np.stack([e.pixel_stack() for e in exams]) if exams else None
        out[name] = SplitData(
            stack,
            [records[i].density for i in ids],
            [-1 if records[i].birads is None else records[i].birads for i in ids],
            ids,
        )
        if not exams:
            raise ConfigurationError(f"partition {name} of {split_path} is empty")
    return out


def training_subset(data, fraction, seed):
    """Deterministic random subset holding ``fraction`` of the exams (at least one)."""
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"training fraction must be in (0, 1], got {fraction}")
    if fraction == 1:
        return data
    n = max(1, int(round(fraction * len(data))))
    idx = np.sort(np.random.default_rng([seed, 41]).choice(len(data), size=n, replace=False))
    return data.subset(idx)


# ---------------------------------------------------------------------------
# experiments (shared by the subcommands and the acceptance suite)

def fit_best_baseline(train, validation, variants=bl.VARIANTS, bins=bl.BIN_CANDIDATES, epochs=100,
                      lr=1e-3, batch_size=32, seed=0):
    """Tune bins for every variant; return the model with the best validation top-1."""
    results, best = {}, None
    for variant in variants:
        b, accs, model = bl.tune_bins(variant, train.pair(), validation.pair(), candidates=bins, seed=seed,
                                      epochs=epochs, lr=lr, batch_size=batch_size)
        results[variant] = {"bins": b, "validation_top1": accs}
        score = accs[b]
        if best is None or score > best[0]:
            best = (score, model)
    return best[1], results


def baseline_probs(model, data):
    return model.predict_features(bl.features_from_stack(data.stack, model.bins))


def cnn_config_for(data, share_columns=True, n_classes=4, overrides=None):
    h, w = data.stack.shape[2:]
    d = dict(height=h, width=w, share_columns=share_columns, n_classes=n_classes)
    d.update(overrides or {})
    if "column" in d:
        d["column"] = [nm.LayerSpec(**layer) if isinstance(layer, dict) else layer for layer in d["column"]]
    return cnn.MultiColumnConfig(**d)


def train_cnn_on(data, config, epochs, seed, policy=None, lr=1e-3, batch_size=8, fraction=1.0, init=None,
                 labels="density", log=None):
    train = data["train"]
    val = data["validation"]
    if labels == "birads":
        train, val = train.with_birads(), val.with_birads()
    train = training_subset(train, fraction, seed)
    return cnn.train_cnn(config, train.pair(labels), val.pair(labels), policy=policy, lr=lr, epochs=epochs,
                         batch_size=batch_size, seed=seed, init=init, log=log)


def scale_study(data, fractions=(0.01, 0.1, 1.0), seeds=(0, 1, 2), epochs=10, config=None, log=None, **kw):
    """Train one CNN per (fraction, seed); report test metrics and median macAUC per fraction."""
    config = config or cnn_config_for(data["train"])
    out = {"fractions": [], "epochs": epochs, "seeds": list(seeds)}
    for fraction in fractions:
        runs = []
        for seed in seeds:
            result = train_cnn_on(data, config, epochs, seed, fraction=fraction, log=log, **kw)
            report = ek.evaluate(cnn.predict_stack(result.params, config, data["test"].stack), data["test"].density)
            runs.append({"seed": seed, "best_epoch": result.best_epoch, "history": result.history,
                         "test": report.to_dict()})
        out["fractions"].append({
            "fraction": fraction,
            "train_exams": len(training_subset(data["train"], fraction, seeds[0])) if seeds else 0,
            "median_mac_auc": float(np.median([r["test"]["mac_auc"] for r in runs])),
            "median_top1": float(np.median([r["test"]["top1"] for r in runs])),
            "runs": runs,
        })
    return out


def pretrain_birads(data, config, epochs, seed, log=None, **kw):
    return train_cnn_on(data, config.with_classes(3), epochs, seed, labels="birads", log=log, **kw)


def bit_copied(init, pretrained):
    """Names of non-final tensors that are not bit-identical copies."""
    bad = []
    for name in init.names():
        if name.startswith(cnn.FINAL_LAYER + "."):
            continue
        if init[name].tobytes() != pretrained[name].tobytes():
            bad.append(name)
    return bad


def transfer_study(data, pretrained, config, seeds=(0, 1, 2, 3, 4), epochs=10, threshold=None, log=None,
                   scratch_runs=None, **kw):
    """Paired scratch vs transfer-initialised runs and their epochs to threshold.

    Without an explicit ``threshold`` the highest validation accuracy reached
    by every run is used, so both variants are guaranteed to reach it.
    ``scratch_runs`` maps seed to an already trained scratch result with the
    same settings.
    """
    scratch_runs = scratch_runs or {}
    runs = []
    for seed in seeds:
        init = cnn.transfer_init(pretrained, config, np.random.default_rng([seed, 53]))
        not_copied = bit_copied(init, pretrained)
        scratch = scratch_runs.get(seed) or train_cnn_on(data, config, epochs, seed, log=log, **kw)
        transfer = train_cnn_on(data, config, epochs, seed, init=init, log=log, **kw)
        runs.append({"seed": seed, "scratch": scratch, "transfer": transfer, "not_copied": not_copied})
    if threshold is None:
        threshold = min(max(r[v].val_accuracy) for r in runs for v in ("scratch", "transfer"))
    report = {"threshold": threshold, "epochs": epochs, "seeds": list(seeds), "runs": []}
    counts = {"scratch": [], "transfer": []}
    test = data["test"]
    for r in runs:
        entry = {"seed": r["seed"], "non_final_weights_copied": not r["not_copied"], "not_copied": r["not_copied"]}
        for variant in ("scratch", "transfer"):
            res = r[variant]
            n = cnn.epochs_to_threshold(res.history, threshold)
            counts[variant].append(n if n is not None else math.inf)
            entry[variant] = {
                "epochs_to_threshold": n,
                "best_epoch": res.best_epoch,
                "history": res.history,
                "test": ek.evaluate(cnn.predict_stack(res.params, config, test.stack), test.density).to_dict(),
            }
        report["runs"].append(entry)
    report["median_epochs_to_threshold"] = {k: float(np.median(v)) for k, v in counts.items()}
    return report


def reader_study(rankings, exam_ids, truths, cnn_probs, baseline_probs_, sample_size=100, seed=0):
    """Agreement tables and macAUC comparison on a random sample of exams.

    ``exam_ids``/``truths``/``*_probs`` describe the test split; at most
    ``sample_size`` exams are drawn.
    """
    exam_ids = list(exam_ids)
    n = min(sample_size, len(exam_ids))
    idx = np.sort(np.random.default_rng([seed, 61]).choice(len(exam_ids), size=n, replace=False))
    sample = [exam_ids[i] for i in idx]
    by_exam = ek.rankings_by_exam(rankings)
    missing = [e for e in sample if e not in by_exam]
    if missing:
        raise ek.MetricError(f"rankings are missing exams {missing}")
    readers = ek.reader_labels([r for r in rankings if r.exam_id in set(sample)], sample)
    truths = np.asarray(truths)[idx]
    cnn_p, base_p = np.asarray(cnn_probs)[idx], np.asarray(baseline_probs_)[idx]
    raters = {"L": truths, "N": ek.ranked_classes(cnn_p)[:, 0], "H": ek.ranked_classes(base_p)[:, 0]}
    raters.update(readers)
    four = ek.kappa_matrix(raters)
    two = ek.kappa_matrix({k: ek.collapse_superclass(v) for k, v in raters.items()}, 2)
    human_scores = np.array([ek.average_one_hot(by_exam[e]) for e in sample])
    out = {
        "sample_size": n,
        "exam_ids": sample,
        "kappa_4class": four.to_dict(),
        "kappa_2class": two.to_dict(),
    }
    for name, scores in (("human", human_scores), ("cnn", cnn_p), ("baseline", base_p)):
        try:
            out[f"{name}_mac_auc"] = ek.mac_auc(scores, truths)[1]
        except ek.UndefinedAUCError as exc:
            out[f"{name}_mac_auc"] = None
            out.setdefault("notes", []).append(f"{name}: {exc}")
    return out


# ---------------------------------------------------------------------------
# model files

def load_any_model(stem):
    stem = Path(stem)
    with open(require(f"{stem}.json", "model sidecar")) as fh:
        sidecar = json.load(fh)
    require(f"{stem}.ntw", "model weights")
    if "variant" in sidecar:
        return "baseline", bl.BaselineModel.load(stem)
    params, config, meta = cnn.load_model(stem)
    return "cnn", (params, config)


def model_probs(kind, model, data):
    if kind == "baseline":
        return baseline_probs(model, data)
    params, config = model
    return cnn.predict_stack(params, config, data.stack)


# ---------------------------------------------------------------------------
# subcommands

DEFAULTS = {
    "out": ".",
    "seed": 0,
    "corpus": None,
    "split": None,
    "exams": 2000,
    "patients": None,
    "phantom": {},
    "fractions": [0.01, 0.1, 1.0],
    "fraction": 1.0,
    "lr": 1e-3,
    "baseline_epochs": 100,
    "baseline_batch_size": 32,
    "variant": "best",
    "bins": list(bl.BIN_CANDIDATES),
    "epochs": 50,
    "pretrain_epochs": 50,
    "batch_size": 8,
    "max_translation": 8,
    "jitter": 0.05,
    "augment": True,
    "share_columns": True,
    "cnn": {},
    "seeds": 5,
    "threshold": None,
    "partition": "test",
    "model": None,
    "pretrained": None,
    "init": None,
    "rankings": None,
    "cnn_model": None,
    "baseline_model": None,
    "sample_size": 100,
}


def _split_path(cfg):
    return cfg["split"] or str(Path(_corpus(cfg)) / "split.json")


def _corpus(cfg):
    if not cfg["corpus"]:
        raise ConfigurationError("--corpus is required")
    return cfg["corpus"]


def _policy(cfg):
    if not cfg["augment"]:
        return cnn.AugmentationPolicy.disabled()
    return cnn.AugmentationPolicy(int(cfg["max_translation"]), float(cfg["jitter"]))


def _logger(cfg):
    return (lambda msg: print(msg, file=sys.stderr, flush=True)) if cfg.get("verbose") else None


def cmd_generate(cfg):
    phantom = dict(cfg["phantom"])
    phantom["seed"] = cfg["seed"]
    try:
        config = sg.PhantomConfig.from_dict(phantom)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad phantom config: {exc}") from None
    if cfg["patients"]:
        exams, _ = sg.generate_corpus(n_patients=int(cfg["patients"]), config=config)
    else:
        exams, _ = sg.generate_corpus(n_exams=int(cfg["exams"]), config=config)
    sg.write_corpus(exams, cfg["out"], config)
    return {"exams": len(exams), "patients": len({e.patient_id for e in exams}), "out": str(cfg["out"])}


def cmd_split(cfg):
    manifest, excluded = load_corpus(_corpus(cfg))
    split = cp.temporal_split(manifest)
    out = Path(cfg["out"])
    split.save(out / "split.json")
    summary = {
        "excluded_exams": excluded,
        "retained_exams": len(manifest),
        "patients": {"train": len(split.train), "validation": len(split.validation), "test": len(split.test)},
        "exams": {name: len(split.exam_ids(manifest, name)) for name in cp.SPLIT_NAMES},
    }
    write_json(out / "split_summary.json", summary)
    return summary


def cmd_train_baseline(cfg):
    data = load_partitions(_corpus(cfg), _split_path(cfg), ("train", "validation"))
    train = training_subset(data["train"], cfg["fraction"], cfg["seed"])
    variants = bl.VARIANTS if cfg["variant"] == "best" else (cfg["variant"],)
    for v in variants:
        if v not in bl.VARIANTS:
            raise ConfigurationError(f"unknown baseline variant {v!r}")
    bins = cfg["bins"] if isinstance(cfg["bins"], list) else [int(cfg["bins"])]
    model, results = fit_best_baseline(train, data["validation"], variants, bins, cfg["baseline_epochs"], cfg["lr"],
                                       cfg["baseline_batch_size"], cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "baseline")
    summary = {"variant": model.variant, "bins": model.bins, "best_epoch": model.best_epoch,
               "history": model.history, "search": results}
    write_json(out / "baseline_training.json", summary)
    return {k: summary[k] for k in ("variant", "bins", "best_epoch")}


def _cnn_config(cfg, data, n_classes=4):
    try:
        return cnn_config_for(data, cfg["share_columns"], n_classes, cfg["cnn"])
    except (TypeError, cnn.ConfigError) as exc:
        raise ConfigurationError(str(exc)) from None


def _train_cnn_command(cfg, labels, stem):
    data = load_partitions(_corpus(cfg), _split_path(cfg), ("train", "validation"))
    n_classes = 3 if labels == "birads" else 4
    config = _cnn_config(cfg, data["train"], n_classes)
    init = None
    if cfg["init"]:
        require(f"{cfg['init']}.ntw", "initialisation model")
        source, _, _ = cnn.load_model(cfg["init"])
        init = cnn.transfer_init(source, config, np.random.default_rng([cfg["seed"], 53]))
    epochs = cfg["pretrain_epochs"] if labels == "birads" else cfg["epochs"]
    result = train_cnn_on(data, config, epochs, cfg["seed"], policy=_policy(cfg), lr=cfg["lr"],
                          batch_size=cfg["batch_size"], fraction=cfg["fraction"], init=init, labels=labels,
                          log=_logger(cfg))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    meta = {"labels": labels, "epochs": epochs, "seed": cfg["seed"], "lr": cfg["lr"],
            "batch_size": cfg["batch_size"], "fraction": cfg["fraction"], "best_epoch": result.best_epoch,
            "history": rounded(result.history), "init": cfg["init"]}
    cnn.save_model(out / stem, result.params, config, meta)
    return {"model": str(out / stem), "best_epoch": result.best_epoch,
            "best_validation_accuracy": max(result.val_accuracy) if result.history else None}


def cmd_train_cnn(cfg):
    return _train_cnn_command(cfg, "density", "cnn")


def cmd_pretrain_birads(cfg):
    return _train_cnn_command(cfg, "birads", "birads")


def cmd_transfer_study(cfg):
    data = load_partitions(_corpus(cfg), _split_path(cfg))
    config = _cnn_config(cfg, data["train"])
    if cfg["pretrained"]:
        require(f"{cfg['pretrained']}.ntw", "pretrained model")
        pretrained, _, _ = cnn.load_model(cfg["pretrained"])
        pre_meta = {"source": cfg["pretrained"]}
    else:
        pre = pretrain_birads(data, config, cfg["pretrain_epochs"], cfg["seed"], policy=_policy(cfg), lr=cfg["lr"],
                              batch_size=cfg["batch_size"], log=_logger(cfg))
        pretrained = pre.params
        pre_meta = {"epochs": cfg["pretrain_epochs"], "history": pre.history, "best_epoch": pre.best_epoch}
    seeds = list(range(cfg["seed"], cfg["seed"] + int(cfg["seeds"])))
    report = transfer_study(data, pretrained, config, seeds, cfg["epochs"], cfg["threshold"], log=_logger(cfg),
                            policy=_policy(cfg), lr=cfg["lr"], batch_size=cfg["batch_size"],
                            fraction=cfg["fraction"])
    report["pretraining"] = pre_meta
    write_json(Path(cfg["out"]) / "transfer_study.json", report)
    return {"threshold": report["threshold"], "median_epochs_to_threshold": report["median_epochs_to_threshold"]}


def _eval_setup(cfg):
    if not cfg["model"]:
        raise ConfigurationError("--model is required")
    kind, model = load_any_model(cfg["model"])
    part = cfg["partition"]
    if part not in cp.SPLIT_NAMES:
        raise ConfigurationError(f"unknown partition {part!r}")
    data = load_partitions(_corpus(cfg), _split_path(cfg), (part,))[part]
    probs = model_probs(kind, model, data)
    return kind, data, probs


def cmd_eval(cfg):
    kind, data, probs = _eval_setup(cfg)
    report = ek.evaluate(probs, data.density)
    out = {"model": str(cfg["model"]), "kind": kind, "partition": cfg["partition"], "exams": len(data),
           "report": report.to_dict()}
    write_json(Path(cfg["out"]) / "eval.json", out)
    return out["report"]


def cmd_roc(cfg):
    _, data, probs = _eval_setup(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    aucs = {}
    for c in range(probs.shape[1]):
        curve = ek.roc_and_auc(probs[:, c], data.density == c)
        ek.write_roc_csv(curve, out / f"roc_class{c}.csv")
        aucs[f"class{c}"] = curve.auc
    return aucs


def cmd_scale_study(cfg):
    data = load_partitions(_corpus(cfg), _split_path(cfg))
    config = _cnn_config(cfg, data["train"])
    seeds = list(range(cfg["seed"], cfg["seed"] + int(cfg["seeds"])))
    report = scale_study(data, [float(f) for f in cfg["fractions"]], seeds, cfg["epochs"], config,
                         log=_logger(cfg), policy=_policy(cfg), lr=cfg["lr"], batch_size=cfg["batch_size"])
    write_json(Path(cfg["out"]) / "scale_study.json", report)
    return {f"{f['fraction']:g}": f["median_mac_auc"] for f in report["fractions"]}


def cmd_reader_study(cfg):
    for key in ("rankings", "cnn_model", "baseline_model"):
        if not cfg[key]:
            raise ConfigurationError(f"--{key.replace('_', '-')} is required")
    rankings = ek.read_rankings_csv(require(cfg["rankings"], "reader rankings"))
    data = load_partitions(_corpus(cfg), _split_path(cfg), ("test",))["test"]
    kind_n, model_n = load_any_model(cfg["cnn_model"])
    kind_h, model_h = load_any_model(cfg["baseline_model"])
    report = reader_study(rankings, data.exam_ids, data.density, model_probs(kind_n, model_n, data),
                          model_probs(kind_h, model_h, data), cfg["sample_size"], cfg["seed"])
    write_json(Path(cfg["out"]) / "reader_study.json", report)
    return {k: report[k] for k in ("sample_size", "human_mac_auc", "cnn_mac_auc", "baseline_mac_auc")}


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic four-view corpus"),
    "split": (cmd_split, "exclude unlabelled exams and split patients by date"),
    "train-baseline": (cmd_train_baseline, "train histogram baselines, keep the best"),
    "train-cnn": (cmd_train_cnn, "train the multi-column CNN on density labels"),
    "pretrain-birads": (cmd_pretrain_birads, "train the 3-way BI-RADS CNN used for transfer"),
    "transfer-study": (cmd_transfer_study, "compare scratch and transfer-initialised training"),
    "eval": (cmd_eval, "compute accuracy, superclass accuracy and AUC metrics"),
    "roc": (cmd_roc, "write one-vs-rest ROC curves as CSV"),
    "scale-study": (cmd_scale_study, "train on 1%, 10% and 100% of the training split"),
    "reader-study": (cmd_reader_study, "agreement between labels, models and readers"),
}


def _float_list(text):
    return [float(v) for v in text.split(",")]


def _int_list(text):
    return [int(v) for v in text.split(",")]


def build_parser():
    parser = argparse.ArgumentParser(prog="densitynet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
        if name != "generate":
            p.add_argument("--corpus", help="corpus directory")
        if name not in ("generate", "split"):
            p.add_argument("--split", help="split file (default: <corpus>/split.json)")
        if name == "generate":
            p.add_argument("--exams", type=int, help="number of exams (default 2000)")
            p.add_argument("--patients", type=int, help="number of patients (overrides --exams)")
            p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
            p.add_argument("--missing-fraction", type=float, dest="missing_density_fraction")
            p.add_argument("--height", type=int)
            p.add_argument("--width", type=int)
        if name in ("train-baseline", "train-cnn", "pretrain-birads", "transfer-study", "scale-study"):
            p.add_argument("--lr", type=float)
        if name in ("train-baseline", "train-cnn", "pretrain-birads", "transfer-study"):
            p.add_argument("--fraction", type=float, help="share of the training split to use")
        if name == "train-baseline":
            p.add_argument("--variant", choices=["best", *bl.VARIANTS])
            p.add_argument("--bins", type=_int_list, help="comma-separated bin counts to try")
            p.add_argument("--epochs", type=int, dest="baseline_epochs")
            p.add_argument("--batch-size", type=int, dest="baseline_batch_size")
        if name in ("train-cnn", "pretrain-birads", "transfer-study", "scale-study"):
            p.add_argument("--epochs", type=int)
            p.add_argument("--batch-size", type=int, dest="batch_size")
            p.add_argument("--no-augment", action="store_false", dest="augment")
            p.add_argument("--max-translation", type=int, dest="max_translation")
            p.add_argument("--jitter", type=float)
            p.add_argument("--no-share", action="store_false", dest="share_columns",
                           help="separate column weights per view")
        if name == "train-cnn":
            p.add_argument("--init", help="transfer-initialise from this model (path without extension)")
        if name in ("pretrain-birads", "transfer-study"):
            p.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
        if name == "transfer-study":
            p.add_argument("--pretrained", help="use this BI-RADS model instead of pretraining")
            p.add_argument("--threshold", type=float)
        if name in ("transfer-study", "scale-study"):
            p.add_argument("--seeds", type=int, help="number of consecutive seeds")
        if name == "scale-study":
            p.add_argument("--fractions", type=_float_list)
        if name in ("eval", "roc"):
            p.add_argument("--model", help="model path without extension")
            p.add_argument("--partition", choices=cp.SPLIT_NAMES)
        if name == "reader-study":
            p.add_argument("--rankings", help="reader rankings CSV")
            p.add_argument("--cnn-model", dest="cnn_model")
            p.add_argument("--baseline-model", dest="baseline_model")
            p.add_argument("--sample-size", type=int, dest="sample_size")
    return parser


PHANTOM_FLAGS = ("noise_sigma", "missing_density_fraction", "height", "width")


def resolve_config(args):
    """Defaults, then the JSON file, then explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS))
    flags = vars(args).copy()
    command = flags.pop("command")
    path = flags.pop("config", None)
    if path:
        try:
            with open(require(path, "config file")) as fh:
                file_cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        unknown = sorted(set(file_cfg) - set(DEFAULTS) - {"verbose"})
        if unknown:
            raise ConfigurationError(f"{path}: unknown keys {unknown}")
        cfg.update(file_cfg)
    for key in PHANTOM_FLAGS:
        if key in flags:
            cfg["phantom"] = {**cfg["phantom"], key: flags.pop(key)}
    cfg.update(flags)
    cfg["command"] = command
    if cfg["seed"] is None or int(cfg["seed"]) < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    if not 0 < float(cfg["fraction"]) <= 1:
        raise ConfigurationError(f"training fraction must be in (0, 1], got {cfg['fraction']}")
    return cfg


ERROR_CATEGORIES = (
    (CLIError, None),
    (FileNotFoundError, "missing-artifact"),
    (cp.PGMError, "data-error"),
    (cp.ManifestError, "data-error"),
    (cp.AmbiguousReportError, "data-error"),
    (nm.ShapeError, "shape-error"),
    (nm.NTWFormatError, "data-error"),
    (cnn.TransferError, "transfer-error"),
    (cnn.ConfigError, "config-error"),
    (ek.MetricError, "metric-error"),
    (nm.NonFiniteGradientError, "training-error"),
    (OSError, "io-error"),
    (ValueError, "value-error"),
)


def error_category(exc):
    for cls, category in ERROR_CATEGORIES:
        if isinstance(exc, cls):
            return category or exc.category
    return None


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        func = COMMANDS[cfg["command"]][0]
        start = time.perf_counter()
        summary = func(cfg)
        if cfg.get("verbose"):
            print(f"{cfg['command']} finished in {time.perf_counter() - start:.1f}s", file=sys.stderr)
        print(json.dumps(rounded(summary)))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one categorised line
        category = error_category(exc)
        if category is None:
            raise
        message = " ".join(str(exc).split())
        print(f"error: {category}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
