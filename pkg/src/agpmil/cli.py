"""``agpmil`` command line: synthesize, train, eval, ablate.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import data, metrics
from .config import ConfigError, RunConfig, resolve
from .model import CheckpointError, MilModel, load_checkpoint, predict_dataset, save_checkpoint
from .train import accuracy, train_epochs

log = logging.getLogger("agpmil")

ARTIFACTS = {
    "manifest": "manifest.json",
    "report": "train.jsonl",
    "checkpoint": "checkpoint",
    "eval": "eval.json",
    "attention": "attention.csv",
    "hist": "uncertainty_hist.csv",
    "ablation": "ablation.csv",
    "run": "run.json",
}
ABLATION_AXES = {
    "feature_dim": ("feature_dim", [32, 64, 128, 256]),
    "inducing": ("inducing_count", [16, 32, 64, 128]),
    "activation": ("gp_activation", ["relu", "sigmoid", "tanh"]),
}


class ValidationError(Exception):
    pass


# ----------------------------------------------------------------- helpers
def _source_dir(base: str, task: str) -> Path:
    base = Path(base)
    sub = {"mnist": "mnist", "cifar": "cifar-10-batches-bin"}[task]
    probe = {"mnist": "train-labels-idx1-ubyte", "cifar": "data_batch_1.bin"}[task]
    for cand in (base, base / sub):
        if (cand / probe).exists() or (cand / (probe + ".gz")).exists():
            return cand
    raise ValidationError(f"no {task} files found in {base} or {base / sub}")


def load_sources(cfg: RunConfig) -> dict:
    d = _source_dir(cfg.data_dir, cfg.task)
    return data.load_mnist(d) if cfg.task == "mnist" else data.load_cifar(d)


def synthesize_datasets(cfg: RunConfig, sources: dict) -> tuple:
    if cfg.task == "mnist":
        return data.make_mnist_bags(sources["train"], sources["test"], cfg.seed)
    return data.make_cifar_bags(sources["train"], sources["val"], sources["test"], cfg.seed)


def load_datasets(cfg: RunConfig) -> tuple:
    """``({split: BagDataset}, manifest_doc)`` from --manifest, or synthesised from the seed."""
    sources = load_sources(cfg)
    if cfg.manifest:
        doc = data.read_manifest(cfg.manifest)
        if doc["task"] != cfg.task:
            raise ValidationError(f"manifest task {doc['task']!r} does not match --task {cfg.task!r}")
    else:
        doc = data.to_manifest(synthesize_datasets(cfg, sources))
    return data.datasets_from_manifest(doc, sources), doc


def _write_run(cfg: RunConfig, out: Path, manifest_digest: str, **extra):
    doc = {"run_config": cfg.to_dict(), "manifest_digest": manifest_digest, "artifacts": ARTIFACTS}
    doc.update(extra)
    (out / ARTIFACTS["run"]).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


# ----------------------------------------------------------------- commands
def cmd_synthesize(args) -> Path:
    cfg = resolve(args.config, _overrides(args, ["task", "seed", "data_dir", "out_dir"]))
    sources = load_sources(cfg)
    for name, digest in (args.expect_digest or []):
        got = {k: v for s in sources.values() for k, v in s.digests.items()}.get(name)
        if got != digest:
            raise ValidationError(f"digest mismatch for {name}: expected {digest}, found {got}")
    datasets = synthesize_datasets(cfg, sources)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = data.to_manifest(datasets)
    path = out / ARTIFACTS["manifest"]
    digest = data.write_manifest(doc, path)
    print(", ".join(f"{ds.split} bags: {len(ds)}" for ds in datasets))
    for ds in datasets:
        counts = ds.class_counts()
        per = ", ".join(f"{n}={c}" for n, c in zip(ds.class_names, counts))
        if len(set(counts)) == 1:
            print(f"{ds.split}: {counts[0]} bags per class ({per})")
        else:
            print(f"{ds.split}: {per}")
    print(f"manifest: {path} sha256={digest}")
    return path


def _train_bags(cfg: RunConfig, splits: dict) -> list:
    bags = list(splits["train"])
    if cfg.max_train_bags is not None:
        bags = bags[: cfg.max_train_bags]
    return bags


def run_training(cfg: RunConfig, splits: dict, manifest_digest: str, out: Path):
    model = MilModel(cfg.model_config())
    val_split = "val" if "val" in splits else "test"
    tcfg = cfg.train_config()
    extra = {"run_config": cfg.to_dict(), "manifest_digest": manifest_digest}
    report = train_epochs(
        model,
        _train_bags(cfg, splits),
        tcfg,
        val=splits[val_split],
        report_path=out / ARTIFACTS["report"],
        checkpoint_extra=extra,
    )
    if cfg.epochs == 0:
        save_checkpoint(model, out / ARTIFACTS["checkpoint"], extra=extra)
    # first JSONL line carries the run echo; epoch records follow
    jsonl = out / ARTIFACTS["report"]
    header = json.dumps({"record": "run", **extra}, sort_keys=True) + "\n"
    jsonl.write_text(header + jsonl.read_text())
    return model, report, val_split


def cmd_train(args) -> tuple:
    cfg = resolve(
        args.config,
        _overrides(
            args,
            ["task", "attention", "epochs", "lr", "seed", "mc_samples", "data_dir", "out_dir", "manifest",
             "feature_dim", "inducing_count", "gp_activation", "lr_decay", "clip_norm", "max_train_bags",
             "class_balanced"],
        ),
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits, doc = load_datasets(cfg)
    if not cfg.manifest:
        data.write_manifest(doc, out / ARTIFACTS["manifest"])
    digest = data.manifest_digest(doc)
    _write_run(cfg, out, digest)
    model, report, val_split = run_training(cfg, splits, digest, out)
    if report.epochs:
        print(f"final {val_split} accuracy: {report.epochs[-1].val_acc:.4f}")
    else:
        print("no epochs run; checkpoint holds the initialisation")
    return out / (ARTIFACTS["checkpoint"] + ".json"), out / ARTIFACTS["report"]


def evaluate(model: MilModel, bags, mc_samples: int, seed: int) -> tuple:
    preds = predict_dataset(model, bags, s=mc_samples, seed=seed)
    report = metrics.uncertainty_report(preds, [b.label for b in bags], [b.bag_id for b in bags])
    return preds, report


def cmd_eval(args) -> Path:
    cfg = resolve(args.config, _overrides(args, ["task", "data_dir", "out_dir", "manifest", "mc_samples", "seed", "eval_split"]))
    out = Path(cfg.out_dir)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / ARTIFACTS["checkpoint"]
    if not ckpt.with_suffix(".json").exists():
        raise ValidationError(f"checkpoint manifest {ckpt.with_suffix('.json')} not found")
    model = load_checkpoint(ckpt)
    if cfg.manifest is None and (out / ARTIFACTS["manifest"]).exists():
        cfg.manifest = str(out / ARTIFACTS["manifest"])
    splits, doc = load_datasets(cfg)
    if cfg.eval_split not in splits:
        raise ValidationError(f"split {cfg.eval_split!r} not in manifest (have {sorted(splits)})")
    bags = list(splits[cfg.eval_split])
    preds, report = evaluate(model, bags, cfg.mc_samples, cfg.seed)
    report.extra = {
        "mc_samples": cfg.mc_samples,
        "split": cfg.eval_split,
        "checkpoint": str(ckpt.with_suffix(".json").name),
        "checkpoint_digest": hashlib.sha256(ckpt.with_suffix(".bin").read_bytes()).hexdigest(),
        "run_config": cfg.to_dict(),
        "manifest_digest": data.manifest_digest(doc),
        "model_config": model.config.to_dict(),
    }
    path = out / ARTIFACTS["eval"]
    metrics.write_report(report, path)
    metrics.export_attention(preds, out / ARTIFACTS["attention"], [b.bag_id for b in bags])
    metrics.write_histogram_csv(report, out / ARTIFACTS["hist"])
    print(f"{cfg.eval_split} accuracy: {report.accuracy:.4f}  kappa: {report.quadratic_kappa:.4f}  macro F1: {report.macro_f1:.4f}")
    print(f"mean total uncertainty: correct={report.mean_std_correct}  incorrect={report.mean_std_incorrect}")
    return path


def standard_error(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return math.nan
    return float(v.std(ddof=1) / math.sqrt(v.size))


def cmd_ablate(args) -> Path:
    if args.axis not in ABLATION_AXES:
        raise ValidationError(f"unknown ablation axis {args.axis!r}; choose from {sorted(ABLATION_AXES)}")
    base = resolve(
        args.config,
        _overrides(args, ["data_dir", "out_dir", "manifest", "epochs", "lr", "mc_samples", "max_train_bags"]) | {"task": "mnist", "attention": "agp"},
    )
    field, grid = ABLATION_AXES[args.axis]
    if args.values:
        grid = [type(grid[0])(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in grid:
        accs, kappas = [], []
        for seed in seeds:
            cfg = RunConfig(**(base.to_dict() | {field: value, "seed": seed, "out_dir": str(out / f"{args.axis}_{value}_seed{seed}")})).check()
            run_dir = Path(cfg.out_dir)
            run_dir.mkdir(parents=True, exist_ok=True)
            splits, doc = load_datasets(cfg)
            model, _, _ = run_training(cfg, splits, data.manifest_digest(doc), run_dir)
            _, report = evaluate(model, list(splits["test"]), cfg.mc_samples, seed)
            accs.append(report.accuracy)
            kappas.append(report.quadratic_kappa)
            log.info("ablate %s=%s seed %d: acc %.4f", field, value, seed, report.accuracy)
        se_acc, se_kappa = standard_error(accs), standard_error(kappas)
        rows.append([
            args.axis, value, len(seeds),
            repr(float(np.mean(accs))), "" if math.isnan(se_acc) else repr(se_acc),
            repr(float(np.mean(kappas))), "" if math.isnan(se_kappa) else repr(se_kappa),
            int(not math.isnan(se_acc)),
            ";".join(repr(a) for a in accs),
        ])
    path = out / ARTIFACTS["ablation"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "n_seeds", "acc_mean", "acc_se", "kappa_mean", "kappa_se", "se_available", "acc_per_seed"])
        w.writerows(rows)
    _write_run(base, out, "", ablation={"axis": args.axis, "grid": grid, "seeds": seeds})
    print(f"ablation table: {path}")
    return path


# ------------------------------------------------------------------- parser
def _digest_pair(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected NAME=SHA256")
    name, digest = text.split("=", 1)
    return name, digest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agpmil", description="Gaussian-process attention for multiple instance learning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file; flags override it")
        sp.add_argument("--data-dir", dest="data_dir", default=os.environ.get("AGPMIL_DATA"))
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synthesize", help="build MIL bags and write manifest.json")
    common(sp)
    sp.add_argument("--task", choices=["mnist", "cifar"])
    sp.add_argument("--expect-digest", dest="expect_digest", type=_digest_pair, action="append", metavar="NAME=SHA256")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--task", choices=["mnist", "cifar"])
    sp.add_argument("--attention")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--mc-samples", dest="mc_samples", type=int)
    sp.add_argument("--manifest")
    sp.add_argument("--feature-dim", dest="feature_dim", type=int)
    sp.add_argument("--inducing", dest="inducing_count", type=int)
    sp.add_argument("--activation", dest="gp_activation")
    sp.add_argument("--lr-decay", dest="lr_decay", choices=["none", "exp"])
    sp.add_argument("--clip-norm", dest="clip_norm", type=float)
    sp.add_argument("--max-train-bags", dest="max_train_bags", type=int)
    sp.add_argument("--class-balanced", dest="class_balanced", action="store_const", const=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--task", choices=["mnist", "cifar"])
    sp.add_argument("--checkpoint", help="checkpoint path without suffix (default: OUT_DIR/checkpoint)")
    sp.add_argument("--manifest")
    sp.add_argument("--mc-samples", dest="mc_samples", type=int)
    sp.add_argument("--split", dest="eval_split", choices=["train", "val", "test"])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="sweep one AGP hyperparameter on the MNIST task")
    common(sp)
    sp.add_argument("--axis", required=True)
    sp.add_argument("--values", help="comma-separated subset of the axis grid")
    sp.add_argument("--seeds", default="1,2,3")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--mc-samples", dest="mc_samples", type=int)
    sp.add_argument("--manifest")
    sp.add_argument("--max-train-bags", dest="max_train_bags", type=int)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValidationError, CheckpointError, data.DataFormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
