"""``toolrefine`` command line: each pipeline stage as a subcommand.

Stages talk to each other only through files (JSON lines for detections,
labels and ground truth; JSON for manifests, matrices and reports; the
binary checkpoint for models).  A JSON config file may supply any option;
flags given explicitly on the command line win over the file.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import click
from click.core import ParameterSource

from . import __version__
from .cooccur import CooccurrenceMatrix, Variant, cooccurrence_from_labels
from .core import (
    GroundTruthBox,
    load_detections,
    load_groundtruth,
    load_labels,
    load_manifest,
    save_detections,
    save_groundtruth,
    save_labels,
    save_manifest,
)
from .evaluation import annotation_budget, evaluate
from .gradcheck import check_gradients, random_problem
from .milnet import NetworkConfig, init_model, load_checkpoint, save_checkpoint
from .refine import class_accuracy, refine_labels
from .synth import SynthConfig, generate
from .trainer import TrainConfig, pair_bags, train

CONFIG_ENV = "TOOLREFINE_CONFIG"

log = logging.getLogger("toolrefine")


class CliError(click.ClickException):
    """Printed as one JSON line on stderr."""

    def show(self, file=None):
        click.echo(json.dumps({"error": type(self).__name__, "message": self.message}), err=True)


def _fail(exc: Exception) -> CliError:
    err = CliError(str(exc))
    err.exit_code = 2
    return err


def _load_config(path) -> dict:
    if path is None:
        path = os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise _fail(ValueError(f"cannot read config {path}: {exc}"))
    base = Path(path).resolve().parent
    # relative paths in a config file are relative to the file itself
    for key, value in list(cfg.get("paths", {}).items()):
        if value is not None and not os.path.isabs(value):
            cfg["paths"][key] = str(base / value)
    return cfg


def _resolve(ctx: click.Context, cfg: dict, section: str, mapping: dict[str, str]) -> dict:
    """Merge flag values with a config section; explicit flags win."""
    values = {}
    sect = cfg.get(section, {})
    for param, key in mapping.items():
        source = ctx.get_parameter_source(param)
        if source in (ParameterSource.DEFAULT, ParameterSource.DEFAULT_MAP) and key in sect:
            values[key] = sect[key]
        else:
            values[key] = ctx.params[param]
    return values


def _path(ctx, cfg, param, key, required=True, must_exist=True):
    value = ctx.params.get(param)
    if value is None or ctx.get_parameter_source(param) == ParameterSource.DEFAULT:
        value = cfg.get("paths", {}).get(key, value)
    if value is None:
        if required:
            raise _fail(ValueError(f"missing required path --{param.replace('_', '-')}"))
        return None
    if must_exist and not Path(value).exists():
        raise _fail(FileNotFoundError(f"{key} file not found: {value}"))
    return Path(value)


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _guard(fn):
    """Turn library exceptions into single-line CLI errors."""
    import functools

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except (ValueError, KeyError, OSError, RuntimeError) as exc:
            raise _fail(exc) from exc

    return wrapper


config_option = click.option(
    "--config", "config_path", type=click.Path(dir_okay=False), default=None,
    help=f"JSON config file (default: ${CONFIG_ENV}).",
)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Refine pseudo-label categories with weak image-level labels."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# synth-gen

SYNTH_FLAGS = {
    "num_classes": "num_classes", "feature_dim": "feature_dim", "num_images": "num_images",
    "prototype_separation": "prototype_separation", "presence_prob": "presence_prob",
    "noise_sigma": "noise_sigma", "corruption_rate": "teacher_corruption_rate",
    "box_jitter": "box_jitter", "max_instances": "max_instances_per_class", "seed": "seed",
}


def _truth_lines(ds):
    for det, truth, flips in zip(ds.detections, ds.true_categories, ds.corrupted):
        yield {"image_id": det.image_id, "categories": truth, "corrupted": flips}


def write_synth(ds, out_dir: Path) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "manifest": out_dir / "manifest.json",
        "detections": out_dir / "detections.jsonl",
        "labels": out_dir / "labels.jsonl",
        "groundtruth": out_dir / "groundtruth.jsonl",
        "truth": out_dir / "truth.jsonl",
    }
    save_manifest(paths["manifest"], ds.manifest)
    save_detections(paths["detections"], ds.detections)
    save_labels(paths["labels"], ds.labels)
    save_groundtruth(paths["groundtruth"], ds.groundtruth)
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        for line in _truth_lines(ds):
            fh.write(json.dumps(line, separators=(",", ":")) + "\n")
    return paths


def _synth_config(ctx, cfg) -> SynthConfig:
    section = dict(cfg.get("synth", {}))
    section.update(_resolve(ctx, cfg, "synth", SYNTH_FLAGS))
    return SynthConfig.from_dict(section)


@main.command("synth-gen")
@config_option
@click.option("--out-dir", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--num-classes", type=int, default=6, show_default=True)
@click.option("--feature-dim", type=int, default=16, show_default=True)
@click.option("--num-images", type=int, default=600, show_default=True)
@click.option("--prototype-separation", type=float, default=4.0, show_default=True)
@click.option("--presence-prob", type=float, default=0.3, show_default=True)
@click.option("--noise-sigma", type=float, default=1.0, show_default=True)
@click.option("--corruption-rate", type=float, default=0.0, show_default=True,
              help="Fraction of confusable-pair proposals whose teacher class is swapped.")
@click.option("--box-jitter", type=float, default=0.0, show_default=True)
@click.option("--max-instances", type=int, default=1, show_default=True, help="Max instances per class per image.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_context
@_guard
def synth_gen(ctx, config_path, out_dir, **_):
    """Write a synthetic dataset (manifest, detections, labels, ground truth, truth)."""
    cfg = _load_config(config_path)
    out = _path(ctx, cfg, "out_dir", "out_dir", must_exist=False)
    ds = generate(_synth_config(ctx, cfg))
    paths = write_synth(ds, out)
    click.echo(json.dumps({k: str(v) for k, v in paths.items()}))


# ---------------------------------------------------------------------------
# cooccur


@main.command("cooccur")
@config_option
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--labels", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Output S matrix JSON.")
@click.option("--variant", type=click.Choice([v.value for v in Variant]), default="literal", show_default=True)
@click.option("--keep-diagonal", is_flag=True, default=False, help="Keep the PMI self-scores on the diagonal.")
@click.option("--smoothing", type=float, default=0.0, show_default=True, help="Pseudo-images with every class present.")
@click.pass_context
@_guard
def cooccur_cmd(ctx, config_path, **_):
    """Estimate class co-occurrence from image labels and write the S matrix."""
    cfg = _load_config(config_path)
    manifest = load_manifest(_path(ctx, cfg, "manifest", "manifest"))
    labels = load_labels(_path(ctx, cfg, "labels", "labels"), manifest)
    opts = _resolve(ctx, cfg, "cooccur", {"variant": "variant", "keep_diagonal": "keep_diagonal",
                                          "smoothing": "smoothing"})
    S = cooccurrence_from_labels(labels, manifest.num_classes, **opts)
    out = _path(ctx, cfg, "out", "cooccur", must_exist=False)
    S.save(out)
    click.echo(json.dumps({"cooccur": str(out), "variant": S.variant.value}))


# ---------------------------------------------------------------------------
# train

NET_FLAGS = {"model_dim": "model_dim", "num_heads": "num_heads", "num_layers": "num_layers",
             "mlp_hidden_dim": "mlp_hidden_dim", "ff_hidden_dim": "ff_hidden_dim"}
TRAIN_FLAGS = {"alpha": "alpha", "lr": "base_lr", "epochs": "epochs", "clamp_eps": "clamp_eps",
               "momentum": "momentum", "schedule": "schedule"}


def network_options(f):
    for name, default in reversed([("--model-dim", 64), ("--num-heads", 4), ("--num-layers", 5),
                                   ("--mlp-hidden-dim", 64), ("--ff-hidden-dim", 128)]):
        f = click.option(name, type=int, default=default, show_default=True)(f)
    return f


def train_options(f):
    opts = [
        click.option("--alpha", type=float, default=1e-4, show_default=True, help="Co-occurrence loss weight."),
        click.option("--lr", type=float, default=5e-3, show_default=True, help="Base SGD learning rate."),
        click.option("--epochs", type=int, default=50, show_default=True),
        click.option("--clamp-eps", type=float, default=1e-7, show_default=True),
        click.option("--momentum", type=float, default=0.0, show_default=True),
        click.option("--schedule", type=click.Choice(["iteration", "epoch"]), default="iteration",
                     show_default=True, help="Cosine annealing stepped per bag or per epoch."),
        click.option("--seed", type=int, default=0, show_default=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _seed(ctx, cfg):
    if ctx.get_parameter_source("seed") == ParameterSource.DEFAULT and "seed" in cfg:
        return int(cfg["seed"])
    return ctx.params["seed"]


def _train_stage(ctx, cfg, manifest, detections, labels, S, ckpt_path, log_path):
    seed = _seed(ctx, cfg)
    net = NetworkConfig(feature_dim=manifest.feature_dim, num_classes=manifest.num_classes,
                        seed=seed, **_resolve(ctx, cfg, "network", NET_FLAGS))
    tcfg = _resolve(ctx, cfg, "train", TRAIN_FLAGS)
    tcfg = TrainConfig(seed=seed, s_variant=S.variant.value, **tcfg)
    result = train(init_model(net), pair_bags(detections, labels), S, tcfg)
    save_checkpoint(result.model, ckpt_path)
    result.write_csv(log_path)
    return result


@main.command("train")
@config_option
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--detections", type=click.Path(dir_okay=False), default=None, help="Teacher detections on the weak set.")
@click.option("--labels", type=click.Path(dir_okay=False), default=None)
@click.option("--cooccur", type=click.Path(dir_okay=False), default=None, help="S matrix from `cooccur`.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Checkpoint path.")
@click.option("--loss-log", type=click.Path(dir_okay=False), default=None, help="CSV loss log path.")
@network_options
@train_options
@click.pass_context
@_guard
def train_cmd(ctx, config_path, **_):
    """Train the refinement model on weak bags (one image = one bag = one SGD step)."""
    cfg = _load_config(config_path)
    manifest = load_manifest(_path(ctx, cfg, "manifest", "manifest"))
    detections = load_detections(_path(ctx, cfg, "detections", "detections"), manifest)
    labels = load_labels(_path(ctx, cfg, "labels", "labels"), manifest)
    S = CooccurrenceMatrix.load(_path(ctx, cfg, "cooccur", "cooccur"))
    if S.S.shape[0] != manifest.num_classes:
        raise _fail(ValueError(f"S is {S.S.shape[0]}x{S.S.shape[0]}, manifest has C={manifest.num_classes}"))
    ckpt = _path(ctx, cfg, "out", "checkpoint", must_exist=False)
    log_path = _path(ctx, cfg, "loss_log", "loss_log", required=False, must_exist=False) or ckpt.with_suffix(".csv")
    result = _train_stage(ctx, cfg, manifest, detections, labels, S, ckpt, log_path)
    click.echo(json.dumps({"checkpoint": str(ckpt), "loss_log": str(log_path),
                           "final_loss": result.log[-1].mean_loss, "steps": result.total_steps,
                           "skipped_empty": result.skipped_empty}))


# ---------------------------------------------------------------------------
# refine


def _merged_groundtruth(full_gt: dict, refined) -> dict:
    merged = dict(full_gt)
    for det in refined:
        if det.image_id in merged:
            raise ValueError(f"image {det.image_id!r} is in both the full and the weak set")
        merged[det.image_id] = [GroundTruthBox(p.box, p.category) for p in det.proposals]
    return merged


@main.command("refine")
@config_option
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--detections", type=click.Path(dir_okay=False), default=None)
@click.option("--checkpoint", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Refined detections path.")
@click.option("--min-prob", type=float, default=None, help="Drop proposals whose refined probability is lower.")
@click.option("--merge-groundtruth", type=click.Path(dir_okay=False), default=None,
              help="Fully annotated ground truth to merge with the refined pseudo-labels.")
@click.option("--merged-out", type=click.Path(dir_okay=False), default=None,
              help="Where to write the merged student training set (ground-truth format).")
@click.pass_context
@_guard
def refine_cmd(ctx, config_path, min_prob, **_):
    """Rewrite teacher pseudo-label categories with a trained model."""
    cfg = _load_config(config_path)
    manifest = load_manifest(_path(ctx, cfg, "manifest", "manifest"))
    detections = load_detections(_path(ctx, cfg, "detections", "detections"), manifest)
    model = load_checkpoint(_path(ctx, cfg, "checkpoint", "checkpoint"),
                            expected={"feature_dim": manifest.feature_dim, "num_classes": manifest.num_classes})
    if min_prob is None:
        min_prob = cfg.get("refine", {}).get("min_prob")
    refined = refine_labels(model, detections, min_prob)
    out = _path(ctx, cfg, "out", "refined", must_exist=False)
    save_detections(out, refined)
    report = {"refined": str(out), "images": len(refined),
              "changed": sum(p.refined_category != p.teacher_category for d in refined for p in d.proposals)}
    merge = _path(ctx, cfg, "merge_groundtruth", "full_groundtruth", required=False)
    if merge is not None:
        merged_out = _path(ctx, cfg, "merged_out", "merged", must_exist=False)
        save_groundtruth(merged_out, _merged_groundtruth(load_groundtruth(merge, manifest), refined))
        report["merged"] = str(merged_out)
    click.echo(json.dumps(report))


# ---------------------------------------------------------------------------
# eval


def _eval_outputs(report, stem: Path) -> dict:
    report.write_json(stem.with_suffix(".json"))
    report.write_csv(stem.with_suffix(".csv"))
    return {"map": report.map, "json": str(stem.with_suffix(".json")), "csv": str(stem.with_suffix(".csv"))}


@main.command("eval")
@config_option
@click.option("--manifest", type=click.Path(dir_okay=False), default=None)
@click.option("--predictions", type=click.Path(dir_okay=False), default=None, help="Detections or refined detections.")
@click.option("--groundtruth", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Report path stem (.json and .csv are written).")
@click.pass_context
@_guard
def eval_cmd(ctx, config_path, **_):
    """COCO-style mAP over IoU 0.50:0.95."""
    cfg = _load_config(config_path)
    manifest = load_manifest(_path(ctx, cfg, "manifest", "manifest"))
    preds = load_detections(_path(ctx, cfg, "predictions", "predictions"), manifest)
    gt = load_groundtruth(_path(ctx, cfg, "groundtruth", "groundtruth"), manifest)
    report = evaluate(preds, gt, manifest.num_classes, manifest.class_names)
    out = _path(ctx, cfg, "out", "eval", required=False, must_exist=False)
    if out is None:
        click.echo(json.dumps(report.to_json()))
    else:
        click.echo(json.dumps(_eval_outputs(report, out)))


# ---------------------------------------------------------------------------
# budget


@main.command("budget")
@click.option("--boxes", type=int, default=0, show_default=True, help="Number of box annotations.")
@click.option("--weak-images", type=int, default=0, show_default=True, help="Number of image-level labelled images.")
@click.option("--seconds-per-box", type=float, default=10.0, show_default=True)
@click.option("--seconds-per-image-label", type=float, default=1.0, show_default=True)
@click.option("--mode", type=click.Choice(["per_image", "per_class"]), default="per_image", show_default=True)
@click.option("--present-classes", type=int, default=None, help="Total class labels given (per_class mode).")
@click.option("--json", "as_json", is_flag=True, help="Print the full report as JSON.")
@_guard
def budget_cmd(boxes, weak_images, seconds_per_box, seconds_per_image_label, mode, present_classes, as_json):
    """Annotation time for a mix of box and image-level labels."""
    report = annotation_budget(boxes, weak_images, seconds_per_box, seconds_per_image_label, mode, present_classes)
    if as_json:
        click.echo(json.dumps(report.to_json()))
    else:
        total = report.total_seconds
        click.echo(f"total_seconds={int(total) if float(total).is_integer() else total}")


# ---------------------------------------------------------------------------
# gradcheck


@main.command("gradcheck")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--configs", type=int, default=1, show_default=True, help="Number of random small problems.")
@click.option("--step", type=float, default=1e-4, show_default=True, help="Central-difference step.")
@click.option("--rtol", type=float, default=1e-4, show_default=True)
@click.option("--atol", type=float, default=1e-6, show_default=True)
def gradcheck_cmd(seed, configs, step, rtol, atol):
    """Compare analytic gradients of the bag loss with finite differences."""
    worst, failed, checked = 0.0, 0, 0
    for k in range(configs):
        model, X, y, S, alpha = random_problem(seed + k)
        r = check_gradients(model, X, y, S, alpha, step=step, rtol=rtol, atol=atol)
        worst = max(worst, r.max_rel_error)
        failed += r.num_failed
        checked += r.num_checked
    status = "PASS" if failed == 0 and worst < rtol else "FAIL"
    click.echo(f"max_rel_error={worst:.3e} checked={checked} failed={failed} {status}")
    if status == "FAIL":
        sys.exit(1)


# ---------------------------------------------------------------------------
# pipeline


@main.command("pipeline")
@config_option
@click.option("--out-dir", type=click.Path(file_okay=False), default=None)
@network_options
@train_options
@click.pass_context
@_guard
def pipeline_cmd(ctx, config_path, **_):
    """synth-gen (when configured) -> cooccur -> train -> refine -> eval, plus a JSON summary."""
    cfg = _load_config(config_path)
    out = _path(ctx, cfg, "out_dir", "out_dir", must_exist=False)
    out.mkdir(parents=True, exist_ok=True)
    paths = dict(cfg.get("paths", {}))
    truth_path = None
    if "synth" in cfg and "detections" not in paths:
        synth_cfg = dict(cfg["synth"])
        synth_cfg.setdefault("seed", _seed(ctx, cfg))
        written = write_synth(generate(SynthConfig.from_dict(synth_cfg)), out / "data")
        paths.update({k: str(v) for k, v in written.items()})
        truth_path = written["truth"]
    for key in ("manifest", "detections", "labels", "groundtruth"):
        if key not in paths:
            raise _fail(ValueError(f"config needs paths.{key} or a synth section"))
        if not Path(paths[key]).exists():
            raise _fail(FileNotFoundError(f"{key} file not found: {paths[key]}"))

    manifest = load_manifest(paths["manifest"])
    detections = load_detections(paths["detections"], manifest)
    labels = load_labels(paths["labels"], manifest)
    gt = load_groundtruth(paths["groundtruth"], manifest)

    co = cfg.get("cooccur", {})
    S = cooccurrence_from_labels(labels, manifest.num_classes, co.get("variant", "literal"),
                                 co.get("keep_diagonal", False), co.get("smoothing", 0.0))
    S.save(out / "cooccur.json")

    result = _train_stage(ctx, cfg, manifest, detections, labels, S, out / "model.ckpt", out / "loss_log.csv")
    refined = refine_labels(result.model, detections, cfg.get("refine", {}).get("min_prob"))
    save_detections(out / "refined.jsonl", refined)

    before = evaluate(detections, gt, manifest.num_classes, manifest.class_names)
    after = evaluate(refined, gt, manifest.num_classes, manifest.class_names)
    bcfg = cfg.get("budget", {})
    budget = annotation_budget(bcfg.get("num_boxes", 0), len(labels),
                               bcfg.get("seconds_per_box", 10.0), bcfg.get("seconds_per_image_label", 1.0))
    summary = {
        "map_unrefined": before.map,
        "map_refined": after.map,
        "eval_unrefined": _eval_outputs(before, out / "eval_unrefined"),
        "eval_refined": _eval_outputs(after, out / "eval_refined"),
        "budget": budget.to_json(),
        "loss_log": str(out / "loss_log.csv"),
        "checkpoint": str(out / "model.ckpt"),
        "refined": str(out / "refined.jsonl"),
        "final_loss": result.log[-1].mean_loss,
        "train_config": asdict(TrainConfig(seed=_seed(ctx, cfg), s_variant=S.variant.value,
                                           **_resolve(ctx, cfg, "train", TRAIN_FLAGS))),
    }
    if truth_path is not None:
        truth = [json.loads(line)["categories"] for line in open(truth_path, encoding="utf-8")]
        summary["class_accuracy_unrefined"] = class_accuracy(detections, truth)
        summary["class_accuracy_refined"] = class_accuracy(refined, truth)
    _write_json(out / "summary.json", summary)
    click.echo(json.dumps({"summary": str(out / "summary.json"), "map_unrefined": before.map,
                           "map_refined": after.map}))


if __name__ == "__main__":  # pragma: no cover
    main()
