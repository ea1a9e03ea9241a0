"""Command-line interface: ``uncd synth | train | segment | detect | eval | gradcheck | rerun``.

Every command writes a JSON run manifest (command, argv, resolved
configuration, seed, inputs, outputs, tool version) next to its outputs.
``uncd rerun MANIFEST`` replays a run. Exit codes: 0 success, 2 usage error,
3 I/O or file-format error, 4 validation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import synthdata as sd
from .changedet import DEFAULT_EPSILON_CHANGE, DEFAULT_THRESHOLDS, ThresholdSchedule, detect
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FormatError, UNCDError
from .metrics import argmax_map, pcc1, pcc2
from .parallel import threads
from .trainer import Dataset, TrainConfig, grad_check, train
from .unet import UNetConfig, init_model, segment

log = logging.getLogger("uncd")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION = 0, 2, 3, 4

PAPER_FRACTIONS = (0.05, 0.10, 0.15)
PAPER_VARIANCES = (10.0, 20.0, 40.0)
# the noise experiments always use pairs with 5% of pixels changed
NOISE_CHANGE_FRACTION = 0.05

PAIR_COLUMNS = ("pair_id", "cell", "change_fraction", "noise_variance", "before", "after", "change_mask", "after_mask")


class UsageError(Exception):
    pass


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def cell_name(fraction: float, variance: float) -> str:
    return f"change={fraction:g},noise={variance:g}"


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(path: Path, args: argparse.Namespace, config: dict, inputs: dict, outputs: dict) -> None:
    write_json(
        path,
        {
            "tool": "uncd",
            "version": __version__,
            "command": args.command,
            "argv": args.argv,
            "config": config,
            "seed": config.get("seed"),
            "deterministic": bool(args.deterministic),
            "inputs": {k: str(v) for k, v in inputs.items()},
            "outputs": {k: str(v) for k, v in outputs.items()},
        },
    )


# --------------------------------------------------------------------------- synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    scene_rows, pair_rows = [], []
    for i in range(args.count):
        scene = sd.generate_scene(derive_seed(args.seed, i, 0), args.size)
        name = f"scene_{i:04d}"
        sd.save_png(scene.image, out / "scenes" / f"{name}.png")
        sd.save_png(sd.mask_to_rgb(scene.mask), out / "scenes" / f"{name}_mask.png")
        scene_rows.append((f"scenes/{name}.png", f"scenes/{name}_mask.png"))

        pairs = {}
        for j, frac in enumerate(args.fractions):
            pairs[frac] = sd.simulate_change(scene, frac, derive_seed(args.seed, i, 1, j))
        if args.variances and NOISE_CHANGE_FRACTION not in pairs:
            pairs[NOISE_CHANGE_FRACTION] = sd.simulate_change(scene, NOISE_CHANGE_FRACTION, derive_seed(args.seed, i, 1, 99))
        cells = [(f, 0.0, pairs[f].after) for f in args.fractions]
        for k, var in enumerate(args.variances):
            noisy = sd.add_gaussian_noise(pairs[NOISE_CHANGE_FRACTION].after, var, derive_seed(args.seed, i, 2, k))
            cells.append((NOISE_CHANGE_FRACTION, var, noisy))
        for frac, var, after in cells:
            pair = pairs[frac]
            sub = f"pairs/c{round(frac * 100):02d}_n{var:g}"
            files = {
                "before": f"{sub}/{name}_before.png",
                "after": f"{sub}/{name}_after.png",
                "change_mask": f"{sub}/{name}_change.png",
                "after_mask": f"{sub}/{name}_aftermask.png",
            }
            sd.save_png(pair.before, out / files["before"])
            sd.save_png(after, out / files["after"])
            sd.save_png(sd.bool_to_rgb(pair.change_mask), out / files["change_mask"])
            sd.save_png(sd.mask_to_rgb(pair.after_mask), out / files["after_mask"])
            pair_rows.append((f"{name}:{cell_name(frac, var)}", cell_name(frac, var), f"{frac:g}", f"{var:g}", *files.values()))

    sd.write_manifest(out / "scenes.tsv", ("image", "mask"), scene_rows)
    sd.write_manifest(out / "pairs.tsv", PAIR_COLUMNS, pair_rows)
    config = {
        "count": args.count,
        "size": args.size,
        "seed": args.seed,
        "fractions": list(args.fractions),
        "variances": list(args.variances),
        "noise_change_fraction": NOISE_CHANGE_FRACTION,
    }
    write_manifest(out / "manifest.json", args, config, {}, {"scenes": out / "scenes.tsv", "pairs": out / "pairs.tsv"})
    print(f"wrote {len(scene_rows)} scenes and {len(pair_rows)} pairs to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- train


def _load_training_scenes(data_dir: Path, input_size: int):
    manifest = data_dir / "scenes.tsv"
    if not data_dir.is_dir():
        raise UsageError(f"data directory {data_dir} does not exist")
    if not manifest.exists():
        raise UsageError(f"{manifest} not found; create it with 'uncd synth'")
    images, masks = [], []
    for item in sd.load_labeled_dataset(manifest):
        img_tiles = sd.tile(item.image, input_size)
        mask_tiles = sd.tile(item.mask, input_size)
        images.extend(img_tiles)
        masks.extend(mask_tiles)
    if not images:
        raise UsageError(f"no {input_size}x{input_size} tiles could be cut from {manifest}")
    return images, masks


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    images, masks = _load_training_scenes(data_dir, args.input_size)
    n_hold = int(round(len(images) * args.holdout_fraction))
    n_train = len(images) - n_hold
    if n_train < 1:
        raise UsageError("holdout fraction leaves no training images")
    stats = sd.compute_stats(images[:n_train])
    train_set = Dataset(sd.normalize(np.stack(images[:n_train]), stats), np.stack(masks[:n_train]))
    holdout = Dataset(sd.normalize(np.stack(images[n_train:]), stats), np.stack(masks[n_train:])) if n_hold else None

    ucfg = UNetConfig(input_size=args.input_size, base_channels=args.base_channels)
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed)
    model = init_model(ucfg, args.seed)
    model.stats = stats
    result = train(model, train_set, tcfg, holdout)
    result.best.stats = stats

    out = Path(args.out)
    save_checkpoint(result.best, out)
    final = out.with_name(out.stem + ".final" + out.suffix)
    save_checkpoint(result.model, final)
    history = out.with_name(out.stem + ".history.json")
    write_json(history, {"best_epoch": result.best_epoch, **result.history})
    config = {
        "learning_rate": tcfg.learning_rate,
        "batch_size": tcfg.batch_size,
        "epochs": tcfg.epochs,
        "beta1": tcfg.beta1,
        "beta2": tcfg.beta2,
        "adam_eps": tcfg.eps,
        "seed": tcfg.seed,
        "input_size": ucfg.input_size,
        "base_channels": ucfg.base_channels,
        "levels": ucfg.levels,
        "leaky_slope": ucfg.leaky_slope,
        "holdout_fraction": args.holdout_fraction,
        "train_images": n_train,
        "holdout_images": n_hold,
    }
    write_manifest(
        out.with_name(out.stem + ".manifest.json"),
        args,
        config,
        {"data": data_dir},
        {"checkpoint": out, "final_checkpoint": final, "history": history},
    )
    for i, loss in enumerate(result.history["train_loss"]):
        acc = result.history.get("holdout_pcc2", [float("nan")] * (i + 1))[i]
        print(f"epoch {i + 1:3d}  loss {loss:.4f}  holdout PCC2 {acc:.4f}")
    print(f"best epoch {result.best_epoch}; checkpoint written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- segment / detect


def _load_input(model, path) -> np.ndarray:
    if model.stats is None:
        raise FormatError("checkpoint carries no normalisation statistics")
    return sd.normalize(sd.load_png(path), model.stats)


def probability_image(probs: np.ndarray) -> np.ndarray:
    """(1, 3, H, W) class probabilities -> RGB with red=background, green=immutable, blue=building."""
    p = probs[0][[sd.BACKGROUND, sd.IMMUTABLE, sd.BUILDING]]
    return np.rint(255 * p.transpose(1, 2, 0)).astype(np.uint8)


def cmd_segment(args) -> int:
    model = load_checkpoint(args.checkpoint)
    probs = segment(model, _load_input(model, args.image))
    prob_rgb = probability_image(probs)
    class_rgb = sd.mask_to_rgb(argmax_map(probs)[0])
    out = Path(args.out)
    paths = {
        "side_by_side": out,
        "probabilities": out.with_name(out.stem + "_probs.png"),
        "classes": out.with_name(out.stem + "_classes.png"),
    }
    sd.save_png(np.concatenate([prob_rgb, class_rgb], axis=1), paths["side_by_side"])
    sd.save_png(prob_rgb, paths["probabilities"])
    sd.save_png(class_rgb, paths["classes"])
    write_manifest(
        out.with_name(out.stem + ".manifest.json"),
        args,
        {"seed": None},
        {"checkpoint": args.checkpoint, "image": args.image},
        paths,
    )
    print(f"wrote {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    model = load_checkpoint(args.checkpoint)
    schedule = ThresholdSchedule(tuple(args.thresholds))
    result = detect(model, _load_input(model, args.image1), _load_input(model, args.image2), schedule, args.epsilon_change)
    out = Path(args.out)
    paths = {"change": out / "change.png", "change_mask": out / "change_mask.png", "report": out / "report.json"}
    sd.save_png(result.rendered, paths["change"])
    sd.save_png(sd.bool_to_rgb(result.changed), paths["change_mask"])
    report = result.report()
    report["thresholds"] = list(schedule.thresholds)
    report["epsilon_change"] = args.epsilon_change
    report["rendered_png"] = str(paths["change"])
    report["change_mask_png"] = str(paths["change_mask"])
    write_json(paths["report"], report)
    write_manifest(
        out / "manifest.json",
        args,
        {"thresholds": list(schedule.thresholds), "epsilon_change": args.epsilon_change, "seed": None},
        {"checkpoint": args.checkpoint, "image1": args.image1, "image2": args.image2},
        paths,
    )
    print(f"{report['changed_pixels']} of {report['pixels']} pixels changed ({100 * report['changed_fraction']:.2f}%)")
    return EXIT_OK


# --------------------------------------------------------------------------- eval


def evaluate_pair(model, before, after, change_truth, after_classes, schedule, epsilon_change) -> dict:
    """Detect change on one pair and score it against ground truth."""
    res = detect(model, sd.normalize(before, model.stats), sd.normalize(after, model.stats), schedule, epsilon_change)
    s1, c1 = pcc1(res.changed, change_truth)
    row = {"pcc1": s1, **c1.as_dict(), "predicted_changed": int(res.changed.sum())}
    if change_truth.any():
        s2, c2 = pcc2(res.classes, after_classes, mask=change_truth)
        row.update(pcc2=s2, CC=c2.cc, IC=c2.ic)
    else:
        row.update(pcc2=float("nan"), CC=0, IC=0)
    return row


def aggregate(rows: list[dict]) -> list[dict]:
    """Per-cell mean and std of PCC1/PCC2 plus summed confusion counts, in first-seen cell order."""
    cells: dict[str, list[dict]] = {}
    for r in rows:
        cells.setdefault(r["cell"], []).append(r)
    out = []
    for cell, items in cells.items():
        p1 = np.array([r["pcc1"] for r in items])
        p2 = np.array([r["pcc2"] for r in items if np.isfinite(r["pcc2"])])
        out.append(
            {
                "cell": cell,
                "change_fraction": items[0]["change_fraction"],
                "noise_variance": items[0]["noise_variance"],
                "pairs": len(items),
                "pcc1_mean": float(p1.mean()),
                "pcc1_std": float(p1.std()),
                "pcc2_mean": float(p2.mean()) if p2.size else float("nan"),
                "pcc2_std": float(p2.std()) if p2.size else float("nan"),
                **{k: int(sum(r[k] for r in items)) for k in ("TP", "TN", "FP", "FN", "CC", "IC")},
            }
        )
    return out


def run_grid(
    model,
    n_pairs: int,
    seed: int = 0,
    schedule: ThresholdSchedule | None = None,
    epsilon_change: float = DEFAULT_EPSILON_CHANGE,
    fractions=PAPER_FRACTIONS,
    variances=PAPER_VARIANCES,
    scene_seed_base: int = 10_000_000,
) -> tuple[list[dict], list[dict]]:
    """Score ``n_pairs`` fresh synthetic scenes in every (change fraction, noise variance) cell.

    Scenes are generated in memory from seeds offset by ``scene_seed_base`` so
    they stay disjoint from training scenes. Returns (per-cell table, per-pair rows).
    """
    schedule = schedule or ThresholdSchedule(DEFAULT_THRESHOLDS)
    size = model.config.input_size
    rows = []
    for i in range(n_pairs):
        scene = sd.generate_scene(scene_seed_base + derive_seed(seed, i) % 1_000_000, size)
        pairs = {f: sd.simulate_change(scene, f, derive_seed(seed, i, 1, j)) for j, f in enumerate(fractions)}
        if variances and NOISE_CHANGE_FRACTION not in pairs:
            pairs[NOISE_CHANGE_FRACTION] = sd.simulate_change(scene, NOISE_CHANGE_FRACTION, derive_seed(seed, i, 1, 99))
        cells = [(f, 0.0, pairs[f].after) for f in fractions]
        for k, var in enumerate(variances):
            noisy = sd.add_gaussian_noise(pairs[NOISE_CHANGE_FRACTION].after, var, derive_seed(seed, i, 2, k))
            cells.append((NOISE_CHANGE_FRACTION, var, noisy))
        for frac, var, after in cells:
            p = pairs[frac]
            row = evaluate_pair(model, p.before, after, p.change_mask, p.after_mask, schedule, epsilon_change)
            row.update(cell=cell_name(frac, var), change_fraction=frac, noise_variance=var)
            rows.append(row)
    return aggregate(rows), rows


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if model.stats is None:
        raise FormatError("checkpoint carries no normalisation statistics")
    manifest = Path(args.pairs)
    if not manifest.exists():
        raise UsageError(f"pairs manifest {manifest} not found")
    records = sd.read_manifest(manifest)
    if not records:
        raise UsageError(f"pairs manifest {manifest} lists no pairs")
    schedule = ThresholdSchedule(tuple(args.thresholds))
    base = manifest.parent
    rows = []
    for rec in records:
        row = evaluate_pair(
            model,
            sd.load_png(base / rec["before"]),
            sd.load_png(base / rec["after"]),
            sd.rgb_to_bool(sd.load_png(base / rec["change_mask"])),
            sd.rgb_to_mask(sd.load_png(base / rec["after_mask"])),
            schedule,
            args.epsilon_change,
        )
        row.update(
            pair_id=rec["pair_id"],
            cell=rec["cell"],
            change_fraction=float(rec["change_fraction"]),
            noise_variance=float(rec["noise_variance"]),
        )
        rows.append(row)
    table = aggregate(rows)
    out = Path(args.out)
    write_json(out, {"thresholds": list(schedule.thresholds), "epsilon_change": args.epsilon_change, "cells": table, "pairs": rows})
    write_manifest(
        out.with_name(out.stem + ".manifest.json"),
        args,
        {"thresholds": list(schedule.thresholds), "epsilon_change": args.epsilon_change, "seed": None},
        {"checkpoint": args.checkpoint, "pairs": manifest},
        {"report": out},
    )
    print(f"{'cell':<24} {'pairs':>5} {'PCC1':>8} {'PCC2':>8}")
    for c in table:
        print(f"{c['cell']:<24} {c['pairs']:>5} {100 * c['pcc1_mean']:7.2f}% {100 * c['pcc2_mean']:7.2f}%")
    return EXIT_OK


# --------------------------------------------------------------------------- gradcheck / rerun


def cmd_gradcheck(args) -> int:
    report = grad_check(tolerance=args.tolerance, samples=args.samples, seed=args.seed)
    data = report.as_dict()
    print(json.dumps(data, indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        write_json(out, data)
        write_manifest(
            out.with_name(out.stem + ".manifest.json"),
            args,
            {"tolerance": args.tolerance, "samples": args.samples, "seed": args.seed},
            {},
            {"report": out},
        )
    return EXIT_OK if report.passed else EXIT_VALIDATION


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    if manifest.get("tool") != "uncd" or "argv" not in manifest:
        raise FormatError(f"{args.manifest} is not a uncd run manifest")
    return main(manifest["argv"])


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uncd", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"uncd {__version__}")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate scenes, change pairs and noisy variants")
    s.add_argument("--count", type=int, default=20)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--fractions", type=float, nargs="*", default=list(PAPER_FRACTIONS))
    s.add_argument("--variances", type=float, nargs="*", default=list(PAPER_VARIANCES))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the segmentation U-net")
    t.add_argument("--data", required=True, help="directory containing scenes.tsv")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=2e-4)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--base-channels", type=int, default=16)
    t.add_argument("--input-size", type=int, default=64)
    t.add_argument("--holdout-fraction", type=float, default=0.2)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path (best holdout epoch)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("segment", help="semantic segmentation of one image")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--image", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_segment)

    d = sub.add_parser("detect", help="change detection between two images")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--image1", required=True, help="earlier image")
    d.add_argument("--image2", required=True, help="later image")
    d.add_argument("--thresholds", type=float, nargs=5, default=list(DEFAULT_THRESHOLDS))
    d.add_argument("--epsilon-change", type=float, default=DEFAULT_EPSILON_CHANGE)
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="PCC1/PCC2 over a pairs manifest, aggregated per experiment cell")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--pairs", required=True, help="pairs.tsv written by 'uncd synth'")
    e.add_argument("--thresholds", type=float, nargs=5, default=list(DEFAULT_THRESHOLDS))
    e.add_argument("--epsilon-change", type=float, default=DEFAULT_EPSILON_CHANGE)
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the composite model's gradients")
    c.add_argument("--tolerance", type=float, default=1e-2)
    c.add_argument("--samples", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="optional report JSON path")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("rerun", help="replay the command recorded in a run manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with threads(single=args.deterministic):
            return args.func(args)
    except UsageError as exc:
        print(f"uncd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"uncd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UNCDError as exc:
        print(f"uncd: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
