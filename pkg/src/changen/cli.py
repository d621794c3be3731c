"""``changen`` command line.

Every subcommand takes ``--config`` (YAML), ``--seed`` and ``--out``. The
config is a mapping with optional sections ``data``, ``train``, ``events``,
``generate``, ``detector``, ``pretrain`` and ``eval``; see the README.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import toydata
from .core import (IngestionError, RunConfig, ValidationError, build, ensure_dir, load_config, load_dataset,
                   make_rng, write_manifest, write_mask)
from .eventsim import EventConfig, derive_change_label, event_to_dict, simulate_event

log = logging.getLogger("changen")


def _source(cfg: dict, args):
    """Single-temporal source from --data-root/--manifest or the ``data`` section."""
    data = dict(cfg.get("data") or {})
    root = getattr(args, "data_root", None) or data.get("root")
    manifest = getattr(args, "manifest", None) or data.get("manifest")
    if root or manifest:
        root = Path(root or Path(manifest).parent)
        return load_dataset(root, manifest or root / "manifest.jsonl", data.get("class_count"))
    toy = data.get("toy")
    if toy is not None:
        return toydata.scenes(int(toy.get("n", 100)), int(toy.get("size", 64)), int(toy.get("seed", 0)))
    raise ValidationError("no input data: pass --data-root/--manifest or set data.root or data.toy in the config")


def _num_classes(source, cfg: dict) -> int | None:
    data = cfg.get("data") or {}
    if "class_count" in data:
        return int(data["class_count"])
    if hasattr(source, "class_count"):
        return source.class_count
    if data.get("toy") is not None:
        return toydata.NUM_CLASSES
    return None


def _report(obj, out: Path | None, name: str):
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    print(text)
    if out is not None:
        (ensure_dir(out) / name).write_text(text + "\n")


def _bitemporal(manifest):
    from .datagen import load_bitemporal
    items = list(load_bitemporal(manifest))
    if not items:
        raise ValidationError(f"{manifest}: no samples")
    return items


# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    source = _source(cfg, args)
    event_cfg = build(EventConfig, cfg.get("events"))
    out = ensure_dir(args.out)
    for d in ("masks_t0", "masks_t1", "change", "events"):
        ensure_dir(out / d)
    recs = []
    for i in range(len(source)):
        if hasattr(source, "load"):
            sid, (_, mask) = source.items[i].id, source.load(i)
        else:
            sid, (_, mask) = f"src_{i:05d}", source[i]
        rng = make_rng(args.seed, "simulate", sid)
        prev = np.asarray(mask)
        for j in range(1, args.n + 1):
            post, events = simulate_event(prev, event_cfg, rng)
            change = derive_change_label(prev, post, events)
            rid = f"{sid}_{j}"
            rec = {"id": rid, "t0_image": None, "t1_image": None, "t0_mask": f"masks_t0/{rid}.png",
                   "t1_mask": f"masks_t1/{rid}.png", "change": f"change/{rid}.png", "events": f"events/{rid}.json"}
            write_mask(out / rec["t0_mask"], prev)
            write_mask(out / rec["t1_mask"], post)
            write_mask(out / rec["change"], change)
            (out / rec["events"]).write_text(json.dumps([event_to_dict(e) for e in events]))
            recs.append(rec)
            prev = post
    write_manifest(out / "manifest.jsonl", recs)
    _report({"samples": len(recs), "manifest": str(out / "manifest.jsonl")}, None, "")
    return 0


def cmd_train_gan(args, cfg):
    from .advtrain import train
    source = _source(cfg, args)
    section = dict(cfg.get("train") or {})
    nc = _num_classes(source, cfg)
    if nc is not None:
        section.setdefault("num_classes", nc)
    run = build(RunConfig, section, seed=args.seed, iterations=args.iterations)
    event_cfg = build(EventConfig, cfg.get("events"))
    out = ensure_dir(args.out)
    (out / "config.json").write_text(json.dumps({"train": run.to_dict(), "events": vars(event_cfg)}, default=list))
    state = train(source, run, event_cfg, out_dir=out, resume=args.resume, force=args.force)
    h = state.history[-1] if state.history else {}
    _report({"iteration": state.iteration, "g_loss": h.get("g_loss"), "d_loss": h.get("d_loss"),
             "checkpoint": str(out / "latest.pt")}, None, "")
    return 0


def cmd_generate(args, cfg):
    from .datagen import generate_dataset
    from .gennet import load_generator
    gen = load_generator(args.checkpoint, force=args.force)
    source = _source(cfg, args)
    event_cfg = build(EventConfig, cfg.get("events"))
    section = cfg.get("generate") or {}
    n = args.n if args.n is not None else int(section.get("n", 1))
    condition = args.condition or section.get("condition", "generated")
    manifest = generate_dataset(source, gen, event_cfg, n, args.out, seed=args.seed, condition=condition)
    with open(manifest) as fh:
        count = sum(1 for line in fh if line.strip())
    _report({"samples": count, "manifest": str(manifest)}, None, "")
    return 0


def cmd_eval_fid(args, cfg):
    from .evalkit import extract, feature_stats, fid, inception_score, load_image_dir
    extractor = args.extractor or (cfg.get("eval") or {}).get("extractor", "pixels")
    real, _ = extract(load_image_dir(args.real_dir), extractor)
    fake, probs = extract(load_image_dir(args.fake_dir), extractor)
    report = {"fid": fid(feature_stats(real), feature_stats(fake)), "n_real": len(real), "n_fake": len(fake),
              "extractor": str(extractor)}
    if probs is not None:
        report["inception_score"] = inception_score(probs)
    _report(report, Path(args.out) if args.out else None, "fid.json")
    return 0


def _detector_cfgs(args, cfg, num_classes=None):
    from .detector import DetectorConfig, PretrainConfig
    det_section = dict(cfg.get("detector") or {})
    if num_classes is not None:
        det_section.setdefault("num_classes", num_classes)
    return build(DetectorConfig, det_section), build(PretrainConfig, cfg.get("pretrain"), seed=args.seed)


def _classes_in(items) -> int:
    top = max(int(max(i.get("mask_t", np.zeros(1)).max(), i.get("mask_t1", np.zeros(1)).max())) for i in items)
    return max(top + 1, 2)


def cmd_pretrain(args, cfg):
    import torch
    from .detector import pretrain, save_detector
    items = _bitemporal(args.manifest)
    det_cfg, pcfg = _detector_cfgs(args, cfg, _classes_in(items))
    if args.epochs is not None:
        pcfg.epochs = args.epochs
    out = ensure_dir(args.out)
    torch.manual_seed(pcfg.seed)
    model, history = pretrain(items, pcfg, det_cfg, failure_path=out / "nonfinite.pt")
    save_detector(out / "detector.pt", model, {"history": history})
    _report({"epochs": len(history), "loss_first": history[0], "loss_last": history[-1],
             "checkpoint": str(out / "detector.pt")}, out, "pretrain.json")
    return 0


def cmd_eval_detector(args, cfg):
    from .detector import evaluate, load_detector
    model = load_detector(args.checkpoint)
    threshold = float((cfg.get("eval") or {}).get("threshold", 0.5))
    metrics = evaluate(model, _bitemporal(args.manifest), threshold)
    metrics["protocol"] = "zero-shot" if args.zero_shot else "fine-tuned"
    _report(metrics, Path(args.out) if args.out else None, "metrics.json")
    return 0


def cmd_finetune(args, cfg):
    import torch
    from .detector import ChangeDetector, fine_tune, load_detector, save_detector
    items = _bitemporal(args.manifest)
    det_cfg, pcfg = _detector_cfgs(args, cfg, _classes_in(items))
    if args.epochs is not None:
        pcfg.epochs = args.epochs
    if args.checkpoint:
        model = load_detector(args.checkpoint)
    else:
        torch.manual_seed(pcfg.seed)
        model = ChangeDetector(det_cfg)
    tuned, idx = fine_tune(model, items, args.ratio, pcfg)
    out = ensure_dir(args.out)
    ids = [items[i]["id"] for i in idx]
    save_detector(out / "detector.pt", tuned, {"subset": ids, "ratio": args.ratio})
    _report({"ratio": args.ratio, "subset_size": len(ids), "subset": ids, "init": args.checkpoint or "random",
             "checkpoint": str(out / "detector.pt")}, out, "finetune.json")
    return 0


def cmd_toy_data(args, cfg):
    writer = toydata.write_single_temporal if args.kind == "single" else toydata.write_change_benchmark
    manifest = writer(args.out, args.count, args.size, args.seed)
    _report({"manifest": str(manifest), "samples": args.count}, None, "")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="changen", description="Synthetic change data from single-temporal masks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, out_required=True):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required, help="output directory")
        p.set_defaults(func=func)
        return p

    def data_args(p):
        p.add_argument("--data-root", help="single-temporal dataset root")
        p.add_argument("--manifest", help="single-temporal manifest (defaults to <root>/manifest.jsonl)")

    p = add("simulate", cmd_simulate, "run change-event simulation on masks")
    data_args(p)
    p.add_argument("--n", type=int, default=1, help="chain length per source mask")

    p = add("train-gan", cmd_train_gan, "train the change generator")
    data_args(p)
    p.add_argument("--resume", help="training checkpoint to resume from")
    p.add_argument("--force", action="store_true", help="resume despite a config hash mismatch")
    p.add_argument("--iterations", type=int)

    p = add("generate", cmd_generate, "generate a synthetic bitemporal dataset")
    data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, help="change steps per source image")
    p.add_argument("--condition", choices=("generated", "real"))
    p.add_argument("--force", action="store_true")

    p = add("eval-fid", cmd_eval_fid, "FID (and IS) between two image directories", out_required=False)
    p.add_argument("--real-dir", required=True)
    p.add_argument("--fake-dir", required=True)
    p.add_argument("--extractor", help='"pixels" or a saved ToyClassifier checkpoint')

    p = add("pretrain-detector", cmd_pretrain, "pre-train a change detector on a bitemporal manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int)

    p = add("eval-detector", cmd_eval_detector, "evaluate a change detector", out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--zero-shot", action="store_true", help="checkpoint was never fine-tuned on this domain")

    p = add("finetune", cmd_finetune, "fine-tune a detector on a seeded ratio subset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", help="detector to start from (random init if omitted)")
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--epochs", type=int)

    p = add("toy-data", cmd_toy_data, "write the procedural shapes datasets")
    p.add_argument("--kind", choices=("single", "change"), default="single")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .gennet import CheckpointError
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ValidationError, IngestionError, CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
