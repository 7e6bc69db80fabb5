"""Command-line entry point: `facesim <command> ...`.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, replace
from pathlib import Path


from . import config as cfgmod
from .dataset import MANIFEST_NAME, FaceData, normalization_hash
from .evaluation import (
    eval_images,
    EvaluationError,
    dataset_criterion_correlation,
    evaluate,
    pair_variation,
    sample_eval_pairs,
    self_identity_eval,
    zoom_sweep,
)
from .metrics import reports_to_csv
from .net import load_checkpoint
from .report import (
    ABLATION_CSV, CORR_CSV, METRICS_CSV, METRICS_JSON, PAIR_VAR_CSV, SELF_CSV, SELF_JSON, ZOOM_CSV,
    ZOOM_PNG, read_csv, write_correlation_csv, write_csv, write_report, write_zoom_plot,
)
from .saliency import SaliencyConfig, SaliencyError, export_map, head_index, saliency_maps
from .scores import ALL_CRITERIA
from .training import PROBE_TASKS, TrainingError, grid_search, probe_train, train
from .world import DatasetError, build_dataset

log = logging.getLogger("facesim")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
CONFIG_SNAPSHOT = "config.yaml"


class UsageError(Exception):
    pass


def _prepare_out(path: Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UsageError(f"{path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()):
        if not force:
            raise UsageError(f"{path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    train = {}
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("batch_size", "batch_size"),
                      ("self_identity_fraction", "self_identity_fraction")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    if getattr(args, "deterministic", False):
        train["deterministic"] = True
    if train:
        out["train"] = train
    return out


def _load_config(args) -> cfgmod.ExperimentConfig:
    return cfgmod.load(Path(args.config) if args.config else None, _overrides(args))


def _load_data(path) -> FaceData:
    path = Path(path)
    if not (path / MANIFEST_NAME).is_file():
        raise UsageError(f"no dataset at {path} ({MANIFEST_NAME} missing)")
    return FaceData.load(path)


def _check_norm(data: FaceData, meta: dict) -> None:
    found = normalization_hash(data.normalization)
    if found != meta["norm_hash"]:
        raise UsageError(
            f"dataset normalization hash {found} differs from the checkpoint's {meta['norm_hash']}; "
            "refusing to evaluate on a differently normalized dataset"
        )


def _open_run(args):
    """Checkpoint, its metadata, the run's config snapshot and the dataset it was trained on."""
    run = Path(args.run)
    if not (run / "checkpoint.json").is_file():
        raise UsageError(f"no checkpoint in {run}")
    model, meta = load_checkpoint(run)
    cfg = cfgmod.load(run / CONFIG_SNAPSHOT)
    data = _load_data(args.data or meta["data_dir"])
    _check_norm(data, meta)
    return run, model, meta, cfg, data


def _full_frame(cfg) -> bool:
    """Runs trained on full images are evaluated on full images."""
    return not cfg.crop.use_boxes


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(Path(args.out), args.force)
    try:
        data = build_dataset(cfg.world, cfg.split_fractions, out, config_hash=cfg.data_hash())
    except DatasetError as exc:
        shutil.rmtree(out, ignore_errors=True)
        raise UsageError(str(exc)) from exc
    (out / CONFIG_SNAPSHOT).write_text(cfg.dump(), encoding="utf-8")
    m = data.manifest
    print(f"wrote {len(m.users)} users, {len(m.images)} images to {out} (norm hash {m.norm_hash})")
    return EXIT_OK


def _run_meta(cfg, data_dir: Path, data: FaceData) -> dict:
    return {
        "config_hash": cfg.hash,
        "data_dir": str(Path(data_dir).resolve()),
        "data_config_hash": data.manifest.config_hash,
        "norm_hash": normalization_hash(data.normalization),
    }


def cmd_train(args) -> int:
    cfg = _load_config(args)
    data = _load_data(args.data)
    init_state = None
    if args.init_from:
        model, _ = load_checkpoint(Path(args.init_from))
        init_state = model.state_dict()
    out = _prepare_out(Path(args.out), args.force)
    (out / CONFIG_SNAPSHOT).write_text(cfg.dump(), encoding="utf-8")
    result = train(
        data, cfg.net, cfg.train, cfg.crop, m_c=cfg.eval.m_c, init_state=init_state, run_dir=out,
        meta=_run_meta(cfg, args.data, data), workers=args.workers,
    )
    print(f"best epoch {result.best_epoch} of {len(result.history)}, val MS PCC {result.best_val_pcc:.4f}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _load_config(args)
    data = _load_data(args.data)
    out = _prepare_out(Path(args.out), args.force)
    best, points = grid_search(data, cfg.net, cfg.train, cfg.crop, m_c=cfg.eval.m_c, workers=args.workers)
    rows = [{**asdict(p), "config_hash": cfg.hash} for p in points]
    write_csv(out / "grid.csv", ["lr", "batch_size", "val_pcc", "val_mae", "error", "config_hash"], rows)
    chosen = replace(cfg, train=best)
    (out / CONFIG_SNAPSHOT).write_text(chosen.dump(), encoding="utf-8")
    print(f"best lr={best.lr:g} batch_size={best.batch_size}")
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    data = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = probe_train(data, args.task, cfg.net, cfg.train, cfg.crop, m_c=cfg.eval.m_c)
    result["config_hash"] = cfg.hash
    _write_json(out / f"probe_{args.task}.json", result)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _eval_pairs(cfg, data, split):
    return sample_eval_pairs(data, split, cfg.seed, cfg.eval.pairs_per_user)


def cmd_eval(args) -> int:
    run, model, meta, cfg, data = _open_run(args)
    m_c = args.mc if args.mc is not None else cfg.eval.m_c
    report, _, _ = evaluate(model, data, args.split, m_c, _eval_pairs(cfg, data, args.split),
                            no_box=_full_frame(cfg), config_hash=meta["config_hash"])
    out = report.to_dict()
    out["split"] = args.split
    _write_json(run / METRICS_JSON, out)
    (run / METRICS_CSV).write_text(reports_to_csv([report]), encoding="utf-8")
    write_correlation_csv(run / CORR_CSV, dataset_criterion_correlation(data), meta["config_hash"])
    ms = report.rows["MS"]
    print(f"{args.split}: {report.n_pairs} pairs, MS PCC {ms.pcc:.4f} (p={ms.p:.2e}), MS MAE {ms.mae:.4f}")
    return EXIT_OK


def cmd_sweep_zoom(args) -> int:
    run, model, meta, cfg, data = _open_run(args)
    if _full_frame(cfg):
        raise UsageError(f"{run} was trained on full images; zoom does not apply")
    no_box_model = None
    if args.no_box_run:
        if not (Path(args.no_box_run) / "checkpoint.json").is_file():
            raise UsageError(f"no checkpoint in {args.no_box_run}")
        no_box_model, no_box_meta = load_checkpoint(Path(args.no_box_run))
        if not _full_frame(cfgmod.load(Path(args.no_box_run) / CONFIG_SNAPSHOT)):
            raise UsageError(f"{args.no_box_run} was trained with face boxes (crop.use_boxes is true)")
        _check_norm(data, no_box_meta)
    m_c_list = args.mc_list if args.mc_list else list(cfg.eval.m_c_sweep)
    reports = zoom_sweep(model, data, args.split, m_c_list, include_no_box=not args.skip_no_box,
                         no_box_model=no_box_model, pairs=_eval_pairs(cfg, data, args.split),
                         config_hash=meta["config_hash"])
    (run / ZOOM_CSV).write_text(reports_to_csv(reports), encoding="utf-8")
    _write_json(run / "zoom.json", [r.to_dict() for r in reports])
    write_zoom_plot(run / ZOOM_PNG, read_csv(run / ZOOM_CSV))
    for r in reports:
        print(f"{r.label}: MS PCC {r.pcc_of('MS'):.4f}")
    return EXIT_OK


def cmd_self_eval(args) -> int:
    run, model, meta, cfg, data = _open_run(args)
    result = self_identity_eval(model, data, args.split, cfg.eval.m_c, _full_frame(cfg))
    _write_json(run / SELF_JSON, {"config_hash": meta["config_hash"], "split": args.split, **result})
    rows = [
        {"set": name, "n_pairs": res["n_pairs"], **res["mae"], "config_hash": meta["config_hash"]}
        for name, res in result.items()
    ]
    write_csv(run / SELF_CSV, ["set", "n_pairs", *ALL_CRITERIA, "config_hash"], rows)
    for row in rows:
        print(f"{row['set']}: {row['n_pairs']} pairs, MS MAE {row['MS']:.4f}")
    return EXIT_OK


def cmd_pair_variation(args) -> int:
    run, model, meta, cfg, data = _open_run(args)
    rows = pair_variation(model, data, args.split, cfg.eval.m_c, _eval_pairs(cfg, data, args.split),
                          no_box=_full_frame(cfg))
    for row in rows:
        row["config_hash"] = meta["config_hash"]
    write_csv(run / PAIR_VAR_CSV, ["mode", "image_pairs", "n_user_pairs", *ALL_CRITERIA, "config_hash"], rows)
    if not rows:
        print("no user pair offers more than one image combination")
    for row in rows:
        print(f"{row['mode']} x{row['image_pairs']}: {row['n_user_pairs']} user pairs, MS {row['MS']:.4f}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    run, model, meta, cfg, data = _open_run(args)
    try:
        head_index(model, args.head)
        scfg = SaliencyConfig(head=args.head, n_samples=args.samples, noise_scale=args.noise,
                              target_image=args.target, seed=cfg.seed)
    except SaliencyError as exc:
        raise UsageError(str(exc)) from exc
    if args.images:
        parts = args.images.split(",")
        if len(parts) != 2 or any(p not in data.boxes for p in parts):
            raise UsageError("--images needs two known image ids separated by a comma")
        image_a, image_b = parts
        tag = f"{image_a}__{image_b}"
    else:
        pairs = _eval_pairs(cfg, data, args.split)
        if not 0 <= args.pair < len(pairs):
            raise UsageError(f"--pair must lie in [0, {len(pairs)})")
        image_a, image_b = pairs[args.pair].image_a, pairs[args.pair].image_b
        tag = f"pair{args.pair}"
    x = eval_images(data, [image_a, image_b], cfg.eval.m_c, model.config.in_size, _full_frame(cfg))
    maps = saliency_maps(model, x[:1], x[1:], scfg)
    out = run / "saliency"
    written = []
    for side, values in maps.items():
        written += export_map(out, f"{args.head}_{tag}_{side}", values[0])
    _write_json(out / f"{args.head}_{tag}.json", {
        "config_hash": meta["config_hash"], "image_a": image_a, "image_b": image_b, "m_c": cfg.eval.m_c,
        **asdict(scfg),
    })
    print(f"wrote {len(written)} files to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"no run directory at {run}")
    path = write_report(run)
    print(f"wrote {path}")
    return EXIT_OK


ABLATION_VARIANTS = {
    "c0": {"c": 0},
    "c1": {"c": 1},
    "c2": {"c": 2},
    "c3": {"c": 3},
    "individual": {"individual": True},
    "residual": {"backbone": "residual_block"},
}


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    data = _load_data(args.data)
    unknown = [v for v in args.variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise UsageError(f"unknown variant(s) {unknown}; valid: {', '.join(ABLATION_VARIANTS)}")
    out = _prepare_out(Path(args.out), args.force)
    rows = []
    for variant in args.variants:
        try:
            net = replace(cfg.net, **ABLATION_VARIANTS[variant])
        except ValueError as exc:
            raise UsageError(f"variant {variant}: {exc}") from exc
        vcfg = replace(cfg, net=net)
        sub = out / variant
        sub.mkdir()
        (sub / CONFIG_SNAPSHOT).write_text(vcfg.dump(), encoding="utf-8")
        result = train(data, net, vcfg.train, vcfg.crop, m_c=cfg.eval.m_c, run_dir=sub,
                       meta=_run_meta(vcfg, args.data, data), workers=args.workers)
        report, _, _ = evaluate(result.model, data, "test", cfg.eval.m_c, _eval_pairs(cfg, data, "test"),
                                config_hash=vcfg.hash)
        _write_json(sub / METRICS_JSON, {**report.to_dict(), "split": "test"})
        row = {"variant": variant, "n_parameters": sum(p.numel() for p in result.model.parameters())}
        row.update({f"pcc_{c}": report.rows[c].pcc for c in ALL_CRITERIA})
        row["mae_MS"] = report.rows["MS"].mae
        row["config_hash"] = vcfg.hash
        rows.append(row)
        print(f"{variant}: MS PCC {report.rows['MS'].pcc:.4f}")
    write_csv(out / ABLATION_CSV, ["variant", "n_parameters", *(f"pcc_{c}" for c in ALL_CRITERIA), "mae_MS",
                                   "config_hash"], rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facesim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="experiment YAML (defaults apply when omitted)")
        p.add_argument("--seed", type=int, help="override the top-level seed")

    def with_train_flags(p):
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--deterministic", action="store_true")
        p.add_argument("--workers", type=int, help="intra-op threads")

    def with_run(p, split_default="test"):
        p.add_argument("--run", required=True, help="run directory with a checkpoint")
        p.add_argument("--data", help="dataset directory (default: the one the run was trained on)")
        p.add_argument("--split", default=split_default, choices=("train", "val", "test"))

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    with_config(p)
    with_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--init-from", help="run directory whose weights initialize training (fine-tuning)")
    p.add_argument("--self-identity-fraction", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="learning-rate and batch-size grid search")
    with_config(p)
    with_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("probe", help="single-task age or sex probe")
    with_config(p)
    with_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", required=True, choices=PROBE_TASKS)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="metrics on one split at one zoom")
    with_run(p)
    p.add_argument("--mc", type=float, help="zoom (default from the run config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-zoom", help="metrics across zoom values plus the no-box setting")
    with_run(p)
    p.add_argument("--mc-list", type=float, nargs="+")
    p.add_argument("--skip-no-box", action="store_true")
    p.add_argument("--no-box-run", help="run trained on full images (crop.use_boxes: false) for the no-box row; "
                                        "without it the no-box row applies this run's model to full frames")
    p.set_defaults(func=cmd_sweep_zoom)

    p = sub.add_parser("self-eval", help="identity and self matching")
    with_run(p)
    p.set_defaults(func=cmd_self_eval)

    p = sub.add_parser("pair-variation", help="prediction spread across image pairs of two users")
    with_run(p)
    p.set_defaults(func=cmd_pair_variation)

    p = sub.add_parser("saliency", help="guided backprop with SmoothGrad for one pair")
    with_run(p)
    p.add_argument("--pair", type=int, default=0, help="index into the sampled evaluation pairs")
    p.add_argument("--images", help="explicit pair as IMAGE_A,IMAGE_B")
    p.add_argument("--head", default="MS")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--target", default="both", choices=("a", "b", "both"))
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("report", help="render report.md from stored results")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="train and compare architecture variants")
    with_config(p)
    with_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--variants", nargs="+", default=["c0", "c1", "c2", "individual"])
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, EvaluationError, RuntimeError, OSError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
