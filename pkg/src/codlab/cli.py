"""Command-line entry point.

Subcommands: ``genlabel``, ``synth``, ``train``, ``infer``, ``eval``,
``gradcheck``, ``params``. Exit codes: 0 success, 1 usage error,
2 runtime failure.

Configuration is layered: built-in defaults, then a flat ``key = value``
file given with --config (``#`` starts a comment), then repeatable
``--set key=value`` flags. Unknown keys are rejected by name, and every
run prints the fully resolved configuration before doing work.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .data import DatasetManifest, load_sample, save_map, synth_generate
from .gradlabel import CannyParams, boundary_label, object_gradient_label
from .model import Model, ModelConfig, count_macs, count_params, param_breakdown
from .trainer import TrainConfig, infer, train

PRESETS = {
    "dgnet_s": {},
    "dgnet": {"ci": "64", "n_set": "4,8,16"},
    "toy": {
        "ci": "8", "cg": "8", "m": "2", "n_set": "2,4",
        "backbone_widths": "8,8,8,8,8", "tex_widths": "8,8", "input_size": "96",
    },
}

MODEL_KEYS = set(ModelConfig().to_kv())
TRAIN_KEYS = {"epochs", "batch", "lr_min", "lr_max", "period", "hflip", "crop"}
CANNY_KEYS = {"canny_sigma", "canny_kernel", "canny_low", "canny_high"}
ALL_KEYS = MODEL_KEYS | TRAIN_KEYS | CANNY_KEYS | {"preset"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


def parse_config_file(path: Path) -> dict[str, str]:
    kv: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        k, _, v = line.partition("=")
        kv[k.strip()] = v.strip()
    return kv


def resolve_config(args) -> dict[str, str]:
    """defaults <- preset <- config file <- --set flags, with key validation."""
    kv = ModelConfig().to_kv()
    kv.update({
        "epochs": "20", "batch": "4", "lr_min": "1e-05", "lr_max": "0.0001",
        "period": "20", "hflip": "1", "crop": "1",
        "canny_sigma": "1.0", "canny_kernel": "5", "canny_low": "0.1", "canny_high": "0.2",
    })
    layers = []
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        layers.append(parse_config_file(Path(cfg_path)))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = v.strip()
    layers.append(overrides)
    for layer in layers:
        if "preset" in layer:
            preset = layer.pop("preset")
            if preset not in PRESETS:
                raise UsageError(f"unknown preset {preset!r} (have {sorted(PRESETS)})")
            kv.update(PRESETS[preset])
        for k, v in layer.items():
            if k not in ALL_KEYS:
                raise UsageError(f"unknown configuration key {k!r}")
            kv[k] = v
    return kv


def print_resolved(kv: dict[str, str], extra: dict[str, object] = ()) -> None:
    print("# resolved configuration")
    merged = dict(kv)
    merged.update({k: str(v) for k, v in dict(extra).items()})
    for k in sorted(merged):
        print(f"{k} = {merged[k]}")


def model_config_from(kv: dict[str, str]) -> ModelConfig:
    return ModelConfig.from_kv({k: kv[k] for k in MODEL_KEYS})


def canny_params_from(kv: dict[str, str]) -> CannyParams:
    return CannyParams(
        gaussian_sigma=float(kv["canny_sigma"]),
        gaussian_kernel=int(kv["canny_kernel"]),
        low_ratio=float(kv["canny_low"]),
        high_ratio=float(kv["canny_high"]),
    )


def _jobs(args) -> int:
    if getattr(args, "jobs", None):
        return max(1, args.jobs)
    env = os.environ.get("CODLAB_JOBS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def _note_seed_ignored(args) -> None:
    if getattr(args, "seed", None) is not None:
        print("note: --seed is ignored by this subcommand (it is deterministic)")


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------


def _genlabel_one(task) -> str:
    img_path, gt_path, size, params, want_boundary = task
    sample = load_sample(img_path, gt_path, target_size=size)
    grad = object_gradient_label(sample.image, sample.mask, params)
    save_map(grad, gt_path.with_name(f"{gt_path.stem}_grad.png"))
    if want_boundary:
        bound = boundary_label(sample.mask)
        save_map(bound, gt_path.with_name(f"{gt_path.stem}_bound.png"))
    return sample.id


def cmd_genlabel(args) -> int:
    kv = resolve_config(args)
    size = args.size if args.size else int(kv["input_size"])
    print_resolved(kv, {"data": args.data, "size": size, "jobs": _jobs(args)})
    _note_seed_ignored(args)
    params = canny_params_from(kv)
    manifest = DatasetManifest.discover(args.data, target_size=size)
    tasks = [(img, gt, size, params, not args.no_boundary) for img, gt in manifest.pairs]
    jobs = _jobs(args)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_genlabel_one, tasks))
    else:
        done = [_genlabel_one(t) for t in tasks]
    print(f"labels written for {len(done)} samples under {Path(args.data) / 'GT'}")
    return 0


def cmd_synth(args) -> int:
    print_resolved({}, {"n": args.n, "size": args.size, "seed": args.seed, "out": args.out})
    manifest = synth_generate(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(manifest)} image/mask pairs under {args.out}")
    return 0


def cmd_train(args) -> int:
    kv = resolve_config(args)
    if args.epochs is not None:
        kv["epochs"] = str(args.epochs)
    if args.batch is not None:
        kv["batch"] = str(args.batch)
    seed = args.seed if args.seed is not None else 0
    print_resolved(kv, {"data": args.data, "out": args.out, "seed": seed,
                        "resume": args.resume or ""})
    model_cfg = model_config_from(kv)
    cfg = TrainConfig(
        model=model_cfg,
        epochs=int(kv["epochs"]),
        batch=int(kv["batch"]),
        lr_min=float(kv["lr_min"]),
        lr_max=float(kv["lr_max"]),
        period=int(kv["period"]),
        seed=seed,
        hflip=kv["hflip"] == "1",
        crop=kv["crop"] == "1",
        out_dir=Path(args.out),
        canny=canny_params_from(kv),
        resume=Path(args.resume) if args.resume else None,
    )
    manifest = DatasetManifest.discover(args.data, target_size=model_cfg.input_size)
    result = train(cfg, manifest)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"best:       {result.best_path}")
    print(f"loss log:   {result.log_path}")
    if result.rows:
        print(f"loss {result.initial_total:.4f} -> {result.final_total:.4f} "
              f"over {len(result.rows)} iterations")
    return 0


def cmd_infer(args) -> int:
    print_resolved({}, {"checkpoint": args.checkpoint, "images": args.images, "out": args.out})
    _note_seed_ignored(args)
    written = infer(args.checkpoint, args.images, args.out)
    print(f"wrote {len(written)} prediction maps to {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_dataset  # heavy import kept local

    jobs = _jobs(args)
    print_resolved({}, {"pred": args.pred, "gt": args.gt, "out": args.out,
                        "normalize": int(args.normalize), "jobs": jobs})
    _note_seed_ignored(args)
    report = evaluate_dataset(args.pred, args.gt, out_dir=args.out,
                              normalize=args.normalize, jobs=jobs)
    for k in ("s_alpha", "e_max", "e_mean", "e_adaptive", "f_max", "f_mean",
              "f_adaptive", "f_weighted", "mae"):
        print(f"{k:<12} {report.means[k]:.6f}")
    print(f"({report.n_images} images, {report.n_empty_gt} with empty ground truth; "
          f"CSVs in {args.out})")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import run_suite

    _note_seed_ignored(args)
    entries = run_suite(verbose=True)
    failed = [e for e in entries if not e.passed]
    if failed:
        print(f"{len(failed)} of {len(entries)} checks FAILED")
        return 2
    print(f"all {len(entries)} gradient checks passed")
    return 0


def cmd_params(args) -> int:
    kv = resolve_config(args)
    size = args.size if args.size else int(kv["input_size"])
    print_resolved(kv, {"size": size})
    _note_seed_ignored(args)
    model = Model(model_config_from(kv), seed=0)
    total = count_params(model)
    macs, macs_scoped = count_macs(model, size, size, breakdown=True)
    print(f"parameters: {total:,} ({total / 1e6:.3f} M)")
    print(f"MACs @ {size}x{size}: {macs:,} ({macs / 1e9:.3f} G)")
    print(f"{'submodule':<12} {'params':>12} {'MACs':>16}")
    scoped_params = param_breakdown(model)
    for scope in sorted(set(scoped_params) | set(macs_scoped)):
        print(f"{scope:<12} {scoped_params.get(scope, 0):>12,} {macs_scoped.get(scope, 0):>16,}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="codlab", description=__doc__,
               formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add_config_flags(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    sp = sub.add_parser("genlabel", help="emit *_grad.png / *_bound.png next to the ground truth")
    sp.add_argument("--data", required=True, help="dataset root containing Imgs/ and GT/")
    sp.add_argument("--size", type=int, help="label resolution (default: input_size)")
    sp.add_argument("--no-boundary", action="store_true", help="skip boundary labels")
    sp.add_argument("--jobs", type=int, help="parallel workers (default: CODLAB_JOBS or cores)")
    sp.add_argument("--seed", type=int, help="ignored; genlabel is deterministic")
    add_config_flags(sp)
    sp.set_defaults(fn=cmd_genlabel)

    sp = sub.add_parser("synth", help="generate a synthetic camouflage dataset")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--size", type=int, default=96)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train on an Imgs/ + GT/ dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    add_config_flags(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("infer", help="write sigmoid prediction maps for a directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--images", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, help="ignored; inference is deterministic")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("eval", help="score predictions against ground truth")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--normalize", action="store_true",
                    help="min-max normalize each prediction before scoring")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--seed", type=int, help="ignored; evaluation is deterministic")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer type")
    sp.add_argument("--seed", type=int, help="ignored; the suite pins its own seeds")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("params", help="parameter and MACs accounting")
    sp.add_argument("--size", type=int, help="input resolution for MACs (default: input_size)")
    sp.add_argument("--seed", type=int, help="ignored; counting is deterministic")
    add_config_flags(sp)
    sp.set_defaults(fn=cmd_params)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
