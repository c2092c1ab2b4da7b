"""Command-line entry point: ``antigan {ablation,sweep,attack,obfuscate-demo}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import _accel
from .config import BRANCHES, ExperimentConfig, load_config
from .data import DATA_ROOT_ENV, load_dataset

log = logging.getLogger("antigan")

# flag -> config field for the common overrides
SHORTCUTS = {
    "dataset": "dataset", "data_root": "data_root", "seed": "seed", "train_limit": "train_limit",
    "test_limit": "test_limit", "expected_variance": "expected_variance", "mu": "mu", "lam": "lam",
    "gan_epochs": "gan_epochs", "attack_epochs": "attack_epochs",
}


def _parse_override(text: str):
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), yaml.safe_load(value)


def build_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    data = cfg.to_dict()
    for flag, name in SHORTCUTS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[name] = value
    if getattr(args, "rounds", None) is not None:
        data["federated"]["rounds"] = args.rounds
    if getattr(args, "attack_classes", None):
        data["attack_classes"] = args.attack_classes
    for key, value in args.set or []:
        if key.startswith("federated."):
            data["federated"][key.split(".", 1)[1]] = value
        else:
            data[key] = value
    return ExperimentConfig.from_dict(data)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML or JSON experiment config")
    p.add_argument("--run-dir", type=Path, help="output directory (default runs/<command>)")
    p.add_argument("--data-root", help=f"dataset directory (default ${DATA_ROOT_ENV} or ./data)")
    p.add_argument("--dataset", choices=["mnist", "cifar10", "cifar100"])
    p.add_argument("--seed", type=int)
    p.add_argument("--train-limit", type=int)
    p.add_argument("--test-limit", type=int)
    p.add_argument("--expected-variance", "--v-e", type=float, dest="expected_variance")
    p.add_argument("--mu", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--gan-epochs", type=int)
    p.add_argument("--attack-epochs", type=int)
    p.add_argument("--attack-classes", type=int, nargs="+")
    p.add_argument("--rounds", type=int, help="federated rounds")
    p.add_argument("--set", type=_parse_override, action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. --set gan_width=32 --set federated.lr=0.0005")
    p.add_argument("-v", "--verbose", action="store_true")


def _print_records(records):
    print(f"{'branch':<14}{'v_e':>6}{'mu':>6}{'a_x':>9}{'a_xhat':>9}{'ADR':>9}{'sim':>8}  status")
    for r in records:
        print(f"{r.branch:<14}{r.expected_variance:>6.2f}{r.mu:>6.2f}{r.a_x:>9.4f}{r.a_xhat:>9.4f}"
              f"{r.adr:>9.4f}{r.mean_similarity:>8.3f}  {r.status}")


def cmd_ablation(args):
    from .harness import run_ablation
    cfg = build_config(args)
    records = run_ablation(cfg, args.run_dir or Path("runs/ablation"), branches=args.branches)
    _print_records(records)
    return 0 if all(r.status == "ok" for r in records) else 1


def cmd_sweep(args):
    from .harness import run_sweep
    cfg = build_config(args)
    fixed = None
    if args.fixed is not None:
        other = "mu" if args.parameter in ("v_e", "ve") else "expected_variance"
        fixed = {other: args.fixed}
    run_dir = args.run_dir or Path(f"runs/sweep_{args.parameter}")
    records = run_sweep(cfg, args.parameter, args.values, run_dir, fixed=fixed)
    _print_records(records)
    return 0 if all(r.status == "ok" for r in records) else 1


def cmd_attack(args):
    from .harness import run_branch
    cfg = build_config(args).replace(branch=args.branch)
    rec = run_branch(cfg, args.run_dir or Path(f"runs/attack_{args.branch}"))
    _print_records([rec])
    for c, v in sorted(rec.similarity.items()):
        print(f"  class {c}: similarity {v:.4f}")
    return 0 if rec.status == "ok" else 1


def cmd_obfuscate_demo(args):
    from .attacker import image_grid
    from .obfuscation import ObfuscationParams, mean_window_variance, obfuscate_pixels
    cfg = build_config(args)
    images = load_dataset(cfg.dataset, "test", limit=args.count, root=cfg.data_root).images
    rows = [images]
    for v_e in args.values:
        params = ObfuscationParams(v_e, cfg.window_size)
        out = []
        for i, img in enumerate(images):
            res = obfuscate_pixels(img, params, max_steps=args.steps, seed=cfg.seed + i)
            out.append(res.image)
        out = np.stack(out)
        rows.append(out)
        print(f"v_e={v_e}: mean window variance {mean_window_variance(out, cfg.window_size):.4f}")
    path = args.out or (args.run_dir or Path("runs/obfuscate_demo")) / "obfuscation_demo.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    image_grid(np.concatenate(rows), ncol=len(images)).save(path)
    print(f"wrote {path} (rows: original, " + ", ".join(f"v_e={v}" for v in args.values) + ")")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="antigan", description="Defended federated learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ablation", help="run the ablation branches and write a metrics table")
    _common(p)
    p.add_argument("--branches", nargs="+", choices=BRANCHES, default=list(BRANCHES))
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("sweep", help="sweep v_e or mu on the full pipeline")
    _common(p)
    p.add_argument("--parameter", choices=["v_e", "mu"], required=True)
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--fixed", type=float, help="value of the other knob (default mu=0.6 / v_e=0.7)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack", help="run one branch and report the black-box attack")
    _common(p)
    p.add_argument("--branch", choices=BRANCHES, default="full")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("obfuscate-demo", help="pixel-space obfuscation of a few test images")
    _common(p)
    p.add_argument("--values", type=float, nargs="+", default=[0.5, 0.8], help="expected variances to show")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_obfuscate_demo)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    log.info("numeric backend: %s", _accel.BACKEND)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
