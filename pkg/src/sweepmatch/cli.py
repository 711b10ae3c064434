"""Command-line interface: gen-synth, train, build-index, query, evaluate.

Every subcommand reads the shared JSON config (``--config``), optionally
shrunk by ``--desk``; results are emitted as one JSON object per line so
runs are machine-readable, with human-readable logs on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from . import config as cfgmod
from .baselines import ncc_retrieve
from .evaluation import evaluate, merge_reports, simulate_queries
from .phantom import generate_phantom_dataset
from .retrieval import build_index, load_index, query, save_index
from .sweeps import load_sweep, load_sweep_dirs, read_pgm, save_sweep
from .training import train


def _log(*args):
    print(*args, file=sys.stderr)


def _emit(obj):
    print(json.dumps(obj))


def cmd_gen_synth(args, cfg):
    gen = cfg["gen"]
    splits = [("train", gen["train_sweeps"]), ("val", gen["val_sweeps"]),
              ("test", gen["test_sweeps"])]
    total = sum(n for _, n in splits)
    pcfg = cfgmod.phantom_config(cfg, seed=args.seed if args.seed is not None
                                 else cfg["phantom"]["seed"])
    sweeps = generate_phantom_dataset(pcfg, total)
    out = Path(args.out)
    cursor = 0
    for split, n in splits:
        for k in range(n):
            sweep = sweeps[cursor]
            save_sweep(sweep, out / split / f"sweep_{cursor:03d}")
            cursor += 1
        _log(f"wrote {n} sweeps to {out / split}")
    _emit({"generated_sweeps": total, "out": str(out), "seed": pcfg.seed})
    return 0


def cmd_train(args, cfg):
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
    out = Path(args.out)
    result = train(cfg, out, baseline=args.baseline, ablation=args.ablation,
                   log=_log)
    cfgmod.save_config(cfg, out / "config.json")
    _emit({
        "best_checkpoint": str(result.best_checkpoint),
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs": len(result.history),
        "baseline": args.baseline,
        "ablation": args.ablation,
        "config_echo": cfg,
    })
    return 0


def cmd_build_index(args, cfg):
    sweep = load_sweep(args.sweep)
    index = build_index(sweep, args.checkpoint)
    save_index(index, args.out)
    _emit({"index": str(args.out), "sweep_id": index.sweep_id,
           "entries": len(index.entries), "alpha": index.alpha})
    return 0


def cmd_query(args, cfg):
    index = load_index(args.index)
    image = read_pgm(Path(args.image))
    result = query(index, image, args.checkpoint)
    _emit(result.to_dict())
    return 0


def cmd_evaluate(args, cfg):
    if args.seed is not None:
        cfg["eval"]["seed"] = args.seed
    test_sweeps = load_sweep_dirs(cfg["data"]["test_dir"])
    affine = cfgmod.affine3d_params(cfg)
    reports = []
    for i, sweep in enumerate(test_sweeps):
        queries = simulate_queries(
            sweep,
            n=cfg["eval"]["queries_per_sweep"],
            seed=int(cfg["eval"]["seed"]) + i,
            affine=affine,
            half_width=cfg["eval"]["half_width"],
        )
        if args.baseline == "ncc":
            retrieve = lambda img, s=sweep: ncc_retrieve(s, img)
        else:
            if args.checkpoint is None:
                raise SystemExit("--checkpoint is required unless --baseline ncc")
            index = build_index(sweep, args.checkpoint)
            from .retrieval import batch_query  # single encoder load per sweep

            results = batch_query(index, [q[0] for q in queries], args.checkpoint)
            it = iter(results)
            retrieve = lambda img, it=it: next(it)
        reports.append(evaluate(queries, retrieve,
                                cfg["eval"]["success_threshold_mm"]))
        _log(f"sweep {sweep.id}: success {reports[-1].success_rate:.2%}, "
             f"rejected {reports[-1].rejection_rate:.2%}")
    merged = merge_reports(reports)
    payload = {
        "version": __version__,
        "baseline": args.baseline,
        **{k: v for k, v in merged.to_dict().items() if k != "records"},
        "config_echo": cfg,
    }
    if args.full_records:
        payload["records"] = merged.to_dict()["records"]
    _emit(payload)
    if args.out:
        payload["records"] = merged.to_dict()["records"]
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sweepmatch",
        description="Intra-sweep contrastive frame retrieval for tracked "
                    "ultrasound-style sweeps.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=False):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file (defaults baked in)")
        p.add_argument("--desk", action="store_true",
                       help="desk-scale preset: small images/encoder, 60 epochs")
        p.add_argument("--seed", type=int, default=None)
        if needs_out:
            p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gen-synth", help="generate a phantom sweep dataset")
    common(p, needs_out=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train an encoder")
    common(p, needs_out=True)
    p.add_argument("--baseline", default="ours",
                   choices=["ncc", "inter-sweep", "ivpp", "distance-ivpp", "ours"])
    p.add_argument("--ablation", default=None, choices=["sce", "p1", "p2", "full"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-index", help="embed a database sweep")
    common(p, needs_out=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sweep", type=Path, required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("query", help="retrieve the best frame for one image")
    common(p)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="run the simulated query protocol")
    common(p)
    p.add_argument("--baseline", default="ours",
                   choices=["ncc", "inter-sweep", "ivpp", "distance-ivpp", "ours"])
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--full-records", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    baseline = getattr(args, "baseline", None)
    if baseline == "inter-sweep":
        args.baseline = "inter_sweep_cl"
    elif baseline == "distance-ivpp":
        args.baseline = "distance_ivpp"
    cfg = cfgmod.load_config(args.config, desk=args.desk)
    try:
        return args.func(args, cfg)
    except Exception as exc:  # structured error, nonzero exit
        _emit({"error": type(exc).__name__, "message": str(exc)})
        return 1


def main():
    raise SystemExit(cli_main())


if __name__ == "__main__":
    main()
