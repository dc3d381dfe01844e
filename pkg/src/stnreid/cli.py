"""Command line driver: ``stnreid <subcommand> [flags]``.

Exit codes: 0 success, 1 hard error (one ``ERROR:<module>:<message>`` line on
stderr), 2 usage error. Every subcommand that takes ``--out`` writes its
artifacts there and nowhere else, together with ``manifest.txt``.
"""
from __future__ import annotations

import argparse
import logging
import os
import subprocess
import sys
import traceback
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_dataset, make_partial_benchmark, synth_dataset, write_dataset
from .evaluation import (bench_matching, dump_top_affined, evaluate_protocol, write_bench_csv)
from .gradsuite import SUITE, run_suite
from .tensorio import FormatError
from .trainer import (TABLE2, Checkpoint, TrainConfig, load_config, merge_checkpoints,
                      pretrain_checkpoint, resolve_dataset, run_experiment_matrix, table2_config,
                      train_reid_only, train_stage1, train_stage2_pm, write_matrix_csv)

log = logging.getLogger("stnreid")

MANIFEST = "manifest.txt"


class CliError(Exception):
    """Bad input detected by the driver itself (unreadable files, missing flags)."""


def version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                              cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                              timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"v{__version__}-g{desc}" if desc else f"v{__version__}"


def _ints(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", default=[],
                        help="key = value config file; repeat to concatenate (last value wins)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (created if absent)")
    common.add_argument("--threads", type=int, default=None, help="BLAS worker threads")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="stnreid", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a procedural dataset as PPM files")
    s.add_argument("--ids", type=int, default=10)
    s.add_argument("--per-id", type=int, default=6)

    s = sub.add_parser("train", parents=[common], help="stage 1, or stage 2 in pm / mm mode")
    s.add_argument("--stage", type=int, choices=(1, 2))
    s.add_argument("--mode", choices=("pm", "mm"))
    s.add_argument("--stn-from", help="checkpoint supplying the frozen STN (stage 2)")
    s.add_argument("--reid-from", help="trained ReID checkpoint to merge (stage 2, mm)")

    s = sub.add_parser("eval", parents=[common], help="CMC with and without the STN")
    s.add_argument("checkpoint")
    s.add_argument("--repeats", type=int, default=10)
    s.add_argument("--dump", type=int, default=0, metavar="N",
                   help="write top-5 affined images for the first N probes")

    s = sub.add_parser("bench", parents=[common], help="1-N matching throughput")
    s.add_argument("checkpoint")
    s.add_argument("--batch-sizes", type=_ints, default=[1, 2, 16, 32])
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--gallery-size", type=int, default=64)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("names", nargs="*", help=f"cases to run (known: {', '.join(SUITE)})")
    s.add_argument("--all", action="store_true")
    s.add_argument("--repeats", type=int, default=5, help="random instances per case")

    s = sub.add_parser("matrix", parents=[common], help="confrontation matrix over Table II rows")
    s.add_argument("--rows", default=",".join(TABLE2))
    s.add_argument("--repeats", type=int, default=10)

    s = sub.add_parser("merge", parents=[common], help="compose a ReID checkpoint with a frozen STN")
    s.add_argument("--reid-from", required=True)
    s.add_argument("--stn-from", required=True)
    return p


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "stage", None) is not None:
        over["stage"] = args.stage
    if getattr(args, "mode", None) is not None:
        over["mode"] = args.mode
    return cfg.replace(**over) if over else cfg


def _out(args, required: bool = True) -> Path | None:
    if args.out is None:
        if required:
            raise CliError(f"{args.command} needs --out")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_ckpt(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except (FormatError, OSError) as e:
        raise CliError(f"cannot read checkpoint {path}: {e}") from None


def _write_manifest(out: Path, args, cfg: TrainConfig | None, extra: dict | None = None) -> None:
    lines = [f"version = {version_string()}", f"command = {args.command}",
             f"threads = {args.threads if args.threads is not None else 'default'}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    if cfg is not None:
        lines.append("# resolved config")
        lines += cfg.to_text().splitlines()
    (out / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _eval_dataset(cfg: TrainConfig, train_set=None):
    """Held-out identities unless ``eval_synth_ids`` is 0, which means the training set."""
    if cfg.eval_data_dir:
        return load_dataset(cfg.eval_data_dir, (cfg.image_height, cfg.image_width))
    if cfg.eval_synth_ids == 0:
        return train_set if train_set is not None else resolve_dataset(cfg)
    return synth_dataset(cfg.eval_synth_ids, cfg.eval_synth_per_id, cfg.image_height, cfg.image_width,
                         seed=cfg.eval_synth_seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = _out(args)
    ds = synth_dataset(args.ids, args.per_id, cfg.image_height, cfg.image_width, seed=cfg.seed)
    paths = write_dataset(ds, out)
    _write_manifest(out, args, cfg, {"ids": args.ids, "per_id": args.per_id, "images": len(paths)})
    print(f"wrote {len(paths)} images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out(args)
    dataset = resolve_dataset(cfg)
    extra = {"num_images": len(dataset), "num_ids": dataset.num_ids}
    if cfg.pt_warmstart == "auto":
        cfg = cfg.replace(pt_warmstart=pretrain_checkpoint(dataset, cfg, out / "pretrain.stnt"))
    if cfg.stage == 1:
        res = train_stage1(dataset, cfg, out)
        extra["final_loss"] = f"{res.history[-1]['total']:.9g}"
    elif cfg.mode == "pm":
        if not args.stn_from:
            raise CliError("train --stage 2 --mode pm needs --stn-from")
        res = train_stage2_pm(dataset, _load_ckpt(args.stn_from), cfg, out)
        extra.update(stn_from=args.stn_from, final_loss=f"{res.history[-1]['total']:.9g}")
    else:
        if not args.stn_from:
            raise CliError("train --stage 2 --mode mm needs --stn-from")
        stn_ckpt = _load_ckpt(args.stn_from)
        if args.reid_from:
            reid_ckpt = _load_ckpt(args.reid_from)
        else:
            # no ReID given: train the bare baseline first, then merge
            reid_ckpt = train_reid_only(dataset, cfg, out / "reid").checkpoint
        merged = merge_checkpoints(reid_ckpt, stn_ckpt)
        merged.save(out / "ckpt_final.stnt")
        extra.update(stn_from=args.stn_from, reid_from=args.reid_from or str(out / "reid"))
    _write_manifest(out, args, cfg, extra)
    print(f"checkpoint: {out / 'ckpt_final.stnt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out(args)
    model = _load_ckpt(args.checkpoint).to_model()
    bench = make_partial_benchmark(_eval_dataset(cfg), cfg.seed)
    with_stn = evaluate_protocol(model, bench, args.repeats, cfg.seed, use_stn=True, metric=cfg.eval_metric)
    without = evaluate_protocol(model, bench, args.repeats, cfg.seed, use_stn=False, metric=cfg.eval_metric)
    with_stn.write_csv(out / "cmc.csv")
    without.write_csv(out / "cmc_no_stn.csv")
    if args.dump:
        dump_top_affined(model, bench, out / "affined", max_probes=args.dump)
    _write_manifest(out, args, cfg, {"checkpoint": args.checkpoint, "repeats": args.repeats,
                                     "rank1": f"{with_stn.rank1:.6f}",
                                     "rank1_no_stn": f"{without.rank1:.6f}"})
    print(f"rank-1 {with_stn.rank1:.4f} with STN, {without.rank1:.4f} without")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    out = _out(args)
    if args.gallery_size < max(args.batch_sizes):
        raise CliError(f"--gallery-size {args.gallery_size} is smaller than batch size {max(args.batch_sizes)}")
    model = _load_ckpt(args.checkpoint).to_model()
    h, w = (model.stn.height, model.stn.width) if model.stn is not None else (cfg.image_height, cfg.image_width)
    ds = synth_dataset(max(2, -(-args.gallery_size // 2)), 2, h, w, seed=cfg.seed)
    gallery = ds.images[:args.gallery_size]
    rows = bench_matching(model, gallery[0], gallery, args.batch_sizes, args.repeats)
    write_bench_csv(rows, out / "bench.csv")
    _write_manifest(out, args, cfg, {"checkpoint": args.checkpoint, "gallery_size": args.gallery_size,
                                     "repeats": args.repeats})
    for r in rows:
        print(f"N={r.batch_size:3d}  {r.median_s:.4f} s/probe  {r.per_pair_us:.1f} us/pair")
    return 0


def cmd_gradcheck(args) -> int:
    if not args.all and not args.names:
        raise CliError("name gradient cases or pass --all")
    names = list(SUITE) if args.all else args.names
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise CliError(f"unknown gradient cases {unknown}")
    results = run_suite(names, args.repeats, args.seed or 0)
    lines = []
    for r in results:
        rep = r.report
        lines.append(f"{r.name},{r.instance},{rep.max_rel_error:.3e},{rep.rel_tol:g},{'pass' if r.passed else 'FAIL'}")
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}[{r.instance}] max rel err {rep.max_rel_error:.2e} "
              f"(tol {rep.rel_tol:g}, {rep.num_checked} elements)")
    out = _out(args, required=False)
    if out is not None:
        (out / "gradcheck.csv").write_text("case,instance,max_rel_error,rel_tol,status\n" + "\n".join(lines) + "\n")
        _write_manifest(out, args, None, {"cases": len(names), "instances": args.repeats})
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"ERROR:gradsuite:{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return 1
    return 0


def cmd_matrix(args) -> int:
    cfg = _config(args)
    out = _out(args)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    bad = [r for r in rows if r not in TABLE2]
    if bad:
        raise CliError(f"unknown matrix rows {bad}; known: {list(TABLE2)}")
    dataset = resolve_dataset(cfg)
    results = run_experiment_matrix(dataset, [(r, table2_config(r, cfg)) for r in rows],
                                    _eval_dataset(cfg, dataset), args.repeats, out, eval_seed=cfg.seed)
    write_matrix_csv(results, out / "matrix.csv")
    _write_manifest(out, args, cfg, {"rows": ",".join(rows), "repeats": args.repeats})
    for r in results:
        print(f"{r.name}: {r.rank1_with_stn:.4f} with STN, {r.rank1_without_stn:.4f} without ({r.improvement:+.4f})")
    return 0


def cmd_merge(args) -> int:
    out = _out(args)
    merged = merge_checkpoints(_load_ckpt(args.reid_from), _load_ckpt(args.stn_from))
    merged.save(out / "ckpt_final.stnt")
    _write_manifest(out, args, None, {"reid_from": args.reid_from, "stn_from": args.stn_from})
    print(f"checkpoint: {out / 'ckpt_final.stnt'}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "gradcheck": cmd_gradcheck, "matrix": cmd_matrix, "merge": cmd_merge}


def _error_module(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return "cli"
    mod = "cli"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("stnreid."):
            mod = name.split(".", 1)[1]
    return mod


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s:%(name)s:%(message)s")
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limits = threadpool_limits(limits=args.threads)
    else:
        limits = nullcontext()
    try:
        with limits:
            return COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - reported as a single machine-readable line
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"ERROR:{_error_module(e)}:{msg}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
