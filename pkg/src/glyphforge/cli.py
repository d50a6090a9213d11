"""Operator entry point: prepare, train, resume, sample, eval.

Exit codes: 0 success, 1 data/format failure, 2 usage/config failure.
Setting GLYPHFORGE_DETERMINISTIC=1 forces deterministic mode for every
command regardless of configuration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__, ndgrad
from .generator import ConfigError
from .glyphdata import (
    ChecksumError,
    FormatError,
    GlyphBitmap,
    PairedSample,
    ValidationError,
    load_bitmap,
    normalize,
    open_pack,
    pack as pack_pairs,
    scan_pairs,
    split,
)
from .metrics import evaluate, write_eval_report
from .trainer import (
    DivergenceError,
    IncompatibilityError,
    TrainConfig,
    emit_samples,
    load_checkpoint,
    parse_log,
    train,
)

EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2


def _write_manifest(out_dir, command, config, inputs):
    manifest = {
        "tool": "glyphforge",
        "version": __version__,
        "command": command,
        "created_unix": int(time.time()),
        "inputs": inputs,
        "out_dir": str(out_dir),
        "config": config.to_dict(),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _parse_codepoints(raw):
    cps = []
    for tok in raw.replace(",", " ").split():
        tok = tok.upper()
        if tok.startswith("U+"):
            tok = tok[2:]
        cps.append(int(tok, 16))
    return cps


def cmd_prepare(args):
    valid, rejected = scan_pairs(args.source_dir, args.target_dir, args.min_ink)
    pairs = []
    kept = []
    for cp in valid:
        src = load_bitmap(os.path.join(args.source_dir, f"{cp:04X}.pgm"), codepoint=cp)
        tgt = load_bitmap(os.path.join(args.target_dir, f"{cp:04X}.pgm"), codepoint=cp)
        if src.width != args.side:
            rejected.append((cp, "size_mismatch"))
            continue
        pairs.append((cp, src, tgt))
        kept.append(cp)
    rejected.sort()
    report_path = args.report or (str(args.out) + ".rejects.tsv")
    with open(report_path, "w") as fh:
        for cp, reason in rejected:
            fh.write(f"U+{cp:04X}\t{reason}\n")
    print(f"valid: {len(kept)}")
    print(f"rejected: {len(rejected)} (report: {report_path})")
    if not kept:
        print("no valid pairs; nothing to pack", file=sys.stderr)
        return EXIT_USAGE
    summary = pack_pairs(pairs, args.side, args.out)
    print(f"packed {summary.count} pairs at side {summary.side} -> {summary.path}")
    return EXIT_OK


def _load_config(args):
    with open(args.config) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {args.config} is not valid JSON: {err}") from None
    cfg = TrainConfig.from_dict(raw)
    overrides = {}
    for name in ("epochs", "batch_size", "seed", "lr", "side"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "deterministic", None) is not None:
        overrides["deterministic"] = args.deterministic
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = TrainConfig.from_dict(d)
    return cfg


def _finish_run(result):
    rows = parse_log(result.log_path)
    if rows:
        from .figures import save_loss_curves

        fig_path = os.path.join(os.path.dirname(result.log_path), "loss_curves.png")
        save_loss_curves(rows, fig_path)
        print(f"loss curves: {fig_path}")
    print(f"log: {result.log_path}")
    print(f"final checkpoint: {result.final_checkpoint}")


def cmd_train(args):
    cfg = _load_config(args)
    if ndgrad.deterministic_from_env():
        d = cfg.to_dict()
        d["deterministic"] = True
        cfg = TrainConfig.from_dict(d)
    pack = open_pack(args.pack)
    os.makedirs(args.out_dir, exist_ok=True)
    _write_manifest(args.out_dir, "train", cfg, {"pack": str(args.pack)})
    result = train(cfg, pack, args.out_dir)
    _finish_run(result)
    return EXIT_OK


def cmd_resume(args):
    state = load_checkpoint(args.checkpoint)
    pack = open_pack(args.pack)
    os.makedirs(args.out_dir, exist_ok=True)
    _write_manifest(
        args.out_dir,
        "resume",
        state.config,
        {"pack": str(args.pack), "checkpoint": str(args.checkpoint)},
    )
    result = train(state.config, pack, args.out_dir, state=state)
    _finish_run(result)
    return EXIT_OK


def _blank_target(side, codepoint):
    pixels = np.full(side * side, 255, dtype=np.uint8)
    return normalize(GlyphBitmap(side, side, pixels, codepoint))


def cmd_sample(args):
    state = load_checkpoint(args.checkpoint)
    side = state.config.side
    wanted = _parse_codepoints(args.codepoints) if args.codepoints else None
    pairs = []
    skipped = []
    if args.pack:
        pack = open_pack(args.pack)
        if pack.side != side:
            raise IncompatibilityError(f"pack side {pack.side} != checkpoint side {side}")
        by_cp = {cp: i for i, cp in enumerate(pack.codepoints)}
        for cp in wanted if wanted is not None else pack.codepoints:
            if cp in by_cp:
                pairs.append(pack.sample(by_cp[cp]))
            else:
                skipped.append((cp, "missing_in_pack"))
    else:
        names = {}
        for name in os.listdir(args.glyph_dir):
            stem, ext = os.path.splitext(name)
            if ext.lower() != ".pgm":
                continue
            try:
                names[int(stem, 16)] = os.path.join(args.glyph_dir, name)
            except ValueError:
                continue
        for cp in wanted if wanted is not None else sorted(names):
            if cp not in names:
                skipped.append((cp, "missing_in_glyph_dir"))
                continue
            try:
                bmp = load_bitmap(names[cp], codepoint=cp)
            except FormatError:
                skipped.append((cp, "malformed_file"))
                continue
            if bmp.width != side or bmp.height != side:
                skipped.append((cp, "size_mismatch"))
                continue
            pairs.append(PairedSample(normalize(bmp), _blank_target(side, cp), cp))
    if skipped:
        skip_path = str(args.out) + ".skipped.tsv"
        with open(skip_path, "w") as fh:
            for cp, reason in skipped:
                fh.write(f"U+{cp:04X}\t{reason}\n")
        print(f"skipped {len(skipped)} codepoints (report: {skip_path})", file=sys.stderr)
    if not pairs:
        print("no codepoints could be sampled", file=sys.stderr)
        return EXIT_DATA
    emit_samples(state, pairs, args.out)
    print(f"wrote {len(pairs)}-row grid: {args.out}")
    return EXIT_OK


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    pack = open_pack(args.pack)
    if pack.side != state.config.side:
        raise IncompatibilityError(
            f"pack side {pack.side} != checkpoint side {state.config.side}"
        )
    view = pack
    if args.holdout_fraction > 0:
        _, view = split(pack, args.holdout_fraction, args.split_seed)
    report = evaluate(state, view)
    os.makedirs(args.out, exist_ok=True)
    tsv = os.path.join(args.out, "eval_report.tsv")
    jsn = os.path.join(args.out, "eval_report.json")
    write_eval_report(report, tsv, jsn)
    from .figures import save_eval_chart

    chart = os.path.join(args.out, "eval_l1.png")
    save_eval_chart(report, chart)
    agg = report.aggregate()
    print(
        f"evaluated {report.count} glyphs: "
        f"l1 mean {agg['l1']['mean']:.6f} median {agg['l1']['median']:.6f} "
        f"worst {agg['l1']['worst']:.6f}"
    )
    print(f"reports: {tsv} {jsn} {chart}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="glyphforge", description=__doc__)
    p.add_argument("--version", action="version", version=f"glyphforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="scan paired glyph trees and write a pack")
    sp.add_argument("source_dir")
    sp.add_argument("target_dir")
    sp.add_argument("--side", type=int, default=256, help="required square side length")
    sp.add_argument("--out", required=True, help="pack file to write")
    sp.add_argument("--report", default=None, help="rejection report path")
    sp.add_argument("--min-ink", type=float, default=0.005, help="minimum ink fraction")
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train from scratch")
    sp.add_argument("--pack", required=True)
    sp.add_argument("--config", required=True, help="JSON file mirroring TrainConfig")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--side", type=int, default=None)
    sp.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("resume", help="continue training from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pack", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_resume)

    sp = sub.add_parser("sample", help="render [source|generated|target] grids")
    sp.add_argument("--checkpoint", required=True)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--pack")
    group.add_argument("--glyph-dir")
    sp.add_argument("--out", required=True, help="grid PGM to write")
    sp.add_argument("--codepoints", default=None, help="hex codepoints, comma separated")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a pack")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--pack", required=True)
    sp.add_argument("--out", required=True, help="report directory")
    sp.add_argument("--holdout-fraction", type=float, default=0.0)
    sp.add_argument("--split-seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if ndgrad.deterministic_from_env():
        ndgrad.set_deterministic(True)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except ndgrad.ParameterError as err:
        print(f"parameter error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ChecksumError, ValidationError, IncompatibilityError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DATA
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
