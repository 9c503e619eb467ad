"""``vc-intervene``: annotation statistics, simulation, training and export.

Exit codes: 0 ok, 2 input error, 3 training divergence, 4 verification failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from . import discrete_intervention as di
from .annot_ingest import load_annotations, presence_sets
from .confounder_dict import CONTEXT_WARNING, build_fixed, build_random, load_dictionary, save_dictionary
from .errors import DivergedLoss, VCError
from .feature_store import concat_features, read_fmat, synth_region_features, write_fmat
from .ncc_filter import filter_samples, load_ncc, make_filter, ncc_accuracy, ncc_score, save_ncc, train_ncc
from .scm_sim import load_world, oracle_tables, sample_scenes
from .vc_head import (
    FEATURE_MODES,
    HeadParams,
    PairDataset,
    TrainConfig,
    apply_overrides,
    extract_features,
    gradient_check,
    load_checkpoint,
    parse_config_text,
    save_checkpoint,
    train,
    write_loss_csv,
)

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4
GRADCHECK_TOL = 1e-5


class _Run:
    """Collects the manifest for one command invocation."""

    def __init__(self, command, args):
        self.started = time.time()
        self.doc = {"command": command, "version": __version__,
                    "config": {k: v for k, v in vars(args).items() if k != "func"},
                    "seeds": {}, "inputs": {}, "artifacts": []}

    def input(self, path):
        h = hashlib.sha256()
        if os.path.isdir(path):
            for name in sorted(os.listdir(path)):
                with open(os.path.join(path, name), "rb") as fh:
                    h.update(name.encode() + fh.read())
        else:
            with open(path, "rb") as fh:
                h.update(fh.read())
        self.doc["inputs"][str(path)] = h.hexdigest()

    def artifact(self, path):
        self.doc["artifacts"].append(str(path))

    def write(self, path):
        """Write the manifest to ``path``; without one, as a JSON line on stderr."""
        self.doc["wall_time_s"] = round(time.time() - self.started, 3)
        if path is None:
            print(json.dumps(self.doc, sort_keys=True, default=str), file=sys.stderr)
            return
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _write_text(path, text, run):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    run.artifact(path)


def _manifest_path(args, default):
    return args.manifest if getattr(args, "manifest", None) else default


# -- stats --------------------------------------------------------------------

def cmd_stats(args):
    run = _Run("stats", args)
    run.input(args.annotations)
    ds = load_annotations(args.annotations, args.format)
    names = list(ds.categories.names)
    sets = presence_sets(ds, args.min_distinct)
    workers = 1 if args.deterministic else di.default_workers()
    counts = di.count_triples(sets, ds.n_categories, workers=max(1, workers))
    cond = di.conditional(counts)
    intv = di.intervention(counts, alpha=args.alpha)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "cond.csv"), di.table_csv(cond, names), run)
    _write_text(os.path.join(args.out, "do.csv"), di.table_csv(intv, names), run)
    rows = di.delta_report(cond, intv, args.top_k)
    _write_text(os.path.join(args.out, "delta.csv"), di.delta_csv(rows, names), run)
    gaps = {}
    for x_name in args.prior_gap or []:
        if x_name not in names:
            raise VCError(f"unknown category {x_name!r} for --prior-gap")
        gaps[x_name] = di.prior_gap_report(counts, names.index(x_name))
        _write_text(os.path.join(args.out, f"prior_gap_{x_name}.csv"), di.prior_gap_csv(gaps[x_name], names), run)
    if args.plot:
        from . import plots
        path = os.path.join(args.out, "delta.png")
        plots.delta_chart(rows, names, path)
        run.artifact(path)
        for x_name, g in gaps.items():
            path = os.path.join(args.out, f"prior_gap_{x_name}.png")
            plots.prior_gap_chart(g, names, x_name, path)
            run.artifact(path)
    run.doc["summary"] = {"images_used": len(sets), "events": counts.total,
                          "tp_residual": di.total_probability_residual(counts)}
    run.write(_manifest_path(args, os.path.join(args.out, "manifest.json")))
    print(f"{len(sets)} images, {counts.total} events -> {args.out}")
    return EXIT_OK


# -- simulate -----------------------------------------------------------------

def _matrix_text(table, names):
    width = max(len(n) for n in names)
    lines = [" " * width + " " + " ".join(f"{n[:7]:>7}" for n in names)]
    for name, row in zip(names, table):
        lines.append(f"{name:>{width}} " + " ".join("    nan" if np.isnan(v) else f"{v:7.4f}" for v in row))
    return "\n".join(lines)


def cmd_simulate(args):
    run = _Run("simulate", args)
    world = load_world(args.world)
    run.input(args.world)
    run.doc["seeds"]["scenes"] = args.seed
    scenes = sample_scenes(world, args.scenes, args.seed)
    if args.emit_tsv:
        _write_text(args.emit_tsv, scenes.to_tsv(world.names), run)
    if args.emit_features:
        fs = synth_region_features(world, scenes, d=args.d, noise=args.noise, seed=args.seed)
        write_fmat(fs, args.emit_features)
        run.artifact(args.emit_features)
    cond, do = oracle_tables(world)
    print("exact P(y present | x present):")
    print(_matrix_text(cond, world.names))
    print("exact P(y present | do(x present)):")
    print(_matrix_text(do, world.names))
    if args.plot:
        from . import plots
        plots.oracle_chart(cond, do, world.names, args.plot)
        run.artifact(args.plot)
    default = None
    for p in (args.emit_tsv, args.emit_features):
        if p:
            default = p + ".manifest.json"
            break
    run.write(_manifest_path(args, default))
    return EXIT_OK


# -- dictionary / training ----------------------------------------------------

def cmd_build_dict(args):
    run = _Run("build-dict", args)
    run.input(args.features)
    feats = read_fmat(args.features)
    if args.variant == "random":
        n = args.n_categories or int(feats.categories.max()) + 1
        dct = build_random(n, feats.dim, args.seed)
        run.doc["seeds"]["dictionary"] = args.seed
    else:
        variant = "expectation_only" if args.variant == "expectation" else "fixed"
        dct = build_fixed(feats, args.n_categories, variant)
    save_dictionary(dct, args.out)
    run.artifact(args.out)
    run.artifact(args.out + ".json")
    run.write(_manifest_path(args, args.out + ".manifest.json"))
    print(f"dictionary {dct.n_entries}x{dct.dim} ({dct.variant}) -> {args.out}")
    return EXIT_OK


def _load_config(items):
    cfg = TrainConfig()
    for item in items or []:
        if os.path.isfile(item):
            with open(item, "r", encoding="utf-8") as fh:
                cfg = parse_config_text(fh.read(), cfg)
        elif "=" in item:
            key, value = item.split("=", 1)
            cfg = apply_overrides(cfg, {key.strip(): value.strip()})
        else:
            raise VCError(f"--config {item!r} is neither a file nor key=value")
    return cfg


def cmd_train(args):
    run = _Run("train", args)
    run.input(args.features)
    run.input(args.dictionary)
    try:
        cfg = _load_config(args.config)
    except ValueError as exc:
        raise VCError(str(exc)) from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    run.doc["seeds"]["run"] = cfg.seed
    feats = read_fmat(args.features)
    dct = load_dictionary(args.dictionary)
    if args.variant == "random":
        dct = build_random(dct.n_entries, dct.dim, cfg.seed)
    elif args.variant == "expectation":
        dct = dct.as_variant("expectation_only")
    elif args.variant == "context":
        print(f"warning: {CONTEXT_WARNING}", file=sys.stderr)
        dct = dct.as_variant("context")
    else:
        dct = dct.as_variant("fixed")
    sample_filter = None
    if args.ncc != "off":
        if not args.ncc_model:
            raise VCError("--ncc TAU needs --ncc-model")
        run.input(args.ncc_model)
        sample_filter = make_filter(load_ncc(args.ncc_model), float(args.ncc))
    dataset = PairDataset(feats, cfg.max_contexts, seed=cfg.seed)
    n_categories = max(int(feats.categories.max()) + 1, dct.n_entries)
    params = HeadParams.init(n_categories, feats.dim, cfg.sigma, cfg.seed)
    try:
        result = train(dataset, dct, cfg, params=params, sample_filter=sample_filter,
                       allow_context=args.variant == "context")
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "checkpoint")
    save_checkpoint(result.params, ckpt, {"config": cfg.to_dict(), "step": result.total_steps,
                                          "seed": cfg.seed, "variant": dct.variant})
    run.artifact(ckpt)
    loss_path = os.path.join(args.out, "loss.csv")
    write_loss_csv(result.curve, loss_path)
    run.artifact(loss_path)
    if args.plot:
        from . import plots
        path = os.path.join(args.out, "loss.png")
        plots.loss_chart(result.curve, path)
        run.artifact(path)
    run.doc["summary"] = {"steps": result.total_steps, "pairs_seen": result.n_pairs_seen,
                          "initial_loss": result.curve[0][1] if result.curve else None,
                          "final_loss": result.curve[-1][1] if result.curve else None}
    run.write(_manifest_path(args, os.path.join(args.out, "manifest.json")))
    if result.curve:
        print(f"loss {result.curve[0][1]:.4f} -> {result.curve[-1][1]:.4f} over {result.total_steps} steps")
    return EXIT_OK


def cmd_extract(args):
    run = _Run("extract", args)
    run.input(args.features)
    params, _ = load_checkpoint(args.checkpoint)
    out = extract_features(read_fmat(args.features), params, args.mode)
    write_fmat(out, args.out)
    run.artifact(args.out)
    run.write(_manifest_path(args, args.out + ".manifest.json"))
    print(f"{len(out)} x {out.dim} features -> {args.out}")
    return EXIT_OK


def cmd_concat(args):
    run = _Run("concat", args)
    run.input(args.base)
    run.input(args.vc)
    out = concat_features(read_fmat(args.base), read_fmat(args.vc))
    write_fmat(out, args.out)
    run.artifact(args.out)
    run.write(_manifest_path(args, args.out + ".manifest.json"))
    print(f"{len(out)} x {out.dim} features -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    run = _Run("gradcheck", args)
    worst = 0.0
    for seed in range(args.seed, args.seed + args.seeds):
        errors = gradient_check(args.n, args.d, args.sigma, args.k, args.centers, seed)
        line = " ".join(f"{k}={v:.3e}" for k, v in errors.items())
        print(f"seed {seed}: {line}")
        worst = max(worst, *errors.values())
    ok = worst < GRADCHECK_TOL
    print(f"max relative error {worst:.3e} ({'pass' if ok else 'FAIL'} at {GRADCHECK_TOL:g})")
    run.doc["summary"] = {"max_relative_error": worst, "pass": ok}
    run.write(args.manifest)
    return EXIT_OK if ok else EXIT_VERIFY


# -- ncc ----------------------------------------------------------------------

def cmd_ncc_train(args):
    run = _Run("ncc-train", args)
    run.doc["seeds"]["ncc"] = args.seed
    model = train_ncc(n_train=args.n_train, m=args.m, hidden=args.hidden, epochs=args.epochs, seed=args.seed)
    acc = ncc_accuracy(model, m=args.m)
    model.meta["heldout_accuracy"] = acc
    save_ncc(model, args.out)
    run.artifact(args.out)
    run.doc["summary"] = {"heldout_accuracy": acc}
    run.write(_manifest_path(args, os.path.join(args.out, "run.manifest.json")))
    print(f"held-out accuracy {acc:.3f} -> {args.out}")
    return EXIT_OK


def _parse_seq(text):
    try:
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError as exc:
        raise VCError(f"bad number list: {exc}") from exc


def cmd_ncc_score(args):
    run = _Run("ncc-score", args)
    model = load_ncc(args.model)
    u, v = _parse_seq(args.u), _parse_seq(args.v)
    if u.shape != v.shape or u.size < 2:
        raise VCError("--u and --v need the same length >= 2")
    score = ncc_score(model, u, v)
    print(f"{score:.6g}")
    run.doc["summary"] = {"score": score}
    run.write(args.manifest)
    return EXIT_OK


def cmd_ncc_filter(args):
    run = _Run("ncc-filter", args)
    for p in (args.features, args.dictionary, args.checkpoint, args.model):
        run.input(p)
    feats = read_fmat(args.features)
    dct = load_dictionary(args.dictionary)
    params, _ = load_checkpoint(args.checkpoint)
    model = load_ncc(args.model)
    batch = PairDataset(feats).all_pairs()
    kept = filter_samples(batch, dct, model, args.tau, params, args.top_r)
    lines = ["kept_pairs,total_pairs,kept_centers,total_centers",
             f"{kept.n_pairs},{batch.n_pairs},{kept.n_centers},{batch.n_centers}"]
    _write_text(args.out, "\n".join(lines) + "\n", run)
    run.write(_manifest_path(args, args.out + ".manifest.json"))
    print(f"kept {kept.n_pairs}/{batch.n_pairs} pairs at tau={args.tau:g}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vc-intervene", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--manifest", help="manifest path (default: next to the outputs)")
        sp.add_argument("--deterministic", action="store_true", help="force single-worker paths")
        return sp

    sp = add("stats", cmd_stats, "conditional vs interventional context tables from annotations")
    sp.add_argument("annotations")
    sp.add_argument("--format", choices=("coco", "tsv"), default="coco")
    sp.add_argument("--min-distinct", type=int, default=3)
    sp.add_argument("--alpha", type=float, default=0.0, help="Laplace pseudo-count (default 0)")
    sp.add_argument("--top-k", type=int, default=20)
    sp.add_argument("--prior-gap", action="append", metavar="NAME", help="write prior_gap_NAME.csv")
    sp.add_argument("--plot", action="store_true", help="render PNG figures next to the CSVs")
    sp.add_argument("--out", required=True)

    sp = add("simulate", cmd_simulate, "sample scenes from a world file and print its exact tables")
    sp.add_argument("world")
    sp.add_argument("--scenes", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--emit-tsv")
    sp.add_argument("--emit-features")
    sp.add_argument("--d", type=int, default=16)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--plot", metavar="PNG", help="heatmaps of the exact tables")

    sp = add("build-dict", cmd_build_dict, "build a confounder dictionary from region features")
    sp.add_argument("features")
    sp.add_argument("--variant", choices=("fixed", "random", "expectation"), default="fixed")
    sp.add_argument("--n-categories", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the context-prediction head")
    sp.add_argument("features")
    sp.add_argument("dictionary")
    sp.add_argument("--config", action="append", metavar="FILE|KEY=VALUE")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--variant", choices=("fixed", "random", "context", "expectation"), default="fixed")
    sp.add_argument("--ncc", default="off", metavar="TAU|off")
    sp.add_argument("--ncc-model")
    sp.add_argument("--plot", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "export per-region features from a trained head")
    sp.add_argument("checkpoint")
    sp.add_argument("features")
    sp.add_argument("--mode", choices=FEATURE_MODES, default="direct")
    sp.add_argument("--out", required=True)

    sp = add("concat", cmd_concat, "append feature columns matched on (image_id, region_id)")
    sp.add_argument("base")
    sp.add_argument("vc")
    sp.add_argument("--out", required=True)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the analytic gradients")
    sp.add_argument("--n", type=int, default=7)
    sp.add_argument("--d", type=int, default=11)
    sp.add_argument("--sigma", type=int, default=5)
    sp.add_argument("--k", type=int, default=2)
    sp.add_argument("--centers", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")

    sp = add("ncc-train", cmd_ncc_train, "train the causation-coefficient scorer on synthetic pairs")
    sp.add_argument("--n-train", type=int, default=3000)
    sp.add_argument("--m", type=int, default=48)
    sp.add_argument("--hidden", type=int, default=32)
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("ncc-score", cmd_ncc_score, "score u -> v for two comma-separated sequences")
    sp.add_argument("model")
    sp.add_argument("--u", required=True)
    sp.add_argument("--v", required=True)

    sp = add("ncc-filter", cmd_ncc_filter, "count the context pairs surviving the collider filter")
    sp.add_argument("model")
    sp.add_argument("features")
    sp.add_argument("dictionary")
    sp.add_argument("checkpoint")
    sp.add_argument("--tau", type=float, default=0.8)
    sp.add_argument("--top-r", type=int, default=3)
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergedLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (VCError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
