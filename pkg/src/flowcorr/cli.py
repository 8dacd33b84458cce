"""``flowcorr`` command line: sample, embed, train, match, eval, bench.

Every failure prints one line ``error[CODE]: message`` to stderr and exits
nonzero.  Outputs are written to a temporary file and renamed into place,
so a failing command never leaves a partial file behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from ._io import fmt_float
from .embedding import EmbeddingMatrix, load_embedding, save_embedding
from .errors import ContractError, FlowCorrError, ParameterError, ValidationError
from .flow import TrainConfig, load_model, save_model, train_flow
from .geodesics import build_graph
from .geometry import SdfGrid, load_shape, sample_surface, save_point_cloud
from .harness import ExperimentSpec, embed, run_experiment
from .matching import METHODS, load_correspondence, match, save_correspondence
from .metrics import EvalReport, evaluate_pair

log = logging.getLogger("flowcorr")

EXIT_ERROR = 2


def _require_out(args):
    if not getattr(args, "out", None):
        raise ParameterError(f"{args.command}: --out is required")
    return args.out


def _shape(path, landmarks):
    if landmarks is not None and not os.path.exists(landmarks):
        raise FileNotFoundError(2, "landmark file not found", landmarks)
    return load_shape(path, landmarks)


def _graph(args, path, landmarks):
    shape = _shape(path, landmarks)
    return build_graph(shape, k=args.k, n_samples=args.samples, seed=args.seed)


def cmd_sample(args):
    shape = load_shape(args.shape)
    samples = sample_surface(shape, args.n, args.seed)
    save_point_cloud(samples.positions, _require_out(args))
    print(f"wrote {samples.n} samples to {args.out}")
    return 0


def cmd_embed(args):
    out = _require_out(args)
    if args.kind == "geodesic" and args.landmarks is None:
        raise ParameterError("geodesic embeddings need --landmarks")
    graph = _graph(args, args.shape, args.landmarks)
    E = embed(graph, args.kind)
    save_embedding(E, out)
    print(f"wrote {E.n}x{E.d} {E.kind} embedding to {out}")
    return 0


def _load_config(path):
    if path is None:
        return TrainConfig()
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ParameterError(f"config {path} must hold a JSON object")
    return TrainConfig.from_dict(data)


def cmd_train(args):
    out = _require_out(args)
    cfg = _load_config(args.config)
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    E = load_embedding(args.embedding)
    if not E.standardized:
        from .embedding import standardize
        E = standardize(E)
    model = train_flow(E, cfg)
    save_model(model, out)
    print(f"final_loss {fmt_float(model.final_loss)}")
    return 0


def _in_model_space(E: EmbeddingMatrix, model, role):
    """Express an embedding file in the standardized space of ``model``."""
    if E.d != model.d:
        raise ContractError(f"{role} embedding has d={E.d} but its flow has d={model.d}")
    raw = E.raw()
    return replace(E, values=model.norm.apply(raw), norm=model.norm)


def cmd_match(args):
    out = _require_out(args)
    if args.method not in METHODS:
        raise ParameterError(f"unknown method {args.method!r}; valid methods: {', '.join(METHODS)}")
    E1, E2 = load_embedding(args.source), load_embedding(args.target)
    if E1.d != E2.d:
        raise ContractError(f"embedding dimensions differ: source d={E1.d}, target d={E2.d}")
    steps = args.steps if args.steps is not None else 64
    if args.method in ("fuse", "knn-in-gauss"):
        if not (args.src_model and args.tgt_model):
            raise ParameterError(f"method {args.method} needs --src-model and --tgt-model")
        src, tgt = load_model(args.src_model), load_model(args.tgt_model)
        corr = match(args.method, _in_model_space(E1, src, "source"), _in_model_space(E2, tgt, "target"),
                     src, tgt, steps)
    else:
        kw = {}
        if args.method == "sinkhorn":
            kw = {"epsilon": args.epsilon, "max_iters": args.max_iters}
        corr = match(args.method, E1.raw(), E2.raw(), **kw)
    save_correspondence(corr, out, source=args.source, target=args.target)
    print(f"wrote {corr.n} correspondences ({corr.method}) to {out}")
    return 0


def cmd_eval(args):
    out = _require_out(args)
    corr = load_correspondence(args.corr)
    g1 = _graph(args, args.source, args.source_landmarks)
    g2 = _graph(args, args.target, args.target_landmarks)
    if args.gt == "identity":
        gt = np.arange(g1.n)
    else:
        gt = load_correspondence(args.gt)
    if len(corr) != len(gt):
        raise ValidationError(f"correspondence has {len(corr)} rows but ground truth has {len(gt)}")
    E1 = E2 = None
    if args.source_embedding and args.target_embedding:
        E1 = load_embedding(args.source_embedding).raw()
        E2 = load_embedding(args.target_embedding).raw()
    report = evaluate_pair(corr, gt, g1, g2, E1=E1, E2=E2,
                           metadata={"corr": args.corr, "gt": args.gt})
    report.save(out)
    for name in EvalReport.SUMMARY_FIELDS:
        value = getattr(report, name)
        if value is not None:
            print(f"{name} {fmt_float(value)}")
    return 0


def _summary_table(rows):
    groups = {}
    for row in rows:
        key = (row["family"], f"{row['repr_a']}-{row['repr_b']}", row["method"])
        groups.setdefault(key, []).append(row)
    cols = ("geodesic_error", "dirichlet_energy", "coverage", "js_after")
    lines = [f"{'family':<18}{'repr':<12}{'method':<14}{'ok':>4}" + "".join(f"{c:>18}" for c in cols)]
    for (family, rep, method), grp in sorted(groups.items()):
        ok = [r for r in grp if r["status"] == "ok"]
        cells = []
        for c in cols:
            vals = [r[c] for r in ok if r.get(c) is not None]
            cells.append(f"{np.mean(vals):>18.6f}" if vals else f"{'-':>18}")
        lines.append(f"{family:<18}{rep:<12}{method:<14}{len(ok):>4}" + "".join(cells))
    return "\n".join(lines)


def cmd_bench(args):
    if not os.path.exists(args.spec):
        raise FileNotFoundError(2, "experiment spec not found", args.spec)
    spec = ExperimentSpec.load(args.spec)
    if args.out:
        spec.output_dir = args.out
    if args.seed is not None:
        spec.master_seed = args.seed
    if args.steps is not None:
        spec.train = replace(spec.train, steps=args.steps)
    rows = run_experiment(spec)
    print(_summary_table(rows))
    print(f"wrote {os.path.join(spec.output_dir, 'metrics.csv')}")
    failed = sum(r["status"] != "ok" for r in rows)
    if failed:
        print(f"{failed} row(s) failed; see the status column", file=sys.stderr)
    return 0


def _globals(parser, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--seed", type=int, help="random seed", **({"default": None} | kw))
    parser.add_argument("--steps", type=int, help="training steps (train, bench) or RK4 steps (match)",
                        **({"default": None} | kw))
    parser.add_argument("--out", help="output path", **({"default": None} | kw))
    parser.add_argument("-v", "--verbose", action="count", **({"default": 0} | kw))


def build_parser():
    parser = argparse.ArgumentParser(prog="flowcorr", description="Shape correspondence by flow composition.")
    parser.add_argument("--version", action="version", version=f"flowcorr {__version__}")
    _globals(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, suppress=True)
    graph = argparse.ArgumentParser(add_help=False)
    graph.add_argument("--k", type=int, default=8, help="neighbours per point for point-cloud graphs")
    graph.add_argument("--samples", type=int, default=4000, help="zero-set samples for SDF grids")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("sample", parents=[common], help="sample points on a shape surface")
    p.add_argument("shape")
    p.add_argument("-n", type=int, default=4000)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("embed", parents=[common, graph], help="compute a pointwise embedding")
    p.add_argument("shape")
    p.add_argument("--landmarks")
    p.add_argument("--kind", choices=("geodesic", "xyz"), default="geodesic")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", parents=[common], help="train a flow on an embedding")
    p.add_argument("embedding")
    p.add_argument("--config", help="JSON file with training options")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", parents=[common], help="compute a correspondence")
    p.add_argument("source", help="source embedding CSV")
    p.add_argument("target", help="target embedding CSV")
    p.add_argument("--method", default="fuse")
    p.add_argument("--src-model")
    p.add_argument("--tgt-model")
    p.add_argument("--epsilon", type=float, default=1e-2)
    p.add_argument("--max-iters", type=int, default=1000)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", parents=[common, graph], help="score a correspondence")
    p.add_argument("corr")
    p.add_argument("--gt", required=True, help="ground-truth correspondence file or 'identity'")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source-landmarks")
    p.add_argument("--target-landmarks")
    p.add_argument("--source-embedding")
    p.add_argument("--target-embedding")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="run an experiment grid")
    p.add_argument("spec")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    if args.seed is None and args.command != "bench":
        args.seed = 0 if args.command != "train" else None
    try:
        return args.func(args)
    except FlowCorrError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
    except OSError as exc:
        where = f"{exc.filename}: " if exc.filename else ""
        print(f"error[E_IO]: {where}{exc.strerror or exc}", file=sys.stderr)
    except MemoryError:
        print("error[E_MEMORY]: out of memory", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
