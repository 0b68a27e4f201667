"""Command-line interface: ``spacycd generate | train | eval | export``.

Exit status: 0 success, 1 malformed arguments, 2 I/O failure, 3 validation
failure, 4 training divergence.

A run directory written by ``train`` contains::

    config.json        training config (``"kind": "train"``)
    manifest.json      config echo, dataset fingerprint, inventory, seed, version
    grid.spcy          (L, 2) grid coordinates; metric and radius in the manifest
    train_log.csv      one row per step: step, ELBO terms, h, c, lambda_al
    checkpoint/        final state, see ``spacycd.io.save_checkpoint``
    best/              parameters with the best validation ELBO (if any)
"""

from __future__ import annotations

import argparse
import csv
import io as _stdio
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3, 4

logger = logging.getLogger("spacycd")


class _Exit(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _Exit(EXIT_ARGS, f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spacycd", description="Spatiotemporal causal discovery.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("generate", help="draw a synthetic dataset")
    g.add_argument("--config", required=True, help="generator config JSON")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--seed", type=int, help="override the config seed")

    t = sub.add_parser("train", help="fit the model to a dataset")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="training config JSON (defaults if omitted)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, deterministic)")

    e = sub.add_parser("eval", help="score a run against ground truth")
    e.add_argument("--run", required=True)
    e.add_argument("--truth", required=True, help="dataset directory with graph and latents")
    e.add_argument("--report", required=True, help="output JSON report")
    e.add_argument("--threshold", type=float, help="edge threshold (default: config value)")

    x = sub.add_parser("export", help="write learned artifacts")
    x.add_argument("--run", required=True)
    x.add_argument("--what", required=True, choices=("factors", "graph", "latents"))
    x.add_argument("--format", default="json", choices=("spcy", "csv", "json"))
    x.add_argument("--out", help="output file (stdout for csv/json when omitted)")
    x.add_argument("--data", help="dataset directory, required for latents")
    x.add_argument("--threshold", type=float)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _Exit as exc:
        print(exc, file=sys.stderr)
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "export": cmd_export}[args.command]
    try:
        handler(args)
    except _Exit as exc:
        print(f"spacycd {args.command}: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


# -------------------------------------------------------------- helpers


def _load_config(path, kind):
    try:
        return sio.load_config(path, kind)
    except FileNotFoundError as exc:
        raise _Exit(EXIT_IO, f"cannot read config: {exc}") from None
    except (sio.ConfigError, ValueError) as exc:
        raise _Exit(EXIT_VALIDATION, f"invalid config: {exc}") from None


def _load_dataset(path) -> dict:
    try:
        return sio.load_dataset(path)
    except (OSError, sio.FormatError) as exc:
        raise _Exit(EXIT_IO, f"cannot read dataset: {exc}") from None


def _grid_from(meta: dict, coords):
    from .spatial import GridSpec

    return GridSpec(tuple(meta["dims"]), coords, meta.get("metric", "euclidean"), meta.get("radius", 1.0))


def _load_run(path, best: bool = False):
    from .trainer import SpacyModel, TrainConfig

    root = Path(path)
    try:
        doc = sio.read_json(root / "config.json")
        doc.pop("kind", None)
        cfg = sio.build_config(TrainConfig, doc)
        manifest = sio.read_json(root / "manifest.json")
        grid = _grid_from(manifest["grid"], sio.read_tensor(root / "grid.spcy"))
        state = sio.load_checkpoint(root / "checkpoint")
        if best and (root / "best").is_dir():
            state.params = sio.load_checkpoint(root / "best").params
    except (OSError, KeyError, sio.FormatError) as exc:
        raise _Exit(EXIT_IO, f"cannot read run {root}: {exc}") from None
    except sio.ConfigError as exc:
        raise _Exit(EXIT_VALIDATION, f"invalid run config: {exc}") from None
    model = SpacyModel(cfg, grid)
    if state.residual_scale is not None:
        model.residual_scale = state.residual_scale
    return cfg, model, state


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write {out}: {exc}") from None


# ------------------------------------------------------------- commands


def cmd_generate(args) -> None:
    from .synthgen import GenerationError, generate_dataset

    cfg = _load_config(args.config, "generate")
    if not hasattr(cfg, "n_samples"):
        raise _Exit(EXIT_VALIDATION, "generate needs a generator config")
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        generate_dataset(cfg, args.out)
    except GenerationError as exc:
        raise _Exit(EXIT_VALIDATION, str(exc)) from None
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write dataset: {exc}") from None


def cmd_train(args) -> None:
    from .spatial import GridSpec
    from .trainer import LOG_FIELDS, TrainConfig, TrainingDivergence, train

    cfg = _load_config(args.config, "train") if args.config else TrainConfig()
    if not isinstance(cfg, TrainConfig):
        raise _Exit(EXIT_VALIDATION, "train needs a training config")
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.threads = args.threads
    data = _load_dataset(args.data)
    X = data["observations"]
    gen = data.get("config", {})
    if "grid" in gen:
        grid = GridSpec.regular(*gen["grid"])
    else:
        side = int(round(np.sqrt(X.shape[2])))
        grid = GridSpec.regular(side)
    if grid.n_points != X.shape[2]:
        raise _Exit(EXIT_VALIDATION, f"grid has {grid.n_points} points but observations have {X.shape[2]}")
    if X.shape[1] != len(cfg.nodes_per_variate):
        raise _Exit(EXIT_VALIDATION, f"data has {X.shape[1]} variates but n_nodes lists {len(cfg.nodes_per_variate)}")

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.csv", "w", newline="", encoding="utf-8")
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot create run directory: {exc}") from None
    with log_fh:
        writer = csv.DictWriter(log_fh, fieldnames=LOG_FIELDS, extrasaction="ignore")
        writer.writeheader()
        try:
            _, state = train(X, cfg, grid, callback=lambda s, row: writer.writerow({k: _fmt(v) for k, v in row.items()}))
        except TrainingDivergence as exc:
            raise _Exit(EXIT_DIVERGENCE, f"training diverged: {exc}") from None
        except ValueError as exc:
            raise _Exit(EXIT_VALIDATION, str(exc)) from None
    try:
        sio.write_json(out / "config.json", {"kind": "train", **cfg.to_dict()})
        sio.write_tensor(out / "grid.spcy", grid.coords)
        inventory = ["config.json", "grid.spcy", "train_log.csv"]
        inventory += [f"checkpoint/{f}" for f in sio.save_checkpoint(state, out / "checkpoint")]
        if state.best_params is not None:
            inventory += [f"best/{f}" for f in sio.save_checkpoint(state, out / "best", params=state.best_params)]
        manifest = sio.make_manifest(cfg.to_dict(), inventory, cfg.seed, fingerprint_of=X,
                                     extra={"kind": "run", "grid": grid.to_dict(), "steps": state.step})
        sio.write_json(out / "manifest.json", manifest)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write run: {exc}") from None


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def cmd_eval(args) -> None:
    from .evalmetrics import evaluate
    from .trainer import extract_graph, infer_latents

    cfg, model, state = _load_run(args.run)
    truth = _load_dataset(args.truth)
    if "graph" not in truth:
        raise _Exit(EXIT_IO, f"{args.truth} holds no ground-truth graph")
    G_true = truth["graph"]
    if G_true.shape[1] != model.D:
        raise _Exit(EXIT_VALIDATION, f"node count mismatch: run has D={model.D}, truth has D={G_true.shape[1]}")
    if G_true.shape[0] != model.lag + 1:
        raise _Exit(EXIT_VALIDATION, f"lag mismatch: run has {model.lag}, truth has {G_true.shape[0] - 1}")
    X = truth["observations"]
    if X.shape[2] != model.grid.n_points or X.shape[1] != model.n_variates:
        raise _Exit(EXIT_VALIDATION, "observation shape does not match the run")
    threshold = cfg.threshold if args.threshold is None else args.threshold
    try:
        G = extract_graph(state.params["graph.logits"], threshold, model.mask)
    except ValueError as exc:
        raise _Exit(EXIT_VALIDATION, str(exc)) from None
    Z = infer_latents(model, state.params, X) if "latents" in truth else None
    report = evaluate(G_true, G, truth.get("latents"), Z)
    doc = report.to_dict()
    doc["threshold"] = threshold
    try:
        sio.write_json(args.report, doc)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write report: {exc}") from None


def cmd_export(args) -> None:
    from .trainer import extract_graph, infer_latents

    cfg, model, state = _load_run(args.run)
    if args.format == "spcy" and args.out is None:
        raise _Exit(EXIT_ARGS, "--out is required for spcy output")
    if args.what == "graph":
        threshold = cfg.threshold if args.threshold is None else args.threshold
        try:
            G = extract_graph(state.params["graph.logits"], threshold, model.mask)
        except ValueError as exc:
            raise _Exit(EXIT_VALIDATION, str(exc)) from None
        probs = 1.0 / (1.0 + np.exp(-state.params["graph.logits"].astype(np.float64))) * model.mask
        edges = [(int(k), int(i), int(j), float(probs[k, i, j])) for k, i, j in zip(*np.nonzero(G))]
        if args.format == "spcy":
            _write_tensor(args.out, G)
        elif args.format == "csv":
            buf = _stdio.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["lag", "src", "dst", "prob"])
            w.writerows([k, i, j, f"{p:.6f}"] for k, i, j, p in edges)
            _emit(buf.getvalue(), args.out)
        else:
            doc = {"threshold": threshold, "edges": [{"lag": k, "src": i, "dst": j, "prob": p} for k, i, j, p in edges]}
            _emit(json.dumps(doc, indent=2) + "\n", args.out)
    elif args.what == "factors":
        from . import variational as vi
        from .autodiff import const
        from .spatial import center_from_raw

        p = {k: const(v.astype(np.float64)) for k, v in state.params.items()}
        F = vi.mean_factors(p, model.grid, cfg.kernel).data
        centers = center_from_raw(model.grid, p["factor.mu_rho"]).data
        if args.format == "spcy":
            _write_tensor(args.out, F)
        elif args.format == "csv":
            buf = _stdio.StringIO()
            np.savetxt(buf, F, delimiter=",", header=",".join(f"node{d}" for d in range(F.shape[1])), comments="")
            _emit(buf.getvalue(), args.out)
        else:
            nodes = [
                {"node": d, "variate": int(model.node_variate[d]), "center": centers[d].tolist(),
                 "log_scale": float(state.params["factor.mu_gamma"][d])}
                for d in range(model.D)
            ]
            doc = {"kernel": cfg.kernel, "grid": model.grid.to_dict(), "nodes": nodes, "matrix": F.tolist()}
            _emit(json.dumps(doc) + "\n", args.out)
    else:
        if args.data is None:
            raise _Exit(EXIT_ARGS, "--data is required to export latents")
        X = _load_dataset(args.data)["observations"]
        if X.shape[2] != model.grid.n_points or X.shape[1] != model.n_variates:
            raise _Exit(EXIT_VALIDATION, "observation shape does not match the run")
        Z = infer_latents(model, state.params, X)
        if args.format == "spcy":
            _write_tensor(args.out, Z)
        elif args.format == "csv":
            buf = _stdio.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["sample", "node", "t", "value"])
            for n, d, t in np.ndindex(Z.shape):
                w.writerow([n, d, t, repr(float(Z[n, d, t]))])
            _emit(buf.getvalue(), args.out)
        else:
            _emit(json.dumps({"shape": list(Z.shape), "latents": Z.tolist()}) + "\n", args.out)


def _write_tensor(path, arr) -> None:
    try:
        sio.write_tensor(path, arr)
    except OSError as exc:
        raise _Exit(EXIT_IO, f"cannot write {path}: {exc}") from None


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
