"""Command-line entry point: ``check``, ``demo-gen``, ``train`` and ``eval``.

Exit codes: 0 success (for ``check``: the formula is satisfied), 1 for a
violated formula, 2 for usage, input or runtime errors.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK, EXIT_VIOLATED, EXIT_ERROR = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _set_threads(n: int):
    # only effective if numpy has not loaded its BLAS yet
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="run configuration (JSON); defaults to the shipped case study")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
    p.add_argument("--out", help="output file or directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stlctrl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="robustness of an STL formula on a signal CSV")
    p.add_argument("formula", help="file holding the formula text")
    p.add_argument("signal", help="CSV with a header naming the state channels")
    p.add_argument("--t", type=int, default=0, help="evaluation step")
    p.add_argument("--temperature", type=float, default=None, help="smooth min/max temperature")
    p.add_argument("--trace", action="store_true", help="also print the per-step trace")
    p.add_argument("--json", action="store_true", help="print one JSON object instead of text")
    _common(p)

    p = sub.add_parser("demo-gen", help="generate scripted expert demonstrations")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--spec", default=None, choices=("phi", "reach-avoid"))
    _common(p)

    p = sub.add_parser("train", help="offline synthesis")
    p.add_argument("--demos", help="demonstrations (JSON lines); generated if omitted")
    p.add_argument("--gamma", type=float, nargs="+", default=None,
                   help="imitation weight(s); several values run a sweep")
    _common(p)

    p = sub.add_parser("eval", help="benchmark deployment strategies")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--strategies", nargs="+", default=None)
    p.add_argument("--trials", type=int, default=100)
    _common(p)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # surfaced with a stable exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


def _config(args):
    from .config import load_config
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace_section("train", seed=args.seed).replace_section("deploy", seed=args.seed)
    return cfg


def cmd_check(args) -> int:
    import math

    import numpy as np

    from .stl import STLSyntaxError, parse, robustness, robustness_trace

    text = open(args.formula).read()
    with open(args.signal) as fh:
        header = fh.readline().strip().split(",")
    names = [h.strip() for h in header]
    if not names or any(not n.isidentifier() for n in names):
        raise ValueError(f"signal header must name each channel, got {header}")
    data = np.loadtxt(args.signal, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != len(names):
        raise ValueError(f"signal has {data.shape[1]} columns but {len(names)} names")
    registry = {n: (lambda i: (lambda s: s[..., i]))(i) for i, n in enumerate(names)}
    try:
        f = parse(text, registry)
    except STLSyntaxError as exc:
        print(f"syntax error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    temp = math.inf if args.temperature is None else args.temperature
    res = robustness(f, data, args.t, temp)
    rho = float(res.value.value)
    out = {"rho": rho, "satisfied": res.satisfied, "t": args.t}
    if args.trace:
        out["trace"] = robustness_trace(f, data, temp).tolist()
    if args.json:
        text_out = json.dumps(out)
    else:
        text_out = f"rho={rho:.17g} {'SAT' if res.satisfied else 'UNSAT'}"
        if args.trace:
            text_out += "\ntrace=" + ",".join(f"{v:.17g}" for v in out["trace"])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text_out + "\n")
    print(text_out)
    return EXIT_OK if res.satisfied else EXIT_VIOLATED


def cmd_demo_gen(args) -> int:
    from .train import scripted_demos

    cfg = _config(args)
    spec = args.spec or cfg.train.spec
    n = args.count if args.count is not None else cfg.demos.count
    demos = scripted_demos(n, cfg.train.T, spec, cfg.train.seed, cfg.layout,
                           cfg.system.bicycle(), cfg.demos.side)
    out = args.out or "demos.jsonl"
    demos.save(out, cfg.system.dt)
    print(json.dumps({"demos": len(demos), "rejected": demos.rejected, "out": out,
                      "sides": {s: sum(d.side == s for d in demos) for s in ("left", "right")}}))
    return EXIT_OK


def _train_one(cfg, demos, out_dir):
    from dataclasses import replace
    from pathlib import Path

    from .policy import init_params
    from .train import TrainingDiverged, history_csv, synthesize

    import numpy as np

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train
    params = init_params(cfg.policy, np.random.default_rng([tcfg.seed, 2]))
    try:
        res = synthesize(tcfg, demos if tcfg.gamma > 0 else None, cfg.layout, params,
                         system=cfg.system.bicycle(), disturbance=cfg.system.disturbance(),
                         log=lambda m: print(m, file=sys.stderr, flush=True))
    except TrainingDiverged as exc:
        if exc.partial is not None:
            (out / "history.csv").write_text(history_csv(exc.partial.history))
            exc.partial.params.save(out / "policy_partial.json",
                                    extra={"config": cfg.to_dict(), "error": str(exc)})
        raise
    (out / "history.csv").write_text(history_csv(res.history))
    lines = ["k,epochs,n_adv,violation_rate,mean_rho,median_rho"]
    for r in res.report:
        lines.append(",".join(repr(r[k]) if isinstance(r[k], float) else str(r[k])
                              for k in ("k", "epochs", "n_adv", "violation_rate",
                                        "mean_rho", "median_rho")))
    (out / "report.csv").write_text("\n".join(lines) + "\n")
    res.params.save(out / "policy.json", extra={"config": cfg.to_dict()})
    if 0 in res.snapshots and tcfg.K > 0:
        res.snapshots[0].save(out / "policy_k0.json", extra={"config": cfg.to_dict()})
    return res.report[-1]


def cmd_train(args) -> int:
    from .train import DemoSet, scripted_demos

    cfg = _config(args)
    t = cfg.train
    if args.demos:
        demos = DemoSet.load(args.demos, t.spec, cfg.system.bicycle())
    else:
        demos = scripted_demos(cfg.demos.count, t.T, t.spec, t.seed, cfg.layout,
                               cfg.system.bicycle(), cfg.demos.side)
    out = args.out or "run"
    gammas = args.gamma if args.gamma else [t.gamma]
    summary = {}
    for g in gammas:
        c = cfg.replace_section("train", gamma=g)
        target = out if len(gammas) == 1 else os.path.join(out, f"gamma_{g:g}")
        summary[f"{g:g}"] = _train_one(c, demos, target)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .deploy import STRATEGIES, benchmark
    from .policy import PolicyParams

    cfg = _config(args)
    params = PolicyParams.load(args.checkpoint)
    strategies = args.strategies or list(STRATEGIES)
    res = benchmark(params, strategies, args.trials, cfg.deploy, cfg.layout,
                    cfg.system.bicycle(), cfg.system.disturbance())
    paths = res.write(args.out or "eval")
    print(json.dumps({k: v["satisfaction_rate"] for k, v in res.summary().items()}))
    print(json.dumps({k: str(v) for k, v in paths.items()}), file=sys.stderr)
    return EXIT_OK


_COMMANDS = {"check": cmd_check, "demo-gen": cmd_demo_gen, "train": cmd_train, "eval": cmd_eval}


if __name__ == "__main__":
    sys.exit(main())
