"""Command-line interface: aggregate, bench, fuzz and sample-eps."""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import hrgrad
from .baselines import BaselineChoice, run_baseline
from .bench import (
    make_quadratic_family,
    run_convergence,
    run_summary,
    sample_eps_loguniform,
    verify_convex_descent,
    verify_nonconvex_bound,
    write_summary,
)
from .core import GradientSet, HRGradError, InvalidInputError, NumericTolerances
from .fuzz import run_fuzz
from .optimizer import AdamHyper, LRSchedule
from .rotation import MerConfig

EXIT_OK, EXIT_ASSERT, EXIT_INPUT, EXIT_STRICT, EXIT_DIVERGED = 0, 1, 2, 3, 4
METHODS = ("hrgrad",) + tuple(c.value for c in BaselineChoice)


@dataclass
class FamilyConfig:
    m: int = 2
    D: int = 8
    eps: list[float] | None = None
    eps_min: float | None = None
    power: int = 1
    conflict_free: bool = False


@dataclass
class OptimizerConfig:
    gamma: float | None = None  # absolute step; overrides gamma_scale
    gamma_scale: float = 1.0  # step = gamma_scale / L
    schedule: bool = False
    eta0: float = 1e-3
    decay: float = 0.96
    period: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8


@dataclass
class RunConfig:
    methods: list[str] = field(default_factory=lambda: ["hrgrad"])
    steps: int = 100
    mode: str = "direct"
    seed: int = 0
    out_dir: str = "bench_out"
    family: FamilyConfig = field(default_factory=FamilyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mer: MerConfig = field(default_factory=MerConfig)
    tolerances: NumericTolerances = field(default_factory=NumericTolerances)

    _nested = {"family": FamilyConfig, "optimizer": OptimizerConfig, "mer": MerConfig, "tolerances": NumericTolerances}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise InvalidInputError("config must be a JSON object")
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in names:
                raise InvalidInputError(f"unknown config key {key!r}")
            sub = cls._nested.get(key)
            kwargs[key] = _build(sub, value, key) if sub else value
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise InvalidInputError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not self.methods:
            raise InvalidInputError("at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise InvalidInputError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
        if self.mode not in ("direct", "adam"):
            raise InvalidInputError("mode must be 'direct' or 'adam'")
        if not (isinstance(self.steps, int) and self.steps >= 0):
            raise InvalidInputError("steps must be a nonnegative integer")


def _build(cls, value, where):
    if not isinstance(value, dict):
        raise InvalidInputError(f"{where!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - names
    if unknown:
        raise InvalidInputError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**value)
    except TypeError as exc:
        raise InvalidInputError(f"{where}: {exc}") from None


def _read_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidInputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{path}: invalid JSON ({exc})") from None


def _threads() -> int:
    raw = os.environ.get("HRGRAD_THREADS", "")
    try:
        n = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        n = 1
    return max(1, n)


def _json_out(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def cmd_aggregate(args) -> int:
    G = GradientSet.from_dict(_read_json(args.input))
    cfg = RunConfig.from_dict(_read_json(args.config)) if args.config else RunConfig()
    if args.method == "hrgrad":
        res = hrgrad(G, cfg.mer, cfg.tolerances)
        out = res.to_dict()
    else:
        res = run_baseline(args.method, G, cfg.tolerances, seed=args.seed)
        total = float(G.norms.sum())
        un = float(np.linalg.norm(res.update))
        out = {
            "update": res.update.tolist(),
            "s_c": un / total if total > 0 else 0.0,
            "angles": [0.0] * G.m,
            "conflicts": [],
            "degenerate": bool(res.degenerate),
        }
    out["method"] = args.method
    _json_out(out)
    if args.strict and out["degenerate"]:
        print(f"degenerate aggregation ({args.method}) in strict mode", file=sys.stderr)
        return EXIT_STRICT
    return EXIT_OK


def resolve_bench_config(args) -> RunConfig:
    cfg = RunConfig.from_dict(_read_json(args.config)) if args.config else RunConfig()
    if args.method:
        cfg.methods = [args.method]
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.steps is not None:
        cfg.steps = args.steps
    cfg.validate()
    return cfg


def _bench_one(cfg: RunConfig, method: str):
    fc, oc = cfg.family, cfg.optimizer
    family = make_quadratic_family(fc.m, fc.D, fc.eps, cfg.seed, fc.power, fc.conflict_free, fc.eps_min)
    gamma = oc.gamma if oc.gamma is not None else oc.gamma_scale / family.L_global
    hyper = AdamHyper(lr=gamma, beta1=oc.beta1, beta2=oc.beta2, eps=oc.eps_adam)
    schedule = LRSchedule(oc.eta0, oc.decay, oc.period) if oc.schedule else None
    traj = run_convergence(
        family, method, cfg.steps, gamma, cfg.mode, cfg.seed, cfg.mer, cfg.tolerances, hyper, schedule
    )
    reports = []
    if cfg.mode == "direct":
        reports = [verify_convex_descent(traj, family), verify_nonconvex_bound(traj, family)]
    return traj, reports


def cmd_bench(args) -> int:
    cfg = resolve_bench_config(args)
    if args.print_config:
        _json_out(cfg.to_dict())
        return EXIT_OK
    if cfg.mode == "adam" and any(m != "hrgrad" for m in cfg.methods):
        raise InvalidInputError("adam mode is only available for hrgrad")
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidInputError(f"cannot create {out}: {exc.strerror}") from None
    with ThreadPoolExecutor(max_workers=min(_threads(), len(cfg.methods))) as pool:
        results = list(pool.map(lambda m: _bench_one(cfg, m), cfg.methods))

    code = EXIT_OK
    overall = {"config": cfg.to_dict(), "runs": {}}
    for method, (traj, reports) in zip(cfg.methods, results):
        traj.write_csv(out / f"{method}.csv")
        summary = run_summary(traj, reports)
        write_summary(out / f"{method}.json", summary)
        overall["runs"][method] = {"passed": summary["passed"], "aborted": traj.aborted, "steps_run": len(traj)}
        if traj.aborted:
            print(f"{method}: diverged after {len(traj)} steps", file=sys.stderr)
            code = EXIT_DIVERGED
        for r in reports:
            failing = r.violations + r.details.get("monotone_violations", [])
            if not r.passed:
                print(f"{method}: {r.name} failed at steps {sorted(set(failing))}", file=sys.stderr)
                if code == EXIT_OK:
                    code = EXIT_ASSERT
    write_summary(out / "summary.json", overall)
    _json_out(overall["runs"])
    return code


def cmd_fuzz(args) -> int:
    if args.iterations < 1:
        print("error: --iterations must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    cfg = RunConfig.from_dict(_read_json(args.config)) if args.config else RunConfig()
    seed = 0 if args.seed is None else args.seed
    rep = run_fuzz(args.iterations, seed, cfg.mer, cfg.tolerances)
    for v in rep.violations:
        _json_out(v)
    _json_out(
        {
            "iterations": rep.iterations,
            "seed": rep.seed,
            "violations": len(rep.violations),
            "full_rank_cases": rep.full_rank_cases,
            "degenerate_cases": rep.degenerate_cases,
            "conflict_cases": rep.conflict_cases,
        }
    )
    return EXIT_OK if rep.passed else EXIT_ASSERT


def decade_histogram(eps: np.ndarray, eps_min: float, bins: int):
    """Counts over ``bins`` equal log10-width bins per decade from ``eps_min`` to one."""
    lo = math.log10(eps_min)
    n_edges = max(1, math.ceil(-lo * bins - 1e-9))
    edges = np.minimum(np.arange(n_edges + 1) / bins + lo, 0.0)
    edges[0], edges[-1] = lo, 0.0
    counts, _ = np.histogram(np.log10(eps), bins=edges)
    return edges, counts


def cmd_sample_eps(args) -> int:
    from scipy import stats

    if not (0.0 < args.eps_min < 1.0):
        print("error: --eps-min must lie in (0, 1)", file=sys.stderr)
        return EXIT_INPUT
    if args.bins < 1 or args.n < 1:
        print("error: --bins and --n must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    seed = 0 if args.seed is None else args.seed
    eps = sample_eps_loguniform(args.eps_min, args.n, seed)
    lo = math.log(args.eps_min)
    ks = stats.kstest(np.log(eps), "uniform", args=(lo, -lo))
    edges, counts = decade_histogram(eps, args.eps_min, args.bins)
    print(f"{'lo':>12} {'hi':>12} {'count':>10}")
    for a, b, c in zip(edges[:-1], edges[1:], counts):
        print(f"{10**a:12.4e} {10**b:12.4e} {int(c):10d}")
    print(f"ks_statistic {ks.statistic:.6g}")
    print(f"ks_pvalue {ks.pvalue:.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master random seed")
    common.add_argument("--config", default=None, help="RunConfig JSON file")
    common.add_argument("--strict", action="store_true", help="treat degenerate aggregation as an error")
    common.add_argument("--out-dir", default=None, help="output directory (bench)")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("--method", choices=METHODS, default=None)

    p = argparse.ArgumentParser(prog="hrgrad", description="Multi-task gradient aggregation tools.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("aggregate", parents=[common], help="aggregate one GradientSet JSON file")
    a.add_argument("input")
    a.set_defaults(func=cmd_aggregate)

    b = sub.add_parser("bench", parents=[common], help="run convergence benchmarks on quadratic families")
    b.add_argument("--steps", type=int, default=None)
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("fuzz", parents=[common], help="randomized checks of the geometric identities")
    f.add_argument("--iterations", type=int, default=10000)
    f.set_defaults(func=cmd_fuzz)

    s = sub.add_parser("sample-eps", parents=[common], help="log-uniform eps sampler diagnostics")
    s.add_argument("--eps-min", type=float, default=1e-6)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--bins", type=int, default=1, help="bins per decade")
    s.set_defaults(func=cmd_sample_eps)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "aggregate":
        args.method = args.method or "hrgrad"
        if args.seed is None:
            args.seed = 0
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (HRGradError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
