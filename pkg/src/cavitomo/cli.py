"""``cavitomo`` batch command line.

Every command reads one JSON config (``--config``). Relative paths in the
config are resolved against the config file's directory. Flags can also be
set through the environment: ``CAVITOMO_CONFIG``, ``CAVITOMO_SEED``,
``CAVITOMO_THREADS`` and ``CAVITOMO_QUIET``; explicit flags win.

Exit codes: 0 success, 2 invalid input, 3 ML did not converge, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cavitomo import io
from cavitomo.channels import OUTCOMES, ExperimentParams
from cavitomo.effects import canonical_sequence, compile_effects
from cavitomo.fockspace import SpaceConfig
from cavitomo.mle import DEFAULT_MAX_ITER, DEFAULT_TOL, reconstruct
from cavitomo.precision import (
    bootstrap,
    build_r_superop,
    coherence_indices,
    element_error_bars,
    fidelity,
    fit_inverse_sqrt,
    phase_with_error,
)
from cavitomo.simulator import make_truth_state, simulate_batch

log = logging.getLogger("cavitomo")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4

ENV_PREFIX = "CAVITOMO_"
BLIND_RTOL = 1e-12


class NotConverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    space: SpaceConfig
    params: ExperimentParams
    paths: dict[str, Path]
    seed: int = 0
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    truth: dict = field(default_factory=dict)
    templates: list = field(default_factory=list)
    bootstrap: dict = field(default_factory=dict)

    def path(self, name: str) -> Path:
        try:
            return self.paths[name]
        except KeyError:
            raise ValueError(f"config has no paths.{name} entry") from None


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
    base = path.parent
    try:
        space = SpaceConfig(**data["space"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"config needs a space with dim1 and dim2 ({exc})") from None
    params = ExperimentParams.from_dict(data.get("params", {}))
    paths = {k: (base / v).resolve() for k, v in data.get("paths", {}).items()}
    ml = data.get("ml", {})
    cfg = RunConfig(
        space=space,
        params=params,
        paths=paths,
        seed=int(data.get("seed", 0)),
        tol=float(ml.get("tol", DEFAULT_TOL)),
        max_iter=int(ml.get("max_iter", DEFAULT_MAX_ITER)),
        truth=data.get("truth", {}),
        templates=data.get("templates", []),
        bootstrap=data.get("bootstrap", {}),
    )
    if cfg.tol <= 0:
        raise ValueError("ml.tol must be > 0")
    return cfg


# --- template expansion ------------------------------------------------------------


def _as_complex(value):
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(value[0], value[1])
    return value


def _schedule_value(value, i: int, rng: np.random.Generator):
    """Scalar: fixed. List: cycled over the block, entries may be ``[re, im]``.
    ``{"uniform": [lo, hi]}``: drawn per record."""
    if isinstance(value, dict):
        if "uniform" not in value:
            raise ValueError(f"unsupported schedule entry {value!r}")
        lo, hi = value["uniform"]
        return float(rng.uniform(lo, hi))
    if isinstance(value, list):
        if not value:
            raise ValueError("empty schedule list")
        return _as_complex(value[i % len(value)])
    return value


def expand_templates(blocks: list, seed: int) -> list:
    """Template records from ``[{"kind": ..., "count": n, "schedule": {...}}, ...]``."""
    templates = []
    for block_no, block in enumerate(blocks):
        try:
            kind = block["kind"]
            count = int(block["count"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"template block {block_no}: needs kind and count ({exc})") from None
        if count < 0:
            raise ValueError(f"template block {block_no}: negative count")
        schedule = block.get("schedule", {})
        rng = np.random.default_rng([int(seed), 1_000_003, block_no])
        for i in range(count):
            args = {k: _schedule_value(v, i, rng) for k, v in schedule.items()}
            if "n_samples" in args:
                args["n_samples"] = int(args["n_samples"])
            templates.append(canonical_sequence(kind, **args))
    return templates


def _truth_state(cfg: RunConfig) -> np.ndarray:
    opts = dict(cfg.truth)
    kind = opts.pop("kind", None)
    if kind is None:
        raise ValueError("config has no truth.kind")
    if kind == "custom":
        rho, space = io.read_state(cfg.path("truth_in") if "truth_in" in cfg.paths else opts.pop("path"))
        if space != cfg.space:
            raise ValueError("custom truth state dimensions differ from the config space")
        opts["matrix"] = rho
        opts.pop("path", None)
    return make_truth_state(kind, cfg.space, **opts)


# --- commands ----------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, args) -> int:
    rho0 = _truth_state(cfg)
    templates = expand_templates(cfg.templates, cfg.seed)
    t0 = time.perf_counter()
    records = simulate_batch(rho0, templates, cfg.space, cfg.params, seed=cfg.seed)
    io.write_records(cfg.path("records"), records)
    if "truth" in cfg.paths:
        io.write_state(cfg.path("truth"), rho0, cfg.space)
    counts = Counter(s.outcome.value for rec in records for s in rec.samples)
    log.info("simulated %d records in %.1f s", len(records), time.perf_counter() - t0)
    print(f"records {len(records)}")
    for mu in OUTCOMES:
        print(f"{mu.value} {counts.get(mu.value, 0)}")
    return EXIT_OK


def _load_or_compile(cfg: RunConfig) -> tuple[np.ndarray, list[str]]:
    records_path = cfg.path("records")
    cache_path = cfg.path("effects")
    key = io.cache_key(records_path, cfg.space, cfg.params)
    if cache_path.exists():
        try:
            effects, ids, old_key, space = io.read_effect_cache(cache_path)
        except io.FormatError as exc:
            log.warning("ignoring unreadable effect cache: %s", exc)
        else:
            if old_key == key and space == cfg.space:
                log.info("effect cache reused (%d effects)", len(effects))
                return effects, ids
    records = io.read_records(records_path)
    t0 = time.perf_counter()
    compiled = compile_effects(records, cfg.space, cfg.params)
    io.write_effect_cache(cache_path, compiled, key, cfg.space)
    log.info("compiled %d effects in %.1f s", len(compiled), time.perf_counter() - t0)
    n = cfg.space.dim
    mats = np.stack([e.matrix for e in compiled]) if compiled else np.zeros((0, n, n), dtype=complex)
    return mats, [e.record_id for e in compiled]


def cmd_effects(cfg: RunConfig, args) -> int:
    effects, _ = _load_or_compile(cfg)
    print(f"effects {len(effects)}")
    return EXIT_OK


def _cached_effects(cfg: RunConfig) -> np.ndarray:
    effects, _, _, space = io.read_effect_cache(cfg.path("effects"))
    if space != cfg.space:
        raise ValueError(f"effect cache is {space.dim1}x{space.dim2}, config says {cfg.space.dim1}x{cfg.space.dim2}")
    if len(effects) == 0:
        raise ValueError("effect cache is empty")
    return effects


def _nullable(matrix: np.ndarray, blind: np.ndarray) -> list:
    out = []
    for row_vals, row_blind in zip(matrix.tolist(), blind.tolist()):
        out.append([None if b or not np.isfinite(v) else v for v, b in zip(row_vals, row_blind)])
    return out


def errorbar_report(rho_ml: np.ndarray, effects: np.ndarray, cfg: RunConfig) -> dict:
    mask = np.abs(effects).sum(axis=0)
    blind = mask <= BLIND_RTOL * mask.max()
    bars = element_error_bars(rho_ml, build_r_superop(rho_ml, effects), cfg.tol)
    report = {
        "rank_used": bars.rank_used,
        "sigma_re": _nullable(bars.sigma_re, blind),
        "sigma_im": _nullable(bars.sigma_im, blind),
        "sigma_abs": _nullable(bars.sigma_abs, blind),
        "sigma_phase": _nullable(bars.sigma_phase, blind),
        "mask": mask.tolist(),
        "blind": blind.tolist(),
    }
    try:
        p, q = coherence_indices(cfg.space)
        if not blind[p, q]:
            phi, s_phi = phase_with_error(rho_ml, effects, cfg.space, cfg.tol)
            report["phase"] = {"value": phi, "sigma": s_phi}
    except (ValueError, ArithmeticError) as exc:
        log.warning("phase not reported: %s", exc)
    return report


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    effects = _cached_effects(cfg)
    t0 = time.perf_counter()
    res = reconstruct(effects, tol=cfg.tol, max_iter=cfg.max_iter)
    log.info("ML: %d iterations, converged=%s, %.1f s", res.iterations, res.converged, time.perf_counter() - t0)
    io.write_state(cfg.path("state"), res.rho_ml, cfg.space)
    report = {
        "version": io.FORMAT_VERSION,
        "n_records": len(effects),
        "loglik": res.loglik,
        "iterations": res.iterations,
        "converged": res.converged,
        "residuals": list(res.final_residuals),
        "errorbars": errorbar_report(res.rho_ml, effects, cfg),
    }
    if not res.converged:
        report["partial"] = True
    io.write_json(cfg.path("report"), report)
    print(f"loglik {res.loglik:.6f} iterations {res.iterations} converged {str(res.converged).lower()}")
    if not res.converged:
        raise NotConverged(f"no convergence after {res.iterations} iterations; outputs flagged partial")
    return EXIT_OK


def cmd_errorbars(cfg: RunConfig, args) -> int:
    effects = _cached_effects(cfg)
    rho, space = io.read_state(cfg.path("state"))
    if space != cfg.space:
        raise ValueError("state dimensions differ from the config space")
    report = {"version": io.FORMAT_VERSION, **errorbar_report(rho, effects, cfg)}
    io.write_json(cfg.path("errorbars"), report)
    if "phase" in report:
        print(f"phase {report['phase']['value']:.6f} sigma {report['phase']['sigma']:.6f}")
    return EXIT_OK


def cmd_bootstrap(cfg: RunConfig, args) -> int:
    effects = _cached_effects(cfg)
    plan = cfg.bootstrap
    group_sizes = [int(r) for r in plan.get("group_sizes", [])]
    if not group_sizes:
        raise ValueError("bootstrap.group_sizes is empty")
    reports = bootstrap(
        effects, group_sizes, cfg.space,
        n_resamplings=int(plan.get("n_resamplings", 4)),
        seed=cfg.seed, tol=cfg.tol, max_iter=cfg.max_iter, workers=args.threads,
    )
    out = {"version": io.FORMAT_VERSION, "groups": [r.__dict__ for r in reports]}
    if len(reports) >= 2:
        out["fit"] = fit_inverse_sqrt(reports)
    io.write_json(cfg.path("bootstrap"), out)
    for r in reports:
        print(f"R {r.group_size} groups {r.n_groups} sigma_tilde {r.sigma_tilde:.6f} mean_sigma {r.mean_sigma:.6f}")
    if "fit" in out:
        print(f"amplitude {out['fit']['amplitude']:.6f} slope {out['fit']['slope']:.4f}")
    return EXIT_OK


def cmd_fidelity(cfg, args) -> int:
    rho_a, space_a = io.read_state(args.state_a)
    rho_b, space_b = io.read_state(args.state_b)
    if space_a != space_b:
        raise ValueError(f"dimension mismatch: {space_a.dim1}x{space_a.dim2} vs {space_b.dim1}x{space_b.dim2}")
    print(f"{fidelity(rho_a, rho_b):.6f}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "effects": cmd_effects,
    "reconstruct": cmd_reconstruct,
    "errorbars": cmd_errorbars,
    "bootstrap": cmd_bootstrap,
    "fidelity": cmd_fidelity,
}


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cavitomo", description=__doc__.splitlines()[0])
    parser.add_argument("--config", default=_env("CONFIG"), help="run config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=int(_env("THREADS", "1")),
                        help="worker processes for bootstrap")
    parser.add_argument("--quiet", action="store_true",
                        default=_env("QUIET", "") not in ("", "0", "false"), help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "fidelity":
            p.add_argument("state_a")
            p.add_argument("state_b")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = None
        if args.command != "fidelity":
            if not args.config:
                raise ValueError("--config is required")
            cfg = load_config(args.config)
            seed = args.seed if args.seed is not None else _env("SEED")
            if seed is not None:
                cfg.seed = int(seed)
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        return COMMANDS[args.command](cfg, args)
    except NotConverged as exc:
        log.error("%s", exc)
        return EXIT_NOT_CONVERGED
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
