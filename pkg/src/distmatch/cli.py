"""Configuration-driven experiment runner.

``distmatch train|oracle|verify|report <path>`` reads a JSON run
configuration (or a bundled preset name), executes the requested stage, and
writes delimited artifacts plus an atomically-renamed manifest into the
configured output directory.  Exit codes: 0 success/converged, 1 config
error, 2 runtime error, 3 finished without converging, 4 infeasible
deconvolution target.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.special import ndtr

try:
    import importlib.resources as _resources
except ImportError:  # pragma: no cover
    _resources = None

from . import __version__
from .charfn import (CFTable, FrequencyGrid, TargetSpec, build_uniform_grid,
                     empirical_cf, target_cf)
from .environment import EnvSpec
from .errors import ConfigError, DistmatchError, InfeasibleTargetError
from .loss import bernoulli_loss, cf_loss, cf_loss_gradient, epps_pulley_loss
from .numerics import RandomStream, wasserstein1
from .oracle import (JacobiAngerProblem, estimate_modes, forward_cf,
                     reconstruct_density, sample_action_density, solve_modes,
                     torus_deconvolve)
from .policy import PolicyConfig, init_params, save_checkpoint
from .rollout import GoodEventConfig, dump_trajectories, simulate_batch, simulate_policy_fn
from .trainer import StepSchedule, TrainConfig, bias_decay_probe, train

PRESETS = ("lq", "wealth-full", "wealth-uniform", "epanechnikov", "torus")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_UNCONVERGED = 3
EXIT_INFEASIBLE = 4

_HIST_BINS = 64
_EVAL_STREAM_ID = 2**40  # far above any training iteration index

_SCHEDULE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": ["constant", "robbins-monro", "adaptive-moment"]},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "a": {"type": "number", "exclusiveMinimum": 0},
        "k0": {"type": "integer", "minimum": 1},
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "eps_am": {"type": "number", "exclusiveMinimum": 0},
    },
}

_GOOD_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "z_bound": {"type": "number", "minimum": 1},
        "eps_bound": {"type": "number", "minimum": 1},
        "mode": {"enum": ["clip", "resample", "off"]},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["env", "policy", "grid", "target", "train", "outputs"],
    "properties": {
        "env": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["lq", "wealth", "cosine", "torus"]},
                "params": {"type": "object"},
            },
        },
        "policy": {
            "type": "object",
            "additionalProperties": False,
            "required": ["architecture"],
            "properties": {
                "architecture": {"enum": ["theory2layer", "residual-mlp"]},
                "width": {"type": "integer", "minimum": 1},
                "blocks": {"type": "integer", "minimum": 0},
                "activation": {"enum": ["tanh", "relu"]},
                "layer_norm": {"type": "boolean"},
                "output_squash": {
                    "type": ["array", "null"],
                    "items": {"type": "number"},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "seed": {"type": "integer", "minimum": 0},
                "time_encoding": {"enum": ["tau", "t-over-T"]},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["K", "L"],
            "properties": {
                "K": {"type": "number", "exclusiveMinimum": 0},
                "L": {"type": "integer", "minimum": 2},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "target": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {
                    "enum": ["dirac", "standard-normal", "epanechnikov",
                             "wrapped-gaussian", "empirical", "table",
                             "feedback-lq", "lognormal-terminal",
                             "uniform-fraction"],
                },
                "c": {"type": "number"},
                "m": {"type": "number"},
                "sigma2": {"type": "number", "exclusiveMinimum": 0},
                "path": {"type": "string"},
                "gain": {"type": "number"},
                "M": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "M": {"type": "integer", "minimum": 1},
                "max_iters": {"type": "integer", "minimum": 1},
                "threshold": {"type": "number", "minimum": 0},
                "stall_window": {"type": "integer", "minimum": 1},
                "restart_limit": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "workers": {"type": "integer", "minimum": 1},
                "memory_budget": {"type": "integer", "minimum": 1},
                "streaming_chunk": {"type": "integer", "minimum": 1},
                "theta_box": {"type": "number", "exclusiveMinimum": 0},
                "schedule": _SCHEDULE_SCHEMA,
                "good": _GOOD_SCHEMA,
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dir"],
            "properties": {
                "dir": {"type": "string", "minLength": 1},
                "checkpoint_every": {"type": "integer", "minimum": 0},
                "dump_trajectories": {"type": "boolean"},
                "eval_M": {"type": "integer", "minimum": 2},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["jacobi-anger", "torus-deconvolve"]},
                "s0": {"type": "number"},
                "sigma": {"type": "number", "exclusiveMinimum": 0},
                "V": {"type": "number", "exclusiveMinimum": 0},
                "k_modes": {"type": "integer", "minimum": 1},
                "grid": {"type": "object"},
                "interval": {
                    "type": "array",
                    "items": {"type": "number"},
                    "minItems": 2,
                    "maxItems": 2,
                },
                "density_points": {"type": "integer", "minimum": 3},
                "sample_M": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "n_modes": {"type": "integer", "minimum": 1},
            },
        },
        "scale_overrides": {"type": "object"},
    },
}


# ---------------------------------------------------------------------------
# config loading


def _json_path(parts: Sequence) -> str:
    return ".".join(str(p) for p in parts) or "<root>"


def load_config(path: str) -> dict:
    """Read and schema-validate a run configuration.

    ``path`` may be a JSON file or the name of a bundled preset.  Violations
    raise :class:`ConfigError` naming the offending key by its JSON path.
    """
    import jsonschema

    if os.path.exists(path):
        source = path
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(path, f"not valid JSON: {exc}") from exc
    elif path in PRESETS:
        source = f"preset:{path}"
        raw = json.loads(_preset_text(path))
    else:
        raise ConfigError(path, "no such config file or preset "
                                f"(presets: {', '.join(PRESETS)})")
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(_json_path(err.absolute_path), err.message)
    _check_cross_fields(raw)
    raw["__source__"] = source
    return raw


def _preset_text(name: str) -> str:
    if _resources is not None:
        ref = _resources.files("distmatch").joinpath(f"presets/{name}.json")
        return ref.read_text()
    here = os.path.dirname(__file__)  # pragma: no cover
    with open(os.path.join(here, "presets", f"{name}.json")) as fh:  # pragma: no cover
        return fh.read()


def _check_cross_fields(raw: dict) -> None:
    target = raw.get("target", {})
    kind = target.get("kind")
    needs = {"dirac": ("c",), "wrapped-gaussian": ("m", "sigma2"),
             "empirical": ("path",), "table": ("path",),
             "feedback-lq": ("gain", "M", "seed"),
             "lognormal-terminal": ("M", "seed"),
             "uniform-fraction": ("M", "seed")}
    for field in needs.get(kind, ()):
        if field not in target:
            raise ConfigError(f"target.{field}", f"required for {kind} targets")
    if kind in ("empirical", "table"):
        p = target["path"]
        if not os.path.exists(p):
            raise ConfigError("target.path", f"file not found: {p}")
    env_kind = raw.get("env", {}).get("kind")
    if kind == "wrapped-gaussian":
        if env_kind != "torus":
            raise ConfigError("target.kind",
                              "wrapped-gaussian targets require the torus environment")
        grid = raw.get("grid", {})
        K, L = grid.get("K"), grid.get("L")
        if K is not None and L is not None:
            du = 2.0 * K / L
            nodes = -K + np.arange(L) * du
            if np.max(np.abs(nodes - np.round(nodes))) > 1e-9:
                raise ConfigError("grid", "wrapped-gaussian targets need integer "
                                          "frequency nodes (e.g. K=N, L=2N)")
    if kind == "feedback-lq" and env_kind != "lq":
        raise ConfigError("target.kind", "feedback-lq targets require the lq environment")
    if kind in ("lognormal-terminal", "uniform-fraction") and env_kind != "wealth":
        raise ConfigError("target.kind", f"{kind} targets require the wealth environment")


def apply_scale(raw: dict, scale: str) -> dict:
    """Fold the preset's scale overrides into a flat config."""
    cfg = json.loads(json.dumps({k: v for k, v in raw.items() if k != "scale_overrides"}))
    overrides = raw.get("scale_overrides", {})
    if scale != "desk" and scale not in overrides:
        raise ConfigError("scale_overrides", f"config offers no {scale!r} overrides")
    patch = overrides.get(scale, {}) if scale != "desk" else {}

    def merge(dst: dict, src: dict) -> None:
        for key, val in src.items():
            if isinstance(val, dict) and isinstance(dst.get(key), dict):
                merge(dst[key], val)
            else:
                dst[key] = val

    merge(cfg, patch)
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical (sorted-key, compact) JSON encoding."""
    clean = {k: v for k, v in cfg.items() if not k.startswith("__")}
    canon = json.dumps(clean, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# ---------------------------------------------------------------------------
# config -> library objects


def _build_env(cfg: dict) -> EnvSpec:
    spec = cfg["env"]
    params = dict(spec.get("params", {}))
    if "output_squash" in params:
        raise ConfigError("env.params.output_squash", "belongs under policy")
    ctor = {"lq": EnvSpec.lq, "wealth": EnvSpec.wealth,
            "cosine": EnvSpec.cosine, "torus": EnvSpec.torus}[spec["kind"]]
    try:
        return ctor(**params)
    except (TypeError, DistmatchError) as exc:
        raise ConfigError("env.params", str(exc)) from exc


def _build_policy(cfg: dict) -> PolicyConfig:
    raw = dict(cfg["policy"])
    if raw.get("output_squash") is not None:
        raw["output_squash"] = tuple(raw["output_squash"])
    try:
        return PolicyConfig(**raw)
    except (TypeError, DistmatchError) as exc:
        raise ConfigError("policy", str(exc)) from exc


def _build_grid(cfg: dict) -> FrequencyGrid:
    g = cfg["grid"]
    try:
        return build_uniform_grid(g["K"], g["L"], g.get("alpha", 0.05))
    except DistmatchError as exc:
        raise ConfigError("grid", str(exc)) from exc


def _lognormal_terminal_samples(env: EnvSpec, M: int, seed: int) -> np.ndarray:
    horizon_years = env.horizon * env.dt
    mean = np.log(env.s0) + (env.mu - 0.5 * env.sigma**2) * horizon_years
    sd = env.sigma * np.sqrt(horizon_years)
    gen = RandomStream(seed, 0).generator()
    return np.exp(mean + sd * gen.standard_normal(M))


def _build_target(cfg: dict, env: EnvSpec) -> tuple:
    """Returns (TargetSpec, target_samples or None, generator_seed or None)."""
    t = cfg["target"]
    kind = t["kind"]
    if kind == "dirac":
        return TargetSpec.dirac(t["c"]), None, None
    if kind == "standard-normal":
        return TargetSpec.standard_normal(), None, None
    if kind == "epanechnikov":
        return TargetSpec.epanechnikov(), None, None
    if kind == "wrapped-gaussian":
        return TargetSpec.wrapped_gaussian(t["m"], t["sigma2"]), None, None
    if kind == "table":
        return TargetSpec.table(t["path"]), None, None
    if kind == "empirical":
        samples = np.loadtxt(t["path"], ndmin=1)
        return TargetSpec.empirical(samples), samples, None
    M, seed = t["M"], t["seed"]
    stream = RandomStream(seed, 0)
    if kind == "feedback-lq":
        gain = t["gain"]
        samples = simulate_policy_fn(env, lambda k, s, R, z: gain * s, M, stream)
    elif kind == "lognormal-terminal":
        samples = _lognormal_terminal_samples(env, M, seed)
    else:  # uniform-fraction: invest a U(0,1) share of wealth each step
        if env.fraction_control:
            samples = simulate_policy_fn(env, lambda k, s, R, z: ndtr(z), M, stream)
        else:
            samples = simulate_policy_fn(env, lambda k, s, R, z: ndtr(z) * s, M, stream)
    return TargetSpec.empirical(samples), samples, seed


def _build_train(cfg: dict, seed_override: Optional[int],
                 threads: Optional[int]) -> TrainConfig:
    raw = dict(cfg.get("train", {}))
    sched = StepSchedule(**raw.pop("schedule", {}))
    good = GoodEventConfig(**raw.pop("good", {}))
    if seed_override is not None:
        raw["seed"] = seed_override
    if threads is not None:
        raw["workers"] = threads
    try:
        return TrainConfig(schedule=sched, good=good, **raw)
    except (TypeError, DistmatchError) as exc:
        raise ConfigError("train", str(exc)) from exc


def _sample_literal_target(spec: TargetSpec, env: EnvSpec, M: int,
                           seed: int) -> Optional[np.ndarray]:
    """Draw reference samples from analytic target laws for reports."""
    gen = RandomStream(seed, 1).generator()
    if spec.kind == "dirac-at":
        return np.full(M, spec.c)
    if spec.kind == "standard-normal":
        return gen.standard_normal(M)
    if spec.kind == "epanechnikov":
        u = gen.uniform(-1.0, 1.0, size=(3, M))
        return np.median(u, axis=0)
    if spec.kind == "wrapped-gaussian":
        draws = spec.m + np.sqrt(spec.sigma2) * gen.standard_normal(M)
        return np.mod(draws, 2.0 * np.pi)
    return None


# ---------------------------------------------------------------------------
# artifact writers


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _fmt(x) -> str:
    return f"{float(x):.17g}"


def _write_csv(path: str, header: Sequence[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if isinstance(v, (int, float, np.floating))
                              and not isinstance(v, bool) else str(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_samples(path: str, samples: np.ndarray) -> None:
    _atomic_write(path, "\n".join(_fmt(v) for v in samples) + "\n")


def _histogram_rows(target: np.ndarray, learned: np.ndarray):
    pooled_lo = min(target.min(), learned.min())
    pooled_hi = max(target.max(), learned.max())
    if pooled_hi <= pooled_lo:
        pooled_hi = pooled_lo + 1.0
    edges = np.linspace(pooled_lo, pooled_hi, _HIST_BINS + 1)
    t_counts, _ = np.histogram(target, bins=edges)
    l_counts, _ = np.histogram(learned, bins=edges)
    for i in range(_HIST_BINS):
        yield edges[i], edges[i + 1], int(t_counts[i]), int(l_counts[i])


# ---------------------------------------------------------------------------
# commands


def cmd_train(config_path: str, seed: Optional[int] = None,
              threads: Optional[int] = None, scale: str = "desk") -> int:
    cfg = apply_scale(load_config(config_path), scale)
    env = _build_env(cfg)
    policy = _build_policy(cfg)
    grid = _build_grid(cfg)
    spec, target_samples, gen_seed = _build_target(cfg, env)
    tconf = _build_train(cfg, seed, threads)
    out = cfg["outputs"]
    run_dir = out["dir"]
    try:
        os.makedirs(run_dir, exist_ok=True)
        probe = os.path.join(run_dir, ".writable")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ConfigError("outputs.dir", f"not writable: {exc}") from exc

    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    ckpt_every = out.get("checkpoint_every", 0)
    ckpt_dir = os.path.join(run_dir, "checkpoints")

    def on_iterate(k, est, params):
        if ckpt_every and k % ckpt_every == 0:
            os.makedirs(ckpt_dir, exist_ok=True)
            save_checkpoint(params, os.path.join(ckpt_dir, f"ckpt_{k:06d}.json"))

    report = train(env, policy, spec, grid, tconf, callback=on_iterate)

    _write_csv(os.path.join(run_dir, "metrics.csv"),
               ("iter", "loss", "grad_norm", "alpha"),
               ((r.k, r.loss, r.grad_norm, r.alpha) for r in report.records))
    save_checkpoint(report.final_params, os.path.join(run_dir, "checkpoint.json"))

    eval_M = out.get("eval_M", tconf.M)
    eval_stream = RandomStream(tconf.seed, _EVAL_STREAM_ID)
    batch = simulate_batch(env, report.final_params, eval_M, eval_stream,
                           tconf.good, with_grad=False, workers=tconf.workers)
    learned = batch.R_T
    if out.get("dump_trajectories", False):
        dump_trajectories(batch, os.path.join(run_dir, "trajectories.csv"))

    table = target_cf(spec, grid)
    learned_cf = empirical_cf(learned, grid)
    _write_csv(os.path.join(run_dir, "cf.csv"),
               ("u", "target_re", "target_im", "learned_re", "learned_im"),
               ((u, tv.real, tv.imag, lv.real, lv.imag)
                for u, tv, lv in zip(grid.nodes, table.values, learned_cf.values)))

    if target_samples is None:
        target_samples = _sample_literal_target(spec, env, eval_M, tconf.seed)
    w1 = None
    if target_samples is not None:
        n = min(len(target_samples), len(learned))
        _write_samples(os.path.join(run_dir, "samples_target.txt"), target_samples[:n])
        _write_samples(os.path.join(run_dir, "samples_learned.txt"), learned[:n])
        w1 = wasserstein1(target_samples[:n], learned[:n])
        _write_csv(os.path.join(run_dir, "hist.csv"),
                   ("bin_lo", "bin_hi", "target_count", "learned_count"),
                   _histogram_rows(target_samples[:n], learned[:n]))

    final = report.records[-1]
    manifest = {
        "config_hash": config_hash(cfg),
        "config": {k: v for k, v in cfg.items() if not k.startswith("__")},
        "seeds": {"train": tconf.seed, "policy": policy.seed,
                  "target_generator": gen_seed},
        "version": __version__,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "wall_time": time.perf_counter() - t0,
        "iterations": len(report.records),
        "restarts": report.restarts_used,
        "converged": report.converged,
        "final_loss": final.loss,
        "final_grad_norm": final.grad_norm,
        "W1": w1,
    }
    _atomic_write(os.path.join(run_dir, "manifest.json"),
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{'converged' if report.converged else 'did not converge'}: "
          f"loss {final.loss:.6g} after {len(report.records)} iterations "
          f"({report.restarts_used} restarts); artifacts in {run_dir}")
    return EXIT_OK if report.converged else EXIT_UNCONVERGED


def _oracle_jacobi_anger(section: dict, cfg: dict, run_dir: str) -> int:
    g = section.get("grid", cfg.get("grid", {}))
    grid = build_uniform_grid(g.get("K", 16.0), g.get("L", 8001),
                              g.get("alpha", 0.05))
    problem = JacobiAngerProblem(s0=section.get("s0", 0.0),
                                 sigma=section.get("sigma", 0.1),
                                 V=section.get("V", 1.0),
                                 k_modes=section.get("k_modes", 16),
                                 grid=grid)
    env = _build_env(cfg)
    spec, _, _ = _build_target(cfg, env)
    table = target_cf(spec, grid)
    solution = solve_modes(problem, table)
    _write_csv(os.path.join(run_dir, "modes.csv"),
               ("k", "re", "im", "abs"),
               ((k, psi.real, psi.imag, abs(psi))
                for k, psi in enumerate(solution.psi)))
    interval = tuple(section.get("interval", (-np.pi, np.pi)))
    density = reconstruct_density(solution, interval,
                                  n_points=section.get("density_points", 2001))
    _write_csv(os.path.join(run_dir, "density.csv"), ("x", "p"),
               zip(density.xs, density.values))
    print(f"jacobi-anger: residual_norm {solution.residual_norm:.3g}, "
          f"odd-mode max {solution.odd_mode_max:.3g}, "
          f"min density {density.min_density:.3g}; artifacts in {run_dir}")
    return EXIT_OK


def _oracle_torus(section: dict, cfg: dict, run_dir: str) -> int:
    env = _build_env(cfg)
    spec, _, _ = _build_target(cfg, env)
    N = section.get("n_modes", 8)
    ns = np.arange(-N, N + 1, dtype=float)
    nodes = ns.copy()
    du = 1.0
    weights = np.ones_like(nodes)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    mode_grid = FrequencyGrid(k_max=float(N), n_nodes=2 * N + 1, alpha=1.0,
                              nodes=nodes, weights=weights)
    table = target_cf(spec, mode_grid)
    nu = torus_deconvolve(table.values, s0=env.s0, sigma=env.sigma_eps)
    _write_csv(os.path.join(run_dir, "nu_modes.csv"),
               ("n", "re", "im", "abs"),
               ((int(n), v.real, v.imag, abs(v)) for n, v in zip(ns, nu)))
    print(f"torus-deconvolve: {2 * N + 1} action modes; artifacts in {run_dir}")
    return EXIT_OK


def cmd_oracle(config_path: str, seed: Optional[int] = None,
               threads: Optional[int] = None, scale: str = "desk") -> int:
    cfg = apply_scale(load_config(config_path), scale)
    section = cfg.get("oracle")
    if section is None:
        raise ConfigError("oracle", "config has no oracle section")
    run_dir = cfg["outputs"]["dir"]
    os.makedirs(run_dir, exist_ok=True)
    if section["kind"] == "jacobi-anger":
        return _oracle_jacobi_anger(section, cfg, run_dir)
    return _oracle_torus(section, cfg, run_dir)


# ---------------------------------------------------------------------------
# verify suites


def _check(name: str, measured: float, bound: float, results: List[bool],
           smaller_is_better: bool = True) -> None:
    ok = measured <= bound if smaller_is_better else measured >= bound
    results.append(ok)
    rel = "<=" if smaller_is_better else ">="
    print(f"{name}: measured {measured:.3g} {rel} {bound:.3g}: "
          f"{'PASS' if ok else 'FAIL'}")


def _verify_gradients(seed: int, results: List[bool]) -> None:
    from .loss import cf_loss_gradient

    env = EnvSpec.lq(horizon=3)
    grid = build_uniform_grid(10.0, 128, 0.05)
    stream = RandomStream(seed, 0)
    R_ref = simulate_policy_fn(env, lambda t, s, R, z: -0.5 * s, 4096,
                               RandomStream(seed, 999))
    table = target_cf(TargetSpec.empirical(R_ref), grid)
    pc = PolicyConfig(architecture="theory2layer", width=8, activation="tanh", seed=seed)
    base = init_params(pc)
    rng = np.random.default_rng(seed)
    params = base.with_theta(base.theta + 0.3 * rng.standard_normal(base.theta.size))
    good = GoodEventConfig()
    est = cf_loss_gradient(simulate_batch(env, params, 512, stream, good), table, grid)
    h = 1e-5
    worst = 0.0
    for idx in rng.choice(params.n_params, 10, replace=False):
        tp, tm = params.theta.copy(), params.theta.copy()
        tp[idx] += h
        tm[idx] -= h
        lp = cf_loss(simulate_batch(env, params.with_theta(tp), 512, stream, good,
                                    with_grad=False), table, grid)
        lm = cf_loss(simulate_batch(env, params.with_theta(tm), 512, stream, good,
                                    with_grad=False), table, grid)
        fd = (lp - lm) / (2 * h)
        denom = max(1e-5, abs(fd))
        worst = max(worst, abs(fd - est.grad[idx]) / denom)
    _check("gradients max rel err", worst, 1e-3, results)


def _verify_bias(seed: int, results: List[bool]) -> None:
    env = EnvSpec.lq(horizon=3)
    grid = build_uniform_grid(10.0, 256, 0.05)
    pc = PolicyConfig(architecture="theory2layer", width=8, activation="tanh", seed=0)
    base = init_params(pc)
    rng = np.random.default_rng(0)
    params = base.with_theta(base.theta + 0.5 * rng.standard_normal(base.theta.size))
    R_self = simulate_batch(env, params, 1 << 21, RandomStream(123456, 0),
                            GoodEventConfig(), with_grad=False).R_T
    probe = bias_decay_probe(env, params, TargetSpec.empirical(R_self), grid,
                             [256, 1024, 4096], 200, seed=seed, M_ref=4 * 10**6)
    print(f"bias errors per M: {[f'{e:.3g}' for e in probe.errors]}")
    ok = -1.3 <= probe.slope <= -0.7
    results.append(ok)
    print(f"bias decay slope: measured {probe.slope:.3g} in [-1.3, -0.7]: "
          f"{'PASS' if ok else 'FAIL'}")


def _verify_epps(seed: int, results: List[bool]) -> None:
    K, L = 40.0, 32000
    du = 2 * K / L
    nodes = -K + np.arange(L) * du
    weights = (2 * np.pi) ** -0.5 * np.exp(-0.5 * nodes**2) * du
    nodes.setflags(write=False)
    weights.setflags(write=False)
    grid = FrequencyGrid(k_max=K, n_nodes=L, alpha=0.5, nodes=nodes, weights=weights)
    phi_star = np.exp(-0.5 * nodes**2)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for rep in range(100):
        M = int(rng.integers(3, 200))
        samples = [rng.standard_normal(M), rng.uniform(-3, 3, M),
                   rng.standard_normal(M) * 2 + 1,
                   rng.exponential(1.0, M) - 1.0][rep % 4]
        quad = float(np.sum(weights * np.abs(empirical_cf(samples, grid).values
                                             - phi_star) ** 2))
        worst = max(worst, abs(epps_pulley_loss(samples) - quad))
    _check("epps quadrature gap", worst, 1e-6, results)


def _verify_bernoulli(seed: int, results: List[bool]) -> None:
    grid = build_uniform_grid(40.0, 16000, 0.05)
    worst = 0.0
    M = 64
    for p in (0.0, 0.25, 0.5, 1.0):
        ones = int(round(M * p))
        samples = np.concatenate([np.ones(ones), np.zeros(M - ones)])
        table = empirical_cf(samples, grid)
        target = target_cf(TargetSpec.dirac(1.0), grid)
        loss = float(np.sum(grid.weights * np.abs(table.values - target.values) ** 2))
        worst = max(worst, abs(loss - bernoulli_loss(p, grid)))
    _check("bernoulli identity err", worst, 1e-10, results)


def _verify_oracle_roundtrip(seed: int, results: List[bool]) -> None:
    grid = build_uniform_grid(16.0, 8001, 0.05)
    problem = JacobiAngerProblem(s0=0.0, sigma=0.1, V=1.0, k_modes=16, grid=grid)
    table = target_cf(TargetSpec.epanechnikov(), grid)
    solution = solve_modes(problem, table)
    _check("jacobi-anger residual", solution.residual_norm, 1e-3, results)
    _check("jacobi-anger odd modes", solution.odd_mode_max, 1e-8, results)
    density = reconstruct_density(solution, (-np.pi, np.pi), n_points=4001)
    M = 20000
    draws = sample_action_density(density, RandomStream(seed, 3), M)
    psi_hat = estimate_modes(draws, problem.k_modes)
    err = float(np.max(np.abs(psi_hat - solution.psi)))
    _check("mode roundtrip err", err, 3.0 / np.sqrt(M), results)

    m, sigma2, N = 1.0, 1.5, 8
    ns = np.arange(-N, N + 1)
    mu = np.exp(1j * ns * m - 0.5 * sigma2 * ns**2)
    nu = torus_deconvolve(mu, s0=0.0, sigma=1.0)
    back = nu * np.exp(-0.5 * ns.astype(float) ** 2)
    _check("torus re-convolution err", float(np.max(np.abs(back - mu))),
           1e-12, results)


def cmd_verify(suite: str, seed: Optional[int] = None,
               threads: Optional[int] = None, scale: str = "desk") -> int:
    suites: Dict[str, Callable[[int, List[bool]], None]] = {
        "gradients": _verify_gradients,
        "bias": _verify_bias,
        "epps": _verify_epps,
        "bernoulli": _verify_bernoulli,
        "oracle-roundtrip": _verify_oracle_roundtrip,
    }
    if suite != "all" and suite not in suites:
        print(f"unknown suite {suite!r}; choose from "
              f"{', '.join([*suites, 'all'])}", file=sys.stderr)
        return EXIT_CONFIG
    seed = 11 if seed is None else seed
    results: List[bool] = []
    for name, fn in suites.items():
        if suite in ("all", name):
            fn(seed, results)
    return EXIT_OK if all(results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# report


def _read_csv(path: str):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh if line.strip()]
    return header, rows


def cmd_report(run_dir: str, seed: Optional[int] = None,
               threads: Optional[int] = None, scale: str = "desk") -> int:
    metrics_path = os.path.join(run_dir, "metrics.csv")
    cf_path = os.path.join(run_dir, "cf.csv")
    if not (os.path.isfile(metrics_path) and os.path.isfile(cf_path)):
        print(f"{run_dir} is missing metrics.csv or cf.csv", file=sys.stderr)
        return EXIT_CONFIG

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    _, rows = _read_csv(metrics_path)
    iters = [int(r[0]) for r in rows]
    losses = [float(r[1]) for r in rows]

    restarts = None
    manifest_path = os.path.join(run_dir, "manifest.json")
    if os.path.isfile(manifest_path):
        with open(manifest_path) as fh:
            restarts = json.load(fh).get("restarts")

    w1 = None
    t_path = os.path.join(run_dir, "samples_target.txt")
    l_path = os.path.join(run_dir, "samples_learned.txt")
    if os.path.isfile(t_path) and os.path.isfile(l_path):
        target = np.loadtxt(t_path, ndmin=1)
        learned = np.loadtxt(l_path, ndmin=1)
        n = min(len(target), len(learned))
        w1 = wasserstein1(target[:n], learned[:n])

        fig, ax = plt.subplots(figsize=(7, 4.5))
        lo = min(target.min(), learned.min())
        hi = max(target.max(), learned.max())
        bins = np.linspace(lo, hi if hi > lo else lo + 1.0, _HIST_BINS + 1)
        ax.hist(target, bins=bins, alpha=0.55, density=True, label="target")
        ax.hist(learned, bins=bins, alpha=0.55, density=True, label="learned")
        ax.set_xlabel("terminal cumulative reward")
        ax.set_ylabel("density")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(run_dir, "hist.png"), dpi=120)
        plt.close(fig)

    _, cf_rows = _read_csv(cf_path)
    u = np.array([float(r[0]) for r in cf_rows])
    t_re = np.array([float(r[1]) for r in cf_rows])
    t_im = np.array([float(r[2]) for r in cf_rows])
    l_re = np.array([float(r[3]) for r in cf_rows])
    l_im = np.array([float(r[4]) for r in cf_rows])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(u, t_re, label="target")
    axes[0].plot(u, l_re, "--", label="learned")
    axes[0].set_title("Re CF")
    axes[1].plot(u, t_im, label="target")
    axes[1].plot(u, l_im, "--", label="learned")
    axes[1].set_title("Im CF")
    for ax in axes:
        ax.set_xlabel("u")
        ax.legend()
    fig.tight_layout()
    fig.savefig(os.path.join(run_dir, "cf.png"), dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.semilogy(iters, losses)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    fig.tight_layout()
    fig.savefig(os.path.join(run_dir, "loss.png"), dpi=120)
    plt.close(fig)

    summary = {"final_loss": losses[-1], "W1": w1,
               "iters": len(iters), "restarts": restarts}
    _atomic_write(os.path.join(run_dir, "summary.json"),
                  json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"summary.json written: final_loss {losses[-1]:.6g}, "
          f"W1 {w1 if w1 is None else f'{w1:.6g}'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="distmatch",
        description="Train and audit distribution-matching policies.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "run the policy-gradient loop from a JSON config or preset",
        "oracle": "solve the analytic action-density problem from a config",
        "verify": "run a named invariant suite "
                  "(gradients|bias|epps|bernoulli|oracle-roundtrip|all)",
        "report": "summarize a finished run directory and render figures",
    }
    for name in ("train", "oracle", "verify", "report"):
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("path", help="config file, preset name, suite, or run dir")
        p.add_argument("--seed", type=int, default=None,
                       help="override the training/verification seed")
        p.add_argument("--threads", type=int, default=None,
                       help="simulation worker threads "
                            "(default: DISTMATCH_THREADS or 1)")
        p.add_argument("--scale", choices=("desk", "paper"), default="desk",
                       help="apply the preset's scale overrides")
    args = parser.parse_args(argv)

    threads = args.threads
    if threads is None:
        env_threads = os.environ.get("DISTMATCH_THREADS")
        if env_threads is not None:
            try:
                threads = int(env_threads)
            except ValueError:
                print(f"DISTMATCH_THREADS={env_threads!r} is not an integer",
                      file=sys.stderr)
                return EXIT_CONFIG

    dispatch = {"train": cmd_train, "oracle": cmd_oracle,
                "verify": cmd_verify, "report": cmd_report}
    try:
        return dispatch[args.command](args.path, seed=args.seed,
                                      threads=threads, scale=args.scale)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleTargetError as exc:
        print(f"infeasible deconvolution target: modes {list(exc.modes)} "
              "would need amplification beyond the noise level", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DistmatchError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
