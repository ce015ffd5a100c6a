"""Config-driven command line front end.

Usage::

    liouvgap rbm run.toml [--exact-summation] [--set optimizer.max_iters=50]
    liouvgap ed run.toml
    liouvgap run run.toml          # mode taken from the config

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import tomli
import tomli_w

from . import __version__
from . import analytic, exact
from .errors import ConfigError, LiouvGapError
from .model import LindbladModel, build_chain, build_square, build_xyz_model, vectorize
from .optimizer import BETA_JOINT, BETA_OFF, BETA_TWO_PHASE, RunError, RunOptions, gap_estimate, run
from .rbm import O_VARIANTS, AncillaryState, TrialState, init_parameters, make_trial, refresh_alpha, save_checkpoint
from .sampler import MAX_EXACT_SITES, ChainConfig, estimate_trace

log = logging.getLogger("liouvgap")

MODES = ("rbm", "ed", "bethe", "meanfield", "compare")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


# ---------------------------------------------------------------------------
# config


@dataclass
class ModelBlock:
    geometry: str = "chain"
    boundary: str = ""  # required
    n_sites: int = 0
    lx: int = 0
    ly: int = 0
    jx: float = 1.0
    jy: float = 1.0
    jz: float = 1.0
    gamma: float = 1.0


@dataclass
class RbmBlock:
    hidden_ratio: float = 3.0
    n_hidden: int = 0  # overrides hidden_ratio when > 0
    init_scale: float = 0.01
    ancillary: str = "all-down"
    o_variant: str = "chain-rule"


@dataclass
class SamplerBlock:
    seed: int = -1  # required for rbm and compare
    n_samples: int = 1000
    n_chains: int = 1
    burn_in: float = 0.05
    max_flips: int = 4
    trace_samples: int = 4096
    exact_summation: bool = False
    persistent: bool = False  # each iteration's chains continue from the previous ones


@dataclass
class OptimizerBlock:
    max_iters: int = 200
    beta: float = 0.0
    beta_mode: str = BETA_TWO_PHASE  # used only when beta > 0
    window: int = 20
    tol: float = 1e-3
    min_iters: int = 40


@dataclass
class OutputBlock:
    dir: str = "out"


@dataclass
class ExperimentConfig:
    mode: str = "ed"
    model: ModelBlock = field(default_factory=ModelBlock)
    rbm: RbmBlock = field(default_factory=RbmBlock)
    sampler: SamplerBlock = field(default_factory=SamplerBlock)
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    @property
    def n_sites(self) -> int:
        m = self.model
        return m.n_sites if m.geometry == "chain" else m.lx * m.ly

    @property
    def n_hidden(self) -> int:
        if self.rbm.n_hidden > 0:
            return self.rbm.n_hidden
        # ratio of hidden units to the 2N visible units of the bi-base lattice
        return max(1, int(round(self.rbm.hidden_ratio * 2 * self.n_sites)))


BLOCKS = {"model": ModelBlock, "rbm": RbmBlock, "sampler": SamplerBlock, "optimizer": OptimizerBlock, "output": OutputBlock}
REQUIRED = {
    "rbm": ("model", "sampler"),
    "compare": ("model", "sampler"),
    "ed": ("model",),
    "bethe": ("model",),
    "meanfield": ("model",),
}


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    current = None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        head = re.match(r"^\[([^\]]+)\]", line)
        if head:
            current = head.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", line):
            return no
    return None


def _coerce(value, typ, key, line):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key, line)
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key, line)
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key, line)
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", key, line)
    return value


def _field_types(cls):
    hints = {"int": int, "float": float, "bool": bool, "str": str}
    return {f.name: hints[f.type] for f in dataclasses.fields(cls)}


def parse_config(text: str, mode: str | None = None, overrides=()) -> ExperimentConfig:
    """Strict TOML parsing: unknown keys, missing required keys and type errors raise.

    ``overrides`` are ``section.key=value`` strings applied on top of the file;
    their values are read as TOML scalars, falling back to a bare string.
    """
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed TOML: {exc}", None, line) from exc
    for item in overrides:
        _apply_override(raw, item)
    cfg = ExperimentConfig()
    file_mode = raw.pop("mode", None)
    if file_mode is not None and not isinstance(file_mode, str):
        raise ConfigError("mode must be a string", "mode", _line_of(text, None, "mode"))
    cfg.mode = mode or file_mode or ""
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}", "mode", _line_of(text, None, "mode"))
    for name, body in raw.items():
        if name not in BLOCKS:
            raise ConfigError("unknown key or section", name, _line_of(text, name, None) or _line_of(text, None, name))
        if not isinstance(body, dict):
            raise ConfigError("expected a section", name, _line_of(text, None, name))
        types = _field_types(BLOCKS[name])
        block = getattr(cfg, name)
        for key, value in body.items():
            line = _line_of(text, name, key)
            if key not in types:
                raise ConfigError("unknown key", f"{name}.{key}", line)
            setattr(block, key, _coerce(value, types[key], f"{name}.{key}", line))
    for name in REQUIRED[cfg.mode]:
        if name not in raw:
            raise ConfigError(f"section required for mode {cfg.mode!r}", name, None)
    model = raw.get("model", {})
    if "boundary" not in model:
        raise ConfigError("missing required key", "model.boundary", _line_of(text, "model", None))
    if cfg.mode in ("rbm", "compare") and "seed" not in raw.get("sampler", {}):
        raise ConfigError("missing required key (seeds are never drawn from entropy)", "sampler.seed", _line_of(text, "sampler", None))
    validate(cfg, text)
    return cfg


def validate(cfg: ExperimentConfig, text: str = "") -> None:
    def err(msg, key):
        section, _, name = key.partition(".")
        raise ConfigError(msg, key, _line_of(text, section, name) if text else None)

    m = cfg.model
    if m.geometry not in ("chain", "square"):
        err("geometry must be 'chain' or 'square'", "model.geometry")
    if m.boundary not in ("periodic", "open"):
        err("boundary must be 'periodic' or 'open'", "model.boundary")
    if m.geometry == "chain" and m.n_sites < 2:
        err("chain needs n_sites >= 2", "model.n_sites")
    if m.geometry == "square" and (m.lx < 2 or m.ly < 2):
        err("square lattice needs lx, ly >= 2", "model.lx")
    if not m.gamma >= 0:
        err("gamma must be >= 0", "model.gamma")
    r = cfg.rbm
    if r.ancillary not in ("identity", "all-down") and not r.ancillary.startswith("product:"):
        err("ancillary must be 'identity', 'all-down' or 'product:...'", "rbm.ancillary")
    if r.o_variant not in O_VARIANTS:
        err(f"o_variant must be one of {O_VARIANTS}", "rbm.o_variant")
    if not r.init_scale > 0:
        err("init_scale must be positive", "rbm.init_scale")
    if r.n_hidden <= 0 and not r.hidden_ratio > 0:
        err("hidden_ratio must be positive", "rbm.hidden_ratio")
    if r.n_hidden <= 0 and not 3 <= r.hidden_ratio <= 6:
        log.warning("hidden ratio %g is outside the usual range 3..6", r.hidden_ratio)
    s = cfg.sampler
    if cfg.mode in ("rbm", "compare") and s.seed < 0:
        err("seed must be a non-negative integer", "sampler.seed")
    if s.n_samples < 1 or s.n_chains < 1:
        err("n_samples and n_chains must be positive", "sampler.n_samples")
    if not 0 <= s.burn_in < 1:
        err("burn_in must lie in [0, 1)", "sampler.burn_in")
    if not 1 <= s.max_flips <= 4:
        err("max_flips must lie in 1..4", "sampler.max_flips")
    o = cfg.optimizer
    if o.beta_mode not in (BETA_OFF, BETA_JOINT, BETA_TWO_PHASE):
        err("beta_mode must be 'off', 'joint' or 'two-phase'", "optimizer.beta_mode")
    if o.beta < 0:
        err("beta must be >= 0", "optimizer.beta")
    if o.max_iters < 1 or o.window < 1:
        err("max_iters and window must be positive", "optimizer.max_iters")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def format_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()


# ---------------------------------------------------------------------------
# runners


def build_model(cfg: ExperimentConfig) -> LindbladModel:
    m = cfg.model
    periodic = m.boundary == "periodic"
    lattice = build_chain(m.n_sites, periodic) if m.geometry == "chain" else build_square(m.lx, m.ly, periodic)
    return build_xyz_model(lattice, m.jx, m.jy, m.jz, m.gamma)


def chain_config(cfg: ExperimentConfig) -> ChainConfig:
    s = cfg.sampler
    return ChainConfig(
        n_samples=s.n_samples,
        burn_in=s.burn_in,
        n_chains=s.n_chains,
        seed=s.seed,
        max_flips=s.max_flips,
        exact=s.exact_summation,
        trace_samples=s.trace_samples,
    )


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _cplx(z) -> list[float]:
    z = complex(z)
    return [z.real, z.imag]


def write_manifest(cfg: ExperimentConfig, out: Path) -> None:
    _write_json(
        out / "manifest.json",
        {
            "config_hash": config_hash(cfg),
            "config": config_to_dict(cfg),
            "seed": cfg.sampler.seed,
            "versions": {
                "liouvgap": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
        },
    )
    (out / "config.toml").write_text(format_config(cfg))


def run_rbm(cfg: ExperimentConfig, out: Path) -> dict:
    model = build_model(cfg)
    liouv = vectorize(model)
    n, m = model.n_sites, cfg.n_hidden
    chain = chain_config(cfg)
    if chain.exact and n > MAX_EXACT_SITES:
        raise ConfigError(f"exact summation supports N <= {MAX_EXACT_SITES}", "sampler.exact_summation", None)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.sampler.seed, spawn_key=(2**31 + 1,)))
    rbm = init_parameters(n, m, cfg.rbm.init_scale, rng)
    anc = AncillaryState.parse(cfg.rbm.ancillary, n)
    if 2**n <= chain.trace_samples:
        trial = make_trial(rbm, anc, cfg.rbm.o_variant)
    else:
        est = estimate_trace(rbm, chain.trace_samples, rng)
        trial = refresh_alpha(TrialState(rbm, anc, o_variant=cfg.rbm.o_variant), est.value, est.stderr)
    o = cfg.optimizer
    opts = RunOptions(
        max_iters=o.max_iters, window=o.window, tol=o.tol, min_iters=o.min_iters,
        beta=o.beta, beta_mode=o.beta_mode, persistent=cfg.sampler.persistent,
    )
    t0 = time.time()
    try:
        trial, trace = run(trial, liouv, chain, opts)
    except RunError as exc:
        (out / "trace.jsonl").write_text(exc.trace.to_jsonl())
        save_checkpoint(out / "checkpoint.txt", exc.trial, len(exc.trace))
        raise
    (out / "trace.jsonl").write_text(trace.to_jsonl())
    save_checkpoint(out / "checkpoint.txt", trial, len(trace))
    gap, err = gap_estimate(trace, o.window)
    summary = {
        "gap": gap,
        "stderr": err,
        "iterations": len(trace),
        "converged": trace.converged,
        "phase_switch": trace.phase_switch,
        "final_l": [float(trace.re_l[-1]), float(trace.im_l[-1])],
        "final_im_mean": float(trace.im_l[-o.window:].mean()),
        "wall_time": time.time() - t0,
    }
    _write_json(out / "summary.json", summary)
    return summary


def run_ed(cfg: ExperimentConfig, out: Path) -> dict:
    model = build_model(cfg)
    spec = exact.full_spectrum(exact.dense_liouvillian(model))
    with open(out / "spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["re", "im", "degeneracy"])
        for row in exact.spectrum_records(spec.eigenvalues, spec.tol):
            w.writerow([repr(float(row[0])), repr(float(row[1])), row[2]])
    first = spec.eigenvalues[spec.first_decay]
    summary = {
        "gap": spec.gap,
        "case": exact.classify_decay_modes(spec),
        "first_decay": [_cplx(z) for z in first],
        "min_abs_imag_first_decay": float(np.min(np.abs(first.imag))),
    }
    _write_json(out / "summary.json", summary)
    return summary


def run_bethe(cfg: ExperimentConfig, out: Path) -> dict:
    m = cfg.model
    if m.geometry != "chain" or m.boundary != "periodic":
        raise LiouvGapError("the Bethe solver covers periodic chains only")
    if m.jx != m.jy:
        raise LiouvGapError("the Bethe solver needs Jx == Jy")
    j = m.jx / 2
    m1 = analytic.solve_bethe_m1(m.n_sites)
    result = {
        "convention": "E = -gamma m / 2 - i sum(2 J cos k - Jz) for the right system; E_g = -i Jz N / 4 excluded",
        "J": j,
        "E_g": _cplx(analytic.reference_offset(m.n_sites, m.jz)),
        "m1": [{"k": float(k), "energy": _cplx(analytic.bethe_energy([k], 1, j, m.jz, m.gamma))} for k in m1],
    }
    if m.n_sites >= 3:
        rep = analytic.solve_bethe_m2(m.n_sites, j, m.jz)
        result["m2"] = [
            {
                "k": [_cplx(k) for k in s.momenta],
                "energy": _cplx(analytic.bethe_energy(s.momenta, 2, j, m.jz, m.gamma)),
                "residual": s.residual,
            }
            for s in rep.solutions
        ]
        result["m2_expected"] = rep.expected
        result["m2_missing"] = rep.missing
    _write_json(out / "bethe.json", result)
    return result


def run_meanfield(cfg: ExperimentConfig, out: Path) -> dict:
    m = cfg.model
    res = analytic.meanfield_steady_state(m.jx, m.jy, m.jz, m.gamma)
    result = dataclasses.asdict(res)
    result["residual"] = float(np.max(np.abs(analytic.meanfield_rates((res.sx, res.sy, res.sz), m.jx, m.jy, m.jz, m.gamma))))
    _write_json(out / "meanfield.json", result)
    return result


def run_compare(cfg: ExperimentConfig, out: Path) -> dict:
    rbm = run_rbm(cfg, out)
    model = build_model(cfg)
    if model.n_sites <= exact.MAX_DENSE_SITES:
        oracle = "ed"
        spec = exact.full_spectrum(exact.dense_liouvillian(model))
        ref = spec.gap
    elif model.is_xxz:
        oracle = "analytic"
        ref = analytic.xxz_gap(model.gamma)
    else:
        raise LiouvGapError("no oracle applies: N too large for ED and the model is not XXZ")
    report = {
        "rbm_gap": rbm["gap"],
        "rbm_stderr": rbm["stderr"],
        "exact_gap": ref,
        "oracle": oracle,
        "eps_rel": abs((rbm["gap"] - ref) / ref) if ref != 0 else math.inf,
        "iterations": rbm["iterations"],
    }
    _write_json(out / "report.json", report)
    return report


RUNNERS = {"rbm": run_rbm, "ed": run_ed, "bethe": run_bethe, "meanfield": run_meanfield, "compare": run_compare}


def run_experiment(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(cfg, out)
    return RUNNERS[cfg.mode](cfg, out)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liouvgap", description="Liouvillian gap solver")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run",) + MODES:
        p = sub.add_parser(name, help="mode from the config" if name == "run" else f"{name} mode")
        p.add_argument("config", help="TOML config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key")
        p.add_argument("--exact-summation", action="store_true", help="replace sampling by exact summation (N <= 6)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.seed is not None:
            args.set.append(f"sampler.seed={args.seed}")
        if args.exact_summation:
            args.set.append("sampler.exact_summation=true")
        if args.out:
            args.set.append(f"output.dir={json.dumps(args.out)}")
        cfg = parse_config(text, None if args.command == "run" else args.command, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LiouvGapError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _apply_override(raw: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    section, _, name = key.strip().partition(".")
    if not sep or not section or not name:
        raise ConfigError("override must look like section.key=value", key.strip(), None)
    try:
        parsed = tomli.loads(f"v = {value.strip()}")["v"]
    except tomli.TOMLDecodeError:
        parsed = value.strip()
    body = raw.setdefault(section, {})
    if not isinstance(body, dict):
        raise ConfigError("expected a section", section, None)
    body[name] = parsed


if __name__ == "__main__":
    sys.exit(main())
