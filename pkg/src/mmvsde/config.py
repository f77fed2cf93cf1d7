"""Scenario files: TOML with dotted keys, validated into catalog objects.

A scenario names the operator, kernel, Lévy measure, initial law, scheme
and an optional study. Unknown keys and unknown catalog ids are rejected
with a message that lists the valid choices.
"""

import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .coeff import CoefficientKernel, Diffusion, Drift, Jump, modulus
from .errors import ConfigurationError, InvalidInputError
from .monotone import BOUNDARY_TOL, ConvexDomain, MonotoneOperator
from .noise import LevyConfig
from .solver import InitialLaw, SchemeConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

OPERATOR_KINDS = ("zero", "normal_cone", "linear", "sum")
DOMAIN_KINDS = ("whole_space", "box", "ball", "halfspace_intersection")
DRIFT_KINDS = ("zero", "linear", "attraction", "osgood")
DIFFUSION_KINDS = ("zero", "constant", "linear")
JUMP_KINDS = ("zero", "affine")
STUDY_KINDS = ("simulate", "picard", "cascade", "coupled", "diagnose")
CHECKS = ("pair_in_A", "confinement", "telescoped", "k_continuity", "moment", "cepa", "aldous", "martingale")
ASSERTION_CHECKS = ("pair_in_A", "confinement", "telescoped", "k_continuity")

_ALLOWED = {
    "": {"name", "dim", "seeds", "description", "operator", "kernel", "levy", "initial", "scheme", "study",
         "output"},
    "operator": {"kind", "matrix", "domain"},
    "operator.domain": {"kind", "lower", "upper", "center", "radius", "normals", "offsets", "witness"},
    "kernel": {"drift", "diffusion", "jump", "growth", "modulus_rho", "modulus_phi", "modulus_L2", "truncation"},
    "kernel.drift": {"kind", "B1", "B2", "c", "kappa"},
    "kernel.diffusion": {"kind", "S0", "alpha", "beta"},
    "kernel.jump": {"kind", "c", "a", "b"},
    "levy": {"kind", "atoms", "masses", "r_min", "r_max", "mass", "mark_dim", "small_cutoff", "compensated"},
    "initial": {"kind", "point", "lower", "upper", "mean", "std"},
    "scheme": {"h", "particles", "law_mode", "enforce_H4", "record", "horizon"},
    "study": {"kind", "max_iters", "w2_tol", "w2_method", "levels", "x0_a", "x0_b", "checks", "pairs",
              "pair_radius", "tol", "rho", "deltas", "a0", "time_pairs", "generator_form"},
    "output": {"trajectory_particles", "time_stride"},
}


def _check_keys(table, path):
    allowed = _ALLOWED[path]
    for key in table:
        if key not in allowed:
            where = f"[{path}]" if path else "top level"
            raise ConfigurationError(f"unknown key {key!r} at {where}; valid keys: {', '.join(sorted(allowed))}")
    for key, val in table.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(val, dict) and sub in _ALLOWED:
            _check_keys(val, sub)


def _choice(value, valid, what):
    if value not in valid:
        raise ConfigurationError(f"unknown {what} {value!r}; valid ids: {', '.join(valid)}")
    return value


def _req(table, key, what):
    if key not in table:
        raise ConfigurationError(f"missing required key {what}.{key}")
    return table[key]


def _vec(v, d, what):
    a = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if a.size == 1 and d > 1:
        a = np.full(d, float(a[0]))
    if a.shape != (d,):
        raise ConfigurationError(f"{what} must have {d} components")
    return a


def _mat(v, d, what):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim == 0:
        a = float(a) * np.eye(d)
    elif a.ndim == 1 and a.size == d:
        a = np.diag(a)
    if a.shape != (d, d):
        raise ConfigurationError(f"{what} must be a {d}x{d} matrix, a diagonal or a scalar")
    return a


def build_domain(tab, d):
    kind = _choice(tab.get("kind", "whole_space"), DOMAIN_KINDS, "domain kind")
    try:
        if kind == "whole_space":
            return ConvexDomain.whole_space(d)
        if kind == "box":
            return ConvexDomain.box(_vec(_req(tab, "lower", "operator.domain"), d, "lower"),
                                    _vec(_req(tab, "upper", "operator.domain"), d, "upper"))
        if kind == "ball":
            return ConvexDomain.ball(_vec(tab.get("center", 0.0), d, "center"),
                                     _req(tab, "radius", "operator.domain"))
        return ConvexDomain.halfspaces(_req(tab, "normals", "operator.domain"),
                                       _req(tab, "offsets", "operator.domain"),
                                       _vec(_req(tab, "witness", "operator.domain"), d, "witness"))
    except InvalidInputError as exc:
        raise ConfigurationError(f"invalid domain: {exc}") from exc


def build_operator(tab, d):
    kind = _choice(tab.get("kind", "zero"), OPERATOR_KINDS, "operator kind")
    try:
        if kind == "zero":
            return MonotoneOperator.zero(d)
        if kind == "linear":
            return MonotoneOperator.linear(_mat(_req(tab, "matrix", "operator"), d, "operator.matrix"))
        domain = build_domain(_req(tab, "domain", "operator"), d)
        if kind == "normal_cone":
            return MonotoneOperator.normal_cone(domain)
        return MonotoneOperator.sum(domain, _mat(_req(tab, "matrix", "operator"), d, "operator.matrix"))
    except InvalidInputError as exc:
        raise ConfigurationError(f"invalid operator: {exc}") from exc


def build_kernel(tab, d):
    dr = tab.get("drift", {"kind": "zero"})
    kind = _choice(dr.get("kind", "zero"), DRIFT_KINDS, "drift kind")
    if kind == "zero":
        drift = Drift.zero(d)
    elif kind == "linear":
        drift = Drift.linear(_mat(dr.get("B1", 0.0), d, "B1"), _mat(dr.get("B2", 0.0), d, "B2"),
                             _vec(dr.get("c", 0.0), d, "c"))
    elif kind == "attraction":
        drift = Drift.attraction(d, float(_req(dr, "kappa", "kernel.drift")))
    else:
        drift = Drift.osgood(d, float(dr.get("kappa", 0.0)))
    df = tab.get("diffusion", {"kind": "zero"})
    kind = _choice(df.get("kind", "zero"), DIFFUSION_KINDS, "diffusion kind")
    if kind == "zero":
        diffusion = Diffusion.zero(d)
    elif kind == "constant":
        diffusion = Diffusion.constant(_mat(_req(df, "S0", "kernel.diffusion"), d, "S0"))
    else:
        diffusion = Diffusion.linear(_mat(df.get("S0", 0.0), d, "S0"), float(df.get("alpha", 0.0)),
                                     float(df.get("beta", 0.0)))
    jp = tab.get("jump", {"kind": "zero"})
    kind = _choice(jp.get("kind", "zero"), JUMP_KINDS, "jump kind")
    if kind == "zero":
        jump = Jump.zero(d)
    else:
        jump = Jump.affine(_vec(jp.get("c", 0.0), d, "jump.c"), float(jp.get("a", 0.0)), float(jp.get("b", 0.0)))
    rho = _choice(tab.get("modulus_rho", "linear"), ("linear", "log_osgood"), "modulus")
    phi = _choice(tab.get("modulus_phi", "linear"), ("linear", "log_osgood"), "modulus")
    modulus(rho, 0.0)
    try:
        return CoefficientKernel(d, drift, diffusion, jump, growth=float(tab.get("growth", 1.0)),
                                 modulus_rho=rho, modulus_phi=phi, modulus_L2=tab.get("modulus_L2"),
                                 truncation=tab.get("truncation"))
    except InvalidInputError as exc:
        raise ConfigurationError(f"invalid kernel: {exc}") from exc


def build_levy(tab, d):
    kind = _choice(tab.get("kind", "none"), ("none", "discrete", "annulus"), "levy kind")
    common = {"small_cutoff": float(tab.get("small_cutoff", 1.0)), "compensated": bool(tab.get("compensated", True))}
    if kind == "none":
        return LevyConfig.none()
    if kind == "discrete":
        atoms = np.asarray(_req(tab, "atoms", "levy"), dtype=np.float64)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        return LevyConfig.discrete(atoms, _req(tab, "masses", "levy"), **common)
    return LevyConfig.annulus(_req(tab, "r_min", "levy"), _req(tab, "r_max", "levy"), _req(tab, "mass", "levy"),
                              mark_dim=int(tab.get("mark_dim", 1)), **common)


def build_initial(tab, d):
    kind = tab.get("kind", "point")
    _choice(kind, ("point", "uniform_box", "gaussian"), "initial law")
    if kind == "point":
        return InitialLaw("point", point=_vec(tab.get("point", 0.0), d, "initial.point"))
    if kind == "uniform_box":
        return InitialLaw("uniform_box", lower=_vec(_req(tab, "lower", "initial"), d, "initial.lower"),
                          upper=_vec(_req(tab, "upper", "initial"), d, "initial.upper"))
    return InitialLaw("gaussian", mean=_vec(tab.get("mean", 0.0), d, "initial.mean"), std=float(tab.get("std", 1.0)))


def _positive_int(v, what):
    if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or v < 1:
        raise ConfigurationError(f"{what} must be a positive integer (got {v!r})")
    return int(v)


@dataclass
class Scenario:
    name: str
    dim: int
    operator: MonotoneOperator
    kernel: CoefficientKernel
    levy: LevyConfig
    scheme: SchemeConfig
    seeds: list
    study: dict
    output: dict
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def config_hash(self):
        return config_hash(self.raw)


def config_hash(raw):
    text = json.dumps(_canonical(raw), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _canonical(obj):
    # floats that JSON cannot carry (inf) become strings so the hash is stable
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def parse_text(text, source="<string>"):
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{source}: cannot parse config: {exc}") from exc


def builtin_names():
    return sorted(p.name[:-4] for p in resources.files("mmvsde.scenarios").iterdir() if p.name.endswith(".cfg"))


def resolve_path(path):
    """A file path, or the name of a built-in scenario (with or without ``.cfg``)."""
    p = Path(path)
    if p.is_file():
        return p
    stem = p.name[:-4] if p.name.endswith(".cfg") else p.name
    if stem in builtin_names() and p.parent == Path("."):
        return Path(str(resources.files("mmvsde.scenarios").joinpath(stem + ".cfg")))
    raise ConfigurationError(f"config {path} not found (built-in scenarios: {', '.join(builtin_names())})")


def load_raw(path):
    p = resolve_path(path)
    return parse_text(p.read_text(), str(path))


def apply_overrides(raw, seed=None, particles=None, step=None, levels=None, study=None):
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seeds"] = [int(seed)]
    scheme = raw.setdefault("scheme", {})
    if particles is not None:
        scheme["particles"] = int(particles)
    if step is not None:
        scheme["h"] = float(step)
    st = raw.setdefault("study", {})
    if study is not None:
        st["kind"] = study
    if levels is not None:
        st["levels"] = [int(v) for v in levels]
    return raw


def build(raw, workers=1, backend=None):
    """Validate a parsed scenario dict and build the catalog objects."""
    _check_keys(raw, "")
    name = str(raw.get("name", "scenario"))
    d = _positive_int(_req(raw, "dim", "scenario"), "dim")
    operator = build_operator(raw.get("operator", {"kind": "zero"}), d)
    kernel = build_kernel(raw.get("kernel", {}), d)
    levy = build_levy(raw.get("levy", {}), d)
    if levy.enabled and levy.mark_dim not in (1, d):
        raise ConfigurationError("levy.mark_dim must be 1 or equal to dim")
    if levy.enabled and not levy.total_mass > 0:
        raise ConfigurationError("levy measure has zero mass while jumps are enabled")
    initial = build_initial(raw.get("initial", {}), d)
    sc = _req(raw, "scheme", "scenario")
    particles = _positive_int(_req(sc, "particles", "scheme"), "scheme.particles (N)")
    h = float(_req(sc, "h", "scheme"))
    if not h > 0:
        raise ConfigurationError(f"scheme.h must be > 0 (got {h})")
    scheme = SchemeConfig(h, particles, _choice(sc.get("law_mode", "interacting"), ("interacting", "frozen"),
                                                 "law_mode"),
                          initial, bool(sc.get("enforce_H4", True)), sc.get("record", "full"), int(workers),
                          float(sc.get("horizon", 1.0)), backend)
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigurationError("seeds must be a nonempty list of nonnegative integers")
    study = dict(raw.get("study", {}))
    study["kind"] = _choice(study.get("kind", "simulate"), STUDY_KINDS, "study kind")
    if study["kind"] == "diagnose":
        for c in study.get("checks", CHECKS):
            _choice(c, CHECKS, "diagnostic check")
    if study["kind"] == "cascade":
        lv = study.get("levels", [2, 4, 8, 16])
        if len(lv) < 2 or any(b <= a for a, b in zip(lv, lv[1:])) or lv[0] < 1:
            raise ConfigurationError("study.levels must be strictly increasing positive integers")
    if study["kind"] == "coupled":
        for key in ("x0_a", "x0_b"):
            _vec(_req(study, key, "study"), d, f"study.{key}")
    if scheme.law_mode == "frozen":
        raise ConfigurationError("law_mode = frozen needs an external law flow; use the picard study instead")
    sc_obj = Scenario(name, d, operator, kernel, levy, scheme, seeds, study, dict(raw.get("output", {})),
                      _canonical(raw))
    if levy.enabled and scheme.enforce_H4:
        precheck_h4(sc_obj)
    return sc_obj


def precheck_h4(sc, samples=256):
    """Check ``x + G(x, y, z)`` stays in the closed domain on a sample grid of states and marks."""
    op, kernel, levy = sc.operator, sc.kernel, sc.levy
    if op.kind == "zero" or kernel.jump.kind == "zero":
        return
    rng = np.random.default_rng(0)
    dom = op.domain
    center = dom.interior_point()
    xs = dom.project(center + rng.normal(scale=3.0, size=(samples, sc.dim)))
    if levy.kind == "discrete":
        marks = levy.atoms
    else:
        nodes, _ = levy.quadrature()
        r = np.linalg.norm(nodes, axis=1)
        marks = nodes[(r == r.max()) | (r == r.min())]
    for z in marks:
        post = xs + kernel.jump_amplitude(xs, xs) * z[None, :]
        bad = ~dom.contains(post, BOUNDARY_TOL)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise ConfigurationError(
                f"(H4) pre-check failed: x={xs[i].tolist()}, z={z.tolist()} gives x+G={post[i].tolist()} "
                "outside the closed domain")


def load(path, workers=1, backend=None, **overrides):
    return build(apply_overrides(load_raw(path), **overrides), workers=workers, backend=backend)
