"""Command-line driver: density cache, response validation, cone and decay
experiments, parameter sweeps.

Configuration precedence is flags > config file (--config, JSON) >
defaults.  Every output file carries the schema version and a hash of the
resolved configuration, and no timestamps, so identical invocations produce
bit-identical files (density results come from the cache on reruns).

Exit codes: 0 ok, 1 usage/domain error, 2 numerical gate failure or
non-convergence.
"""

import argparse
import concurrent.futures
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from .maps import MapParams
from .grid import build_mesh
from .transfer import compute_density
from .cache import (
    SCHEMA_VERSION,
    DensityCache,
    cache_key,
    density_record_to_dict,
    resolve_cache_dir,
)
from .cones import (
    ConeParams,
    default_cone_params,
    invariance_experiment,
    omega_factors,
    omega_bar_factors,
)
from .response import (
    ResponseDivergenceError,
    finite_difference_response,
    forward_noise_scale,
    parse_observable,
    response_series,
    response_series_forward,
    susceptibility,
)
from .asymptotics import birkhoff_average, correlation_decay, neutral_orbit

__all__ = ["main"]

_DEFAULTS = {
    "alpha": 0.25,
    "mesh": 4096,
    "orbit_points": 128,
    "x_min": 1e-10,
    "tol": 1e-8,
    "max_iter": None,
    "format": "csv",
    "out": None,
    "cache_dir": None,
    "obs": "x",
    "K": 256,
    "series_tol": 1e-10,
    "eps": "1e-2,5e-3",
    "gate": 0.03,
    "methods": "backward,forward,susceptibility",
    "cone": "Cstar",
    "kmax": 20,
    "grid": 512,
    "psi": "x",
    "phi": "x",
    "N": 100,
    "method": "operator",
    "orbits": 1024,
    "orbit_len": 65536,
    "burn_in": 1024,
    "seed": 0,
    "ell_max": 10000,
    "alphas": "0.05:0.45:0.05",
    "workers": 1,
    "fd_eps": 0.0,
    "z": 1.0,
}


class GateFailure(RuntimeError):
    """A configured numerical gate was exceeded (exit code 2)."""


def _resolved(args: argparse.Namespace) -> dict:
    cfg = dict(_DEFAULTS)
    given = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(_DEFAULTS)
        if unknown:
            raise ValueError(f"config file: unknown keys {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(given)  # flags win
    cfg["command"] = args.command
    return cfg


def _config_hash(cfg: dict) -> str:
    # output destinations do not affect the numbers: identical numerical
    # configs must produce bit-identical files regardless of --out
    skip = {"out", "cache_dir"}
    blob = json.dumps({k: cfg[k] for k in sorted(cfg) if k not in skip},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _meta(cfg: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config_sha256": _config_hash(cfg)}


def _write_csv(path, cfg, header, rows):
    lines = [f"# pmlab schema={SCHEMA_VERSION} config={_config_hash(cfg)}"]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_json(path, cfg, payload: dict):
    payload = {"meta": _meta(cfg), **payload}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _emit(path, cfg, header, rows, json_payload):
    if cfg["format"] == "json":
        _write_json(path, cfg, json_payload)
    else:
        _write_csv(path, cfg, header, rows)


def _get_density(cfg, alpha=None, tol=None):
    """Cache-backed density for the configured mesh."""
    alpha = cfg["alpha"] if alpha is None else alpha
    tol = cfg["tol"] if tol is None else tol
    p = MapParams(alpha)
    mesh = build_mesh(p, cfg["mesh"], cfg["orbit_points"], cfg["x_min"])
    key = cache_key(alpha, mesh.spec(), tol)
    cache = DensityCache(resolve_cache_dir(cfg["cache_dir"]))
    rec = cache.get(key)
    if rec is None:
        rec = compute_density(p, mesh, tol=tol, max_iter=cfg["max_iter"])
        cache.put(key, rec)
    return p, rec, key


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_density(cfg) -> int:
    p, rec, key = _get_density(cfg)
    x = rec.density.mesh.nodes
    rho = rec.density.full_values()
    rows = list(zip(x.tolist(), rho.tolist(), (rho * x**p.alpha).tolist()))
    c1, c2 = rec.envelope_band()
    _emit(
        cfg["out"], cfg,
        ["x", "rho", "envelope_ratio"],
        rows,
        {"record": density_record_to_dict(rec), "cache_key": key,
         "envelope": {"c1": c1, "c2": c2}},
    )
    print(
        f"density alpha={p.alpha:g}: iterations={rec.iterations} "
        f"residual={rec.residual:.3e} converged={rec.converged} "
        f"envelope c2/c1={c2 / c1:.3f}",
        file=sys.stderr,
    )
    return 0 if rec.converged else 2


def cmd_response(cfg) -> int:
    p, rec, _ = _get_density(cfg)
    if not rec.converged:
        raise GateFailure(f"density not converged (residual {rec.residual:.3e})")
    methods = [m.strip() for m in str(cfg["methods"]).split(",") if m.strip()]
    obs = parse_observable(cfg["obs"])
    results = {}
    if "backward" in methods:
        results["backward"] = response_series(p, rec, obs, cfg["K"], cfg["series_tol"]).to_dict()
    if "forward" in methods:
        results["forward"] = response_series_forward(p, rec, obs, min(cfg["K"], 64)).to_dict()
    if "susceptibility" in methods:
        try:
            results["susceptibility"] = {
                "value": susceptibility(p, rec, obs, cfg["z"], cfg["K"]),
                "z": cfg["z"],
            }
        except (ResponseDivergenceError, ValueError) as exc:
            results["susceptibility"] = {"error": str(exc)}
    rows = []
    for name, res in results.items():
        rows.append((name, res.get("value", math.nan), res.get("tail_estimate", math.nan),
                     res.get("k_used", 0)))
    _emit(cfg["out"], cfg, ["method", "value", "tail_estimate", "k_used"], rows,
          {"alpha": p.alpha, "observable": obs.name, "results": results})
    return 0


def cmd_validate(cfg) -> int:
    p, rec, _ = _get_density(cfg)
    if not rec.converged:
        raise GateFailure(f"density not converged (residual {rec.residual:.3e})")
    obs = parse_observable(cfg["obs"])
    series = response_series(p, rec, obs, cfg["K"], cfg["series_tol"])
    rows = [("series_backward", series.value, math.nan)]
    comparisons = {}
    # the forward (nodal pull-back) series carries quadrature sampling
    # noise beyond the mesh-resolution horizon; its value is reported and
    # its terms are checked against the noise model, but it does not drive
    # the exit gate
    k_fwd = min(cfg["K"], 64)
    fwd = response_series_forward(p, rec, obs, k_fwd)
    rows.append(("series_forward", fwd.value, _rel(fwd.value, series.value)))
    noise = forward_noise_scale(rec.density.mesh, obs, rec)
    term_dev = max(
        abs(a - b) for a, b in zip(fwd.terms, series.terms[: k_fwd + 1])
    )
    forward_terms_ok = term_dev <= 3.0 * noise
    if obs.fprime is not None and obs.periodic:
        sus = susceptibility(p, rec, obs, 1.0, cfg["K"])
        rows.append(("susceptibility", sus, _rel(sus, series.value)))
        comparisons["susceptibility"] = _rel(sus, series.value)
    mesh = rec.density.mesh
    fd_vals = {}
    for eps_s in str(cfg["eps"]).split(","):
        eps = float(eps_s)
        fd = finite_difference_response(p, obs, eps, mesh, tol=cfg["tol"],
                                        max_iter=cfg["max_iter"])
        fd_vals[eps] = fd
        rows.append((f"fd_eps={eps:g}", fd, _rel(fd, series.value)))
    gate_rel = max(_rel(fd, series.value) for fd in fd_vals.values())
    comparisons["fd"] = gate_rel
    _emit(cfg["out"], cfg, ["method", "value", "rel_diff_vs_series"], rows,
          {"alpha": p.alpha, "observable": obs.name,
           "series": series.to_dict(), "fd": {str(k): v for k, v in fd_vals.items()},
           "comparisons": comparisons, "gate": cfg["gate"],
           "forward": {"value": fwd.value, "max_term_deviation": term_dev,
                       "noise_scale": noise, "terms_within_noise": forward_terms_ok}})
    worst = max(comparisons.values())
    if worst > cfg["gate"]:
        raise GateFailure(
            f"cross-method disagreement {worst:.4f} exceeds gate {cfg['gate']:g}"
        )
    if not forward_terms_ok:
        raise GateFailure(
            f"forward-series terms deviate {term_dev:.3e} beyond the noise "
            f"model (3 x {noise:.3e})"
        )
    return 0


def cmd_cones(cfg) -> int:
    p = MapParams(cfg["alpha"])
    if cfg["cone"] == "omega":
        y = np.linspace(0.5 / cfg["grid"], 0.5, cfg["grid"])
        cp = ConeParams(a=2.0, b1=p.alpha + 1.0,
                        b2=3.0 * (p.alpha + 1.0) * (1.0 + p.alpha) + 21.0,
                        b3=400.0, b1_bar=1e-3, b2_bar=1e-2)
        o1, o2, o3 = omega_factors(p, y, cp)
        ob1, ob2 = omega_bar_factors(p, y, cp)
        rows = list(zip(y.tolist(), o1.tolist(), o2.tolist(), o3.tolist(),
                        ob1.tolist(), ob2.tolist()))
        _emit(cfg["out"], cfg,
              ["y", "omega1", "omega2", "omega3", "omega1_bar", "omega2_bar"],
              rows,
              {"alpha": p.alpha, "cone_params": cp.to_dict(),
               "max": {"omega1": float(np.max(o1)), "omega2": float(np.max(o2)),
                       "omega3": float(np.max(o3))}})
        return 0
    _, rec, _ = _get_density(cfg)
    if not rec.converged:
        raise GateFailure(f"density not converged (residual {rec.residual:.3e})")
    cp = default_cone_params(p, rec, k_max=cfg["kmax"])
    reports = invariance_experiment(p, cfg["cone"], cp, cfg["kmax"], rec)
    rows = [
        (r.params.get("k"), r.subject, r.cone_id, int(r.verdict), r.worst_margin,
         r.worst_node)
        for r in reports
    ]
    _emit(cfg["out"], cfg,
          ["k", "subject", "cone", "verdict", "worst_margin", "worst_node"],
          rows,
          {"alpha": p.alpha, "cone_params": cp.to_dict(),
           "reports": [r.to_dict() for r in reports]})
    return 0


def cmd_decay(cfg) -> int:
    p, rec, _ = _get_density(cfg)
    if not rec.converged:
        raise GateFailure(f"density not converged (residual {rec.residual:.3e})")
    curve = correlation_decay(
        p, rec, cfg["psi"], cfg["phi"], cfg["N"], method=cfg["method"],
        n_orbits=cfg["orbits"], orbit_len=cfg["orbit_len"],
        burn_in=cfg["burn_in"], seed=cfg["seed"],
    )
    orbit = neutral_orbit(p, cfg["ell_max"])
    mean, se = birkhoff_average(p, cfg["psi"], cfg["orbits"],
                                max(cfg["orbit_len"], 2 * cfg["burn_in"] + 8),
                                cfg["burn_in"], cfg["seed"])
    prefix = cfg["out"]
    if prefix is None:
        raise ValueError("decay: --out prefix is required (writes three files)")
    _write_csv(f"{prefix}_corr.csv", cfg, ["n", "C_n"],
               list(enumerate(curve.values.tolist())))
    _write_csv(f"{prefix}_orbit.csv", cfg, ["ell", "x_ell", "bound", "margin"],
               orbit.to_rows())
    _write_json(f"{prefix}_stats.json", cfg, {
        "alpha": p.alpha,
        "correlation": {
            "psi": curve.psi_id, "phi": curve.phi_id, "method": curve.method,
            "fitted_exponent": curve.fitted_exponent,
            "exponent_ci": list(curve.exponent_ci),
        },
        "neutral_orbit": {
            "ell_max": orbit.ell_max,
            "fitted_exponent": orbit.fitted_exponent,
            "upper_ok": orbit.upper_ok, "upper_margin": orbit.upper_margin,
            "lower_c": orbit.lower_c,
        },
        "birkhoff": {"observable": parse_observable(cfg["psi"]).name,
                     "mean": mean, "standard_error": se,
                     "seed": cfg["seed"]},
    })
    return 0


def _parse_alphas(spec: str) -> list[float]:
    spec = str(spec)
    if ":" in spec:
        a, b, step = (float(t) for t in spec.split(":"))
        n = int(round((b - a) / step)) + 1
        return [round(a + i * step, 12) for i in range(n)]
    return [float(t) for t in spec.split(",") if t.strip()]


def _sweep_one(cfg, alpha):
    p, rec, _ = _get_density(cfg, alpha=alpha)
    if not rec.converged:
        return (alpha, cfg["obs"], math.nan, math.nan, 0, math.nan, math.nan)
    res = response_series(p, rec, cfg["obs"], cfg["K"], cfg["series_tol"])
    fd_val = math.nan
    rel = math.nan
    if cfg["fd_eps"]:
        fd_val = finite_difference_response(p, cfg["obs"], cfg["fd_eps"],
                                            rec.density.mesh, tol=cfg["tol"],
                                            max_iter=cfg["max_iter"])
        rel = _rel(fd_val, res.value)
    return (alpha, res.observable_id, res.value, res.tail_estimate, res.k_used,
            fd_val, rel)


def cmd_sweep(cfg) -> int:
    alphas = _parse_alphas(cfg["alphas"])
    if any(not 0.0 <= a < 1.0 for a in alphas):
        raise ValueError("sweep: all alphas must lie in [0, 1)")
    workers = int(cfg["workers"])
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_one, [cfg] * len(alphas), alphas))
    else:
        rows = [_sweep_one(cfg, a) for a in alphas]
    _emit(cfg["out"], cfg,
          ["alpha", "observable", "value", "tail", "k_used", "fd_value", "rel_diff"],
          rows,
          {"rows": [dict(zip(
              ["alpha", "observable", "value", "tail", "k_used", "fd_value",
               "rel_diff"], r)) for r in rows]})
    return 0


def _rel(v, ref):
    return abs(v - ref) / max(abs(ref), 1e-300)


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_common(sp):
    sp.add_argument("--alpha", type=float, help="map parameter in [0, 1)")
    sp.add_argument("--mesh", type=int, help="graded-node count n")
    sp.add_argument("--orbit-points", dest="orbit_points", type=int,
                    help="neutral-orbit points L in the mesh")
    sp.add_argument("--x-min", dest="x_min", type=float, help="mesh lower cutoff")
    sp.add_argument("--tol", type=float, help="density L1 stopping tolerance")
    sp.add_argument("--max-iter", dest="max_iter", type=int,
                    help="density iteration cap")
    sp.add_argument("--cache-dir", dest="cache_dir", help="density cache directory")
    sp.add_argument("--out", help="output path (default stdout)")
    sp.add_argument("--format", choices=("csv", "json"), help="output format")
    sp.add_argument("--config", help="JSON config file (flags take precedence)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="pmlab",
        description="Transfer-operator laboratory for intermittent interval maps",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("density", help="compute/cache the invariant density")
    _add_common(sp)

    sp = sub.add_parser("response", help="linear-response series")
    _add_common(sp)
    sp.add_argument("--obs", help="observable (const,x,x^2..x^4,cos[m],ind:a:b)")
    sp.add_argument("--K", type=int, help="series truncation")
    sp.add_argument("--series-tol", dest="series_tol", type=float,
                    help="stop when fitted tail is below this")
    sp.add_argument("--methods", help="comma list: backward,forward,susceptibility")
    sp.add_argument("--z", type=float, help="susceptibility evaluation point")

    sp = sub.add_parser("validate", help="cross-validate response methods")
    _add_common(sp)
    sp.add_argument("--obs")
    sp.add_argument("--K", type=int)
    sp.add_argument("--series-tol", dest="series_tol", type=float)
    sp.add_argument("--eps", help="comma list of FD epsilons")
    sp.add_argument("--gate", type=float, help="relative disagreement gate")

    sp = sub.add_parser("cones", help="cone invariance experiment / omega table")
    _add_common(sp)
    sp.add_argument("--cone", choices=("Cstar", "Cstar1", "C2", "C3", "omega"))
    sp.add_argument("--kmax", type=int, help="iterate count")
    sp.add_argument("--grid", type=int, help="y-grid size for omega table")

    sp = sub.add_parser("decay", help="correlation decay + orbit + Birkhoff stats")
    _add_common(sp)
    sp.add_argument("--psi")
    sp.add_argument("--phi")
    sp.add_argument("--N", type=int, help="maximum lag")
    sp.add_argument("--method", choices=("operator", "montecarlo"))
    sp.add_argument("--orbits", type=int)
    sp.add_argument("--orbit-len", dest="orbit_len", type=int)
    sp.add_argument("--burn-in", dest="burn_in", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--ell-max", dest="ell_max", type=int)

    sp = sub.add_parser("sweep", help="response curve over an alpha grid")
    _add_common(sp)
    sp.add_argument("--alphas", help="comma list or start:stop:step")
    sp.add_argument("--obs")
    sp.add_argument("--K", type=int)
    sp.add_argument("--series-tol", dest="series_tol", type=float)
    sp.add_argument("--workers", type=int, help="process-pool width")
    sp.add_argument("--fd-eps", dest="fd_eps", type=float,
                    help="also compute FD response at this epsilon (0 = off)")
    return ap


_COMMANDS = {
    "density": cmd_density,
    "response": cmd_response,
    "validate": cmd_validate,
    "cones": cmd_cones,
    "decay": cmd_decay,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    # drop unset flags so config/defaults can fill them
    ns_dict = argparse.Namespace(**{k: v for k, v in vars(ns).items() if v is not None})
    try:
        cfg = _resolved(ns_dict)
        return _COMMANDS[ns.command](cfg)
    except GateFailure as exc:
        print(f"pmlab: gate failure: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, ResponseDivergenceError) as exc:
        print(f"pmlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
