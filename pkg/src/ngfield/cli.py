"""Command line interface: ``ngfield simulate|fit|predict|crossval``.

Every command is a deterministic function of its configuration file, its
input files and the seed.  Exit status is 0 on success, 1 on numerical
failure and 2 on invalid input.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, MissingColumn, NgfieldError, NumericalError
from .inference import GibbsConfig, McemConfig, gaussian_start, mcem_fit
from .io import (coordinate_columns, load_dataset, params_from_dict, params_to_dict, read_json, read_table,
                 write_csv, write_json)
from .mesh import (assemble_operators, build_mesh_1d, build_mesh_2d, build_observation_matrix,
                   default_extension, read_mesh, write_mesh)
from .model import ModelParams, simulate_latent, simulate_observations
from .prediction import crossval, krige

log = logging.getLogger("ngfield")


# ---------------------------------------------------------------------------
# configuration helpers
# ---------------------------------------------------------------------------

def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return sec


def resolve_mesh_spec(cfg: dict, base: Path) -> dict:
    """Mesh section with defaults filled in, so the mesh can be rebuilt exactly."""
    m = dict(_section(cfg, "mesh"))
    if "file" in m:
        p = Path(m["file"])
        m["file"] = str(p if p.is_absolute() else (base / p))
        return m
    if "interval" in m:
        a, b = m["interval"]
        return {"interval": [float(a), float(b)], "n": int(m.get("n", 101))}
    if "domain" not in m or "edge" not in m:
        raise ConfigError("mesh needs 'file', 'interval'/'n' or 'domain'/'edge'")
    edge = float(m["edge"])
    kappa = float(_section(cfg, "model").get("kappa", 1.0))
    w_def, e_def = default_extension(kappa, edge)
    width = m.get("extension_width")
    return {"domain": [float(v) for v in m["domain"]], "edge": edge,
            "extension_width": float(w_def if width is None else width),
            "extension_edge": float(m.get("extension_edge") or e_def)}


def build_mesh(spec: dict):
    if "file" in spec:
        return read_mesh(spec["file"])
    if "interval" in spec:
        return build_mesh_1d(spec["interval"][0], spec["interval"][1], spec["n"])
    return build_mesh_2d(spec["domain"], spec["edge"], spec["extension_width"], spec["extension_edge"])


def node_covariate(kind, ops) -> np.ndarray:
    if kind in (None, "ones"):
        return np.ones((ops.n, 1))
    if kind == "area":
        return ops.h.reshape(-1, 1).copy()
    raise ConfigError(f"node covariate must be 'ones' or 'area', got {kind!r}")


def gibbs_config(cfg: dict, seed: int) -> GibbsConfig:
    g = _section(cfg, "gibbs")
    return GibbsConfig(samples=int(g.get("samples", 200)), burnin=int(g.get("burnin", 50)),
                       thinning=int(g.get("thinning", 1)), seed=seed)


def mcem_config(cfg: dict, seed: int) -> McemConfig:
    m = _section(cfg, "mcem")
    kb = m.get("kappa_bounds")
    return McemConfig(gibbs=gibbs_config(cfg, seed), max_iter=int(m.get("max_iter", 200)),
                      k0=int(m.get("k0", 50)), k_max=int(m.get("k_max", 2000)),
                      growth=float(m.get("growth", 1.2)), tol=float(m.get("tol", 5e-3)),
                      later_burnin=int(m.get("later_burnin", 10)),
                      kappa_bounds=None if kb is None else (float(kb[0]), float(kb[1])))


def use_gaussian_start(cfg: dict, init: ModelParams) -> bool:
    return bool(_section(cfg, "mcem").get("gaussian_start", True)) and not init.noise.is_gaussian


def model_from_config(mc: dict) -> ModelParams:
    fam = str(mc.get("family", "gaussian")).lower()
    d = dict(mc)
    d["family"] = fam
    d.setdefault("alpha", 2)
    return params_from_dict(d)


def initial_params(mc: dict, data, ops) -> ModelParams:
    """Starting values: configured ones where given, moment-based guesses otherwise."""
    fam = str(mc.get("family", "gaussian")).lower()
    y, B = data.obs, data.B
    beta = np.linalg.lstsq(B, y, rcond=None)[0]
    s2 = float(np.var(y - B @ beta)) or 1.0
    lo, hi = data.locations.min(axis=0), data.locations.max(axis=0)
    diam = float(np.linalg.norm(hi - lo)) or 1.0
    kappa = float(mc.get("kappa", math.sqrt(8.0) / (0.2 * diam)))
    d = data.dim
    # unit-noise Matérn variance for alpha = 2
    unit_var = 1.0 / (4 * math.pi * kappa ** 2) if d == 2 else 1.0 / (4 * kappa ** 3)
    phi = math.sqrt(0.8 * s2 / unit_var)
    hbar = float(np.mean(ops.h))
    rec = {"family": fam, "alpha": int(mc.get("alpha", 2)), "kappa": kappa,
           "beta": mc.get("beta", list(beta)), "sigma_eps": mc.get("sigma_eps", math.sqrt(0.2 * s2))}
    if fam == "gaussian":
        rec["phi"] = mc.get("phi", phi)
    elif fam == "gal":
        tau = float(mc.get("tau", 1.0))
        rec.update(tau=tau, sigma=mc.get("sigma", phi / math.sqrt(tau)))
    elif fam == "nig":
        nu = float(mc.get("nu", 1.0))
        rec.update(nu=nu, sigma=mc.get("sigma", phi * math.sqrt(hbar / (nu * math.sqrt(hbar / 2.0)))))
    else:
        raise ConfigError(f"unknown family {fam!r}")
    if fam != "gaussian":
        rec["gamma"] = mc.get("gamma", [0.0])
        rec["mu"] = mc.get("mu", [0.0])
    return params_from_dict(rec)


class Context:
    """Configuration, paths and derived objects shared by the commands."""

    def __init__(self, args):
        self.config_path = Path(args.config)
        self.cfg = read_json(self.config_path)
        if not isinstance(self.cfg, dict):
            raise ConfigError("configuration must be a JSON object")
        self.base = self.config_path.parent
        seed = args.seed if args.seed is not None else self.cfg.get("seed")
        if seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        self.seed = int(seed)
        out = args.out or self.cfg.get("output") or "."
        self.out = Path(out) if Path(out).is_absolute() or args.out else self.base / out
        self.out.mkdir(parents=True, exist_ok=True)
        self.transform = args.transform or self.cfg.get("transform", "none")
        if self.transform not in ("none", "sqrt"):
            raise ConfigError("transform must be 'none' or 'sqrt'")
        self.args = args

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def data_path(self):
        d = self.args.data or self.cfg.get("data")
        if d is None:
            raise ConfigError("no dataset given (--data or config 'data')")
        return Path(self.args.data) if self.args.data else self.path(d)


def _load_fit_inputs(ctx: Context, mesh_spec: dict, model_cfg: dict, data_path, transform: str):
    mesh = build_mesh(mesh_spec)
    ops = assemble_operators(mesh)
    covs = list(model_cfg.get("covariates", []))
    data = load_dataset(data_path, covs, dim=mesh.dim)
    if transform == "sqrt":
        if np.any(data.obs < 0):
            raise InputError("square-root transform needs nonnegative observations")
        data.obs = np.sqrt(data.obs)
    Bg = node_covariate(model_cfg.get("gamma_covariates", "ones"), ops)
    Bm = node_covariate(model_cfg.get("mu_covariates", "ones"), ops)
    ds = data.to_dataset(Bg, Bm)
    A = build_observation_matrix(mesh, data.locations)
    return mesh, ops, data, ds, A


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(ctx: Context) -> int:
    cfg = ctx.cfg
    spec = resolve_mesh_spec(cfg, ctx.base)
    mesh = build_mesh(spec)
    ops = assemble_operators(mesh)
    mc = _section(cfg, "model")
    truth = model_from_config(mc)
    sim = _section(cfg, "simulate")
    rng = np.random.default_rng(ctx.seed)
    Bg = node_covariate(mc.get("gamma_covariates", "ones"), ops)
    Bm = node_covariate(mc.get("mu_covariates", "ones"), ops)
    reps = int(sim.get("replicates", 1))
    if reps < 1:
        raise ConfigError("simulate.replicates must be at least 1")
    states = [simulate_latent(truth, ops, Bg, Bm, rng) for _ in range(reps)]
    write_mesh(ctx.out / "mesh.txt", mesh)
    coords = [mesh.nodes[:, j] for j in range(mesh.dim)]
    names = ["x", "y"][:mesh.dim]
    if reps == 1:
        write_csv(ctx.out / "field.csv", ["node"] + names + ["interior", "w", "V"],
                  [np.arange(ops.n)] + coords + [mesh.interior, states[0].w, states[0].V])
    else:
        write_csv(ctx.out / "field.csv", ["node"] + names + ["interior"] + [f"w{r}" for r in range(reps)],
                  [np.arange(ops.n)] + coords + [mesh.interior] + [s.w for s in states])
    n_obs = int(sim.get("n_obs", 0))
    if "locations" in sim:
        _, tab = read_table(ctx.path(sim["locations"]))
        locs = tab[:, :mesh.dim]
    elif n_obs > 0:
        inner = mesh.nodes[mesh.interior]
        lo, hi = inner.min(axis=0), inner.max(axis=0)
        locs = lo + (hi - lo) * rng.random((n_obs, mesh.dim))
    else:
        locs = np.zeros((0, mesh.dim))
    record = {"params": params_to_dict(truth), "mesh": spec, "seed": ctx.seed, "n_obs": int(locs.shape[0]),
              "replicates": reps}
    if locs.shape[0]:
        A = build_observation_matrix(mesh, locs)
        B = np.ones((locs.shape[0], 1))
        if truth.beta.shape[0] != 1:
            raise ConfigError("simulation supports an intercept-only mean (beta of length 1)")
        y = simulate_observations(truth, A, B, states[0].w, rng)
        write_csv(ctx.out / "observations.csv", names + ["obs"], [locs[:, j] for j in range(mesh.dim)] + [y])
        record["field_sd_at_obs"] = float(np.std(A.matrix @ states[0].w))
    write_json(ctx.out / "truth.json", record)
    return 0


def _fit(ctx: Context, spec, mc, data_path, transform):
    mesh, ops, data, ds, A = _load_fit_inputs(ctx, spec, mc, data_path, transform)
    init = initial_params(mc, data, ops)
    res = _run_fit(ctx, ds, ops, A, init)
    return mesh, ops, data, ds, A, init, res


def _run_fit(ctx: Context, ds, ops, A, init):
    mcfg = mcem_config(ctx.cfg, ctx.seed)
    # a Gaussian-driver stage pins down kappa, beta and sigma_eps before the slower non-Gaussian EM
    if use_gaussian_start(ctx.cfg, init) and mcfg.max_iter > 0:
        init, _ = gaussian_start(ds, ops, A, init, mcfg, rng=np.random.default_rng([ctx.seed, 1]))
    return mcem_fit(ds, ops, A, init, mcfg)


def cmd_fit(ctx: Context) -> int:
    spec = resolve_mesh_spec(ctx.cfg, ctx.base)
    mc = _section(ctx.cfg, "model")
    data_path = ctx.data_path()
    _, _, _, _, _, init, res = _fit(ctx, spec, mc, data_path, ctx.transform)
    trace_name = "trace.csv"
    if res.trace:
        keys = list(res.trace[0].keys())
        write_csv(ctx.out / trace_name, keys, [[row[k] for row in res.trace] for k in keys])
    else:
        write_csv(ctx.out / trace_name, ["iter", "k", "q_rb"], [[], [], []])
    model = {"params": params_to_dict(res.params), "initial": params_to_dict(init), "mesh": spec,
             "data": str(data_path), "covariates": list(mc.get("covariates", [])),
             "gamma_covariates": mc.get("gamma_covariates", "ones"), "mu_covariates": mc.get("mu_covariates", "ones"),
             "transform": ctx.transform, "seed": ctx.seed, "trace": trace_name, "iterations": res.iterations,
             "termination": res.reason, "warnings": list(res.warnings)}
    write_json(ctx.out / "model.json", model)
    return 0


def _back_transform(mean, var):
    return mean ** 2 + var, 2.0 * var ** 2 + 4.0 * mean ** 2 * var


def cmd_predict(ctx: Context) -> int:
    pc = _section(ctx.cfg, "predict")
    model_path = Path(ctx.args.model) if ctx.args.model else (ctx.path(pc["model"]) if "model" in pc else None)
    if model_path is None:
        raise ConfigError("no model given (--model or predict.model)")
    model = read_json(model_path)
    try:
        params = params_from_dict(model["params"])
        spec = model["mesh"]
    except KeyError as exc:
        raise ConfigError(f"model record lacks field {exc}") from None
    data_path = Path(ctx.args.data) if ctx.args.data else Path(model["data"])
    transform = model.get("transform", "none")
    mc = {"covariates": model.get("covariates", []), "gamma_covariates": model.get("gamma_covariates", "ones"),
          "mu_covariates": model.get("mu_covariates", "ones")}
    mesh, ops, data, ds, A = _load_fit_inputs(ctx, spec, mc, data_path, transform)
    loc_path = Path(ctx.args.locations) if ctx.args.locations else (
        ctx.path(pc["locations"]) if "locations" in pc else None)
    names = ["x", "y"][:mesh.dim]
    covs = mc["covariates"]
    if loc_path is not None:
        header, tab = read_table(loc_path)
        cols = coordinate_columns(header, loc_path, mesh.dim)
        for c in covs:
            if c not in header:
                raise MissingColumn(f"{loc_path}: covariate column {c!r} not found")
        idx = {h: i for i, h in enumerate(header)}
        locs = tab[:, [idx[c] for c in cols]].reshape(-1, mesh.dim)
        Bp = np.column_stack([np.ones(tab.shape[0])] + [tab[:, idx[c]] for c in covs])
    else:
        locs = np.zeros((0, mesh.dim))
        Bp = np.zeros((0, 1 + len(covs)))
    Ap = build_observation_matrix(mesh, locs, strict=False) if locs.shape[0] else None
    outside = Ap.outside if Ap is not None else np.zeros(0, dtype=np.int64)
    if outside.size:
        print(f"LocationOutsideMesh: rows {', '.join(str(int(i)) for i in outside)} skipped", file=sys.stderr)
    keep = np.setdiff1d(np.arange(locs.shape[0]), outside)
    # regular lattice over the observed domain for plotting
    inner = mesh.nodes[mesh.interior]
    lo, hi = inner.min(axis=0), inner.max(axis=0)
    grid_n = pc.get("grid", [50] * mesh.dim)
    axes = [np.linspace(lo[j], hi[j], int(grid_n[j])) for j in range(mesh.dim)]
    if mesh.dim == 2:
        gx, gy = np.meshgrid(axes[0], axes[1])
        glocs = np.column_stack([gx.ravel(), gy.ravel()])
    else:
        glocs = axes[0].reshape(-1, 1)
    all_locs = np.vstack([locs[keep], glocs])
    Apall = build_observation_matrix(mesh, all_locs)
    gibbs = gibbs_config(ctx.cfg, ctx.seed)
    grid_B = np.zeros((glocs.shape[0], Bp.shape[1]))
    grid_B[:, 0] = 1.0
    if covs:
        # covariates are unknown off the data; the lattice shows the intercept-only surface
        log.info("prediction lattice uses the intercept only")
    res = krige(params, ops, A, ds, Apall, gibbs, mode="both", Bp=np.vstack([Bp[keep], grid_B]))
    mean_mc, mean_rb, var_mc, var_rb = res.mean_mc, res.mean_rb, res.var_mc, res.var_rb
    if transform == "sqrt":
        mean_mc, var_mc = _back_transform(mean_mc, var_mc)
        mean_rb, var_rb = _back_transform(mean_rb, var_rb)
    m = keep.size
    write_csv(ctx.out / "predictions.csv", names + ["mean_mc", "mean_rb", "var_mc", "var_rb"],
              [locs[keep, j] for j in range(mesh.dim)] + [mean_mc[:m], mean_rb[:m], var_mc[:m], var_rb[:m]])
    write_csv(ctx.out / "grid.csv", names + ["mean", "sd"],
              [glocs[:, j] for j in range(mesh.dim)] + [mean_rb[m:], np.sqrt(np.maximum(var_rb[m:], 0.0))])
    return 0


def cmd_crossval(ctx: Context) -> int:
    cv = _section(ctx.cfg, "crossval")
    spec = resolve_mesh_spec(ctx.cfg, ctx.base)
    mc = _section(ctx.cfg, "model")
    data_path = ctx.data_path()
    folds = int(cv.get("folds", 10))
    refit = bool(cv.get("refit", False))
    mesh, ops, data, ds, A = _load_fit_inputs(ctx, spec, mc, data_path, ctx.transform)
    if "model" in cv:
        params = params_from_dict(read_json(ctx.path(cv["model"]))["params"])
    elif cv.get("use_config_params", False):
        params = model_from_config(mc)
    else:
        init = initial_params(mc, data, ops)
        params = init if refit else _run_fit(ctx, ds, ops, A, init).params
    res = crossval(ds, ops, A, params, gibbs_config(ctx.cfg, ctx.seed), folds=folds, seed=ctx.seed,
                   refit=refit, mcem=mcem_config(ctx.cfg, ctx.seed), latent=bool(cv.get("latent", False)))
    write_json(ctx.out / "scores.json", res.scores.as_dict())
    write_csv(ctx.out / "residuals.csv", ["row", "fold", "r", "r_s"],
              [np.arange(ds.N), res.fold, res.residuals, res.std_residuals])
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "crossval": cmd_crossval}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ngfield", description="Non-Gaussian SPDE random fields.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--data", help="dataset CSV (x[,y], obs, covariates)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--transform", choices=["none", "sqrt"], default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--model", help="fitted model JSON (predict)")
    ap.add_argument("--locations", help="prediction locations CSV (predict)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _report(exc: Exception) -> None:
    msg = str(exc)
    name = type(exc).__name__
    print(msg if msg.startswith(name) else f"{name}: {msg}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except NumericalError as exc:
        _report(exc)
        return 1
    except (InputError, FileNotFoundError, IsADirectoryError, KeyError, TypeError, ValueError) as exc:
        _report(exc)
        return 2
    except NgfieldError as exc:
        _report(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
