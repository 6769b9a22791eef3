"""Command-line front end: ``optexcite <command> --config run.yaml --out results/``.

Commands: sensitivity, optimize, identify, rank, surrogate. Exit codes are
0 on success, 1 on runtime/model errors and 2 on configuration errors.
"""
from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone

import numpy as np

from . import __version__, excitation as ex, identify as idf, lpv, optimizer as opt, pce
from . import sensitivity as sens, transport
from .config import ConfigError, config_hash, load_config
from .models import SimulationError, get_model

log = logging.getLogger("optexcite")


def _fmt(x) -> str:
    if isinstance(x, (str, np.str_)):
        return str(x)
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


class Outputs:
    """Collects output files and writes them atomically (temp file + rename) at the end."""

    def __init__(self, out_dir, cfg, seed, command):
        self.out_dir = out_dir
        self.files: dict[str, bytes] = {}
        self.meta = {"command": command, "config_hash": config_hash(cfg), "seed": seed,
                     "version": __version__}

    def add_csv(self, name, header, rows):
        self.files[name] = csv_text(header, rows).encode()
        meta = dict(self.meta, file=name, created=datetime.now(timezone.utc).isoformat(timespec="seconds"))
        self.files[name + ".meta.json"] = (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode()

    def add_raw(self, name, data: bytes):
        self.files[name] = data

    def commit(self):
        os.makedirs(self.out_dir, exist_ok=True)
        for name, data in self.files.items():
            path = os.path.join(self.out_dir, name)
            fd, tmp = tempfile.mkstemp(dir=self.out_dir, prefix=f".{name}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


# building blocks from the config ---------------------------------------------

class Context:
    def __init__(self, cfg: dict, seed: int, threads: int):
        self.cfg, self.seed, self.threads = cfg, seed, threads
        mcfg = dict(cfg["model"])
        name = mcfg.pop("name")
        try:
            self.spec = get_model(name, **mcfg)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"model: {err}") from None
        self.ensemble = self.spec.ensemble
        self.names = list(self.ensemble.names)
        g = cfg.get("grid", {})
        try:
            self.grid = lpv.TimeGrid(g.get("t0", 0.0), g.get("tf", self.spec.horizon), g.get("h", self.spec.h))
        except ValueError as err:
            raise ConfigError(f"grid: {err}") from None
        self.every = g.get("every", 1)
        self.engine_cfg = cfg.get("engine", {})
        self.kind = self.engine_cfg.get("kind", "intrusive" if self.spec.system is not None else "transport")
        if self.kind == "intrusive" and self.spec.system is None:
            raise ConfigError(f"engine: model {name!r} has no LPV form; use the transport engine")
        self.signal = None
        if "signal" in cfg:
            try:
                self.signal = ex.signal_from_dict(cfg["signal"])
            except (KeyError, ValueError) as err:
                raise ConfigError(f"signal: {err}") from None
        self._surrogate = None

    # signals
    def signal_params(self, params, where):
        if self.signal is None:
            raise ConfigError(f"{where}: a signal section is required")
        p = np.asarray(params, dtype=float)
        if p.size != self.signal.dim:
            raise ConfigError(f"{where}: signal needs {self.signal.dim} parameters "
                              f"({', '.join(self.signal.names)}), got {p.size}")
        return p

    # intrusive pieces
    def surrogate(self):
        if self._surrogate is None:
            path = self.engine_cfg.get("surrogate")
            if path and os.path.exists(path):
                s = lpv.load_surrogate(path)
                log.info("loaded surrogate from %s", path)
            else:
                d = self.engine_cfg.get("degree", 3)
                order = self.engine_cfg.get("quad_order", self.spec.quad_order or 2 * (d + 1))
                basis = pce.ChaosBasis.create(self.ensemble, d)
                s = lpv.build_surrogate(self.spec.system, basis, pce.gauss_quadrature(self.ensemble, order))
                log.info("built surrogate: %d states, %d outputs", s.Ap.shape[0], s.Cp.shape[0])
            self._surrogate = s
        return self._surrogate

    def s_min(self):
        v = self.engine_cfg.get("s_min", "noise")
        if v != "noise":
            return float(v)
        if self.spec.system is None:
            return 0.0
        return lpv.noise_to_minimal_sensitivity(self.spec.system, self.ensemble.means, self.grid,
                                                self.ensemble.q, self.every)

    def engine(self):
        if self.kind == "intrusive":
            return opt.IntrusiveEngine(self.surrogate(), self.s_min(),
                                       self.engine_cfg.get("order", sens.FIRST_ORDER))
        return opt.TransportEngine(self.spec.model, self.ensemble, self.engine_cfg.get("n_samples", 100),
                                   self.engine_cfg.get("bins"),
                                   self.engine_cfg.get("strategy", transport.EQUIPROBABLE),
                                   self.seed, self.threads, self.s_min())

    def weights(self):
        w = self.cfg.get("weights", {})
        m, q = self.spec.model.m, self.ensemble.q
        if "Q" in w:
            Q = np.asarray(w["Q"], dtype=float)
            if Q.shape != (m * q, m * q):
                raise ConfigError(f"weights: Q must be {m * q}x{m * q}")
        else:
            params = w.get("parameters", self.names)
            unknown = set(params) - set(self.names)
            if unknown:
                raise ConfigError(f"weights: unknown parameters {sorted(unknown)}; model has {self.names}")
            outs = w.get("outputs")
            if outs is not None and max(outs) >= m:
                raise ConfigError(f"weights: output index out of range (m = {m})")
            Q = ex.selection_weights(m, q, [self.names.index(p) for p in params], outs)
        R = np.atleast_2d(np.asarray(w.get("R", 0.0), dtype=float))
        if R.size == 1:
            R = R.reshape(1, 1) * np.eye(self.spec.model.l)
        if R.shape != (self.spec.model.l, self.spec.model.l):
            raise ConfigError("weights: R has the wrong shape")
        return Q, R

    def admissible(self):
        a = self.cfg.get("admissible")
        if self.signal is None:
            raise ConfigError("signal: section required")
        if a is None or "lower" not in a or "upper" not in a:
            if isinstance(self.signal, ex.Sinusoid):
                base = ex.sinusoid_set(horizon=self.grid.tf)
            elif isinstance(self.signal, ex.RampSuperposition):
                base = ex.ramp_set(self.signal.n_ramps, horizon=self.grid.tf)
            else:
                raise ConfigError("admissible: lower/upper boxes are required for this signal kind")
            a = dict(a or {})
            a.setdefault("lower", base.lower.tolist())
            a.setdefault("upper", base.upper.tolist())
            for k in ("u_max", "rate_max", "u_start", "u_end"):
                if getattr(base, k) is not None:
                    a.setdefault(k, getattr(base, k))
        try:
            adm = ex.AdmissibleSet(a["lower"], a["upper"], self.grid.tf, a.get("u_max"), a.get("rate_max"),
                                   a.get("u_start"), a.get("u_end"))
        except ValueError as err:
            raise ConfigError(f"admissible: {err}") from None
        if len(adm.lower) != self.signal.dim:
            raise ConfigError(f"admissible: boxes need {self.signal.dim} entries")
        return adm

    def chance(self):
        return [ex.ChanceConstraint(c.get("output", 0), c["y_max"], c["alpha"]) for c in self.cfg.get("chance", [])]


# commands --------------------------------------------------------------------

def _engine_scores(ctx: Context, u):
    """(times, dS (K, m, q)) for one input with the configured engine."""
    eng = ctx.engine()
    eng.prepare(ctx.grid, ctx.every, ctx.seed)
    out = eng.evaluate(u)
    return out.times, out.dS


def cmd_sensitivity(ctx: Context, outputs: Outputs):
    u = ctx.signal.bind(ctx.signal_params(ctx.cfg["signal"].get("params", []), "signal.params"))
    names = ctx.names
    if ctx.kind == "intrusive":
        s = ctx.surrogate()
        tr = lpv.simulate_surrogate(s, u, ctx.grid, ctx.every)
        st = sens.trajectory(tr.Y, s.basis, tr.times, ctx.s_min(), ctx.engine_cfg.get("order", sens.FIRST_ORDER))
        SU, _ = sens.normalized_sobol(st.S, sens.output_variance(tr.Y, s.basis))
        rows = [(t, i, names[j], st.S[k, i, j], st.S_min[k, i, j], st.dS[k, i, j], SU[k, i, j])
                for k, t in enumerate(tr.times) for i in range(s.m) for j in range(len(names))]
        outputs.add_csv("sensitivity.csv", ["t", "output", "parameter", "S", "S_min", "dS", "SU"], rows)
        times, dS = tr.times, st.dS
    else:
        ecfg = ctx.engine_cfg
        res = transport.nonintrusive_sensitivity_trajectory(
            ctx.spec.model, u, ctx.ensemble, ecfg.get("n_samples", 100), ctx.grid, ecfg.get("bins"),
            ecfg.get("strategy", transport.EQUIPROBABLE), ctx.seed, ctx.every, ctx.threads)
        S_out = np.sqrt(np.sum(res.S ** 2, axis=1))  # combine outputs: (K, q)
        rows = [(t, names[j], res.xi_B[k, j], res.iota_B[k, j], res.iota_S[k, j], S_out[k, j])
                for k, t in enumerate(res.times) for j in range(len(names))]
        outputs.add_csv("sensitivity.csv", ["t", "parameter", "xi_B", "iota_B", "iota_S", "S_unnormalized"], rows)
        if ecfg.get("dump_samples"):
            K = len(res.times)
            hdr = ["seed"] + names + [f"y{i}(t{k})" for k in range(K) for i in range(res.Y.shape[2])]
            outputs.add_csv("samples.csv", hdr, [[ctx.seed, *th, *y.reshape(-1)] for th, y in zip(res.thetas, res.Y)])
        times, dS = res.times, sens.effective_sensitivity(res.S, ctx.s_min())
    imp = sens.impact_score(dS, times)
    outputs.add_csv("impact.csv", ["output", "parameter", "impact"],
                    [(i, names[j], imp[i, j]) for i in range(imp.shape[0]) for j in range(imp.shape[1])])


def cmd_optimize(ctx: Context, outputs: Outputs):
    Q, R = ctx.weights()
    adm = ctx.admissible()
    problem = opt.ExcitationProblem(ctx.signal, adm, Q, R, ctx.grid, ctx.engine(), ctx.chance(), ctx.every)
    ocfg = ctx.cfg.get("optimizer", {})
    config = opt.DeConfig(n_pop=ocfg.get("n_pop", 20), max_iter=ocfg.get("max_iter", 100), F=ocfg.get("F", 0.8),
                          CR=ocfg.get("CR", 0.9), seed=ctx.seed, penalty=ocfg.get("penalty"),
                          stagnation=ocfg.get("stagnation", 30), threads=ctx.threads,
                          refine=ocfg.get("refine", True))
    lines = []

    def progress(gen, J, p, feasible):
        line = f"iter {gen:4d}  best J = {J:.10g}  feasible = {feasible}"
        log.info(line)
        lines.append(line)

    res = opt.solve(problem, config, progress)
    lines.append(f"final  J = {res.J:.10g}  {res.feasibility}")
    names = list(ctx.signal.names)
    outputs.add_csv("optimum.csv", names + ["J", "J_raw", "feasible"],
                    [[*res.p, res.J, res.J_raw, int(res.feasibility.feasible)]])
    outputs.add_csv("trace.csv", ["iteration", "best_J"], list(enumerate(res.trace)))
    t = ctx.grid.times
    outputs.add_csv("signal.csv", ["t", "u_1"], zip(t, ctx.signal(res.p, t)))
    outputs.add_raw("progress.log", ("\n".join(lines) + "\n").encode())


def cmd_identify(ctx: Context, outputs: Outputs):
    icfg = ctx.cfg["identify"]
    q = ctx.ensemble.q
    for key in ("theta_true", "theta0", "lower", "upper"):
        if len(icfg[key]) != q:
            raise ConfigError(f"identify.{key}: need {q} values ({', '.join(ctx.names)})")
    noise = icfg.get("noise_std", float(np.sqrt(ctx.cfg["model"].get("noise_var", 0.007))))
    model = ctx.spec.model
    data = []
    for k, d in enumerate(icfg["datasets"]):
        u = ctx.signal.bind(ctx.signal_params(d["params"], f"identify.datasets[{k}]"))
        data.append(idf.synthesize_measurements(model, icfg["theta_true"], u, ctx.grid, noise,
                                                seed=ctx.seed + k, every=ctx.every, name=d.get("name", f"#{k}")))
    groups = [[d] for d in data]
    if icfg.get("combined", len(data) > 1):
        groups.append(data)
    rows = []
    for g in groups:
        r = idf.least_squares_fit(model, g, icfg["theta0"], icfg["lower"], icfg["upper"])
        if r.unidentifiable is not None:
            log.warning("dataset %s: unidentifiable directions %s", r.datasets, r.unidentifiable.T.tolist())
        rows.append([r.datasets, r.duration, *[v for pair in zip(r.theta, r.std) for v in pair]])
    header = ["dataset", "total_time"] + [f"{n}_{s}" for n in ctx.names for s in ("mean", "std")]
    outputs.add_csv("estimates.csv", header, rows)


def cmd_rank(ctx: Context, outputs: Outputs):
    rcfg = ctx.cfg["rank"]
    key = rcfg.get("parameter", ctx.names[0])
    if key not in ctx.names:
        raise ConfigError(f"rank.parameter: unknown parameter {key!r}")
    adm = ctx.admissible() if ctx.cfg.get("admissible") else None
    rows = []
    for k, sdef in enumerate(rcfg["signals"]):
        p = ctx.signal_params(sdef["params"], f"rank.signals[{k}]")
        if adm is not None:
            rep = ex.check_admissible(ctx.signal, p, adm, ctx.grid.h)
            log.info("signal %s: %s", sdef.get("name", k), rep)
        times, dS = _engine_scores(ctx, ctx.signal.bind(p))
        scores = sens.impact_score(dS, times).sum(axis=0)
        rows.append([sdef.get("name", f"#{k}"), *scores])
    j = ctx.names.index(key)
    rows.sort(key=lambda r: -r[1 + j])
    outputs.add_csv("ranking.csv", ["signal"] + ctx.names, rows)


def cmd_surrogate(ctx: Context, outputs: Outputs):
    if ctx.kind != "intrusive":
        raise ConfigError("surrogate export needs the intrusive engine")
    s = ctx.surrogate()
    buf = io.BytesIO()
    fd, tmp = tempfile.mkstemp(suffix=".npz")
    os.close(fd)
    try:
        lpv.save_surrogate(tmp, s)
        with open(tmp, "rb") as fh:
            buf.write(fh.read())
    finally:
        os.unlink(tmp)
    outputs.add_raw("surrogate.npz", buf.getvalue())


COMMANDS = {"sensitivity": cmd_sensitivity, "optimize": cmd_optimize, "identify": cmd_identify,
            "rank": cmd_rank, "surrogate": cmd_surrogate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optexcite", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--out", default="results", help="output directory")
    ap.add_argument("--seed", type=int, help="overrides the seed in the config")
    ap.add_argument("--threads", type=int, help="worker threads for simulations / objective calls")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg["seed"] = args.seed
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be positive")
            cfg["threads"] = args.threads
        seed, threads = cfg.get("seed", 0), cfg.get("threads", 1)
        ctx = Context(cfg, seed, threads)
        outputs = Outputs(args.out, cfg, seed, args.command)
        COMMANDS[args.command](ctx, outputs)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (SimulationError, lpv.IntegrationError, transport.ZeroVarianceError, RuntimeError,
            ValueError, np.linalg.LinAlgError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    outputs.commit()
    return 0


if __name__ == "__main__":
    sys.exit(main())
