"""Command line interface: configuration files, reports and CSV output.

Configuration files are line oriented::

    # comment
    [factor]
    kind = cyclic 3
    [factor]
    kind = cyclic 2
    pmf = 1:1
    [weights]
    alpha = 0.5, 0.5
    [metric]
    base = 0.5

Factor kinds: ``cyclic n``, ``table <file>``, ``lattice k depth d``,
``ladder depth d`` and ``free k depth d``.  Exit status is 0 on success, 1
for invalid input and 2 when a numerical procedure does not converge.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import amalgam as am
from . import finite_dims, genfun, oracle, simulator
from .errors import ConvergenceError, ValidationError
from .group_model import FreeProductSpec, cyclic, free_group, from_table, ladder, lattice

SECTIONS = {
    "factor": {"kind", "pmf", "name"},
    "weights": {"alpha"},
    "metric": {"base"},
    "offspring": {"kind", "mean", "pmf", "kmax"},
    "solver": {"lambda", "grid", "depths", "seed", "reps", "generations", "default", "factor",
               "stages", "words", "terms", "radius", "generation", "particles", "mode",
               "allow_nonsymmetric", "stage_cap", "batch", "state_cap", "name"},
    "amalgam": {"subgroup"},
}
CONFIG_DIR = Path(__file__).with_name("configs")


def fmt(x):
    """Numbers with 12 significant digits; other values as plain text."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".12g")
    if isinstance(x, (list, tuple)):
        return ";".join(fmt(v) for v in x)
    return str(x)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class Config:
    path: Path | None
    factors: list = field(default_factory=list)      # [(lineno, {key: value})]
    sections: dict = field(default_factory=dict)      # name -> {key: (lineno, value)}
    spec: FreeProductSpec | None = None
    amalgam: am.AmalgamSpec | None = None
    nu: simulator.OffspringDistribution | None = None

    def get(self, section, key, default=None):
        return self.sections.get(section, {}).get(key, (None, default))[1]

    def where(self, section, key):
        line = self.sections.get(section, {}).get(key, (None, None))[0]
        return f"line {line}" if line else f"[{section}] {key}"

    @property
    def r(self):
        return len(self.factors)

    def solver(self, key, cast=str, default=None):
        v = self.get("solver", key)
        if v is None:
            return default
        try:
            return cast(v)
        except ValueError:
            raise ValidationError(f"{self.where('solver', key)}: bad value {v!r} for {key}") from None


def _parse_pmf(text, where):
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            k, p = part.rsplit(":", 1)
            out[int(k)] = float(p)
        except ValueError:
            raise ValidationError(f"{where}: cannot parse pmf entry {part!r}") from None
    return out


def _build_factor(entry, base_dir):
    line, kv = entry
    where = f"line {line}"
    if "kind" not in kv:
        raise ValidationError(f"{where}: [factor] needs a kind")
    words = kv["kind"].split()
    pmf = _parse_pmf(kv["pmf"], where) if "pmf" in kv else None
    try:
        kind = words[0]
        if kind == "cyclic" and len(words) == 2:
            return cyclic(int(words[1]), pmf)
        if kind == "table" and len(words) == 2:
            if pmf is None:
                raise ValidationError(f"{where}: table factors need a pmf")
            path = Path(words[1])
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            table = np.loadtxt(path, dtype=np.int64, ndmin=2)
            return from_table(table, pmf, name=kv.get("name", path.stem))
        if kind == "lattice" and len(words) == 4 and words[2] == "depth":
            return lattice(int(words[1]), int(words[3]))
        if kind == "ladder" and len(words) == 3 and words[1] == "depth":
            return ladder(int(words[2]))
        if kind == "free" and len(words) == 4 and words[2] == "depth":
            return free_group(int(words[1]), int(words[3]))
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    except (ValueError, OSError) as exc:
        raise ValidationError(f"{where}: {exc}") from None
    raise ValidationError(f"{where}: unknown factor kind {kv['kind']!r}")


def _floats(text, where):
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise ValidationError(f"{where}: expected numbers, got {text!r}") from None


def parse_config(text, path=None) -> Config:
    """Parse and validate configuration text; errors cite the offending line."""
    cfg = Config(Path(path) if path else None)
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ValidationError(f"line {lineno}: unknown section [{section}]")
            if section == "factor":
                cfg.factors.append((lineno, {}))
            elif section in cfg.sections:
                raise ValidationError(f"line {lineno}: duplicate section [{section}]")
            else:
                cfg.sections[section] = {}
            continue
        if section is None:
            raise ValidationError(f"line {lineno}: key outside of a section")
        if "=" not in line:
            raise ValidationError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SECTIONS[section] and not (
                section == "amalgam" and key.startswith(("embed", "transversal"))):
            raise ValidationError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if section == "factor":
            cfg.factors[-1][1][key] = value
            cfg.factors[-1][1].setdefault("_line_" + key, lineno)
        else:
            cfg.sections[section][key] = (lineno, value)
    _validate(cfg)
    return cfg


def _validate(cfg: Config):
    if cfg.r < 2:
        raise ValidationError("[factor]: at least two factors are required")
    base_dir = cfg.path.parent if cfg.path else None
    factors = [_build_factor((kv.get("_line_kind", ln), {k: v for k, v in kv.items() if not k.startswith("_")}),
                             base_dir)
               for ln, kv in cfg.factors]
    alpha = cfg.get("weights", "alpha")
    if alpha is None or alpha.strip() == "uniform":
        weights = [1.0 / cfg.r] * cfg.r
    else:
        weights = _floats(alpha, cfg.where("weights", "alpha"))
        if len(weights) != cfg.r:
            raise ValidationError(f"{cfg.where('weights', 'alpha')}: expected {cfg.r} weights")
        if abs(sum(weights) - 1.0) > 1e-9:
            raise ValidationError(f"{cfg.where('weights', 'alpha')}: weights must sum to 1")
    base = float(cfg.get("metric", "base", 0.5))
    nonsym = cfg.solver("allow_nonsymmetric", str, "false").lower() in ("1", "true", "yes")
    if "amalgam" in cfg.sections:
        cfg.amalgam = _build_amalgam(cfg, factors, weights, base)
    else:
        try:
            cfg.spec = FreeProductSpec(factors, weights, base, allow_nonsymmetric=nonsym,
                                       name=cfg.solver("name", str, ""))
        except ValidationError as exc:
            raise ValidationError(f"[factor]/[weights]: {exc}") from None
    if "offspring" in cfg.sections:
        kind = cfg.get("offspring", "kind", "pmf")
        where = cfg.where("offspring", "kind")
        try:
            if kind == "geometric":
                mean = float(cfg.get("offspring", "mean"))
                kmax = int(cfg.get("offspring", "kmax", 64))
                cfg.nu = simulator.OffspringDistribution.geometric_truncated(mean, kmax)
            elif kind == "pmf":
                cfg.nu = simulator.OffspringDistribution(
                    tuple(_floats(cfg.get("offspring", "pmf", ""), cfg.where("offspring", "pmf"))))
            else:
                raise ValidationError(f"unknown offspring kind {kind!r}")
        except (ValidationError, TypeError, ValueError) as exc:
            raise ValidationError(f"{where}: {exc}") from None


def _build_amalgam(cfg, factors, weights, base):
    sub = cfg.get("amalgam", "subgroup")
    if sub is None:
        raise ValidationError("[amalgam]: subgroup is required")
    words = sub.split()
    if len(words) != 2 or words[0] != "cyclic":
        raise ValidationError(f"{cfg.where('amalgam', 'subgroup')}: subgroup must be 'cyclic n'")
    n = int(words[1])
    H = (np.arange(n)[:, None] + np.arange(n)[None, :]) % n
    emb = []
    for k in range(1, len(factors) + 1):
        v = cfg.get("amalgam", f"embed{k}")
        if v is None:
            raise ValidationError(f"[amalgam]: missing embed{k}")
        emb.append([int(x) for x in _floats(v, cfg.where("amalgam", f"embed{k}"))])
    reps = [cfg.get("amalgam", f"transversal{k}") for k in range(1, len(factors) + 1)]
    try:
        spec = am.AmalgamSpec(factors, H, emb, weights, base, name=cfg.solver("name", str, ""))
        if any(r is not None for r in reps):
            if any(r is None for r in reps):
                raise ValidationError("give a transversal for every factor or for none")
            spec = spec.with_transversals([[int(x) for x in _floats(r, cfg.where("amalgam", f"transversal{k}"))]
                                           for k, r in enumerate(reps, start=1)])
        return spec
    except ValidationError as exc:
        raise ValidationError(f"[amalgam]: {exc}") from None


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists() and (CONFIG_DIR / path).exists():
        path = CONFIG_DIR / path
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from None
    return parse_config(text, path)


def bundled_configs():
    return sorted(CONFIG_DIR.glob("*.cfg"))


# ---------------------------------------------------------------------------
# output helpers

class Output:
    def __init__(self, stream):
        self.stream = stream

    def kv(self, key, value):
        print(f"{key} = {fmt(value)}", file=self.stream)


def write_csv(path, header, rows, stream=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    text = buf.getvalue()
    if path:
        Path(path).write_text(text, encoding="utf-8", newline="")
    elif stream is not None:
        stream.write(text)
    return text


def parse_grid(text):
    try:
        a, b, n = text.split(":")
        return np.linspace(float(a), float(b), int(n))
    except ValueError:
        raise ValidationError(f"grid must look like a:b:n, got {text!r}") from None


def _need_spec(cfg):
    if cfg.spec is None:
        raise ValidationError("this command needs a free-product config (no [amalgam] section)")
    return cfg.spec


def _lam(args, cfg):
    lam = args.lam if getattr(args, "lam", None) is not None else cfg.solver("lambda", float)
    if lam is None:
        raise ValidationError("--lambda is required")
    return float(lam)


# ---------------------------------------------------------------------------
# commands

def cmd_dim(args, cfg, out):
    rep = genfun.dimensions(_need_spec(cfg), _lam(args, cfg))
    d = rep.as_dict()
    for k, v in d.items():
        out.kv(k, v)
    if args.out:
        write_csv(args.out, list(d), [list(d.values())])


def cmd_dim_omega(args, cfg, out):
    spec = _need_spec(cfg)
    zs = genfun.z_star_S(spec, allow_truncated=True)
    out.kv("z_star_S", zs)
    out.kv("HD_Omega", math.log(zs) / math.log(spec.metric_base))
    if args.out:
        write_csv(args.out, ["z_star_S", "hd_omega"], [[zs, math.log(zs) / math.log(spec.metric_base)]])


def cmd_phase(args, cfg, out):
    spec = _need_spec(cfg)
    rep = genfun.phase_classify(spec, _lam(args, cfg))
    out.kv("lambda", rep.lam)
    out.kv("regime", rep.regime)
    out.kv("xi", list(rep.xi))
    for i in range(1, spec.r + 1):
        out.kv(f"factor_{i}", rep.describe(i))


SWEEP_HEADER = ["lambda", "z_star", "phi", "hd_omega", "phase_flags", "R"]


def _sweep_rows(spec, grid):
    return [[r.lam, r.z_star, r.phi, r.hd_omega, r.flags_text(), r.R] for r in genfun.phi_sweep(spec, grid)]


def cmd_sweep(args, cfg, out):
    spec = _need_spec(cfg)
    grid = parse_grid(args.grid or cfg.solver("grid"))
    jobs = args.jobs or simulator._default_jobs()
    if jobs > 1 and len(grid) > 1:
        rows = [row for chunk in _parallel_chunks(spec, grid, jobs) for row in chunk]
    else:
        rows = _sweep_rows(spec, grid)
    write_csv(args.out, SWEEP_HEADER, rows, out.stream)


def _parallel_chunks(spec, grid, jobs):
    import multiprocessing as mp
    from concurrent.futures import ProcessPoolExecutor

    pieces = [p for p in np.array_split(grid, jobs) if len(p)]
    _SWEEP_CTX["spec"] = spec
    with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as ex:
        return list(ex.map(_sweep_piece, pieces))


_SWEEP_CTX = {}


def _sweep_piece(grid):
    return _sweep_rows(_SWEEP_CTX["spec"], grid)


def cmd_exponent(args, cfg, out):
    spec = _need_spec(cfg)
    fit = genfun.critical_exponent_fit(spec)
    out.kv("exponent", fit.exponent)
    out.kv("intercept", fit.intercept)
    out.kv("fit_residual", fit.residual)
    out.kv("in_reported_range", 0.35 <= fit.exponent <= 1.1)
    if args.out:
        write_csv(args.out, ["eps", "gap"], zip(fit.eps, fit.gaps))


def cmd_finite_dim(args, cfg, out):
    rep = finite_dims.hd_fin(_need_spec(cfg), _lam(args, cfg))
    for k, v in rep.as_dict().items():
        out.kv(k, v)
    out.kv("xi_at_R", list(rep.xi_at_R))


def cmd_amalgam_dim(args, cfg, out):
    if cfg.amalgam is None:
        raise ValidationError("this command needs an [amalgam] section")
    lam = _lam(args, cfg)
    rep = am.hd_amalgam(cfg.amalgam, lam)
    for k, v in rep.as_dict().items():
        out.kv(k, v)
    out.kv("script_F", list(rep.script_F))
    rows = [[i, y, v] for (i, y), v in sorted(rep.fh.values.items())]
    if args.out:
        write_csv(args.out, ["factor", "element", "F_H"], rows)


def cmd_oracle(args, cfg, out):
    spec = _need_spec(cfg)
    lam = _lam(args, cfg)
    N = args.terms or cfg.solver("terms", int, 100)
    text = args.word or cfg.solver("words", str, "")
    words = [w.strip() for w in text.split(";") if w.strip()]
    if not words:
        raise ValidationError("--word is required")
    cap = cfg.solver("state_cap", int, oracle.DEFAULT_STATE_CAP)
    xi = genfun.xi_solve(spec, lam).require()
    rows = []
    for wtext in words:
        if wtext.startswith("xi"):
            i = int(wtext[2:])
            tab = oracle.first_passage_set_series(spec, i, N, state_cap=cap)
            exact = float(xi.xi[i - 1])
        else:
            w = spec.parse_word(wtext)
            tab = oracle.first_visit_series(spec, w, N, state_cap=cap)
            exact = genfun.f_word(spec, xi, w)
        s = tab.value(lam)
        rows.append([wtext, N, lam, s, exact, exact - s, tab.exact])
        out.kv(f"{wtext}.series", s)
        out.kv(f"{wtext}.analytic", exact)
        out.kv(f"{wtext}.gap", exact - s)
    if args.out:
        write_csv(args.out, ["word", "terms", "lambda", "series", "analytic", "gap", "exact_states"], rows)


def cmd_truncation(args, cfg, out):
    spec = _need_spec(cfg)
    text = args.depths or cfg.solver("depths")
    if not text:
        raise ValidationError("--depths is required")
    depths = [int(v) for v in _floats(text, "--depths")]
    lam = args.lam if args.lam is not None else cfg.solver("lambda", float, 1.0)
    tab = genfun.truncation_convergence(spec, depths, lam)
    rows = [[d, z, (tab.gaps[k - 1] if k else None)] for k, (d, z) in enumerate(zip(tab.depths, tab.z))]
    write_csv(args.out, ["depth", "z_star", "gap"], rows, out.stream)


def cmd_simulate(args, cfg, out):
    spec = _need_spec(cfg)
    if cfg.nu is None:
        raise ValidationError("simulate needs an [offspring] section")
    nu = cfg.nu
    mode = args.mode or cfg.solver("mode", str, "zinfty")
    reps = args.reps or cfg.solver("reps", int, 1000)
    seed = args.seed if args.seed is not None else cfg.solver("seed", int, 0)
    G = args.generations or cfg.solver("generations", int, 60)
    batch = cfg.solver("batch", int, simulator.DEFAULT_BATCH)
    jobs = args.jobs
    lam = nu.mean
    if mode == "zinfty":
        text = args.words or cfg.solver("words", str, "")
        targets = []
        for wtext in [w.strip() for w in text.split(";") if w.strip()]:
            if wtext.startswith("G"):
                targets.append(simulator.Target.of_factor(int(wtext[1:]), wtext))
            else:
                targets.append(simulator.Target.of_words([spec.parse_word(wtext)], wtext))
        if not targets:
            raise ValidationError("zinfty mode needs --words")
        ests, run = simulator.estimate_Z_infty_many(spec, nu, targets, reps, G, seed, batch=batch, jobs=jobs)
        xi = genfun.xi_solve(spec, lam)
        rows = []
        for t, e in zip(targets, ests):
            exact = (float(xi.xi[t.factor - 1]) if t.factor is not None
                     else genfun.f_word(spec, xi, next(iter(t.words))))
            rows.append([t.label, e.mean, e.stderr, exact, e.z_score(exact), e.tail_fraction, e.stabilized])
            out.kv(f"{t.label}.mean", e.mean)
            out.kv(f"{t.label}.z", e.z_score(exact))
        out.kv("truncated_replicas", run.n_truncated)
        header = ["target", "mean", "stderr", "analytic", "z_score", "tail_fraction", "stabilized"]
    elif mode == "gw":
        i = args.factor or cfg.solver("factor", int, 1)
        stages = args.stages or cfg.solver("stages", int, 20)
        res = simulator.embedded_gw(spec, nu, i, stages, reps, seed, G=G, batch=batch, jobs=jobs,
                                    stage_cap=cfg.solver("stage_cap", int, 50))
        xi = genfun.xi_solve(spec, lam)
        out.kv("xi", float(xi.xi[i - 1]))
        out.kv("stage1_mean", res.stage1_mean)
        out.kv("stage1_stderr", res.stage1_stderr)
        out.kv("survival", res.survival)
        out.kv("predicted_survival", res.predicted_survival())
        out.kv("capped_replicas", int(res.capped.sum()))
        alive = (res.stage_sizes > 0).mean(axis=0)
        rows = [[k, m, a] for k, (m, a) in enumerate(zip(res.stage_means(), alive))]
        header = ["stage", "mean_size", "alive_fraction"]
    elif mode == "trace":
        radius = args.radius or cfg.solver("radius", int, 12)
        run = simulator.run_brw(spec, nu, G, seed=seed, reps=reps, trace_radius=radius, batch=batch, jobs=jobs)
        tr = simulator.trace_spheres(run)
        bound = 1.0 / genfun.z_star(spec, lam) if lam <= genfun.radius_R(spec).value else math.nan
        out.kv("inverse_z_star", bound)
        rows = [[m, c, g, bound] for m, c, g in tr.rows()]
        header = ["m", "mean_visited", "growth", "inverse_z_star"]
    elif mode == "marginal":
        n = args.generation or cfg.solver("generation", int, 3)
        particles = args.particles or cfg.solver("particles", int, 10 ** 6)
        emp, total = simulator.marginal_distribution(spec, nu, n, particles, seed, batch=batch, jobs=jobs)
        exact = oracle.convolution_powers(spec, n).distribution(n)
        tv = oracle.total_variation(emp, exact)
        out.kv("particles", total)
        out.kv("tv_distance", tv)
        keys = sorted(set(emp) | set(exact), key=lambda w: (w.length, w.blocks))
        rows = [[spec.format_word(w), emp.get(w, 0.0), exact.get(w, 0.0)] for w in keys]
        header = ["word", "empirical", "exact"]
    else:
        raise ValidationError(f"unknown simulate mode {mode!r}")
    if args.out:
        write_csv(args.out, header, rows)


COMMANDS = {
    "dim": cmd_dim, "dim-omega": cmd_dim_omega, "phase": cmd_phase, "sweep": cmd_sweep,
    "exponent": cmd_exponent, "finite-dim": cmd_finite_dim, "amalgam-dim": cmd_amalgam_dim,
    "oracle": cmd_oracle, "simulate": cmd_simulate, "truncation": cmd_truncation,
}


def cmd_run(args, cfg, out):
    """Run the config's default command."""
    name = cfg.solver("default")
    if name not in COMMANDS:
        raise ValidationError(f"[solver] default must name a command, got {name!r}")
    return COMMANDS[name](args, cfg, out)


def build_parser():
    p = argparse.ArgumentParser(prog="freebrw", description="Branching random walks on free products.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in list(COMMANDS) + ["run", "check"]:
        s = sub.add_parser(name)
        s.add_argument("config")
        s.add_argument("--lambda", dest="lam", type=float)
        s.add_argument("--out")
        s.add_argument("--grid")
        s.add_argument("--jobs", type=int)
        s.add_argument("--word")
        s.add_argument("--words")
        s.add_argument("--terms", type=int)
        s.add_argument("--depths")
        s.add_argument("--mode", choices=["zinfty", "gw", "trace", "marginal"])
        s.add_argument("--reps", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--generations", type=int)
        s.add_argument("--factor", type=int)
        s.add_argument("--stages", type=int)
        s.add_argument("--radius", type=int)
        s.add_argument("--generation", type=int)
        s.add_argument("--particles", type=int)
    return p


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    args = build_parser().parse_args(argv)
    out = Output(stdout)
    try:
        cfg = load_config(args.config)
        if args.command == "check":
            out.kv("factors", cfg.r)
            out.kv("valid", True)
            return 0
        fn = cmd_run if args.command == "run" else COMMANDS[args.command]
        fn(args, cfg, out)
    except ValidationError as exc:
        print(f"error: {exc}", file=stderr)
        return 1
    except ConvergenceError as exc:
        print(f"error: {exc}", file=stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
