"""Command-line entry point ``qsalab``.

Exit codes: 0 on success, 2 on a configuration error, 3 on a numerical
failure (value iteration or PBE not converging, non-finite iterates, a failed
verification suite).
"""

from __future__ import annotations

import argparse
import inspect
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .engine import NumericalError
from .features import is_tabular
from .mdp import ValueIterationError, bellman_error, dumps_structured, value_iteration
from .meanflow import MeanFlowModel, flow_matrices, linearize, mean_flow, solve_pbe
from .policy import NotUnichainError
from .qlearn import LinearQ, RunRecord, relative_shift, run_experiment, spawn_seeds
from .stats import (SlowMixingError, bands_svg, confidence_band, histogram, histogram_svg,
                    records_csv, tail_index)
from .verify import SUITES, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    return cfg.override(seed=getattr(args, "seed", None), out=getattr(args, "out", None),
                        n_runs=getattr(args, "runs", None), n_steps=getattr(args, "steps", None))


def _model(cfg: ExperimentConfig, mdp=None) -> MeanFlowModel:
    mdp = cfg.build_mdp() if mdp is None else mdp
    e = cfg.raw["estimator"]
    return MeanFlowModel(mdp, cfg.build_policy(), cfg.build_basis(mdp), variant=e["variant"],
                         delta=float(e["delta"]))


def theta_from_q(basis: np.ndarray, Q: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Least-squares coordinates of ``Q`` in the basis (exact for the tabular basis)."""
    Phi = basis[:, mask].T
    return np.linalg.lstsq(Phi, Q[mask], rcond=None)[0]


def reference_theta(cfg: ExperimentConfig, mdp, basis, q_star) -> tuple[np.ndarray, str]:
    """Target parameter for error norms: from ``Q*`` when tabular, else the PBE root."""
    e = cfg.raw["estimator"]
    if is_tabular(basis, mdp.mask) and cfg.raw["policy"]["kind"] == "oblivious" \
            and e["variant"] != "on_policy":
        Q = np.where(mdp.mask, q_star, 0.0)
        if e["variant"] == "relative":
            nu = mdp.mask / mdp.mask.sum()
            Q = Q - relative_shift(q_star, nu, mdp.discount, float(e["delta"]), mdp.mask)
        return theta_from_q(basis, Q, mdp.mask), "value_iteration"
    res = solve_pbe(_model(cfg, mdp))
    if not res.converged:
        raise NumericalFailure(f"PBE solve did not converge (residual {res.residual:.3e})")
    return res.theta, "solve_pbe"


# --- subcommands --------------------------------------------------------------

def cmd_solve(args) -> int:
    cfg = _load_config(args)
    mdp = cfg.build_mdp()
    Q = value_iteration(mdp)
    resid = bellman_error(mdp, Q)[1]
    basis = cfg.build_basis(mdp)
    out = Path(cfg.raw["out"])
    doc = {"mdp": mdp.name, "discount": mdp.discount, "q_star": Q, "bellman_residual": resid}
    _write(out / "q_star.json", dumps_structured(doc))
    theta, source = reference_theta(cfg, mdp, basis, Q)
    _write(out / "theta_star.json", dumps_structured({"theta_star": theta, "source": source}))
    print(f"Q* written to {out / 'q_star.json'} (Bellman residual {resid:.3e})")
    print(f"theta* written to {out / 'theta_star.json'} ({source})")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    r = cfg.raw
    mdp = cfg.build_mdp()
    basis = cfg.build_basis(mdp)
    pol = cfg.build_policy()
    est = cfg.build_estimator()
    sched = cfg.schedules()
    Q = value_iteration(mdp)
    theta_star, _ = reference_theta(cfg, mdp, basis, Q)
    q0 = LinearQ(basis, np.zeros(basis.shape[0]), mdp.mask)
    out = Path(r["out"])
    _write(out / "config.json", cfg.dumps())
    _write(out / "theta_star.json", dumps_structured({"theta_star": theta_star}))
    records = []
    for s in spawn_seeds(r["seed"], r["n_runs"]):
        rec = run_experiment(mdp, pol, q0, est, sched, r["n_steps"], s, x0=r["x0"], q_star=Q)
        _write(out / "records" / f"run_{s}.json", dumps_structured(rec.to_dict()))
        records.append(rec)
        print(f"seed {s}: status {rec.status}, final Bellman error {rec.bellman_max[-1]:.4g}, "
              f"span error {rec.span_error[-1]:.4g}")
    _write(out / "runs.csv", records_csv(records, theta_star))
    bad = [rec.seed for rec in records if rec.status != "ok"]
    if bad:
        print(f"non-finite iterates for seeds {bad}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_verify(args) -> int:
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        kw = {}
        if name == "negativity" and args.epsilon_factor is not None:
            kw["epsilon_factor"] = args.epsilon_factor
        if args.instances is not None and "n_instances" in inspect.signature(SUITES[name]).parameters:
            kw["n_instances"] = args.instances
        res = run_suite(name, **kw)
        for line in res.lines():
            print(line)
        ok &= res.passed
    return EXIT_OK if ok else EXIT_NUMERICAL


def _load_records(d: Path):
    files = sorted((d / "records").glob("run_*.json"))
    if not files:
        raise ConfigError(f"records: no run_*.json files under {d / 'records'}")
    recs = [RunRecord.from_dict(json.loads(f.read_text())) for f in files]
    ts = d / "theta_star.json"
    theta_star = np.array(json.loads(ts.read_text())["theta_star"]) if ts.exists() else None
    return recs, theta_star


def cmd_report(args) -> int:
    out = Path(args.out or "qsalab-report")
    spans, bells, rows = {}, {}, []
    hist_done = False
    for d in map(Path, args.records):
        recs, theta_star = _load_records(d)
        label = f"{d.name} ({recs[0].config['estimator']['variant']})"
        n = recs[0].snapshot_n
        bell = np.stack([r.bellman_max for r in recs])
        span = np.stack([r.span_error for r in recs])
        keep = n > 0
        bells[label] = confidence_band(bell[:, keep], n[keep])
        spans[label] = confidence_band(span[:, keep], n[keep])
        row = {"records": str(d), "n_runs": len(recs), "n_final": int(n[-1]),
               "bellman_final_mean": float(np.mean(bell[:, -1])),
               "span_final_mean": float(np.mean(span[:, -1]))}
        if theta_star is not None:
            err = np.stack([r.final for r in recs]) - theta_star
            k = args.coordinate if args.coordinate is not None else int(np.argmax(np.abs(err).mean(axis=0)))
            h = histogram(err[:, k])
            row.update({"coordinate": k, "median_abs_error": float(np.median(np.abs(err[:, k]))),
                        "iqr": h.iqr, "range": h.value_range})
            try:
                row["tail_index"] = tail_index(err[:, k])
            except ValueError:
                row["tail_index"] = None
            if not hist_done:
                _write(out / "histogram.svg",
                       histogram_svg(h, title=f"final error, coordinate {k}", xlabel="error"))
                _write(out / "histogram.json", dumps_structured(h.to_dict()))
                hist_done = True
        rows.append(row)
    _write(out / "bellman_bands.svg", bands_svg(bells, title="Bellman error", ylabel="max Bellman error"))
    _write(out / "span.svg", bands_svg(spans, title="span error", ylabel="span seminorm error"))
    _write(out / "summary.json", dumps_structured(rows))
    keys = list(dict.fromkeys(k for r in rows for k in r))
    lines = ["\t".join(keys)] + ["\t".join(str(r.get(k, "")) for k in keys) for r in rows]
    _write(out / "summary.tsv", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _parse_theta(text, d):
    if text is None:
        return np.zeros(d)
    vals = np.array(json.loads(text) if text.strip().startswith("[") else
                    [float(v) for v in text.split(",")], dtype=float)
    if vals.shape != (d,):
        raise ConfigError(f"theta: expected {d} values, got {vals.size}")
    return vals


def cmd_meanflow(args) -> int:
    cfg = _load_config(args)
    model = _model(cfg)
    theta = _parse_theta(args.theta, model.d)
    A, b = flow_matrices(model, theta)
    ev = np.linalg.eigvals(A)
    doc = {"theta": theta, "f": mean_flow(model, theta), "A": A, "b": b,
           "eigenvalues": np.column_stack([ev.real, ev.imag])}
    text = dumps_structured(doc)
    if args.out:
        _write(Path(args.out) / "meanflow.json", text)
    print(text, end="")
    return EXIT_OK


def cmd_pbe(args) -> int:
    cfg = _load_config(args)
    model = _model(cfg)
    res = solve_pbe(model)
    doc = {"theta_star": res.theta, "residual": res.residual, "converged": res.converged,
           "iterations": res.iterations}
    if res.converged:
        lin = linearize(model, res.theta)
        ev = lin.eigenvalues
        doc.update({"eigenvalues": np.column_stack([ev.real, ev.imag]), "hurwitz": lin.hurwitz,
                    "near_switch": lin.near_switch})
    text = dumps_structured(doc)
    if args.out:
        _write(Path(args.out) / "pbe.json", text)
    print(text, end="")
    if not res.converged:
        raise NumericalFailure(f"PBE solve did not converge (residual {res.residual:.3e})")
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsalab", description="Q-learning and stochastic approximation laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, runs=False):
        sp.add_argument("--config", help="JSON experiment configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if runs:
            sp.add_argument("--runs", type=int)
            sp.add_argument("--steps", type=int)

    sp = sub.add_parser("solve", help="value iteration and target parameter")
    common(sp)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("run", help="simulate Q-learning runs")
    common(sp, runs=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("verify", help="run an invariant suite")
    sp.add_argument("suite", choices=sorted(SUITES) + ["all"])
    sp.add_argument("--epsilon-factor", type=float, help="negativity suite: eps / eps_gamma")
    sp.add_argument("--instances", type=int)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("report", help="figures and tables from run records")
    sp.add_argument("records", nargs="+", help="output directories of 'qsalab run'")
    sp.add_argument("--out", help="report directory")
    sp.add_argument("--coordinate", type=int, help="coordinate for the error histogram")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("meanflow", help="dump A(theta), b(theta) and eigenvalues")
    common(sp)
    sp.add_argument("--theta", help="comma-separated or JSON list; zeros by default")
    sp.set_defaults(func=cmd_meanflow)

    sp = sub.add_parser("pbe", help="solve the projected Bellman equation")
    common(sp)
    sp.set_defaults(func=cmd_pbe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, NumericalError, ValueIterationError, NotUnichainError,
            SlowMixingError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
