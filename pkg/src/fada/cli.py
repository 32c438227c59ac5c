"""Command line entry point: run, gradcheck, bound, datagen.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import data as D
from . import federation as F
from . import gradcheck
from . import models as M
from . import theory

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _config_problems(exc: cfgmod.ConfigError) -> int:
    _err("invalid configuration:")
    for p in exc.problems:
        _err(f"  {p}")
    return EXIT_USAGE


def cmd_run(args) -> int:
    try:
        cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
        if args.ablation:
            cfg = cfg.with_ablation(args.ablation)
    except cfgmod.ConfigError as exc:
        return _config_problems(exc)
    out = Path(args.out or cfg.out_dir)
    try:
        art = F.run(cfg, jobs=args.jobs, keep_payloads=args.audit_full)
    except (D.DataError, M.ArchitectureError) as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    F.write_artifacts(art, out, audit_full=args.audit_full)
    print(f"target_acc={art.final_accuracy!r}")
    if not art.audit.ok:
        for v in art.audit.violations:
            _err(f"privacy violation: round {v.round} {v.sender} -> {v.receiver} ({v.kind}): {v.reason}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = gradcheck.run_all(instances=args.instances, seed=args.seed, stack=not args.no_stack)
    for line in rep.lines():
        print(line)
    if not rep.ok:
        _err("gradient check failed: " + ", ".join(rep.failures))
        return EXIT_CHECK
    return EXIT_OK


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else str(v).lower() if isinstance(v, bool) else v
                        for v in r.values()])


def _checkpoint_bound(bc: cfgmod.BoundConfig) -> theory.BoundReport:
    run_dir = Path(bc.run_dir)
    cfg = cfgmod.from_dict(json.loads((run_dir / "config.json").read_text(encoding="utf-8")))
    doms = F.build_domains(cfg)
    specs = F.model_specs(cfg, doms.target_train.dim, doms.num_classes)
    rng = np.random.default_rng(0)
    comps = {}
    for kind in M.TARGET_KINDS:
        comps[kind] = M.build(specs[kind], rng)
        M.load_checkpoint(run_dir / "checkpoints" / f"{F.TARGET}_{M.SHORT[kind]}.ckpt", comps[kind])
    n = len(doms.sources)
    alphas = np.full(n, 1.0 / n)
    hist = run_dir / "mask_history.csv"
    if hist.exists():
        with open(hist, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            last = max(int(r["round"]) for r in rows)
            alphas = np.array([float(r["weight"]) for r in rows if int(r["round"]) == last])
    _err("note: a trained checkpoint has no oracle target labels in the bound path; "
         "emitting an estimated (not certified) report")
    return F.neural_bound_report(M.ModelBundle("target", comps), doms, alphas, cfg.seed, bc.delta)


def cmd_bound(args) -> int:
    try:
        bc = cfgmod.load_config(args.config, cls=cfgmod.BoundConfig) if args.config else cfgmod.BoundConfig()
    except cfgmod.ConfigError as exc:
        return _config_problems(exc)
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    if bc.run_dir:
        try:
            rep = _checkpoint_bound(bc)
        except (OSError, ValueError) as exc:
            _err(f"error: cannot evaluate run directory {bc.run_dir}: {exc}")
            return EXIT_USAGE
        (out / "bound.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        print(f"bound={rep.total!r} mode={rep.mode}")
        return EXIT_OK
    if bc.sweep == "validity":
        rows = theory.validity_sweep(bc.instances, bc.N, bc.m, bc.delta, bc.seed)
        _write_rows(out / "validity_sweep.csv", rows)
        rate = float(np.mean([r["holds"] for r in rows]))
        print(f"holds_rate={rate!r}")
        return EXIT_OK if rate >= 1.0 - bc.delta else EXIT_CHECK
    if bc.sweep == "mixture":
        rows = theory.mixture_sweep(bc.instances, bc.seed, bc.max_sources, bc.m)
        _write_rows(out / "mixture_sweep.csv", rows)
        violations = sum(not r["holds"] for r in rows)
        print(f"violations={violations}")
        return EXIT_OK if violations == 0 else EXIT_CHECK
    inst = theory.random_instance(np.random.default_rng(bc.seed), N=bc.N, m=bc.m)
    rep = theory.finite_bound_report(inst, bc.delta)
    (out / "bound.json").write_text(rep.to_json() + "\n", encoding="utf-8")
    print(f"bound={rep.total!r} truth={rep.truth!r}")
    return EXIT_OK if rep.total >= rep.truth else EXIT_CHECK


def cmd_datagen(args) -> int:
    try:
        cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    except cfgmod.ConfigError as exc:
        return _config_problems(exc)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = [(F.source_id(i), s) for i, s in enumerate(cfg.domains.sources)] + [(F.TARGET, cfg.domains.target)]
    try:
        for default_id, spec in specs:
            ds = F.make_domain(spec, cfg.seed, default_id)
            path = out / f"{ds.domain_id}.csv"
            D.export_csv(ds, path)
            print(path)
    except D.DataError as exc:
        _err(f"error: {exc}")
        return EXIT_USAGE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fada", description="Federated adversarial domain adaptation simulator")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a federated experiment")
    r.add_argument("--config", help="JSON run config (defaults when omitted)")
    r.add_argument("--out", help="output directory (overrides out_dir)")
    r.add_argument("--jobs", type=int, default=1, help="concurrent node workers")
    r.add_argument("--ablation", choices=sorted(cfgmod.ABLATION_PRESETS), help="ablation preset")
    r.add_argument("--audit-full", action="store_true", help="keep full payloads in the message log")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    g.add_argument("--instances", type=int, default=gradcheck.INSTANCES)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-stack", action="store_true", help="skip the end-to-end stack check")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bound", help="evaluate the weighted error bound")
    b.add_argument("--config", help="JSON bound config")
    b.add_argument("--out", help="output directory")
    b.set_defaults(func=cmd_bound)

    d = sub.add_parser("datagen", help="write the configured domains as CSV files")
    d.add_argument("--config", help="JSON run config")
    d.add_argument("--out", help="output directory")
    d.set_defaults(func=cmd_datagen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        _err("--jobs must be at least 1")
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
