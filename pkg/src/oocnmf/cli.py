"""Command line: ``oocnmf {gen,factorize,select-k,bench,replay}``.

Exit codes: 0 success, 2 usage / bad input, 3 runtime failure.  Failures
print one JSON object on stderr.  ``OOCNMF_LOG=error|info|debug`` sets
the log level.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import subprocess
import sys
import time

import numpy as np

from . import __version__, fileio
from .comm import spawn_group
from .distributed import auto_config, nmf_distributed, source_info
from .partition import PlanError, make_plan, memory_estimate
from .serial import NmfConfig
from .store import StoreConfig

log = logging.getLogger("oocnmf")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _ints(s):
    try:
        vals = [int(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from exc
    return vals


def _now():
    return dt.datetime.now(dt.timezone.utc).isoformat()


def build_parser():
    p = _Parser(prog="oocnmf", description="Distributed out-of-core NMF")
    p.add_argument("--version", action="version", version=f"oocnmf {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic matrix")
    g.add_argument("--kind", choices=["lowrank", "sparse"], default="lowrank")
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--k", type=int, default=4, help="true rank (lowrank)")
    g.add_argument("--features", choices=["gaussian_bumps", "uniform"], default="gaussian_bumps")
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--density", type=float, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help=".mtx or PDN1 path")
    g.add_argument("--w0", help="also write the ground-truth W")
    g.add_argument("--h0", help="also write the ground-truth H")

    f = sub.add_parser("factorize", help="factorise a matrix")
    f.add_argument("--input", required=True)
    f.add_argument("--k", type=int, required=True)
    f.add_argument("--eta", type=float, default=1e-4)
    f.add_argument("--max-iters", type=int, default=1000)
    f.add_argument("--check-interval", type=int, default=10)
    f.add_argument("--epsilon", type=float, default=1e-12)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--init-w")
    f.add_argument("--init-h")
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--backend", choices=["loopback", "threads", "tcp"], default=None)
    f.add_argument("--rank", type=int)
    f.add_argument("--peers", help="host:port,... (one per rank; rank 0's is the rendezvous)")
    f.add_argument("--spawn-local", type=int, metavar="N",
                   help="launch N local processes over tcp loopback")
    f.add_argument("--timeout", type=float, default=60.0)
    f.add_argument("--budget", type=int, help="per-worker memory budget in bytes")
    f.add_argument("--batches", type=int, help="n_B; default: smallest that fits --budget, else 1")
    f.add_argument("--n-cb", type=int, default=2)
    f.add_argument("--prefetch", action="store_true")
    f.add_argument("--strategy", choices=["auto", "cnmf", "rnmf"], default="auto")
    f.add_argument("--out", default="oocnmf_out")
    f.add_argument("--dump-plan", action="store_true", help="print the partition plan as JSON and exit")
    f.add_argument("--debug-replicas", action="store_true")

    s = sub.add_parser("select-k", help="estimate the latent dimension")
    s.add_argument("--input", required=True)
    s.add_argument("--k-min", type=int, required=True)
    s.add_argument("--k-max", type=int, required=True)
    s.add_argument("--perturbations", type=int, default=16)
    s.add_argument("--delta", type=float, default=0.03)
    s.add_argument("--sil-threshold", type=float, default=0.75)
    s.add_argument("--prune-factor", type=float, default=1.5,
                   help="drop members with error above this multiple of the median (0 keeps all)")
    s.add_argument("--max-iters", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--batches", type=int, default=1)
    s.add_argument("--backend", choices=["threads", "tcp"], default="threads")
    s.add_argument("--out", default="oocnmf_select")

    b = sub.add_parser("bench", help="per-phase timing sweep (long-form CSV)")
    b.add_argument("--m", type=int, default=512)
    b.add_argument("--n", type=int, default=1024)
    b.add_argument("--k", type=_ints, default=[8])
    b.add_argument("--workers", type=_ints, default=[1])
    b.add_argument("--batches", type=_ints, default=[1])
    b.add_argument("--strategy", choices=["auto", "cnmf", "rnmf"], default="auto")
    b.add_argument("--density", type=float, default=1.0)
    b.add_argument("--iters", type=int, default=5)
    b.add_argument("--backend", choices=["threads", "tcp"], default="threads")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default="-", help="CSV path or - for stdout")

    r = sub.add_parser("replay", help="re-run a job from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="output directory (default: the manifest's)")
    return p


# -- gen ---------------------------------------------------------------------
def cmd_gen(args):
    from .synth import SynthSpec, gen_lowrank, gen_sparse_random
    if args.kind == "sparse":
        if args.density is None:
            raise UsageError("--density is required for --kind sparse")
        try:
            a = gen_sparse_random(args.m, args.n, args.density, args.seed)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        fileio.save_matrix(args.out, a)
        return EXIT_OK
    try:
        spec = SynthSpec(args.m, args.n, args.k, args.features, args.noise, args.density, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    a, w0, h0 = gen_lowrank(spec)
    fileio.save_matrix(args.out, a)
    if args.w0:
        fileio.save_matrix(args.w0, w0)
    if args.h0:
        fileio.save_matrix(args.h0, h0)
    return EXIT_OK


# -- factorize -----------------------------------------------------------------
def _load_source(path):
    """PDN1 files are streamed by the chunk store; Matrix Market is read into memory."""
    if not os.path.exists(path):
        raise UsageError(f"input not found: {path}")
    if path.endswith(".mtx"):
        return fileio.read_mtx(path)
    fileio.read_header(path)
    return path


def _factorize_setup(args):
    source = _load_source(args.input)
    (m, n), nnz = source_info(source)
    if args.init_w or args.init_h:
        cfg_init = dict(init="from_files", init_w=args.init_w, init_h=args.init_h)
    else:
        cfg_init = {}
    try:
        cfg = NmfConfig(k=args.k, eta=args.eta, max_iters=args.max_iters,
                        error_check_interval=args.check_interval, epsilon=args.epsilon,
                        seed=args.seed, **cfg_init)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        if args.budget is not None and args.batches is None:
            plan, store_cfg, report = auto_config((m, n), args.k, args.workers, args.budget,
                                                  args.strategy, nnz, args.n_cb, cfg.block_rows,
                                                  args.prefetch)
        else:
            plan = make_plan(m, n, args.k, args.workers, args.batches or 1, args.strategy)
            density = 1.0 if nnz is None else max(nnz / (m * n), 1e-12)
            report, _ = memory_estimate(plan, density, None, args.n_cb, cfg.block_rows)
            budget = None if args.budget is None else args.budget - report.fixed
            if budget is not None and budget <= 0:
                raise PlanError(f"budget {args.budget} B below fixed footprint {report.fixed} B")
            store_cfg = StoreConfig(budget, args.n_cb, args.prefetch)
    except PlanError as exc:
        raise UsageError(str(exc)) from exc
    return source, cfg, plan, store_cfg, report


def _write_trace(path, trace):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["iteration", "relative_error"])
        for it, e in trace:
            wr.writerow([it, repr(float(e))])


def _rank_report(res, plan, cfg, store_cfg, report):
    out = res.report()
    out["rank"] = res.rank
    out["collective_stats"] = res.collective_stats.to_dict(with_records=False)
    out["store_counters"] = res.store_counters.to_dict()
    out["plan"] = plan.to_dict()
    out["config"] = cfg.to_dict()
    out["store"] = {"budget_bytes": store_cfg.budget_bytes, "n_cb": store_cfg.n_cb,
                    "prefetch": store_cfg.prefetch}
    out["memory_estimate"] = report.to_dict()
    return out


def _spawn_local(args, argv):
    from .tcp import free_endpoints
    n = args.spawn_local
    peers = ",".join(free_endpoints(n))
    base = _strip_flags(argv, {"--spawn-local": 1, "--workers": 1, "--backend": 1,
                               "--rank": 1, "--peers": 1})
    env = dict(os.environ, OOCNMF_LAUNCH_ARGV=json.dumps(list(argv)))
    procs = []
    for r in range(n):
        cmd = [sys.executable, "-m", "oocnmf", *base, "--workers", str(n), "--backend", "tcp",
               "--rank", str(r), "--peers", peers]
        procs.append(subprocess.Popen(cmd, env=env))
    codes = [p.wait() for p in procs]
    return max(codes)


def _strip_flags(argv, flags):
    out, skip = [], 0
    for tok in argv:
        if skip:
            skip -= 1
            continue
        name = tok.split("=", 1)[0]
        if name in flags:
            skip = 0 if "=" in tok else flags[name]
            continue
        out.append(tok)
    return out


def cmd_factorize(args, argv):
    if args.spawn_local:
        if args.spawn_local < 1:
            raise UsageError("--spawn-local needs N >= 1")
        return _spawn_local(args, argv)
    backend = args.backend or ("loopback" if args.workers == 1 else "threads")
    if backend == "loopback" and args.workers != 1:
        raise UsageError("loopback backend supports --workers 1 only")
    if backend == "tcp" and (args.rank is None or not args.peers):
        raise UsageError("--backend tcp needs --rank and --peers")
    source, cfg, plan, store_cfg, report = _factorize_setup(args)
    if args.dump_plan:
        print(json.dumps({"plan": plan.to_dict(), "memory_estimate": report.to_dict(),
                          "store_budget_bytes": store_cfg.budget_bytes}, indent=2))
        return EXIT_OK
    os.makedirs(args.out, exist_ok=True)
    started, t0 = _now(), time.perf_counter()
    if backend == "tcp":
        peers = args.peers.split(",")
        group = spawn_group(args.workers, "tcp", endpoints=peers, rank=args.rank, timeout=args.timeout)
    else:
        group = spawn_group(args.workers, backend, timeout=args.timeout)
    with group:
        results = nmf_distributed(source, cfg, plan, group, store_cfg, debug=args.debug_replicas)
    outputs = {"reports": []}
    for res in results:
        path = os.path.join(args.out, f"report_rank{res.rank}.json")
        with open(path, "w") as fh:
            json.dump(_rank_report(res, plan, cfg, store_cfg, report), fh, indent=2)
        outputs["reports"].append(path)
    lead = results[0]
    if lead.rank == 0:
        outputs["W"] = os.path.join(args.out, "W.pdn1")
        outputs["H"] = os.path.join(args.out, "H.pdn1")
        outputs["error_trace"] = os.path.join(args.out, "error_trace.csv")
        fileio.write_pdn1(outputs["W"], lead.W)
        fileio.write_pdn1(outputs["H"], lead.H)
        _write_trace(outputs["error_trace"], lead.error_trace)
        _write_manifest(args, argv, outputs, started, t0,
                        {"nmf": cfg.to_dict(), "plan": plan.to_dict(), "backend": backend,
                         "store_budget_bytes": store_cfg.budget_bytes, "n_cb": store_cfg.n_cb})
        log.info("final relative error %.6e after %d iterations", lead.final_error, lead.iterations_run)
    return EXIT_OK


def _write_manifest(args, argv, outputs, started, t0, config):
    manifest = {
        "command": args.command,
        # ranks started by --spawn-local record the launcher's command line
        "argv": json.loads(os.environ.get("OOCNMF_LAUNCH_ARGV", "null")) or list(argv),
        "config": config,
        "version": f"oocnmf {__version__}",
        "outputs": outputs,
        "started": started,
        "finished": _now(),
        "wall_seconds": time.perf_counter() - t0,
        "cwd": os.getcwd(),
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


# -- select-k ------------------------------------------------------------------
def cmd_select_k(args, argv):
    from .selection import PlanConfig, SelectionConfig, select_k
    source = _load_source(args.input)
    a = fileio.load_matrix(source) if isinstance(source, str) else source
    try:
        sel = SelectionConfig(args.k_min, args.k_max, args.perturbations, args.delta,
                              args.sil_threshold,
                              prune_factor=args.prune_factor or None,
                              nmf=NmfConfig(k=1, eta=0.0, max_iters=args.max_iters,
                                            error_check_interval=args.max_iters),
                              seed=args.seed, n_jobs=args.jobs)
        sel.validate(a.shape)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    plan_cfg = None
    if args.workers > 1 or args.batches > 1:
        plan_cfg = PlanConfig(args.workers, args.batches, backend=args.backend)
    os.makedirs(args.out, exist_ok=True)
    started, t0 = _now(), time.perf_counter()
    rep = select_k(a, sel, plan_cfg)
    outputs = {"json": os.path.join(args.out, "selection.json"),
               "csv": os.path.join(args.out, "selection.csv")}
    rep.write_json(outputs["json"])
    rep.write_csv(outputs["csv"])
    _write_manifest(args, argv, outputs, started, t0,
                    {"k_range": [args.k_min, args.k_max], "perturbations": args.perturbations,
                     "delta": args.delta, "sil_threshold": args.sil_threshold,
                     "prune_factor": args.prune_factor, "max_iters": args.max_iters, "seed": args.seed})
    print(json.dumps({"chosen_k": rep.to_dict()["chosen_k"], "rationale": rep.selection_rationale}))
    return EXIT_OK


# -- bench ---------------------------------------------------------------------
BENCH_PHASES = ("h_update", "w_update", "allreduce", "error_check", "io", "total")


def cmd_bench(args, argv):
    from .synth import gen_sparse_random
    if not args.k or not args.workers or not args.batches:
        raise UsageError("empty sweep: --k, --workers and --batches each need at least one value")
    rng = np.random.default_rng(args.seed)
    if args.density < 1:
        a = gen_sparse_random(args.m, args.n, args.density, args.seed)
    else:
        a = rng.random((args.m, args.n))
    rows = []
    for k in args.k:
        for nw in args.workers:
            for nb in args.batches:
                try:
                    plan = make_plan(args.m, args.n, k, nw, nb, args.strategy)
                except PlanError as exc:
                    raise UsageError(str(exc)) from exc
                cfg = NmfConfig(k=k, eta=0.0, max_iters=args.iters, error_check_interval=args.iters,
                                seed=args.seed)
                res = nmf_distributed(a, cfg, plan, backend=args.backend if nw > 1 else "loopback")[0]
                c = res.counters
                for ph in BENCH_PHASES:
                    if ph == "total":
                        secs, nbytes, flops = c.total_seconds, 0, sum(c.flops.values())
                    else:
                        secs, flops = c.seconds[ph], c.flops.get(ph, 0)
                        nbytes = (res.collective_stats.bytes if ph == "allreduce"
                                  else c.bytes_read if ph == "io" else 0)
                    rows.append([plan.strategy, nw, nb, k, ph, repr(secs), nbytes, flops])
    header = ["strategy", "N", "n_B", "k", "phase", "seconds", "bytes", "flops"]
    fh = sys.stdout if args.out == "-" else open(args.out, "w", newline="")
    try:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# -- replay ----------------------------------------------------------------------
def cmd_replay(args, argv):
    try:
        with open(args.manifest) as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest: {exc}") from exc
    old = manifest["argv"]
    if args.out:
        old = _strip_flags(old, {"--out": 1}) + ["--out", args.out]
    cwd = os.getcwd()
    os.chdir(manifest.get("cwd", cwd))
    try:
        return main(old)
    finally:
        os.chdir(cwd)


COMMANDS = {
    "gen": lambda a, argv: cmd_gen(a),
    "factorize": cmd_factorize,
    "select-k": cmd_select_k,
    "bench": cmd_bench,
    "replay": cmd_replay,
}


def _configure_logging():
    level = os.environ.get("OOCNMF_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _fail(code, exc):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}),
          file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args, argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except (FileNotFoundError, fileio.FormatError) as exc:
        return _fail(EXIT_USAGE, exc)
    except Exception as exc:  # noqa: BLE001 - every module error maps to exit 3
        log.debug("failure", exc_info=True)
        return _fail(EXIT_RUNTIME, exc)
