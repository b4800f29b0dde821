"""Command-line entry point: ingest data, run one pipeline, write artifacts and a JSON report."""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import clustering, framework, io, kernel, lowrank, tensor
from .errors import ContractViolation, NonConvergenceError
from .linalg import best_rank_k, thin_svd
from .rng import child_seed
from .sampler import QueryLedger, qsample

SCHEMA = "v1"
COMMANDS = ("coreset-l2", "coreset-lp", "coreset-ridge", "coreset-cluster", "lowrank-matrix", "lowrank-kernel",
            "lowrank-tensor", "curt", "select-data", "bench-queries")
REPORT_KEYS = ("schema", "task", "n", "d", "k", "p", "eps", "delta", "seed", "coreset_size", "cost_ratio",
               "ledger", "wall_time_ms", "deviations")


class Unconverged(Exception):
    """Pipeline finished but an iterative solver hit its iteration cap."""


# ---------------------------------------------------------------- helpers

def parse_kernel(text: str, points: np.ndarray) -> kernel.KernelSpec:
    """'rbf', 'rbf:gamma=0.5', 'poly:degree=3,coef0=1' or 'linear'."""
    kind, _, rest = text.partition(":")
    opts = {}
    for item in filter(None, rest.split(",")):
        key, _, val = item.partition("=")
        if key not in ("gamma", "degree", "coef0"):
            raise ContractViolation(f"unknown kernel option {key!r}")
        try:
            opts[key] = int(val) if key == "degree" else float(val)
        except ValueError:
            raise ContractViolation(f"bad value for kernel option {key!r}: {val!r}") from None
    return kernel.KernelSpec(points, kind, **opts)


def _load(args) -> np.ndarray:
    if not args.input:
        raise ContractViolation("--input is required")
    fmt = args.format or io.guess_format(args.input)
    return io.ingest(args.input, fmt)


def _matrix(args) -> np.ndarray:
    A = _load(args)
    if A.ndim != 2:
        raise ContractViolation("this command needs a matrix input")
    return A


def _need_k(args, limit: int) -> int:
    if args.k is None:
        raise ContractViolation("--k is required")
    if not 1 <= args.k <= limit:
        raise ContractViolation(f"--k={args.k} out of range 1..{limit}")
    return args.k


def _outdir(args) -> Path | None:
    if not args.output:
        return None
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_subset(args, W: framework.WeightedSubset) -> None:
    out = _outdir(args)
    if out is not None:
        io.write_coreset(out / "coreset.csv", W.indices, W.weights)


def _write_factors(args, **mats) -> None:
    out = _outdir(args)
    if out is not None:
        for name, M in mats.items():
            io.write_matrix(out / f"{name}.csv", M)


def _extreme(values) -> float:
    """The value farthest from 1."""
    values = np.asarray(values, dtype=float)
    return float(values[np.argmax(np.abs(values - 1.0))])


def _subset(n: int, args, build, scheme: str) -> framework.WeightedSubset:
    if args.size is not None and args.size >= n:
        return framework.WeightedSubset.everything(n, "rows", scheme)
    return build()


# ---------------------------------------------------------------- commands

def cmd_coreset_l2(args, ledger, report):
    A = _matrix(args)
    n, d = A.shape
    cfg = framework.SchemeConfig("l2", eps=args.eps, delta=args.delta, c_final=4.0 * args.oversample)

    def build():
        if args.size is None:
            return framework.l2_coreset(A, args.eps, args.delta, ledger, args.seed, cfg)
        r = max(1, thin_svd(A).rank)
        return framework.iterate_sample(A, cfg, args.size, framework.intermediate_size(cfg, r), ledger, args.seed,
                                        add_self=False)

    W = _subset(n, args, build, "l2")
    # generalized eigenvalues of (B_w^T B_w, A^T A) on the row space of A
    _, s, V = thin_svd(A)
    Bv = W.scaled(A) @ V / s
    ev = np.linalg.eigvalsh(Bv.T @ Bv)
    report.update(n=n, d=d, coreset_size=len(W), cost_ratio=_extreme(ev))
    _write_subset(args, W)


def cmd_coreset_lp(args, ledger, report):
    A = _matrix(args)
    n, d = A.shape
    p = args.p if args.p is not None else 1.0
    cfg = framework.SchemeConfig("lewis", p=p, eps=args.eps, delta=args.delta, alpha_const=args.oversample)
    W = _subset(n, args, lambda: framework.lp_coreset(A, p, args.eps, args.delta, ledger, args.seed, cfg), f"lp({p:g})")
    X = np.random.default_rng(child_seed(args.seed, "probe")).standard_normal((d, 32))
    full = np.sum(np.abs(A @ X) ** p, axis=0)
    part = W.weights @ (np.abs(W.take(A) @ X) ** p)
    keep = full > 0
    report.update(n=n, d=d, p=p, coreset_size=len(W), cost_ratio=_extreme(part[keep] / full[keep]) if keep.any() else 1.0)
    _write_subset(args, W)


def cmd_coreset_ridge(args, ledger, report):
    A = _matrix(args)
    n, d = A.shape
    k = _need_k(args, min(n, d))
    cfg = framework.SchemeConfig("ridge", k=k, eps=args.eps, delta=args.delta, c_final=4.0 * args.oversample)
    s = args.size or lowrank.pcp_size(k, args.eps, args.delta, 4.0 * args.oversample)

    def build():
        return framework.iterate_sample(A, cfg, s, framework.intermediate_size(cfg, d), ledger, args.seed,
                                        add_self=False)

    W = _subset(n, args, build, "ridge")
    V = thin_svd(A).V[:, :k]
    resid = lambda M: float(np.sum((M - M @ V @ V.T) ** 2))
    full = resid(A)
    ratio = resid(W.scaled(A)) / full if full > 0 else 1.0
    report.update(n=n, d=d, coreset_size=len(W), cost_ratio=ratio)
    _write_subset(args, W)


def cmd_coreset_cluster(args, ledger, report):
    A = _matrix(args)
    n, d = A.shape
    k = _need_k(args, n)
    p = args.p if args.p is not None else 2.0
    consts = clustering.ClusterConstants(size=2.0 * args.oversample)
    W = clustering.qcluster(A, k, p, args.eps, ledger, args.seed, args.size, consts, args.stress)
    X = clustering.lloyd(W.take(A), k, p, child_seed(args.seed, "lloyd"), W.weights)
    full = clustering.clustering_cost(A, X, p)
    ratio = clustering.clustering_cost(W.take(A), X, p, W.weights) / full if full > 0 else 1.0
    report.update(n=n, d=d, p=p, coreset_size=len(W), cost_ratio=ratio)
    report["deviations"].append("classical-bicriteria")
    _write_subset(args, W)
    _write_factors(args, centers=X)


def cmd_lowrank_matrix(args, ledger, report):
    A = _matrix(args)
    n, d = A.shape
    k = _need_k(args, min(n, d))
    F = lowrank.qlowrank(A, k, args.eps, ledger, args.seed)
    tail = float(np.sum((A - best_rank_k(A, k)) ** 2))
    res = F.residual(A)
    report.update(n=n, d=d, coreset_size=int(F.meta["k1"]),
                  cost_ratio=res / tail if tail > 0 else (1.0 if res <= 1e-12 else math.inf))
    _write_factors(args, M=F.M, N=F.N)


def cmd_lowrank_kernel(args, ledger, report):
    P = _matrix(args)
    spec = parse_kernel(args.kernel or "rbf", P)
    n = spec.n
    k = _need_k(args, n)
    F = kernel.qlowrank_kernel(spec, k, args.eps, args.delta, ledger, args.seed)
    K = spec.gram()
    ev = np.sort(np.abs(np.linalg.eigvalsh((K + K.T) / 2)))[::-1]
    tail = float(np.sum(ev[k:] ** 2))
    res = F.residual(K)
    report.update(n=n, d=P.shape[1], coreset_size=F.meta.get("t1"),
                  cost_ratio=res / tail if tail > 0 else (1.0 if res <= 1e-12 else math.inf))
    _write_factors(args, M=F.M, N=F.N)


def _tensor(args) -> np.ndarray:
    A = _load(args)
    if A.ndim != 3:
        raise ContractViolation("this command needs a tensor3 input")
    return A


def _als_baseline(A, k: int, seed) -> float:
    return tensor.als_cp(A, k, child_seed(seed, "baseline"), restarts=5).residual


def _tensor_report(report, A, k, res, baseline):
    report.update(n=list(A.shape), d=None,
                  cost_ratio=res / baseline if baseline > 0 else (1.0 if res <= 1e-12 else math.inf))


def cmd_lowrank_tensor(args, ledger, report):
    A = _tensor(args)
    k = _need_k(args, min(A.shape))
    F = tensor.fpt_lowrank(A, k, args.eps, ledger, args.seed)
    _tensor_report(report, A, k, F.residual(A), _als_baseline(A, k, args.seed))
    report["coreset_size"] = int(np.prod(F.meta["reduced_shape"]))
    report["deviations"].append("als-fallback")
    _write_factors(args, U=F.U, V=F.V, W=F.W)
    if not F.meta["als_converged"]:
        report["deviations"].append("als-unconverged")
        raise Unconverged("ALS on the reduced tensor hit its iteration cap")


def cmd_curt(args, ledger, report):
    A = _tensor(args)
    k = _need_k(args, min(A.shape))
    C = tensor.crt_select(A, k, args.eps, ledger, args.seed)
    _tensor_report(report, A, k, C.best_residual(A), _als_baseline(A, k, args.seed))
    report["coreset_size"] = sum(C.meta["sizes"])
    _write_factors(args, C=C.C, R=C.R, T=C.T, C_index=C.col_index[:, None], R_index=C.row_index[:, None],
                   T_index=C.tube_index[:, None])


def _sq_norm_loss(e) -> float:
    return float(np.dot(e, e))


def cmd_select_data(args, ledger, report):
    A = _matrix(args)
    n, d = A.shape
    p = args.p if args.p is not None else 2.0
    if args.centers:
        x = clustering.CenterSet(io.ingest(args.centers, "csv"), p, "user")
    else:
        k = _need_k(args, n)
        x = clustering.CenterSet(clustering.lloyd(A, k, p, child_seed(args.seed, "centers")), p, "user")
    tau = clustering.PartitionOracle(A, x)
    labels, dist = tau.assign(), tau.cost()
    point_loss = None
    if args.loss:
        table = io.read_loss_table(args.loss)
        missing = [j for j in range(x.m) if j not in table]
        if missing:
            raise ContractViolation(f"loss table lacks centers {missing}")
        loss = np.array([table[j] for j in range(x.m)])
        lam = np.full(x.m, args.lam if args.lam is not None else 1.0)
    else:
        loss = _sq_norm_loss
        point_loss = np.einsum("ij,ij->i", A, A)
        if args.lam is not None:
            lam = np.full(x.m, args.lam)
        else:
            # smallest Lambda_j making the built-in loss well-behaved on each cluster
            center_loss = np.einsum("ij,ij->i", x.centers, x.centers)
            gap = np.abs(point_loss - center_loss[labels])
            ratio = np.where(dist > 0, gap / np.where(dist > 0, dist, 1.0), 0.0)
            lam = np.zeros(x.m)
            np.maximum.at(lam, labels, ratio)
    R = clustering.qdata_selection(A, x, loss, args.eps, ledger, args.seed, lam, args.size,
                                   2.0 * args.oversample, stress=args.stress)
    ratio = None
    if point_loss is not None:
        tot = float(point_loss.sum())
        ratio = float(R.weights() @ point_loss) / tot if tot > 0 else 1.0
    report.update(n=n, d=d, k=x.m, p=p, coreset_size=len(R.subset), cost_ratio=ratio)
    report["deviations"].append("classical-bicriteria")
    _write_subset(args, R.subset)


def cmd_bench_queries(args, ledger, report):
    lo, _, hi = (args.sweep or "10:16").partition(":")
    exps = range(int(lo), int(hi or lo) + 1)
    s = args.size or 64
    rows = []
    for e in exps:
        n = 2**e
        if s > n:
            raise ContractViolation(f"--size {s} exceeds n = {n}")
        L = QueryLedger()
        picked = qsample(n, np.full(n, s / n), L, child_seed(args.seed, "bench", e), tag="bench")
        norm = L.simulated_quantum_queries / (math.sqrt(n * s) * (1 + math.log2(n)))
        rows.append({"n": n, "s": s, "sampled": int(picked.size), "oracle_calls": L.oracle_calls,
                     "simulated_quantum_queries": L.simulated_quantum_queries, "normalized": norm})
    report.update(n=[r["n"] for r in rows], coreset_size=s)
    report["ledger"] = {"sweep": rows}
    out = _outdir(args)
    if out is not None:
        with open(out / "sweep.csv", "w") as fh:
            fh.write("n,s,sampled,oracle_calls,simulated_quantum_queries,normalized\n")
            for r in rows:
                fh.write(f"{r['n']},{r['s']},{r['sampled']},{r['oracle_calls']},"
                         f"{r['simulated_quantum_queries']},{r['normalized']!r}\n")


HANDLERS = {
    "coreset-l2": cmd_coreset_l2,
    "coreset-lp": cmd_coreset_lp,
    "coreset-ridge": cmd_coreset_ridge,
    "coreset-cluster": cmd_coreset_cluster,
    "lowrank-matrix": cmd_lowrank_matrix,
    "lowrank-kernel": cmd_lowrank_kernel,
    "lowrank-tensor": cmd_lowrank_tensor,
    "curt": cmd_curt,
    "select-data": cmd_select_data,
    "bench-queries": cmd_bench_queries,
}


# ---------------------------------------------------------------- plumbing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--input", help="input file")
    common.add_argument("--format", choices=io.FORMATS, help="input format (guessed from the suffix otherwise)")
    common.add_argument("--k", type=int, help="rank or number of centers")
    common.add_argument("--p", type=float, help="power of the cost function")
    common.add_argument("--eps", type=float, default=0.5)
    common.add_argument("--delta", type=float, default=0.1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--size", type=int, help="target sample size")
    common.add_argument("--oversample", type=float, default=1.0, help="multiplier on default sample-size constants")
    common.add_argument("--kernel", help="kernel, e.g. rbf:gamma=0.25, poly:degree=2,coef0=1, linear")
    common.add_argument("--stress", action="store_true", help="perturb simulated estimators by seeded (1 +- eps/2)")
    common.add_argument("--output", help="directory for coreset and factor files")
    common.add_argument("--report", default="-", help="report path; '-' writes to stdout")
    common.add_argument("--timing", action="store_true", help="record wall time (reports are then not reproducible)")
    common.add_argument("--centers", help="select-data: CSV of centers (default: Lloyd on the input)")
    common.add_argument("--loss", help="select-data: CSV 'center_index,loss' (default: built-in squared norm)")
    common.add_argument("--lam", type=float, help="select-data: Lambda for every center")
    common.add_argument("--sweep", help="bench-queries: exponent range lo:hi of n = 2^e (default 10:16)")
    parser = argparse.ArgumentParser(prog="qcoreset", description="Sampling-based coresets and low-rank approximation "
                                     "with simulated quantum query accounting.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__name__.replace("cmd_", "").replace("_", " "))
    return parser


def _validate(args) -> None:
    if not 0 < args.eps < 1:
        raise ContractViolation("--eps must lie in (0, 1)")
    if not 0 < args.delta < 1:
        raise ContractViolation("--delta must lie in (0, 1)")
    if args.oversample <= 0:
        raise ContractViolation("--oversample must be positive")
    if args.size is not None and args.size < 1:
        raise ContractViolation("--size must be positive")


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _clean(v.item())
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def emit_report(report: dict, dest: str) -> str:
    text = json.dumps(_clean({k: report[k] for k in REPORT_KEYS}), indent=2, sort_keys=True) + "\n"
    if dest == "-":
        sys.stdout.write(text)
    else:
        Path(dest).write_text(text)
    return text


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    ledger = QueryLedger()
    report = {key: None for key in REPORT_KEYS}
    report.update(schema=SCHEMA, task=args.command, k=args.k, p=args.p, eps=args.eps, delta=args.delta,
                  seed=args.seed, deviations=["simulated-quantum"])
    start = time.perf_counter()
    code = 0
    try:
        _validate(args)
        HANDLERS[args.command](args, ledger, report)
    except Unconverged as exc:
        print(f"qcoreset: {exc}", file=sys.stderr)
        code = 3
    except NonConvergenceError as exc:
        print(f"qcoreset: non-convergence: {exc}", file=sys.stderr)
        return 3
    except (ContractViolation, OSError) as exc:
        print(f"qcoreset: error: {exc}", file=sys.stderr)
        return 2
    if report["ledger"] is None:
        report["ledger"] = ledger.snapshot()
    if args.timing:
        report["wall_time_ms"] = round((time.perf_counter() - start) * 1000.0, 3)
    emit_report(report, args.report)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
