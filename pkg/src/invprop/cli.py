"""Command-line front end: preimage, reach, robust and verify."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .bounds import initial_bounds
from .branch import DONE, BranchResult, branch_and_bound, interval_excludes
from .dual import Config, LinearObjective, optimize_batch, invprop
from .geometry import (PolytopeUnion, approx_ratio, gen_directions_2d, gen_directions_box,
                       halfspaces_csv, union_svg)
from .network import (AffineLayer, InputBox, Network, NetworkFormatError, OutputSet,
                       encode_max_gap, fold_output_constraints, forward, identity_layer,
                       load_box, load_network, load_output_set, max_gap_shift, network_from_dict)
from .oracle import exact_lp_relaxation, exact_min_milp, sample_feasible
from .reach import backward_reach

log = logging.getLogger("invprop")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_PARSE = 2
EXIT_EMPTY = 3
EXIT_BUDGET = 4


class UsageError(Exception):
    """Bad input files or flag combinations; maps to exit code 2."""


class Timer:
    def __init__(self):
        self.phases: dict[str, float] = {}

    def __call__(self, name: str):
        timer = self

        class _Phase:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                timer.phases[name] = timer.phases.get(name, 0.0) + time.perf_counter() - self.start

        return _Phase()


# ---------------------------------------------------------------- helpers

def _read_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def load_target(path: str) -> OutputSet:
    """An OutputSet file ({"H", "d"}) or a box ({"lo", "hi"}) meaning y in the box."""
    data = _read_json(path)
    if "H" in data:
        return load_output_set(path)
    if "lo" in data and "hi" in data:
        box = InputBox(data["lo"], data["hi"])
        return OutputSet.from_box(box.lo, box.hi)
    raise UsageError(f"{path}: expected an output set or a box")


def make_config(args) -> Config:
    config = Config()
    if getattr(args, "config", None):
        try:
            config = Config.from_dict(_read_json(args.config))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from exc
    overrides = {}
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    if getattr(args, "time_limit", None) is not None:
        overrides["time_limit"] = args.time_limit
    if getattr(args, "no_output_constraint", False):
        overrides["use_output_constraint"] = False
    return config.replace(**overrides) if overrides else config


def make_directions(dim: int, planes: int | None, seed: int) -> np.ndarray:
    """Evenly spaced normals in 2D; box normals plus seeded random ones otherwise."""
    if dim == 2:
        return gen_directions_2d(40 if planes is None else planes)
    base = gen_directions_box(dim)
    if planes is None or planes == base.shape[0]:
        return base
    if planes < base.shape[0]:
        raise UsageError(f"--planes must be at least {base.shape[0]} in {dim} dimensions")
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal((planes - base.shape[0], dim))
    extra /= np.linalg.norm(extra, axis=1, keepdims=True)
    return np.vstack([base, extra])


def _with_suffix(path: str | None, tag: str | None, ext: str | None = None) -> str | None:
    if path is None:
        return None
    p = Path(path)
    stem = p.stem + (f"_{tag}" if tag else "")
    return str(p.with_name(stem + (ext if ext is not None else p.suffix)))


def leaf_records(outcome: BranchResult) -> list:
    out = []
    for node in outcome.leaves():
        rec = {"box": node.box.to_dict(), "status": node.status, "depth": node.depth,
               "halfspaces": [{"c": h.c.tolist(), "lb": h.lb} for h in (node.result or [])]}
        if node.run is not None:
            rec["sweeps"] = node.run.sweeps
            rec["converged"] = node.run.converged
            rec["width_history"] = node.run.width_history
        out.append(rec)
    return out


def outcome_code(outcome: BranchResult) -> int:
    if outcome.all_pruned:
        return EXIT_EMPTY
    if outcome.budget_exhausted:
        return EXIT_BUDGET
    return EXIT_OK


def write_plots(svg_path: str | None, union: PolytopeUnion, net: Network, out_set: OutputSet,
                box: InputBox, seed: int, n: int, obstacle: InputBox | None = None,
                title: str = "") -> None:
    """SVG panel (2D only) plus CSV files with the plotted half-spaces and samples."""
    if svg_path is None:
        return
    if box.dim != 2:
        log.warning("SVG output needs a 2D input; skipped")
        return
    samples = sample_feasible(net, box, out_set, n, seed)
    Path(svg_path).write_text(union_svg(union, samples, box, obstacle, title))
    Path(_with_suffix(svg_path, None, ".csv")).write_text(halfspaces_csv(union))
    lines = ["x_1,x_2"] + [f"{a!r},{b!r}" for a, b in samples.tolist()]
    Path(_with_suffix(svg_path, "samples", ".csv")).write_text("\n".join(lines) + "\n")


def emit(report: dict, args, timer: Timer) -> None:
    if getattr(args, "timings", False):
        report["timings"] = {k: round(v, 6) for k, v in sorted(timer.phases.items())}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.json:
        Path(args.json).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- preimage

def preimage_problem(args) -> tuple[Network, OutputSet, InputBox]:
    net = load_network(args.net)
    box = load_box(args.box)
    if args.max_gap:
        a, b, ood = args.max_gap
        net = encode_max_gap(net, a, b, ood, max_gap_shift(net, box, b, ood))
        out_set = OutputSet(np.array([[-1.0]]), np.array([0.0]))
        if args.outset:
            raise UsageError("--max-gap defines the output set; drop the output-set file")
    else:
        if not args.outset:
            raise UsageError("an output-set file is required without --max-gap")
        out_set = load_target(args.outset)
    if box.dim != net.input_dim:
        raise UsageError(f"box has {box.dim} dims, network takes {net.input_dim}")
    if out_set.H.shape[1] != net.output_dim:
        raise UsageError(f"output set has {out_set.H.shape[1]} columns, network outputs {net.output_dim}")
    return net, out_set, box


def cmd_preimage(args) -> int:
    timer = Timer()
    with timer("load"):
        net, out_set, box = preimage_problem(args)
        config = make_config(args)
        dirs = make_directions(box.dim, args.planes, args.seed)
    with timer("tighten"):
        outcome = branch_and_bound(net, out_set, box, dirs, config, args.branches)
    report = {"command": "preimage", "config": config.to_dict(), "seed": args.seed,
              "network": net.to_dict(), "out_set": out_set.to_dict(), "box": box.to_dict(),
              "branches": args.branches, "leaves": leaf_records(outcome),
              "budget_exhausted": outcome.budget_exhausted}
    code = outcome_code(outcome)
    report["status"] = {EXIT_OK: "ok", EXIT_EMPTY: "empty", EXIT_BUDGET: "budget-exhausted"}[code]
    if args.samples > 0:
        with timer("ratio"):
            est = approx_ratio(outcome.union, net, out_set, box, args.samples, args.seed)
        report["ratio"] = est.to_dict()
    with timer("emit"):
        write_plots(args.svg, outcome.union, net, out_set, box, args.seed,
                    min(args.samples, 200_000) or 20_000)
        if args.csv:
            Path(args.csv).write_text(halfspaces_csv(outcome.union))
        emit(report, args, timer)
    return code


# ---------------------------------------------------------------- reach

def cmd_reach(args) -> int:
    timer = Timer()
    if args.steps < 1:
        raise UsageError("--steps must be at least 1")
    with timer("load"):
        dyn = _read_json(args.dynamics)
        try:
            A = np.asarray(dyn["A"], dtype=float)
            B = np.asarray(dyn["B"], dtype=float)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{args.dynamics}: needs A and B matrices") from exc
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise UsageError("A must be square")
        policy = load_network(args.policy)
        obstacle = load_target(args.obstacle)
        if args.box:
            domain = load_box(args.box)
        elif "domain" in dyn:
            domain = InputBox(dyn["domain"]["lo"], dyn["domain"]["hi"])
        else:
            raise UsageError("no analysis domain: pass --box or add 'domain' to the dynamics file")
        if policy.input_dim != A.shape[0] or B.shape != (A.shape[0], policy.output_dim):
            raise UsageError("policy, A and B dimensions do not match")
        if domain.dim != A.shape[0] or obstacle.H.shape[1] != A.shape[0]:
            raise UsageError("domain or obstacle dimension does not match the state")
        config = make_config(args)
        dirs = make_directions(domain.dim, args.planes, args.seed)
    obstacle_box = None
    ob = _read_json(args.obstacle)
    if "lo" in ob:
        obstacle_box = InputBox(ob["lo"], ob["hi"])

    steps = []
    code = EXIT_OK
    any_budget = False
    runs = backward_reach(A, B, policy, domain, obstacle, args.steps, dirs, config,
                          args.branches, reuse=not args.no_reuse)
    while True:
        with timer("tighten"):
            st = next(runs, None)
        if st is None:
            break
        rec = {"step": st.step, "depth": st.net.depth, "leaves": leaf_records(st.outcome),
               "reused_layers": list(st.reused_layers),
               "budget_exhausted": st.outcome.budget_exhausted}
        if args.samples > 0:
            with timer("ratio"):
                rec["ratio"] = approx_ratio(st.outcome.union, st.net, obstacle, domain,
                                            args.samples, args.seed).to_dict()
        with timer("emit"):
            tag = f"t{st.step:02d}"
            write_plots(_with_suffix(args.svg, tag), st.outcome.union, st.net, obstacle, domain,
                        args.seed, min(args.samples, 200_000) or 20_000, obstacle_box,
                        f"t = {st.step}")
            if args.csv:
                Path(_with_suffix(args.csv, tag)).write_text(halfspaces_csv(st.outcome.union))
        log.info("step %d done", st.step)
        steps.append(rec)
        any_budget |= st.outcome.budget_exhausted
        code = outcome_code(st.outcome)
    if any_budget:
        code = EXIT_BUDGET
    report = {"command": "reach", "config": config.to_dict(), "seed": args.seed,
              "A": A.tolist(), "B": B.tolist(), "policy": policy.to_dict(),
              "out_set": obstacle.to_dict(), "box": domain.to_dict(), "steps": steps,
              "branches": args.branches}
    with timer("emit"):
        emit(report, args, timer)
    return code


# ---------------------------------------------------------------- robust

def margin_networks(net: Network, label: int | None) -> list[tuple[str, Network]]:
    """Scalar margin networks whose value must stay positive for robustness."""
    if label is None:
        if net.output_dim != 1:
            raise UsageError("a multi-output network needs --label")
        return [("f", net)]
    if not 0 <= label < net.output_dim:
        raise UsageError(f"--label {label} out of range for {net.output_dim} outputs")
    out = []
    for j in range(net.output_dim):
        if j == label:
            continue
        row = np.zeros((1, net.output_dim))
        row[0, label], row[0, j] = 1.0, -1.0
        last = net.layers[-1]
        margin = AffineLayer(row @ last.weights, row @ last.bias)
        out.append((f"y{label}-y{j}", Network(net.layers[:-1] + (margin,))))
    return out


def prove_positive(f: Network, box: InputBox, config: Config) -> tuple[bool, bool, float]:
    """Try to show {x in box : f(x) <= 0} is empty.

    The margin gets its own ReLU stage (f -> relu(f), same set) so that its
    pre-activation is a tightened neuron.  Returns (proved, budget hit,
    certified lower bound of f on the constrained set).
    """
    out = OutputSet(np.array([[1.0]]), np.array([0.0]))
    if interval_excludes(f, out, box):
        return True, False, float("inf")
    lifted = Network(f.layers + (identity_layer(1),))
    run = invprop(lifted, initial_bounds(lifted, box), out, config)
    layer = lifted.depth - 1
    lo = float(run.store.lo[layer][0])
    proved = run.infeasible or lo > 0
    return proved, run.budget_exhausted, lo


def robust_verdict(net: Network, box: InputBox, label: int | None, config: Config,
                   samples: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    X = box.sample(samples, rng) if samples > 0 else np.zeros((0, box.dim))
    margins = []
    verdict = "verified"
    budget = False
    for name, f in margin_networks(net, label):
        rec = {"margin": name}
        vals = forward(f, X)[:, 0] if len(X) else np.zeros(0)
        if len(vals) and vals.min() <= 0:
            k = int(np.argmin(vals))
            rec.update(result="falsified", witness=X[k].tolist(), value=float(vals[k]))
            verdict = "falsified"
        else:
            proved, hit, lo = prove_positive(f, box, config)
            rec.update(result="verified" if proved else "unknown", lower_bound=lo)
            budget |= hit and not proved
            if not proved and verdict == "verified":
                verdict = "unknown"
        margins.append(rec)
    return {"verdict": verdict, "margins": margins, "budget_exhausted": budget}


def cmd_robust(args) -> int:
    timer = Timer()
    with timer("load"):
        net = load_network(args.net)
        box = load_box(args.box)
        if box.dim != net.input_dim:
            raise UsageError("box dimension does not match the network")
        config = make_config(args)
    with timer("verify"):
        res = robust_verdict(net, box, args.label, config, args.samples, args.seed)
    report = {"command": "robust", "config": config.to_dict(), "seed": args.seed,
              "network": net.to_dict(), "box": box.to_dict(), "label": args.label, **res}
    emit(report, args, timer)
    if res["verdict"] == "unknown" and res["budget_exhausted"]:
        return EXIT_BUDGET
    return EXIT_OK


# ---------------------------------------------------------------- verify

def sandwich(net: Network, out_set: OutputSet, box: InputBox, dirs: np.ndarray,
             config: Config, samples: int, seed: int) -> list[dict]:
    """Per direction: dual bound <= LP relaxation <= MILP <= sampled minimum."""
    store = invprop(net, initial_bounds(net, box), out_set, config).store
    folded = fold_output_constraints(net, out_set)
    if store.infeasible:
        dual = np.full(len(dirs), np.inf)
    else:
        dual, _ = optimize_batch(folded, store, LinearObjective.on_input(folded, dirs), config)
    feas = sample_feasible(net, box, out_set, samples, seed)
    rows = []
    for c, g in zip(dirs, dual):
        lp = exact_lp_relaxation(net, store, out_set, c) if not store.infeasible else np.inf
        milp = exact_min_milp(net, box, out_set, c).value
        smin = float(np.min(feas @ c)) if len(feas) else np.inf
        ok = g <= lp + 1e-6 and lp <= milp + 1e-6 and milp <= smin + 1e-6
        rows.append({"c": c.tolist(), "dual": float(g), "lp": float(lp), "milp": float(milp),
                     "sampled_min": smin, "ok": bool(ok)})
    return rows


def recheck_report(report: dict, samples: int, seed: int) -> dict:
    """Offline soundness check of a preimage report: sampling plus half-space tests."""
    if report.get("command") != "preimage":
        raise UsageError("--report expects a preimage report")
    net = network_from_dict(report["network"])
    out_set = OutputSet(report["out_set"]["H"], report["out_set"]["d"])
    box = InputBox(report["box"]["lo"], report["box"]["hi"])
    union = PolytopeUnion.from_dict({"leaves": [leaf for leaf in report["leaves"]
                                                if leaf["status"] == DONE]})
    est = approx_ratio(union, net, out_set, box, samples, seed)
    return {"n_feasible": est.n_feasible, "n_feasible_outside": est.n_feasible_outside,
            "sound": est.n_feasible_outside == 0}


def cmd_verify(args) -> int:
    timer = Timer()
    if args.report:
        with timer("recheck"):
            res = recheck_report(_read_json(args.report), args.samples, args.seed)
        emit({"command": "verify", "mode": "report", **res}, args, timer)
        return EXIT_OK if res["sound"] else EXIT_FAIL
    if not args.oracle:
        raise UsageError("verify needs --oracle or --report")
    if not (args.net and args.outset and args.box):
        raise UsageError("verify --oracle needs network, output-set and box files")
    net = load_network(args.net)
    out_set = load_target(args.outset)
    box = load_box(args.box)
    config = make_config(args)
    dirs = make_directions(box.dim, args.planes, args.seed)
    with timer("oracle"):
        rows = sandwich(net, out_set, box, dirs, config, args.samples, args.seed)
    ok = all(r["ok"] for r in rows)
    emit({"command": "verify", "mode": "oracle", "config": config.to_dict(), "seed": args.seed,
          "rows": rows, "ok": ok}, args, timer)
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------- parser

def _triple(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected three comma-separated indices") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated indices")
    return parts


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invprop",
                                     description="Preimage over-approximation for ReLU networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, samples=100_000):
        p.add_argument("--planes", type=_positive, help="number of half-space directions")
        p.add_argument("--branches", type=_positive, default=1, help="input-branching leaves")
        p.add_argument("--samples", type=int, default=samples, help="Monte-Carlo samples")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="JSON file with optimizer settings")
        p.add_argument("--threads", type=_positive)
        p.add_argument("--time-limit", type=float, help="seconds before giving up (sound partial result)")
        p.add_argument("--no-output-constraint", action="store_true",
                       help="keep gamma at 0 (plain forward bound propagation)")
        p.add_argument("--svg")
        p.add_argument("--csv")
        p.add_argument("--json", help="write the report here instead of stdout")
        p.add_argument("--timings", action="store_true",
                       help="include wall-clock per phase (makes reports non-reproducible)")

    p = sub.add_parser("preimage", help="over-approximate the preimage of an output set")
    p.add_argument("net")
    p.add_argument("outset", nargs="?")
    p.add_argument("--box", required=True)
    p.add_argument("--max-gap", type=_triple, metavar="A,B,OOD",
                   help="use the set max(y_A, y_B) >= y_OOD instead of an output-set file")
    common(p)
    p.set_defaults(func=cmd_preimage)

    p = sub.add_parser("reach", help="backward reachable sets of a closed loop")
    p.add_argument("dynamics")
    p.add_argument("policy")
    p.add_argument("obstacle")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--box", help="analysis domain (defaults to the dynamics file's domain)")
    p.add_argument("--no-reuse", action="store_true", help="do not seed step t with step t-1 bounds")
    common(p)
    p.set_defaults(func=cmd_reach)

    p = sub.add_parser("robust", help="prove a margin stays positive on a box")
    p.add_argument("net")
    p.add_argument("--box", required=True)
    p.add_argument("--label", type=int)
    common(p, samples=10_000)
    p.set_defaults(func=cmd_robust)

    p = sub.add_parser("verify", help="oracle sandwich check or offline report re-check")
    p.add_argument("net", nargs="?")
    p.add_argument("outset", nargs="?")
    p.add_argument("--box")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--report")
    common(p, samples=100_000)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, NetworkFormatError, OSError, KeyError, IndexError) as exc:
        print(f"invprop: error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
