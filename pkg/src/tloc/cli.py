"""``tloc`` command line.

Every subcommand accepts ``--config FILE``: a plain ``key = value`` file
whose keys are the subcommand's long flags with dashes turned into
underscores (``n_trees = 50``).  Flags given on the command line win over
the file.  Lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__

log = logging.getLogger("tloc")


def read_config(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _pair(text: str) -> tuple[float, float]:
    parts = [float(p) for p in text.replace(" ", "").split(",")]
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two comma-separated numbers")
    return parts[0], parts[1]


# -- corpus helpers ----------------------------------------------------------------

def _corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--domains", help="directory written by `tloc partition`")
    p.add_argument("--mr", help="MR CSV (with --stations, instead of --domains)")
    p.add_argument("--stations", help="station CSV")
    p.add_argument("--g", type=int, default=20, help="station grid resolution")
    p.add_argument("--gap", type=float, default=3600.0, help="trajectory split gap in seconds")


def _load(args):
    from .domain import load_domains, partition_by_serving
    from .mr import parse_mr_csv, parse_station_csv

    if args.domains:
        return load_domains(args.domains)
    if not (args.mr and args.stations):
        raise SystemExit("error: give --domains, or both --mr and --stations")
    return partition_by_serving(parse_mr_csv(args.mr), parse_station_csv(args.stations),
                                args.g, args.gap)


def _find(domains, name: str):
    for d in domains:
        if d.name == name:
            return d
    raise SystemExit(f"error: no domain named {name!r}")


def _distance_args(p) -> None:
    p.add_argument("--weights", choices=("softmax_bs", "harmonic"), default=None,
                   help="group weights (default: softmax_bs for 2G, harmonic for 4G)")
    p.add_argument("--tech", choices=("2G", "4G"), default="2G")
    p.add_argument("--w-mr", type=float, default=0.5)
    p.add_argument("--p", type=float, default=3.0, help="histogram norm order")
    p.add_argument("--bs-method", choices=("pairwise", "centroid"), default="pairwise")
    p.add_argument("--pos-pairs", type=int, default=None,
                   help="estimate the position scale from this many random pairs")


def _calc(args, domains):
    from .distance import DistanceCalculator, DistanceConfig

    weights = args.weights or ("harmonic" if args.tech == "4G" else "softmax_bs")
    cfg = DistanceConfig(p=args.p, weights=weights, bs_method=args.bs_method, w_mr=args.w_mr)
    return DistanceCalculator.fit(domains, cfg, pos_pairs=args.pos_pairs, seed=getattr(args, "seed", 0))


def _forest_args(p) -> None:
    p.add_argument("--n-trees", type=int, default=200)
    p.add_argument("--max-features", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)


# -- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .mr import write_mr_csv, write_station_csv
    from .synth import (WorldConfig, apply_scarcity, emit_mr, generate_world, simulate_traces,
                        twin_scenario)

    cfg = WorldConfig(seed=args.seed, extent=args.extent, n_stations=args.n_stations,
                      street_spacing=args.street_spacing, p0=args.p0, eta=args.eta,
                      sigma=args.sigma, n_devices=args.n_devices, sessions=args.sessions,
                      sample_rate=args.sample_rate, duration_s=args.duration, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.scenario == "twin":
        sc = twin_scenario(cfg, n_copies=args.copies, n_targets=args.targets,
                           target_labels=args.target_labels)
        world, samples = sc.world, sc.samples
        (out / "targets.txt").write_text("".join(f"{t}\n" for t in sc.targets))
    else:
        world = generate_world(cfg)
        samples = emit_mr(world, simulate_traces(world, cfg), cfg)
    if args.label_fraction < 1.0:
        plan = {sid: args.label_fraction for sid in world.station_ids}
        samples = apply_scarcity(samples, plan, args.seed)
    write_station_csv(out / "stations.csv", world.registry())
    write_mr_csv(out / "mr.csv", samples)
    n_lab = sum(s.label is not None for s in samples)
    print(f"{len(world.station_ids)} stations, {len(samples)} samples ({n_lab} labeled) -> {out}")
    return 0


def cmd_partition(args) -> int:
    from .domain import save_domains

    domains = _load(args)
    save_domains(domains, args.out)
    print(f"{len(domains)} domains -> {args.out}")
    return 0


DIST_HEADER = ["a", "b", "dis_mr_rssi", "dis_mr_sig", "dis_mr", "dis_pos", "dist"]


def cmd_distance(args) -> int:
    domains = _load(args)
    calc = _calc(args, domains)
    if args.a or args.b:
        if not (args.a and args.b):
            raise SystemExit("error: --a and --b go together")
        pairs = [calc.pair(_find(domains, args.a), _find(domains, args.b))]
    else:
        pairs = calc.matrix(domains)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(DIST_HEADER)
        for dd in pairs:
            w.writerow([dd.a, dd.b] + [f"{v:.6f}" for v in
                                       (dd.dis_mr_rssi, dd.dis_mr_sig, dd.dis_mr, dd.dis_pos, dd.dist)])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_select(args) -> int:
    from .distance import LSHConfig, LSHIndex, rank_candidates

    domains = _load(args)
    target = _find(domains, args.target)
    calc = _calc(args, domains)
    cands = [d for d in domains if d.serving != target.serving and d.n_labeled > 0]
    if args.lsh:
        index = LSHIndex(cands, calc, LSHConfig(seed=args.seed))
        ranked = index.topk(target, args.k)
    else:
        ranked = rank_candidates(target, cands, calc)[:args.k]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["rank", "domain", "dist", "selected"])
    for r, (d, dd) in enumerate(ranked, 1):
        w.writerow([r, d.name, f"{dd.dist:.6f}", int(dd.dist < args.cutoff)])
    return 0


def cmd_train(args) -> int:
    from .forest import ForestConfig, save_forest, train_forest

    domain = _find(_load(args), args.domain)
    X, Y = domain.labeled_xy()
    if len(X) == 0:
        raise SystemExit(f"error: {domain.name} has no labeled samples")
    forest = train_forest(X, Y, ForestConfig(args.n_trees, args.max_features, args.seed))
    save_forest(forest, args.out)
    print(f"{forest.n_trees} trees on {len(X)} samples -> {args.out}")
    return 0


PRED_HEADER = ["sample", "timestamp", "device_id", "pred_lon", "pred_lat", "label_lon", "label_lat",
               "error_m"]


def cmd_transfer(args) -> int:
    from .evaluation import planar_errors
    from .forest import ForestConfig
    from .stl import TransferConfig, tloc_localize

    domains = _load(args)
    target = _find(domains, args.target)
    calc = _calc(args, domains)
    loc = tloc_localize(target, domains, calc,
                        TransferConfig(k=args.k, cutoff=args.cutoff, min_node_targets=args.min_node_targets),
                        ForestConfig(args.n_trees, args.max_features, args.seed))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_HEADER)
        for i, (s, p) in enumerate(zip(target.samples, loc.predictions)):
            row = [i, f"{s.timestamp:.3f}", s.device_id, f"{p[0]:.7f}", f"{p[1]:.7f}"]
            if s.label is not None:
                err = planar_errors(p, s.label)[0]
                row += [f"{s.label[0]:.7f}", f"{s.label[1]:.7f}", f"{err:.3f}"]
            else:
                row += ["", "", ""]
            w.writerow(row)
    how = "non-transfer fallback" if loc.fallback else "sources " + ", ".join(loc.sources)
    print(f"{target.name}: {how} -> {args.out}")
    return 0


def _eval_args(p, method_choices=None) -> None:
    from .evaluation import METHODS

    if method_choices is None:
        p.add_argument("--method", choices=METHODS, default="tloc")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--targets", default="auto",
                   help="auto (inaccurate, label-scarce domains), all, or comma-separated names")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--cutoff", type=float, default=0.95)
    p.add_argument("--min-node-targets", type=int, default=1)
    p.add_argument("--max-labeled", type=int, default=50)
    p.add_argument("--error-threshold", type=float, default=None,
                   help="median error (m) above which a domain counts as inaccurate")
    p.add_argument("--cell", type=float, default=50.0, help="fingerprint cell size (m)")
    p.add_argument("--mode", choices=("mle", "wa"), default="mle")
    p.add_argument("--top-m", type=int, default=5)
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--dump", default=None, help="per-sample error CSV")
    p.add_argument("--timing", action="store_true", help="record wall time in runtime_ms")


def _run_eval(args, method: str) -> int:
    from .distance import DistanceCalculator
    from .evaluation import Evaluator, ExperimentPlan

    plan = ExperimentPlan(method=method, folds=args.folds, repeats=args.repeats, seed=args.seed,
                          targets=args.targets, tech=args.tech, g=args.g, gap_threshold=args.gap,
                          n_trees=args.n_trees, max_features=args.max_features, k=args.k,
                          cutoff=args.cutoff, w_mr=args.w_mr, p=args.p, weights=args.weights,
                          bs_method=args.bs_method, min_node_targets=args.min_node_targets,
                          max_labeled=args.max_labeled, error_threshold=args.error_threshold,
                          cell=args.cell, mode=args.mode, top_m=args.top_m, timing=args.timing)
    domains = _load(args)
    calc = DistanceCalculator.fit(domains, plan.distance_config(), pos_pairs=args.pos_pairs,
                                  seed=args.seed)
    report = Evaluator(domains, plan, calc).run()
    report.write(args.out, args.dump)
    for name, why in sorted(report.failures.items()):
        print(f"warning: {name}: {why}", file=sys.stderr)
    agg = [r for r in report.rows if r[1] == "*"]
    if agg:
        print(f"{method}: {len(report.targets)} domains, median {agg[0][4]} m, p90 {agg[0][6]} m "
              f"over {agg[0][7]} samples -> {args.out}")
    else:
        print(f"{method}: nothing evaluated -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    return _run_eval(args, args.method)


def cmd_fingerprint(args) -> int:
    return _run_eval(args, args.variant)


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        with open(path, newline="") as fh:
            rows.extend(csv.DictReader(fh))
    methods = sorted({r["method"] for r in rows})
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["method", "domains", "median_of_medians_m", "pooled_median_m", "pooled_p90_m", "n"])
    for m in methods:
        per = [float(r["median_m"]) for r in rows
               if r["method"] == m and r["domain"] != "*" and r["median_m"] != "nan"]
        doms = {r["domain"] for r in rows if r["method"] == m and r["domain"] != "*"}
        agg = next((r for r in rows if r["method"] == m and r["domain"] == "*"), None)
        mom = f"{float(np.median(per)):.3f}" if per else "nan"
        w.writerow([m, len(doms), mom, agg["median_m"] if agg else "nan",
                    agg["p90_m"] if agg else "nan", agg["n"] if agg else 0])
    return 0


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .evaluation import METHODS

    parser = argparse.ArgumentParser(prog="tloc", description="Outdoor position recovery from MR data "
                                     "with domain-selective structure transfer.")
    parser.add_argument("--version", action="version", version=f"tloc {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="key = value file supplying defaults for these flags")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic world and its MR records")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario", choices=("basic", "twin"), default="basic")
    p.add_argument("--extent", type=_pair, default=(3000.0, 3000.0), help="width,height in meters")
    p.add_argument("--n-stations", type=int, default=30)
    p.add_argument("--street-spacing", type=float, default=100.0)
    p.add_argument("--p0", type=float, default=-15.0, help="dBm at 1 m")
    p.add_argument("--eta", type=float, default=3.0, help="path-loss exponent")
    p.add_argument("--sigma", type=float, default=4.0, help="shadowing std in dB")
    p.add_argument("--n-devices", type=int, default=60)
    p.add_argument("--sessions", type=int, default=1)
    p.add_argument("--sample-rate", type=float, default=0.2)
    p.add_argument("--duration", type=float, default=1800.0, help="seconds per session")
    p.add_argument("--mode", choices=("2G", "4G"), default="2G")
    p.add_argument("--label-fraction", type=float, default=1.0)
    p.add_argument("--copies", type=int, default=3, help="twin scenario: translated copies")
    p.add_argument("--targets", type=int, default=2, help="twin scenario: scarce targets")
    p.add_argument("--target-labels", type=int, default=40)

    p = add("partition", cmd_partition, "split MR records into per-serving-station domains")
    _corpus_args(p)
    p.add_argument("--out", required=True, help="output directory")

    p = add("distance", cmd_distance, "composite distances between domains")
    _corpus_args(p)
    _distance_args(p)
    p.add_argument("--a", help="first domain (default: all pairs)")
    p.add_argument("--b", help="second domain")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.add_argument("--seed", type=int, default=0)

    p = add("select", cmd_select, "rank source candidates for a target domain")
    _corpus_args(p)
    _distance_args(p)
    p.add_argument("--target", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--cutoff", type=float, default=0.95)
    p.add_argument("--lsh", action="store_true", help="query an LSH index instead of a full scan")
    p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, "train a forest on one domain's labeled samples")
    _corpus_args(p)
    _forest_args(p)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True, help="forest JSON")

    p = add("transfer", cmd_transfer, "localize every sample of a target domain with TLoc")
    _corpus_args(p)
    _distance_args(p)
    _forest_args(p)
    p.add_argument("--target", required=True)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--cutoff", type=float, default=0.95)
    p.add_argument("--min-node-targets", type=int, default=1)
    p.add_argument("--out", required=True, help="prediction CSV")

    p = add("fingerprint", cmd_fingerprint, "cross-validate a fingerprinting baseline")
    _corpus_args(p)
    _distance_args(p)
    _forest_args(p)
    p.add_argument("--variant", choices=("nbl", "renbl", "tran_renbl"), default="renbl")
    _eval_args(p, method_choices=("nbl", "renbl", "tran_renbl"))

    p = add("eval", cmd_eval, "cross-validated evaluation of one method")
    _corpus_args(p)
    _distance_args(p)
    _forest_args(p)
    _eval_args(p)

    p = add("report", cmd_report, "summarize one or more report CSVs")
    p.add_argument("inputs", nargs="+", metavar="REPORT")
    return parser


def _apply_config(parser: argparse.ArgumentParser, args, argv) -> argparse.Namespace:
    sub = parser._subparsers._group_actions[0].choices[args.command]
    cfg = read_config(args.config)
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        if key in ("config", "help", "func") or key not in actions:
            raise SystemExit(f"error: unknown key {key!r} in {args.config}")
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = _bool(value)
        else:
            if action.choices is not None and value not in action.choices:
                raise SystemExit(f"error: {key} = {value!r} not one of {', '.join(map(str, action.choices))}")
            defaults[key] = value
            if action.required:
                action.required = False
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    need_cfg = "--config" in argv or any(a.startswith("--config=") for a in argv)
    if need_cfg:
        # required flags may come from the file, so parse leniently first
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        sub_name = next((a for a in argv if not a.startswith("-")), None)
        ns = argparse.Namespace(command=sub_name, config=known.config)
        if sub_name is None:
            parser.error("missing subcommand")
        args = _apply_config(parser, ns, argv)
    else:
        args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
