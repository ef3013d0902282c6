"""Command line entry point ``addsysid``.

Exit status: 0 on success, 2 for invalid input, 3 when the computation fails.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .benchmark import (
    BenchmarkSpec,
    McConfig,
    benchmark_controller,
    build_three_mass,
    emit_results,
    read_results_csv,
    run_monte_carlo,
    simulate_dataset,
)
from .closed_loop import DiscreteController
from .errors import NumericError, SysIdError, ValidationError
from .io import read_dataset, read_json, write_dataset, write_json
from .lti import AdditiveModel
from .riv import EstimatorOptions, RivResult, init_from_orders, riv_solve
from .structured import ModalMap, modal_init, project

log = logging.getLogger("addsysid")


def _obj(d, what):
    if not isinstance(d, dict):
        raise ValidationError(f"{what} must be a JSON object", "SCHEMA")
    return d


def cmd_simulate(args):
    cfg = _obj(read_json(args.config), "simulation config")
    extra = set(cfg) - {"benchmark", "N", "model"}
    if extra:
        raise ValidationError(f"unknown config keys {sorted(extra)}", "SCHEMA")
    spec = BenchmarkSpec.from_dict(cfg.get("benchmark", {}))
    N = cfg.get("N", 1000)
    if not isinstance(N, int) or N < 2:
        raise ValidationError("N must be an integer >= 2", "SCHEMA")
    model = AdditiveModel.from_dict(cfg["model"]) if "model" in cfg else build_three_mass(spec)
    ds, _ = simulate_dataset(model, spec, N, seed=args.seed)
    write_dataset(args.out, ds)


def _orders_doc(doc):
    if isinstance(doc, list):
        doc = {"orders": doc}
    doc = _obj(doc, "orders document")
    init = AdditiveModel.from_dict(doc["init"]) if "init" in doc else None
    orders = doc.get("orders")
    if orders is None and init is None:
        raise ValidationError("orders document needs 'orders' or 'init'", "SCHEMA")
    try:
        orders = [(int(n), int(m)) for n, m in orders] if orders is not None else init.orders
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"orders must be [n, m] pairs: {exc}", "SCHEMA") from exc
    if init is not None and list(init.orders) != list(orders):
        raise ValidationError("init model orders disagree with 'orders'", "SCHEMA")
    return orders, init


def cmd_identify(args):
    ds = read_dataset(args.data)
    orders, init = _orders_doc(read_json(args.orders))
    ctrl = None
    if args.loop == "closed":
        if args.controller is None:
            raise ValidationError("--loop closed needs --controller", "MISSING_CONTROLLER")
        if ds.r is None:
            raise ValidationError("closed-loop data needs r columns", "MISSING_REFERENCE")
        ctrl = DiscreteController.from_dict(_obj(read_json(args.controller), "controller"))
    elif ds.r is not None:
        ds = type(ds)(ds.h, ds.u, ds.y, None, ds.t0)
    model0 = init if init is not None else init_from_orders(ds, orders)
    res = riv_solve(model0, ds, EstimatorOptions(loop_mode=args.loop, controller=ctrl))
    if not res.converged:
        log.warning("no convergence after %d iterations", res.iterations)
    write_json(args.out, res.to_dict())


def cmd_project(args):
    if args.map != "modal":
        raise ValidationError(f"unknown map {args.map!r}", "SCHEMA")
    est = RivResult.from_dict(_obj(read_json(args.estimate), "estimate"))
    pmap = ModalMap.for_model(est.model)
    res = project(est.beta, est.acov, pmap, modal_init(est.model).to_vector())
    write_json(args.out, res.to_dict())


def cmd_montecarlo(args):
    cfg = _obj(read_json(args.config), "Monte Carlo config")
    extra = set(cfg) - {"benchmark", "mc"}
    if extra:
        raise ValidationError(f"unknown config keys {sorted(extra)}", "SCHEMA")
    spec = BenchmarkSpec.from_dict(cfg.get("benchmark", {}))
    mc = McConfig.from_dict(cfg.get("mc", {}))
    try:
        table = run_monte_carlo(spec, mc)
    except NumericError as exc:
        if getattr(exc, "table", None) is not None:
            emit_results(exc.table, "csv", args.out)
        raise
    emit_results(table, "csv", args.out)
    if args.plots:
        os.makedirs(args.plots, exist_ok=True)
        emit_results(table, "svg", os.path.join(args.plots, "mse.svg"))


def cmd_plot(args):
    emit_results(read_results_csv(args.inp), "svg", args.out)


def cmd_controller(args):
    spec = BenchmarkSpec.from_dict(_obj(read_json(args.config), "benchmark") if args.config else {})
    write_json(args.out, benchmark_controller(spec).to_dict())


def build_parser():
    p = argparse.ArgumentParser(prog="addsysid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a benchmark record to CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("identify", help="estimate an additive model from a CSV record")
    s.add_argument("--data", required=True)
    s.add_argument("--orders", required=True)
    s.add_argument("--loop", choices=("open", "closed"), required=True)
    s.add_argument("--controller")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_identify)

    s = sub.add_parser("project", help="project an estimate onto a structured model")
    s.add_argument("--estimate", required=True)
    s.add_argument("--map", required=True, choices=("modal",))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("montecarlo", help="run a Monte Carlo sweep")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plots")
    s.set_defaults(func=cmd_montecarlo)

    s = sub.add_parser("plot", help="plot an MSE table as SVG")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("controller", help="write the default benchmark controller as JSON")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_controller)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SysIdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
