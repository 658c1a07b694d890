"""Command-line front end.

Every run writes its outputs plus ``manifest.json`` into ``--out-dir``.
Reports never contain timestamps, so identical (config, seed) pairs produce
byte-identical report files; only the manifest records wall-clock times.

Exit codes: 0 success, 2 verification failed or not converged, 3 config
error, 4 numerical divergence.

Randomness: each consumer draws from ``numpy.random.default_rng([seed, key])``
with the keys in :data:`RNG_KEYS`.
"""

import argparse
import datetime as _dt
import json
import logging
import math
import sys
from importlib import resources
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from . import serialization as ser
from .activations import CATALOG, catalog, make_activation, verify_row
from .equilibrium import LayerGameState, verify_nash
from .federated import AggregationRule, Client, FederatedTopology, ServerModel, federated_nash_check, run_rounds
from .gram_schmidt import DependentFamilyError, best_linear_predictor, gs_report, gram_matrix
from .llm import DecoderBlock, decoder_fixpoint, random_block
from .network import NetworkSpec, contraction_mode, fejer_check, km_iterate, layer, refine_fixed_point
from .operators import DEFAULT_PAIRS, DEFAULT_SEED, NotCertifiableError
from .training import TrainingProblem, train

logger = logging.getLogger("nashnet")

EXIT_OK = 0
EXIT_VERIFY = 2
EXIT_CONFIG = 3
EXIT_DIVERGED = 4

RNG_KEYS = {"init": 1, "llm_x0": 2, "llm_blocks": 3, "certify": 4, "deviations": 5}

DEFAULT_TOLS = {
    "check-averaged": 1e-9,
    "iterate": 1e-8,
    "train": 1e-8,
    "federated": 1e-8,
    "gram-schmidt": 1e-10,
    "llm-fixpoint": 1e-8,
    "catalog": None,
}

FIXTURES = ("halving", "relu_tanh", "teacher_student", "federated_single", "federated_two_shard",
            "gs_two_vectors", "llm_small", "llm_large")


class ConfigError(Exception):
    pass


def artifact_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def rng_for(seed, consumer):
    return np.random.default_rng([int(seed), RNG_KEYS[consumer]])


def load_schema(name):
    text = resources.files("nashnet").joinpath("schemas", f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def fixture_path(name):
    if name not in FIXTURES:
        raise ConfigError(f"unknown fixture {name!r}; available: {', '.join(FIXTURES)}")
    return resources.files("nashnet").joinpath("fixtures", f"{name}.json")


def load_config(source, schema_name):
    """Read and strictly validate a config document.

    ``source`` is a file path or ``fixture:<name>`` for a bundled fixture.
    """
    base = None
    try:
        if str(source).startswith("fixture:"):
            text = fixture_path(str(source)[len("fixture:"):]).read_text(encoding="utf-8")
        else:
            path = Path(source)
            base = path.parent
            text = path.read_text(encoding="utf-8")
        cfg = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {source}: {exc}") from exc
    validator = Draft202012Validator(load_schema(schema_name))
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigError(f"config error at {where}: {err.message}")
    cfg["_base"] = str(base) if base is not None else None
    return cfg


class Run:
    """Output directory, manifest bookkeeping and format selection for one command."""

    def __init__(self, command, args, config=None, tolerances=None):
        self.command = command
        self.out_dir = Path(args.out_dir)
        self.format = args.format
        self.config = config
        self.tolerances = dict(tolerances or {})
        self.outputs = []
        self.started = _dt.datetime.now(_dt.timezone.utc).isoformat()

    def path(self, name):
        p = self.out_dir / name
        self.outputs.append(name)
        return p

    def json(self, name, obj):
        ser.dump(obj, self.path(name))

    def text(self, name, text):
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")

    def table(self, stem, header, rows):
        """Write a table as CSV or as a JSON list of records, following ``--format``."""
        if self.format == "csv":
            self.text(f"{stem}.csv", ser.to_csv(header, rows))
        else:
            self.json(f"{stem}.json", [dict(zip(header, r)) for r in rows])

    def finish(self, code, seed=None):
        cfg = None if self.config is None else {k: v for k, v in self.config.items() if k != "_base"}
        manifest = {
            "command": self.command,
            "artifact_version": artifact_version(),
            "config_hash": ser.config_hash({"command": self.command, "config": cfg, "seed": seed,
                                            "tolerances": self.tolerances}),
            "seed": seed,
            "tolerances": self.tolerances,
            "outputs": sorted(set(self.outputs)),
            "exit_code": code,
            "started_at": self.started,
            "finished_at": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        ser.dump(manifest, self.out_dir / "manifest.json")
        return code


def _seed(args, cfg=None):
    if args.seed is not None:
        return int(args.seed)
    if cfg is not None:
        return int(cfg["seed"])
    return DEFAULT_SEED


def _tol(args, cfg, command):
    if args.tol is not None:
        return float(args.tol)
    if cfg is not None and "tol" in cfg:
        return float(cfg["tol"])
    return DEFAULT_TOLS[command]


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_catalog(args):
    run = Run("catalog", args)
    entries = catalog()
    header = ["index", "name", "title", "arity", "gamma", "provenance", "parameters"]
    rows = [[e["index"], e["name"], e["title"], e["arity"], e["gamma"], e["provenance"],
             ";".join(f"{k}={v}" for k, v in e["params"].items())] for e in entries]
    if args.format == "csv":
        run.table("catalog", header, rows)
    else:
        run.json("catalog.json", entries)
    for e in entries:
        print(f"{e['index']:>3} {e['name']:<24} gamma={e['gamma']}")
    return run.finish(EXIT_OK)


def cmd_check_averaged(args):
    if args.all and args.kind:
        raise ConfigError("use either --kind or --all")
    kinds = list(CATALOG) if args.all else (args.kind or [])
    if not kinds:
        raise ConfigError("select activations with --kind NAME or --all")
    unknown = [k for k in kinds if k not in CATALOG]
    if unknown:
        raise ConfigError(f"unknown activation(s) {unknown}; valid names: {', '.join(CATALOG)}")
    seed = _seed(args)
    tol = _tol(args, None, "check-averaged")
    run = Run("check-averaged", args, config={"kinds": kinds, "gamma": args.gamma, "samples": args.samples},
              tolerances={"averaged": tol})
    failed = False
    summary = []
    for kind in kinds:
        report = verify_row(kind, pairs=args.samples, seed=seed, tol=tol, gamma=args.gamma)
        if report is None:
            spec = make_activation(kind, pairs=args.samples, seed=seed)
            cert = spec.certificate
            doc = {"label": kind, "status": "no_closed_form", "certificate": None if cert is None else cert,
                   "discrepancy": spec.discrepancy}
            summary.append([kind, None if cert is None else cert.gamma,
                            "none" if cert is None else cert.provenance, None, None])
        else:
            doc = report.to_dict()
            doc["status"] = "pass" if report.passed else "fail"
            failed = failed or not report.passed
            summary.append([kind, report.gamma, report.provenance, report.passed, report.worst_violation])
        run.json(f"reports/{kind}.json", doc)
        print(f"{kind:<24} {doc['status']}")
    run.table("summary", ["kind", "gamma", "provenance", "passed", "worst_violation"], summary)
    return run.finish(EXIT_VERIFY if failed else EXIT_OK, seed)


def _build_layer(spec):
    return layer(spec["W"], spec.get("b"), spec.get("activation", "identity"), **spec.get("params", {}))


def _trace_out(run, trace, x_star=None):
    if run.format == "csv":
        run.text("trace.csv", trace.to_csv(x_star))
    else:
        run.json("trace.json", trace.to_dict(include_iterates=True))


def _trace_code(trace):
    if trace.stop_reason == "diverged":
        return EXIT_DIVERGED
    return EXIT_OK if trace.converged else EXIT_VERIFY


def cmd_iterate(args):
    cfg = load_config(args.config, "iterate")
    seed = _seed(args, cfg)
    tol = _tol(args, cfg, "iterate")
    run = Run("iterate", args, cfg, {"residual": tol, "fejer": 1e-12})
    try:
        net = NetworkSpec(cfg["x0"], [_build_layer(s) for s in cfg["layers"]], cfg.get("schedule"))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid network: {exc}") from exc
    max_iter = cfg.get("max_iter", 100_000)
    report = {"mode": cfg.get("mode", "km")}
    cert = net.certificate
    report["certificate"] = cert
    if cfg.get("mode", "km") == "contraction":
        try:
            trace = contraction_mode(net, tol=tol, max_iter=max_iter)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        trace = km_iterate(net, tol=tol, max_iter=max_iter, check=cert is not None)
    code = _trace_code(trace)
    x_star = None
    if trace.converged:
        x_star, r_star = refine_fixed_point(net.__call__, trace.x_final)
        report["x_star"] = x_star
        report["x_star_residual"] = r_star
        if cfg.get("fejer", True) and trace.gamma is not None:
            fr = fejer_check(trace, x_star, op=net.__call__)
            report["fejer"] = fr
            if not fr.passed:
                code = EXIT_VERIFY
        nash = verify_nash(LayerGameState.from_point(net, trace.x_final), tol=tol,
                           seed=int(rng_for(seed, "deviations").integers(2**31)))
        report["nash"] = nash
        if not nash.is_equilibrium:
            code = EXIT_VERIFY
    if "rate_ok" in trace.extra and not trace.extra["rate_ok"]:
        code = EXIT_VERIFY
    report["iteration"] = trace.to_dict()
    run.json("report.json", report)
    _trace_out(run, trace, x_star)
    print(f"iterate: {trace.stop_reason} after {trace.n_steps} steps, residual {trace.final_residual:.3e}")
    return run.finish(code, seed)


def _problem_from(cfg, X, y=None, y_layers=None):
    acts = cfg["activations"]
    teacher = [(t["W"], t["b"]) for t in cfg["teacher"]] if cfg.get("teacher") else None
    kw = {}
    if "omega" in cfg:
        kw["omega"] = cfg["omega"]
    if "input_mode" in cfg:
        kw["input_mode"] = cfg["input_mode"]
    if y is None and y_layers is None:
        if teacher is None:
            raise ConfigError("need targets (y or y_layers) or a teacher")
        return TrainingProblem.from_teacher(teacher, acts, X, **kw)
    if y is None:
        y = y_layers[-1]
    return TrainingProblem(X, y, acts, y_layers=y_layers, teacher=teacher, **kw)


def cmd_train(args):
    cfg = load_config(args.config, "train")
    seed = _seed(args, cfg)
    tol = _tol(args, cfg, "train")
    fit_tol = cfg.get("fit_tol", 1e-6)
    run = Run("train", args, cfg, {"vi_residual": tol, "exact_fit": fit_tol})
    try:
        problem = _problem_from(cfg, cfg["X"], cfg.get("y"), cfg.get("y_layers"))
        theta0 = None
        if cfg.get("init", "zero") == "random":
            theta0 = problem.random_theta(seed=int(rng_for(seed, "init").integers(2**31)),
                                          scale=cfg.get("init_scale", 0.1))
        state, rep = train(problem, gamma=cfg.get("gamma", 0.5), tol=tol, max_steps=cfg.get("max_epochs", 100_000),
                           theta=theta0, mode=cfg.get("mode", "shared"), fit_tol=fit_tol)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid training problem: {exc}") from exc
    run.json("report.json", {"target_source": problem.target_source, **rep.to_dict()})
    run.json("theta.json", [{"W": W, "b": b} for W, b in state.theta] if cfg.get("mode", "shared") == "shared"
             else [[{"W": W, "b": b} for W, b in p] for p in state.theta])
    header = ["epoch"] + [f"residual_layer{l + 1}" for l in range(problem.depth)]
    rows = [[e] + [c[e] for c in rep.residual_curves] for e in range(len(rep.residual_curves[0]))]
    run.table("history", header, rows)
    finite = all(math.isfinite(r) for r in rep.layer_residuals)
    code = EXIT_DIVERGED if not finite else (EXIT_OK if rep.converged else EXIT_VERIFY)
    print(f"train: {rep.stop_reason} after {rep.epochs} epochs, residuals {rep.layer_residuals}")
    return run.finish(code, seed)


def cmd_federated(args):
    cfg = load_config(args.config, "federated")
    seed = _seed(args, cfg)
    nash_tol = cfg.get("nash_tol", 1e-3)
    run = Run("federated", args, cfg, {"nash": nash_tol})
    try:
        clients = []
        for c in cfg["clients"]:
            problem = None
            if c.get("X"):
                problem = _problem_from(cfg, c["X"], c.get("y"), c.get("y_layers"))
            clients.append(Client(c["id"], problem, tau=cfg["tau"], gamma=cfg.get("gamma", 0.5)))
        template = next((c for c in clients if c.has_data), None)
        if template is None:
            raise ConfigError("no client holds data")
        zero = template.zero_theta()
        servers = [ServerModel(s["id"], list(cfg["activations"]), [(W.copy(), b.copy()) for W, b in zero],
                               s["clients"], AggregationRule(s.get("rule", "parameter_mean"), s.get("weights")))
                   for s in cfg["servers"]]
        topo = FederatedTopology(servers, clients, tau=cfg["tau"], gamma=cfg.get("gamma", 0.5), seed=seed,
                                 selection=cfg.get("selection", "all"),
                                 subset_fraction=cfg.get("subset_fraction", 1.0), dropout=cfg.get("dropout", 0.0))
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid topology: {exc}") from exc
    result = run_rounds(topo, cfg["rounds"])
    run.text("rounds.jsonl", result.jsonl())
    nash = federated_nash_check(topo, tol=nash_tol)
    errors = {s.server_id: {cid: topo.clients[cid].local_output_error(s.theta) for cid in sorted(s.client_ids)}
              for s in servers}
    run.json("report.json", {
        "rounds": cfg["rounds"],
        "servers": {s.server_id: [{"W": W, "b": b} for W, b in s.theta] for s in servers},
        "client_output_error": errors,
        "nash": nash,
    })
    ok = all(v["passed"] for per in nash.values() for v in per.values())
    finite = all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for s in servers for W, b in s.theta)
    print(f"federated: {cfg['rounds']} rounds, output errors {errors}")
    return run.finish(EXIT_DIVERGED if not finite else (EXIT_OK if ok else EXIT_VERIFY), seed)


def _read_family(cfg):
    if "family" in cfg:
        return [np.asarray(m, dtype=float) for m in cfg["family"]]
    base = Path(cfg["_base"] or ".")
    out = []
    for name in cfg["family_files"]:
        p = Path(name)
        p = p if p.is_absolute() else base / p
        try:
            out.append(np.atleast_2d(np.loadtxt(p, delimiter=",", ndmin=2)))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read family member {p}: {exc}") from exc
    return out


def cmd_gram_schmidt(args):
    cfg = load_config(args.config, "gram_schmidt")
    seed = _seed(args, cfg)
    tol = _tol(args, cfg, "gram-schmidt")
    run = Run("gram-schmidt", args, cfg, {"gram": tol, "idempotence": 1e-12})
    family = _read_family(cfg)
    try:
        X1, rep = gs_report(family)
    except DependentFamilyError as exc:
        run.json("report.json", {"error": str(exc), "gram_condition": exc.cond, "gram": exc.gram})
        print(f"gram-schmidt: {exc}")
        return run.finish(EXIT_VERIFY, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    doc = {"report": rep, "gram": gram_matrix(X1), "passed": rep.gram_error <= tol and rep.idempotence_error <= 1e-12}
    if "predictor" in cfg:
        ix, iy = cfg["predictor"]["x"], cfg["predictor"]["y"]
        if max(ix, iy) >= len(family):
            raise ConfigError("predictor indices exceed the family size")
        bp = best_linear_predictor(family[ix], family[iy])
        doc["predictor"] = {"intercept": bp.intercept, "slope": bp.slope, "alpha": bp.alpha, "beta": bp.beta}
    run.json("report.json", doc)
    run.json("family.json", X1)
    print(f"gram-schmidt: gram error {rep.gram_error:.3e}, idempotence error {rep.idempotence_error:.3e}")
    return run.finish(EXIT_OK if doc["passed"] else EXIT_VERIFY, seed)


def cmd_llm_fixpoint(args):
    cfg = load_config(args.config, "llm_fixpoint")
    seed = _seed(args, cfg)
    tol = _tol(args, cfg, "llm-fixpoint")
    run = Run("llm-fixpoint", args, cfg, {"residual": tol})
    try:
        if "blocks" in cfg:
            blocks = [DecoderBlock.from_config(b) for b in cfg["blocks"]]
        else:
            rb = dict(cfg["random_blocks"])
            n_blocks = rb.pop("n_blocks", 1)
            rng = rng_for(seed, "llm_blocks")
            blocks = [random_block(seed=int(rng.integers(2**31)), **rb) for _ in range(n_blocks)]
        shape = (blocks[0].n_tokens, blocks[0].d)
        if "x0" in cfg:
            x0 = np.asarray(cfg["x0"], dtype=float)
            if "embedding" in cfg:
                x0 = x0 @ np.asarray(cfg["embedding"], dtype=float).T
            if x0.shape != shape:
                raise ValueError(f"x0 must have shape {shape}")
        else:
            x0 = rng_for(seed, "llm_x0").standard_normal(shape)
        rep = decoder_fixpoint(blocks, x0, schedule=cfg.get("schedule"), tol=tol,
                               max_iter=cfg.get("max_iter", 10_000), box=tuple(cfg.get("box", (-20.0, 20.0))),
                               samples=cfg.get("samples", 2000), seed=int(rng_for(seed, "certify").integers(2**31)))
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid decoder config: {exc}") from exc
    doc = rep.to_dict()
    if "unembedding" in cfg and rep.trace.stop_reason != "diverged":
        U = np.asarray(cfg["unembedding"], dtype=float)
        doc["output"] = rep.trace.x_final.reshape(shape) @ U.T
    run.json("report.json", doc)
    _trace_out(run, rep.trace)
    if rep.warning:
        print(f"WARNING: {rep.warning}", file=sys.stderr)
    print(f"llm-fixpoint: certified={rep.certified}, {rep.trace.stop_reason} after {rep.trace.n_steps} steps")
    code = _trace_code(rep.trace)
    if code == EXIT_OK and not rep.certified:
        code = EXIT_VERIFY
    return run.finish(code, seed)


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------


def _global_flags(suppress):
    """Global flags; the subcommand copy suppresses defaults so values given before the subcommand survive."""
    common = argparse.ArgumentParser(add_help=False)

    def default(value):
        return argparse.SUPPRESS if suppress else value

    common.add_argument("--seed", type=int, default=default(None), help="override the config seed")
    common.add_argument("--tol", type=float, default=default(None), help="override the main tolerance")
    common.add_argument("--out-dir", default=default("nashnet-out"), help="directory for outputs")
    common.add_argument("--format", choices=("json", "csv"), default=default("json"),
                        help="format of tables and traces")
    common.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return common


def build_parser():
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="nashnet", description="Averaged-operator networks toolkit.",
                                     parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check-averaged", parents=[common], help="sample-check averagedness constants")
    p.add_argument("--kind", action="append", help="catalog name (repeatable)")
    p.add_argument("--all", action="store_true", help="check every catalog row")
    p.add_argument("--gamma", type=float, default=None, help="check at this gamma instead of the closed form")
    p.add_argument("--samples", type=int, default=DEFAULT_PAIRS, help="number of sampled pairs")
    p.set_defaults(func=cmd_check_averaged)

    sub.add_parser("catalog", parents=[common], help="list the activation catalog").set_defaults(func=cmd_catalog)

    for name, func, helptext in (
        ("iterate", cmd_iterate, "relaxed fixed-point iteration of a network"),
        ("train", cmd_train, "layerwise training"),
        ("federated", cmd_federated, "federated training rounds"),
        ("gram-schmidt", cmd_gram_schmidt, "orthonormalize a family of random variables"),
        ("llm-fixpoint", cmd_llm_fixpoint, "fixed point of decoder blocks"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("config", help="config JSON path, or fixture:<name> for a bundled fixture")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NotCertifiableError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
