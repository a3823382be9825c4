"""Command line entry point: generate, civ-check, train, estimate, evaluate.

All pipeline commands share one working directory (``--out``)::

    out/config.json            resolved run config (echoed by every command)
    out/data/rep_000.csv       panels, plus out/data/manifest.json
    out/models/rep_000.json    checkpoints and rep_000_loss.csv traces
    out/estimates/rep_000.csv  per-step reports for every method run
    out/reports/per_replicate.csv, out/reports/aggregate.csv

Exit status is 0 on success, 1 on a domain failure (CIV conditions violated,
every replicate failing) and 2 on usage or configuration errors.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import civgraph, estimator, seqvae, synthdata
from .synthdata import ConfigError, GenConfig

METHODS = ("tdciv", "naive", "oracle")
EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    seed: int = 0
    reps: int = 30
    jobs: int = 1
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    methods: list = field(default_factory=lambda: list(METHODS))
    min_step: int = 2

    def validate(self):
        if self.reps < 1:
            raise UsageError(f"reps must be >= 1, got {self.reps}")
        if self.jobs < 1:
            raise UsageError(f"jobs must be >= 1, got {self.jobs}")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise UsageError(f"unknown methods {bad}; choose from {list(METHODS)}")
        for key in ("seed",):
            if key in self.data or key in self.model:
                raise UsageError("seeds are derived from the top-level 'seed'; remove nested 'seed' keys")
        try:
            self.gen_config(0)
            seqvae.ModelConfig.from_dict(self.model)
        except (ConfigError, ValueError, TypeError) as err:
            raise UsageError(str(err)) from None

    def gen_config(self, seed: int) -> GenConfig:
        return GenConfig.from_dict({**self.data, "seed": seed})

    def model_config(self, seed: int) -> seqvae.ModelConfig:
        return seqvae.ModelConfig.from_dict({**self.model, "seed": seed})

    def resolved(self) -> dict:
        """Every field with defaults filled in; replicate seeds shown as 0."""
        data = asdict(self.gen_config(0))
        data.pop("seed")
        model = asdict(self.model_config(0))
        model.pop("seed")
        return {"seed": self.seed, "reps": self.reps, "jobs": self.jobs, "data": data,
                "model": model, "methods": list(self.methods), "min_step": self.min_step}

    def digest(self) -> str:
        doc = self.resolved()
        doc.pop("jobs")  # parallelism does not change outputs
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def load_run_config(path: str | None) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as err:
            raise UsageError(f"cannot read config {path}: {err}") from None
        except json.JSONDecodeError as err:
            raise UsageError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(raw) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**raw)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "reps", None) is not None:
        cfg.reps = args.reps
    if getattr(args, "methods", None):
        cfg.methods = args.methods.split(",")
    cfg.validate()
    return cfg


# ---------------------------------------------------------------- helpers

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _echo_config(out: Path, cfg: RunConfig) -> None:
    _write_json(out / "config.json", {"config": cfg.resolved(), "config_hash": cfg.digest()})


def _rep_name(k: int) -> str:
    return f"rep_{k:03d}"


def _seeds(cfg: RunConfig) -> list[int]:
    return [synthdata.replicate_seed(cfg.seed, k) for k in range(cfg.reps)]


def _fan_out(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, *zip(*tasks)))


def _read_manifest(out: Path) -> dict:
    path = out / "data" / "manifest.json"
    if not path.exists():
        raise UsageError(f"{path} not found; run 'generate' first")
    return json.loads(path.read_text(encoding="utf-8"))


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- generate

def _generate_one(cfg_dict: dict, seed: int, path: str) -> int:
    ds = synthdata.generate_dataset(GenConfig.from_dict({**cfg_dict, "seed": seed}))
    synthdata.write_panel(ds, path)
    return ds.meta["attempts"]


def cmd_generate(cfg: RunConfig, out: Path) -> int:
    _echo_config(out, cfg)
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    seeds = _seeds(cfg)
    tasks = [(cfg.data, s, str(data_dir / f"{_rep_name(k)}.csv")) for k, s in enumerate(seeds)]
    attempts = _fan_out(_generate_one, tasks, cfg.jobs)
    reps = []
    for k, s in enumerate(seeds):
        path = data_dir / f"{_rep_name(k)}.csv"
        reps.append({"index": k, "seed": s, "file": path.name, "sha256": _sha256(path), "attempts": attempts[k]})
    _write_json(data_dir / "manifest.json", {"master_seed": cfg.seed, "config_hash": cfg.digest(), "replicates": reps})
    _log(f"wrote {len(reps)} panels to {data_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- civ-check

def _node_list(text: str) -> set:
    return {civgraph.parse_node(tok) for tok in text.split(",") if tok.strip()}


def cmd_civ_check(args) -> int:
    if args.paper_dag is not None:
        g = civgraph.build_paper_dag(args.paper_dag, with_proxy=not args.no_proxy)
    else:
        g = civgraph.read_dag(args.dag)
    t = args.t
    if t is None and (args.s is None or args.w is None or args.y is None):
        raise UsageError("give --t or all of --s, --w, --y")
    s, w, y = civgraph.civ_triple(t) if t is not None else (None, None, None)
    s = civgraph.parse_node(args.s) if args.s else s
    w = civgraph.parse_node(args.w) if args.w else w
    y = civgraph.parse_node(args.y) if args.y else y
    if args.cond is not None:
        cond = _node_list(args.cond)
    elif t is not None:
        cond = civgraph.history_conditioning(t)
    else:
        raise UsageError("give --cond, or --t for the history conditioning set")
    cond = cond - _node_list(args.drop or "")
    missing = [civgraph.fmt(v) for v in sorted(cond | {s, w, y}) if v not in g.nodes]
    if missing:
        raise UsageError(f"nodes not in graph: {', '.join(missing)}")
    verdict = civgraph.check_civ(g, s, w, y, cond)
    doc = {"instrument": civgraph.fmt(s), "treatment": civgraph.fmt(w), "outcome": civgraph.fmt(y),
           "conditioning": sorted(civgraph.fmt(v) for v in cond), **verdict.to_dict()}
    print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK if verdict.valid else EXIT_DOMAIN


# ---------------------------------------------------------------- train

def _train_one(model_dict: dict, seed: int, data_path: str, ckpt_path: str, trace_path: str) -> float:
    ds = synthdata.read_panel(data_path)
    cfg = seqvae.ModelConfig.from_dict({**model_dict, "seed": seed})
    model = seqvae.build_model(cfg, ds.X, ds.W, ds.Y)
    result = seqvae.train(model, ds.X, ds.W, ds.Y)
    seqvae.save_checkpoint(model, ckpt_path, extra={"data_sha256": _sha256(Path(data_path))})
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for e, v in enumerate(result.loss_trace):
            fh.write(f"{e},{v!r}\n")
    return result.loss_trace[-1] if result.loss_trace else float("nan")


def cmd_train(cfg: RunConfig, out: Path) -> int:
    _echo_config(out, cfg)
    manifest = _read_manifest(out)
    model_dir = out / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    tasks = []
    for rep in manifest["replicates"][: cfg.reps]:
        name = _rep_name(rep["index"])
        tasks.append((cfg.model, rep["seed"], str(out / "data" / rep["file"]), str(model_dir / f"{name}.json"),
                      str(model_dir / f"{name}_loss.csv")))
    finals = _fan_out(_train_one, tasks, cfg.jobs)
    _log(f"trained {len(finals)} models; final losses {[round(v, 3) for v in finals]}")
    return EXIT_OK


# ---------------------------------------------------------------- estimate

def _estimate_one(methods: list, data_path: str, ckpt_path: str | None, seed: int):
    ds = synthdata.read_panel(data_path)
    reports, failures = [], {}
    for method in methods:
        try:
            if method == "naive":
                rep = estimator.ace_naive(ds)
            elif method == "oracle":
                rep = estimator.ace_oracle(ds)
            else:
                if ckpt_path is None or not Path(ckpt_path).exists():
                    raise FileNotFoundError(f"checkpoint {ckpt_path} not found; run 'train' or use --oracle")
                model = seqvae.load_checkpoint(ckpt_path)
                lp = seqvae.extract_representations(model, ds.X, ds.W, ds.Y)
                rep = estimator.ace_tdciv(lp.S_mean, lp.Z_mean, ds.W, ds.Y)
        except (estimator.WeakInstrumentError, estimator.CollinearDesignError) as err:
            failures[method] = str(err)
            continue
        rep.seed = seed
        if ds.true_ace is not None:
            estimator.evaluate(rep, ds.true_ace)
        reports.append(rep)
    return reports, failures


def _run_estimates(cfg: RunConfig, out: Path, methods: list) -> tuple[list, dict]:
    manifest = _read_manifest(out)
    est_dir = out / "estimates"
    est_dir.mkdir(parents=True, exist_ok=True)
    reps = manifest["replicates"][: cfg.reps]
    tasks = []
    for rep in reps:
        ckpt = out / "models" / f"{_rep_name(rep['index'])}.json"
        tasks.append((methods, str(out / "data" / rep["file"]), str(ckpt), rep["seed"]))
    results = _fan_out(_estimate_one, tasks, cfg.jobs)
    failures = {}
    for rep, (reports, fails) in zip(reps, results):
        estimator.write_reports(reports, est_dir / f"{_rep_name(rep['index'])}.csv")
        for method, msg in fails.items():
            failures.setdefault(method, []).append({"replicate": rep["index"], "error": msg})
    _write_json(est_dir / "failures.json", failures)
    return results, failures


def cmd_estimate(cfg: RunConfig, out: Path, oracle: bool = False) -> int:
    _echo_config(out, cfg)
    methods = ["oracle"] if oracle else ["tdciv"]
    try:
        results, failures = _run_estimates(cfg, out, methods)
    except FileNotFoundError as err:
        raise UsageError(str(err)) from None
    for method in methods:
        ok = sum(any(r.method == method for r in reports) for reports, _ in results)
        _log(f"{method}: {ok} of {len(results)} replicates estimated, {len(failures.get(method, []))} failed")
    if all(not reports for reports, _ in results):
        return EXIT_DOMAIN
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    _echo_config(out, cfg)
    try:
        results, failures = _run_estimates(cfg, out, list(cfg.methods))
    except FileNotFoundError as err:
        raise UsageError(str(err)) from None
    by_method: dict = {m: [] for m in cfg.methods}
    for reports, _ in results:
        for r in reports:
            by_method[r.method].append(r)
    report_dir = out / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    flat = [r for m in cfg.methods for r in by_method[m]]
    _write_per_replicate(flat, report_dir / "per_replicate.csv")
    aggs = [estimator.aggregate(by_method[m]) for m in cfg.methods if by_method[m] and by_method[m][0].truth is not None]
    estimator.write_aggregates(aggs, report_dir / "aggregate.csv")
    summary = {"config_hash": cfg.digest(), "methods": {}}
    for m in cfg.methods:
        errs = [r.mean_abs_error(cfg.min_step) for r in by_method[m] if r.abs_error is not None]
        summary["methods"][m] = {"replicates": len(by_method[m]), "failures": len(failures.get(m, [])),
                                 "mean_abs_error": float(np.mean(errs)) if errs else None}
    _write_json(report_dir / "summary.json", summary)
    for m, s in summary["methods"].items():
        mae = "n/a" if s["mean_abs_error"] is None else f"{s['mean_abs_error']:.4f}"
        _log(f"{m:>7}: mean |error| {mae} over {s['replicates']} replicates ({s['failures']} failed)")
    return EXIT_OK if flat else EXIT_DOMAIN


def _write_per_replicate(reports, path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write("seed,t,method,estimate,truth,abs_error\n")
        for r in reports:
            for k, t in enumerate(r.steps):
                truth = "" if r.truth is None else repr(float(r.truth[k]))
                err = "" if r.abs_error is None else repr(float(r.abs_error[k]))
                fh.write(f"{r.seed},{int(t)},{r.method},{float(r.estimate[k])!r},{truth},{err}\n")


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdciv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def pipeline(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--jobs", type=int, help="parallel workers over replicates")
        p.add_argument("--reps", type=int, help="number of replicates (overrides config)")
        p.add_argument("--out", required=True, help="working directory")
        return p

    pipeline("generate", "simulate replicate panels")
    pipeline("train", "fit one model per replicate panel")
    est = pipeline("estimate", "per-step effect estimates from checkpoints")
    est.add_argument("--oracle", action="store_true", help="use the true S and Z instead of a checkpoint")
    ev = pipeline("evaluate", "estimate, score against truth and aggregate")
    ev.add_argument("--methods", help="comma separated subset of tdciv,naive,oracle")

    civ = sub.add_parser("civ-check", help="test the conditional-instrument conditions on a DAG")
    src = civ.add_mutually_exclusive_group(required=True)
    src.add_argument("--paper-dag", type=int, metavar="T", help="built-in full-time DAG with horizon T")
    src.add_argument("--dag", help="DAG text file, one 'A[t] -> B[u]' edge per line")
    civ.add_argument("--no-proxy", action="store_true", help="omit the S_t -> X_t proxy edges")
    civ.add_argument("--t", type=int, help="use (S_t, W_t, Y_{t+1}) and the history conditioning set")
    civ.add_argument("--s", help="instrument node, e.g. S[3]")
    civ.add_argument("--w", help="treatment node")
    civ.add_argument("--y", help="outcome node")
    civ.add_argument("--cond", help="comma separated conditioning nodes")
    civ.add_argument("--drop", help="comma separated nodes removed from the conditioning set")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "civ-check":
            try:
                return cmd_civ_check(args)
            except ValueError as err:
                # every ValueError here comes from the graph or node arguments
                raise UsageError(str(err)) from None
        cfg = _apply_overrides(load_run_config(args.config), args)
        out = Path(args.out)
        if args.command == "generate":
            return cmd_generate(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out)
        if args.command == "estimate":
            return cmd_estimate(cfg, out, oracle=args.oracle)
        return cmd_evaluate(cfg, out)
    except (UsageError, ConfigError, civgraph.DagParseError, civgraph.GraphError, synthdata.PanelParseError,
            OSError) as err:
        print(f"tdciv {args.command}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except civgraph.UnknownNodeError as err:
        print(f"tdciv {args.command}: error: unknown node {err}", file=sys.stderr)
        return EXIT_USAGE
    except (synthdata.ScreenError, seqvae.NonFiniteLossError) as err:
        print(f"tdciv {args.command}: {err}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
