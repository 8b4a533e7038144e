"""Command-line entry point: validate, synth, train, predict, eval, sweep."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .cohort import CohortFormatError, SynthConfig, generate_raw, load_cohort, read_cohort, write_cohort
from .estimator import KGPathPredictor, history_lines
from .evaluation import SWEEP_GRIDS, cross_validate, format_reports, sweep
from .inference import export_paths, rank_diseases
from .kg import KGFormatError, bundled_kg_path, load_kg

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SNAPSHOT_ENV = "KGPATH_SNAPSHOT_DIR"

log = logging.getLogger("kgpath")

# (section, key) -> (default, help). Order is the order shown in --help.
CONFIG_KEYS = {
    ("paths", "kg"): (None, "knowledge-graph file; empty means the bundled mini KG"),
    ("paths", "cohort"): ("cohort.tsv", "cohort file"),
    ("paths", "snapshots"): ("snapshots", f"snapshot directory (env {SNAPSHOT_ENV} overrides)"),
    ("paths", "reports"): ("reports", "report directory"),
    ("embeddings", "dim"): (32, "entity/patient embedding length k"),
    ("embeddings", "ae_hidden"): (64, "autoencoder hidden width"),
    ("embeddings", "epochs"): (100, "RBM and autoencoder epochs"),
    ("embeddings", "lr"): (1e-3, "RBM and autoencoder learning rate"),
    ("agent", "horizon"): (2, "walk length T"),
    ("agent", "gamma"): (0.99, "discount factor"),
    ("agent", "entropy_weight"): (0.13, "entropy bonus weight alpha"),
    ("agent", "critic_weight"): (0.5, "weight of the critic squared error"),
    ("agent", "lr"): (1e-3, "agent learning rate"),
    ("agent", "optimizer"): ("adam", "adam or sgd"),
    ("agent", "hidden"): ([64, 64], "shared trunk widths"),
    ("agent", "episodes_per_patient"): (4, "rollouts per patient per epoch"),
    ("agent", "epochs"): (30, "agent training epochs"),
    ("agent", "batch_size"): (32, "patients per update"),
    ("inference", "beam_widths"): (None, "per-step beam widths K_t (int or list); empty means automatic"),
    ("inference", "exact"): (False, "keep every path (overrides beam_widths)"),
    ("inference", "min_edge_prob"): (0.1, "dot export hides edges at or below this probability"),
    ("seed", None): (0, "master seed for training, folds and synth"),
}


class UsageError(Exception):
    pass


def default_config() -> dict:
    cfg: dict = {}
    for (section, key), (default, _) in CONFIG_KEYS.items():
        if key is None:
            cfg[section] = default
        else:
            cfg.setdefault(section, {})[key] = copy.deepcopy(default)
    return cfg


def config_help() -> str:
    lines = ["configuration keys (YAML file via --config, or --set section.key=value):"]
    for (section, key), (default, text) in CONFIG_KEYS.items():
        name = section if key is None else f"{section}.{key}"
        shown = "null" if default is None else json.dumps(default)
        lines.append(f"  {name:<30} default {shown:<12} {text}")
    lines.append(f"precedence: defaults < config file < ${SNAPSHOT_ENV} < --set and dedicated flags")
    return "\n".join(lines)


def _merge(cfg: dict, updates: dict, origin: str) -> None:
    if not isinstance(updates, dict):
        raise UsageError(f"{origin}: top level must be a mapping")
    for section, value in updates.items():
        if section not in cfg:
            raise UsageError(f"{origin}: unknown key {section!r}")
        if isinstance(cfg[section], dict):
            if not isinstance(value, dict):
                raise UsageError(f"{origin}: {section} must be a mapping")
            for key, v in value.items():
                if key not in cfg[section]:
                    raise UsageError(f"{origin}: unknown key {section}.{key}")
                cfg[section][key] = v
        else:
            cfg[section] = value


def _apply_override(cfg: dict, item: str) -> None:
    name, sep, raw = item.partition("=")
    if not sep:
        raise UsageError(f"--set expects section.key=value, got {item!r}")
    value = yaml.safe_load(raw) if raw else None
    section, _, key = name.partition(".")
    _merge(cfg, {section: {key: value}} if key else {section: value}, "--set")


def load_config(path: str | None, overrides=(), env=None) -> dict:
    env = os.environ if env is None else env
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise UsageError(f"{path}: invalid YAML: {exc}") from None
        if doc is not None:
            _merge(cfg, doc, str(path))
    if env.get(SNAPSHOT_ENV):
        cfg["paths"]["snapshots"] = env[SNAPSHOT_ENV]
    for item in overrides:
        _apply_override(cfg, item)
    _check_types(cfg)
    return cfg


def _check_types(cfg: dict) -> None:
    for (section, key), (default, _) in CONFIG_KEYS.items():
        value = cfg[section] if key is None else cfg[section][key]
        name = section if key is None else f"{section}.{key}"
        if default is None or value is None:
            continue
        if isinstance(default, float) and isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                value = float(value)
            except ValueError:
                pass
            else:
                if key is None:
                    cfg[section] = value
                else:
                    cfg[section][key] = value
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif isinstance(default, list):
            ok = isinstance(value, list) and all(isinstance(v, int) for v in value)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise UsageError(f"{name}: expected {type(default).__name__}, got {value!r}")


def build_estimator(cfg: dict, kg) -> KGPathPredictor:
    e, a, inf = cfg["embeddings"], cfg["agent"], cfg["inference"]
    widths = "exact" if inf["exact"] else inf["beam_widths"]
    if isinstance(widths, list):
        widths = tuple(widths)
    est = KGPathPredictor(kg=kg, embedding_dim=e["dim"], ae_hidden=e["ae_hidden"],
                          embedding_epochs=e["epochs"], embedding_lr=float(e["lr"]),
                          horizon=a["horizon"], gamma=float(a["gamma"]),
                          entropy_weight=float(a["entropy_weight"]), critic_weight=float(a["critic_weight"]),
                          lr=float(a["lr"]), episodes_per_patient=a["episodes_per_patient"],
                          epochs=a["epochs"], batch_size=a["batch_size"], hidden=tuple(a["hidden"]),
                          optimizer=a["optimizer"], beam_widths=widths, random_state=cfg["seed"])
    try:
        est.train_config()
        if widths is not None:
            est.beam_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return est


def _kg(cfg):
    return load_kg(cfg["paths"]["kg"] or bundled_kg_path())


def _cohort(cfg, kg):
    path = Path(cfg["paths"]["cohort"])
    if not path.is_file():
        raise FileNotFoundError(f"cohort file not found: {path}")
    return load_cohort(path, kg)


# -- subcommands ---------------------------------------------------------------


def cmd_validate(cfg, args, out) -> int:
    kg = _kg(cfg)
    cohort = _cohort(cfg, kg)
    rows = [(f"kg_{k}", v) for k, v in kg.counts().items()] + list(cohort.summary().items())
    for k, v in rows:
        out.write(f"{k}\t{v:.3f}\n" if isinstance(v, float) else f"{k}\t{v}\n")
    return EXIT_OK


def cmd_synth(cfg, args, out) -> int:
    kg = _kg(cfg)
    seed = cfg["seed"] if args.seed is None else args.seed
    synth = SynthConfig(n_patients=args.patients, noise=args.noise, imbalance=args.imbalance, seed=seed)
    raw, names = generate_raw(kg, synth)
    dest = Path(args.out or cfg["paths"]["cohort"])
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(dest, raw, names)
    out.write(f"wrote {len(raw)} admissions for {synth.n_patients} patients to {dest}\n")
    return EXIT_OK


def _stage(name, fn):
    try:
        return fn()
    except FloatingPointError as exc:
        raise FloatingPointError(f"{name} stage failed: {exc}") from exc
    except (ValueError, RuntimeError) as exc:
        raise RuntimeError(f"{name} stage failed: {exc}") from exc


def cmd_train(cfg, args, out) -> int:
    kg = _kg(cfg)
    cohort = _cohort(cfg, kg)
    X, Y, _ = cohort.to_arrays()
    est = build_estimator(cfg, kg)
    snap = Path(cfg["paths"]["snapshots"])
    if args.stage == "agent":
        est.load(snap, require_agent=False)
    else:
        _stage("embedding", lambda: est.fit_embeddings(X))
    if args.stage != "embeddings":
        _stage("agent", lambda: est.fit_agent(X, Y))
    written = est.save(snap)
    if hasattr(est, "history_"):
        log_path = snap / "train_log.jsonl"
        log_path.write_text(history_lines(est.history_), encoding="utf-8")
        written.append(log_path)
    for p in written:
        out.write(f"wrote {p}\n")
    return EXIT_OK


def _select_record(cohort, patient, admission):
    candidates = [r for r in cohort.records if r.patient_id == patient]
    if admission is not None:
        candidates = [r for r in candidates if r.admission == admission]
    return candidates[-1] if candidates else None


def cmd_predict(cfg, args, out) -> int:
    kg = _kg(cfg)
    cohort = _cohort(cfg, kg)
    record = _select_record(cohort, args.patient, args.admission)
    if record is None:
        raw, _ = read_cohort(cfg["paths"]["cohort"], kg)
        known = [r for r in raw if r.patient_id == args.patient
                 and (args.admission is None or r.admission == args.admission)]
        if known:
            raise CohortFormatError(f"record of patient {args.patient!r} is not linkable to the KG "
                                    "(no mapped conditions, or a single admission)")
        raise CohortFormatError(f"no record for patient {args.patient!r}"
                                + ("" if args.admission is None else f" admission {args.admission}"))
    est = build_estimator(cfg, kg).load(cfg["paths"]["snapshots"])
    result = est.explain(np.concatenate([record.p_c, record.p_f]))[0]
    if args.explain:
        threshold = cfg["inference"]["min_edge_prob"] if args.min_edge_prob is None else args.min_edge_prob
        text = export_paths(result, kg, args.format, min_edge_prob=threshold)
        out.write(text if text.endswith("\n") else text + "\n")
        return EXIT_OK
    ranked = rank_diseases(result, args.top_k)
    out.write(f"# patient {record.patient_id} admission {record.admission}; unassigned mass "
              f"{result.dropped_mass!r}\n")
    for rank, (entity, prob) in enumerate(ranked, 1):
        out.write(f"{rank}\t{kg.entities[entity].name}\t{prob!r}\n")
    return EXIT_OK


def _write_report(cfg, name, text, out):
    d = Path(cfg["paths"]["reports"])
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(text, encoding="utf-8")
    out.write(text)
    log.info("report written to %s", d / name)


def cmd_eval(cfg, args, out) -> int:
    kg = _kg(cfg)
    cohort = _cohort(cfg, kg)
    seed = cfg["seed"] if args.seed is None else args.seed
    rep = cross_validate(build_estimator(cfg, kg), cohort, folds=args.folds, seed=seed,
                         workers=args.workers, label="default")
    _write_report(cfg, "eval.tsv", format_reports([rep]), out)
    return EXIT_OK


def cmd_sweep(cfg, args, out) -> int:
    kg = _kg(cfg)
    cohort = _cohort(cfg, kg)
    seed = cfg["seed"] if args.seed is None else args.seed
    values = None
    if args.values:
        cast = int if args.axis == "horizon" else float
        values = [cast(v) for v in args.values.split(",")]
    reps = sweep(build_estimator(cfg, kg), cohort, args.axis, values, folds=args.folds, seed=seed,
                 workers=args.workers,
                 on_point=lambda label, r: log.info("%s: macro_auc %.4f +/- %.4f", label,
                                                    r.mean("macro_auc"), r.std("macro_auc")))
    _write_report(cfg, f"sweep_{args.axis}.tsv", format_reports(reps), out)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file (optional)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key, e.g. agent.horizon=3 (repeatable)")
    common.add_argument("--workers", type=_positive, default=1, help="parallel folds (default 1)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="kgpath", description="Disease prediction by walking a medical knowledge graph.",
                     epilog=config_help(), formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, text):
        return sub.add_parser(name, parents=[common], help=text, description=text,
                              epilog=config_help(), formatter_class=fmt)

    add("validate", "load KG and cohort, check name resolution, print summary counts")

    p = add("synth", "write a synthetic planted-rule cohort")
    p.add_argument("--patients", type=_positive, default=2000, help="number of patients (default 2000)")
    p.add_argument("--noise", type=float, default=0.1, help="label noise rate (default 0.1)")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: config seed)")
    p.add_argument("--imbalance", action=argparse.BooleanOptionalAction, default=True,
                   help="skewed disease prevalence (default on)")
    p.add_argument("--out", help="output file (default: paths.cohort)")

    p = add("train", "fit embeddings, then the agent; write snapshots and a JSONL training log")
    p.add_argument("--stage", choices=("all", "embeddings", "agent"), default="all",
                   help="'agent' reuses saved embedding snapshots (default all)")

    p = add("predict", "rank diseases for one cohort record")
    p.add_argument("--patient", required=True, help="patient id in the cohort file")
    p.add_argument("--admission", type=int, default=None, help="admission index (default: latest)")
    p.add_argument("--top-k", type=_positive, default=None, help="only print the k best diseases")
    p.add_argument("--explain", action="store_true", help="print the reasoning paths instead")
    p.add_argument("--format", choices=("json", "dot"), default="json", help="path export format")
    p.add_argument("--min-edge-prob", type=float, default=None,
                   help="dot edge threshold (default: inference.min_edge_prob = 0.1)")

    for name, text in (("eval", "patient-level k-fold cross-validation"),
                       ("sweep", "cross-validate over a hyperparameter grid")):
        p = add(name, text)
        p.add_argument("--folds", type=_positive, default=5, help="number of folds (default 5)")
        p.add_argument("--seed", type=int, default=None, help="fold seed (default: config seed)")
        if name == "sweep":
            grids = "; ".join(f"{k}: {list(v[1])}" for k, v in SWEEP_GRIDS.items())
            p.add_argument("--axis", choices=sorted(SWEEP_GRIDS), required=True, help=f"grids: {grids}")
            p.add_argument("--values", help="comma-separated grid replacing the default one")
    return parser


COMMANDS = {"validate": cmd_validate, "synth": cmd_synth, "train": cmd_train,
            "predict": cmd_predict, "eval": cmd_eval, "sweep": cmd_sweep}


def _exit_code(exc) -> int | None:
    chain = []
    while exc is not None:
        chain.append(exc)
        exc = exc.__cause__
    if any(isinstance(e, FloatingPointError) for e in chain):
        return EXIT_NUMERIC
    if isinstance(chain[-1], (KGFormatError, CohortFormatError, OSError, ValueError, RuntimeError)):
        return EXIT_DATA
    return None


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args, out)
    except UsageError as exc:
        print(f"kgpath: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"kgpath: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
