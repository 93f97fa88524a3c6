"""Command-line experiment runner.

Subcommands::

    topk-attack gen-data --out train.jsonl --test-out test.jsonl
    topk-attack train --data train.jsonl --out model.json
    topk-attack attack --model model.json --data test.jsonl --mode untargeted --k 3 --out res.jsonl
    topk-attack report res.jsonl --out table.csv

Every option can also come from a flat ``key = value`` file given with
``--config`` (keys are the long option names, with ``-`` or ``_``; list
values are comma separated). Command-line flags override the file.

Exit codes: 0 success, 1 bad parameter, 2 I/O or file-format error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .attacks import MODES, AttackConfig, attack_mlap, attack_targeted, attack_universal, attack_untargeted
from .attacks import write_perturbations_csv
from .datakit import Dataset, generate_synthetic, load_dataset, save_dataset
from .errors import DatasetParseError, InvariantError, ParameterError
from .evaluation import STRATEGIES, EvalRecord, asr, consistency_rate, label_consistency, pert, select_targets
from .evaluation import top_k_set
from .predictor import TrainConfig, load_model, save_model, train_victim

logger = logging.getLogger("topk_attack")

EXIT_OK, EXIT_PARAM, EXIT_IO, EXIT_INVARIANT = 0, 1, 2, 3

# Defaults describe the desk-scale victim used by the acceptance suite.
DEFAULTS = {
    "seed": 0,
    # gen-data
    "m": 10,
    "d": 20,
    "n": 1000,
    "n_test": 400,
    "avg_labels": 1.5,
    "max_labels": 3,
    "noise": 2.0,
    # train
    "epochs": 50,
    "lr": 0.1,
    "batch_size": 32,
    "hidden": (64,),
    "activation": "tanh",
    # attack
    "mode": "untargeted",
    "k": 3,
    "k_prime": None,
    "epsilon": None,
    "eta": 0.01,
    "max_iter": 1000,
    "strategy": "best",
    "xi": 0.7,
    "max_epochs": 20,
    "beta": 0.0,
    "no_projection": False,
    "early_stop": False,
    "limit": None,
    "workers": 1,
}

REPORT_COLUMNS = ("attack", "k", "k_prime", "strategy", "n", "Pert", "ASR")
RECORD_FIELDS = {"instance": int, "attack": str, "k": int, "strategy": str, "d": int, "success_at": dict, "norm": float}


class FileFormatError(Exception):
    """A model, results or config file does not have the expected layout."""


def _read_model(path):
    try:
        return load_model(path)
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: not a model file ({exc!r})") from exc


# -- config handling ------------------------------------------------------------


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in DEFAULTS:
            raise ParameterError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def _coerce(key, value):
    default = DEFAULTS[key]
    if not isinstance(value, str):
        return value
    if key in ("hidden", "k_prime"):
        parts = [p for p in value.replace(" ", "").split(",") if p]
        return tuple(int(p) for p in parts)
    if isinstance(default, bool):
        low = value.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ParameterError(f"{key} must be a boolean, got {value!r}")
        return low in ("true", "1", "yes")
    if key in ("epsilon",):
        return float(value)
    if key in ("limit",):
        return int(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve(args, keys) -> dict:
    """Merge defaults, the config file and explicit flags (in that order)."""
    from_file = read_config(args.config) if args.config else {}
    merged = {}
    for key in keys:
        value = getattr(args, key, None)
        if value is None:
            value = from_file.get(key, DEFAULTS[key])
        try:
            merged[key] = _coerce(key, value)
        except ValueError as exc:
            raise ParameterError(f"bad value for {key}: {value!r}") from exc
    return merged


# -- gen-data -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    p = resolve(args, ["seed", "m", "d", "n", "n_test", "avg_labels", "max_labels", "noise"])
    n_test = p["n_test"] if args.test_out else 0
    if n_test < 0:
        raise ParameterError(f"n_test must be >= 0, got {n_test}")
    ds = generate_synthetic(
        p["m"], p["d"], p["n"] + n_test, p["avg_labels"], seed=p["seed"], max_labels=p["max_labels"], noise=p["noise"]
    )
    train, test = ds.split(p["n"])
    save_dataset(train, args.out)
    print(f"wrote {len(train)} instances to {args.out}")
    if args.test_out:
        if n_test < 1:
            raise ParameterError("--test-out needs n_test >= 1")
        save_dataset(test, args.test_out)
        print(f"wrote {len(test)} instances to {args.test_out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------


def cmd_train(args) -> int:
    p = resolve(args, ["seed", "epochs", "lr", "batch_size", "hidden", "activation", "k"])
    data = load_dataset(args.data)
    cfg = TrainConfig(
        epochs=p["epochs"], lr=p["lr"], batch_size=p["batch_size"], seed=p["seed"],
        hidden=tuple(p["hidden"]), activation=p["activation"],
    )
    model = train_victim(data, cfg)
    save_model(model, args.out)
    acc = consistency_rate(model, data, p["k"])
    print(f"subset accuracy (k={p['k']}) on {args.data}: {acc:.4f}")
    return EXIT_OK


# -- attack ---------------------------------------------------------------------


def _existing_records(path: Path) -> list:
    if not path.exists():
        return []
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno}: unreadable record: {exc}") from exc
    return out


def _success_at(model, x, z, truth, k_primes, low, high) -> dict:
    f = model.predict(np.clip(x + z, low, high))
    return {str(kp): label_consistency(f, truth, kp) == 0 for kp in k_primes}


def _run_instance(task):
    """Worker entry point: one instance-specific attack, returned as a record."""
    model, mode, cfg, strategy, seed, i, x, truth, k_primes = task
    rec = {"instance": i, "attack": mode, "k": cfg.k, "strategy": strategy if mode in ("targeted", "mlap") else "-"}
    if mode == "untargeted":
        res = attack_untargeted(model, x, truth, cfg)
        success_at = _success_at(model, x, res.perturbation.z, truth, k_primes, cfg.clip_low, cfg.clip_high)
    else:
        target = select_targets(model.predict(x), truth, cfg.k, strategy, seed=[seed, i])
        runner = attack_targeted if mode == "targeted" else attack_mlap
        res = runner(model, x, target, cfg)
        rec["target"] = list(target.labels.indices)
        success_at = {str(cfg.k): bool(res.success)}
    if cfg.projection and res.perturbation.l2_norm > cfg.epsilon + 1e-9:
        raise InvariantError(f"instance {i}: ||z|| = {res.perturbation.l2_norm} exceeds epsilon {cfg.epsilon}")
    rec.update(res.to_record(i, cfg.k))
    rec["d"] = int(x.size)
    rec["success_at"] = success_at
    return rec


def _eligible(model, data: Dataset, k: int, limit):
    """Indices of instances whose clean prediction is consistent at ``k``."""
    scores = model.predict(data.x)
    ids = [i for i, (f, y) in enumerate(zip(scores, data.labels)) if label_consistency(f, y, k) == 1]
    return ids if limit is None else ids[:limit]


def cmd_attack(args) -> int:
    p = resolve(
        args,
        ["seed", "mode", "k", "k_prime", "epsilon", "eta", "max_iter", "strategy", "xi", "max_epochs", "beta",
         "no_projection", "early_stop", "limit", "workers"],
    )
    mode, k = p["mode"], p["k"]
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}; expected one of {MODES}")
    strategy = p["strategy"].lower()
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    k_primes = tuple(p["k_prime"]) if p["k_prime"] else (k,)
    if mode in ("targeted", "mlap") and k_primes != (k,):
        raise ParameterError("targeted attacks are scored at k only; drop --k-prime")
    if p["workers"] < 1:
        raise ParameterError(f"workers must be >= 1, got {p['workers']}")
    overrides = dict(eta=p["eta"], max_iter=p["max_iter"], beta=p["beta"], projection=not p["no_projection"],
                     seed=p["seed"], early_stop=p["early_stop"])
    if p["epsilon"] is not None:
        overrides["epsilon"] = p["epsilon"]
    cfg = AttackConfig.for_mode(mode, k, **overrides)

    model = _read_model(args.model)
    data = load_dataset(args.data)
    if (data.m, data.d) != (model.num_labels(), model.input_dim()):
        raise ParameterError(f"dataset is m={data.m}, d={data.d} but the model is m={model.num_labels()}, d={model.input_dim()}")
    cfg.check_labels(data.m)
    for kp in k_primes:
        if not 1 <= kp < data.m:
            raise ParameterError(f"k' must lie in [1, {data.m - 1}], got {kp}")
    ids = _eligible(model, data, k, p["limit"])

    out = Path(args.out)
    done = _existing_records(out)
    for r in done:
        if (r.get("attack"), r.get("k")) != (mode, k):
            raise ParameterError(f"{out} holds {r.get('attack')} k={r.get('k')} records; use a fresh file")
    if mode == "universal":
        if done:
            print(f"{out} already holds a universal run; nothing to do")
            return EXIT_OK
        return _universal(args, model, data, ids, cfg, p, k_primes, out)

    seen = {r["instance"] for r in done}
    todo = [i for i in ids if i not in seen]
    tasks = [(model, mode, cfg, strategy, p["seed"], i, data.x[i], data.labels[i], k_primes) for i in todo]
    with out.open("a") as fh:
        if p["workers"] == 1:
            results = map(_run_instance, tasks)
            _write_ordered(fh, results)
        else:
            with ProcessPoolExecutor(max_workers=p["workers"]) as pool:
                _write_ordered(fh, pool.map(_run_instance, tasks, chunksize=4))
    print(f"{mode}: {len(todo)} new, {len(seen)} resumed, {len(ids)} eligible instances -> {out}")
    return EXIT_OK


def _write_ordered(fh, results):
    for rec in results:
        fh.write(json.dumps(rec) + "\n")
        fh.flush()


def _universal(args, model, data, ids, cfg, p, k_primes, out: Path) -> int:
    train = data.subset(ids)
    if len(train) == 0:
        raise ParameterError("no correctly classified instances to fit a universal perturbation on")
    res = attack_universal(model, train, cfg, xi=p["xi"], max_epochs=p["max_epochs"])
    z = res.z.z
    if cfg.projection and res.z.l2_norm > cfg.epsilon + 1e-9:
        raise InvariantError(f"universal ||z|| = {res.z.l2_norm} exceeds epsilon {cfg.epsilon}")
    if args.eval_data:
        held = load_dataset(args.eval_data)
        eval_ids = _eligible(model, held, cfg.k, None)
        eval_set = held.subset(eval_ids)
    else:
        eval_set, eval_ids = train, ids
    shifted = np.clip(eval_set.x + z, cfg.clip_low, cfg.clip_high)
    scores = model.predict(shifted) if len(eval_set) else []
    with out.open("a") as fh:
        for i, x, y, f in zip(eval_ids, shifted, eval_set.labels, scores):
            rec = {
                "instance": i,
                "attack": "universal",
                "k": cfg.k,
                "strategy": "-",
                "success": label_consistency(f, y, cfg.k) == 0,
                "norm": res.z.l2_norm,
                "iterations": res.epochs_used,
                "topk": list(top_k_set(f, cfg.k).indices),
                "d": int(x.size),
                "success_at": {str(kp): label_consistency(f, y, kp) == 0 for kp in k_primes},
            }
            fh.write(json.dumps(rec) + "\n")
    sidecar = out.with_name(out.name + ".z.csv")
    write_perturbations_csv(sidecar, [(0, z)])
    meta = {"training_uasr": res.training_uasr, "epochs": res.epochs_used, "converged": res.converged,
            "norm": res.z.l2_norm, "n_train": len(train)}
    out.with_name(out.name + ".meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    print(f"universal: training UASR {res.training_uasr:.3f} after {res.epochs_used} epochs, ||z|| {res.z.l2_norm:.4f}")
    if not res.converged:
        print(f"universal: xi={p['xi']} not reached within {p['max_epochs']} epochs", file=sys.stderr)
    return EXIT_OK


# -- report ---------------------------------------------------------------------


def _check_record(rec, path, lineno):
    if not isinstance(rec, dict):
        raise FileFormatError(f"{path}:{lineno}: record is not a JSON object")
    for key, kind in RECORD_FIELDS.items():
        if key not in rec:
            raise FileFormatError(f"{path}:{lineno}: record lacks field {key!r}")
        value = rec[key]
        if kind is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
        if not ok:
            raise FileFormatError(f"{path}:{lineno}: field {key!r} has type {type(value).__name__}")
    for kp, ok in rec["success_at"].items():
        if not kp.isdigit() or not isinstance(ok, bool):
            raise FileFormatError(f"{path}:{lineno}: malformed success_at entry {kp!r}: {ok!r}")


def summarize(paths, attack=None, k=None) -> list:
    """Aggregate result files into rows of ``REPORT_COLUMNS``."""
    groups = {}
    for path in paths:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FileFormatError(f"{path}:{lineno}: unreadable record: {exc}") from exc
            _check_record(rec, path, lineno)
            if attack is not None and rec["attack"] != attack:
                continue
            if k is not None and rec["k"] != k:
                continue
            for kp, ok in rec["success_at"].items():
                key = (rec["attack"], rec["k"], int(kp), rec["strategy"])
                groups.setdefault(key, []).append(
                    EvalRecord(rec["instance"], None, bool(ok), float(rec["norm"]), rec["d"])
                )
    attack_rank = {a: i for i, a in enumerate(MODES)}
    strat_rank = {s: i for i, s in enumerate(("-",) + STRATEGIES)}
    rows = []
    for key in sorted(groups, key=lambda t: (attack_rank.get(t[0], 99), t[0], t[1], t[2], strat_rank.get(t[3], 99), t[3])):
        recs = groups[key]
        rows.append(dict(zip(REPORT_COLUMNS, (*key, len(recs), pert(recs), asr(recs)))))
    return rows


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def rows_to_json(rows) -> str:
    clean = [{c: (None if isinstance(r[c], float) and math.isnan(r[c]) else r[c]) for c in REPORT_COLUMNS} for r in rows]
    return json.dumps({"columns": list(REPORT_COLUMNS), "rows": clean}, indent=2) + "\n"


def cmd_report(args) -> int:
    rows = summarize(args.results, attack=args.attack, k=args.k)
    table = rows_to_csv(rows)
    if args.out:
        out = Path(args.out)
        out.write_text(table)
        out.with_suffix(".json").write_text(rows_to_json(rows))
    else:
        sys.stdout.write(table)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARAM, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="topk-attack", description="Adversarial perturbations for top-k multi-label predictors.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=out_required)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-label dataset")
    common(g)
    g.add_argument("--m", type=int)
    g.add_argument("--d", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--avg-labels", type=float)
    g.add_argument("--max-labels", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--test-out", help="also write a held-out split drawn from the same generation")
    g.add_argument("--n-test", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a victim MLP")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--hidden", help="comma-separated hidden widths, e.g. 64 or 64,32")
    t.add_argument("--activation", choices=("tanh", "relu", "identity"))
    t.add_argument("--k", type=int, help="cutoff for the reported subset accuracy")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="attack correctly classified instances")
    common(a)
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", help="universal mode: held-out dataset to score the shared perturbation on")
    a.add_argument("--mode", choices=MODES)
    a.add_argument("--k", type=int)
    a.add_argument("--k-prime", type=int, action="append", help="extra cutoff to score success at (repeatable)")
    a.add_argument("--epsilon", type=float)
    a.add_argument("--eta", type=float)
    a.add_argument("--max-iter", type=int)
    a.add_argument("--strategy", choices=STRATEGIES)
    a.add_argument("--xi", type=float)
    a.add_argument("--max-epochs", type=int)
    a.add_argument("--beta", type=float)
    a.add_argument("--no-projection", action="store_true", default=None)
    a.add_argument("--early-stop", action="store_true", default=None)
    a.add_argument("--limit", type=int, help="attack at most this many eligible instances")
    a.add_argument("--workers", type=int)
    a.set_defaults(func=cmd_attack)

    r = sub.add_parser("report", help="aggregate result files into Pert/ASR tables")
    r.add_argument("results", nargs="+")
    r.add_argument("--out", help="CSV path; a JSON copy goes next to it")
    r.add_argument("--attack", choices=MODES)
    r.add_argument("--k", type=int)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits on --help (0) and on usage errors (EXIT_PARAM)
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (DatasetParseError, FileFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM


if __name__ == "__main__":
    sys.exit(main())
