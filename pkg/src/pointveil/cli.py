"""Command-line entry point.

Every subcommand writes its artifacts into a fresh timestamped directory
under --out (or an explicit --run-name directory, which must not exist),
together with a `config.resolved` snapshot and a `run.log`. Values come
from defaults, then an optional --config file, then explicit flags.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from pointveil import baselines as B
from pointveil import config as C
from pointveil import data as D
from pointveil import losses as L
from pointveil import metrics as MX
from pointveil import model as M
from pointveil import train as T
from pointveil.synth import generate_dataset

EPILOG = """configuration precedence: built-in defaults < --config file < explicit flags.
Config files are flat `key = value` lines; `#` starts a comment. Every run
writes the effective values to <run-dir>/config.resolved, which can be fed
back via --config to reproduce the run's artifacts bit-identically."""


class CliError(Exception):
    pass


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--out", default="runs", help="output root (default: runs)")
    sub.add_argument("--run-name", help="explicit run directory name (must not exist)")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--quiet", action="store_true", help="suppress stdout logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointveil",
        description="identity-obfuscating reconstruction of gesture point clouds",
        epilog=EPILOG)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate the synthetic dataset",
                        epilog=EPILOG)
    _add_common(p)
    p.add_argument("--subjects", type=int, default=None)
    p.add_argument("--gestures", type=int, default=None)
    p.add_argument("--per-cell", dest="sequences_per_cell", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)

    p = subs.add_parser("preprocess", help="sequence file -> grid file", epilog=EPILOG)
    _add_common(p)
    p.add_argument("--input", required=False, help="sequence JSONL file")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--points", type=int, default=None)

    p = subs.add_parser("split", help="stratified train/test split of sequences",
                        epilog=EPILOG)
    _add_common(p)
    p.add_argument("--input", required=False)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=None)

    p = subs.add_parser("train-classifier", help="pretrain a frozen classifier",
                        epilog=EPILOG)
    _add_common(p)
    p.add_argument("--grids", required=False, help="training grid file")
    p.add_argument("--task", choices=[T.TASK_GESTURE, T.TASK_IDENTITY], default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    _add_model_flags(p)
    _add_train_flags(p)

    p = subs.add_parser("train-autoencoder", help="train the anonymizer against "
                        "frozen classifiers", epilog=EPILOG)
    _add_common(p)
    p.add_argument("--grids", required=False)
    p.add_argument("--gesture-classifier", required=False)
    p.add_argument("--identity-classifier", required=False)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--no-deid-loss", action="store_true",
                   help="disable the identity term entirely (gate pinned to 0)")
    _add_model_flags(p, ablations=True)
    _add_train_flags(p)

    p = subs.add_parser("deidentify", help="run grids through a trained autoencoder",
                        epilog=EPILOG)
    _add_common(p)
    p.add_argument("--grids", required=False)
    p.add_argument("--autoencoder", required=False)

    p = subs.add_parser("evaluate", help="score a classifier on a grid file",
                        epilog=EPILOG)
    _add_common(p)
    p.add_argument("--grids", required=False)
    p.add_argument("--classifier", required=False)
    p.add_argument("--task", choices=[T.TASK_GESTURE, T.TASK_IDENTITY], default=None)

    p = subs.add_parser("baseline", help="apply a perturbation baseline", epilog=EPILOG)
    _add_common(p)
    p.add_argument("--grids", required=False)
    p.add_argument("--method", choices=B.METHODS, default=None)
    p.add_argument("--param", action="append", default=[],
                   help="method parameter as name=value (repeatable)")

    p = subs.add_parser("report", help="privacy-utility scorecard", epilog=EPILOG)
    _add_common(p)
    p.add_argument("--grids", required=False, help="test grid file")
    p.add_argument("--gesture-classifier", required=False)
    p.add_argument("--identity-classifier", required=False)
    p.add_argument("--autoencoder", required=False)
    p.add_argument("--curves", action="store_true", help="dump per-class ROC points")

    p = subs.add_parser("sweep", help="repeat autoencoder training over a parameter",
                        epilog=EPILOG)
    _add_common(p)
    p.add_argument("--param", choices=["beta", "k"], default=None)
    p.add_argument("--values", default=None, help="comma-separated values")
    p.add_argument("--grids", required=False)
    p.add_argument("--test-grids", required=False)
    p.add_argument("--gesture-classifier", required=False)
    p.add_argument("--identity-classifier", required=False)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    _add_model_flags(p)
    _add_train_flags(p)

    p = subs.add_parser("gradcheck", help="finite-difference gradient verification",
                        epilog=EPILOG)
    _add_common(p)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)

    return parser


def _add_model_flags(p: argparse.ArgumentParser, ablations: bool = False) -> None:
    p.add_argument("--d-h", dest="d_h", type=int, default=None)
    p.add_argument("--d-m", dest="d_m", type=int, default=None)
    p.add_argument("--d-k", dest="d_k", type=int, default=None)
    p.add_argument("--d-v", dest="d_v", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--d-z", dest="d_z", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    if ablations:
        p.add_argument("--no-temporal-edges", action="store_true", default=None)
        p.add_argument("--no-temporal-knn", action="store_true", default=None)
        p.add_argument("--no-max-pool", action="store_true", default=None)
        p.add_argument("--decoder-node-feats", action="store_true", default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eta0", type=float, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--decay-period", dest="decay_period", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)


class Run:
    """A run directory plus its logger and resolved configuration."""

    def __init__(self, args, extra_keys: list[str]):
        file_values = C.parse_config_file(args.config) if args.config else {}
        self.file_extra = file_values.pop("extra", {}) if file_values else {}
        cli_values = {k: v for k, v in vars(args).items() if k in C._FIELDS}
        self.cfg = C.build_run_config(file_values, cli_values)
        self.args = args
        self.extra = {}
        for key in extra_keys:
            cli = getattr(args, key, None)
            value = cli if cli not in (None, [], False) else self.file_extra.get(key)
            if isinstance(value, str) and key.endswith(("grids", "input", "classifier",
                                                        "autoencoder")):
                value = os.path.abspath(value)
            self.extra[key] = value
        self.dir = self._make_dir(args)
        self.log_path = os.path.join(self.dir, "run.log")
        self._quiet = args.quiet
        resolved_extra = {"command": args.command}
        resolved_extra.update({k: v for k, v in self.extra.items() if v is not None})
        C.write_resolved(os.path.join(self.dir, "config.resolved"), self.cfg,
                         resolved_extra)

    def _make_dir(self, args) -> str:
        os.makedirs(args.out, exist_ok=True)
        if args.run_name:
            path = os.path.join(args.out, args.run_name)
            if os.path.exists(path):
                raise CliError(f"run directory already exists: {path}")
            os.makedirs(path)
            return path
        while True:
            stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
            path = os.path.join(args.out, f"{args.command}-{stamp}")
            try:
                os.makedirs(path)
                return path
            except FileExistsError:
                time.sleep(0.001)

    def need(self, key: str) -> str:
        value = self.extra.get(key)
        if value is None:
            raise CliError(f"missing required option --{key.replace('_', '-')}"
                           f" (or config key {key})")
        return value

    def log(self, msg: str) -> None:
        line = f"{_dt.datetime.now().isoformat(timespec='seconds')} {msg}"
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        if not self._quiet:
            print(line)

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)


def _save_params_with_meta(path: str, params: M.ModelParams, cfg: M.ModelConfig,
                           meta: dict) -> None:
    params.save(path)
    payload = {"model": {
        "d_h": cfg.d_h, "d_m": cfg.d_m, "d_k": cfg.d_k, "d_v": cfg.d_v,
        "heads": cfg.heads, "d_z": cfg.d_z, "k": cfg.k, "seed": cfg.seed,
        "no_temporal_edges": cfg.no_temporal_edges,
        "no_temporal_knn": cfg.no_temporal_knn,
        "no_max_pool": cfg.no_max_pool,
        "decoder_node_feats": cfg.decoder_node_feats,
    }}
    payload.update(meta)
    with open(path + ".meta.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_params_with_meta(path: str) -> tuple[M.ModelParams, M.ModelConfig, dict]:
    if not os.path.exists(path):
        raise CliError(f"parameter file not found: {path}")
    meta_path = path + ".meta.json"
    if not os.path.exists(meta_path):
        raise CliError(f"missing sidecar metadata: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = M.ModelConfig(**meta["model"])
    return M.ModelParams.load(path), cfg, meta


def _load_grids(path: str | None) -> list[D.FrameGrid]:
    if path is None or not os.path.exists(path or ""):
        raise CliError(f"grid file not found: {path}")
    return D.load_grids(path)


# ---------------------------------------------------------------------------
# Subcommand implementations


def cmd_synth(run: Run) -> None:
    spec = run.cfg.synth_spec()
    seqs = generate_dataset(spec)
    out = run.path("dataset.jsonl")
    D.save_sequences(out, seqs, spec.subjects, spec.gestures)
    run.log(f"wrote {len(seqs)} sequences to {out}")


def cmd_preprocess(run: Run) -> None:
    src = run.need("input")
    if not os.path.exists(src):
        raise CliError(f"sequence file not found: {src}")
    seqs = D.load_sequences(src)
    grids = D.grids_from_sequences(seqs, run.cfg.frames, run.cfg.points, run.cfg.seed)
    out = run.path("grids.bin")
    D.save_grids(out, grids)
    run.log(f"wrote {len(grids)} grids ({run.cfg.frames}x{run.cfg.points}) to {out}")


def cmd_split(run: Run) -> None:
    src = run.need("input")
    if not os.path.exists(src):
        raise CliError(f"sequence file not found: {src}")
    header = D.read_sequence_header(src)
    seqs = D.load_sequences(src)
    train, test = D.split_dataset(seqs, run.cfg.train_fraction, run.cfg.seed)
    for name, part in (("train.jsonl", train), ("test.jsonl", test)):
        D.save_sequences(run.path(name), part, header["subjects"], header["gestures"])
    run.log(f"split {len(seqs)} sequences into {len(train)} train / {len(test)} test")


def cmd_train_classifier(run: Run) -> None:
    grids = _load_grids(run.need("grids"))
    task = run.need("task")
    train_grids, val_grids = D.split_grids(grids, 1.0 - run.cfg.val_fraction,
                                           run.cfg.seed)
    cfg = run.cfg.model_config(ablations=False)
    num_classes = run.extra.get("num_classes")
    params, history = T.train_classifier(
        train_grids, val_grids, task, cfg, run.cfg.train_config(),
        num_classes=int(num_classes) if num_classes else None,
        history_path=run.path("history.csv"),
        checkpoint_path=run.path("checkpoint.bin"), log=run.log)
    _save_params_with_meta(run.path("classifier.params"), params, cfg,
                           {"kind": "classifier", "task": task,
                            "num_classes": params.num_classes})
    run.log(f"saved best classifier to {run.path('classifier.params')}")


def cmd_train_autoencoder(run: Run) -> None:
    grids = _load_grids(run.need("grids"))
    g_params, g_cfg, _ = _load_params_with_meta(run.need("gesture_classifier"))
    u_params, u_cfg, _ = _load_params_with_meta(run.need("identity_classifier"))
    train_grids, val_grids = D.split_grids(grids, 1.0 - run.cfg.val_fraction,
                                           run.cfg.seed)
    cfg = run.cfg.model_config()
    weights = run.cfg.loss_weights()
    deid_enabled = not bool(run.args.no_deid_loss or
                            run.file_extra.get("no_deid_loss") == "True")
    params, history = T.train_autoencoder(
        train_grids, val_grids, g_params, u_params, weights, cfg,
        run.cfg.train_config(), g_cfg=g_cfg, u_cfg=u_cfg,
        deid_enabled=deid_enabled, history_path=run.path("history.csv"),
        checkpoint_path=run.path("checkpoint.bin"), log=run.log)
    _save_params_with_meta(run.path("autoencoder.params"), params, cfg,
                           {"kind": "autoencoder"})
    run.log(f"saved best autoencoder to {run.path('autoencoder.params')}")


def cmd_deidentify(run: Run) -> None:
    grids = _load_grids(run.need("grids"))
    params, cfg, meta = _load_params_with_meta(run.need("autoencoder"))
    if meta.get("kind") != "autoencoder":
        raise CliError("--autoencoder must point at autoencoder parameters")
    out_grids = T.autoencode_dataset(grids, params, cfg)
    out = run.path("deidentified.bin")
    D.save_grids(out, out_grids)
    run.log(f"wrote {len(out_grids)} de-identified grids to {out}")


def cmd_evaluate(run: Run) -> None:
    grids = _load_grids(run.need("grids"))
    params, cfg, meta = _load_params_with_meta(run.need("classifier"))
    task = run.extra.get("task") or meta.get("task")
    if task not in (T.TASK_GESTURE, T.TASK_IDENTITY):
        raise CliError("--task is required when metadata lacks one")
    labels = T.labels_for(grids, task)
    probs = T.predict_probs(grids, params, cfg)
    metrics = MX.compute_metrics(probs, labels)
    out = run.path("metrics.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"task": task, **metrics.as_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    run.log(f"accuracy {metrics.accuracy:.4f} f1 {metrics.f1_macro:.4f} "
            f"auc {metrics.auc_macro:.4f} -> {out}")


def cmd_baseline(run: Run) -> None:
    grids = _load_grids(run.need("grids"))
    method = run.need("method")
    raw_params = run.extra.get("param") or []
    if isinstance(raw_params, str):
        raw_params = [p for p in raw_params.split(";") if p]
    parameters = {}
    for item in raw_params:
        if "=" not in item:
            raise CliError(f"--param expects name=value, got {item!r}")
        key, value = item.split("=", 1)
        parameters[key.strip()] = float(value)
    spec = B.BaselineSpec(method=method, parameters=parameters, seed=run.cfg.seed)
    out_grids = B.perturb_dataset(grids, spec)
    out = run.path("perturbed.bin")
    D.save_grids(out, out_grids)
    run.log(f"applied {method} {spec.parameters} -> {out}")


def cmd_report(run: Run) -> None:
    grids = _load_grids(run.need("grids"))
    g_params, g_cfg, _ = _load_params_with_meta(run.need("gesture_classifier"))
    u_params, u_cfg, _ = _load_params_with_meta(run.need("identity_classifier"))
    ae_params, ae_cfg, _ = _load_params_with_meta(run.need("autoencoder"))
    scorecard = MX.privacy_utility_report(
        g_params, u_params, ae_params, grids, run.path("scorecard.json"),
        g_cfg=g_cfg, u_cfg=u_cfg, ae_cfg=ae_cfg,
        csv_path=run.path("scorecard.csv"),
        curves_dir=run.path("curves") if run.args.curves else None)
    for row in scorecard["rows"]:
        run.log(f"{row['task']:8s} {row['variant']:13s} acc {row['accuracy']:.4f} "
                f"f1 {row['f1_macro']:.4f} auc {row['auc_macro']:.4f}")
    run.log(f"mean chamfer original vs de-identified: {scorecard['mean_chamfer']:.6f}")


def cmd_sweep(run: Run) -> None:
    param = run.need("param")
    values_raw = run.need("values")
    values = [v.strip() for v in str(values_raw).split(",") if v.strip()]
    grids = _load_grids(run.need("grids"))
    test_grids = _load_grids(run.need("test_grids"))
    g_params, g_cfg, _ = _load_params_with_meta(run.need("gesture_classifier"))
    u_params, u_cfg, _ = _load_params_with_meta(run.need("identity_classifier"))
    train_grids, val_grids = D.split_grids(grids, 1.0 - run.cfg.val_fraction,
                                           run.cfg.seed)
    summary_rows = []
    for value in values:
        sub = os.path.join(run.dir, f"{param}-{value}")
        os.makedirs(sub)
        if param == "beta":
            weights = replace(run.cfg.loss_weights(), beta=float(value))
            cfg = run.cfg.model_config()
        else:
            weights = run.cfg.loss_weights()
            cfg = replace(run.cfg.model_config(), k=int(value))
        run.log(f"sweep {param}={value} starting")
        params, _ = T.train_autoencoder(
            train_grids, val_grids, g_params, u_params, weights, cfg,
            run.cfg.train_config(), g_cfg=g_cfg, u_cfg=u_cfg,
            history_path=os.path.join(sub, "history.csv"), log=run.log)
        scorecard = MX.privacy_utility_report(
            g_params, u_params, params, test_grids,
            os.path.join(sub, "scorecard.json"),
            g_cfg=g_cfg, u_cfg=u_cfg, ae_cfg=cfg,
            csv_path=os.path.join(sub, "scorecard.csv"))
        by_key = {(r["task"], r["variant"]): r for r in scorecard["rows"]}
        summary_rows.append({
            "value": value,
            "gesture_acc_deid": by_key[("gesture", "deidentified")]["accuracy"],
            "identity_acc_deid": by_key[("identity", "deidentified")]["accuracy"],
            "mean_chamfer": scorecard["mean_chamfer"],
        })
    import csv as _csv
    with open(run.path("summary.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow([param, "gesture_acc_deid", "identity_acc_deid", "mean_chamfer"])
        for row in summary_rows:
            writer.writerow([row["value"], repr(row["gesture_acc_deid"]),
                             repr(row["identity_acc_deid"]), repr(row["mean_chamfer"])])
    run.log(f"sweep complete -> {run.path('summary.csv')}")


def cmd_gradcheck(run: Run) -> None:
    report = T.gradient_check(seed=run.cfg.seed or 7, step=run.args.step,
                              tol=run.args.tolerance, log=run.log)
    out = run.path("gradcheck.json")
    with open(out, "w", encoding="utf-8") as fh:
        json.dump({"ok": report["ok"], "tol": report["tol"],
                   "delta_gradient_free": report["delta_gradient_free"],
                   "rows": [{k: (float(v) if isinstance(v, (int, float, np.floating))
                                 else bool(v) if isinstance(v, (bool, np.bool_)) else v)
                             for k, v in r.items()} for r in report["rows"]]},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not report["ok"]:
        raise CliError("gradient check failed; see gradcheck.json")
    run.log(f"gradient check passed (tolerance {report['tol']:g})")


_EXTRA_KEYS = {
    "synth": [],
    "preprocess": ["input"],
    "split": ["input"],
    "train-classifier": ["grids", "task", "num_classes"],
    "train-autoencoder": ["grids", "gesture_classifier", "identity_classifier",
                          "no_deid_loss"],
    "deidentify": ["grids", "autoencoder"],
    "evaluate": ["grids", "classifier", "task"],
    "baseline": ["grids", "method", "param"],
    "report": ["grids", "gesture_classifier", "identity_classifier", "autoencoder"],
    "sweep": ["param", "values", "grids", "test_grids", "gesture_classifier",
              "identity_classifier"],
    "gradcheck": [],
}

_HANDLERS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train-classifier": cmd_train_classifier,
    "train-autoencoder": cmd_train_autoencoder,
    "deidentify": cmd_deidentify,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "report": cmd_report,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = Run(args, _EXTRA_KEYS[args.command])
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        run.log(f"pointveil {args.command} starting in {run.dir}")
        _HANDLERS[args.command](run)
        run.log("done")
        return 0
    except (CliError, M.ConfigurationError, D.SequenceFormatError, ValueError,
            FileNotFoundError) as e:
        run.log(f"error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
