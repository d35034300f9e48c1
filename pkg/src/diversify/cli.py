"""``dvfy`` command line front end.

    dvfy <synth|train|eval|characterize|divergence|bench>
         [--config PATH] [--seed N] [--out PATH] [--force] [section.key=value ...]

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Errors print one line on stderr:
``dvfy: error=<code> exit=<n> <message>``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import accuracy, adjusted_rand_index, pairwise_divergence_matrix, random_groups
from .bench import FIELDS, records_to_csv, run_bench, summary_line
from .config import ExperimentConfig, apply_overrides, describe_defaults, load
from .dataio import SegmentDataset, generate_synthetic, load_dataset, save_dataset, split_train_val
from .errors import ConfigError, DataError, DiversifyError
from .model import ModelBundle, batched_forward, load_checkpoint, save_checkpoint
from .pseudolabel import nearest_centroid_assign
from .training import METHODS, Trainer, history_to_csv, predict

log = logging.getLogger("diversify")

_OVERRIDE = re.compile(r"^[a-z]+\.[A-Za-z0-9_]+=")


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _emit(text: str, out) -> None:
    if out:
        _write_text(out, text)
    else:
        sys.stdout.write(text)


def _split_args(items: list[str]) -> tuple[list[str], dict[str, str]]:
    pos, over = [], {}
    for it in items:
        if _OVERRIDE.match(it):
            key, val = it.split("=", 1)
            over[key] = val
        else:
            pos.append(it)
    return pos, over


def _positional(pos: list[str], names: list[str], cmd: str) -> list[str]:
    if len(pos) != len(names):
        raise ConfigError(f"{cmd} expects {' '.join(n.upper() for n in names)}, got {len(pos)} argument(s)",
                          "args")
    return pos


def _config(args, overrides: dict[str, str], seed_key: str | None) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None and seed_key:
        overrides = {seed_key: str(args.seed), **overrides}
    return apply_overrides(cfg, overrides)


def _load_data(path) -> SegmentDataset:
    try:
        return load_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from exc


def _load_model(path) -> ModelBundle:
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from exc


def _best(bundle: ModelBundle) -> ModelBundle:
    if bundle.state.best_params is not None:
        bundle.load_snapshot(bundle.state.best_params)
    return bundle


def _nonempty(ds: SegmentDataset, what: str) -> None:
    if len(ds) == 0:
        raise DataError(f"{what} has no segments")


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_synth(args, rest) -> int:
    pos, over = _split_args(rest)
    _positional(pos, [], "synth")
    cfg = _config(args, over, "data.seed")
    cfg.data.validate()
    out = Path(args.out or "synth.dvts")
    if out.exists() and not args.force:
        raise ConfigError(f"{out} exists; pass --force to overwrite", "--out")
    ds = generate_synthetic(cfg.data)
    save_dataset(ds, out, binary=args.binary)
    print(f"wrote {len(ds)} segments to {out}")
    return 0


def _domain_labels(spec: str | None, train: SegmentDataset) -> np.ndarray | None:
    if spec is None:
        return None
    if spec == "true":
        if not train.has_true_domain:
            raise DataError("dataset has no true domains for --domain-labels true")
        return np.unique(train.true_domain, return_inverse=True)[1]
    table = _read_groups(spec)
    try:
        raw = np.array([table[i] for i in train.ids])
    except KeyError as exc:
        raise DataError(f"{spec}: no domain label for segment {exc.args[0]!r}") from None
    return np.unique(raw, return_inverse=True)[1]


def _read_groups(path) -> dict[str, int]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    out = {}
    for n, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or (n == 1 and row[0] == "id"):
            continue
        if len(row) < 2:
            raise DataError(f"{path} line {n}: expected id,group")
        try:
            out[row[0]] = int(row[1])
        except ValueError:
            raise DataError(f"{path} line {n}: group {row[1]!r} is not an integer") from None
    return out


def cmd_train(args, rest) -> int:
    pos, over = _split_args(rest)
    (data_path,) = _positional(pos, ["dataset"], "train")
    cfg = _config(args, over, "train.seed")
    cfg.train.validate()
    if args.method not in METHODS:
        raise ConfigError(f"choose from {METHODS}", "--method")
    ds = _load_data(data_path)
    _nonempty(ds, "dataset")
    if cfg.split.holdout >= 0:
        if not ds.has_true_domain:
            raise DataError("data.holdout needs true domains in the dataset")
        ds = ds.subset(np.flatnonzero(ds.true_domain != cfg.split.holdout))
    if not 0 < cfg.split.val_ratio < 1:
        raise ConfigError("must be in (0, 1)", "data.val_ratio")
    tr, va = split_train_val(ds, cfg.split.val_ratio, cfg.train.seed)
    arch = dataclasses.replace(cfg.model, channels=ds.channels, window=ds.window)
    if args.method == "dann" and args.domain_labels is None:
        raise ConfigError("dann needs a domain labelling: --domain-labels true or a CSV of id,group",
                          "--domain-labels")
    domains = _domain_labels(args.domain_labels, tr) if args.method == "dann" else None
    bundle = _load_model(args.resume) if args.resume else None
    t = Trainer(tr, va, cfg.train, arch, args.method, domains, bundle)
    t.run()
    out = Path(args.out or "model.dvfy")
    save_checkpoint(t.bundle, out)
    hist = Path(args.history) if args.history else out.with_name(out.name + ".history.csv")
    _write_text(hist, history_to_csv(t.history))
    st = t.bundle.state
    print(f"best_round={st.best_round} best_val_acc={st.best_val_acc!r} checkpoint={out} history={hist}")
    return 0


def cmd_eval(args, rest) -> int:
    pos, over = _split_args(rest)
    ckpt, data_path = _positional(pos, ["checkpoint", "dataset"], "eval")
    if over:
        raise ConfigError("eval takes no overrides", next(iter(over)))
    bundle = _best(_load_model(ckpt))
    ds = _load_data(data_path)
    _nonempty(ds, "evaluation dataset")
    pred, _ = predict(bundle, ds.X)
    per_class = []
    for c in range(bundle.n_classes):
        m = ds.y == c
        n = int(m.sum())
        per_class.append({"class": c, "n": n, "correct": int((pred[m] == c).sum()),
                          "accuracy": accuracy(pred[m], ds.y[m]) if n else None})
    report = {"accuracy": accuracy(pred, ds.y), "n": len(ds), "per_class": per_class,
              "method": bundle.method}
    _emit(json.dumps(report, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def assign_latent_domains(bundle: ModelBundle, X: np.ndarray) -> np.ndarray:
    """Nearest stored step-3 centroid for each segment."""
    if bundle.method != "diversify":
        raise ConfigError(f"a {bundle.method} checkpoint has no latent-domain heads", "checkpoint")
    if not np.any(bundle.centroids):
        raise DataError("checkpoint has no centroids; train at least one round with step 3")
    feats, _ = batched_forward(bundle, X, 3)
    metric = bundle.hparams.get("metric", "cosine")
    return nearest_centroid_assign(feats, bundle.centroids, metric)


def cmd_characterize(args, rest) -> int:
    pos, over = _split_args(rest)
    ckpt, data_path = _positional(pos, ["checkpoint", "dataset"], "characterize")
    if over:
        raise ConfigError("characterize takes no overrides", next(iter(over)))
    bundle = _load_model(ckpt)
    ds = _load_data(data_path)
    _nonempty(ds, "dataset")
    d = assign_latent_domains(bundle, ds.X)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "d_prime"] + (["true_domain"] if ds.has_true_domain else []))
    for i, sid in enumerate(ds.ids):
        w.writerow([sid, int(d[i])] + ([int(ds.true_domain[i])] if ds.has_true_domain else []))
    out = Path(args.out or "latent_domains.csv")
    _write_text(out, buf.getvalue())
    summary = {"n": len(ds), "K": bundle.n_domains,
               "cluster_sizes": np.bincount(d, minlength=bundle.n_domains).tolist(),
               "assignments": str(out)}
    if ds.has_true_domain:
        summary["ari"] = adjusted_rand_index(ds.true_domain, d)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_divergence(args, rest) -> int:
    pos, over = _split_args(rest)
    (data_path,) = _positional(pos, ["dataset"], "divergence")
    cfg = _config(args, over, None)
    cfg.analysis.validate()
    seed = 0 if args.seed is None else args.seed
    ds = _load_data(data_path)
    _nonempty(ds, "dataset")
    bundle = _load_model(args.checkpoint) if args.checkpoint else None
    split = args.split
    if split == "true":
        if not ds.has_true_domain:
            raise DataError("dataset has no true domains for --split true")
        groups = ds.true_domain
    elif split == "random":
        groups = random_groups(len(ds), args.groups, seed)
    elif split == "pseudo":
        if bundle is None:
            raise ConfigError("--split pseudo needs --checkpoint", "--checkpoint")
        groups = assign_latent_domains(bundle, ds.X)
    else:
        table = _read_groups(split)
        try:
            groups = np.array([table[i] for i in ds.ids])
        except KeyError as exc:
            raise DataError(f"{split}: no group for segment {exc.args[0]!r}") from None
    if cfg.analysis.feature_space != "raw" and bundle is None:
        raise ConfigError("needs --checkpoint", "analysis.feature_space")
    feat_bundle = _best(bundle) if bundle is not None else None
    rep = pairwise_divergence_matrix(ds, groups, feat_bundle, cfg.analysis.feature_space,
                                     cfg.analysis.probe_config(), seed)
    out = Path(args.out or "divergence.json")
    _write_text(out, rep.to_json() + "\n")
    _write_text(out.with_suffix(".csv"), rep.matrix_csv())
    print(f"mean_off_diagonal={rep.mean_off_diagonal!r} max_off_diagonal={rep.max_off_diagonal!r} "
          f"report={out} matrix={out.with_suffix('.csv')}")
    return 0


def _k_grid(text: str | None):
    if text is None:
        return None
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if not m or int(m[1]) < 2 or int(m[2]) < int(m[1]):
        raise ConfigError("expected lo..hi with 2 <= lo <= hi", "--k-grid")
    return int(m[1]), int(m[2])


def cmd_bench(args, rest) -> int:
    pos, over = _split_args(rest)
    _positional(pos, [], "bench")
    cfg = _config(args, over, None)
    cfg.validate()
    base = 1 if args.seed is None else args.seed
    seeds = tuple(range(base, base + args.seeds))
    methods = tuple(args.methods.split(",")) if args.methods else METHODS
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}", "--methods")
    out = Path(args.out or "bench_results.csv")
    new = not out.exists() or out.stat().st_size == 0
    if not new:
        head = out.read_text(encoding="utf-8").splitlines()[0]
        if head != ",".join(FIELDS):
            raise DataError(f"{out} is not a results file (header {head!r})")

    def progress(rec):
        with open(out, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(records_to_csv([rec], header=progress.first))
        progress.first = False
        log.info("%s seed=%d holdout=%d test_acc=%.4f", rec.method, rec.seed, rec.holdout, rec.test_acc)

    progress.first = new
    records = run_bench(cfg, seeds, methods, k_grid=_k_grid(args.k_grid), progress=progress)
    print(summary_line(records))
    return 0


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "characterize": cmd_characterize, "divergence": cmd_divergence, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dvfy", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Latent-domain characterization and domain-invariant training for time series.",
        epilog="configuration keys and defaults (override with section.key=value):\n\n"
               + describe_defaults(),
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", metavar="PATH", help="section.key = value file")
        sp.add_argument("--seed", type=int, help="master seed for this command")
        sp.add_argument("--out", metavar="PATH", help="main output file")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output")
        sp.add_argument("args", nargs="*", metavar="ARG", help="positional inputs and section.key=value overrides")
        return sp

    sp = add("synth", "generate the synthetic benchmark dataset (DVTS1)")
    sp.add_argument("--binary", action="store_true", help="write the DVTS1B float32 variant")
    sp = add("train", "train a model: train DATASET")
    sp.add_argument("--method", default="diversify", help="diversify, erm or dann")
    sp.add_argument("--domain-labels", metavar="SOURCE", help="for dann: 'true' or a CSV of id,group")
    sp.add_argument("--history", metavar="PATH", help="history CSV (default: <out>.history.csv)")
    sp.add_argument("--resume", metavar="CHECKPOINT", help="continue training from a checkpoint")
    add("eval", "accuracy and per-class breakdown: eval CHECKPOINT DATASET")
    add("characterize", "latent-domain assignments: characterize CHECKPOINT DATASET")
    sp = add("divergence", "pairwise proxy divergence between groups: divergence DATASET")
    sp.add_argument("--split", default="true", help="true, random, pseudo or a CSV of id,group")
    sp.add_argument("--groups", type=int, default=3, help="group count for --split random")
    sp.add_argument("--checkpoint", metavar="PATH", help="model for pseudo splits or bottleneck features")
    sp = add("bench", "leave-one-domain-out benchmark on synthetic data")
    sp.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed (default 1)")
    sp.add_argument("--methods", help="comma-separated subset of diversify,erm,dann")
    sp.add_argument("--k-grid", metavar="LO..HI", help="pick K per run by validation accuracy")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    # overrides may follow options, so collect them from the leftovers
    args, extra = parser.parse_known_args(argv)
    bad = [x for x in extra if x.startswith("-") and not _OVERRIDE.match(x)]
    if bad:
        parser.error(f"unrecognized arguments: {' '.join(bad)}")
    args.args = list(args.args) + extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, args.args)
    except DiversifyError as exc:
        msg = " ".join(str(exc).split())
        print(f"dvfy: error={exc.code} exit={exc.exit_code} {msg}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
