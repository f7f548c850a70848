"""Command-line orchestration of the full encoding workflow.

Subcommands: synth, fit, predict, eval, report. Configuration is a flat
UTF-8 ``key = value`` file with dotted section prefixes; command-line
flags override file values. Exit codes: 0 success, 2 config error,
3 data error, 4 numerical failure.

File naming conventions inside data directories:
  features:    <source>.<modality>.nmef
  BOLD:        <subject>.<source>.nmeb
  predictions: pred.<model_tag>.<subject>.<source>.nmeb
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys

import numpy as np

from . import attention as attn
from . import linear as lin
from .evaluation import aggregate, export_report, score_parcels
from .io import (
    DataError,
    DatasetSplit,
    FormatError,
    BoldSeries,
    atomic_write_bytes,
    read_bold_file,
    read_feature_file,
    read_split,
    write_bold_file,
    write_feature_file,
    write_split,
)
from .lagged import LagConfig
from .linear import SingularFitError
from .attention import TrainingDivergedError
from .synth import SynthSpec, generate, write_kernel_file


class ConfigError(ValueError):
    pass


CONFIG_KEYS = {
    "manifest": "path to the dataset split manifest (role<TAB>source_id lines)",
    "features_dir": "directory of NMEF files named <source>.<modality>.nmef",
    "bold_dir": "directory of NMEB files named <subject>.<source>.nmeb",
    "subject": "subject id whose BOLD corpus is fitted/evaluated",
    "model": "encoder family for fit: linear | attention",
    "out_dir": "output directory (--out overrides)",
    "seed": "integer seed (--seed overrides)",
    "jobs": "worker hint for per-source stages (--jobs overrides)",
    "lag.n_lags": "lag-window length, strictly past samples (default 10)",
    "lag.include_lag0": "also include the current sample (default false)",
    "lag.modalities": "comma-separated modality order (default visual,audio)",
    "pca.k_visual": "retained visual principal components",
    "pca.k_audio": "retained audio principal components",
    "linear.ridge_lambda": "ridge penalty; 0 is the plain least-squares fit",
    "attention.n_heads": "attention heads per modality block (default 4)",
    "attention.d_model": "model width per modality block (default 128)",
    "attention.gate_bottleneck_ratio": "gate bottleneck fraction (default 0.25)",
    "attention.head_hidden_1": "first head hidden width (default 1024)",
    "attention.head_hidden_2": "second head hidden width (default 512)",
    "attention.dropout_rate": "dropout after head ReLUs (default 0.3)",
    "attention.vectorize": "block vectorization: flatten | mean",
    "attention.learning_rate": "Adam learning rate (default 1e-4)",
    "attention.batch_size": "minibatch size (default 64)",
    "attention.max_epochs": "epoch cap (default 100)",
    "attention.patience": "early-stopping patience in epochs (default 5)",
    "attention.val_fraction": "trailing fraction held out for validation",
    "synth.t_samples": "samples per synthetic source (default 1000)",
    "synth.d_visual": "synthetic visual feature dim (default 8)",
    "synth.d_audio": "synthetic audio feature dim (default 6)",
    "synth.n_parcels": "synthetic parcel count (default 12)",
    "synth.n_lags": "true lag order of the generator (default 10)",
    "synth.snr": "signal-to-noise variance ratio (default 1.0)",
    "synth.ar_coeff": "AR(1) feature coefficient (default 0, i.i.d.)",
    "synth.sources": "role counts, e.g. train:2,val:1,test_id:1,test_ood:1",
    "eval.concat": "concatenate sources before scoring (default false)",
}

_EPILOG = "config keys:\n" + "\n".join(
    f"  {k:34s} {v}" for k, v in CONFIG_KEYS.items())


def parse_config(path) -> dict:
    cfg = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = stripped.partition("=")
            key = key.strip()
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            cfg[key] = value.strip()
    return cfg


def _get(cfg, key, default=None, required=False):
    if key in cfg:
        return cfg[key]
    if required and default is None:
        raise ConfigError(f"missing required config key {key!r}")
    return default


def _get_int(cfg, key, default=None, required=False):
    raw = _get(cfg, key, None if required else str(default), required)
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} must be an integer, got {raw!r}")


def _get_float(cfg, key, default):
    raw = _get(cfg, key, str(default))
    try:
        return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} must be a number, got {raw!r}")


def _get_bool(cfg, key, default):
    raw = _get(cfg, key, "true" if default else "false").lower()
    if raw not in ("true", "false"):
        raise ConfigError(f"config key {key!r} must be true/false, got {raw!r}")
    return raw == "true"


@contextlib.contextmanager
def _output_lock(out_dir):
    """Single CLI instance per output directory, via an O_EXCL lock file."""
    os.makedirs(out_dir, exist_ok=True)
    lock = os.path.join(out_dir, ".nmenc.lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory is locked by another run ({lock}); "
            "remove the lock file if that run has died")
    try:
        os.close(fd)
        yield
    finally:
        os.unlink(lock)


def _lag_config(cfg) -> LagConfig:
    modalities = tuple(
        m.strip() for m in
        _get(cfg, "lag.modalities", "visual,audio").split(","))
    return LagConfig(
        n_lags=_get_int(cfg, "lag.n_lags", 10),
        modality_order=modalities,
        include_lag0=_get_bool(cfg, "lag.include_lag0", False),
    )


def _load_features(features_dir, source, modalities):
    out = {}
    for modality in modalities:
        path = os.path.join(features_dir, f"{source}.{modality}.nmef")
        if not os.path.exists(path):
            raise DataError(f"missing feature file {path}")
        series = read_feature_file(path)
        if series.source_id != source or series.modality != modality:
            raise DataError(f"{path}: header disagrees with its file name")
        out[modality] = series
    return out


def _load_bold(bold_dir, subject, source):
    path = os.path.join(bold_dir, f"{subject}.{source}.nmeb")
    if not os.path.exists(path):
        raise DataError(f"missing BOLD file {path}")
    return read_bold_file(path)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args, cfg):
    out_dir = args.out or _get(cfg, "out_dir", required=True)
    seed = args.seed if args.seed is not None else _get_int(cfg, "seed", 0)
    t_samples = _get_int(cfg, "synth.t_samples", 1000)
    d_visual = _get_int(cfg, "synth.d_visual", 8)
    d_audio = _get_int(cfg, "synth.d_audio", 6)
    n_parcels = _get_int(cfg, "synth.n_parcels", 12)
    n_lags = _get_int(cfg, "synth.n_lags", 10)
    snr = _get_float(cfg, "synth.snr", 1.0)
    ar_coeff = _get_float(cfg, "synth.ar_coeff", 0.0)
    sources_spec = _get(cfg, "synth.sources", "train:2,val:1,test_id:1,test_ood:1")

    role_counts = {}
    for part in sources_spec.split(","):
        role, _, count = part.strip().partition(":")
        if role not in ("train", "val", "test_id", "test_ood"):
            raise ConfigError(f"unknown role {role!r} in synth.sources")
        try:
            role_counts[role] = int(count)
        except ValueError:
            raise ConfigError(f"bad count in synth.sources part {part!r}")
    if role_counts.get("train", 0) < 1:
        raise ConfigError("synth.sources must include at least one train source")

    with _output_lock(out_dir):
        feat_dir = os.path.join(out_dir, "features")
        bold_dir = os.path.join(out_dir, "bold")
        os.makedirs(feat_dir, exist_ok=True)
        os.makedirs(bold_dir, exist_ok=True)

        root_rng = np.random.default_rng(seed)
        kernel = root_rng.standard_normal(
            (n_parcels, n_lags * (d_visual + d_audio)))
        subject = "sub-01"
        roles = {}
        n_sources = sum(role_counts.values())
        source_seeds = root_rng.integers(0, 2**63 - 1, size=n_sources)
        i = 0
        for role in ("train", "val", "test_id", "test_ood"):
            roles[role] = []
            for j in range(role_counts.get(role, 0)):
                sid = f"{role}-{j:02d}"
                spec = SynthSpec(
                    t_samples=t_samples, d_visual=d_visual, d_audio=d_audio,
                    n_parcels=n_parcels, n_lags_true=n_lags, snr=snr,
                    seed=int(source_seeds[i]), ar_coeff=ar_coeff,
                    kernel=kernel, source_id=sid, subject_id=subject)
                feats, bold, _ = generate(spec)
                for modality, series in feats.items():
                    write_feature_file(
                        series, os.path.join(feat_dir, f"{sid}.{modality}.nmef"))
                write_bold_file(
                    bold, os.path.join(bold_dir, f"{subject}.{sid}.nmeb"))
                roles[role].append(sid)
                i += 1
        split = DatasetSplit(**roles)
        write_split(split, os.path.join(out_dir, "manifest.tsv"))
        write_kernel_file(kernel, os.path.join(out_dir, "kernel.nmek"))
    print(f"wrote {n_sources} sources under {out_dir}")
    return 0


def _load_corpus(cfg, sources, lag_cfg):
    features_dir = _get(cfg, "features_dir", required=True)
    bold_dir = _get(cfg, "bold_dir", required=True)
    subject = _get(cfg, "subject", "sub-01")
    feats = {}
    bolds = {}
    for sid in sources:
        feats[sid] = _load_features(features_dir, sid, lag_cfg.modality_order)
        bolds[sid] = _load_bold(bold_dir, subject, sid)
    return feats, bolds


def cmd_fit(args, cfg):
    out_dir = args.out or _get(cfg, "out_dir", required=True)
    seed = args.seed if args.seed is not None else _get_int(cfg, "seed", 0)
    family = _get(cfg, "model", "linear")
    if family not in ("linear", "attention"):
        raise ConfigError(f"model must be linear or attention, got {family!r}")
    lag_cfg = _lag_config(cfg)
    manifest = _get(cfg, "manifest", required=True)
    split = read_split(manifest)
    if not split.train:
        raise DataError("manifest has no train sources")
    k_per_modality = {
        "visual": _get_int(cfg, "pca.k_visual", required=True),
        "audio": _get_int(cfg, "pca.k_audio", required=True),
    }
    feats, bolds = _load_corpus(cfg, split.train, lag_cfg)

    with _output_lock(out_dir):
        if family == "linear":
            ridge_lambda = _get_float(cfg, "linear.ridge_lambda", 0.0)
            model = lin.fit_linear_pipeline(
                feats, bolds, k_per_modality, lag_cfg, ridge_lambda)
            bundle = os.path.join(out_dir, "model.nmel")
            lin.save_linear_model(model, bundle)
            rows = sum(b.t_samples - lag_cfg.n_lags for b in bolds.values())
            atomic_write_bytes(
                os.path.join(out_dir, "fit_log.csv"),
                ("rows,in_dim,n_parcels,ridge_lambda\n"
                 f"{rows},{model.in_dim},{model.n_parcels},"
                 f"{model.ridge_lambda:.17g}\n").encode("utf-8"))
        else:
            n_parcels = next(iter(bolds.values())).n_parcels
            acfg = attn.AttentionConfig(
                n_lags=lag_cfg.n_lags,
                d_visual=k_per_modality["visual"],
                d_audio=k_per_modality["audio"],
                n_parcels=n_parcels,
                n_heads=_get_int(cfg, "attention.n_heads", 4),
                d_model=_get_int(cfg, "attention.d_model", 128),
                gate_bottleneck_ratio=_get_float(
                    cfg, "attention.gate_bottleneck_ratio", 0.25),
                head_hidden_dims=(
                    _get_int(cfg, "attention.head_hidden_1", 1024),
                    _get_int(cfg, "attention.head_hidden_2", 512)),
                dropout_rate=_get_float(cfg, "attention.dropout_rate", 0.3),
                vectorize=_get(cfg, "attention.vectorize", "flatten"),
                seed=seed,
                learning_rate=_get_float(cfg, "attention.learning_rate", 1e-4),
                batch_size=_get_int(cfg, "attention.batch_size", 64),
                max_epochs=_get_int(cfg, "attention.max_epochs", 100),
                patience=_get_int(cfg, "attention.patience", 5),
            )
            model, log = attn.fit_attention_pipeline(
                feats, bolds, k_per_modality, acfg, lag_cfg,
                val_fraction=_get_float(cfg, "attention.val_fraction", 0.2))
            attn.save_attention_model(model, os.path.join(out_dir, "model.nmea"))
            attn.write_training_log(log, os.path.join(out_dir, "training_log.csv"))
    print(f"fitted {family} model under {out_dir}")
    return 0


def _load_any_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"NMEL":
        return "linear", lin.load_linear_model(path)
    if magic == b"NMEA":
        return "attention", attn.load_attention_model(path)
    raise FormatError(f"{path}: not a model bundle (magic {magic!r})")


def cmd_predict(args, cfg):
    out_dir = args.out or _get(cfg, "out_dir", required=True)
    features_dir = _get(cfg, "features_dir", required=True)
    subject = _get(cfg, "subject", "sub-01")
    tag, model = _load_any_model(args.model)
    manifest = _get(cfg, "manifest", required=True)
    split = read_split(manifest)
    roles = [r.strip() for r in args.roles.split(",")]
    sources = []
    for role in roles:
        if role not in ("train", "val", "test_id", "test_ood"):
            raise ConfigError(f"unknown role {role!r}")
        sources.extend(getattr(split, role))
    if not sources:
        raise DataError(f"manifest has no sources for roles {roles}")

    with _output_lock(out_dir):
        for sid in sources:
            feats = _load_features(features_dir, sid,
                                   model.lag_config.modality_order)
            if tag == "linear":
                _, pred = lin.predict_from_features(model, feats)
            else:
                _, pred = attn.predict_from_features(model, feats)
            tr = next(iter(feats.values())).tr_seconds
            series = BoldSeries(tr_seconds=tr, values=pred,
                                source_id=sid, subject_id=subject)
            write_bold_file(series, os.path.join(
                out_dir, f"pred.{tag}.{subject}.{sid}.nmeb"))
    print(f"wrote predictions for {len(sources)} sources under {out_dir}")
    return 0


def cmd_eval(args, cfg):
    out_dir = args.out or _get(cfg, "out_dir", required=True)
    bold_dir = args.bold_dir or _get(cfg, "bold_dir", required=True)
    pred_dir = args.pred_dir
    concat = args.concat or _get_bool(cfg, "eval.concat", False)

    pairs = []
    for name in sorted(os.listdir(pred_dir)):
        if not (name.startswith("pred.") and name.endswith(".nmeb")):
            continue
        parts = name[:-len(".nmeb")].split(".")
        if len(parts) != 4:
            raise DataError(
                f"{name}: expected pred.<tag>.<subject>.<source>.nmeb")
        _, tag, subject, source = parts
        pred = read_bold_file(os.path.join(pred_dir, name))
        actual = _load_bold(bold_dir, subject, source)
        if pred.t_samples > actual.t_samples:
            raise DataError(f"{name}: more predictions than BOLD samples")
        # Predictions cover the last T_pred targets (lag burn-in dropped).
        target_rows = actual.values[actual.t_samples - pred.t_samples:]
        pairs.append((tag, subject, source, pred.values, target_rows))
    if not pairs:
        raise DataError(f"no prediction files found in {pred_dir}")

    entries = []
    if concat:
        groups = {}
        for tag, subject, source, pred, actual in pairs:
            groups.setdefault((tag, subject), []).append((source, pred, actual))
        for (tag, subject), items in sorted(groups.items()):
            items.sort()
            pred = np.vstack([p for _, p, _ in items])
            actual = np.vstack([a for _, _, a in items])
            entries.append(score_parcels(pred, actual, subject_id=subject,
                                         source_id="concat", model_tag=tag))
    else:
        for tag, subject, source, pred, actual in pairs:
            entries.append(score_parcels(pred, actual, subject_id=subject,
                                         source_id=source, model_tag=tag))

    with _output_lock(out_dir):
        report = aggregate(entries)
        export_report(report, out_dir)
    print(f"wrote evaluation report under {out_dir}")
    return 0


def _read_report_csv(path):
    entries, by_source, by_subject = [], {}, {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            subject, source = row["subject_id"], row["source_id"]
            tag = row["model_tag"]
            mean_rho = float(row["mean_rho"])
            if subject != "__ALL__" and source != "__ALL__":
                entries.append((subject, source, tag, mean_rho))
            elif subject == "__ALL__" and source != "__ALL__":
                by_source[(source, tag)] = mean_rho
            elif subject != "__ALL__" and source == "__ALL__":
                by_subject[(subject, tag)] = mean_rho
    return entries, by_source, by_subject


def cmd_report(args, cfg):
    from . import plots

    out_dir = args.out or _get(cfg, "out_dir", required=True)
    by_source, by_subject = {}, {}
    rho_by_tag = {}
    for eval_dir in args.eval_dirs:
        csv_path = os.path.join(eval_dir, "report.csv")
        if not os.path.exists(csv_path):
            raise DataError(f"no report.csv in {eval_dir}")
        _, src_rows, subj_rows = _read_report_csv(csv_path)
        by_source.update(src_rows)
        by_subject.update(subj_rows)
        for name in sorted(os.listdir(eval_dir)):
            if name.startswith("parcels_") and name.endswith(".nmeb"):
                vec = read_bold_file(os.path.join(eval_dir, name))
                tag = name[:-len(".nmeb")].rsplit("_", 1)[-1]
                rho_by_tag.setdefault(tag, []).append(vec.values[0])
    if not by_source:
        raise DataError("no aggregate rows found in the given eval dirs")

    tags = sorted({tag for _, tag in by_source})
    sources = []
    for source, _ in by_source:
        if source not in sources:
            sources.append(source)
    sources.sort()

    with _output_lock(out_dir):
        lines = ["source_id," + ",".join(tags)]
        for source in sources:
            cells = [format(by_source[(source, tag)], ".17g")
                     if (source, tag) in by_source else ""
                     for tag in tags]
            lines.append(source + "," + ",".join(cells))
        overall = []
        for tag in tags:
            vals = [v for (s, t), v in by_source.items() if t == tag]
            overall.append(format(sum(vals) / len(vals), ".17g"))
        lines.append("Overall Average," + ",".join(overall))
        atomic_write_bytes(os.path.join(out_dir, "summary.csv"),
                           ("\n".join(lines) + "\n").encode("utf-8"))
        plots.render_report_figures(by_source, by_subject, out_dir)
        plots.render_parcel_histogram(
            {t: np.concatenate(v) for t, v in rho_by_tag.items()}, out_dir)
    print(f"wrote summary and figures under {out_dir}")
    return 0


# ---------------------------------------------------------------------------

def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="override the config out_dir")
    common.add_argument("--jobs", type=int, default=1,
                        help="worker hint for per-source stages")

    parser = argparse.ArgumentParser(
        prog="nmenc",
        description="parcel-wise multimodal encoding models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    kwargs = dict(parents=[common], epilog=_EPILOG,
                  formatter_class=argparse.RawDescriptionHelpFormatter)
    sub.add_parser("synth", help="generate a synthetic corpus", **kwargs)
    sub.add_parser("fit", help="fit an encoder on the train split", **kwargs)

    p = sub.add_parser("predict", help="predict parcel responses", **kwargs)
    p.add_argument("--model", required=True, help="model bundle path")
    p.add_argument("--roles", default="test_id,test_ood",
                   help="comma list of manifest roles to predict")

    p = sub.add_parser("eval", help="score predictions against BOLD", **kwargs)
    p.add_argument("--pred-dir", required=True, help="prediction directory")
    p.add_argument("--bold-dir", help="override config bold_dir")
    p.add_argument("--concat", action="store_true",
                   help="concatenate sources before scoring")

    p = sub.add_parser("report", help="merge reports, render figures", **kwargs)
    p.add_argument("eval_dirs", nargs="+", help="eval output directories")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else {}
        return _COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"nmenc: code=2 config-error: {exc}", file=sys.stderr)
        return 2
    except (SingularFitError, TrainingDivergedError) as exc:
        print(f"nmenc: code=4 numerical-failure: {exc}", file=sys.stderr)
        return 4
    except (DataError, FormatError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"nmenc: code=3 data-error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
