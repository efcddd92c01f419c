"""Command-line pipeline: synth, train, eval, explain, attack, curve, report.

Configuration is a flat key-value text file with dotted keys
("train.epochs = 20", comments with #).  Resolution order: defaults, then
the --config file, then TRIPROBE_* environment variables (dots spelled as
double underscores, e.g. TRIPROBE_TRAIN__EPOCHS=5), then CLI flags; every
flag documents the key it overrides.  Exit codes: 0 ok, 2 config error,
3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import metrics, report
from .autodiff import NonFiniteError
from .datasets import (DataError, Dataset, SyntheticConfig, generate_synthetic,
                       kfold_split, load_frames_dir, sample_attack_set,
                       save_frames_dir, train_val_test_videos)
from .explain import cam as cam_heatmap
from .explain import grad_saliency, integrated_gradients, make_attributor, overlay_heatmap
from .model import (CheckpointError, LinearModel, ModelConfig, TripletNet,
                    load_checkpoint, save_checkpoint)
from .robustness import (AttackConfig, AttackPreconditionError, robustness_curve,
                         robustness_eval)
from .training import (AdversarialTrainConfig, TrainConfig, TrainingDivergedError,
                       adversarial_fit, evaluate_logits, sgd_fit)
from .triplets import TripletTableError, load_table


class ConfigError(ValueError):
    """Bad configuration key, value, or referenced path."""


_DEFAULTS = {
    "run.seed": 0,
    "run.out": "out",
    "run.workers": 1,
    "data.root": "",
    "data.kfold": 5,
    "data.fold": 0,
    "data.n_val": 2,
    "synth.count": 600,
    "synth.height": 64,
    "synth.width": 112,
    "synth.n_instruments": 3,
    "synth.n_verbs": 2,
    "synth.n_targets": 3,
    "synth.rho": 0.8,
    "synth.noise": 0.02,
    "synth.glyph_size": 18,
    "synth.n_videos": 10,
    "model.conv_widths": "8,16,32",
    "model.branch_width": 16,
    "model.kind": "triplet_net",
    "model.linear_params": "",
    "train.epochs": 12,
    "train.batch_size": 32,
    "train.lr_backbone": 1e-2,
    "train.lr_encoder": 1e-2,
    "train.lr_decoder": 1e-2,
    "train.schedule": "linear",
    "train.decay": 0.9,
    "train.val_fraction": 0.15,
    "train.adv_radius": 0.0,
    "train.adv_norm": "inf",
    "train.adv_steps": 5,
    "attack.checkpoint": "",
    "attack.count": 50,
    "attack.fraction": 0.25,
    "attack.explainer": "grad,ig",
    "attack.which": "relevant,irrelevant",
    "attack.norm": "2",
    "attack.eps_max": 16.0,
    "attack.tol": 0.05,
    "attack.steps": 40,
    "attack.restarts": 3,
    "attack.clip_pixels": False,
    "attack.ig_steps": 24,
    "attack.save_deltas": False,
    "curve.fractions": "0.1,0.25,0.5,1.0",
    "explain.count": 4,
    "explain.ig_steps": 64,
    "report.metrics": "",
    "report.fold_metrics_dir": "",
    "report.checkpoint": "",
    "report.mass_fraction": 0.15,
    "report.mass_count": 50,
}


class Cfg:
    def __init__(self, values: dict):
        self.values = values

    def get(self, key: str, cast=None):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        raw = self.values[key]
        if cast is None or raw is None:
            return raw
        try:
            if cast is bool and isinstance(raw, str):
                if raw.lower() in ("true", "1", "yes"):
                    return True
                if raw.lower() in ("false", "0", "no"):
                    return False
                raise ValueError(raw)
            return cast(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {cast.__name__}") from exc

    def ints(self, key):
        return tuple(int(v) for v in str(self.get(key)).split(",") if v != "")

    def floats(self, key):
        return tuple(float(v) for v in str(self.get(key)).split(",") if v != "")

    def names(self, key):
        return tuple(v.strip() for v in str(self.get(key)).split(",") if v.strip())

    def text(self) -> str:
        return "\n".join(f"{k} = {self.values[k]}" for k in sorted(self.values))


def parse_config_file(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = val
    return out


def resolve_config(args) -> Cfg:
    values = dict(_DEFAULTS)
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config!r} does not exist")
        for k, v in parse_config_file(args.config).items():
            if k not in values:
                raise ConfigError(f"{args.config}: unknown config key {k!r}")
            values[k] = v
    for env_key, v in sorted(os.environ.items()):
        if not env_key.startswith("TRIPROBE_"):
            continue
        key = env_key[len("TRIPROBE_"):].lower().replace("__", ".")
        if key in values:
            values[key] = v
    for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("workers", "run.workers"),
                      ("fold", "data.fold"), ("data_root", "data.root")):
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    for key, v in (args.set or []):
        if key not in values:
            raise ConfigError(f"--set: unknown config key {key!r}")
        values[key] = v
    return Cfg(values)


def _set_pair(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected key=value")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _synth_config(cfg: Cfg) -> SyntheticConfig:
    return SyntheticConfig(
        height=cfg.get("synth.height", int), width=cfg.get("synth.width", int),
        n_instruments=cfg.get("synth.n_instruments", int),
        n_verbs=cfg.get("synth.n_verbs", int), n_targets=cfg.get("synth.n_targets", int),
        rho=cfg.get("synth.rho", float), noise=cfg.get("synth.noise", float),
        glyph_size=cfg.get("synth.glyph_size", int),
        n_videos=cfg.get("synth.n_videos", int), seed=cfg.get("run.seed", int))


def _load_dataset(cfg: Cfg) -> Dataset:
    root = cfg.get("data.root")
    if not root:
        raise ConfigError("data.root is required for this command")
    table = load_table(os.path.join(root, "triplet_map.txt"))
    return load_frames_dir(root, table)


def _fold_videos(cfg: Cfg, dataset: Dataset):
    folds = kfold_split(dataset.video_ids(), cfg.get("data.kfold", int),
                        cfg.get("run.seed", int))
    return train_val_test_videos(folds, cfg.get("data.fold", int),
                                 n_val=cfg.get("data.n_val", int))


def _model_config(cfg: Cfg, dataset: Dataset) -> ModelConfig:
    h, w, _ = dataset.examples[0].image.shape
    t = dataset.table
    return ModelConfig(height=h, width=w, conv_widths=cfg.ints("model.conv_widths"),
                       branch_width=cfg.get("model.branch_width", int),
                       n_instruments=t.n_instruments, n_verbs=t.n_verbs,
                       n_targets=t.n_targets, n_triplets=t.n_triplets,
                       init_seed=cfg.get("run.seed", int))


def _load_model(cfg: Cfg, dataset: Dataset, checkpoint_key: str):
    if cfg.get("model.kind") == "linear":
        path = cfg.get("model.linear_params")
        if not path or not os.path.exists(path):
            raise ConfigError("model.linear_params must point to a JSON file with 'weights' and 'bias'")
        with open(path) as fh:
            blob = json.load(fh)
        return LinearModel(np.asarray(blob["weights"], dtype=np.float64),
                           np.asarray(blob["bias"], dtype=np.float64))
    path = cfg.get(checkpoint_key)
    if not path:
        raise ConfigError(f"{checkpoint_key} is required")
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path!r} does not exist")
    params, model_cfg = load_checkpoint(path)
    return TripletNet(model_cfg, params)


def _attack_config(cfg: Cfg) -> AttackConfig:
    norm = cfg.get("attack.norm")
    norm = "inf" if str(norm) == "inf" else float(norm)
    return AttackConfig(norm=norm, eps_max=cfg.get("attack.eps_max", float),
                        tol=cfg.get("attack.tol", float), steps=cfg.get("attack.steps", int),
                        restarts=cfg.get("attack.restarts", int),
                        clip_pixels=cfg.get("attack.clip_pixels", bool),
                        seed=cfg.get("run.seed", int))


def _out_dir(cfg: Cfg) -> str:
    out = cfg.get("run.out")
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: Cfg) -> int:
    out = _out_dir(cfg)
    ds = generate_synthetic(_synth_config(cfg), cfg.get("synth.count", int))
    save_frames_dir(ds, out)
    report.write_manifest(out, cfg.text())
    print(f"wrote {len(ds)} synthetic frames across {len(ds.video_ids())} videos to {out}")
    return 0


def cmd_train(cfg: Cfg) -> int:
    out = _out_dir(cfg)
    dataset = _load_dataset(cfg)
    train_vids, val_vids, _ = _fold_videos(cfg, dataset)
    train_ds = dataset.subset(train_vids)
    val_ds = dataset.subset(val_vids)
    model_cfg = _model_config(cfg, dataset)
    seed = cfg.get("run.seed", int)
    common = dict(
        epochs=cfg.get("train.epochs", int), batch_size=cfg.get("train.batch_size", int),
        lr_backbone=cfg.get("train.lr_backbone", float),
        lr_encoder=cfg.get("train.lr_encoder", float),
        lr_decoder=cfg.get("train.lr_decoder", float),
        schedule=cfg.get("train.schedule"), decay=cfg.get("train.decay", float),
        val_fraction=cfg.get("train.val_fraction", float), seed=seed)
    net = TripletNet(model_cfg)
    X, Y = train_ds.images(), train_ds.labels()
    Xv = val_ds.images() if len(val_ds) else None
    Yv = val_ds.labels() if len(val_ds) else None
    radius = cfg.get("train.adv_radius", float)
    if radius > 0:
        adv = AdversarialTrainConfig(**common, radius=radius,
                                     norm=cfg.get("train.adv_norm"),
                                     inner_steps=cfg.get("train.adv_steps", int))
        result = adversarial_fit(net.params, model_cfg, dataset.table, X, Y, adv, Xv, Yv)
    else:
        result = sgd_fit(net.params, model_cfg, dataset.table, X, Y,
                         TrainConfig(**common), Xv, Yv)
    save_checkpoint(result.params, model_cfg, os.path.join(out, "checkpoint.bin"))
    report.write_history_csv(result.history, os.path.join(out, "history.csv"))
    report.write_manifest(out, cfg.text())
    print(f"trained {cfg.get('train.epochs')} epochs on {len(train_ds)} frames; "
          f"best epoch {result.best_epoch}; artifacts in {out}")
    return 0


def cmd_eval(cfg: Cfg) -> int:
    out = _out_dir(cfg)
    dataset = _load_dataset(cfg)
    _, _, test_vids = _fold_videos(cfg, dataset)
    test_ds = dataset.subset(test_vids)
    if not len(test_ds):
        raise DataError("test fold is empty")
    net = _load_model(cfg, dataset, "attack.checkpoint")
    scores = evaluate_logits(net.params, net.config, test_ds.images())
    labels = test_ds.labels()
    reports = [metrics.component_ap(scores, labels, dataset.table, d)
               for d in ("I", "V", "T", "IV", "IT", "IVT")]
    fold = cfg.get("data.fold", int)
    path = os.path.join(out, f"metrics_fold{fold}.csv")
    report.write_metric_report(reports, path)
    report.write_manifest(out, cfg.text())
    means = ", ".join(f"AP_{r.component}={r.mean:.3f}" for r in reports)
    print(f"fold {fold}: {means}; wrote {path}")
    return 0


def cmd_explain(cfg: Cfg) -> int:
    out = _out_dir(cfg)
    dataset = _load_dataset(cfg)
    _, _, test_vids = _fold_videos(cfg, dataset)
    test_ds = dataset.subset(test_vids)
    net = _load_model(cfg, dataset, "attack.checkpoint")
    picked = sample_attack_set(test_ds, min(cfg.get("explain.count", int), len(test_ds)),
                               cfg.get("run.seed", int))
    ig_steps = cfg.get("explain.ig_steps", int)
    for ex in picked:
        tag = ex.example_id.replace("/", "_")
        pred = int(net.predict_batch(ex.image[None])[0])
        g = grad_saliency(net, ex.image, target=pred)
        report.save_attribution(g.values, "grad", pred, os.path.join(out, f"attr_{tag}_grad.bin"))
        ig = integrated_gradients(net, ex.image, target=pred, steps=ig_steps)
        report.save_attribution(ig.values, "ig", pred, os.path.join(out, f"attr_{tag}_ig.bin"))
        output = net.output(ex.image[None])
        inst = int(dataset.table.projection("I")[pred])
        heat = cam_heatmap(output, net, inst)
        report.save_png(overlay_heatmap(ex.image, heat),
                        os.path.join(out, f"overlay_{tag}_cam.png"))
    report.write_manifest(out, cfg.text())
    print(f"explained {len(picked)} examples into {out}")
    return 0


def cmd_attack(cfg: Cfg) -> int:
    out = _out_dir(cfg)
    dataset = _load_dataset(cfg)
    _, _, test_vids = _fold_videos(cfg, dataset)
    test_ds = dataset.subset(test_vids)
    examples = sample_attack_set(test_ds, cfg.get("attack.count", int),
                                 cfg.get("run.seed", int))
    net = _load_model(cfg, dataset, "attack.checkpoint")
    atk_cfg = _attack_config(cfg)
    fraction = cfg.get("attack.fraction", float)
    workers = cfg.get("run.workers", int)
    summary_rows = []
    all_records = []
    for method in cfg.names("attack.explainer"):
        attributor = make_attributor(method, steps=cfg.get("attack.ig_steps", int))
        for which in cfg.names("attack.which"):
            res = robustness_eval(net, examples, attributor, fraction, which,
                                  atk_cfg, explainer=method, workers=workers)
            all_records.extend((method, r) for r in res.records)
            summary_rows.append([method, which, fraction, res.mean_epsilon,
                                 res.n_attacked, res.n_censored, res.n_skipped])
            print(f"{method}/{which}: mean eps {res.mean_epsilon:.4f} over "
                  f"{res.n_attacked - res.n_censored} successes "
                  f"({res.n_censored} censored, {res.n_skipped} skipped)")
    recs = [r for _, r in all_records]
    rows = [[r.example_id, m, fraction, r.mask_spec.rsplit("/", 1)[-1], str(r.norm),
             r.epsilon, r.success, r.queries] for m, r in all_records]
    report.write_csv(os.path.join(out, "records.csv"),
                     ["example_id", "explainer", "fraction", "set", "norm_p",
                      "epsilon", "success", "queries"], rows)
    report.write_robustness_jsonl(
        recs, os.path.join(out, "records.jsonl"),
        delta_dir=os.path.join(out, "deltas") if cfg.get("attack.save_deltas", bool) else None)
    report.write_csv(os.path.join(out, "attack_summary.csv"),
                     ["explainer", "set", "fraction", "mean_epsilon", "n_attacked",
                      "n_censored", "n_skipped"], summary_rows)
    report.write_manifest(out, cfg.text())
    return 0


def cmd_curve(cfg: Cfg) -> int:
    out = _out_dir(cfg)
    dataset = _load_dataset(cfg)
    _, _, test_vids = _fold_videos(cfg, dataset)
    test_ds = dataset.subset(test_vids)
    examples = sample_attack_set(test_ds, cfg.get("attack.count", int),
                                 cfg.get("run.seed", int))
    net = _load_model(cfg, dataset, "attack.checkpoint")
    atk_cfg = _attack_config(cfg)
    fractions = list(cfg.floats("curve.fractions"))
    workers = cfg.get("run.workers", int)
    curves = {}
    for method in cfg.names("attack.explainer"):
        attributor = make_attributor(method, steps=cfg.get("attack.ig_steps", int))
        curve = robustness_curve(net, examples, attributor, fractions, atk_cfg,
                                 explainer=method, workers=workers)
        curves[method] = curve
        report.write_curve_csv(curve, os.path.join(out, f"curve_{method}.csv"))
    for which, attr in (("relevant", "mean_relevant"), ("irrelevant", "mean_irrelevant")):
        series = [(m, c.fractions, getattr(c, attr)) for m, c in curves.items()]
        report.line_chart_svg(series, os.path.join(out, f"curve_{which}.svg"),
                              title=f"minimum perturbation norm, {which} feature set",
                              x_label="top fraction", y_label="mean epsilon")
    report.write_manifest(out, cfg.text())
    print(f"robustness curves over fractions {fractions} written to {out}")
    return 0


def cmd_report(cfg: Cfg) -> int:
    out = _out_dir(cfg)
    wrote = []
    metrics_csv = cfg.get("report.metrics")
    if metrics_csv:
        per_class = _read_metric_csv(metrics_csv, "AP_IVT")
        rows = report.top5_table(per_class)
        path = os.path.join(out, "top5_ivt.csv")
        report.write_csv(path, ["rank", "class", "ap_ivt"], rows)
        wrote.append(path)
    folds_dir = cfg.get("report.fold_metrics_dir")
    if folds_dir:
        summary = _crossval_from_dir(folds_dir)
        path = os.path.join(out, "crossval_summary.csv")
        rows = [[name, mean, std, metrics.format_mean_std(mean, std)]
                for name, (mean, std) in sorted(summary.items())]
        report.write_csv(path, ["metric", "mean", "std", "formatted"], rows)
        wrote.append(path)
    if cfg.get("report.checkpoint"):
        path = _core_spurious_report(cfg, out)
        wrote.append(path)
    if not wrote:
        raise ConfigError("report: nothing to do; set report.metrics, "
                          "report.fold_metrics_dir, or report.checkpoint")
    report.write_manifest(out, cfg.text())
    print("wrote " + ", ".join(wrote))
    return 0


def _read_metric_csv(path, metric_name):
    if not os.path.exists(path):
        raise ConfigError(f"metrics file {path!r} does not exist")
    per_class = {}
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        try:
            mi, ci, vi = header.index("metric"), header.index("class"), header.index("value")
        except ValueError as exc:
            raise DataError(f"{path}: expected metric,class,value columns") from exc
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) <= max(mi, ci, vi) or parts[mi] != metric_name or parts[ci] == "":
                continue
            per_class[int(parts[ci])] = float(parts[vi])
    if not per_class:
        raise DataError(f"{path}: no {metric_name} rows")
    out = np.full(max(per_class) + 1, np.nan)
    for k, v in per_class.items():
        out[k] = v
    return out


def _crossval_from_dir(folds_dir):
    if not os.path.isdir(folds_dir):
        raise ConfigError(f"{folds_dir!r} is not a directory")
    files = sorted(f for f in os.listdir(folds_dir)
                   if f.startswith("metrics_fold") and f.endswith(".csv"))
    if len(files) < 2:
        raise DataError(f"{folds_dir}: need at least 2 metrics_fold*.csv files")
    per_metric = {}
    for fname in files:
        with open(os.path.join(folds_dir, fname)) as fh:
            fh.readline()
            for line in fh:
                metric, cls, value = line.strip().split(",")
                if cls == "" and metric.startswith("mean_AP_"):
                    per_metric.setdefault(metric, []).append(float(value))
    return metrics.crossval_summary(per_metric)


def _core_spurious_report(cfg: Cfg, out):
    dataset = _load_dataset(cfg)
    net = _load_model(cfg, dataset, "report.checkpoint")
    picked = sample_attack_set(dataset, min(cfg.get("report.mass_count", int), len(dataset)),
                               cfg.get("run.seed", int))
    picked = [ex for ex in picked if ex.core_mask is not None and ex.spurious_mask is not None]
    if not picked:
        raise DataError("core/spurious report needs examples with ground-truth masks")
    frac = cfg.get("report.mass_fraction", float)
    rows = []
    agg = {"grad": [], "ig": []}
    for method in ("grad", "ig"):
        attributor = make_attributor(method, steps=cfg.get("attack.ig_steps", int))
        X = np.stack([ex.image for ex in picked])
        y = np.stack([ex.labels for ex in picked]).argmax(axis=1)
        maps = attributor(net, X, y)
        for ex, amap in zip(picked, maps):
            mass = report.core_spurious_mass(amap, ex.core_mask, ex.spurious_mask, frac)
            rows.append([ex.example_id, method, frac, mass["core_frac"],
                         mass["spurious_frac"], mass["background_frac"]])
            agg[method].append(mass)
    for method, masses in agg.items():
        rows.append(["MEAN", method, frac,
                     float(np.mean([m["core_frac"] for m in masses])),
                     float(np.mean([m["spurious_frac"] for m in masses])),
                     float(np.mean([m["background_frac"] for m in masses]))])
    path = os.path.join(out, "core_spurious.csv")
    report.write_csv(path, ["example_id", "explainer", "fraction", "core_frac",
                            "spurious_frac", "background_frac"], rows)
    return path


# ---------------------------------------------------------------------------
# entry point

_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "attack": cmd_attack,
    "curve": cmd_curve,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triprobe",
        description="train, explain, and stress-test multi-label triplet recognizers")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", help="overrides run.out")
        p.add_argument("--workers", type=int, help="overrides run.workers")
        p.add_argument("--fold", type=int, help="overrides data.fold")
        p.add_argument("--data-root", dest="data_root", help="overrides data.root")
        p.add_argument("--set", action="append", type=_set_pair, metavar="KEY=VALUE",
                       help="override any config key")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return _COMMANDS[args.command](cfg)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"triprobe: error: config: {exc}", file=sys.stderr)
        return 2
    except (DataError, TripletTableError, CheckpointError) as exc:
        print(f"triprobe: error: data: {exc}", file=sys.stderr)
        return 3
    except (TrainingDivergedError, NonFiniteError, AttackPreconditionError) as exc:
        print(f"triprobe: error: numeric: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
