"""Experiment harness: the study grid on synthetic fixtures.

Studies map to model variants: A and G are latest-scan CNNs (classifier /
risk head), B/D/E are sequence classifiers (plain, carry-decay, and
gate-time cells), F is the cause-of-death second stage, H the sequence risk
model. Study C (scan registration) is out of scope and only appears as an
annotated row in combined reports.

Configuration comes from an optional JSON file plus flags; flags win. The
``LUNGSURV_OUT`` environment variable, when set, anchors relative output
directories. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import (ConfigurationError, DataError, NumericError, StateError)
from .cohort import GeneratorConfig, assign_splits, load_fixture, save_fixture, simulate_cohort
from .models import (CnnEncoder, CnnModel, CrnnModel, ModelConfig, gradcam,
                     gradcam_sequence, load_model, save_model, softmax,
                     two_step_classify)
from .optimize import OptimConfig
from .preproc import (CtVolume, PipelineConfig, make_thorax_phantom,
                      preprocess_pipeline)
from .survloss import (MetricsReport, band_confusion, confusion_counts, f1_mcc,
                       harrell_c, ipcw_c, roc_auc, roc_points, write_roc_csv)
from .training import (TrainConfig, class_targets, evaluate_split, make_inputs,
                       predict_scores, train_model, write_train_log)

FOLD_TAGS = ("fold1", "fold2", "fold3", "fold4", "fold5")

STUDIES = {
    "A": {"kind": "cnn", "head": "classifier2"},
    "B": {"kind": "crnn", "head": "classifier2", "rnn": "lstm", "hx": 32},
    "C": {"out_of_scope": "scan registration"},
    "D": {"kind": "crnn", "head": "classifier2", "rnn": "talstm", "hx": 32},
    "E": {"kind": "crnn", "head": "classifier2", "rnn": "tlstm", "hx": 64},
    "F": {"kind": "crnn", "head": "classifier_cause2", "rnn": "lstm", "hx": 32},
    "G": {"kind": "cnn", "head": "cox"},
    "H": {"kind": "crnn", "head": "cox", "rnn": "lstm", "hx": 32},
}

OUTPUT_ROOT_ENV = "LUNGSURV_OUT"


def _resolve_out(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        raise ConfigurationError(f"config file {path} does not exist")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return doc


def _layered(cfgfile: dict, args, key: str, default=None):
    """Config-file value unless the flag was given; flags win."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return cfgfile.get(key, default)


class RunConfig:
    """Resolved settings for one training/evaluation run."""

    def __init__(self, study: str, fixture: str, out: str, epochs: int, seed: int,
                 model_overrides: dict, optim_overrides: dict, train_overrides: dict):
        if study not in STUDIES:
            raise ConfigurationError(f"unknown study {study!r}; expected one of A..H")
        if "out_of_scope" in STUDIES[study]:
            raise ConfigurationError(
                f"study {study} is out of scope ({STUDIES[study]['out_of_scope']})")
        self.study = study
        self.fixture = fixture
        self.out = _resolve_out(out)
        self.epochs = int(epochs)
        self.seed = int(seed)
        self.model_overrides = dict(model_overrides)
        self.optim_overrides = dict(optim_overrides)
        self.train_overrides = dict(train_overrides)

    def model_config(self, cohort) -> ModelConfig:
        spec = STUDIES[self.study]
        feats = cohort.features
        fields = {"head_kind": spec["head"]}
        if spec["kind"] == "crnn":
            fields["rnn_kind"] = spec["rnn"]
            fields["rnn_hx"] = spec["hx"]
        if feats.ndim == 3:
            fields["feature_mode"] = True
            fields["feature_dim"] = feats.shape[2]
        else:
            fields["input_shape"] = tuple(feats.shape[2:])
        fields.update(self.model_overrides)
        return ModelConfig(**fields)

    def optim_config(self) -> OptimConfig:
        fields = dict(self.optim_overrides)
        if "lr_init" not in fields:
            fields["lr_init"] = 5e-3 if STUDIES[self.study]["head"] == "cox" else 1e-3
        return OptimConfig(**fields)

    def train_config(self, seed: int) -> TrainConfig:
        fields = dict(self.train_overrides)
        fields.setdefault("epochs", self.epochs)
        fields["seed"] = seed
        if STUDIES[self.study]["head"] == "classifier_cause2":
            fields.setdefault("target", "cause")
        return TrainConfig(**fields)


def _build_run_config(args) -> RunConfig:
    cfgfile = _load_config_file(args.config)
    study = _layered(cfgfile, args, "study")
    if study is None:
        raise ConfigurationError("no study given (flag --study or config key 'study')")
    fixture = _layered(cfgfile, args, "fixture")
    if fixture is None:
        raise ConfigurationError("no fixture given (flag --fixture or config key 'fixture')")
    out = _layered(cfgfile, args, "out", default="runs")
    epochs = _layered(cfgfile, args, "epochs", default=5)
    seed = _layered(cfgfile, args, "seed", default=0)
    return RunConfig(str(study).upper(), fixture, out, epochs, seed,
                     cfgfile.get("model", {}), cfgfile.get("optim", {}),
                     cfgfile.get("train", {}))


def _build_model(run: RunConfig, cohort, seed: int, encoder_ckpt: str | None):
    mcfg = run.model_config(cohort)
    if STUDIES[run.study]["kind"] == "cnn":
        return CnnModel(mcfg, seed=seed)
    if mcfg.feature_mode:
        return CrnnModel(mcfg, seed=seed)
    if not encoder_ckpt:
        raise StateError(
            "sequence training on volumes needs a trained encoder checkpoint (--encoder)")
    cnn, _ = load_model(encoder_ckpt)
    if not isinstance(cnn.encoder, CnnEncoder):
        raise StateError("encoder checkpoint does not hold a volumetric model")
    return CrnnModel(mcfg, seed=seed, encoder=cnn.encoder)


# ---------------------------------------------------------------------------
# subcommands

def cmd_generate(args) -> int:
    cfgfile = _load_config_file(args.config)
    gen_fields = dict(cfgfile.get("generator", {}))
    if args.n is not None:
        gen_fields["n_subjects"] = args.n
    if args.seed is not None:
        gen_fields["seed"] = args.seed
    for k in ("true_beta", "class_ratio", "cause_base_ratio", "volume_shape"):
        if k in gen_fields and gen_fields[k] is not None:
            gen_fields[k] = tuple(gen_fields[k])
    out = _resolve_out(args.out)
    manifest = os.path.join(out, "cohort.json")
    if os.path.exists(manifest) and not args.force:
        raise ConfigurationError(f"{manifest} exists; pass --force to overwrite")
    cfg = GeneratorConfig(**gen_fields)
    cohort = simulate_cohort(cfg)
    assign_splits(cohort, seed=args.split_seed if args.split_seed is not None else cfg.seed)
    path = save_fixture(cohort, out)
    counts = {tag: int(len(cohort.split_indices(tag)))
              for tag in FOLD_TAGS + ("internal_test", "external_test")}
    print(f"wrote {path}: n={len(cohort)}, events={int(cohort.events.sum())}, "
          f"splits={counts}")
    return 0


def cmd_preprocess(args) -> int:
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    pcfg_fields = _load_config_file(args.config).get("pipeline", {})
    if args.target_shape:
        pcfg_fields["target_shape"] = tuple(int(s) for s in args.target_shape.split(","))
    pcfg = PipelineConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in pcfg_fields.items()})

    if args.phantom:
        volume, _ = make_thorax_phantom()
        result = preprocess_pipeline(volume, pcfg)
        np.save(os.path.join(out, "phantom_tensor.npy"), result.tensor)
        if args.emit_stage:
            _emit_stage(out, "phantom", args.emit_stage, result)
        with open(os.path.join(out, "phantom_diagnostics.json"), "w") as f:
            json.dump(result.diagnostics, f, indent=2, sort_keys=True)
        print(f"phantom pipeline done: mask {result.diagnostics['complete']['mask_litres']:.3f} L")
        return 0

    if not args.fixture:
        raise ConfigurationError("preprocess needs --fixture or --phantom")
    cohort = load_fixture(args.fixture)
    if cohort.features.ndim != 5:
        raise DataError("fixture holds feature vectors, not volumes; nothing to preprocess")
    spacing = tuple(cohort.metadata.get("spacing", (5.0, 3.0, 3.0)))
    for i in range(len(cohort)):
        for t in range(cohort.features.shape[1]):
            vol = CtVolume(cohort.features[i, t], spacing)
            result = preprocess_pipeline(vol, pcfg)
            np.save(os.path.join(out, f"subject{cohort.ids[i]:05d}_t{t}.npy"), result.tensor)
            if args.emit_stage:
                _emit_stage(out, f"subject{cohort.ids[i]:05d}_t{t}", args.emit_stage, result)
    print(f"preprocessed {len(cohort)} subjects x {cohort.features.shape[1]} timepoints -> {out}")
    return 0


def _emit_stage(out, prefix, stage, result):
    stages = {"mask": result.mask, "byte": result.byte_volume, "tensor": result.tensor}
    if stage not in stages:
        raise ConfigurationError(f"unknown stage {stage!r}; expected one of {sorted(stages)}")
    np.save(os.path.join(out, f"{prefix}_{stage}.npy"), stages[stage])


def _train_one_fold(run: RunConfig, cohort, fold_tag: str, encoder_ckpt):
    val_idx = cohort.split_indices(fold_tag)
    train_idx = np.concatenate([cohort.split_indices(t) for t in FOLD_TAGS if t != fold_tag])
    if len(val_idx) == 0 or len(train_idx) == 0:
        raise DataError(f"fixture has no subjects for {fold_tag}")
    fold_no = int(fold_tag[-1])
    model = _build_model(run, cohort, seed=run.seed + fold_no, encoder_ckpt=encoder_ckpt)
    tcfg = run.train_config(seed=run.seed + fold_no)
    result = train_model(model, cohort, train_idx, val_idx, run.optim_config(), tcfg)
    return model, result


def cmd_train(args) -> int:
    run = _build_run_config(args)
    if not os.path.exists(os.path.join(run.fixture, "cohort.json")):
        raise DataError(f"fixture not found under {run.fixture}")
    cohort = load_fixture(run.fixture)
    out_dir = os.path.join(run.out, run.study)
    os.makedirs(out_dir, exist_ok=True)
    folds = [f"fold{args.fold}"] if args.fold else list(FOLD_TAGS)
    for fold_tag in folds:
        model, result = _train_one_fold(run, cohort, fold_tag, args.encoder)
        ckpt = os.path.join(out_dir, f"{fold_tag}.ckpt.json")
        save_model(ckpt, model, card_extra={
            "study": run.study, "fold": fold_tag,
            "fixture_sha256": cohort.metadata.get("fixture_sha256", ""),
            "best_val": result.best_val, "val_metric": result.val_metric_name,
            "resampled_batches": result.resampled_batches,
        })
        write_train_log(os.path.join(out_dir, f"train_log_{fold_tag}.csv"), result.history)
        print(f"{run.study}/{fold_tag}: best {result.val_metric_name} = {result.best_val:.4f}"
              + (f" ({result.resampled_batches} batches redrawn)"
                 if result.resampled_batches else ""))
    return 0


def _load_fold_models(run: RunConfig, cohort, study_dir: str, encoder_ckpt):
    models = {}
    for tag in FOLD_TAGS:
        path = os.path.join(study_dir, f"{tag}.ckpt.json")
        if not os.path.exists(path):
            raise DataError(f"missing checkpoint {path}; train study {run.study} first")
        encoder = None
        if STUDIES[run.study]["kind"] == "crnn" and cohort.features.ndim == 5:
            if not encoder_ckpt:
                raise StateError("evaluating a volume-mode sequence model needs --encoder")
            cnn, _ = load_model(encoder_ckpt)
            encoder = cnn.encoder
        model, _ = load_model(path, encoder=encoder)
        models[tag] = model
    return models


def _ensemble_scores(models: dict, cohort, indices) -> np.ndarray:
    """Mean of the five fold models' scores."""
    acc = np.zeros(len(indices))
    for tag in FOLD_TAGS:
        acc += predict_scores(models[tag], cohort, indices)
    return acc / len(FOLD_TAGS)


def _scores_metrics(scores, cohort, indices, head: str, target: str):
    idx = np.asarray(indices)
    if head == "cox":
        return {"harrell_c": harrell_c(scores, cohort.times[idx], cohort.events[idx]),
                "ipcw_c": ipcw_c(scores, cohort.times[idx], cohort.events[idx])}, None
    y = class_targets(cohort, idx, target)
    pred = (np.asarray(scores) >= 0.5).astype(np.int64)
    f1, mcc = f1_mcc(*confusion_counts(pred, y))
    return ({"auc": roc_auc(scores, y), "f1": f1, "mcc": mcc},
            roc_points(scores, y))


def cmd_evaluate(args) -> int:
    run = _build_run_config(args)
    cohort = load_fixture(run.fixture)
    head = STUDIES[run.study]["head"]
    target = "cause" if head == "classifier_cause2" else "mortality"
    out_dir = os.path.join(run.out, run.study)
    os.makedirs(out_dir, exist_ok=True)
    split = args.split or "internal_test"
    if split not in FOLD_TAGS + ("internal_test", "external_test"):
        raise ConfigurationError(f"unknown split {split!r}")
    eval_idx = cohort.split_indices(split)
    if target == "cause":
        eval_idx = eval_idx[cohort.events[eval_idx] == 1]
    if len(eval_idx) == 0:
        raise DataError(f"split {split!r} has no usable subjects in this fixture")

    roc_sets = {}
    if args.scores:
        scores = _read_scores_csv(args.scores, cohort, eval_idx)
        metrics, roc = _scores_metrics(scores, cohort, eval_idx, head, target)
        fold_metrics = [metrics]
        external = None
        if roc is not None:
            roc_sets[split] = roc
    else:
        models = _load_fold_models(run, cohort, out_dir, args.encoder)
        fold_metrics = []
        for tag in FOLD_TAGS:
            idx = cohort.split_indices(tag)
            if target == "cause":
                idx = idx[cohort.events[idx] == 1]
            m = evaluate_split(models[tag], cohort, idx)
            roc = m.pop("_roc", None)
            if roc is not None:
                roc_sets[tag] = roc
            fold_metrics.append(m)
        scores = _ensemble_scores(models, cohort, eval_idx)
        external, roc = _scores_metrics(scores, cohort, eval_idx, head, target)
        if roc is not None:
            roc_sets[split] = roc

    report = MetricsReport(
        study=run.study, head=head, fold_metrics=fold_metrics,
        external={split: external} if external else None, roc_sets=roc_sets,
        provenance={"seed": run.seed,
                    "fixture_sha256": cohort.metadata.get("fixture_sha256", ""),
                    "split": split})
    report_path = os.path.join(out_dir, f"report_{split}.json")
    report.save(report_path)
    for name, pts in roc_sets.items():
        write_roc_csv(os.path.join(out_dir, f"roc_{name}.csv"), pts)
    summary = report.summary()["mean"]
    line = ", ".join(f"{k}={v:.4f}" for k, v in sorted(summary.items()))
    print(f"{run.study} folds: {line}")
    if external:
        line = ", ".join(f"{k}={v:.4f}" for k, v in sorted(external.items()))
        print(f"{run.study} {split} (fold ensemble): {line}")
    print(f"report: {report_path}")
    return 0


def _read_scores_csv(path, cohort, indices) -> np.ndarray:
    if not os.path.exists(path):
        raise DataError(f"scores file {path} does not exist")
    table = {}
    with open(path) as f:
        header = f.readline()
        if "subject_id" not in header:
            raise DataError("scores file needs a 'subject_id,score' header")
        for line in f:
            if not line.strip():
                continue
            sid, score = line.strip().split(",")[:2]
            table[int(sid)] = float(score)
    try:
        return np.asarray([table[int(cohort.ids[i])] for i in indices])
    except KeyError as e:
        raise DataError(f"scores file missing subject {e}") from e


def cmd_bands(args) -> int:
    if args.study is None:
        args.study = args.main_study
    run = _build_run_config(args)
    cohort = load_fixture(run.fixture)
    out_dir = os.path.join(run.out, "bands")
    os.makedirs(out_dir, exist_ok=True)
    split = args.split or "internal_test"
    idx = cohort.split_indices(split)
    if len(idx) == 0:
        raise DataError(f"split {split!r} is empty")

    main_dir = _resolve_out(args.main_dir)
    cause_dir = _resolve_out(args.cause_dir)
    main_run = RunConfig(args.main_study.upper(), run.fixture, run.out, run.epochs,
                         run.seed, {}, {}, {})
    cause_run = RunConfig(args.cause_study.upper(), run.fixture, run.out, run.epochs,
                          run.seed, {}, {}, {})
    main_models = _load_fold_models(main_run, cohort, main_dir, args.encoder)
    cause_models = _load_fold_models(cause_run, cohort, cause_dir, args.encoder)

    main_probs = _ensemble_scores(main_models, cohort, idx)
    cause_sets = np.zeros((len(idx), 2))
    for tag in FOLD_TAGS:
        model = cause_models[tag]
        mode = "sequence" if isinstance(model, CrnnModel) else "last"
        inputs = make_inputs(cohort, idx, mode)
        if mode == "sequence":
            out = model.forward(inputs["x"], inputs["deltas"], training=False)
        else:
            _, out = model.forward(inputs["x"], training=False)
        cause_sets += softmax(out)
    cause_sets /= len(FOLD_TAGS)

    classes = two_step_classify(main_probs, cause_sets)
    table = {}
    for band in (3, 7, 11):
        table[f"{band}y"] = band_confusion(classes, cohort.times[idx],
                                           cohort.events[idx], band,
                                           causes=cohort.causes[idx] - 1)
    json_path = os.path.join(out_dir, f"bands_{split}.json")
    with open(json_path, "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
    csv_path = os.path.join(out_dir, f"bands_{split}.csv")
    with open(csv_path, "w") as f:
        f.write("band,class,cases,sensitivity,specificity\n")
        for band, per_class in table.items():
            for cls, row in sorted(per_class.items()):
                spec = "" if row["specificity"] is None else f"{row['specificity']:.6f}"
                f.write(f"{band},{cls},{row['cases']},{row['sensitivity']:.6f},{spec}\n")
    print(f"band table: {csv_path}")
    return 0


def cmd_gradcam(args) -> int:
    if args.study is None:
        args.study = "A"
    run = _build_run_config(args)
    cohort = load_fixture(run.fixture)
    if cohort.features.ndim != 5:
        raise DataError("saliency needs a volume fixture")
    matches = np.flatnonzero(cohort.ids == args.subject)
    if len(matches) == 0:
        raise ConfigurationError(f"subject {args.subject} not in fixture")
    i = int(matches[0])
    out_dir = os.path.join(run.out, "gradcam")
    os.makedirs(out_dir, exist_ok=True)

    encoder = None
    if args.encoder:
        cnn, _ = load_model(args.encoder)
        encoder = cnn.encoder
    model, _ = load_model(args.checkpoint, encoder=encoder)

    vols = cohort.features[i]                      # (T, D, H, W)
    deltas = np.zeros(vols.shape[0])
    deltas[1:] = np.diff(cohort.scan_times[i])
    if isinstance(model, CrnnModel):
        maps = gradcam_sequence(model, vols[:, None], deltas)
    else:
        maps = [gradcam(model, vols[t][None]) for t in range(vols.shape[0])]

    from PIL import Image
    axial = args.axial if args.axial is not None else vols.shape[1] // 2
    for t, cam in enumerate(maps):
        np.save(os.path.join(out_dir, f"subject{args.subject:05d}_t{t}_cam.npy"), cam)
        sl = (np.clip(cam[axial], 0, 1) * 255).astype(np.uint8)
        Image.fromarray(sl, mode="L").save(
            os.path.join(out_dir, f"subject{args.subject:05d}_t{t}_z{axial}.png"))
    print(f"wrote {len(maps)} heatmaps for subject {args.subject} -> {out_dir}")
    return 0


def cmd_report(args) -> int:
    out_root = _resolve_out(args.out or "runs")
    split = args.split or "internal_test"
    rows_cls, rows_cox = [], []
    for study in "ABCDEFGH":
        spec = STUDIES[study]
        if "out_of_scope" in spec:
            rows_cls.append({"study": study, "status": f"out of scope ({spec['out_of_scope']})"})
            continue
        path = os.path.join(out_root, study, f"report_{split}.json")
        if not os.path.exists(path):
            row = {"study": study, "status": "not run"}
            (rows_cox if spec["head"] == "cox" else rows_cls).append(row)
            continue
        report = MetricsReport.load(path)
        summary = report.summary()
        row = {"study": study, "status": "ok"}
        for k in sorted(summary["mean"]):
            row[k] = f"{summary['mean'][k]:.3f} ({summary['sd'][k]:.3f})"
        if report.external:
            for split_name, metrics in report.external.items():
                for k, v in sorted(metrics.items()):
                    row[f"{split_name}_{k}"] = f"{v:.3f}"
        (rows_cox if spec["head"] == "cox" else rows_cls).append(row)
    combined = {"classification": rows_cls, "survival": rows_cox, "split": split}
    os.makedirs(out_root, exist_ok=True)
    path = os.path.join(out_root, f"combined_report_{split}.json")
    with open(path, "w") as f:
        json.dump(combined, f, indent=2, sort_keys=True)
    for row in rows_cls + rows_cox:
        print(row)
    print(f"combined report: {path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lungsurv",
                                description="survival-from-screening experiment harness")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, fixture=True):
        sp.add_argument("--config", help="JSON config file; flags override its keys")
        sp.add_argument("--study", help="study id A..H")
        if fixture:
            sp.add_argument("--fixture", help="cohort fixture directory")
        sp.add_argument("--out", help="output directory (default: runs)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="write a synthetic cohort fixture")
    g.add_argument("--config")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--split-seed", type=int, dest="split_seed")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    pp = sub.add_parser("preprocess", help="run the volume pipeline")
    pp.add_argument("--config")
    pp.add_argument("--fixture")
    pp.add_argument("--phantom", action="store_true")
    pp.add_argument("--target-shape", dest="target_shape")
    pp.add_argument("--emit-stage", dest="emit_stage",
                    help="also dump an intermediate stage: mask | byte | tensor")
    pp.add_argument("--out", required=True)
    pp.set_defaults(func=cmd_preprocess)

    t = sub.add_parser("train", help="train one study across folds")
    common(t)
    t.add_argument("--fold", type=int, choices=range(1, 6))
    t.add_argument("--encoder", help="CNN checkpoint for volume-mode sequence studies")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="per-fold metrics + ensemble on a held-out split")
    common(e)
    e.add_argument("--split", help="fold1..fold5 | internal_test | external_test")
    e.add_argument("--scores", help="oracle scores CSV (subject_id,score) instead of checkpoints")
    e.add_argument("--encoder")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bands", help="two-step classification over follow-up bands")
    common(b)
    b.add_argument("--main-study", default="B", dest="main_study")
    b.add_argument("--cause-study", default="F", dest="cause_study")
    b.add_argument("--main-dir", required=True, dest="main_dir")
    b.add_argument("--cause-dir", required=True, dest="cause_dir")
    b.add_argument("--split")
    b.add_argument("--encoder")
    b.set_defaults(func=cmd_bands)

    gc = sub.add_parser("gradcam", help="per-timepoint saliency volumes and slices")
    common(gc)
    gc.add_argument("--checkpoint", required=True)
    gc.add_argument("--subject", type=int, required=True)
    gc.add_argument("--axial", type=int)
    gc.add_argument("--encoder")
    gc.set_defaults(func=cmd_gradcam)

    r = sub.add_parser("report", help="combine study reports into one table")
    r.add_argument("--out")
    r.add_argument("--split")
    r.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigurationError, StateError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
