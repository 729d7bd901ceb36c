"""``fibcap`` command line.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numeric error (non-finite values during training or inference).
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

logger = logging.getLogger("fibcap")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DEFAULT_DATA = {"fc": "suite:fc-train-64", "cal": "suite:cal-pretrain-64"}


class UsageError(Exception):
    pass


def parse_frames(text):
    """``a..b`` -> ``range(a, b)`` (half-open)."""
    try:
        a, b = (int(x) for x in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--frames expects a..b, got {text!r}") from None
    if not 0 <= a < b:
        raise argparse.ArgumentTypeError(f"--frames {text}: need 0 <= a < b")
    return range(a, b)


def _set_threads(n):
    n = n or os.environ.get("FIBCAP_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_config(args):
    from .config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out(args):
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(x):
    import numpy as np

    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.integer, np.floating, np.bool_)):
        return x.item()
    if hasattr(x, "to_dict"):
        return x.to_dict()
    raise TypeError(f"not serialisable: {type(x).__name__}")


# -- model / config helpers ---------------------------------------------------------------

def _model_spec(cfg, weights=None):
    from .tensornet.segresnet import ModelSpec

    d = dict(cfg.model) if cfg is not None and cfg.model else None
    if d is None and weights is not None:
        side = Path(str(weights) + ".json")
        if side.exists():
            d = json.loads(side.read_text())
    d = d or {}
    if "blocks_down" in d:
        d["blocks_down"] = tuple(d["blocks_down"])
    elif "levels" in d:
        d["blocks_down"] = (2,) * int(d["levels"])
    return ModelSpec(**d)


def _build(spec, seed):
    from .tensornet.segresnet import SegModel

    return SegModel(spec, seed=seed)


def _save_model(model, path):
    from .tensornet import save_weights

    save_weights(model, path)
    _write_json(str(path) + ".json", model.spec.to_dict())


def _train_config(cfg, **override):
    from .train import TrainConfig

    keys = {"lr", "adam_eps", "weight_decay", "l2_reg", "max_epochs", "batch_size", "patience", "beta1",
            "beta2", "crop_width", "min_delta"}
    kw = {k: v for k, v in cfg.train.items() if k in keys}
    kw.update(override)
    return TrainConfig(seed=cfg.seed, **kw)


def _augment(cfg):
    from .augment import AugmentConfig

    if not cfg.train.get("enabled_augment", False):
        return None
    return AugmentConfig.from_dict(cfg.augment)


def _depth(cfg):
    return int(cfg.eval.get("depth", 200))


def _post_kw(cfg):
    return {"threshold": float(cfg.eval.get("threshold", 0.5)), "radius": int(cfg.eval.get("radius", 3)),
            "connectivity": int(cfg.eval.get("connectivity", 4))}


def _data_ref(cfg, key, default):
    ref = cfg.resolve(key)
    if ref is None:
        return default
    cfg.check_paths(key)
    return ref


def _segment_arrays(models, images, post_kw):
    """Postprocessed masks; several models are combined by plurality vote."""
    import numpy as np

    from .postprocess import postprocess
    from .train import plurality_vote

    preds = []
    for m in models:
        probs = m.predict(images)
        preds.append(np.stack([postprocess(p, **post_kw) for p in probs]))
    return preds[0] if len(preds) == 1 else plurality_vote(preds)


def _evaluate_arrays(pred, truth):
    from .stats import evaluate_masks

    res = evaluate_masks(list(pred), list(truth))
    return {"counts": res["counts"], "micro": res["micro"].to_dict(),
            "macro": {k: vars(v) for k, v in res["macro"].items()}, "n_frames": res["n_frames"]}


# -- commands ------------------------------------------------------------------------------

def cmd_phantom(args):
    """Render a standard phantom suite into a dataset directory."""
    from dataclasses import replace

    import numpy as np

    from .dataset import save_labelled
    from .phantom import generate, standard_suites

    suites = standard_suites()
    if args.suite not in suites:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {sorted(suites)}")
    out = _out(args)
    written = []
    for spec in suites[args.suite]:
        if args.seed is not None:
            spec = replace(spec, seed=spec.seed + 7919 * args.seed)
        pb, truth = generate(spec)
        frames = range(pb.n_frames) if args.frames is None else [f for f in args.frames if f < pb.n_frames]
        frames = list(frames)
        if not frames:
            raise UsageError(f"--frames selects nothing from {pb.n_frames} frames")
        if len(frames) != pb.n_frames:
            from .pullback import Pullback

            pb = Pullback.from_array(pb.volume()[frames], pb.geometry, pb.pullback_id)
        extra = {
            "lumen_r_index": [truth.lumens[i].r_index.tolist() for i in frames],
            "shadows": [truth.shadows[i].to_dict() for i in frames],
            "thickness_um": [[None if np.isnan(v) else float(v) for v in row] for row in truth.thickness_um[frames]],
        }
        labels = {"FC": [truth.fc_masks[i] for i in frames],
                  "CALCIFICATION": [truth.calc_masks[i] for i in frames]}
        save_labelled(out, pb, labels, extra)
        written.append(pb.pullback_id)
    print(f"wrote {len(written)} pullbacks to {out}")
    return EXIT_OK


def cmd_preprocess(args):
    """Preprocess a pullback container into a float32 container plus boundary JSON."""
    import numpy as np

    from .preprocess import preprocess_pullback
    from .pullback import Pullback, load_pullback, save_pullback

    pb = load_pullback(args.pullback)
    out = _out(args)
    frames = preprocess_pullback(pb)
    idx = range(len(frames)) if args.frames is None else [f for f in args.frames if f < len(frames)]
    frames = [frames[i] for i in idx]
    vol = np.clip(np.stack([f.data for f in frames]), 0.0, 1.0)
    pre = Pullback.from_array(vol, pb.geometry, f"{pb.pullback_id}.pre", dtype="f32", max_raw=1.0)
    save_pullback(pre, out / f"{pb.pullback_id}.pre.ivp")
    _write_json(out / f"{pb.pullback_id}.pre.boundaries.json", _boundaries(pb, frames))
    print(f"preprocessed {len(frames)} frames of {pb.pullback_id}")
    return EXIT_OK


def _boundaries(pb, frames):
    g = pb.geometry
    return {
        "pullback_id": pb.pullback_id,
        "geometry": {"radial_spacing_um": g.radial_spacing_um, "frame_spacing_mm": g.frame_spacing_mm,
                     "catheter_offset_um": g.catheter_offset_um, "theta_count": g.theta_count},
        "frames": [{"source_frame_index": f.source_frame_index, "lumen": f.lumen.to_dict(),
                    "shadow": f.shadow.to_dict()} for f in frames],
    }


def cmd_pretrain(args):
    """Train on the calcification task and save the weights for transfer."""
    from .dataset import load_data, stack
    from .pullback import ClassTag
    from .train import fit

    cfg = _load_config(args)
    out = _out(args)
    ref = _data_ref(cfg, "pretrain_data", DEFAULT_DATA["cal"])
    data = load_data(ref, depth=_depth(cfg), class_tag=ClassTag.CALCIFICATION)
    if len(data) < 2:
        raise ValueError("pretraining needs at least two pullbacks")
    n_val = max(1, len(data) // 5)
    model = _build(_model_spec(cfg), cfg.seed)
    model, log = fit(model, stack(data[:-n_val]), stack(data[-n_val:]), _train_config(cfg), augment=_augment(cfg))
    _save_model(model, out / "pretrained.fcw")
    log.to_csv(out / "pretrain_log.csv")
    _write_json(out / "pretrain_summary.json", log.summary())
    print(json.dumps(log.summary()))
    return EXIT_OK


def cmd_train(args):
    """k-fold cross-validation by pullback, plus an optional held-out test set."""
    from .dataset import load_data, stack
    from .stats import ConfusionCounts, fold_aggregate, metrics
    from .train import fit, make_folds

    cfg = _load_config(args)
    out = _out(args)
    depth = _depth(cfg)
    data = load_data(_data_ref(cfg, "data", DEFAULT_DATA["fc"]), depth=depth)
    by_id = {d.pullback_id: d for d in data}
    k = int(cfg.train.get("folds", 5))
    plan = make_folds(list(by_id), k=k, ratios=tuple(cfg.train.get("ratios", (0.6, 0.2, 0.2))), seed=cfg.seed)
    plan.to_json(out / "fold_plan.json")
    post_kw = _post_kw(cfg)
    fold_rows, models = [], []

    def pick(ids):
        return stack([by_id[p] for p in ids])

    for i, fold in enumerate(plan.folds):
        model = _build(_model_spec(cfg), cfg.seed + i)
        model, log = fit(model, pick(fold["train"]), pick(fold["val"]), _train_config(cfg),
                         init=args.pretrained, augment=_augment(cfg))
        _save_model(model, out / f"fold{i}.fcw")
        log.to_csv(out / f"fold{i}_log.csv")
        x_te, y_te = pick(fold["test"])
        row = _evaluate_arrays(_segment_arrays([model], x_te, post_kw), y_te)
        row.update(fold=i, train_log=log.summary())
        fold_rows.append(row)
        models.append(model)
        print(f"fold {i}: dice {row['micro']['dice']:.3f} epochs_to_best {log.epochs_to_best}")
    micro = [metrics(ConfusionCounts(**r["counts"])) for r in fold_rows]
    agg = fold_aggregate(micro, min_entries=min(2, len(micro)))
    result = {"folds": fold_rows, "aggregate": {k: vars(v) for k, v in agg.items()}}
    test_ref = cfg.resolve("test_data")
    if test_ref is not None:
        cfg.check_paths("test_data")
        x_te, y_te = stack(load_data(test_ref, depth=depth))
        result["held_out"] = _evaluate_arrays(_segment_arrays(models, x_te, post_kw), y_te)
        result["held_out"]["ensemble"] = "plurality vote over fold models"
    _write_json(out / "metrics.json", result)
    print("dice " + agg["dice"].format())
    return EXIT_OK


def cmd_segment(args):
    """Preprocess, predict, binarise and clean every selected frame; write masks."""
    import numpy as np

    from .postprocess import postprocess
    from .preprocess import preprocess_pullback
    from .pullback import load_pullback, save_mask
    from .tensornet import load_weights
    from .train import plurality_vote

    cfg = _load_config(args) if args.config else None
    if not args.weights:
        raise UsageError("--weights is required")
    pb = load_pullback(args.pullback)
    models = []
    for w in args.weights:
        model = _build(_model_spec(cfg, w), 0)
        load_weights(model, w, strict=True)
        models.append(model)
    post_kw = _post_kw(cfg) if cfg is not None else {}
    out = _out(args) / pb.pullback_id
    out.mkdir(parents=True, exist_ok=True)
    frames = list(range(pb.n_frames)) if args.frames is None else [f for f in args.frames if f < pb.n_frames]
    if not frames:
        raise UsageError(f"--frames selects nothing from {pb.n_frames} frames")
    from .preprocess import detect_guidewire_pullback, preprocess_frame

    shadows = detect_guidewire_pullback(pb.frames)
    times, pre = [], []
    for f in frames:
        t0 = time.perf_counter()
        pf = preprocess_frame(pb.frames[f], shadows[f])
        x = pf.data[None].astype(np.float32)
        preds = [postprocess(m.predict(x, batch_size=1)[0], **post_kw) for m in models]
        mask = preds[0] if len(preds) == 1 else plurality_vote(preds)
        save_mask(mask, out / f"mask_{f:03d}.pgm")
        times.append(time.perf_counter() - t0)
        pre.append(pf)
    bounds = _boundaries(pb, pre)
    bounds["frame_indices"] = frames
    bounds["timing_s"] = times
    _write_json(out / "segment.json", bounds)
    t = np.asarray(times)
    print(f"segmented {len(frames)} frames: mean {t.mean():.3f} s/frame, p95 {np.percentile(t, 95):.3f} s/frame")
    return EXIT_OK


def _read_segmentation(seg_dir):
    import numpy as np

    from .preprocess import LumenBoundary
    from .pullback import Geometry, load_mask

    seg_dir = Path(seg_dir)
    meta_path = seg_dir / "segment.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found (run fibcap segment first)")
    meta = _read_json(meta_path)
    g = meta["geometry"]
    geo = Geometry(radial_spacing_um=g["radial_spacing_um"], frame_spacing_mm=g["frame_spacing_mm"],
                   catheter_offset_um=g["catheter_offset_um"], theta_count=g["theta_count"])
    masks = [load_mask(seg_dir / f"mask_{f:03d}.pgm") for f in meta["frame_indices"]]
    lumens = [LumenBoundary(np.asarray(fr["lumen"]["r_index"]), np.asarray(fr["lumen"]["valid"], bool))
              for fr in meta["frames"]]
    return meta, geo, masks, lumens


def cmd_quantify(args):
    """Per-frame and per-pullback FC measurements plus heatmap / mesh export."""
    from .quantify import QuantConfig, export_heatmap, quantify_pullback

    cfg = _load_config(args) if args.config else None
    meta, geo, masks, lumens = _read_segmentation(args.segmentation)
    thr = float(cfg.quantify.get("tcfa_threshold_um", 65.0)) if cfg is not None else 65.0
    q = quantify_pullback(masks, lumens, QuantConfig(tcfa_threshold_um=thr, geometry=geo))
    out = _out(args)
    stem = meta["pullback_id"]
    per_frame = [{"frame": f, "fc_arc_deg": fq.fc_arc_deg, "fc_area_mm2": fq.fc_area_mm2,
                  "mean_thickness_um": fq.mean_thickness_um if fq.has_fc else None,
                  "min_thickness_um": fq.min_cap_thickness_um if fq.has_fc else None}
                 for f, fq in zip(meta["frame_indices"], q.frames)]
    _write_json(out / f"{stem}_frames.json", per_frame)
    if any(fq.has_fc for fq in q.frames):
        export_heatmap(q, out, stem=stem)
    else:
        logger.warning("no FC found in %s; heatmap skipped", stem)
        _write_json(out / f"{stem}_summary.json", q.summary())
    print(json.dumps({k: v for k, v in q.summary().items() if k != "definitions"}))
    return EXIT_OK


def cmd_evaluate(args):
    """Pixel metrics and thickness agreement of a segmentation against phantom truth."""
    import numpy as np

    from .dataset import load_labels
    from .preprocess import GuidewireShadow, preprocess_mask
    from .quantify import thickness_per_aline
    from .stats import agreement

    meta, geo, masks, lumens = _read_segmentation(args.segmentation)
    if not args.truth:
        raise UsageError("--truth is required")
    pid = meta["pullback_id"]
    frames = meta["frame_indices"]
    n_src = max(frames) + 1
    truth_raw = load_labels(args.truth, pid, n_src)
    depth = masks[0].data.shape[0]
    truth, pred = [], []
    auto_t, ref_t = [], []
    for f, m, lum, fr in zip(frames, masks, lumens, meta["frames"]):
        s = fr["shadow"]
        shadow = GuidewireShadow(s["theta_start"], s["theta_end"], geo.theta_count)
        t = preprocess_mask(truth_raw[f], lum, shadow, depth=depth).data
        truth.append(t)
        pred.append(m.data)
        a, b = thickness_per_aline(m, geo), thickness_per_aline(t, geo)
        ok = ~np.isnan(a) & ~np.isnan(b)
        auto_t.extend(a[ok].tolist())
        ref_t.extend(b[ok].tolist())
    out = _out(args)
    result = _evaluate_arrays(pred, truth)
    result["pullback_id"] = pid
    _write_json(out / "metrics.json", {"held_out": result})
    if len(auto_t) >= 3:
        rep = agreement(np.array(auto_t), np.array(ref_t))
        _write_json(out / "agreement.json", rep.to_dict())
    else:
        logger.warning("fewer than 3 A-lines with FC in both masks; agreement skipped")
    print(f"dice {result['micro']['dice']}")
    return EXIT_OK


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def cmd_report(args):
    """Merge metrics, agreement and lesion summaries of a run directory."""
    import numpy as np

    from .stats import TABLE_HEADERS, coefficient_of_variation

    run = Path(args.run_dir)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory {run} not found")
    report, lines, absent = {}, [], []

    metrics_path = run / "metrics.json"
    if metrics_path.exists():
        m = _read_json(metrics_path)
        if "aggregate" in m:
            report["folds"] = m["aggregate"]
            lines.append("Cross-validation (mean ± sd over folds)")
            for key, head in TABLE_HEADERS.items():
                a = m["aggregate"][key]
                lines.append(f"  {head:<12} {a['mean']:.3f} ± {a['std']:.3f}")
        if "held_out" in m:
            report["held_out"] = m["held_out"]["micro"]
            lines.append("Held-out " + "  ".join(f"{TABLE_HEADERS[k]} {v:.3f}" for k, v in
                                                 m["held_out"]["micro"].items() if v is not None))
    else:
        absent.append("metrics")

    agree_path = run / "agreement.json"
    if agree_path.exists():
        a = _read_json(agree_path)
        report["agreement"] = a
        lines.append(f"Thickness agreement: bias {a['ba_bias']:.2f} ± {a['ba_sd']:.2f} um, "
                     f"{a['n_within_loa']}/{a['n']} within limits, R2 {a['r_squared']}")
    else:
        absent.append("agreement")

    summaries = sorted(run.glob("*_summary.json"))
    if summaries:
        rows = [_read_json(p) for p in summaries]
        attrs = {"length_mm": "Lesion length (mm)", "max_angle_deg": "Max FC angle (deg)",
                 "mean_thickness_um": "Mean FC thickness (um)", "min_cap_um": "Min FC thickness (um)",
                 "surface_area_mm2": "FC surface area (mm2)"}
        table = {}
        lines.append("Lesion attributes (mean, sd, COV)")
        for key, label in attrs.items():
            vals = np.array([r[key] for r in rows if r.get(key) is not None], dtype=float)
            if len(vals) >= 2 and vals.mean() != 0:
                cov = coefficient_of_variation(vals)
                table[key] = {"mean": vals.mean(), "sd": vals.std(ddof=1), "cov": cov, "n": len(vals)}
                lines.append(f"  {label:<26} {vals.mean():8.2f} {vals.std(ddof=1):8.2f} {cov:6.2f}")
            elif len(vals):
                table[key] = {"mean": vals.mean(), "sd": None, "cov": None, "n": len(vals)}
                lines.append(f"  {label:<26} {vals.mean():8.2f}        -      -")
        report["lesions"] = table
    else:
        absent.append("lesions")

    for name in absent:
        logger.warning("report: %s section absent", name)
    report["absent"] = absent
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report)
    text = "\n".join(lines + [f"(absent: {', '.join(absent)})" if absent else ""]).rstrip() + "\n"
    (out / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "segment": cmd_segment,
    "quantify": cmd_quantify,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (env FIBCAP_THREADS)")
    common.add_argument("--frames", type=parse_frames, default=None, help="half-open frame range a..b")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fibcap", description="Fibrous-cap segmentation and quantification for IVOCT.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    s = sub.add_parser("phantom", parents=[common], help="render a synthetic phantom suite")
    s.add_argument("--suite", default="fc-train-64")
    s = sub.add_parser("preprocess", parents=[common], help="guidewire, lumen, shift, crop and filter")
    s.add_argument("pullback")
    sub.add_parser("pretrain", parents=[common], help="train on the calcification task")
    s = sub.add_parser("train", parents=[common], help="cross-validated FC training")
    s.add_argument("--pretrained", help="weights used to initialise every fold")
    s = sub.add_parser("segment", parents=[common], help="segment FC in a pullback")
    s.add_argument("pullback")
    s.add_argument("--weights", action="append", help="model weights; repeat for a plurality-vote ensemble")
    s = sub.add_parser("quantify", parents=[common], help="FC thickness, arc, area and heatmap")
    s.add_argument("segmentation", help="directory written by fibcap segment")
    s = sub.add_parser("evaluate", parents=[common], help="metrics and agreement against truth labels")
    s.add_argument("segmentation")
    s.add_argument("--truth", help="dataset directory holding the truth labels")
    s = sub.add_parser("report", parents=[common], help="consolidate a run directory")
    s.add_argument("run_dir")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _set_threads(args.threads)

    from .config import ConfigError
    from .tensornet.layers import NumericalError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"fibcap {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"fibcap {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"fibcap {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
