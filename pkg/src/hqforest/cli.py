"""Command-line interface: ``hqforest {synth,train,predict,eval,inspect}``."""
import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import io
from .errors import BadConfig, HQForestError, Misalignment
from .features import squared_feature_name
from .forest import (Hyperparams, consolidate_resolution_independent,
                     consolidate_resolution_specific, export_graph_records, load_model,
                     predict, prepare_volume, save_model, train_forest)
from .hyperopt import default_grids, precision_recall_macro, random_search
from .pyramid import build_pyramid
from .synth import PRESETS, SynthConfig, make_volume

log = logging.getLogger("hqforest")


def _load_split(manifest, split):
    entries = manifest.entries(split)
    if not entries:
        raise BadConfig(f"manifest has no {split!r} volumes")
    return entries


# ---------------------------------------------------------------- synth

def cmd_synth(args):
    cfg = {}
    if args.config:
        cfg = io.read_json(args.config)
    preset = args.preset or cfg.get("preset", "blocks")
    dims = tuple(args.dims or cfg.get("dims", (48, 48, 48)))
    n_clas = args.n_clas or cfg.get("n_clas", 4 if preset == "blocks" else 2)
    noise = cfg.get("noise", 0.15) if args.noise is None else args.noise
    splits = {"train": args.n_train, "val": args.n_val, "test": args.n_test}
    for k in splits:
        if splits[k] is None:
            splits[k] = int(cfg.get(f"n_{k}", {"train": 6, "val": 2, "test": 2}[k]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    volumes = []
    i = 0
    for split in ("train", "val", "test"):
        for _ in range(splits[split]):
            seed = int(np.random.SeedSequence(args.seed, spawn_key=(i,)).generate_state(1)[0])
            vol = make_volume(SynthConfig(preset, dims, n_clas, noise, seed))
            name = f"vol_{i:03d}.mrv1"
            io.write_mrv1(out / name, vol)
            volumes.append(io.VolumeEntry(name, split))
            i += 1
    names = ["background"] + [f"class{c}" for c in range(2, n_clas + 1)]
    io.save_manifest(out / "manifest.json", io.Manifest(n_clas, names, [1], volumes))
    print(f"wrote {i} volumes and {out / 'manifest.json'}")
    return 0


# ---------------------------------------------------------------- train

def _hyper_from_file(path, seed):
    doc = io.read_json(path)
    doc.setdefault("seed", seed)
    try:
        return Hyperparams.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise BadConfig(f"malformed hyperparameter file {path}: {exc}") from exc


def _evaluate_voxels(model, prepared, n_foreground, threads, batch_normalize=False):
    preds, refs = [], []
    for p in prepared:
        pred = predict(p, model, batch_normalize=batch_normalize, threads=threads)
        preds.append(pred.layers[0].labels)
        refs.append(p.pyramid.layers[0].ref_labels)
    return precision_recall_macro(np.concatenate(preds), np.concatenate(refs), n_foreground)


def cmd_train(args):
    manifest = io.load_manifest(args.manifest)
    if args.hyper and args.grids:
        raise BadConfig("--hyper and --grids are mutually exclusive")
    timings = {}
    n_lay = 5
    hyper = None
    grids = None
    if args.hyper:
        hyper = _hyper_from_file(args.hyper, args.seed)
        n_lay = hyper.n_lay
    elif args.grids:
        grids = {**default_grids(), **io.read_json(args.grids)}
        n_lay = int(grids.get("n_lay", 5))
    else:
        hyper = Hyperparams(seed=args.seed)
    train = [io.read_mrv1(manifest.resolve(e)) for e in _load_split(manifest, "train")]
    prepared = [prepare_volume(v, n_lay, manifest.n_clas, timings) for v in train]
    report = {}
    if grids is None:
        model, rep = train_forest(None, hyper, manifest.n_clas, args.threads, prepared)
    else:
        val = [prepare_volume(io.read_mrv1(manifest.resolve(e)), n_lay, manifest.n_clas, timings)
               for e in _load_split(manifest, "val")]
        reports = {}

        def train_fn(hp):
            model, rep = train_forest(None, hp, manifest.n_clas, args.threads, prepared)
            reports[id(model)] = rep
            return model

        def eval_fn(model):
            return _evaluate_voxels(model, val, manifest.foreground, args.threads)

        trial_log = Path(str(args.out) + ".trials.jsonl")
        records = []

        def on_trial(rec):
            records.append(rec.to_dict())
            log.info("trial %d score %s", rec.index, rec.score)

        result = random_search(train_fn, eval_fn, grids, np.random.default_rng(args.seed),
                               max_trials=args.max_trials, on_trial=on_trial)
        io.write_jsonl(trial_log, records)
        if result.best_model is None:
            raise HQForestError("every hyperparameter trial failed")
        model = result.best_model
        rep = reports[id(model)]
        report["search"] = {"n_trials": len(result.trials), "stopped_early": result.stopped_early,
                            "best_trial": result.best_trial.index,
                            "best_score": result.best_trial.score, "trial_log": str(trial_log)}
    rep_d = rep.to_dict()
    phases = {"pyramid": timings.get("pyramid", 0.0), "features": timings.get("features", 0.0),
              "smote": rep_d["timings"]["smote"], "tree_optimization": rep_d["timings"]["trees"]}
    report.update({"timings": phases, "n_trees": rep_d["n_trees"], "n_nodes": rep_d["n_nodes"],
                   "failed_trees": rep_d["failed_trees"], "flags": rep_d["flags"],
                   "degenerate": "single_class_training_data" in rep_d["flags"],
                   "hyperparams": model.hyper.to_dict()})
    save_model(model, args.out)
    report_path = Path(args.report) if args.report else Path(str(args.out) + ".report.json")
    io.atomic_write_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.out} ({rep_d['n_trees']} trees, {rep_d['n_nodes']} nodes)")
    return 0


# ---------------------------------------------------------------- predict

def _pred_path(out_dir, entry):
    return Path(out_dir) / (Path(entry.path).stem + ".pred.npz")


def cmd_predict(args):
    manifest = io.load_manifest(args.manifest)
    model = load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in _load_split(manifest, args.split):
        vol = io.read_mrv1(manifest.resolve(entry))
        pred = predict(vol, model, batch_normalize=args.batch_normalize, threads=args.threads)
        arrays = {}
        for r, lp in pred.layers.items():
            arrays[f"probs_{r}"] = lp.probs
            arrays[f"labels_{r}"] = lp.labels.astype(np.int16)
            arrays[f"reliability_{r}"] = lp.reliability
        arrays["dims"] = np.asarray(vol.dims)
        path = _pred_path(out, entry)
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez_compressed(tmp, **arrays)
        tmp.replace(path)
        if not args.no_records:
            stem = Path(entry.path).stem
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                io.write_jsonl(out / f"{stem}.records.jsonl",
                               export_graph_records(pred, model, stem))
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------- eval

def confusion_matrix(pred, ref, n_clas):
    idx = (np.asarray(ref) - 1) * n_clas + (np.asarray(pred) - 1)
    return np.bincount(idx, minlength=n_clas * n_clas).reshape(n_clas, n_clas)


def layer_metrics(pred, ref, n_clas, foreground):
    cm = confusion_matrix(pred, ref, n_clas)
    per = {}
    for c in range(1, n_clas + 1):
        p, r = precision_recall_macro(pred, ref, [c])
        per[str(c)] = {"precision": p, "recall": r}
    mp, mr = precision_recall_macro(pred, ref, foreground)
    return {"per_class": per, "macro_precision": mp, "macro_recall": mr,
            "confusion": cm.tolist()}


def cmd_eval(args):
    manifest = io.load_manifest(args.manifest)
    pooled = {}
    volumes = {}
    for entry in _load_split(manifest, args.split):
        path = _pred_path(args.predictions, entry)
        if not path.exists():
            raise Misalignment(f"no predictions for {entry.path} at {path}")
        vol = io.read_mrv1(manifest.resolve(entry))
        if vol.labels is None:
            raise BadConfig(f"{entry.path} carries no reference labels")
        with np.load(path) as data:
            if tuple(data["dims"]) != vol.dims:
                raise Misalignment(f"{path} was predicted for dims {tuple(data['dims'])}")
            n_lay = max(int(k.split("_")[1]) for k in data.files if k.startswith("labels_"))
            pyr = build_pyramid(vol, n_lay, manifest.n_clas)
            per_vol = {}
            for r in range(n_lay + 1):
                pred = data[f"labels_{r}"].astype(np.int64)
                ref = pyr.layers[r].ref_labels
                if pred.shape != ref.shape:
                    raise Misalignment(f"layer {r} of {path} has {pred.size} labels, "
                                       f"expected {ref.size}")
                per_vol[str(r)] = layer_metrics(pred, ref, manifest.n_clas, manifest.foreground)
                pooled.setdefault(r, ([], []))
                pooled[r][0].append(pred)
                pooled[r][1].append(ref)
        volumes[entry.path] = per_vol
    report = {"split": args.split, "volumes": volumes,
              "pooled": {str(r): layer_metrics(np.concatenate(p), np.concatenate(q),
                                               manifest.n_clas, manifest.foreground)
                         for r, (p, q) in sorted(pooled.items())}}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        io.atomic_write_text(args.out, text)
    v = report["pooled"]["0"]
    print(f"voxel macro precision {v['macro_precision']:.4f} recall {v['macro_recall']:.4f}")
    return 0


# ---------------------------------------------------------------- inspect

def inspect_lines(model):
    names = model.schema.names
    lines = [f"model: {model.n_weak} trees, n_clas={model.n_clas}, schema={model.schema.schema_id}",
             f"hyperparams: {json.dumps(model.hyper.to_dict(), sort_keys=True)}"]
    for tree in model.trees:
        lines.append(f"tree {tree.index}: basic features "
                     + ", ".join(names[i] for i in tree.features))
        for n in tree.nodes:
            probs = " ".join(f"{p:.4f}" for p in n.probs)
            if n.kind == "leaf":
                lines.append(f"  node {n.id} leaf depth={n.depth} voxels={n.n_samples} "
                             f"probs=[{probs}] accuracy={n.accuracy:.4f} "
                             f"difficulty={n.difficulty:g}")
                continue
            lines.append(f"  node {n.id} decision layer={n.layer} depth={n.depth} "
                         f"samples={n.n_samples} classes={n.classes} "
                         f"children={n.children} pruned={n.pruned}")
            sel = []
            for h_local, h_glob in zip(n.selected, n.selected_global):
                mag = float(np.max(np.abs(n.betas[:, h_local])))
                sel.append(f"{squared_feature_name(h_glob, names)}[{h_glob}]={mag:.4g}")
            lines.append("    selected: " + (", ".join(sel) if sel else "(none)"))
            lines.append("    thresholds: [" + " ".join(f"{t:.6g}" for t in n.thresholds) + "]")
            lines.append(f"    probs=[{probs}] accuracy={n.accuracy:.4f} "
                         f"difficulty={n.difficulty:.4f}"
                         + (f" flags={n.flags}" if n.flags else ""))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r in range(model.n_lay, 0, -1):
            idx = consolidate_resolution_specific(model, r)
            lines.append(f"resolution-specific r={r}: {idx}")
        lines.append(f"resolution-independent: {consolidate_resolution_independent(model)}")
    return lines


def cmd_inspect(args):
    model = load_model(args.model)
    text = "\n".join(inspect_lines(model)) + "\n"
    if args.out:
        io.atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="hqforest",
                                 description="Hierarchical quadratic random forest for "
                                             "multichannel volumes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write synthetic MRV1 volumes and a manifest")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--preset", choices=PRESETS)
    sp.add_argument("--config", help="JSON file with preset/dims/n_clas/noise/n_train/...")
    sp.add_argument("--dims", type=int, nargs=3)
    sp.add_argument("--n-clas", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-val", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a forest (or run a random search)")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True, help="model file to write")
    sp.add_argument("--hyper", help="JSON hyperparameter file")
    sp.add_argument("--grids", help="JSON grid file; runs the random search")
    sp.add_argument("--max-trials", type=int, default=200)
    sp.add_argument("--report", help="report path (default: <out>.report.json)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="predict every layer of a split")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--split", default="test", choices=io.SPLITS)
    sp.add_argument("--batch-normalize", action="store_true",
                    help="normalise with statistics of the patches visiting each node")
    sp.add_argument("--no-records", action="store_true", help="skip graph-record export")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="precision/recall and confusion matrices per layer")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--predictions", required=True, help="directory written by predict")
    sp.add_argument("--out", help="report path (default: stdout summary only)")
    sp.add_argument("--split", default="test", choices=io.SPLITS)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="dump node parameters of a model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    t0 = time.perf_counter()
    try:
        code = args.func(args)
    except BrokenPipeError:
        # Output was piped into a reader that closed early.
        sys.stderr.close()
        return 0
    except (HQForestError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    log.info("%s finished in %.2fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
