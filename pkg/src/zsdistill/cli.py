"""``zsdistill`` command line: gen-data, train, eval, grad-check."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .data import ExperimentData, NoiseConfig, build_splits, load_dataset, load_labels, save_dataset, save_labels
from .errors import ConfigError, QueryError, ShapeError, ZsdError
from .gradcheck import TOLERANCE, run_gradcheck
from .train import TrainConfig, check_writable, load_checkpoint, train
from .zeroshot import evaluate

log = logging.getLogger("zsdistill")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load(args) -> dict:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.default_config()
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def splits_from(cfg: dict) -> ExperimentData:
    """Vocabulary plus train/eval splits exactly as ``gen-data`` would write them."""
    cfgmod.require(cfg, "data.vocab_size", "data.image_dim", "data.text_dim", "data.train_size")
    d = cfg["data"]
    noise = NoiseConfig(tuple(d["noise"]["concepts_per_image"]), d["noise"]["caption_coverage"],
                        d["noise"]["distractor_rate"], d["noise"]["feature_noise_sigma"])
    return build_splits(d["vocab_size"], d["image_dim"], d["text_dim"], d["train_size"], d["eval_size"],
                        noise, d["holdout_fraction"], cfg["seed"], d["coupling"])


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    ex = splits_from(cfg)
    d = cfg["data"]
    out = Path(args.out or cfg["paths"]["data_dir"])
    check_writable(out)
    save_dataset(ex.train, out / "train")
    save_dataset(ex.eval_heldin, out / "eval_heldin")
    if ex.eval_heldout is not None:
        save_dataset(ex.eval_heldout, out / "eval_heldout")
    heldout_names = [ex.vocab.names[c] for c in ex.heldout]
    save_labels(out / "labels", ex.vocab.text_protos, ex.vocab.names, {"heldout": heldout_names})
    _emit({
        "out": str(out),
        "seed": cfg["seed"],
        "train_size": len(ex.train),
        "eval_size": len(ex.eval_heldin),
        "vocab_size": len(ex.vocab),
        "heldout": len(ex.heldout),
        "dims": list(ex.train.dims),
        "noise": d["noise"],
    })
    return EXIT_OK


def train_config_from(cfg: dict, args=None) -> TrainConfig:
    t = dict(cfg["train"])
    m = cfg["model"]
    if args is not None:
        if args.epochs is not None:
            t["epochs"] = args.epochs
        if args.workers is not None:
            t["num_workers"] = args.workers
        if args.ablation is not None:
            t["distillation"] = args.ablation == "C+D"
    return TrainConfig.from_dict({
        **t,
        "tau": m["tau"],
        "learn_tau": m["learn_tau"],
        "hidden": tuple(m["hidden"]),
        "embed_dim": m["embed_dim"],
        "activation": m["activation"],
        "seed": cfg["seed"],
        "threads": getattr(args, "threads", None) or 1,
    })


def cmd_train(args) -> int:
    cfg = _load(args)
    tcfg = train_config_from(cfg, args)
    out = check_writable(args.out or cfg["paths"]["run_dir"])
    data_dir = Path(args.data or Path(cfg["paths"]["data_dir"]) / "train")
    ds = load_dataset(data_dir)
    want = cfg["model"]["feature_dims"]
    if want is not None and tuple(want) != ds.dims:
        raise ShapeError(f"model expects feature dims {tuple(want)} but dataset {data_dir} has {ds.dims}")
    result = train(ds, tcfg, out)
    final = result.metrics[-1] if result.metrics else {}
    _emit({"out": str(out), "steps": result.checkpoint.step, "ablation": "C+D" if tcfg.distillation else "C",
           "final": {k: final.get(k) for k in ("l_image", "l_text", "l_infonce", "l_kl", "total")}})
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load(args)
    e = cfg["eval"]
    ks = [int(k) for k in args.ks.split(",")] if args.ks else list(e["ks"])
    ckpt_dir = Path(args.checkpoint or Path(cfg["paths"]["run_dir"]) / "checkpoint")
    data_root = Path(cfg["paths"]["data_dir"])
    split = args.split or e["split"]
    eval_dir = Path(args.data or data_root / f"eval_{split}")
    labels_path = Path(args.labels or data_root / "labels")
    ckpt = load_checkpoint(ckpt_dir)
    ds = load_dataset(eval_dir)
    feats, names, _ = load_labels(labels_path)
    if ks and max(ks) > len(names):
        raise QueryError(f"k={max(ks)} exceeds the number of labels C = {len(names)}")
    model = ckpt.teacher.params if (args.teacher or e["use_teacher"]) else ckpt.model
    if ds.dims[0] != model.image_tower.in_dim or feats.shape[1] != model.text_tower.in_dim:
        raise ShapeError(
            f"checkpoint towers take ({model.image_tower.in_dim}, {model.text_tower.in_dim}) features; "
            f"eval images have {ds.dims[0]}, labels have {feats.shape[1]}"
        )
    truth = [{names[c] for c in cs} for cs in ds.image_concepts]
    res = evaluate(model, ds.image_features, truth, feats, names, ks)
    report = res.to_json()
    report["evaluated"] = "teacher" if model is ckpt.teacher.params else "student"
    if report["evaluated"] == "student" and ckpt.config.get("distillation"):
        report["teacher_fh"] = evaluate(ckpt.teacher.params, ds.image_features, truth, feats, names, ks).to_json()["fh"]
    _emit(report)
    out = args.out or Path(cfg["paths"]["run_dir"]) / f"eval_{split}.json"
    with open(out, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {args.trials}")
    res = run_gradcheck(args.trials, args.seed, order=args.order, kl_direction=args.kl_direction)
    _emit({"trials": res.instances, "entries": res.entries, "max_rel_err": res.max_rel_err,
           "tolerance": TOLERANCE, "passed": res.passed})
    if not res.passed:
        log.error("gradient mismatch: %s%s analytic=%.17g numeric=%.17g rel_err=%.3g",
                  res.worst_param, list(res.worst_index), res.analytic, res.numeric, res.max_rel_err)
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsdistill", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic paired data")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="output directory (default: paths.data_dir)")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a two-tower model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="training dataset directory (default: paths.data_dir/train)")
    t.add_argument("--out", help="run directory (default: paths.run_dir)")
    t.add_argument("--ablation", choices=["C", "C+D"], help="C: contrastive only; C+D: with distillation")
    t.add_argument("--epochs", type=int)
    t.add_argument("--workers", type=int, help="simulated data-parallel workers")
    t.add_argument("--threads", type=int, help="cap on threads used for worker shards")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot flat hit@k evaluation")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="eval dataset directory")
    e.add_argument("--labels", help="label file prefix (labels.emb + labels.json)")
    e.add_argument("--split", choices=["heldin", "heldout"])
    e.add_argument("--ks", help="comma separated, e.g. 1,2,5,10")
    e.add_argument("--teacher", action="store_true", help="evaluate the EMA teacher instead of the student")
    e.add_argument("--out", help="JSON report path")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("grad-check", help="finite-difference gradient verification")
    c.add_argument("--trials", type=int, default=108)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--order", type=int, choices=[2, 4], default=4, help="central stencil order")
    c.add_argument("--kl-direction", default="teacher_target", choices=["teacher_target", "student_target"])
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # own handler bound to the current stderr, independent of any root logging setup
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO if args.verbose else logging.WARNING)
    log.propagate = False
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return EXIT_USAGE
    except (ZsdError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAIL
    finally:
        log.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
