"""Command-line entry point: ``cldfd <command> [--config FILE] [--dotted.key VALUE ...]``.

Commands
    gen-data   write base/target datasets and the target split
    pretrain   train the teacher on the base dataset
    distill    train the student on unlabeled target images
    eval       episodic few-shot evaluation of a trained encoder
    ablate     topology | tau | fd_position comparison table
    sweep      h | beta | lambda | batch | unlabeled_pct grid

Exit status: 0 success, 2 configuration error, 3 I/O error, 4 missing
upstream artifact, 1 anything else.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from typing import List, Optional


from . import config as C
from .data import generate_base, generate_target, load_dataset, save_dataset, split_target
from .distill import pretrain_teacher, train_student, write_history
from .errors import CLDError, ConfigError, ContainerError, MissingArtifactError
from .evalkit import FDConfig, evaluate_features, extract_features, per_block_rand_index, sig6
from .model import load_backbone, save_checkpoint

logger = logging.getLogger("cldfd")

ALIASES = {"topology": "distill.topology", "tau": "distill.tau", "lam": "distill.lam", "seed": "seed"}
ABLATIONS = ("topology", "tau", "fd_position")
SWEEPS = {"h": "fd.h", "beta": "fd.beta", "lambda": "distill.lam", "batch": "distill.batch_size", "unlabeled_pct": "data.fraction"}


# --- paths ---------------------------------------------------------------------------


def _root(cfg) -> str:
    return cfg["output_dir"]


def _data_dir(cfg) -> str:
    return cfg["paths"]["data"] or os.path.join(_root(cfg), "data")


def _teacher_path(cfg) -> str:
    return cfg["paths"]["teacher"] or os.path.join(_root(cfg), "teacher", "teacher.ckpt")


def _student_path(cfg) -> str:
    return cfg["paths"]["student"] or os.path.join(_root(cfg), "distill", "student.ckpt")


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise MissingArtifactError(f"missing {what}: {path} (run the upstream command first)")
    return path


def _prepare(run_dir: str, cfg) -> None:
    """Create the run directory and echo the resolved config before any compute."""
    os.makedirs(run_dir, exist_ok=True)
    C.dump(cfg, os.path.join(run_dir, "config.json"))
    logger.info("resolved config written to %s", os.path.join(run_dir, "config.json"))


def _load_split(cfg, fraction: Optional[float] = None):
    target = load_dataset(_require(os.path.join(_data_dir(cfg), "target.cldc"), "target dataset"))
    d = cfg["data"]
    return split_target(target, d["fraction"] if fraction is None else fraction, d["split_seed"])


# --- phases ----------------------------------------------------------------------------


def run_gen_data(cfg) -> str:
    out = _data_dir(cfg)
    _prepare(out, cfg)
    d = cfg["data"]
    base = generate_base(d["base_classes"], d["base_per_class"], d["image_size"], d["base_seed"])
    target = generate_target(d["target_classes"], d["target_per_class"], d["image_size"], C.gap_params(cfg), d["target_seed"])
    split = split_target(target, d["fraction"], d["split_seed"])
    save_dataset(base, os.path.join(out, "base.cldc"))
    save_dataset(target, os.path.join(out, "target.cldc"))
    with open(os.path.join(out, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(split.manifest(), fh, sort_keys=True)
        fh.write("\n")
    logger.info("wrote %d base and %d target images to %s", len(base), len(target), out)
    return out


def run_pretrain(cfg) -> str:
    base = load_dataset(_require(os.path.join(_data_dir(cfg), "base.cldc"), "base dataset"))
    out = os.path.join(_root(cfg), "teacher")
    _prepare(out, cfg)
    bcfg = C.backbone_config(cfg)
    res = pretrain_teacher(base, bcfg, C.pretrain_config(cfg), C.augment_policy(cfg))
    modules = {"backbone": res.backbone}
    if res.classifier is not None:
        modules["classifier"] = res.classifier
    save_checkpoint(os.path.join(out, "teacher.ckpt"), modules, bcfg, cfg["seed"], {"trace": res.trace})
    keys = list(res.trace[0]) if res.trace else []
    with open(os.path.join(out, "trace.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        for rec in res.trace:
            fh.write(",".join(str(rec[k]) if k == "epoch" else f"{rec[k]:.6g}" for k in keys) + "\n")
    return out


def run_distill(cfg, run_dir: Optional[str] = None, split=None) -> str:
    dcfg = C.distill_config(cfg)
    teacher = None
    teacher_file = _teacher_path(cfg)
    if dcfg.topology != "none":
        teacher, _ = load_backbone(_require(teacher_file, "teacher checkpoint"))
    split = split if split is not None else _load_split(cfg)
    out = run_dir or os.path.join(_root(cfg), "distill")
    _prepare(out, cfg)
    bcfg = C.backbone_config(cfg)
    res = train_student(teacher, split.unlabeled_train, dcfg, C.augment_policy(cfg), bcfg)
    save_checkpoint(os.path.join(out, "student.ckpt"), {"backbone": res.student}, bcfg, cfg["seed"], {"topology": dcfg.topology})
    if teacher is not None:
        save_checkpoint(os.path.join(out, "teacher.ckpt"), {"backbone": teacher}, teacher.config, teacher.seed)
    write_history(os.path.join(out, "history.csv"), res.history, topology=dcfg.topology)
    return out


def _metrics(cfg, encoder, pool, fd: Optional[FDConfig]):
    e = cfg["eval"]
    feats = extract_features(encoder, pool.images)
    rec = evaluate_features(
        feats, pool.labels, e["way"], e["shot"], e["query"], e["episodes"], fd, cfg["seed"],
        fd_query=e["fd_query"], steps=e["probe_steps"], lr=e["probe_lr"],
    )
    if e["rand_index"]:
        ri = per_block_rand_index(encoder, pool, None, cfg["seed"], e["kmeans_restarts"], e["kmeans_max_iter"])
        rec.per_block_rand_index = ri.values
        rec.meta["rand_index_converged"] = ri.converged
    return rec


def run_eval(cfg, student_file: Optional[str] = None, run_dir: Optional[str] = None, split=None):
    path = _require(student_file or _student_path(cfg), "student checkpoint")
    encoder, _ = load_backbone(path)
    split = split if split is not None else _load_split(cfg)
    out = run_dir or os.path.join(_root(cfg), "eval")
    _prepare(out, cfg)
    rec = _metrics(cfg, encoder, split.eval_pool, C.fd_config(cfg))
    rec.write(os.path.join(out, "metrics.json"))
    logger.info("mean %.4f +- %.4f over %d episodes", rec.mean, rec.ci95, rec.episodes)
    return out, rec


# --- studies ----------------------------------------------------------------------------


def _fd_defaults(cfg) -> dict:
    """Default FD settings with h capped at the feature dimension."""
    dim = C.backbone_config(cfg).feature_dim
    return {**C.FD_DEFAULTS, "h": min(C.FD_DEFAULTS["h"], dim)}


def _variant(cfg, key: str, value):
    v = copy.deepcopy(cfg)
    C.apply_override(v, key, value)
    C.validate(v)
    return v


def _row(study, variant, rec, base_cfg, cfg):
    changed = C.diff(base_cfg, cfg)
    return {
        "study": study,
        "variant": variant,
        "mean": sig6(rec.mean),
        "ci95": sig6(rec.ci95),
        "episodes": rec.episodes,
        "seed": cfg["seed"],
        "config_diff": ";".join(f"{k}={json.dumps(b)}" for k, (a, b) in changed.items()),
    }


def _write_rows(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def run_ablate(cfg, study: str) -> str:
    if study not in ABLATIONS:
        raise ConfigError(f"unknown study {study!r}; choose from {', '.join(ABLATIONS)}")
    root = os.path.join(_root(cfg), f"ablate-{study}")
    _prepare(root, cfg)
    split = _load_split(cfg)
    L = C.backbone_config(cfg).block_count
    rows = []
    if study in ("topology", "tau"):
        if study == "topology":
            variants = [("cross_level", "cross_level"), ("same_level", "same_level"), ("one_to_all", "one_to_all")]
            variants += [(f"single_block({l})", f"single_block({l})") for l in range(1, L)]
            variants.append(("no_kd", "none"))
            key = "distill.topology"
        else:
            variants = [("none", None), ("0", 0), ("1", 1), ("10", 10), ("100", 100)]
            key = "distill.tau"
        for name, value in variants:
            vcfg = _variant(cfg, key, value)
            vdir = os.path.join(root, name)
            run_distill(vcfg, vdir, split)
            _, rec = run_eval(vcfg, os.path.join(vdir, "student.ckpt"), vdir, split)
            rows.append(_row(study, name, rec, cfg, vcfg))
    else:
        fd = cfg["fd"] or _fd_defaults(cfg)
        for model_name in ("cross_level", "final_level"):
            mcfg = _variant(cfg, "distill.topology", model_name)
            mdir = os.path.join(root, model_name)
            run_distill(mcfg, mdir, split)
            for fd_name, fd_value in (("no_fd", None), ("fd", fd)):
                ecfg = _variant(mcfg, "fd", fd_value)
                edir = os.path.join(mdir, fd_name)
                _, rec = run_eval(ecfg, os.path.join(mdir, "student.ckpt"), edir, split)
                rows.append(_row(study, f"{model_name}/{fd_name}", rec, cfg, ecfg))
    path = os.path.join(_root(cfg), f"ablate-{study}.csv")
    _write_rows(path, rows)
    return path


def parse_grid(text: str, param: str, feature_dim: int) -> list:
    items = [t.strip() for t in str(text).split(",") if t.strip()]
    if not items:
        raise ConfigError("sweep grid is empty")
    out = []
    for t in items:
        if param == "h" and t in ("D_L", "D", "max"):
            out.append(feature_dim)
            continue
        try:
            v = float(t)
        except ValueError as exc:
            raise ConfigError(f"malformed grid value {t!r}") from exc
        out.append(int(v) if param in ("h", "batch") else v)
    return out


def run_sweep(cfg, param: str, grid_text: str) -> str:
    if param not in SWEEPS:
        raise ConfigError(f"unknown sweep parameter {param!r}; choose from {', '.join(SWEEPS)}")
    grid = parse_grid(grid_text, param, C.backbone_config(cfg).feature_dim)
    if param in ("h", "beta") and cfg["fd"] is None:
        cfg = _variant(cfg, "fd", _fd_defaults(cfg))
    root = os.path.join(_root(cfg), f"sweep-{param}")
    _prepare(root, cfg)
    key = SWEEPS[param]
    rows = []
    shared = None
    if param in ("h", "beta"):
        shared = os.path.join(root, "student")
        run_distill(cfg, shared)
    for value in grid:
        vcfg = _variant(cfg, key, value)
        vdir = os.path.join(root, f"{param}={value}")
        split = _load_split(vcfg)
        if shared is None:
            run_distill(vcfg, vdir, split)
            student = os.path.join(vdir, "student.ckpt")
        else:
            student = os.path.join(shared, "student.ckpt")
        _, rec = run_eval(vcfg, student, vdir, split)
        row = _row("sweep", f"{param}={value}", rec, cfg, vcfg)
        row = {"param": param, "value": value, **{k: v for k, v in row.items() if k not in ("study", "variant")}}
        rows.append(row)
    path = os.path.join(_root(cfg), f"sweep-{param}.csv")
    _write_rows(path, rows)
    return path


# --- argument handling --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cldfd", description=__doc__.split("\n")[0], allow_abbrev=False)
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "pretrain", "distill", "eval", "ablate", "sweep"):
        sp = sub.add_parser(name, allow_abbrev=False)
        sp.add_argument("--config", help="JSON config file (e.g. an echoed config.json)")
        sp.add_argument("--output-dir", help=f"output root (default ${C.OUTPUT_ROOT_ENV} or ./runs)")
        if name == "ablate":
            sp.add_argument("study", help="|".join(ABLATIONS))
        if name == "sweep":
            sp.add_argument("param", help="|".join(SWEEPS))
            sp.add_argument("--grid", required=True, help="comma-separated values; 'D_L' means the feature dimension for h")
    return p


def _resolve(args, extra: List[str]):
    overrides = []
    for key, value in C.parse_overrides(extra):
        overrides.append((ALIASES.get(key, key), value))
    if args.output_dir:
        overrides.append(("output_dir", args.output_dir))
    return C.resolve(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args, extra)
        print(json.dumps(cfg, sort_keys=True))
        if args.command == "gen-data":
            out = run_gen_data(cfg)
        elif args.command == "pretrain":
            out = run_pretrain(cfg)
        elif args.command == "distill":
            out = run_distill(cfg)
        elif args.command == "eval":
            out, _ = run_eval(cfg)
        elif args.command == "ablate":
            out = run_ablate(cfg, args.study)
        else:
            out = run_sweep(cfg, args.param, args.grid)
    except MissingArtifactError as exc:
        logger.error("%s", exc)
        return 4
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return 2
    except (ContainerError, OSError) as exc:
        logger.error("I/O error: %s", exc)
        return 3
    except CLDError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
    logger.info("done: %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
