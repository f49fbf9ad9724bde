"""Command-line entry point: staged training, CSM building, evaluation,
ablations, the confusing-degree sweep, and figure export.

Commands compose through checkpoints inside one run directory. Reruns of a
command sequence into a fresh directory are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, nets, trainer
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    FingerprintMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from .csm import load_csm, save_csm
from .data import generate_confusable_dataset, load_dataset_csv, save_dataset_csv
from .runconfig import ConfigError, RunConfig, load_run_config
from .trainer import STAGE_JOINT, STAGE_SPECIFIC, STAGE_UNIVERSAL

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

_STAGE_BY_FLAG = {
    "universal": STAGE_UNIVERSAL,
    "specific": STAGE_SPECIFIC,
    "joint": STAGE_JOINT,
}


def _load_data(cfg: RunConfig):
    if cfg.dataset_kind == "csv":
        train = load_dataset_csv(cfg.train_csv, cfg.dataset.grid, cfg.dataset.num_classes)
        test = load_dataset_csv(cfg.test_csv, cfg.dataset.grid, cfg.dataset.num_classes)
        return train, test
    return generate_confusable_dataset(cfg.dataset)


def _write_history(run_dir: Path, records: list[dict]) -> None:
    with open(run_dir / "history.jsonl", "a", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _model_from_checkpoint(cfg: RunConfig, ckpt: Checkpoint) -> nets.U2sModel:
    model = nets.init_model(cfg.model)
    nets.load_parameters(model, ckpt.params)
    return model


def _load_verified(cfg: RunConfig, path, force: bool) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.fingerprint != cfg.fingerprint():
        if force:
            logger.warning("fingerprint mismatch for %s ignored (--force)", path)
        else:
            raise FingerprintMismatchError(
                f"{path} was trained under a different configuration "
                f"({ckpt.fingerprint[:12]}... vs {cfg.fingerprint()[:12]}...); pass --force to use it"
            )
    return ckpt


def _save_stage(cfg: RunConfig, model: nets.U2sModel, stage: str, csm, opt_placeholder=None) -> Path:
    from .autodiff import OptimizerState

    path = cfg.run_dir / f"ck_{stage}.bin"
    save_checkpoint(
        path,
        Checkpoint(
            fingerprint=cfg.fingerprint(),
            stage=stage,
            params=nets.copy_parameters(model),
            optimizer=opt_placeholder
            or OptimizerState(
                learning_rate=cfg.train.stage_lr,
                momentum=cfg.train.momentum,
                weight_decay=cfg.train.weight_decay,
            ),
            csm=csm,
            class_names=cfg.class_names if csm is not None else [],
        ),
    )
    return path


def cmd_gen_data(cfg: RunConfig, args) -> int:
    if cfg.dataset_kind != "synthetic":
        raise ValueError("gen-data requires dataset.kind = 'synthetic'")
    out = Path(args.dir) if args.dir else cfg.run_dir / "data"
    out.mkdir(parents=True, exist_ok=True)
    train, test = generate_confusable_dataset(cfg.dataset)
    save_dataset_csv(out / "train.csv", train)
    save_dataset_csv(out / "test.csv", test)
    print(json.dumps({"train": str(out / "train.csv"), "test": str(out / "test.csv"),
                      "train_samples": len(train), "test_samples": len(test)}))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    train, test = _load_data(cfg)
    stages = ("universal", "specific", "joint") if args.stage == "all" else (args.stage,)

    if stages[0] == "universal":
        model = nets.init_model(cfg.model)
        csm = None
    else:
        prev = "ck_universal.bin" if stages[0] == "specific" else "ck_specific.bin"
        ckpt = _load_verified(cfg, cfg.run_dir / prev, args.force)
        model = _model_from_checkpoint(cfg, ckpt)
        csm = ckpt.csm
        if csm is None:
            csm_path = cfg.run_dir / "csm.json"
            if not csm_path.exists():
                raise FileNotFoundError(
                    f"stage '{stages[0]}' needs a frozen CSM; run build-csm first (missing {csm_path})"
                )
            csm, _ = load_csm(csm_path)

    for stage_flag in stages:
        stage = _STAGE_BY_FLAG[stage_flag]
        if stage != STAGE_UNIVERSAL and csm is None:
            raise FileNotFoundError("no CSM available; run build-csm after the universal stage")
        history = trainer.train_stage(model, train, test, cfg.train, stage, csm=csm)
        _write_history(cfg.run_dir, history)
        if stage == STAGE_UNIVERSAL and args.stage == "all":
            csm = trainer.compute_csm(model, train, cfg.train)
            save_csm(cfg.run_dir / "csm.json", csm, cfg.class_names)
        _save_stage(cfg, model, stage_flag, csm)
        print(json.dumps({"stage": stage_flag, "checkpoint": str(cfg.run_dir / f"ck_{stage_flag}.bin"),
                          "final_val_top1": history[-1]["val_top1"]}))
    return EXIT_OK


def cmd_build_csm(cfg: RunConfig, args) -> int:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = _load_verified(cfg, Path(args.checkpoint), args.force)
    model = _model_from_checkpoint(cfg, ckpt)
    train, _ = _load_data(cfg)
    csm = trainer.compute_csm(model, train, cfg.train)
    out = Path(args.out) if args.out else cfg.run_dir / "csm.json"
    save_csm(out, csm, cfg.class_names)
    print(json.dumps({"csm": str(out), "alpha": csm.alpha,
                      "mean_degree": float(csm.C_bin.sum() - csm.num_classes) / csm.num_classes}))
    return EXIT_OK


def _eval_heads(cfg: RunConfig, model, csm, test):
    inputs, labels = trainer.evaluation_inputs(test, cfg.model.input_grid[0])
    probs = trainer.head_probabilities(model, inputs, csm, csm_mode=cfg.train.csm_mode)
    return inputs, labels, probs


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt = _load_verified(cfg, Path(args.checkpoint), args.force)
    model = _model_from_checkpoint(cfg, ckpt)
    _, test = _load_data(cfg)
    _, labels, probs = _eval_heads(cfg, model, ckpt.csm, test)
    report: dict = {"checkpoint": str(args.checkpoint), "stage": ckpt.stage, "heads": {}}
    for name, p in probs.items():
        r = trainer.evaluate_metrics(p, labels)
        report["heads"][name] = {"top1": r.top1, "top5": r.top5}
    if ckpt.csm is not None:
        fused = trainer.fused_probabilities(probs, cfg.train.fusion_set, cfg.train.fusion_space)
        r = trainer.evaluate_metrics(fused, labels)
        report["fused"] = {
            "heads": list(cfg.train.fusion_set),
            "top1": r.top1,
            "top5": r.top5,
            "per_class_top1": [float(v) for v in r.per_class_top1],
            "confusion": r.confusion.tolist(),
        }
    text = json.dumps(report, sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_ablate_fusion(cfg: RunConfig, args) -> int:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = _load_verified(cfg, Path(args.checkpoint), args.force)
    if ckpt.csm is None:
        raise ValueError("ablate-fusion needs a checkpoint that carries a CSM (train through stage 2)")
    model = _model_from_checkpoint(cfg, ckpt)
    _, test = _load_data(cfg)
    _, labels, probs = _eval_heads(cfg, model, ckpt.csm, test)

    rows = []
    if args.baseline:
        base = _load_verified(cfg, Path(args.baseline), args.force)
        base_model = _model_from_checkpoint(cfg, base)
        _, _, base_probs = _eval_heads(cfg, base_model, None, test)
        r = trainer.evaluate_metrics(base_probs["universal"], labels)
        rows.append(("one_pass", 0, 0, 0, r.top1, r.top5))
    combos = [
        (u, b, s)
        for u in (1, 0)
        for b in (1, 0)
        for s in (1, 0)
        if (u, b, s) != (0, 0, 0)
    ]
    for u, b, s in sorted(combos, key=lambda c: (sum(c), c), reverse=False):
        heads = [name for flag, name in zip((u, b, s), trainer.HEADS) if flag]
        fused = trainer.fused_probabilities(probs, heads, cfg.train.fusion_space)
        r = trainer.evaluate_metrics(fused, labels)
        rows.append(("+".join(heads), u, b, s, r.top1, r.top5))

    out = Path(args.out) if args.out else cfg.run_dir / "fusion_table.csv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("method,universal,bridge,specific,top1,top5\n")
        for name, u, b, s, top1, top5 in rows:
            fh.write(f"{name},{u},{b},{s},{analysis._fmt(top1)},{analysis._fmt(top5)}\n")
    print(json.dumps({"table": str(out), "rows": len(rows)}))
    return EXIT_OK


def cmd_ablate_reg(cfg: RunConfig, args) -> int:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = _load_verified(cfg, Path(args.checkpoint), args.force)
    model_stage1 = _model_from_checkpoint(cfg, ckpt)
    train, test = _load_data(cfg)
    csm = ckpt.csm
    if csm is None:
        csm = trainer.compute_csm(model_stage1, train, cfg.train)
    stage1_params = nets.copy_parameters(model_stage1)
    inputs, labels = trainer.evaluation_inputs(test, cfg.model.input_grid[0])

    from .masknet import mean_selected_weight_similarity
    from .trainer import TrainConfig

    rows = []
    for lam in (cfg.train.reg_lambda, 0.0):
        model = nets.init_model(cfg.model)
        nets.load_parameters(model, stage1_params)
        tcfg = TrainConfig(**{**cfg.train.__dict__, "reg_lambda": lam})
        trainer.train_stage(model, train, test, tcfg, STAGE_SPECIFIC, csm=csm)
        trainer.train_stage(model, train, test, tcfg, STAGE_JOINT, csm=csm)
        probs = trainer.head_probabilities(model, inputs, csm, csm_mode=tcfg.csm_mode)
        fused = trainer.fused_probabilities(probs, tcfg.fusion_set, tcfg.fusion_space)
        r = trainer.evaluate_metrics(fused, labels)
        sw = mean_selected_weight_similarity(
            model.mask_head.weight.data, csm, cfg.train.weight_similarity
        )
        rows.append((lam, r.top1, r.top5, sw))

    out = Path(args.out) if args.out else cfg.run_dir / "reg_table.csv"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("reg_lambda,top1,top5,mean_selected_weight_similarity\n")
        for lam, top1, top5, sw in rows:
            fh.write(f"{analysis._fmt(lam)},{analysis._fmt(top1)},{analysis._fmt(top5)},{analysis._fmt(sw)}\n")
    print(json.dumps({"table": str(out)}))
    return EXIT_OK


def cmd_sweep_n(cfg: RunConfig, args) -> int:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = _load_verified(cfg, Path(args.checkpoint), args.force)
    model = _model_from_checkpoint(cfg, ckpt)
    train, test = _load_data(cfg)
    degrees = [float(v) for v in args.values.split(",") if v.strip()]
    if not degrees:
        raise ValueError("sweep-n needs at least one value in --values")
    rows = analysis.sweep_target_degree(
        cfg.model, cfg.train, nets.copy_parameters(model), train, test, degrees
    )
    out = Path(args.out) if args.out else cfg.run_dir / "sweep_n.csv"
    analysis.write_sweep_csv(out, rows)
    print(json.dumps({"table": str(out), "rows": len(rows)}))
    return EXIT_OK


def cmd_export_figures(cfg: RunConfig, args) -> int:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    ckpt = _load_verified(cfg, Path(args.checkpoint), args.force)
    if ckpt.csm is None:
        raise ValueError("export-figures needs a checkpoint that carries a CSM")
    model = _model_from_checkpoint(cfg, ckpt)
    one_pass = None
    if args.baseline:
        base = _load_verified(cfg, Path(args.baseline), args.force)
        one_pass = _model_from_checkpoint(cfg, base)
    sources = [s.strip() for s in args.sources.split(",")] if args.sources else (
        list(analysis.SOURCES) if one_pass is not None else [s for s in analysis.SOURCES if s != "one_pass"]
    )
    for source in sources:
        if source not in analysis.SOURCES:
            raise ValueError(f"unknown source {source!r}; expected subset of {analysis.SOURCES}")
        if source == "one_pass" and one_pass is None:
            raise ValueError("source 'one_pass' needs --baseline pointing at the stage-1 checkpoint")

    _, test = _load_data(cfg)
    inputs, labels = trainer.evaluation_inputs(test, cfg.model.input_grid[0])
    bundles = analysis.collect_source_inputs(
        model, one_pass, inputs, labels, ckpt.csm, cfg.train, sources=sources
    )
    per_source = {
        source: analysis.scatter_records(
            source, feats, labels, per_class, cfg.class_names, metric=cfg.train.csm_metric
        )
        for source, (feats, per_class) in bundles.items()
    }
    correlations = analysis.export_similarity_scatter(cfg.run_dir, per_source)
    analysis.export_weight_similarity(
        cfg.run_dir, model.mask_head, ckpt.csm, cfg.class_names, kind=cfg.train.weight_similarity
    )
    sample_ids = [int(v) for v in args.samples.split(",")] if args.samples else list(range(min(4, len(test))))
    classes = [int(v) for v in args.classes.split(",")] if args.classes else list(
        range(min(4, cfg.model.num_classes))
    )
    for sid in sample_ids:
        if not 0 <= sid < len(test):
            raise ValueError(f"sample id {sid} out of range [0, {len(test)})")
    records = analysis.export_mask_heatmaps(
        cfg.run_dir,
        model,
        inputs[sample_ids],
        sample_ids,
        classes,
        ckpt.csm,
        csm_mode=cfg.train.csm_mode,
    )
    print(json.dumps({
        "run_dir": str(cfg.run_dir),
        "correlations": correlations,
        "heatmap_records": len(records),
    }, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="u2s",
        description="Train and analyze a universal-to-specific classifier on confusable-pair data.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the run TOML")
        p.add_argument("--force", action="store_true", help="ignore checkpoint fingerprint mismatches")
        p.set_defaults(fn=fn)
        return p

    add("gen-data", cmd_gen_data, "write the synthetic dataset as CSV").add_argument(
        "--dir", help="output directory (default: <run>/data)"
    )
    p = add("train", cmd_train, "train one stage (or all) and write checkpoints")
    p.add_argument("--stage", choices=("universal", "specific", "joint", "all"), default="all")
    p = add("build-csm", cmd_build_csm, "compute and freeze the similarity matrix")
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--out", help="output JSON path (default: <run>/csm.json)")
    p = add("eval", cmd_eval, "evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="also write the report JSON here")
    p = add("ablate-fusion", cmd_ablate_fusion, "emit the 7-row head-combination table")
    p.add_argument("--checkpoint", required=True, help="joint (or stage-2) checkpoint")
    p.add_argument("--baseline", help="stage-1 checkpoint for the one-pass row")
    p.add_argument("--out")
    p = add("ablate-reg", cmd_ablate_reg, "compare the configured regularizer weight against 0")
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint to branch from")
    p.add_argument("--out")
    p = add("sweep-n", cmd_sweep_n, "retrain stages 2-3 per target confusing degree")
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--values", required=True, help="comma-separated degrees, e.g. 1,2,3")
    p.add_argument("--out")
    p = add("export-figures", cmd_export_figures, "write scatter/weights/mask data and SVGs")
    p.add_argument("--checkpoint", required=True, help="joint checkpoint")
    p.add_argument("--baseline", help="stage-1 checkpoint (enables the one_pass source)")
    p.add_argument("--sources", help="comma-separated subset of one_pass,universal,specific,u2s")
    p.add_argument("--samples", help="comma-separated test sample ids for mask heatmaps")
    p.add_argument("--classes", help="comma-separated class ids for mask heatmaps")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_run_config(args.config)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(json.dumps({"error": "config", "message": f"config file not found: {exc.filename}"}),
              file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(cfg, args)
    except (CheckpointError, FileNotFoundError, ValueError, RuntimeError) as exc:
        detail = getattr(exc, "filename", None)
        message = f"{exc} ({detail})" if detail and str(detail) not in str(exc) else str(exc)
        print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
