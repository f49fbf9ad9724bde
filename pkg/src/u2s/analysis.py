"""Diagnostic exporters: similarity-vs-accuracy scatter, weight-similarity
matrix and histogram, mask heatmaps, and the confusing-degree sweep.

Every exporter writes CSV/JSON data plus an SVG rendering into a run
directory; all floats are written with repr so the files round-trip
losslessly. Everything here is read-only over trained models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nets, svgplot
from .csm import Csm, category_signatures, interclass_similarity_vector, similarity_matrix
from .data import Sample
from .masknet import combine_masks_for_prediction, generate_category_masks, weight_similarity_matrix
from .trainer import (
    HEADS,
    TrainConfig,
    evaluate_metrics,
    evaluation_inputs,
    fused_probabilities,
    head_probabilities,
    train_stage,
    STAGE_JOINT,
    STAGE_SPECIFIC,
)

SOURCES = ("one_pass", "universal", "specific", "u2s")


@dataclass
class ScatterRecord:
    class_index: int
    class_name: str
    similarity: float
    top1: float
    source: str


@dataclass
class HeatmapRecord:
    sample_id: int
    category: str  # class index as text, or "combined"
    frame: int
    grid: np.ndarray  # (H', W') values in [0, 1]


def _fmt(x: float) -> str:
    return repr(float(x))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.std() == 0.0 or y.std() == 0.0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


# ---------------------------------------------------------------------------
# feature collection per source


def _batched_forward(model, inputs, fn, batch=100):
    outs = []
    for s in range(0, inputs.shape[0], batch):
        outs.append(fn(model, inputs[s : s + batch]))
    return np.concatenate(outs)


def _universal_features(model, inputs):
    return _batched_forward(model, inputs, lambda m, x: nets.forward_universal(m, x)[0].data)


def _masked_features(model, inputs, csm: Csm, csm_mode: str):
    def fn(m, x):
        bottom = nets.forward_bottom(m, x)
        feats, logits = nets.forward_universal_from(m, bottom)
        masks = generate_category_masks(feats, m.mask_head)
        predicted = np.argmax(logits.data, axis=1)
        gate = combine_masks_for_prediction(masks, predicted, csm, mode=csm_mode)
        return nets.masked_specific_features(m, bottom, gate).data

    return _batched_forward(model, inputs, fn)


def collect_source_inputs(
    model: nets.U2sModel,
    one_pass_model: nets.U2sModel | None,
    inputs: np.ndarray,
    labels: np.ndarray,
    csm: Csm,
    config: TrainConfig,
    sources=SOURCES,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per source: (per-sample feature maps, per-class top-1 of its head)."""
    probs = head_probabilities(model, inputs, csm, csm_mode=config.csm_mode)
    out: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for source in sources:
        if source == "one_pass":
            if one_pass_model is None:
                raise ValueError("one_pass source requested but no stage-1 model is available")
            feats = _universal_features(one_pass_model, inputs)
            head = head_probabilities(one_pass_model, inputs, None)["universal"]
        elif source == "universal":
            feats = _universal_features(model, inputs)
            head = probs["universal"]
        elif source == "specific":
            feats = _masked_features(model, inputs, csm, config.csm_mode)
            head = probs["specific"]
        elif source == "u2s":
            feats = np.concatenate(
                [_universal_features(model, inputs), _masked_features(model, inputs, csm, config.csm_mode)],
                axis=2,
            )
            head = fused_probabilities(probs, config.fusion_set, config.fusion_space)
        else:
            raise ValueError(f"unknown scatter source {source!r}")
        per_class = evaluate_metrics(head, labels).per_class_top1
        out[source] = (feats, per_class)
    return out


def scatter_records(
    source: str,
    features: np.ndarray,
    labels: np.ndarray,
    per_class_top1: np.ndarray,
    class_names: list[str],
    metric: str = "cosine",
) -> list[ScatterRecord]:
    sigs = category_signatures(
        [features[i] for i in range(features.shape[0])], labels, len(class_names)
    )
    vec = interclass_similarity_vector(similarity_matrix(sigs, metric=metric))
    return [
        ScatterRecord(
            class_index=m,
            class_name=class_names[m],
            similarity=float(vec[m]),
            top1=float(per_class_top1[m]),
            source=source,
        )
        for m in range(len(class_names))
    ]


def export_similarity_scatter(
    run_dir,
    per_source: dict[str, list[ScatterRecord]],
) -> dict[str, float]:
    """Write scatter_<source>.csv + figures/scatter_<source>.svg; return the
    per-source Pearson correlation (also written to scatter_correlations.json)."""
    run_dir = Path(run_dir)
    (run_dir / "figures").mkdir(parents=True, exist_ok=True)
    correlations: dict[str, float] = {}
    for source, records in per_source.items():
        with open(run_dir / f"scatter_{source}.csv", "w", encoding="utf-8") as fh:
            fh.write("class_index,class_name,similarity,top1,source\n")
            for r in records:
                fh.write(f"{r.class_index},{r.class_name},{_fmt(r.similarity)},{_fmt(r.top1)},{r.source}\n")
        correlations[source] = pearson([r.similarity for r in records], [r.top1 for r in records])
        svg = svgplot.scatter_svg(
            {source: [(r.similarity, r.top1) for r in records]},
            title=f"interclass similarity vs accuracy ({source})",
            x_label="avg interclass similarity",
            y_label="per-class top-1",
        )
        (run_dir / "figures" / f"scatter_{source}.svg").write_text(svg, encoding="utf-8")
    with open(run_dir / "scatter_correlations.json", "w", encoding="utf-8") as fh:
        json.dump(correlations, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return correlations


def export_weight_similarity(
    run_dir,
    head,
    csm: Csm | None,
    class_names: list[str],
    bins: int = 20,
    kind: str = "affine_cos",
) -> tuple[np.ndarray, np.ndarray]:
    """Full column-similarity matrix (classes sorted by name) plus histogram."""
    run_dir = Path(run_dir)
    (run_dir / "figures").mkdir(parents=True, exist_ok=True)
    s_w, _, _ = weight_similarity_matrix(head.weight.data, kind)
    order = sorted(range(len(class_names)), key=lambda m: class_names[m])
    sorted_names = [class_names[m] for m in order]
    s_sorted = s_w[np.ix_(order, order)]

    with open(run_dir / "weights_sim.csv", "w", encoding="utf-8") as fh:
        fh.write("class," + ",".join(sorted_names) + "\n")
        for i, name in enumerate(sorted_names):
            fh.write(name + "," + ",".join(_fmt(v) for v in s_sorted[i]) + "\n")

    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(s_w.reshape(-1), bins=edges)
    with open(run_dir / "weights_hist.csv", "w", encoding="utf-8") as fh:
        fh.write("bin_lo,bin_hi,count\n")
        for i in range(bins):
            fh.write(f"{_fmt(edges[i])},{_fmt(edges[i + 1])},{int(counts[i])}\n")

    (run_dir / "figures" / "weights_sim.svg").write_text(
        svgplot.matrix_svg(s_sorted, sorted_names, "mask-head weight similarity"), encoding="utf-8"
    )
    (run_dir / "figures" / "weights_hist.svg").write_text(
        svgplot.histogram_svg(edges, counts, "weight similarity histogram", "similarity"),
        encoding="utf-8",
    )
    return s_sorted, counts


def export_mask_heatmaps(
    run_dir,
    model: nets.U2sModel,
    inputs: np.ndarray,
    sample_ids: list[int],
    classes: list[int],
    csm: Csm,
    csm_mode: str = "binary",
) -> list[HeatmapRecord]:
    """Per (sample, class): the activated class mask; plus the combined
    prediction-time mask per sample. Values are raw sigmoid outputs."""
    run_dir = Path(run_dir)
    masks_dir = run_dir / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "figures").mkdir(parents=True, exist_ok=True)
    m_classes = model.config.num_classes
    for cls in classes:
        if not 0 <= cls < m_classes:
            raise ValueError(f"invalid class index {cls} for {m_classes} classes")

    bottom = nets.forward_bottom(model, inputs)
    feats, logits = nets.forward_universal_from(model, bottom)
    masks = generate_category_masks(feats, model.mask_head)
    predicted = np.argmax(logits.data, axis=1)
    combined = combine_masks_for_prediction(masks, predicted, csm, mode=csm_mode)

    records: list[HeatmapRecord] = []
    panels: list[tuple[str, np.ndarray]] = []
    for row, sid in enumerate(sample_ids):
        per_sample: list[tuple[str, np.ndarray]] = []
        for cls in classes:
            grid = masks.activated.data[row, :, cls]
            per_sample.append((str(cls), grid))
        per_sample.append(("combined", combined.data[row, :, 0]))
        for name, grid in per_sample:
            path = masks_dir / f"{sid}_{name}.csv"
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("sample,category,frame,row,col,value\n")
                for t in range(grid.shape[0]):
                    records.append(
                        HeatmapRecord(sample_id=sid, category=name, frame=t, grid=grid[t])
                    )
                    for r in range(grid.shape[1]):
                        for c in range(grid.shape[2]):
                            fh.write(f"{sid},{name},{t},{r},{c},{_fmt(grid[t, r, c])}\n")
            for t in range(grid.shape[0]):
                panels.append((f"s{sid} c{name} t{t}", grid[t]))
    (run_dir / "figures" / "masks.svg").write_text(
        svgplot.heatmap_grid_svg(panels, "category masks", cols=max(1, len(classes) + 1)),
        encoding="utf-8",
    )
    return records


def sweep_target_degree(
    model_config: nets.ModelConfig,
    train_config: TrainConfig,
    stage1_params: dict[str, np.ndarray],
    train_samples: list[Sample],
    test_samples: list[Sample],
    degrees,
) -> list[tuple[float, float, float]]:
    """Retrain stages 2 and 3 from the same stage-1 parameters once per target
    degree; returns (degree, top1, top5) rows for the fused prediction."""
    from .trainer import compute_csm  # local import to keep module load light

    rows: list[tuple[float, float, float]] = []
    inputs, labels = evaluation_inputs(test_samples, model_config.input_grid[0])
    for degree in degrees:
        model = nets.init_model(model_config)
        nets.load_parameters(model, stage1_params)
        cfg = TrainConfig(**{**train_config.__dict__, "target_degree": float(degree)})
        csm = compute_csm(model, train_samples, cfg)
        train_stage(model, train_samples, test_samples, cfg, STAGE_SPECIFIC, csm=csm)
        train_stage(model, train_samples, test_samples, cfg, STAGE_JOINT, csm=csm)
        probs = head_probabilities(model, inputs, csm, csm_mode=cfg.csm_mode)
        fused = fused_probabilities(probs, cfg.fusion_set, cfg.fusion_space)
        report = evaluate_metrics(fused, labels)
        rows.append((float(degree), report.top1, report.top5))
    return rows


def write_sweep_csv(path, rows: list[tuple[float, float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("target_degree,top1,top5\n")
        for degree, top1, top5 in rows:
            fh.write(f"{_fmt(degree)},{_fmt(top1)},{_fmt(top5)}\n")
