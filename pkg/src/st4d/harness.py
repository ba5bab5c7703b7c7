"""Training schedule, probe metrics, ablation matrix, and reports.

A run trains on instruction pairs from a few generated scenes and is
scored on pairs from held-out scenes: spatial accuracy is the fraction of
QA answers whose predicted centroid lands within 0.5 normalized units,
temporal accuracy the fraction of grounding answers in the correct frame
bin, and the combined score their mean. Ablation tables rerun the same
seed set with exactly one flag flipped per cell.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, config_hash
from .numerics import Array, FdReport, ParamStore, Rng, adam_step, fd_check
from .pipeline import Model, Pair, SceneData, build_scene_data
from .scenesim import SceneTruth

SACC_DISTANCE = 0.5  # normalized units


class ConfigError(ValueError):
    """Semantically invalid experiment configuration."""


# ---------------------------------------------------------------------------
# Cluster metrics
# ---------------------------------------------------------------------------


def compute_silhouette(features: Array, labels) -> float:
    """Mean silhouette coefficient with Euclidean distance.

    Requires at least two labels with at least two members each; anything
    less leaves the score undefined and raises.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ValueError(
            "silhouette undefined: need >= 2 labels with >= 2 members each")
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    dist = np.sqrt(np.clip(d2, 0.0, None))
    n = len(x)
    scores = np.empty(n)
    masks = {u: labels == u for u in uniq}
    for i in range(n):
        own = masks[labels[i]]
        a = dist[i, own].sum() / (own.sum() - 1)
        b = min(dist[i, masks[u]].mean() for u in uniq if u != labels[i])
        scores[i] = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    return float(scores.mean())


def nearest_centroid_accuracy(features: Array, labels) -> float:
    """Two-fold nearest-centroid classification accuracy (deterministic folds)."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    folds = np.arange(len(x)) % 2
    accs = []
    for hold in (0, 1):
        train = folds != hold
        test = ~train
        if not test.any():
            continue
        cents, names = [], []
        for u in uniq:
            m = train & (labels == u)
            if m.any():
                cents.append(x[m].mean(axis=0))
                names.append(u)
        if len(cents) < 2:
            continue
        cents = np.stack(cents)
        d = ((x[test][:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
        pred = np.array(names)[np.argmin(d, axis=1)]
        accs.append(float((pred == labels[test]).mean()))
    return float(np.mean(accs)) if accs else float("nan")


# ---------------------------------------------------------------------------
# Run data and training
# ---------------------------------------------------------------------------


@dataclass
class RunData:
    train_scenes: list[SceneData]
    eval_scenes: list[SceneData]


def build_run_data(config: ExperimentConfig, seed: int) -> RunData:
    rng = Rng(seed)
    train = [build_scene_data(config, rng.child_seed(f"train-scene-{i}"))
             for i in range(config.n_train_scenes)]
    evals = [build_scene_data(config, rng.child_seed(f"eval-scene-{i}"))
             for i in range(config.n_eval_scenes)]
    return RunData(train_scenes=train, eval_scenes=evals)


def _frozen_digest(params: ParamStore) -> str:
    doc = {n: [repr(float(v)) for v in params.params[n].ravel()]
           for n in sorted(params.frozen)}
    return hashlib.sha256(json.dumps(doc).encode()).hexdigest()


@dataclass
class TrainLog:
    stage_losses: list = field(default_factory=list)
    stage_records: list = field(default_factory=list)
    data: RunData = None
    model: Model = None


def run_stage_schedule(config: ExperimentConfig, seed: int | None = None,
                       data: RunData | None = None) -> tuple[ParamStore, TrainLog]:
    """Train through the configured stage schedule.

    Each stage freezes everything outside its parameter groups, optionally
    zeroes the 4D prompt, and trains on its task families. Frozen
    parameters are digest-checked across the stage; the digests land in
    the returned log.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    rng = Rng(seed)
    if data is None:
        data = build_run_data(config, seed)
    params = Model.init_params(config, rng)
    model = Model(config, params)
    data_rng = rng.split("data")
    log = TrainLog(data=data, model=model)
    step_global = 0
    for si, stage in enumerate(config.stages):
        params.freeze_all_except(stage.unfreeze)
        pools = [[p for p in sc.pairs if p.task in stage.tasks]
                 for sc in data.train_scenes]
        if not any(pools):
            raise ConfigError(f"stage {si} has no training pairs for tasks {stage.tasks}")
        digest_before = _frozen_digest(params)
        losses = []
        for _ in range(stage.steps):
            scene_idx = int(data_rng.integers(0, len(data.train_scenes)))
            cand = pools[scene_idx]
            if not cand:
                continue
            order = data_rng.permutation(len(cand))
            batch = [cand[i] for i in order[:config.batch_size]]
            params.zero_grads()
            loss = model.batch_step(data.train_scenes[scene_idx], batch,
                                    zero_prompt=stage.zero_prompt)
            step_global += 1
            adam_step(params, config.lr, config.betas, step_global,
                      weight_decay=config.weight_decay)
            losses.append(loss)
        log.stage_losses.append(losses)
        log.stage_records.append({
            "stage": si,
            "steps": stage.steps,
            "tasks": list(stage.tasks),
            "unfrozen_groups": list(stage.unfreeze),
            "n_frozen": len(params.frozen),
            "zero_prompt": stage.zero_prompt,
            "frozen_digest_before": digest_before,
            "frozen_digest_after": _frozen_digest(params),
        })
    return params, log


def grounding_probe(model: Model, tau_v: Array, tau_l: Array):
    """Predict a normalized (x, y, z) and a frame bin from projected tokens."""
    pred, logits, _ = model.probe_forward(tau_v, tau_l)
    return pred, int(np.argmax(logits))


def eval_feature_sets(model: Model, scenes):
    """Concatenated per-stage features and dynamic/static labels over scenes."""
    feats = {"raw": [], "disentangled": [], "fused": []}
    labels = []
    for sc in scenes:
        st = model.scene_forward(sc)
        labs = sc.truth.token_labels()
        keep = labs != SceneTruth.LABEL_EMPTY
        feats["raw"].append(st.f[keep])
        feats["disentangled"].append(np.concatenate([st.f_s, st.f_t], axis=1)[keep])
        feats["fused"].append(st.f_st[keep])
        labels.append(labs[keep])
    return {k: np.concatenate(v) for k, v in feats.items()}, np.concatenate(labels)


def evaluate(model: Model, data: RunData) -> dict:
    """Probe accuracies on held-out scenes plus feature-stage silhouettes."""
    sacc_hits, tacc_hits = [], []
    for sc in data.eval_scenes:
        state = model.scene_forward(sc)
        for pair in sc.pairs:
            pred_xyz, pred_bin = model.predict(state, pair)
            if pair.task == "qa" and pair.target_xyz is not None:
                err = float(np.linalg.norm(pred_xyz - pair.target_xyz))
                sacc_hits.append(err < SACC_DISTANCE)
            elif pair.task == "grounding" and pair.target_bin is not None:
                tacc_hits.append(pred_bin == pair.target_bin)
    sacc = float(np.mean(sacc_hits)) if sacc_hits else float("nan")
    tacc = float(np.mean(tacc_hits)) if tacc_hits else float("nan")
    feats, labels = eval_feature_sets(model, data.eval_scenes)
    sils = {}
    for stage_name, x in feats.items():
        try:
            sils[stage_name] = compute_silhouette(x, labels)
        except ValueError:
            sils[stage_name] = float("nan")
    return {
        "sacc": sacc,
        "tacc": tacc,
        "combined": (sacc + tacc) / 2.0,
        "dynamic_token_accuracy": nearest_centroid_accuracy(feats["fused"], labels),
        "silhouette_raw": sils["raw"],
        "silhouette_disentangled": sils["disentangled"],
        "silhouette_fused": sils["fused"],
        "n_sacc_pairs": len(sacc_hits),
        "n_tacc_pairs": len(tacc_hits),
    }


MEAN_KEYS = ("sacc", "tacc", "combined", "dynamic_token_accuracy",
             "silhouette_raw", "silhouette_disentangled", "silhouette_fused")


@dataclass
class MetricsReport:
    """Per-seed and mean metrics for one configuration.

    ``wall_clock_s`` is informational and excluded from the determinism
    contract; everything under ``per_seed`` and ``means`` is reproducible
    from (config hash, seed).
    """

    config_hash: str
    config: dict
    seeds: list
    per_seed: list
    means: dict
    wall_clock_s: float = 0.0

    def numeric_fields(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seeds": list(self.seeds),
            "per_seed": self.per_seed,
            "means": self.means,
        }

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "config": self.config,
            "seeds": list(self.seeds),
            "per_seed": self.per_seed,
            "means": self.means,
            "wall_clock_s": self.wall_clock_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(config_hash=d["config_hash"], config=d["config"],
                   seeds=d["seeds"], per_seed=d["per_seed"], means=d["means"],
                   wall_clock_s=d.get("wall_clock_s", 0.0))


def train_and_evaluate(config: ExperimentConfig, seed: int) -> dict:
    """One full training run and its evaluation metrics."""
    params, log = run_stage_schedule(config, seed)
    metrics = evaluate(log.model, log.data)
    metrics["seed"] = seed
    metrics["stage_final_losses"] = [ls[-1] if ls else float("nan")
                                     for ls in log.stage_losses]
    metrics["stage_losses"] = log.stage_losses
    return metrics


def run_experiment(config: ExperimentConfig, seeds, cache: dict | None = None) -> MetricsReport:
    """Train/evaluate over seeds and aggregate means.

    ``cache`` maps (config_hash, seed) -> per-seed metrics so grids that
    share cells (the full configuration appears in every table) train once.
    """
    t0 = time.time()
    chash = config_hash(config)
    per_seed = []
    for seed in seeds:
        key = (chash, seed)
        if cache is not None and key in cache:
            per_seed.append(cache[key])
            continue
        metrics = train_and_evaluate(config, seed)
        if cache is not None:
            cache[key] = metrics
        per_seed.append(metrics)
    means = {k: float(np.mean([m[k] for m in per_seed])) for k in MEAN_KEYS}
    return MetricsReport(config_hash=chash, config=config.to_dict(),
                         seeds=list(seeds), per_seed=per_seed, means=means,
                         wall_clock_s=time.time() - t0)


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

TABLE_CELLS = {
    2: (
        ("bare", {"coordinate_mode": "none", "disentangle": False,
                  "fusion_strategy": "concat"}),
        ("+coord-embed", {"coordinate_mode": "full", "disentangle": False,
                          "fusion_strategy": "concat"}),
        ("+disentangle", {"coordinate_mode": "full", "disentangle": True,
                          "fusion_strategy": "concat"}),
        ("+attention-fusion", {"coordinate_mode": "full", "disentangle": True,
                               "fusion_strategy": "attention"}),
    ),
    3: (
        ("no-encoding", {"coordinate_mode": "none"}),
        ("pos-only", {"coordinate_mode": "pos"}),
        ("time-only", {"coordinate_mode": "time"}),
        ("full-4d", {"coordinate_mode": "full"}),
    ),
    4: (
        ("concat", {"fusion_strategy": "concat"}),
        ("weighting", {"fusion_strategy": "weighting"}),
        ("attention", {"fusion_strategy": "attention"}),
    ),
    5: (
        ("text-none", {"text_coord_mode": "none"}),
        ("text-raw", {"text_coord_mode": "raw"}),
        ("text-encoded", {"text_coord_mode": "encoded"}),
    ),
}


def _pts(report: MetricsReport, key: str) -> float:
    return 100.0 * report.means[key]


def _table_checks(table: int, by_name: dict) -> list[dict]:
    def check(name, ok, detail):
        return {"name": name, "ok": bool(ok), "detail": detail}

    checks = []
    if table == 2:
        order = ["bare", "+coord-embed", "+disentangle", "+attention-fusion"]
        combined = [_pts(by_name[n], "combined") for n in order]
        monotone = all(combined[i + 1] >= combined[i] for i in range(3))
        checks.append(check(
            "each module addition does not decrease combined score", monotone,
            " -> ".join(f"{c:.1f}" for c in combined)))
        checks.append(check(
            "full stack exceeds bare stack by >= 15 points",
            combined[-1] - combined[0] >= 15.0,
            f"{combined[-1]:.1f} - {combined[0]:.1f} = {combined[-1] - combined[0]:.1f}"))
    elif table == 3:
        c = {n: _pts(by_name[n], "combined") for n in by_name}
        s = {n: _pts(by_name[n], "sacc") for n in by_name}
        t = {n: _pts(by_name[n], "tacc") for n in by_name}
        checks.append(check(
            "full-4d > pos-only > no-encoding (combined)",
            c["full-4d"] > c["pos-only"] > c["no-encoding"],
            f"{c['full-4d']:.1f} > {c['pos-only']:.1f} > {c['no-encoding']:.1f}"))
        checks.append(check(
            "full-4d > time-only > no-encoding (combined)",
            c["full-4d"] > c["time-only"] > c["no-encoding"],
            f"{c['full-4d']:.1f} > {c['time-only']:.1f} > {c['no-encoding']:.1f}"))
        checks.append(check(
            "full-4d exceeds no-encoding by >= 10 points",
            c["full-4d"] - c["no-encoding"] >= 10.0,
            f"gap = {c['full-4d'] - c['no-encoding']:.1f}"))
        checks.append(check(
            "pos-only >= time-only on spatial accuracy",
            s["pos-only"] >= s["time-only"],
            f"{s['pos-only']:.1f} vs {s['time-only']:.1f}"))
        checks.append(check(
            "time-only >= pos-only on temporal accuracy",
            t["time-only"] >= t["pos-only"],
            f"{t['time-only']:.1f} vs {t['pos-only']:.1f}"))
    elif table == 4:
        c = {n: _pts(by_name[n], "combined") for n in by_name}
        checks.append(check(
            "attention exceeds concatenation by >= 2 points",
            c["attention"] - c["concat"] >= 2.0,
            f"{c['attention']:.1f} - {c['concat']:.1f} = {c['attention'] - c['concat']:.1f}"))
        checks.append(check(
            "weighting lies between them within 1 point",
            c["concat"] - 1.0 <= c["weighting"] <= c["attention"] + 1.0,
            f"{c['concat']:.1f} - 1 <= {c['weighting']:.1f} <= {c['attention']:.1f} + 1"))
    elif table == 5:
        c = {n: _pts(by_name[n], "combined") for n in by_name}
        s = {n: _pts(by_name[n], "sacc") for n in by_name}
        t = {n: _pts(by_name[n], "tacc") for n in by_name}
        checks.append(check(
            "encoded >= raw >= none (combined)",
            c["text-encoded"] >= c["text-raw"] >= c["text-none"],
            f"{c['text-encoded']:.1f} >= {c['text-raw']:.1f} >= {c['text-none']:.1f}"))
        checks.append(check(
            "encoded exceeds none by >= 5 points",
            c["text-encoded"] - c["text-none"] >= 5.0,
            f"gap = {c['text-encoded'] - c['text-none']:.1f}"))
        checks.append(check(
            "largest encoded-vs-none gap is on temporal accuracy",
            (t["text-encoded"] - t["text-none"]) >= (s["text-encoded"] - s["text-none"]),
            f"tacc gap {t['text-encoded'] - t['text-none']:.1f} vs "
            f"sacc gap {s['text-encoded'] - s['text-none']:.1f}"))
    return checks


@dataclass
class AblationResult:
    table: int
    cells: list            # [{"name", "overrides", "report": MetricsReport}]
    checks: list

    @property
    def all_ok(self) -> bool:
        return all(c["ok"] for c in self.checks)

    def text_table(self) -> str:
        header = f"{'cell':<20}{'combined':>10}{'sacc':>8}{'tacc':>8}{'dyn-acc':>9}" \
                 f"{'sil-raw':>9}{'sil-dis':>9}{'sil-fus':>9}"
        lines = [f"ablation table {self.table}", header, "-" * len(header)]
        for cell in self.cells:
            r = cell["report"]
            m = r.means
            lines.append(
                f"{cell['name']:<20}{100 * m['combined']:>10.1f}{100 * m['sacc']:>8.1f}"
                f"{100 * m['tacc']:>8.1f}{m['dynamic_token_accuracy']:>9.2f}"
                f"{m['silhouette_raw']:>9.3f}{m['silhouette_disentangled']:>9.3f}"
                f"{m['silhouette_fused']:>9.3f}")
        lines.append("")
        for c in self.checks:
            mark = "ok " if c["ok"] else "FAIL"
            lines.append(f"[{mark}] {c['name']}: {c['detail']}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "table": self.table,
            "cells": [{"name": c["name"], "overrides": c["overrides"],
                       "report": c["report"].to_dict()} for c in self.cells],
            "checks": self.checks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationResult":
        cells = [{"name": c["name"], "overrides": c["overrides"],
                  "report": MetricsReport.from_dict(c["report"])} for c in d["cells"]]
        return cls(table=d["table"], cells=cells, checks=d["checks"])


def run_ablation_matrix(config: ExperimentConfig, table: int, seeds,
                        cache: dict | None = None) -> AblationResult:
    """Run one ablation table's grid over the seed set."""
    if table not in TABLE_CELLS:
        raise ConfigError(f"unknown ablation table {table}; choose from 2-5")
    cells = []
    for name, overrides in TABLE_CELLS[table]:
        cell_config = config.with_overrides(**overrides)
        report = run_experiment(cell_config, seeds, cache=cache)
        cells.append({"name": name, "overrides": overrides, "report": report})
    by_name = {c["name"]: c["report"] for c in cells}
    return AblationResult(table=table, cells=cells,
                          checks=_table_checks(table, by_name))


# ---------------------------------------------------------------------------
# FD suite and feature dumps
# ---------------------------------------------------------------------------

FD_CONFIG = ExperimentConfig(
    d=8, d_p=8, d_l=8, heads=2, prompt_hidden=8, probe_hidden=8, vocab_size=32,
    n_views=2, n_frames=2, image_size=8, patch_size=4, n_objects=1,
    n_train_scenes=1, n_eval_scenes=1)


def fd_check_suite(tol: float = 1e-4, eps: float = 1e-6, seed: int = 7):
    """FD-audit every learnable parameter of the full pipeline.

    Two passes: one with encoded text coordinates (raw literal maps are
    unused and must show exactly zero gradient) and one with raw literal
    maps active. Returns ``[(name, FdReport), ...]``.
    """
    results = []
    for mode in ("encoded", "raw"):
        cfg = FD_CONFIG.with_overrides(text_coord_mode=mode)
        scene = build_scene_data(cfg, seed)
        params = Model.init_params(cfg, Rng(seed))
        model = Model(cfg, params)
        by_task = {}
        for pair in scene.pairs:
            by_task.setdefault(pair.task, pair)
        pairs = list(by_task.values())

        def loss_fn(ps, model=model, scene=scene, pairs=pairs):
            model.params = ps
            ps.zero_grads()
            return model.batch_step(scene, pairs)

        report = fd_check(loss_fn, params, eps=eps, tol=tol)
        results.append((f"pipeline-text-{mode}", report))
    return results


FEATURE_STAGES = ("raw", "spatial", "temporal", "fused")


def write_feature_csv(path, model: Model, scenes) -> int:
    """Dump per-token features for every stage as CSV.

    Columns: view, time, row, col, label, f0..f{d_p-1}, stage. Returns the
    number of data rows written.
    """
    n_rows = 0
    with open(path, "w", encoding="utf-8") as fh:
        first = True
        for sc in scenes:
            state = model.scene_forward(sc)
            layout = sc.grid.layout
            stage_mats = {"raw": state.f, "spatial": state.f_s,
                          "temporal": state.f_t, "fused": state.f_st}
            if first:
                width = state.f.shape[1]
                cols = ["view", "time", "row", "col", "label"]
                cols += [f"f{i}" for i in range(width)]
                cols.append("stage")
                fh.write(",".join(cols) + "\n")
                first = False
            labs = sc.truth.token_labels()
            names = {0: "static", 1: "dynamic", 2: "empty"}
            for stage in FEATURE_STAGES:
                mat = stage_mats[stage]
                idx = 0
                for v in range(layout.n_views):
                    for t in range(layout.n_times):
                        for r in range(layout.n_rows):
                            for c in range(layout.n_cols):
                                row = [str(v), str(t), str(r), str(c),
                                       names[int(labs[idx])]]
                                row += [f"{x:.10g}" for x in mat[idx]]
                                row.append(stage)
                                fh.write(",".join(row) + "\n")
                                idx += 1
                                n_rows += 1
    return n_rows
