"""End-to-end experiment pipeline on the synthetic dataset.

Stages are exposed separately so ablation runs can reuse the expensive
pretrained classifiers: generate/split data, pretrain the frozen gesture
and identity classifiers, train the anonymizing autoencoder, then score
the privacy-utility trade-off against the perturbation baselines.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from pointveil import baselines as B
from pointveil import metrics as MX
from pointveil import model as M
from pointveil import train as T
from pointveil.data import FrameGrid, grids_from_sequences, split_dataset, split_grids
from pointveil.losses import LossWeights
from pointveil.synth import SynthSpec, generate_dataset


@dataclass(frozen=True)
class ExperimentSettings:
    """Desk-scale defaults: small model dims keep the full pipeline within
    a CPU-only time budget; library defaults stay untouched."""

    seed: int = 7
    synth: SynthSpec = field(default_factory=lambda: SynthSpec(
        subjects=8, gestures=6, sequences_per_cell=40, frames=32,
        points_per_frame=32, noise_sigma=0.01, seed=7))
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    d_h: int = 16
    d_k: int = 4
    heads: int = 4
    k: int = 2
    cls_epochs: int = 15
    ae_epochs: int = 20
    batch_size: int = 64
    eta0: float = 0.001
    weights: LossWeights = field(default_factory=lambda: LossWeights(
        alpha=1.0, beta=2.0, gamma=1.0, delta=2.0, tau=0.2))

    def model_config(self, **overrides) -> M.ModelConfig:
        base = M.ModelConfig(d_h=self.d_h, d_m=self.d_h, d_k=self.d_k,
                             d_v=self.d_h // self.heads, heads=self.heads,
                             d_z=self.d_h, k=self.k, seed=self.seed)
        return replace(base, **overrides) if overrides else base

    def train_config(self, max_epochs: int) -> T.TrainConfig:
        return T.TrainConfig(eta0=self.eta0, batch_size=self.batch_size,
                             max_epochs=max_epochs, seed=self.seed)


def prepare_data(st: ExperimentSettings, log=None
                 ) -> tuple[list[FrameGrid], list[FrameGrid], list[FrameGrid]]:
    """Synthesize, grid, and split: returns (train, val, test) grids."""
    t0 = time.perf_counter()
    seqs = generate_dataset(st.synth)
    train_seqs, test_seqs = split_dataset(seqs, st.train_fraction, st.seed)
    f, p = st.synth.frames, st.synth.points_per_frame
    train_grids = grids_from_sequences(train_seqs, f, p, st.seed)
    test_grids = grids_from_sequences(test_seqs, f, p, st.seed)
    train_grids, val_grids = split_grids(train_grids, 1.0 - st.val_fraction, st.seed)
    if log:
        log(f"data ready in {time.perf_counter() - t0:.1f}s: "
            f"{len(train_grids)} train / {len(val_grids)} val / {len(test_grids)} test")
    return train_grids, val_grids, test_grids


def pretrain_classifiers(st: ExperimentSettings, train_grids, val_grids, log=None):
    """Train the frozen gesture and identity classifiers."""
    cfg = st.model_config()
    tc = st.train_config(st.cls_epochs)
    results = {}
    for task, num_classes in ((T.TASK_GESTURE, st.synth.gestures),
                              (T.TASK_IDENTITY, st.synth.subjects)):
        t0 = time.perf_counter()
        cls_cfg = replace(cfg, seed=st.seed + (1 if task == T.TASK_GESTURE else 2))
        params, history = T.train_classifier(train_grids, val_grids, task, cls_cfg, tc,
                                             num_classes=num_classes, log=log)
        if log:
            log(f"{task} classifier done in {time.perf_counter() - t0:.1f}s "
                f"(final val acc {history[-1]['val_acc']:.3f})")
        results[task] = (params, cls_cfg, history)
    return results


def train_deid_model(st: ExperimentSettings, train_grids, val_grids,
                     g_params, g_cfg, u_params, u_cfg, *,
                     ablation: dict | None = None, weights: LossWeights | None = None,
                     deid_enabled: bool = True, history_path=None, log=None):
    ae_cfg = st.model_config(**(ablation or {}))
    ae_cfg = replace(ae_cfg, seed=st.seed + 3)
    tc = st.train_config(st.ae_epochs)
    return T.train_autoencoder(
        train_grids, val_grids, g_params, u_params,
        weights if weights is not None else st.weights,
        ae_cfg, tc, g_cfg=g_cfg, u_cfg=u_cfg, deid_enabled=deid_enabled,
        history_path=history_path, log=log), ae_cfg


def evaluate_pipeline(st: ExperimentSettings, test_grids, g_params, g_cfg,
                      u_params, u_cfg, ae_params, ae_cfg) -> dict:
    """Accuracies on original vs anonymized test grids plus structure stats."""
    deid = T.autoencode_dataset(test_grids, ae_params, ae_cfg)
    ges_labels = T.labels_for(test_grids, T.TASK_GESTURE)
    sub_labels = T.labels_for(test_grids, T.TASK_IDENTITY)
    out = {
        "gesture_acc_original": T.accuracy_from_probs(
            T.predict_probs(test_grids, g_params, g_cfg), ges_labels),
        "gesture_acc_deid": T.accuracy_from_probs(
            T.predict_probs(deid, g_params, g_cfg), ges_labels),
        "identity_acc_original": T.accuracy_from_probs(
            T.predict_probs(test_grids, u_params, u_cfg), sub_labels),
        "identity_acc_deid": T.accuracy_from_probs(
            T.predict_probs(deid, u_params, u_cfg), sub_labels),
        "mean_chamfer_deid": MX.mean_chamfer(test_grids, deid),
        "mean_chamfer_inter_gesture": inter_gesture_chamfer(test_grids, st.seed),
    }
    return out


def inter_gesture_chamfer(grids: list[FrameGrid], seed: int, pairs: int = 200) -> float:
    """Mean Chamfer between random grid pairs of different gestures."""
    from pointveil.losses import chamfer
    from pointveil.util import seeded_rng
    rng = seeded_rng(seed, "inter-gesture")
    by_gesture: dict[int, list[FrameGrid]] = {}
    for g in grids:
        by_gesture.setdefault(g.gesture, []).append(g)
    gestures = sorted(by_gesture)
    vals = []
    for _ in range(pairs):
        ga, gb = rng.choice(gestures, size=2, replace=False)
        a = by_gesture[ga][int(rng.integers(len(by_gesture[ga])))]
        b = by_gesture[gb][int(rng.integers(len(by_gesture[gb])))]
        vals.append(chamfer(a.node_coords(), b.node_coords()))
    return float(np.mean(vals))


def evaluate_baselines(st: ExperimentSettings, test_grids, u_params, u_cfg,
                       g_params=None, g_cfg=None,
                       methods=B.POINT_LEVEL_METHODS) -> dict:
    """Identification (and optionally gesture) accuracy per baseline method."""
    sub_labels = T.labels_for(test_grids, T.TASK_IDENTITY)
    ges_labels = T.labels_for(test_grids, T.TASK_GESTURE)
    out = {}
    for method in methods:
        spec = B.BaselineSpec(method=method, seed=st.seed)
        perturbed = B.perturb_dataset(test_grids, spec)
        row = {"identity_acc": T.accuracy_from_probs(
            T.predict_probs(perturbed, u_params, u_cfg), sub_labels)}
        if g_params is not None:
            row["gesture_acc"] = T.accuracy_from_probs(
                T.predict_probs(perturbed, g_params, g_cfg), ges_labels)
        out[method] = row
    return out


def run_full_experiment(st: ExperimentSettings, log=None) -> dict:
    """Criterion-style end-to-end run returning every reported number."""
    t_start = time.perf_counter()
    train_grids, val_grids, test_grids = prepare_data(st, log=log)
    cls = pretrain_classifiers(st, train_grids, val_grids, log=log)
    g_params, g_cfg, _ = cls[T.TASK_GESTURE]
    u_params, u_cfg, _ = cls[T.TASK_IDENTITY]
    (ae_params, history), ae_cfg = train_deid_model(
        st, train_grids, val_grids, g_params, g_cfg, u_params, u_cfg, log=log)
    summary = evaluate_pipeline(st, test_grids, g_params, g_cfg, u_params, u_cfg,
                                ae_params, ae_cfg)
    summary["baselines"] = evaluate_baselines(st, test_grids, u_params, u_cfg,
                                              g_params=g_params, g_cfg=g_cfg)
    summary["history"] = history
    summary["runtime_seconds"] = time.perf_counter() - t_start
    if log:
        log(f"experiment done in {summary['runtime_seconds']:.0f}s: {summary}")
    return summary
