"""Optimization loops: classifier pretraining and gated autoencoder training.

The autoencoder trains against two frozen classifiers. Identification
accuracy on the validation split decides, once per epoch, whether the
de-identification term participates; the gate stays constant within the
epoch. Frozen parameters are checksummed every epoch and any drift is a
hard failure. All shuffling derives from (seed, epoch), so interrupted
runs resume bit-identically from a checkpoint.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np

from pointveil import losses as L
from pointveil import model as M
from pointveil.data import FrameGrid
from pointveil.graph import build_temporal_graph
from pointveil.losses import LossWeights
from pointveil.util import atomic_write_bytes, seeded_rng

CHECKPOINT_MAGIC = b"IMCK"
CHECKPOINT_VERSION = 1

AE_HISTORY_COLUMNS = ("epoch", "l_point", "l_ges", "l_id_stab", "a_id", "gate",
                      "lr", "val_gesture_acc")
CLS_HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_acc", "lr")

TASK_GESTURE = "gesture"
TASK_IDENTITY = "identity"


@dataclass(frozen=True)
class TrainConfig:
    eta0: float = 0.001
    lam: float = 0.5
    decay_period: int = 20
    patience: int = 100
    batch_size: int = 32
    max_epochs: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.eta0 <= 0:
            raise ValueError("eta0 must be > 0")
        if not 0 < self.lam <= 1:
            raise ValueError("lam must be in (0, 1]")
        if self.decay_period < 1:
            raise ValueError("decay_period must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs, patience must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decay schedule: eta0 * lam ** floor(epoch / T)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.eta0 * cfg.lam ** (epoch // cfg.decay_period)


class AdamState:
    """First/second moment accumulators, stored in the training dtype."""

    def __init__(self, params: M.ModelParams):
        self.m = {n: np.zeros_like(a) for n, a in params}
        self.v = {n: np.zeros_like(a) for n, a in params}
        self.t = 0

    def step(self, params: M.ModelParams, grads: M.ModelParams, lr: float,
             cfg: TrainConfig) -> None:
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for name, g in grads:
            m = self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * g
            v = self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * (g * g)
            params[name] = params[name] - lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


class EarlyStopper:
    """Strict-improvement tracker; stops `patience` epochs past the best."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_value = np.inf
        self.best_epoch = -1

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if value < self.best_value:
            self.best_value = value
            self.best_epoch = epoch
        return epoch - self.best_epoch >= self.patience


def labels_for(grids: list[FrameGrid], task: str) -> np.ndarray:
    if task == TASK_GESTURE:
        return np.asarray([g.gesture for g in grids], dtype=np.int64)
    if task == TASK_IDENTITY:
        return np.asarray([g.subject for g in grids], dtype=np.int64)
    raise ValueError(f"unknown task {task!r}")


def build_edge_cache(grids: list[FrameGrid], cfg: M.ModelConfig) -> list[np.ndarray]:
    return [build_temporal_graph(g, cfg.k, mode=cfg.graph_mode).edges for g in grids]


def predict_probs(grids: list[FrameGrid], params: M.ModelParams, cfg: M.ModelConfig,
                  edge_cache: list[np.ndarray] | None = None,
                  chunk: int = 64) -> np.ndarray:
    rows = []
    for lo in range(0, len(grids), chunk):
        sub = grids[lo:lo + chunk]
        cache = edge_cache[lo:lo + chunk] if edge_cache is not None else None
        rows.append(M.classify_batch(sub, params, cfg, edge_cache=cache))
    return np.concatenate(rows, axis=0)


def autoencode_dataset(grids: list[FrameGrid], params: M.ModelParams, cfg: M.ModelConfig,
                       edge_cache: list[np.ndarray] | None = None,
                       chunk: int = 64) -> list[FrameGrid]:
    out: list[FrameGrid] = []
    for lo in range(0, len(grids), chunk):
        sub = grids[lo:lo + chunk]
        cache = edge_cache[lo:lo + chunk] if edge_cache is not None else None
        out.extend(M.autoencode_batch(sub, params, cfg, edge_cache=cache))
    return out


def accuracy_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def _epoch_order(seed: int, tag: str, epoch: int, n: int) -> np.ndarray:
    return seeded_rng(seed, "shuffle", tag, epoch).permutation(n)


def _batches(order: np.ndarray, batch_size: int):
    for lo in range(0, len(order), batch_size):
        yield order[lo:lo + batch_size]


def write_history_csv(path: str, columns: tuple, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_cell(row.get(c)) for c in columns])


def _csv_cell(v):
    if v is None:
        return "nan"
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str, params: M.ModelParams, adam: AdamState, epoch: int,
                    stopper: EarlyStopper, best_params: M.ModelParams) -> None:
    """Atomic training snapshot: parameter file plus optimizer-state section."""
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    params_blob = params.to_bytes()
    out += struct.pack("<I", len(params_blob))
    out += params_blob
    out += struct.pack("<QIid", adam.t, epoch, stopper.best_epoch, stopper.best_value)
    for name in params.names:
        for arr in (adam.m[name], adam.v[name]):
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            out += struct.pack("<I", len(raw))
            out += raw
    best_blob = best_params.to_bytes()
    out += struct.pack("<I", len(best_blob))
    out += best_blob
    atomic_write_bytes(path, bytes(out))


def load_checkpoint(path: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise M.ConfigurationError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise M.ConfigurationError(f"unsupported checkpoint version {version}")
    offset = 8
    (plen,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    params = M.ModelParams.from_bytes(blob[offset:offset + plen])
    offset += plen
    t, epoch, best_epoch, best_value = struct.unpack_from("<QIid", blob, offset)
    offset += struct.calcsize("<QIid")
    adam = AdamState(params)
    for name in params.names:
        for store in (adam.m, adam.v):
            (rlen,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            arr = np.frombuffer(blob, dtype="<f4", count=rlen // 4, offset=offset)
            store[name] = arr.reshape(params[name].shape).copy()
            offset += rlen
    adam.t = t
    (blen,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    best_params = M.ModelParams.from_bytes(blob[offset:offset + blen])
    return {"params": params, "adam": adam, "epoch": epoch, "best_epoch": best_epoch,
            "best_value": best_value, "best_params": best_params}


# ---------------------------------------------------------------------------
# Classifier pretraining


def train_classifier(train_set: list[FrameGrid], val_set: list[FrameGrid], task: str,
                     model_cfg: M.ModelConfig, train_cfg: TrainConfig,
                     num_classes: int | None = None,
                     history_path: str | None = None,
                     checkpoint_path: str | None = None,
                     resume: bool = False,
                     log=None) -> tuple[M.ModelParams, list[dict]]:
    """Adam-train a classifier head variant, returning the best-val params."""
    if not train_set or not val_set:
        raise M.ConfigurationError("train and validation splits must be non-empty")
    train_labels = labels_for(train_set, task)
    val_labels = labels_for(val_set, task)
    if num_classes is None:
        num_classes = int(max(train_labels.max(), val_labels.max())) + 1
    params = M.init_classifier(model_cfg, num_classes)
    adam = AdamState(params)
    stopper = EarlyStopper(train_cfg.patience)
    best_params = params.copy()
    start_epoch = 0
    if resume and checkpoint_path:
        state = load_checkpoint(checkpoint_path)
        params, adam = state["params"], state["adam"]
        start_epoch = state["epoch"] + 1
        stopper.best_epoch = state["best_epoch"]
        stopper.best_value = state["best_value"]
        best_params = state["best_params"]
    cache_train = build_edge_cache(train_set, model_cfg)
    cache_val = build_edge_cache(val_set, model_cfg)
    history: list[dict] = []
    for epoch in range(start_epoch, train_cfg.max_epochs):
        lr = lr_at(epoch, train_cfg)
        order = _epoch_order(train_cfg.seed, f"cls-{task}", epoch, len(train_set))
        loss_sum = 0.0
        for idx in _batches(order, train_cfg.batch_size):
            batch = [train_set[i] for i in idx]
            cache = [cache_train[i] for i in idx]
            loss, grads = M.classifier_gradients(batch, train_labels[idx], params,
                                                 model_cfg, edge_cache=cache)
            adam.step(params, grads, lr, train_cfg)
            loss_sum += loss * len(idx)
        val_probs = predict_probs(val_set, params, model_cfg, edge_cache=cache_val)
        val_loss = L.gesture_loss(val_probs, val_labels)
        val_acc = accuracy_from_probs(val_probs, val_labels)
        record = {"epoch": epoch, "train_loss": loss_sum / len(train_set),
                  "val_loss": val_loss, "val_acc": val_acc, "lr": lr}
        history.append(record)
        if log:
            log(f"classifier[{task}] epoch {epoch}: train {record['train_loss']:.4f} "
                f"val {val_loss:.4f} acc {val_acc:.3f}")
        improved = val_loss < stopper.best_value
        stop = stopper.update(epoch, val_loss)
        if improved:
            best_params = params.copy()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, params, adam, epoch, stopper, best_params)
        if history_path:
            write_history_csv(history_path, CLS_HISTORY_COLUMNS, history)
        if stop:
            break
    return best_params, history


# ---------------------------------------------------------------------------
# Autoencoder training


def _strip_ablations(cfg: M.ModelConfig) -> M.ModelConfig:
    return replace(cfg, no_temporal_edges=False, no_temporal_knn=False,
                   no_max_pool=False, decoder_node_feats=False)


def evaluate_autoencoder(val_set: list[FrameGrid], params: M.ModelParams,
                         model_cfg: M.ModelConfig,
                         g_params: M.ModelParams, g_cfg: M.ModelConfig,
                         u_params: M.ModelParams, u_cfg: M.ModelConfig,
                         weights: LossWeights,
                         edge_cache: list[np.ndarray] | None = None) -> dict:
    """Validation-side losses plus frozen-classifier accuracies on outputs."""
    outputs = autoencode_dataset(val_set, params, model_cfg, edge_cache=edge_cache)
    l_point = float(np.mean([
        L.chamfer(o.node_coords(), g.node_coords())
        for o, g in zip(outputs, val_set)]))
    g_probs = predict_probs(outputs, g_params, g_cfg)
    u_probs = predict_probs(outputs, u_params, u_cfg)
    ges_labels = labels_for(val_set, TASK_GESTURE)
    sub_labels = labels_for(val_set, TASK_IDENTITY)
    l_ges = L.gesture_loss(g_probs, ges_labels)
    id_nll = L.deid_nll(u_probs, sub_labels)
    return {
        "l_point": l_point,
        "l_ges": l_ges,
        "l_id_nll": id_nll,
        "l_id_stab": L.deid_stabilized(id_nll, weights.delta),
        "a_id": accuracy_from_probs(u_probs, sub_labels),
        "gesture_acc": accuracy_from_probs(g_probs, ges_labels),
    }


def train_autoencoder(train_set: list[FrameGrid], val_set: list[FrameGrid],
                      g_params: M.ModelParams, u_params: M.ModelParams,
                      weights: LossWeights, model_cfg: M.ModelConfig,
                      train_cfg: TrainConfig, *,
                      g_cfg: M.ModelConfig | None = None,
                      u_cfg: M.ModelConfig | None = None,
                      deid_enabled: bool = True,
                      history_path: str | None = None,
                      checkpoint_path: str | None = None,
                      resume: bool = False,
                      log=None) -> tuple[M.ModelParams, list[dict]]:
    """Train the reconstruction model against frozen classifiers G and U."""
    if not train_set or not val_set:
        raise M.ConfigurationError("train and validation splits must be non-empty")
    g_cfg = g_cfg or _strip_ablations(model_cfg)
    u_cfg = u_cfg or _strip_ablations(model_cfg)
    weights = weights.resolve_tau(u_params.num_classes)
    g_checksum = g_params.checksum()
    u_checksum = u_params.checksum()

    params = M.init_autoencoder(model_cfg)
    adam = AdamState(params)
    stopper = EarlyStopper(train_cfg.patience)
    best_params = params.copy()
    start_epoch = 0
    if resume and checkpoint_path:
        state = load_checkpoint(checkpoint_path)
        params, adam = state["params"], state["adam"]
        start_epoch = state["epoch"] + 1
        stopper.best_epoch = state["best_epoch"]
        stopper.best_value = state["best_value"]
        best_params = state["best_params"]

    cache_train = build_edge_cache(train_set, model_cfg)
    cache_val = build_edge_cache(val_set, model_cfg)
    ges_labels = labels_for(train_set, TASK_GESTURE)

    history: list[dict] = []
    ev = evaluate_autoencoder(val_set, params, model_cfg, g_params, g_cfg,
                              u_params, u_cfg, weights, edge_cache=cache_val)
    a_id = ev["a_id"]
    for epoch in range(start_epoch, train_cfg.max_epochs):
        lr = lr_at(epoch, train_cfg)
        gate = L.heaviside(a_id - weights.tau) if deid_enabled else 0.0
        eff_weights = weights if deid_enabled else replace(weights, gamma=0.0)
        order = _epoch_order(train_cfg.seed, "autoencoder", epoch, len(train_set))
        sums = {"l_point": 0.0, "l_ges": 0.0, "l_id_stab": 0.0}
        id_count = 0
        for idx in _batches(order, train_cfg.batch_size):
            batch = [train_set[i] for i in idx]
            cache = [cache_train[i] for i in idx]
            loss, grads, comp = M.gradients(
                batch, params, model_cfg, M.LOSS_COMBINED,
                weights=eff_weights, gate_accuracy=a_id,
                g_params=g_params, g_cfg=g_cfg,
                u_params=u_params, u_cfg=u_cfg,
                edge_cache=cache)
            adam.step(params, grads, lr, train_cfg)
            sums["l_point"] += comp["l_point"] * len(idx)
            sums["l_ges"] += comp["l_ges"] * len(idx)
            if "l_id_stab" in comp:
                sums["l_id_stab"] += comp["l_id_stab"] * len(idx)
                id_count += len(idx)
        if g_params.checksum() != g_checksum or u_params.checksum() != u_checksum:
            raise RuntimeError("frozen classifier parameters drifted during training")
        n = len(train_set)
        ev = evaluate_autoencoder(val_set, params, model_cfg, g_params, g_cfg,
                                  u_params, u_cfg, weights, edge_cache=cache_val)
        # The monitored loss gates on the end-of-epoch accuracy: it scores
        # the checkpointed state, so an epoch whose identity accuracy
        # recovered cannot hide behind its stale start-of-epoch gate.
        val_combined = L.combined_loss(
            ev["l_point"], ev["l_ges"],
            ev["l_id_stab"] if eff_weights.gamma != 0 else None,
            eff_weights, ev["a_id"])
        record = {
            "epoch": epoch,
            "l_point": sums["l_point"] / n,
            "l_ges": sums["l_ges"] / n,
            "l_id_stab": (sums["l_id_stab"] / id_count) if id_count else None,
            "a_id": a_id,
            "gate": gate,
            "lr": lr,
            "val_gesture_acc": ev["gesture_acc"],
        }
        history.append(record)
        if log:
            stab = record["l_id_stab"]
            log(f"autoencoder epoch {epoch}: point {record['l_point']:.4f} "
                f"ges {record['l_ges']:.4f} id_stab "
                f"{'n/a' if stab is None else f'{stab:.4f}'} a_id {a_id:.3f} "
                f"gate {gate:.0f} val_ges_acc {record['val_gesture_acc']:.3f}")
        improved = val_combined < stopper.best_value
        stop = stopper.update(epoch, val_combined)
        if improved:
            best_params = params.copy()
        if checkpoint_path:
            save_checkpoint(checkpoint_path, params, adam, epoch, stopper, best_params)
        if history_path:
            write_history_csv(history_path, AE_HISTORY_COLUMNS, history)
        a_id = ev["a_id"]
        if stop:
            break
    return best_params, history


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


def small_check_config(seed: int = 7) -> M.ModelConfig:
    return M.ModelConfig(d_h=4, d_m=4, d_k=2, d_v=2, heads=2, d_z=4, k=2, seed=seed)


def _margins_ok(grids: list[FrameGrid], ae: M.ModelParams, cfg: M.ModelConfig) -> bool:
    """Reject check instances whose min/argmax decisions sit within reach of
    the finite-difference step; central differences need one-sided margins."""
    batch = M.make_graph_batch(grids, cfg, dtype=np.float64)
    pt = M._as_param_tensors(ae, False)
    coords_t = M.Tensor(batch.coords)
    _, h_upd = M._backbone(coords_t, batch.plans, pt, cfg)
    out = M._autoencoder_output(batch, pt, cfg).data
    n = batch.nodes_per_sample
    for s in range(batch.n_samples):
        o = out[s * n:(s + 1) * n]
        t = batch.coords[s * n:(s + 1) * n]
        pair = np.linalg.norm(o[:, None, :] - o[None, :, :], axis=-1)
        np.fill_diagonal(pair, np.inf)
        if pair.min() < 5e-3:
            return False
        for a, b in ((o, t), (t, o)):
            d = np.sort(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1), axis=1)
            if np.min(d[:, 1] - d[:, 0]) < 8e-3:
                return False
    cube = np.sort(h_upd.data.reshape(batch.n_samples, n, -1), axis=1)
    if np.min(cube[:, -1, :] - cube[:, -2, :]) < 1e-3:
        return False
    return True


def _check_instance(cfg: M.ModelConfig, seed: int, n_classes_g: int = 3,
                    n_classes_u: int = 2):
    weights = LossWeights(alpha=1.0, beta=2.0, gamma=1.0, delta=2.0, tau=0.25)
    for attempt in range(64):
        candidate = seed + 1000 * attempt
        rng = seeded_rng(candidate, "gradcheck")
        grids = []
        for i in range(2):
            coords = rng.normal(0.0, 0.3, size=(4, 2, 3))
            grids.append(FrameGrid(coords.astype(np.float32),
                                   subject=i % n_classes_u, gesture=i % n_classes_g))
        ae_cfg = replace(cfg, seed=candidate)
        ae = M.init_autoencoder(ae_cfg, dtype=np.float64)
        if not _margins_ok(grids, ae, cfg):
            continue
        g_cls = M.init_classifier(replace(cfg, seed=candidate + 1), n_classes_g,
                                  dtype=np.float64)
        u_cls = M.init_classifier(replace(cfg, seed=candidate + 2), n_classes_u,
                                  dtype=np.float64)
        return grids, ae, g_cls, u_cls, weights
    raise RuntimeError("could not build a well-conditioned gradient-check instance")


def gradient_check(seed: int = 7, step: float = 1e-4, tol: float = 1e-4,
                   cfg: M.ModelConfig | None = None, log=None) -> dict:
    """Central finite differences vs reverse-mode gradients, per tensor.

    The frozen classifiers' graph topology over the reconstruction is
    pinned at the base point, matching the constant-topology convention
    of the analytic gradient.
    """
    cfg = cfg or small_check_config(seed)
    grids, ae, g_cls, u_cls, weights = _check_instance(cfg, seed)
    gate_accuracy = 0.5  # above tau, so the de-id term participates

    base_batch = M.make_graph_batch(grids, cfg, dtype=np.float64)
    pt = M._as_param_tensors(ae, False)
    base_out = M._autoencoder_output(base_batch, pt, cfg)
    frozen = {
        "g": M.batch_from_coords(base_out.data, base_batch, _strip_ablations(cfg),
                                 dtype=np.float64),
        "u": M.batch_from_coords(base_out.data, base_batch, _strip_ablations(cfg),
                                 dtype=np.float64),
    }

    def loss_value(selector):
        value, _, _ = M.gradients(
            grids, ae, cfg, selector, weights=weights, gate_accuracy=gate_accuracy,
            g_params=g_cls, g_cfg=_strip_ablations(cfg),
            u_params=u_cls, u_cfg=_strip_ablations(cfg),
            frozen_output_batches=frozen, compute_grads=False)
        return value

    rows = []
    for selector in M.LOSS_SELECTORS:
        _, grads, _ = M.gradients(
            grids, ae, cfg, selector, weights=weights, gate_accuracy=gate_accuracy,
            g_params=g_cls, g_cfg=_strip_ablations(cfg),
            u_params=u_cls, u_cfg=_strip_ablations(cfg),
            frozen_output_batches=frozen)
        for name in ae.names:
            arr = ae[name]
            worst = 0.0
            flat = arr.reshape(-1)
            gflat = grads[name].reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                f_plus = loss_value(selector)
                flat[i] = keep - step
                f_minus = loss_value(selector)
                flat[i] = keep
                fd = (f_plus - f_minus) / (2 * step)
                denom = max(abs(fd), abs(gflat[i]), 1e-6)
                worst = max(worst, abs(gflat[i] - fd) / denom)
            rows.append({"loss": selector, "tensor": name, "max_rel_err": worst,
                         "ok": worst < tol})
            if log:
                log(f"gradcheck {selector:9s} {name:12s} max_rel_err {worst:.3e} "
                    f"{'ok' if worst < tol else 'FAIL'}")

    # The stabilizing offset shifts the value only: gradients must be
    # bit-identical under a different delta.
    _, grads_a, _ = M.gradients(
        grids, ae, cfg, M.LOSS_COMBINED, weights=weights, gate_accuracy=gate_accuracy,
        g_params=g_cls, g_cfg=_strip_ablations(cfg),
        u_params=u_cls, u_cfg=_strip_ablations(cfg), frozen_output_batches=frozen)
    _, grads_b, _ = M.gradients(
        grids, ae, cfg, M.LOSS_COMBINED, weights=replace(weights, delta=5.0),
        gate_accuracy=gate_accuracy,
        g_params=g_cls, g_cfg=_strip_ablations(cfg),
        u_params=u_cls, u_cfg=_strip_ablations(cfg), frozen_output_batches=frozen)
    delta_free = all(np.array_equal(grads_a[n], grads_b[n]) for n in ae.names)
    if log:
        log(f"gradcheck delta-offset gradient-free: {'ok' if delta_free else 'FAIL'}")

    ok = delta_free and all(r["ok"] for r in rows)
    return {"rows": rows, "delta_gradient_free": delta_free, "ok": ok, "tol": tol}
