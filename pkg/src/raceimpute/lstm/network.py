"""Character-level bidirectional LSTM with geolocation fusion.

Forward pass and exact analytic gradients (backpropagation through time) in
plain numpy, 64-bit throughout. Batches pad to the longest sequence; padded
positions carry state unchanged and contribute nothing to outputs or
gradients, so results per example do not depend on batch composition.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..core import N_CLASSES, RaceDistribution
from ..errors import InvariantError, NonFiniteLoss, ShapeMismatch
from .tokenizer import DEFAULT_MAX_LEN, geo_prefix_tokens, vocab_size


def single_thread_blas():
    """BLAS threading loses badly on this model's small matrices."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1, user_api="blas")
    except ImportError:  # pragma: no cover
        return nullcontext()

GEO_DIM = 6  # 5 tract race shares + scaled income decile

GEO_MODE_CONCAT = "concat"  # geo joins the dense head input (canonical)
GEO_MODE_PREFIX = "prefix"  # geo enters as 6 quantized tokens before the name


@dataclass(frozen=True)
class LstmGeoConfig:
    """Architecture and training hyperparameters.

    Defaults are the desk-scale configuration; ``paper_scale()`` returns the
    full-size variant (256-dim embeddings, four 512-unit layers, batch 512,
    learning rate 3.16e-5).
    """

    embed_dim: int = 32
    hidden_units: int = 64
    num_layers: int = 2
    dropout_rate: float = 0.15
    max_len: int = DEFAULT_MAX_LEN
    geo_enabled: bool = True
    geo_mode: str = GEO_MODE_CONCAT
    use_middle_name: bool = True
    learning_rate: float = 1e-3
    batch_size: int = 64
    early_stop_patience: int = 1
    early_stop_min_delta: float = 0.001
    max_epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        if min(self.embed_dim, self.hidden_units, self.num_layers, self.max_len) < 1:
            raise InvariantError("all model dimensions must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise InvariantError(f"dropout_rate {self.dropout_rate} not in [0, 1)")
        if self.learning_rate <= 0:
            raise InvariantError("learning_rate must be > 0")
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.max_epochs < 0:
            raise InvariantError("bad training bounds")
        if self.geo_mode not in (GEO_MODE_CONCAT, GEO_MODE_PREFIX):
            raise InvariantError(f"unknown geo_mode {self.geo_mode!r}")

    @property
    def vocab_size(self) -> int:
        return vocab_size(self.geo_mode if self.geo_enabled else GEO_MODE_CONCAT)

    @property
    def head_in_dim(self) -> int:
        d = 2 * self.hidden_units
        if self.geo_enabled and self.geo_mode == GEO_MODE_CONCAT:
            d += GEO_DIM
        return d

    @staticmethod
    def paper_scale(**overrides) -> "LstmGeoConfig":
        base = dict(
            embed_dim=256,
            hidden_units=512,
            num_layers=4,
            dropout_rate=0.15,
            learning_rate=3.16e-5,
            batch_size=512,
            max_epochs=100,
        )
        base.update(overrides)
        return LstmGeoConfig(**base)


def _param_names(config: LstmGeoConfig) -> list[str]:
    names = ["embedding"]
    for layer in range(config.num_layers):
        for direction in ("fwd", "bwd"):
            for mat in ("Wx", "Wh", "b"):
                names.append(f"layer{layer}.{direction}.{mat}")
    names.extend(["head.W", "head.b"])
    return names


@dataclass
class LstmGeoModel:
    """Parameter set plus config snapshot and training metadata."""

    config: LstmGeoConfig
    params: dict[str, np.ndarray]
    epochs_run: int = 0
    final_val_loss: float | None = None

    def named_parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(name, self.params[name]) for name in _param_names(self.config)]

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def _layer_in_dim(config: LstmGeoConfig, layer: int) -> int:
    return config.embed_dim if layer == 0 else 2 * config.hidden_units


def init_model(config: LstmGeoConfig, rng: np.random.Generator | None = None) -> LstmGeoModel:
    """Uniform(-k, k) init with k = 1/sqrt(fan-in); forget-gate bias 1.0."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    H = config.hidden_units
    params: dict[str, np.ndarray] = {}
    k_embed = 1.0 / np.sqrt(config.embed_dim)
    params["embedding"] = rng.uniform(-k_embed, k_embed, size=(config.vocab_size, config.embed_dim))
    for layer in range(config.num_layers):
        in_dim = _layer_in_dim(config, layer)
        for direction in ("fwd", "bwd"):
            kx = 1.0 / np.sqrt(in_dim)
            kh = 1.0 / np.sqrt(H)
            params[f"layer{layer}.{direction}.Wx"] = rng.uniform(-kx, kx, size=(in_dim, 4 * H))
            params[f"layer{layer}.{direction}.Wh"] = rng.uniform(-kh, kh, size=(H, 4 * H))
            b = np.zeros(4 * H)
            b[H : 2 * H] = 1.0
            params[f"layer{layer}.{direction}.b"] = b
    kd = 1.0 / np.sqrt(config.head_in_dim)
    params["head.W"] = rng.uniform(-kd, kd, size=(config.head_in_dim, N_CLASSES))
    params["head.b"] = np.zeros(N_CLASSES)
    return LstmGeoModel(config=config, params=params)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _pack_batch(token_lists: Sequence[Sequence[int]], vocab: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lengths = np.array([len(t) for t in token_lists], dtype=np.int64)
    if np.any(lengths == 0):
        raise ShapeMismatch("empty token sequence in batch")
    B, T = len(token_lists), int(lengths.max())
    ids = np.zeros((B, T), dtype=np.int64)  # PAD = 0
    for i, toks in enumerate(token_lists):
        ids[i, : len(toks)] = toks
    if ids.min() < 0 or ids.max() >= vocab:
        raise ShapeMismatch(f"token id out of range for vocab {vocab}")
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    return ids, mask, lengths


def _run_direction(x, mask, Wx, Wh, b, reverse):
    """One direction of one layer over a padded batch.

    Everything is time-major: x is (T,B,in) and mask (T,B,1), so each
    per-step slice is contiguous. Gate columns pack [i, f, o, g] so the three
    sigmoid gates go through one fused call. Padded steps carry state
    unchanged and emit zeros. Returns per-step output plus backward caches.
    """
    T, B, _ = x.shape
    H = Wh.shape[0]
    H3 = 3 * H
    pre = (x.reshape(T * B, -1) @ Wx).reshape(T, B, 4 * H)
    pre += b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((T, B, H))
    sig = np.empty((T, B, H3))  # i, f, o post-nonlinearity
    gg = np.empty((T, B, H))  # candidate tanh
    hc = np.empty((T, B, H))  # tanh of candidate cell state
    h_prev = np.empty((T, B, H))
    c_prev = np.empty((T, B, H))
    hwh = np.empty((B, 4 * H))
    tmp = np.empty((B, H))
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        m = mask[t]
        np.matmul(h, Wh, out=hwh)
        z = pre[t]
        z += hwh
        s = sig[t]
        zs = z[:, :H3]
        zs *= 0.5
        np.tanh(zs, out=s)  # sigmoid(u) = (1 + tanh(u/2)) / 2
        s += 1.0
        s *= 0.5
        g = np.tanh(z[:, H3:], out=gg[t])
        i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
        h_prev[t] = h
        c_prev[t] = c
        np.multiply(i, g, out=tmp)  # c_new = f*c + i*g
        tmp += f * c
        hc_t = np.tanh(tmp, out=hc[t])
        # masked carry: c += m*(c_new - c), h += m*(h_new - h)
        tmp -= c
        tmp *= m
        c += tmp
        h_new = np.multiply(o, hc_t, out=tmp)
        np.multiply(h_new, m, out=out[t])
        h_new -= h
        h_new *= m
        h += h_new
    cache = {"sig": sig, "gg": gg, "hc": hc, "h_prev": h_prev, "c_prev": c_prev}
    return out, cache


def _run_direction_backward(d_out, cache, x, mask, Wx, Wh, reverse):
    """BPTT through one direction; returns (dx, dWx, dWh, db), all time-major."""
    T, B, H = d_out.shape
    H3 = 3 * H
    sig, gg, hc, h_prev, c_prev = cache["sig"], cache["gg"], cache["hc"], cache["h_prev"], cache["c_prev"]
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    dpre = np.empty((T, B, 4 * H))
    dhn = np.empty((B, H))
    dci = np.empty((B, H))
    whT = np.ascontiguousarray(Wh.T)
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        m = mask[t]
        s = sig[t]
        i, f, o = s[:, :H], s[:, H : 2 * H], s[:, 2 * H :]
        g = gg[t]
        hc_t = hc[t]
        np.add(dh, d_out[t], out=dhn)
        dhn *= m
        # dci = dhn*o*(1 - hc^2) + m*dc
        np.multiply(hc_t, hc_t, out=dci)
        np.subtract(1.0, dci, out=dci)
        dci *= dhn
        dci *= o
        dci += m * dc
        dz = dpre[t]
        np.multiply(dci, g, out=dz[:, :H])  # di
        np.multiply(dci, c_prev[t], out=dz[:, H : 2 * H])  # df
        np.multiply(dhn, hc_t, out=dz[:, 2 * H : H3])  # do
        dzs = dz[:, :H3]
        dzs *= s
        dzs -= dzs * s  # through sigmoid: * s(1-s)
        np.multiply(dci, i, out=dz[:, H3:])  # dg
        dz[:, H3:] -= dz[:, H3:] * (g * g)  # through tanh: * (1-g^2)
        # carried gradients for the masked (pad) rows
        om = 1.0 - m
        dh *= om
        dh += dz @ whT
        dc *= om
        dc += dci * f
    flat_dpre = dpre.reshape(T * B, 4 * H)
    dWx = x.reshape(T * B, -1).T @ flat_dpre
    dWh = h_prev.reshape(T * B, H).T @ flat_dpre
    db = flat_dpre.sum(axis=0)
    dx = (flat_dpre @ Wx.T).reshape(T, B, -1)
    return dx, dWx, dWh, db


def _augment_with_geo_prefix(token_lists, geo, config):
    if config.geo_enabled and config.geo_mode == GEO_MODE_PREFIX:
        if geo is None:
            raise ShapeMismatch("geo_enabled model requires geo features")
        return [geo_prefix_tokens(geo[i]) + list(toks) for i, toks in enumerate(token_lists)]
    return [list(t) for t in token_lists]


def forward_batch(
    model: LstmGeoModel,
    token_lists: Sequence[Sequence[int]],
    geo: np.ndarray | None,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
):
    """Run the network on a batch; returns (probs (B,5), cache).

    Dropout (inverted, on every layer's output) applies only in train mode
    and requires a generator. A name-only model ignores ``geo`` entirely.
    """
    cfg = model.config
    if cfg.geo_enabled:
        if geo is None:
            raise ShapeMismatch("geo_enabled model requires geo features")
        geo = np.asarray(geo, dtype=np.float64)
        if geo.shape != (len(token_lists), GEO_DIM):
            raise ShapeMismatch(f"geo shape {geo.shape} != ({len(token_lists)}, {GEO_DIM})")
    if train and cfg.dropout_rate > 0.0 and dropout_rng is None:
        raise InvariantError("train-mode forward needs a dropout generator")
    seqs = _augment_with_geo_prefix(token_lists, geo, cfg)
    ids, mask, lengths = _pack_batch(seqs, cfg.vocab_size)
    B, T = ids.shape
    H = cfg.hidden_units
    ids_tm = np.ascontiguousarray(ids.T)  # (T,B); everything below is time-major
    mask_tm = np.ascontiguousarray(mask.T)[:, :, None]  # (T,B,1)
    x = model.params["embedding"][ids_tm]  # (T,B,E)
    layer_inputs = [x]
    layer_caches = []
    drop_masks = []
    out = x
    for layer in range(cfg.num_layers):
        caches = {}
        outs = []
        for direction, reverse in (("fwd", False), ("bwd", True)):
            p = model.params
            o_dir, cache = _run_direction(
                out,
                mask_tm,
                p[f"layer{layer}.{direction}.Wx"],
                p[f"layer{layer}.{direction}.Wh"],
                p[f"layer{layer}.{direction}.b"],
                reverse,
            )
            outs.append(o_dir)
            caches[direction] = cache
        concat = np.concatenate(outs, axis=2)  # (T,B,2H)
        if train and cfg.dropout_rate > 0.0:
            keep = 1.0 - cfg.dropout_rate
            dmask = (dropout_rng.random(concat.shape) < keep) / keep
            concat = concat * dmask
            drop_masks.append(dmask)
        else:
            drop_masks.append(None)
        layer_caches.append(caches)
        layer_inputs.append(concat)
        out = concat
    rows = np.arange(B)
    readout = np.concatenate([out[lengths - 1, rows, :H], out[0, :, H:]], axis=1)  # (B,2H)
    if cfg.geo_enabled and cfg.geo_mode == GEO_MODE_CONCAT:
        feats = np.concatenate([readout, geo], axis=1)
    else:
        feats = readout
    logits = feats @ model.params["head.W"] + model.params["head.b"]
    probs = _softmax(logits)
    cache = {
        "ids_tm": ids_tm,
        "mask_tm": mask_tm,
        "lengths": lengths,
        "layer_inputs": layer_inputs,
        "layer_caches": layer_caches,
        "drop_masks": drop_masks,
        "feats": feats,
        "probs": probs,
    }
    return probs, cache


def forward_one(
    model: LstmGeoModel,
    tokens: Sequence[int],
    geo: np.ndarray | None = None,
    train: bool = False,
    dropout_rng: np.random.Generator | None = None,
) -> tuple[RaceDistribution, dict]:
    """Single-example forward; returns the class distribution and activations."""
    geo_mat = None if geo is None else np.asarray(geo, dtype=np.float64).reshape(1, GEO_DIM)
    probs, cache = forward_batch(model, [tokens], geo_mat, train=train, dropout_rng=dropout_rng)
    return RaceDistribution.from_probs(probs[0]), cache


def loss_and_gradients(
    model: LstmGeoModel,
    batch: Sequence[tuple[Sequence[int], np.ndarray | None, int]],
    dropout_seed: int = 0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over a batch and exact gradients for every parameter.

    Deterministic given ``dropout_seed``. Raises NonFiniteLoss on NaN/inf.
    """
    if not batch:
        raise InvariantError("empty batch")
    cfg = model.config
    token_lists = [ex[0] for ex in batch]
    geo = None
    if cfg.geo_enabled:
        geo = np.stack([np.asarray(ex[1], dtype=np.float64) for ex in batch])
    labels = np.array([int(ex[2]) for ex in batch], dtype=np.int64)
    rng = np.random.default_rng(dropout_seed)
    probs, cache = forward_batch(model, token_lists, geo, train=True, dropout_rng=rng)
    B = len(batch)
    rows = np.arange(B)
    with np.errstate(divide="ignore"):
        logp = np.log(probs[rows, labels])
    loss = float(-logp.mean())
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"non-finite cross-entropy {loss!r} (check learning rate / activations)")

    H = cfg.hidden_units
    dlogits = probs.copy()
    dlogits[rows, labels] -= 1.0
    dlogits /= B
    feats = cache["feats"]
    grads: dict[str, np.ndarray] = {
        "head.W": feats.T @ dlogits,
        "head.b": dlogits.sum(axis=0),
    }
    dfeats = dlogits @ model.params["head.W"].T
    mask_tm, lengths = cache["mask_tm"], cache["lengths"]
    T = mask_tm.shape[0]
    d_out = np.zeros((T, B, 2 * H))
    d_out[lengths - 1, rows, :H] = dfeats[:, :H]
    d_out[0, :, H:] += dfeats[:, H : 2 * H]

    for layer in range(cfg.num_layers - 1, -1, -1):
        dmask = cache["drop_masks"][layer]
        if dmask is not None:
            d_out = d_out * dmask
        x_in = cache["layer_inputs"][layer]
        dx_total = None
        for direction, reverse, sl in (("fwd", False, slice(0, H)), ("bwd", True, slice(H, 2 * H))):
            p = model.params
            dx, dWx, dWh, db = _run_direction_backward(
                np.ascontiguousarray(d_out[:, :, sl]),
                cache["layer_caches"][layer][direction],
                x_in,
                mask_tm,
                p[f"layer{layer}.{direction}.Wx"],
                p[f"layer{layer}.{direction}.Wh"],
                reverse,
            )
            dx_total = dx if dx_total is None else dx_total + dx
            grads[f"layer{layer}.{direction}.Wx"] = dWx
            grads[f"layer{layer}.{direction}.Wh"] = dWh
            grads[f"layer{layer}.{direction}.b"] = db
        d_out = dx_total
    # scatter-add token gradients into embedding rows via a one-hot matmul
    # (much faster than np.add.at for small vocabularies)
    flat_ids = cache["ids_tm"].reshape(-1)
    onehot = (flat_ids[:, None] == np.arange(cfg.vocab_size)[None, :]).astype(np.float64)
    grads["embedding"] = onehot.T @ d_out.reshape(-1, cfg.embed_dim)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteLoss(f"non-finite gradient in {name}")
    return loss, grads


def batch_loss(model: LstmGeoModel, batch, chunk: int = 512) -> float:
    """Inference-mode mean cross-entropy (no dropout), for validation."""
    if not batch:
        raise InvariantError("empty batch")
    cfg = model.config
    total = 0.0
    with single_thread_blas():
        for start in range(0, len(batch), chunk):
            part = batch[start : start + chunk]
            token_lists = [ex[0] for ex in part]
            geo = np.stack([np.asarray(ex[1], dtype=np.float64) for ex in part]) if cfg.geo_enabled else None
            labels = np.array([int(ex[2]) for ex in part], dtype=np.int64)
            probs, _ = forward_batch(model, token_lists, geo, train=False)
            with np.errstate(divide="ignore"):
                total += float(-np.log(probs[np.arange(len(part)), labels]).sum())
    loss = total / len(batch)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"non-finite validation loss {loss!r}")
    return loss


def predict_proba(model: LstmGeoModel, token_lists, geo: np.ndarray | None, chunk: int = 1024) -> np.ndarray:
    """Inference-mode class probabilities, (N,5), in input order."""
    if len(token_lists) == 0:
        return np.zeros((0, N_CLASSES))
    outs = []
    with single_thread_blas():
        for start in range(0, len(token_lists), chunk):
            part = token_lists[start : start + chunk]
            g = geo[start : start + chunk] if geo is not None else None
            probs, _ = forward_batch(model, part, g, train=False)
            outs.append(probs)
    return np.concatenate(outs, axis=0)
