"""Point-block autoencoder codec with magnitude pruning, affine weight
quantization, model serialization, and the octree reference codec.

The codec operates on fixed-size blocks of points, each normalized into the
unit ball; a tiny per-block header (centroid + scale) makes reconstruction
position-independent. Latent sizes 16/64/256 form the model family used by
the scheduler (ids "4x4" / "8x8" / "16x16").
"""

from __future__ import annotations

import copy
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._util import ceil_count
from .cloud import PointCloud, chamfer_distance, quat_to_matrix
from .nn import (
    Layer, LossSpec, Network, adam_step, backward, dense, forward,
    rotate_points, rotate_points_backward, sgd_step, total_loss,
)

log = logging.getLogger(__name__)

LATENT_SIZES = {"4x4": 16, "8x8": 64, "16x16": 256}
DEFAULT_BLOCK_POINTS = 128

MAGIC = b"ISCM"
FORMAT_VERSION = 1
_KIND_CODES = {"dense": 1, "relu": 2, "tanh": 3, "maxpool_points": 4,
               "actor_head": 5, "critic_head": 6}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_DTYPE_CODES = {"f32": 0, "q8": 1, "q16": 2}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}


class CodecFormatError(ValueError):
    """Raised for malformed model or octree streams."""


@dataclass
class PruneConfig:
    zeta: float = 0.5
    rounds: int = 5
    per_round_ratio: float | None = None
    loss_threshold: float | None = None  # default: 1.1x the entry loss
    finetune_epochs: int = 4

    def __post_init__(self):
        if not 0.0 <= self.zeta < 1.0:
            raise ValueError("zeta must lie in [0, 1)")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        derived = 1.0 - (1.0 - self.zeta) ** (1.0 / self.rounds)
        if self.per_round_ratio is None:
            self.per_round_ratio = derived
        else:
            reached = 1.0 - (1.0 - self.per_round_ratio) ** self.rounds
            if abs(reached - self.zeta) > 1e-9:
                raise ValueError("per-round ratios must compound to zeta")

    def cumulative_target(self, rounds_done: int) -> float:
        return 1.0 - (1.0 - self.per_round_ratio) ** rounds_done


@dataclass
class CodecModel:
    encoder: Network
    decoder: Network
    n_points: int
    latent_dim: int
    dtype: str = "f32"
    quant_meta: list | None = None  # per dense layer, encoder then decoder
    zeta_applied: float = 0.0
    input_quant: dict | None = None

    def dense_layers(self):
        return [l for l in self.encoder.layers + self.decoder.layers
                if l.weights is not None]

    def zero_fractions(self):
        return [float((l.weights == 0.0).mean()) for l in self.dense_layers()]

    def copy(self) -> "CodecModel":
        return copy.deepcopy(self)


def make_codec_model(latent_dim: int, n_points: int = DEFAULT_BLOCK_POINTS,
                     seed: int = 0, enc_hidden=(32, 64),
                     dec_hidden=(128, 256)) -> CodecModel:
    """Fresh f32 model: shared per-point dense stack + max-pool encoder and a
    dense decoder emitting n_points*3 coordinates."""
    rng = np.random.default_rng(seed)
    enc = Network()
    prev = 3
    for h in enc_hidden:
        enc.layers += [dense(h, prev, rng), Layer("relu")]
        prev = h
    enc.layers.append(dense(latent_dim, prev, rng))
    enc.layers.append(Layer("maxpool_points"))
    dec = Network()
    prev = latent_dim
    for h in dec_hidden:
        dec.layers += [dense(h, prev, rng), Layer("relu")]
        prev = h
    # gentler init on the coordinate output keeps early losses tame
    dec.layers.append(dense(n_points * 3, prev, rng,
                            scale=math.sqrt(1.0 / prev)))
    return CodecModel(enc, dec, n_points, latent_dim)


# ---------------------------------------------------------------------------
# block plumbing

def normalize_block(points):
    """Center on the centroid and scale into the unit ball.

    Returns (normalized, centroid, scale); degenerate blocks get scale 1.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centroid = pts.mean(axis=0)
    shifted = pts - centroid
    scale = float(np.linalg.norm(shifted, axis=1).max())
    if scale <= 0.0:
        scale = 1.0
    return shifted / scale, centroid, scale


def denormalize_block(points, centroid, scale):
    return np.asarray(points, dtype=np.float64) * scale + np.asarray(centroid)


def _morton_order(points, bits: int = 10):
    pts = np.asarray(points, dtype=np.float64)
    lo = pts.min(axis=0)
    span = np.where(pts.max(axis=0) > lo, pts.max(axis=0) - lo, 1.0)
    cells = np.clip(((pts - lo) / span * (1 << bits)).astype(np.uint64),
                    0, (1 << bits) - 1)
    key = np.zeros(len(pts), dtype=np.uint64)
    for b in range(bits):
        for axis in range(3):
            key |= ((cells[:, axis] >> b) & 1) << np.uint64(3 * b + axis)
    return np.argsort(key, kind="stable")


def chunk_blocks(points, n_points: int):
    """Split a cloud into spatially coherent n-point blocks.

    Points are ordered along a Morton curve and cut into runs of n_points;
    the tail run is padded by repeating its own points. Returns
    (blocks (B, n, 3), valid_counts (B,)) with valid counts < n flagging pads.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.empty((0, n_points, 3)), np.empty(0, dtype=int)
    order = _morton_order(pts)
    pts = pts[order]
    n_blocks = math.ceil(len(pts) / n_points)
    blocks = np.empty((n_blocks, n_points, 3))
    valid = np.empty(n_blocks, dtype=int)
    for b in range(n_blocks):
        chunk = pts[b * n_points:(b + 1) * n_points]
        valid[b] = len(chunk)
        if len(chunk) < n_points:
            reps = math.ceil(n_points / len(chunk))
            chunk = np.tile(chunk, (reps, 1))[:n_points]
        blocks[b] = chunk
    return blocks, valid


# ---------------------------------------------------------------------------
# inference

def encode(model: CodecModel, block) -> np.ndarray:
    """Latent feature vector (latent_dim,) of one n-point block."""
    block = np.asarray(block, dtype=np.float64)
    if block.size == 0:
        raise ValueError("cannot encode an empty block")
    if block.shape != (model.n_points, 3):
        raise ValueError(
            f"block must be ({model.n_points}, 3), got {block.shape}")
    if model.input_quant is not None:
        codes, qm = quantize_with_meta(block, model.input_quant)
        block = dequantize_with_meta(codes, qm)
    return forward(model.encoder, block)[0]


def decode(model: CodecModel, latent) -> np.ndarray:
    """Reconstructed (n_points, 3) block from a latent vector."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != (model.latent_dim,):
        raise ValueError(
            f"latent must have length {model.latent_dim}, got {latent.shape}")
    out = forward(model.decoder, latent)[0]
    return out.reshape(model.n_points, 3)


def reconstruct_points(model: CodecModel, points):
    """Round-trip a whole cloud through the codec; returns decoded points."""
    blocks, _ = chunk_blocks(points, model.n_points)
    out = []
    for block in blocks:
        norm, centroid, scale = normalize_block(block)
        rebuilt = decode(model, encode(model, norm))
        out.append(denormalize_block(rebuilt, centroid, scale))
    if not out:
        return np.empty((0, 3))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# training

def _clip_grads(grad_lists, extra, max_norm):
    """Scale gradient lists (and the extra vector) to a global-norm cap."""
    total = float(sum((g ** 2).sum() for grads in grad_lists
                      for pair in grads if pair is not None
                      for g in pair))
    total = math.sqrt(total + float((extra ** 2).sum()))
    if total <= max_norm or total == 0.0:
        return grad_lists, extra
    s = max_norm / total
    scaled = [[None if p is None else (p[0] * s, p[1] * s) for p in grads]
              for grads in grad_lists]
    return scaled, extra * s


def train(model: CodecModel, dataset, spec: LossSpec = LossSpec(),
          epochs: int = 50, lr: float = 0.002, momentum: float = 0.9,
          seed: int = 0, clip_norm: float | None = 25.0,
          lr_decay: float = 1.0, batch_size: int = 8,
          optimizer: str = "adam") -> np.ndarray:
    """Mini-batch training over normalized blocks; returns per-epoch mean
    loss.

    Each sample owns a learned axis-angle alignment (zero-initialized) that
    rotates the decoded block before the loss; its squared norm is
    penalized. Batch-mean gradients are clipped by global norm; lr_decay
    multiplies the learning rate once per epoch. Adam is the default
    optimizer (momentum SGD stalls well short of convergence on the
    matching loss; pass optimizer="sgd" for the plain path).
    """
    if optimizer not in ("adam", "sgd"):
        raise ValueError("optimizer must be 'adam' or 'sgd'")
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty (S, n, 3) array")
    n_samples = data.shape[0]
    rng = np.random.default_rng(seed)
    rot = np.zeros((n_samples, 3))
    enc_state = dec_state = None
    curve = np.empty(epochs)
    for epoch in range(epochs):
        step_lr = lr * lr_decay ** epoch
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, batch_size):
            idx = order[start:start + batch_size]
            targets = data[idx]
            b = len(idx)
            latents, enc_caches = forward(model.encoder, targets)
            flat, dec_caches = forward(model.decoder, latents)
            pred0 = flat.reshape(b, model.n_points, 3)
            d_pred0 = np.empty_like(pred0)
            d_rots = np.empty((b, 3))
            for j, s in enumerate(idx):
                pred, rot_cache = rotate_points(rot[s], pred0[j])
                loss, d_pred, d_rot = total_loss(pred, targets[j], rot[s],
                                                 spec)
                if not np.isfinite(loss):
                    raise FloatingPointError(f"NaN loss at epoch {epoch}")
                total += loss
                d_theta, d_pred0[j] = rotate_points_backward(rot_cache,
                                                             d_pred)
                d_rots[j] = d_rot + d_theta
            d_latent, dec_grads = backward(model.decoder, dec_caches,
                                           d_pred0.reshape(b, -1) / b)
            _, enc_grads = backward(model.encoder, enc_caches, d_latent)
            if clip_norm is not None:
                (dec_grads, enc_grads), d_rots = _clip_grads(
                    [dec_grads, enc_grads], d_rots, clip_norm)
            if optimizer == "adam":
                dec_state = adam_step(model.decoder, dec_grads, step_lr,
                                      state=dec_state)
                enc_state = adam_step(model.encoder, enc_grads, step_lr,
                                      state=enc_state)
            else:
                dec_state = sgd_step(model.decoder, dec_grads, step_lr,
                                     momentum, dec_state)
                enc_state = sgd_step(model.encoder, enc_grads, step_lr,
                                     momentum, enc_state)
            rot[idx] -= step_lr * d_rots
        curve[epoch] = total / n_samples
    return curve


def mean_reconstruction_loss(model: CodecModel, dataset,
                             spec: LossSpec = LossSpec()) -> float:
    """Mean loss over a dataset without updates (zero alignment)."""
    data = np.asarray(dataset, dtype=np.float64)
    zero = np.zeros(3)
    total = 0.0
    for target in data:
        pred = decode(model, encode(model, target))
        total += total_loss(pred, target, zero, spec)[0]
    return total / len(data)


def mean_chamfer(model: CodecModel, dataset) -> float:
    """Mean Chamfer distance of codec round trips over normalized blocks."""
    data = np.asarray(dataset, dtype=np.float64)
    return float(np.mean([
        chamfer_distance(decode(model, encode(model, b)), b) for b in data]))


# ---------------------------------------------------------------------------
# pruning (magnitude, per layer)

def prune_threshold(weights, zeta: float) -> float:
    """The ceil(zeta*C)-th smallest |w|; -inf when nothing is to be pruned."""
    if not 0.0 <= zeta < 1.0:
        raise ValueError("zeta must lie in [0, 1)")
    flat = np.abs(np.asarray(weights, dtype=np.float64)).ravel()
    if flat.size == 0:
        raise ValueError("empty weight tensor")
    k = ceil_count(zeta, flat.size)
    if k == 0:
        return -math.inf
    return float(np.sort(flat)[k - 1])


def prune_layer(layer: Layer, w_th: float, count: int | None = None) -> None:
    """Zero the smallest-magnitude weights of one layer, in place.

    Weights with |w| < w_th always go; ties at |w| == w_th are zeroed in
    ascending flat-index order until `count` entries are zero. Without a
    count, all ties are zeroed. The prune mask records the zeros.
    """
    flat = layer.weights.ravel()
    mags = np.abs(flat)
    if count is None:
        count = int((mags <= w_th).sum())
    order = np.argsort(mags, kind="stable")
    kill = order[:count]
    flat[kill] = 0.0
    mask = np.ones_like(flat) if layer.prune_mask is None \
        else layer.prune_mask.ravel().copy()
    mask[kill] = 0.0
    layer.prune_mask = mask.reshape(layer.weights.shape)
    layer.weights *= layer.prune_mask


def prune_model(model: CodecModel, zeta: float) -> None:
    """Prune every dense layer to exactly ceil(zeta*C) zeros."""
    for layer in model.dense_layers():
        w_th = prune_threshold(layer.weights, zeta)
        prune_layer(layer, w_th, count=ceil_count(zeta, layer.weights.size))


# ---------------------------------------------------------------------------
# quantization (affine, per tensor)

def quantize_weights(tensor, m: int):
    """Affine m-bit quantization of a tensor.

    Codes are round(q*(w - min)) with q = (2^m - 1)/(max - min); a constant
    tensor degenerates to a zero-length payload holding only min.
    Returns (codes, meta); `dequantize` inverts within half a step.
    """
    if m not in (8, 16):
        raise ValueError("bit-width must be 8 or 16")
    flat = np.asarray(tensor, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty tensor")
    mn, mx = float(flat.min()), float(flat.max())
    dtype = np.uint8 if m == 8 else np.uint16
    if mx == mn:
        meta = {"min": mn, "max": mx, "bits": m, "size": flat.size}
        return np.empty(0, dtype=dtype), meta
    q = (2 ** m - 1) / (mx - mn)
    codes = np.round(q * (flat - mn)).astype(np.int64)
    codes = np.clip(codes, 0, 2 ** m - 1).astype(dtype)
    meta = {"min": mn, "max": mx, "bits": m, "size": flat.size}
    return codes, meta


def dequantize(codes, meta) -> np.ndarray:
    mn, mx, m = meta["min"], meta["max"], meta["bits"]
    if mx == mn:
        return np.full(meta["size"], mn)
    q = (2 ** m - 1) / (mx - mn)
    return np.asarray(codes, dtype=np.float64) / q + mn


def quantize_with_meta(tensor, meta):
    """Quantize against a fixed calibration range (values are clipped)."""
    flat = np.asarray(tensor, dtype=np.float64)
    shape = flat.shape
    mn, mx, m = meta["min"], meta["max"], meta["bits"]
    if mx == mn:
        return np.zeros(shape, dtype=np.int64), {**meta, "size": flat.size,
                                                 "shape": shape}
    q = (2 ** m - 1) / (mx - mn)
    codes = np.round(q * (np.clip(flat, mn, mx) - mn)).astype(np.int64)
    return codes, {**meta, "size": flat.size, "shape": shape}


def dequantize_with_meta(codes, meta):
    out = dequantize(np.asarray(codes).ravel(), meta)
    return out.reshape(meta.get("shape", (meta["size"],)))


def quantize_inputs(batch, m: int, clip_percentiles=(0.5, 99.5)):
    """Outlier-clipped input quantization.

    The calibration range is the [lo, hi] percentile band of the batch;
    values outside saturate to the range ends. Returns (codes, meta).
    """
    flat = np.asarray(batch, dtype=np.float64)
    if flat.size == 0:
        raise ValueError("empty batch")
    lo_p, hi_p = clip_percentiles
    if not 0.0 <= lo_p < hi_p <= 100.0:
        raise ValueError("percentiles must satisfy 0 <= lo < hi <= 100")
    mn, mx = np.percentile(flat, [lo_p, hi_p])
    meta = {"min": float(mn), "max": float(mx), "bits": m}
    return quantize_with_meta(flat, meta)


# ---------------------------------------------------------------------------
# the joint lightweight-training procedure

def lightweight_train(model: CodecModel, dataset, prune_cfg: PruneConfig,
                      m: int, spec: LossSpec = LossSpec(), lr: float = 0.001,
                      momentum: float = 0.9, seed: int = 0,
                      calibrate_inputs: bool = False,
                      optimizer: str = "adam") -> CodecModel:
    """Prune-and-quantize a pre-trained f32 model.

    Per round: fine-tune until the running loss drops below the trigger
    threshold, raise every layer's sparsity to the round's cumulative
    target, then keep fine-tuning within the round's epoch budget. After
    the final round all dense layers are quantized to m bits (m=32 skips
    quantization). If the trigger never fires within a round's budget the
    model is returned best-effort with zeta_applied below the target.
    """
    if model.dtype != "f32":
        raise ValueError("lightweight_train expects an f32 model")
    if m not in (8, 16, 32):
        raise ValueError("bit-width must be 8, 16, or 32")
    data = np.asarray(dataset, dtype=np.float64)
    out = model.copy()

    entry_loss = mean_reconstruction_loss(out, data, spec)
    l_th = prune_cfg.loss_threshold
    if l_th is None:
        l_th = 1.1 * entry_loss

    rounds_done = 0
    current = entry_loss
    for rnd in range(1, prune_cfg.rounds + 1):
        budget = prune_cfg.finetune_epochs
        while current >= l_th and budget > 0:
            train(out, data, spec, epochs=1, lr=lr, momentum=momentum,
                  seed=seed + 1000 * rnd + budget, optimizer=optimizer)
            budget -= 1
            current = mean_reconstruction_loss(out, data, spec)
        if current >= l_th:
            log.warning(
                "pruning stalled in round %d: loss %.6f never fell below "
                "threshold %.6f; stopping at sparsity %.3f",
                rnd, current, l_th, prune_cfg.cumulative_target(rounds_done))
            break
        prune_model(out, prune_cfg.cumulative_target(rnd))
        rounds_done = rnd
        if budget > 0:
            train(out, data, spec, epochs=budget, lr=lr, momentum=momentum,
                  seed=seed + 1000 * rnd, optimizer=optimizer)
        current = mean_reconstruction_loss(out, data, spec)

    out.zeta_applied = prune_cfg.cumulative_target(rounds_done) \
        if rounds_done else 0.0
    if rounds_done < prune_cfg.rounds:
        log.warning("reached sparsity %.3f of requested %.3f",
                    out.zeta_applied, prune_cfg.zeta)

    if m != 32:
        metas = []
        for layer in out.dense_layers():
            params = np.concatenate([layer.weights.ravel(), layer.bias])
            codes, meta = quantize_weights(params, m)
            meta["codes"] = codes
            metas.append(meta)
            restored = dequantize(codes, meta)
            n_w = layer.weights.size
            layer.weights = restored[:n_w].reshape(layer.weights.shape)
            layer.bias = restored[n_w:]
            if layer.prune_mask is not None:  # pruned zeros stay exact
                layer.weights *= layer.prune_mask
        out.quant_meta = metas
        out.dtype = f"q{m}"
    if calibrate_inputs:
        _, meta = quantize_inputs(data, m if m != 32 else 16)
        out.input_quant = {k: meta[k] for k in ("min", "max", "bits")}
    return out


# ---------------------------------------------------------------------------
# serialization

def _write_layer(parts, layer: Layer, kind: str, dtype: str, meta=None):
    if layer.weights is None:
        parts.append(struct.pack("<BIIB", _KIND_CODES[kind], 0, 0, 0))
        return
    rows, cols = layer.weights.shape
    parts.append(struct.pack("<BIIB", _KIND_CODES[kind], rows, cols,
                             _DTYPE_CODES[dtype]))
    if dtype == "f32":
        parts.append(np.asarray(layer.weights, "<f4").tobytes())
        parts.append(np.asarray(layer.bias, "<f4").tobytes())
    else:
        m = meta["bits"]
        parts.append(struct.pack("<ffB", meta["min"], meta["max"], m))
        codes = np.asarray(meta["codes"],
                           dtype=np.uint8 if m == 8 else "<u2")
        parts.append(codes.tobytes())


def write_layer_stream(path, entries) -> None:
    """entries: list of (kind, Layer, dtype, quant_meta or None)."""
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, len(entries))]
    for kind, layer, dtype, meta in entries:
        _write_layer(parts, layer, kind, dtype, meta)
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_layer_stream(path):
    """Inverse of write_layer_stream; returns (kind, Layer, dtype, meta)."""
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CodecFormatError(f"truncated payload at byte {len(data)}")
        chunk = data[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise CodecFormatError("bad magic: not a model file")
    version, count = struct.unpack("<HH", take(4))
    if version != FORMAT_VERSION:
        raise CodecFormatError(f"unsupported format version {version}")
    entries = []
    for _ in range(count):
        kind_code, rows, cols, dtype_code = struct.unpack("<BIIB", take(10))
        if kind_code not in _KIND_NAMES:
            raise CodecFormatError(f"unknown layer kind {kind_code}")
        kind = _KIND_NAMES[kind_code]
        if rows == 0:
            entries.append((kind, Layer(kind if kind in
                                        ("relu", "tanh", "maxpool_points")
                                        else "dense"), "f32", None))
            continue
        n_params = rows * cols + rows
        dtype = _DTYPE_NAMES.get(dtype_code)
        if dtype is None:
            raise CodecFormatError(f"unknown dtype code {dtype_code}")
        base_kind = "dense" if kind in ("actor_head", "critic_head") else kind
        if dtype == "f32":
            w = np.frombuffer(take(4 * rows * cols), "<f4").astype(np.float64)
            b = np.frombuffer(take(4 * rows), "<f4").astype(np.float64)
            layer = Layer(base_kind, w.reshape(rows, cols), b)
            if (layer.weights == 0.0).any():
                layer.prune_mask = (layer.weights != 0.0).astype(np.float64)
            meta = None
        else:
            mn, mx, m = struct.unpack("<ffB", take(9))
            meta = {"min": float(mn), "max": float(mx), "bits": m,
                    "size": n_params}
            if mn == mx:
                codes = np.empty(0, np.uint8 if m == 8 else np.uint16)
            else:
                codes = np.frombuffer(
                    take(n_params * (1 if m == 8 else 2)),
                    np.uint8 if m == 8 else "<u2")
            meta["codes"] = codes
            params = dequantize(codes, meta)
            layer = Layer(base_kind, params[:rows * cols].reshape(rows, cols),
                          params[rows * cols:])
            # entries mapping to the code nearest zero are pruned zeros
            if mn < 0.0 < mx:
                q = (2 ** m - 1) / (mx - mn)
                zero_code = int(round(-mn * q))
                reshaped = codes[:rows * cols].reshape(rows, cols)
                layer.prune_mask = (reshaped != zero_code).astype(np.float64)
                layer.weights *= layer.prune_mask
        entries.append((kind, layer, dtype, meta))
    if off != len(data):
        raise CodecFormatError(f"{len(data) - off} trailing bytes")
    return entries


def serialize(model: CodecModel, path) -> None:
    """Write a codec model; layout documented in read_layer_stream/serialize.

    Quantized metadata is stored at f32 precision, so weights reloaded from
    disk can differ from the in-memory model by one metadata ulp.
    """
    entries = []
    metas = iter(model.quant_meta or [])
    for layer in model.encoder.layers + model.decoder.layers:
        if layer.weights is None:
            entries.append((layer.kind, layer, "f32", None))
        elif model.dtype == "f32":
            entries.append((layer.kind, layer, "f32", None))
        else:
            entries.append((layer.kind, layer, model.dtype, next(metas)))
    write_layer_stream(path, entries)


def deserialize(path) -> CodecModel:
    entries = read_layer_stream(path)
    split = next((i for i, (k, *_ ) in enumerate(entries)
                  if k == "maxpool_points"), None)
    if split is None:
        raise CodecFormatError("model has no maxpool layer")
    enc = Network([e[1] for e in entries[:split + 1]])
    dec = Network([e[1] for e in entries[split + 1:]])
    enc_dense = [l for l in enc.layers if l.weights is not None]
    dec_dense = [l for l in dec.layers if l.weights is not None]
    if not enc_dense or not dec_dense:
        raise CodecFormatError("model is missing dense layers")
    latent_dim = enc_dense[-1].weights.shape[0]
    n_points = dec_dense[-1].weights.shape[0] // 3
    dtypes = {d for _, l, d, _ in entries if l.weights is not None}
    dtype = dtypes.pop() if len(dtypes) == 1 else "f32"
    metas = [m for _, l, _, m in entries if m is not None] or None
    model = CodecModel(enc, dec, n_points, latent_dim, dtype, metas)
    model.zeta_applied = min(model.zero_fractions())
    return model


# ---------------------------------------------------------------------------
# octree baseline

def _interleave(cells, depth):
    key = np.zeros(len(cells), dtype=np.uint64)
    for b in range(depth):
        for axis in range(3):
            key |= ((cells[:, axis] >> np.uint64(b)) & np.uint64(1)) \
                << np.uint64(3 * b + axis)
    return key


def octree_encode(cloud: PointCloud, depth: int) -> bytes:
    """Breadth-first occupancy-byte octree of the cloud's bounding cube.

    Stream layout: min corner (3 x f32), cube edge (f32), depth (u8), then
    one occupancy byte per internal node in breadth-first order. Bit k of a
    byte marks child octant k = x | y<<1 | z<<2.
    """
    if not 1 <= depth <= 16:
        raise ValueError("depth must lie in [1, 16]")
    pts = cloud.points.astype(np.float64)
    if len(pts) == 0:
        header = struct.pack("<3ffB", 0.0, 0.0, 0.0, 1.0, depth)
        return header + b"\x00"
    mn = pts.min(axis=0)
    edge = float((pts.max(axis=0) - mn).max())
    if edge <= 0.0:
        edge = 1.0
    res = 1 << depth
    cells = np.clip(((pts - mn) / edge * res).astype(np.int64), 0, res - 1)
    leaves = np.unique(_interleave(cells.astype(np.uint64), depth))
    levels = [leaves]
    for _ in range(depth):
        levels.append(np.unique(levels[-1] >> np.uint64(3)))
    levels.reverse()  # levels[0] = root, levels[depth] = leaves

    out = bytearray()
    for lvl in range(depth):
        parents = levels[lvl]
        children = levels[lvl + 1]
        occupancy = np.zeros(len(parents), dtype=np.uint8)
        slot = np.searchsorted(parents, children >> np.uint64(3))
        np.bitwise_or.at(occupancy, slot,
                         (1 << (children & np.uint64(7))).astype(np.uint8))
        out += occupancy.tobytes()
    mn32 = mn.astype(np.float32)
    header = struct.pack("<3ffB", mn32[0], mn32[1], mn32[2],
                         np.float32(edge), depth)
    return header + bytes(out)


def octree_decode(data: bytes) -> PointCloud:
    """Occupied-leaf centers of an octree stream."""
    if len(data) < 17:
        raise CodecFormatError("octree stream too short")
    x, y, z, edge, depth = struct.unpack("<3ffB", data[:17])
    if not 1 <= depth <= 16:
        raise CodecFormatError(f"invalid octree depth {depth}")
    mn = np.array([x, y, z], dtype=np.float64)
    off = 17
    nodes = np.zeros(1, dtype=np.uint64)
    for _ in range(depth):
        if off + len(nodes) > len(data):
            raise CodecFormatError(f"truncated octree stream at byte {off}")
        occupancy = np.frombuffer(data[off:off + len(nodes)], np.uint8)
        off += len(nodes)
        children = []
        for node, occ in zip(nodes, occupancy):
            for k in range(8):
                if occ & (1 << k):
                    children.append((node << np.uint64(3)) | np.uint64(k))
        nodes = np.array(children, dtype=np.uint64)
        if len(nodes) == 0:
            break
    if off != len(data):
        raise CodecFormatError(f"{len(data) - off} trailing bytes")
    if len(nodes) == 0:
        return PointCloud(np.empty((0, 3), np.float32))
    cells = np.zeros((len(nodes), 3), dtype=np.float64)
    for b in range(depth):
        for axis in range(3):
            cells[:, axis] += ((nodes >> np.uint64(3 * b + axis))
                               & np.uint64(1)).astype(np.float64) * (1 << b)
    centers = mn + (cells + 0.5) * (float(edge) / (1 << depth))
    return PointCloud(centers.astype(np.float32))


# ---------------------------------------------------------------------------
# toy dataset

def toy_block_dataset(count: int = 500, n_points: int = DEFAULT_BLOCK_POINTS,
                      seed: int = 7) -> np.ndarray:
    """Normalized parametric shape blocks for codec training and tests."""
    rng = np.random.default_rng(seed)
    shapes = ("sphere", "ball", "box", "plane", "clusters", "helix")
    blocks = np.empty((count, n_points, 3))
    for i in range(count):
        kind = shapes[rng.integers(len(shapes))]
        if kind == "sphere":
            v = rng.normal(size=(n_points, 3))
            pts = v / np.linalg.norm(v, axis=1, keepdims=True)
        elif kind == "ball":
            v = rng.normal(size=(n_points, 3))
            r = rng.random(n_points) ** (1 / 3)
            pts = v / np.linalg.norm(v, axis=1, keepdims=True) * r[:, None]
        elif kind == "box":
            pts = rng.uniform(-1, 1, size=(n_points, 3))
            face = rng.integers(0, 3, size=n_points)
            sign = rng.choice([-1.0, 1.0], size=n_points)
            pts[np.arange(n_points), face] = sign
        elif kind == "plane":
            pts = np.zeros((n_points, 3))
            pts[:, :2] = rng.uniform(-1, 1, size=(n_points, 2))
            pts[:, 2] = rng.normal(scale=0.05, size=n_points)
        elif kind == "clusters":
            k = int(rng.integers(1, 4))
            centers = rng.uniform(-1, 1, size=(k, 3))
            pick = rng.integers(0, k, size=n_points)
            pts = centers[pick] + rng.normal(scale=0.15, size=(n_points, 3))
        else:  # helix
            t = np.sort(rng.uniform(0, 4 * np.pi, size=n_points))
            pts = np.stack([np.cos(t), np.sin(t), t / (2 * np.pi) - 1],
                           axis=1)
            pts += rng.normal(scale=0.03, size=pts.shape)
        scale = rng.uniform(0.5, 1.0, size=3)
        rot = _random_rotation(rng)
        blocks[i] = normalize_block((pts * scale) @ rot.T)[0]
    return blocks


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return quat_to_matrix(q)
