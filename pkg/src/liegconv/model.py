"""The small group-equivariant ResNet classifier and its training loop.

Layout: lifting convolution (32 channels) -> residual block (32) ->
spatial max-pool 2 -> residual block (64) -> max projection over
subgroup and spatial axes -> two linear layers with batch norm and
ReLU in between.  Each residual block applies two group convolutions
and adds the block input through a 1x1-stencil group shortcut that
projects channels and re-grids the subgroup axis, so the addition is
well-defined even when every layer draws a fresh random grid.

With ``sampling="random"`` each forward pass during training
left-translates the subgroup grids by random elements (the second
convolution of a block and its shortcut share one draw); evaluation
always runs on the frozen uniform grids.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import gconv as G
from . import kernelnet as kn
from . import tensor as T

_GROUPS = ("SE2", "R2xRplus", "Sim2")
_SAMPLING = ("discretize", "random")


@dataclass
class GCNNConfig:
    """Architecture and kernel configuration of the classifier."""

    group_tag: str = "SE2"
    factorization: str = "Separable"
    n_rotations: int = 4
    n_scales: int = 1
    truncation: float = math.sqrt(3.0)
    sampling: str = "discretize"
    allow_noncompact_sampling: bool = False
    stencil: int = 5
    lift_channels: int = 32
    block1_channels: int = 32
    block2_channels: int = 64
    siren_hidden: tuple[int, ...] = (64, 64)
    omega0: float = 10.0
    activation: str = "sine"
    head_hidden: int = 64
    n_classes: int = 10
    in_channels: int = 1
    padding: str = "zero"
    scale_support: int | None = 2
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.siren_hidden = tuple(self.siren_hidden)
        if self.group_tag not in _GROUPS:
            raise ValueError(f"unknown group tag {self.group_tag!r}")
        if self.factorization not in kn.FACTORIZATIONS:
            raise ValueError(f"unknown factorization {self.factorization!r}")
        if self.factorization == "HSeparable" and self.group_tag != "Sim2":
            raise ValueError("the three-stage factorization requires the Sim2 group")
        if self.sampling not in _SAMPLING:
            raise ValueError(f"sampling must be one of {_SAMPLING}, got {self.sampling!r}")
        if self.sampling == "random" and self.group_tag == "R2xRplus" and not self.allow_noncompact_sampling:
            raise ValueError(
                "random sampling moves only compact grid axes; the dilation group has "
                "none -- set allow_noncompact_sampling=True to draw log-scale offsets"
            )
        if self.stencil < 1 or self.stencil % 2 == 0:
            raise ValueError(f"stencil size must be odd, got {self.stencil}")
        if self.n_rotations < 1 or self.n_scales < 1:
            raise ValueError("grid sizes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32|float64, got {self.dtype!r}")


@dataclass
class TrainConfig:
    """Optimization settings; Adam with additive L2 weight decay."""

    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    eval_every: int = 1
    shuffle: bool = True
    dataset: str = ""


class Model:
    """Parameter container; all forward logic lives in module functions."""

    def __init__(self, cfg: GCNNConfig):
        self.cfg = cfg
        self.np_dtype = np.float32 if cfg.dtype == "float32" else np.float64
        self.base_grids = G.make_h_grids(
            cfg.group_tag, cfg.n_rotations, cfg.n_scales, cfg.truncation
        )
        self.bundles: dict[str, kn.KernelBundle] = {}
        self.bn: dict[str, tuple[T.DiffTensor, T.DiffTensor, T.BatchNormState]] = {}
        self.head: dict[str, T.DiffTensor] = {}

    def parameters(self) -> dict[str, T.DiffTensor]:
        out: dict[str, T.DiffTensor] = {}
        for bname, bundle in self.bundles.items():
            for pname, p in bundle.parameters().items():
                out[f"{bname}.{pname}"] = p
        for bname, (gamma, beta, _) in self.bn.items():
            out[f"{bname}.gamma"] = gamma
            out[f"{bname}.beta"] = beta
        for pname, p in self.head.items():
            out[f"head.{pname}"] = p
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Trainable parameters plus batch-norm running statistics."""
        out = {name: p.data for name, p in self.parameters().items()}
        for bname, (_, _, state) in self.bn.items():
            out[f"{bname}.running_mean"] = state.mean
            out[f"{bname}.running_var"] = state.var
        return out


def _glorot(rng, fan_in, fan_out, dtype):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return T.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype=dtype)


def build_model(cfg: GCNNConfig) -> Model:
    """Assemble kernels, batch-norm slots, and the classifier head."""
    model = Model(cfg)
    rng = np.random.default_rng(cfg.seed)
    dt = model.np_dtype
    tag, fac = cfg.group_tag, cfg.factorization

    def bundle(kind, c_in, c_out):
        return kn.make_kernel_bundle(
            kind, tag, c_in, c_out, cfg.siren_hidden, cfg.omega0, cfg.activation, rng, dt
        )

    def bn_slot(name, channels):
        gamma = T.parameter(np.ones(channels, dtype=dt))
        beta = T.parameter(np.zeros(channels, dtype=dt))
        model.bn[name] = (gamma, beta, T.BatchNormState(channels, dtype=dt))

    c0, c1, c2 = cfg.lift_channels, cfg.block1_channels, cfg.block2_channels
    model.bundles["lift"] = bundle("lift", cfg.in_channels, c0)
    bn_slot("bn_lift", c0)
    for name, cin, cout in (("block1", c0, c1), ("block2", c1, c2)):
        model.bundles[f"{name}.conv1"] = bundle(fac, cin, cout)
        model.bundles[f"{name}.conv2"] = bundle(fac, cout, cout)
        model.bundles[f"{name}.shortcut"] = bundle("shortcut", cin, cout)
        bn_slot(f"{name}.bn1", cout)
        bn_slot(f"{name}.bn2", cout)
    model.head["w1"] = _glorot(rng, c2, cfg.head_hidden, dt)
    model.head["b1"] = T.parameter(np.zeros(cfg.head_hidden, dtype=dt))
    bn_slot("bn_head", cfg.head_hidden)
    model.head["w2"] = _glorot(rng, cfg.head_hidden, cfg.n_classes, dt)
    model.head["b2"] = T.parameter(np.zeros(cfg.n_classes, dtype=dt))
    return model


# ---------------------------------------------------------------------------
# forward pass


def group_shortcut(
    f: G.GFeatureMap,
    bundle: kn.KernelBundle,
    out_grids,
    scale_support: int | None = 2,
) -> G.GFeatureMap:
    """1x1-stencil group convolution: channel projection plus re-gridding."""
    return G.shortcut_conv(f, bundle, out_grids, scale_support)


_BN_MOMENTUM: float | None = None


@contextmanager
def _bn_momentum(value: float):
    """Temporarily override the running-statistics update rate."""
    global _BN_MOMENTUM
    prev = _BN_MOMENTUM
    _BN_MOMENTUM = value
    try:
        yield
    finally:
        _BN_MOMENTUM = prev


def _bn(model: Model, name: str, x: T.DiffTensor, training: bool) -> T.DiffTensor:
    gamma, beta, state = model.bn[name]
    momentum = 0.1 if _BN_MOMENTUM is None else _BN_MOMENTUM
    return T.batch_norm(x, gamma, beta, state, training, momentum=momentum)


def _gconv(model: Model, f, bundle, out_grids, training):
    cfg = model.cfg
    if bundle.kind == "Nonseparable":
        fn = G.group_conv
    elif bundle.kind == "HSeparable":
        fn = G.h_separable_conv
    else:
        fn = G.separable_group_conv
    return fn(f, bundle, out_grids, cfg.stencil, cfg.padding, cfg.scale_support)


def _residual_block(model: Model, name: str, f: G.GFeatureMap, training: bool, draw):
    cfg = model.cfg
    mid_grids = draw()
    out_grids = draw()  # shared by the second convolution and the shortcut
    h = _gconv(model, f, model.bundles[f"{name}.conv1"], mid_grids, training)
    h = G.GFeatureMap(T.relu(_bn(model, f"{name}.bn1", h.data, training)), h.grids)
    h = _gconv(model, h, model.bundles[f"{name}.conv2"], out_grids, training)
    body = _bn(model, f"{name}.bn2", h.data, training)
    skip = group_shortcut(f, model.bundles[f"{name}.shortcut"], out_grids, cfg.scale_support)
    return G.GFeatureMap(T.relu(T.add(body, skip.data)), out_grids)


def _spatial_pool(f: G.GFeatureMap, size: int = 2) -> G.GFeatureMap:
    n, c = f.data.shape[:2]
    hh, ww = f.data.shape[-2:]
    flat = f.data.reshape((n, c * f.n_h, hh, ww))
    pooled = T.max_pool2d(flat, size)
    sizes = tuple(len(g) for g in f.grids)
    return G.GFeatureMap(
        pooled.reshape((n, c) + sizes + (hh // size, ww // size)), f.grids
    )


def forward(
    model: Model,
    images: T.DiffTensor,
    training: bool = False,
    rng: np.random.Generator | None = None,
    return_features: bool = False,
):
    """Logits (N, n_classes) for images (N, C, H, W).

    ``rng`` drives the per-layer grid draws when sampling is random;
    it is required in that mode during training and ignored otherwise.
    """
    cfg = model.cfg
    randomized = training and cfg.sampling == "random"
    if randomized and rng is None:
        raise ValueError("random grid sampling during training requires an rng")

    def draw():
        if randomized:
            return G.perturb_h_grids(model.base_grids, rng, cfg.allow_noncompact_sampling)
        return model.base_grids

    f = G.lift_conv(images, model.bundles["lift"], draw(), cfg.stencil, cfg.padding)
    f = G.GFeatureMap(T.relu(_bn(model, "bn_lift", f.data, training)), f.grids)
    f = _residual_block(model, "block1", f, training, draw)
    f = _spatial_pool(f, 2)
    f = _residual_block(model, "block2", f, training, draw)
    feats = G.invariant_project(f, mode="max", axes="h+spatial")
    h = T.linear(feats, model.head["w1"], model.head["b1"])
    h = T.relu(_bn(model, "bn_head", h, training))
    logits = T.linear(h, model.head["w2"], model.head["b2"])
    if return_features:
        return logits, f
    return logits


# ---------------------------------------------------------------------------
# training and evaluation


def _images_labels(dataset):
    if hasattr(dataset, "images"):
        return np.asarray(dataset.images), np.asarray(dataset.labels)
    images, labels = dataset
    return np.asarray(images), np.asarray(labels)


def recalibrate_batch_norm(
    model: Model,
    dataset,
    batch_size: int = 64,
    max_batches: int = 32,
) -> None:
    """Refresh batch-norm running statistics on the frozen uniform grids.

    Training with per-step random grids leaves the running statistics
    averaged over random draws, while evaluation runs on the frozen
    grids whose activation distribution can sit far from that average.
    Batch statistics are re-collected as an equal-weight mean over up
    to ``max_batches`` batches (update rate 1/i wipes the old state on
    the first batch and yields the arithmetic mean afterwards).
    """
    images, _ = _images_labels(dataset)
    frozen = dataclasses.replace(model.cfg, sampling="discretize")
    original = model.cfg
    model.cfg = frozen
    try:
        limit = min(len(images), max_batches * batch_size)
        with T.no_grad():
            for i, start in enumerate(range(0, limit, batch_size)):
                x = T.constant(images[start : start + batch_size].astype(model.np_dtype))
                with _bn_momentum(1.0 / (i + 1)):
                    forward(model, x, training=True)
    finally:
        model.cfg = original


def evaluate(model: Model, dataset, batch_size: int = 256) -> float:
    """Accuracy on the frozen uniform grids with running-statistics norm."""
    images, labels = _images_labels(dataset)
    hits = 0
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            x = T.constant(images[start : start + batch_size].astype(model.np_dtype))
            logits = forward(model, x, training=False)
            hits += int(
                (logits.data.argmax(axis=1) == labels[start : start + batch_size]).sum()
            )
    return hits / len(images)


def train(
    model: Model,
    train_cfg: TrainConfig,
    train_set,
    val_set=None,
) -> list[dict]:
    """Adam training; returns per-epoch metrics history.

    Each entry carries the sample-weighted mean train loss, the epoch
    wall-clock seconds, and (on eval epochs) validation accuracy.
    Aborts with a diagnostic if the loss leaves the finite range.
    """
    images, labels = _images_labels(train_set)
    params = model.parameters()
    opt = T.AdamState()
    rng = np.random.default_rng(train_cfg.seed)
    history: list[dict] = []
    n = len(images)
    for epoch in range(train_cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n) if train_cfg.shuffle else np.arange(n)
        loss_sum = 0.0
        for start in range(0, n, train_cfg.batch_size):
            idx = order[start : start + train_cfg.batch_size]
            x = T.constant(images[idx].astype(model.np_dtype))
            logits = forward(model, x, training=True, rng=rng)
            loss = T.softmax_cross_entropy(logits, labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise RuntimeError(
                    f"training loss became non-finite ({value}) at epoch {epoch}, "
                    f"step {start // train_cfg.batch_size}; try a lower learning rate"
                )
            T.zero_grads(params)
            loss.backward()
            T.adam_step(
                params, opt, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay
            )
            loss_sum += value * len(idx)
        last_epoch = epoch == train_cfg.epochs - 1
        if last_epoch and model.cfg.sampling == "random":
            recalibrate_batch_norm(model, train_set, train_cfg.batch_size)
        entry = {
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "epoch_seconds": time.perf_counter() - t0,
        }
        if val_set is not None and (epoch + 1) % train_cfg.eval_every == 0:
            entry["val_accuracy"] = evaluate(model, val_set)
        history.append(entry)
    return history


# ---------------------------------------------------------------------------
# checkpoints: 8-byte little-endian header length, JSON header, raw arrays


def save_checkpoint(path, model: Model) -> None:
    """Write named arrays with a JSON header echoing the configuration."""
    arrays = model.state_arrays()
    header = {
        "format": "liegconv-checkpoint-v1",
        "config": dataclasses.asdict(model.cfg),
        "arrays": [
            {"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)}
            for name, arr in arrays.items()
        ],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> Model:
    """Rebuild a model from a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise ValueError(f"checkpoint truncated in length prefix at byte {len(raw)}")
        (hlen,) = struct.unpack("<Q", raw)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise ValueError(f"checkpoint truncated in header at byte {8 + len(blob)}")
        header = json.loads(blob.decode("utf-8"))
        if header.get("format") != "liegconv-checkpoint-v1":
            raise ValueError(f"not a model checkpoint: format={header.get('format')!r}")
        cfg = GCNNConfig(**header["config"])
        model = build_model(cfg)
        arrays = model.state_arrays()
        if [a["name"] for a in header["arrays"]] != list(arrays.keys()):
            raise ValueError("checkpoint array names do not match the echoed config")
        offset = 8 + hlen
        for meta in header["arrays"]:
            target = arrays[meta["name"]]
            if list(target.shape) != meta["shape"]:
                raise ValueError(
                    f"array {meta['name']} has shape {meta['shape']}, expected "
                    f"{list(target.shape)}"
                )
            dtype = np.dtype(meta["dtype"])
            nbytes = int(np.prod(meta["shape"], dtype=np.int64)) * dtype.itemsize
            chunk = fh.read(nbytes)
            if len(chunk) != nbytes:
                raise ValueError(f"checkpoint truncated in {meta['name']} at byte {offset}")
            target[...] = np.frombuffer(chunk, dtype=dtype).reshape(meta["shape"])
            offset += nbytes
        if fh.read(1):
            raise ValueError(f"trailing bytes after arrays at byte {offset}")
    return model
