"""Network assembly: volumetric encoder, sequence models, and saliency.

The encoder is a 10-layer residual stack (stem + four blocks, strides
1/2/2/2) whose widths all scale by one factor, followed by global pooling
and two dropout-regularized fully connected layers; the second FC's output
is the per-timepoint feature a recurrent model consumes. Sequence models
treat the encoder as frozen: it always runs in eval mode and backward stops
at the feature boundary, so encoder gradient buffers stay exactly zero.

Feature mode swaps the encoder for an identity map over precomputed feature
vectors, which keeps the training contracts testable without volumes.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError, StateError
from . import diffcore
from .diffcore import (BatchNorm3d, Conv3d, Dense, Dropout, GlobalAvgPool3d,
                       Layer, ReLU, ResidualBlock)
from .recurrent import LstmCell, TalstmCell, TlstmCell, unroll, unroll_backward
from .preproc import resample

RNN_KINDS = ("lstm", "talstm", "tlstm")
HEAD_KINDS = ("classifier2", "classifier_cause2", "cox")
#: reference widths scaled by the width factor
FULL_CHANNELS = (64, 128, 256, 512)
FULL_FC_DIMS = (512, 32)


@dataclass
class ModelConfig:
    width_factor: float = 0.25
    in_channels: int = 1
    input_shape: tuple = (16, 16, 16)
    rnn_kind: str = "lstm"
    rnn_hx: int = 32
    head_kind: str = "classifier2"
    dropout_fc: float = 0.5
    dropout_rnn: float = 0.3
    feature_mode: bool = False
    feature_dim: int | None = None
    time_scale: float = 365.25

    def __post_init__(self):
        if self.rnn_kind not in RNN_KINDS:
            raise ConfigurationError(f"rnn_kind must be one of {RNN_KINDS}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigurationError(f"head_kind must be one of {HEAD_KINDS}")
        if self.width_factor <= 0:
            raise ConfigurationError("width_factor must be > 0")
        if self.rnn_hx < 1:
            raise ConfigurationError("rnn_hx must be >= 1")
        if self.feature_mode and not self.feature_dim:
            raise ConfigurationError("feature_mode needs feature_dim")

    @property
    def backbone_channels(self):
        return tuple(max(1, int(round(c * self.width_factor))) for c in FULL_CHANNELS)

    @property
    def fc_dims(self):
        return tuple(max(1, int(round(d * self.width_factor))) for d in FULL_FC_DIMS)

    @property
    def feature_out(self):
        return self.feature_dim if self.feature_mode else self.fc_dims[1]

    @property
    def head_out(self):
        return 1 if self.head_kind == "cox" else 2

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def _with_channel(x, in_channels):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]            # (C=1, D, H, W)
    if x.ndim == 4 and x.shape[0] == in_channels:
        return x, True
    if x.ndim == 5 and x.shape[1] == in_channels:
        return x, False
    raise ConfigurationError(
        f"volume shape {x.shape} does not match {in_channels} channel(s)")


class CnnEncoder(Layer):
    """Backbone + pool + two FC layers producing the timepoint feature."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c0, c1, c2, c3 = cfg.backbone_channels
        f1, f2 = cfg.fc_dims
        self.cfg = cfg
        self.stem = Conv3d(cfg.in_channels, c0, 3, stride=1, padding=1, bias=False,
                           rng=rng, name="stem.conv")
        self.stem_bn = BatchNorm3d(c0, name="stem.bn")
        self.stem_relu = ReLU()
        self.blocks = [
            ResidualBlock(c0, c0, stride=1, rng=rng, name="block1"),
            ResidualBlock(c0, c1, stride=2, rng=rng, name="block2"),
            ResidualBlock(c1, c2, stride=2, rng=rng, name="block3"),
            ResidualBlock(c2, c3, stride=2, rng=rng, name="block4"),
        ]
        self.pool = GlobalAvgPool3d()
        self.fc1 = Dense(c3, f1, rng=rng, name="fc1")
        self.fc1_relu = ReLU()
        self.drop1 = Dropout(cfg.dropout_fc)
        self.fc2 = Dense(f1, f2, rng=rng, name="fc2")
        self.fc2_relu = ReLU()
        self.drop2 = Dropout(cfg.dropout_fc)
        self.last_activation = None     # final backbone output, for saliency

    def params(self):
        out = self.stem.params() + self.stem_bn.params()
        for b in self.blocks:
            out += b.params()
        return out + self.fc1.params() + self.fc2.params()

    def bn_layers(self):
        out = [self.stem_bn]
        for b in self.blocks:
            out += [b.bn1, b.bn2] + ([b.proj_bn] if b.proj_bn is not None else [])
        return out

    def forward(self, x, training: bool, rng=None):
        x, _ = _with_channel(x, self.cfg.in_channels)
        y = self.stem.forward(x)
        y = self.stem_bn.forward(y, training)
        y = self.stem_relu.forward(y)
        for b in self.blocks:
            y = b.forward(y, training)
        self.last_activation = y
        return self.head_forward(y, training, rng)

    def head_forward(self, activation, training: bool, rng=None):
        y = self.pool.forward(activation)
        y = self.fc1.forward(y)
        y = self.fc1_relu.forward(y)
        y = self.drop1.forward(y, training, rng)
        y = self.fc2.forward(y)
        y = self.fc2_relu.forward(y)
        return self.drop2.forward(y, training, rng)

    def head_backward(self, dfeature):
        g = self.drop2.backward(dfeature)
        g = self.fc2_relu.backward(g)
        g = self.fc2.backward(g)
        g = self.drop1.backward(g)
        g = self.fc1_relu.backward(g)
        g = self.fc1.backward(g)
        return self.pool.backward(g)

    def backward(self, dfeature):
        g = self.head_backward(dfeature)
        for b in reversed(self.blocks):
            g = b.backward(g)
        g = self.stem_relu.backward(g)
        g = self.stem_bn.backward(g)
        return self.stem.backward(g)


class IdentityEncoder(Layer):
    """Feature mode: timepoint features are already encoded."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.last_activation = None

    def forward(self, x, training: bool, rng=None):
        x = np.asarray(x, dtype=np.float64)
        width = x.shape[-1]
        if width != self.cfg.feature_dim:
            raise ConfigurationError(
                f"feature width {width} != configured {self.cfg.feature_dim}")
        return x

    def backward(self, dfeature):
        return np.asarray(dfeature)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    zs = z - z.max(axis=-1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=-1, keepdims=True)


def mortality_prob(logits):
    """Non-survivor probability: softmax entry of class 1."""
    return softmax(logits)[..., 1]


class CnnModel(Layer):
    """Encoder + task head over a single (latest-scan) volume."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = IdentityEncoder(cfg) if cfg.feature_mode else CnnEncoder(cfg, rng)
        self.head = Dense(cfg.feature_out, cfg.head_out, rng=rng, name="head")
        self.seed = seed

    def params(self):
        return self.encoder.params() + self.head.params()

    def forward(self, x, training: bool = False, rng=None):
        feature = self.encoder.forward(x, training, rng)
        return feature, self.head.forward(feature)

    def backward(self, dout):
        dfeature = self.head.backward(dout)
        return self.encoder.backward(dfeature)

    def predict_prob(self, x):
        """Mortality probability (classifier) or risk score (cox head)."""
        _, out = self.forward(x, training=False)
        if self.cfg.head_kind == "cox":
            return np.asarray(out)[..., 0]
        return mortality_prob(out)


def _make_cell(cfg: ModelConfig, rng):
    cls = {"lstm": LstmCell, "talstm": TalstmCell, "tlstm": TlstmCell}[cfg.rnn_kind]
    return cls(cfg.feature_out, cfg.rnn_hx, rng=rng, time_scale=cfg.time_scale,
               name=cfg.rnn_kind)


class CrnnModel(Layer):
    """Frozen encoder feeding a recurrent cell over screening timepoints.

    ``forward`` takes the per-timepoint inputs stacked on the leading axis —
    (T, d) features or (T, C, D, H, W) volumes, plus batched forms with B
    after T — and the per-step day gaps. Only the recurrent cell, the
    post-RNN FC, and the head train; the encoder never accumulates
    gradients.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, encoder=None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        if encoder is not None:
            self.encoder = encoder
        elif cfg.feature_mode:
            self.encoder = IdentityEncoder(cfg)
        else:
            raise StateError("volume-mode sequence model needs a trained encoder")
        self.cell = _make_cell(cfg, rng)
        self.post_fc = Dense(cfg.rnn_hx, cfg.rnn_hx, rng=rng, name="post_fc")
        self.post_relu = ReLU()
        self.post_drop = Dropout(cfg.dropout_rnn)
        self.head = Dense(cfg.rnn_hx, cfg.head_out, rng=rng, name="head")
        self.seed = seed
        self._caches = None

    def params(self):
        return (self.encoder.params() + self.cell.params() + self.post_fc.params()
                + self.head.params())

    def trainable_params(self):
        return self.cell.params() + self.post_fc.params() + self.head.params()

    def encode_sequence(self, xs):
        """Run the frozen encoder per timepoint; always eval mode."""
        xs = np.asarray(xs, dtype=np.float64)
        if self.cfg.feature_mode:
            return self.encoder.forward(xs, training=False)
        feats = []
        for t in range(xs.shape[0]):
            feats.append(self.encoder.forward(xs[t], training=False))
        return np.stack(feats, axis=0)

    def forward(self, xs, deltas=None, training: bool = False, rng=None):
        feats = self.encode_sequence(xs)
        hs, (h_last, _), caches = unroll(self.cell, feats, dts=deltas)
        self._caches = caches
        y = self.post_fc.forward(h_last)
        y = self.post_relu.forward(y)
        y = self.post_drop.forward(y, training, rng)
        return self.head.forward(y)

    def backward(self, dout):
        """Backpropagate to trainable parameters; returns d(feature) per step."""
        if self._caches is None:
            raise StateError("backward called before forward")
        g = self.head.backward(dout)
        g = self.post_drop.backward(g)
        g = self.post_relu.backward(g)
        dh_last = self.post_fc.backward(g)
        dxs, _, _ = unroll_backward(self.cell, self._caches, dh_last=dh_last)
        return dxs

    def predict_prob(self, xs, deltas=None):
        out = self.forward(xs, deltas, training=False)
        if self.cfg.head_kind == "cox":
            return np.asarray(out)[..., 0]
        return mortality_prob(out)


def two_step_classify(main_probs, cause_probs):
    """Mortality gate at 0.5 (ties go to non-survivor), then cause argmax.

    Returns 0 for survivor, 1 + argmax(cause) otherwise (1 cardiac,
    2 respiratory).
    """
    p = np.atleast_1d(np.asarray(main_probs, dtype=np.float64))
    c = np.atleast_2d(np.asarray(cause_probs, dtype=np.float64))
    if c.shape[0] != p.shape[0] or c.shape[1] != 2:
        raise ConfigurationError("cause_probs must be (n, 2) aligned with main_probs")
    dead = p >= 0.5
    cls = np.where(dead, 1 + np.argmax(c, axis=1), 0)
    if np.isscalar(main_probs) or np.asarray(main_probs).ndim == 0:
        return int(cls[0])
    return cls


def _target_grad(out, head_kind, target):
    out = np.atleast_1d(np.asarray(out))
    if head_kind == "cox":
        return np.ones_like(out)
    idx = 1 if target is None else int(target)
    if not 0 <= idx < out.shape[-1]:
        raise ConfigurationError(f"target class {idx} out of range")
    dout = np.zeros_like(out)
    dout[..., idx] = 1.0
    return dout


def _cam_from(activation, dact, spatial):
    act = activation[0] if activation.ndim == 5 else activation
    da = np.asarray(dact)
    da = da[0] if da.ndim == 5 else da
    alphas = da.mean(axis=(1, 2, 3))
    cam = np.maximum(0.0, np.tensordot(alphas, act, axes=1))
    cam = resample(cam, spatial) if cam.shape != tuple(spatial) else cam
    peak = cam.max()
    if peak == 0.0:
        warnings.warn("saliency gradient is zero everywhere; returning a zero map")
        return np.zeros(spatial)
    return np.clip(cam / peak, 0.0, 1.0)


def gradcam(model, x, target: int | None = None):
    """Channel-weighted, rectified activation map, upsampled and normalized.

    ``model`` must expose a CnnEncoder. For classifier heads ``target`` is a
    class index (default 1, the non-survivor class); cox heads differentiate
    the risk itself. Returns a heatmap over the input spatial shape in
    [0, 1]; an everywhere-zero gradient yields a zero map with a warning.
    """
    if not isinstance(model, CnnModel) or not isinstance(model.encoder, CnnEncoder):
        raise ConfigurationError("saliency needs the single-volume model with its encoder")
    _, out = model.forward(x, training=False)
    dout = _target_grad(out, model.cfg.head_kind, target)

    activation = model.encoder.last_activation
    dfeature = model.head.backward(dout)
    dact = model.encoder.head_backward(dfeature)
    for p in model.params():
        p.grad[...] = 0.0       # saliency must not pollute training state

    x_arr, _ = _with_channel(x, model.cfg.in_channels)
    return _cam_from(activation, dact, x_arr.shape[-3:])


def gradcam_sequence(model, xs, deltas=None, target: int | None = None):
    """One saliency map per screening point for a sequence model.

    The sequence backward yields each timepoint's feature gradient; those
    are pushed through the (re-run) encoder head to the final backbone
    activation, per timepoint.
    """
    if not isinstance(model, CrnnModel) or not isinstance(model.encoder, CnnEncoder):
        raise ConfigurationError("sequence saliency needs a volume-mode sequence model")
    xs = np.asarray(xs, dtype=np.float64)
    out = model.forward(xs, deltas, training=False)
    dout = _target_grad(out, model.cfg.head_kind, target)
    dxs = model.backward(dout)
    maps = []
    for t in range(xs.shape[0]):
        model.encoder.forward(xs[t], training=False)
        dact = model.encoder.head_backward(np.asarray(dxs[t]))
        x_t, _ = _with_channel(xs[t], model.cfg.in_channels)
        maps.append(_cam_from(model.encoder.last_activation, dact, x_t.shape[-3:]))
    for p in model.params():
        p.grad[...] = 0.0
    return maps


# ---------------------------------------------------------------------------
# persistence

def model_state(model) -> dict:
    """Named parameter and normalization-statistic arrays."""
    out = {p.name: p.value for p in model.params()}
    encoder = getattr(model, "encoder", None)
    if isinstance(encoder, CnnEncoder):
        for bn in encoder.bn_layers():
            base = bn.gamma.name.rsplit(".gamma", 1)[0]
            out[f"{base}.running_mean"] = bn.running_mean
            out[f"{base}.running_var"] = bn.running_var
    return out


def load_model_state(model, arrays: dict):
    for p in model.params():
        if p.name not in arrays:
            raise ConfigurationError(f"checkpoint missing parameter {p.name}")
        saved = arrays[p.name]
        if tuple(saved.shape) != tuple(p.value.shape):
            raise ConfigurationError(
                f"checkpoint shape {saved.shape} != {p.value.shape} for {p.name}")
        p.value[...] = saved
    encoder = getattr(model, "encoder", None)
    if isinstance(encoder, CnnEncoder):
        for bn in encoder.bn_layers():
            base = bn.gamma.name.rsplit(".gamma", 1)[0]
            if f"{base}.running_mean" in arrays:
                bn.running_mean[...] = arrays[f"{base}.running_mean"]
                bn.running_var[...] = arrays[f"{base}.running_var"]


def save_model(path, model, card_extra: dict | None = None):
    """One-file checkpoint: arrays plus a model card describing the config."""
    card = {"model_config": model.cfg.to_dict(), "seed": model.seed,
            "model_kind": type(model).__name__}
    if card_extra:
        card.update(card_extra)
    diffcore.save_checkpoint(path, model_state(model), extra=card)


def load_model(path, encoder=None):
    arrays, card = diffcore.load_checkpoint(path)
    cfg = ModelConfig.from_dict(card["model_config"])
    kind = card.get("model_kind", "CnnModel")
    if kind == "CnnModel":
        model = CnnModel(cfg, seed=card.get("seed", 0))
    elif kind == "CrnnModel":
        if encoder is None and not cfg.feature_mode:
            raise StateError("loading a volume-mode sequence model needs its encoder")
        model = CrnnModel(cfg, seed=card.get("seed", 0), encoder=encoder)
    else:
        raise ConfigurationError(f"unknown model kind {kind!r}")
    load_model_state(model, arrays)
    return model, card
