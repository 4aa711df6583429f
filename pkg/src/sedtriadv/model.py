"""The detection network: a shared CRNN feature extractor feeding two
agreement labelers, a final classifier, and an adversarial domain head.

The domain head sees features through ``grad_reverse``, so its own weights
train normally while the gradient pushed back into the extractor is
sign-flipped and scaled by alpha.

Every component draws its initial weights from an rng seeded by
(seed, crc32(component name)), so constructing or omitting one head never
shifts the draws of the others.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigError, ShapeError

ADV_NONE = "none"
ADV_WHOLE = "whole"
ADV_TIME = "time"
ADV_MODES = (ADV_NONE, ADV_WHOLE, ADV_TIME)

LABELER_A = "labeler_a"
LABELER_B = "labeler_b"
CLASSIFIER = "classifier"
HEADS = (LABELER_A, LABELER_B, CLASSIFIER)

POOL_ATTENTION = "attention"
POOL_MEAN = "mean"


@dataclass
class ModelConfig:
    """Architecture knobs. Defaults map a 640x128 spectrogram to 640-frame
    features (three conv blocks, frequency pooled by 4 each)."""

    n_classes: int = 4
    cnn_blocks: list = field(default_factory=lambda: [(16, 4), (32, 4), (64, 4)])
    gru_hidden: int = 32
    gru_layers: int = 2
    time_pool_factor: int = 1
    adv_mode: str = ADV_NONE
    alpha: float = 1.0
    clip_pooling: str = POOL_ATTENTION

    def __post_init__(self):
        self.cnn_blocks = [tuple(int(v) for v in b) for b in self.cnn_blocks]
        if not self.cnn_blocks:
            raise ConfigError("at least one conv block required")
        for b in self.cnn_blocks:
            if len(b) != 2 or b[0] < 1 or b[1] < 1:
                raise ConfigError(f"bad conv block {b}: need (channels, freq_pool >= 1)")
        if self.n_classes < 1 or self.gru_hidden < 1 or self.gru_layers < 1:
            raise ConfigError("n_classes, gru_hidden, gru_layers must be >= 1")
        if self.time_pool_factor < 1:
            raise ConfigError("time_pool_factor must be >= 1")
        if self.adv_mode not in ADV_MODES:
            raise ConfigError(f"adv_mode must be one of {ADV_MODES}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.clip_pooling not in (POOL_ATTENTION, POOL_MEAN):
            raise ConfigError("clip_pooling must be 'attention' or 'mean'")

    @property
    def feature_dim(self) -> int:
        return 2 * self.gru_hidden

    def freq_out(self, n_mels: int) -> int:
        f = n_mels
        for _, pool in self.cnn_blocks:
            if f % pool:
                raise ShapeError(f"{n_mels} mel bins not divisible by pools "
                                 f"{[p for _, p in self.cnn_blocks]}")
            f //= pool
        return f

    def to_dict(self) -> dict:
        return {"n_classes": self.n_classes,
                "cnn_blocks": [list(b) for b in self.cnn_blocks],
                "gru_hidden": self.gru_hidden,
                "gru_layers": self.gru_layers,
                "time_pool_factor": self.time_pool_factor,
                "adv_mode": self.adv_mode,
                "alpha": self.alpha,
                "clip_pooling": self.clip_pooling}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def paper_scale_config(adv_mode: str = ADV_NONE, alpha: float = 1.0) -> ModelConfig:
    """Full-scale architecture: seven conv blocks and a two-layer
    bidirectional GRU over 10 classes."""
    return ModelConfig(
        n_classes=10,
        cnn_blocks=[(16, 2), (32, 2), (64, 2), (128, 2),
                    (128, 2), (128, 2), (128, 2)],
        gru_hidden=64,
        gru_layers=2,
        time_pool_factor=1,
        adv_mode=adv_mode,
        alpha=alpha,
    )


def toy_scale_config(n_classes: int = 4, adv_mode: str = ADV_NONE,
                     alpha: float = 1.0) -> ModelConfig:
    """Desk-scale architecture sized for the bundled toy corpus: three conv
    blocks over 32 mel bins and one bidirectional GRU layer."""
    return ModelConfig(
        n_classes=n_classes,
        cnn_blocks=[(8, 2), (16, 2), (16, 2)],
        gru_hidden=32,
        gru_layers=1,
        time_pool_factor=2,
        adv_mode=adv_mode,
        alpha=alpha,
    )


@dataclass
class FramePrediction:
    """Per-frame and clip-level class probabilities for one clip."""

    frame_probs: np.ndarray
    clip_probs: np.ndarray
    frame_hop_s: float


@dataclass
class DomainPrediction:
    """Domain-classifier output: one probability (whole) or one per frame."""

    mode: str
    probs: np.ndarray


def _component_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(
        (seed, zlib.crc32(name.encode()))))


class SedModel:
    """Holds all parameters and implements the forward passes."""

    def __init__(self, cfg: ModelConfig, n_mels: int, seed: int = 0,
                 norm_mean: np.ndarray | None = None,
                 norm_std: np.ndarray | None = None,
                 dtype=np.float32):
        cfg.freq_out(n_mels)  # validates pooling arithmetic early
        self.cfg = cfg
        self.n_mels = n_mels
        self.dtype = dtype
        self.norm_mean = np.zeros(n_mels, dtype) if norm_mean is None \
            else np.asarray(norm_mean, dtype)
        self.norm_std = np.ones(n_mels, dtype) if norm_std is None \
            else np.asarray(norm_std, dtype)
        if self.norm_mean.shape != (n_mels,) or self.norm_std.shape != (n_mels,):
            raise ShapeError("normalization stats must have one entry per mel bin")
        self._params: dict[str, Parameter] = {}
        self._build(seed)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> Parameter:
        p = Parameter(arr.astype(self.dtype), name=name)
        self._params[name] = p
        return p

    def _build(self, seed: int) -> None:
        cfg = self.cfg
        in_ch = 1
        for i, (ch, _) in enumerate(cfg.cnn_blocks):
            rng = _component_rng(seed, f"conv{i}")
            bound = 1.0 / np.sqrt(in_ch * 9)
            self._add(f"conv{i}.w", rng.uniform(-bound, bound, (ch, in_ch, 3, 3)))
            self._add(f"conv{i}.b", np.zeros(ch))
            in_ch = ch
        d = in_ch * cfg.freq_out(self.n_mels)
        h = cfg.gru_hidden
        bound = 1.0 / np.sqrt(h)
        for layer in range(cfg.gru_layers):
            for direction in ("fwd", "bwd"):
                rng = _component_rng(seed, f"gru{layer}.{direction}")
                self._add(f"gru{layer}.{direction}.w_ih",
                          rng.uniform(-bound, bound, (3 * h, d)))
                self._add(f"gru{layer}.{direction}.w_hh",
                          rng.uniform(-bound, bound, (3 * h, h)))
                self._add(f"gru{layer}.{direction}.b_ih", np.zeros(3 * h))
                self._add(f"gru{layer}.{direction}.b_hh", np.zeros(3 * h))
            d = 2 * h
        k = cfg.n_classes
        for head in HEADS:
            rng = _component_rng(seed, head)
            hb = 1.0 / np.sqrt(d)
            self._add(f"{head}.frame.w", rng.uniform(-hb, hb, (k, d)))
            self._add(f"{head}.frame.b", np.zeros(k))
            self._add(f"{head}.attn.w", rng.uniform(-hb, hb, (k, d)))
            self._add(f"{head}.attn.b", np.zeros(k))
        if cfg.adv_mode != ADV_NONE:
            rng = _component_rng(seed, "domain")
            hb = 1.0 / np.sqrt(d)
            self._add("domain.h.w", rng.uniform(-hb, hb, (d, d)))
            self._add("domain.h.b", np.zeros(d))
            self._add("domain.out.w", rng.uniform(-hb, hb, (1, d)))
            self._add("domain.out.b", np.zeros(1))

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def param(self, name: str) -> Parameter:
        return self._params[name]

    def feature_parameters(self) -> list[Parameter]:
        return [p for n, p in self._params.items()
                if n.startswith(("conv", "gru"))]

    def head_parameters(self, head: str) -> list[Parameter]:
        if head not in HEADS:
            raise ConfigError(f"unknown head {head!r}")
        return [p for n, p in self._params.items() if n.startswith(head + ".")]

    def domain_parameters(self) -> list[Parameter]:
        return [p for n, p in self._params.items() if n.startswith("domain.")]

    def labeler_frame_weights(self) -> tuple[Parameter, Parameter]:
        """First-layer weight matrices of the two labelers (the
        orthogonality penalty's operands)."""
        return self._params[f"{LABELER_A}.frame.w"], self._params[f"{LABELER_B}.frame.w"]

    # -- forward passes ------------------------------------------------------

    def extract_features(self, frames: np.ndarray) -> Tensor:
        """(N, T, B) log-mel input -> (N, T', 2*gru_hidden) shared features."""
        x = np.asarray(frames, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[2] != self.n_mels:
            raise ShapeError(f"expected (N, T, {self.n_mels}) input, got {x.shape}")
        if x.shape[1] % self.cfg.time_pool_factor:
            raise ShapeError(f"{x.shape[1]} frames not divisible by time pool "
                             f"{self.cfg.time_pool_factor}")
        x = (x - self.norm_mean) / np.maximum(self.norm_std, 1e-5)
        t = Tensor(x[:, None, :, :])
        last = len(self.cfg.cnn_blocks) - 1
        for i, (_, fpool) in enumerate(self.cfg.cnn_blocks):
            t = ad.relu(ad.conv2d(t, self._params[f"conv{i}.w"],
                                  self._params[f"conv{i}.b"]))
            tpool = self.cfg.time_pool_factor if i == last else 1
            if tpool > 1 or fpool > 1:
                t = ad.max_pool2d(t, (tpool, fpool))
        n, c, tt, ff = t.shape
        feats = t.transpose(0, 2, 1, 3).reshape(n, tt, c * ff)
        for layer in range(self.cfg.gru_layers):
            fwd = self._gru_direction(feats, layer, "fwd")
            bwd = self._gru_direction(feats, layer, "bwd")
            feats = ad.concat([fwd, bwd], axis=2)
        return feats

    def _gru_direction(self, x: Tensor, layer: int, direction: str) -> Tensor:
        n, t, _ = x.shape
        h = self.cfg.gru_hidden
        w_ih = self._params[f"gru{layer}.{direction}.w_ih"]
        b_ih = self._params[f"gru{layer}.{direction}.b_ih"]
        # one big matmul for all timesteps' input projections
        gates = (x.reshape(n * t, x.shape[2]) @ w_ih.transpose(1, 0) + b_ih) \
            .reshape(n, t, 3 * h)
        return ad.gru_sequence(gates, self._params[f"gru{layer}.{direction}.w_hh"],
                               self._params[f"gru{layer}.{direction}.b_hh"],
                               reverse=direction == "bwd")

    def classify_head(self, features: Tensor, head: str) -> tuple[Tensor, Tensor]:
        """Returns (frame_probs (N,T',K), clip_probs (N,K)). Clip probabilities
        are a per-class softmax-attention average of frame probabilities, so
        they always lie between the frame minimum and maximum."""
        if head not in HEADS:
            raise ConfigError(f"unknown head {head!r}")
        n, t, h = features.shape
        flat = features.reshape(n * t, h)
        frame = ad.sigmoid(flat @ self._params[f"{head}.frame.w"].transpose(1, 0)
                           + self._params[f"{head}.frame.b"]).reshape(n, t, -1)
        if self.cfg.clip_pooling == POOL_MEAN:
            return frame, frame.mean(axis=1)
        attn = (flat @ self._params[f"{head}.attn.w"].transpose(1, 0)
                + self._params[f"{head}.attn.b"]).reshape(n, t, -1)
        weights = ad.softmax(attn, axis=1)
        clip = (weights * frame).sum(axis=1)
        return frame, clip

    def classify_domain(self, features: Tensor) -> Tensor:
        """Domain probabilities through the gradient-reversal op:
        (N,) in whole mode, (N, T') in time mode."""
        if self.cfg.adv_mode == ADV_NONE:
            raise ConfigError("domain head disabled (adv_mode none)")
        g = ad.grad_reverse(features, self.cfg.alpha)
        n, t, h = features.shape
        if self.cfg.adv_mode == ADV_WHOLE:
            pooled = g.mean(axis=1)
            hidden = ad.relu(pooled @ self._params["domain.h.w"].transpose(1, 0)
                             + self._params["domain.h.b"])
            out = ad.sigmoid(hidden @ self._params["domain.out.w"].transpose(1, 0)
                             + self._params["domain.out.b"])
            return out.reshape(n)
        flat = g.reshape(n * t, h)
        hidden = ad.relu(flat @ self._params["domain.h.w"].transpose(1, 0)
                         + self._params["domain.h.b"])
        out = ad.sigmoid(hidden @ self._params["domain.out.w"].transpose(1, 0)
                         + self._params["domain.out.b"])
        return out.reshape(n, t)

    def predict(self, frames: np.ndarray, frame_hop_s: float,
                head: str = CLASSIFIER) -> FramePrediction:
        """Inference on one clip's spectrogram (T, B); no graph is recorded."""
        with ad.no_grad():
            feats = self.extract_features(frames[None] if frames.ndim == 2 else frames)
            frame, clip = self.classify_head(feats, head)
        hop = frame_hop_s * self.cfg.time_pool_factor
        return FramePrediction(frame.data[0], clip.data[0], hop)

    def predict_domain(self, frames: np.ndarray) -> DomainPrediction:
        with ad.no_grad():
            feats = self.extract_features(frames[None] if frames.ndim == 2 else frames)
            probs = self.classify_domain(feats)
        return DomainPrediction(self.cfg.adv_mode, probs.data[0])

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self._params.items()}
        out["norm.mean"] = self.norm_mean
        out["norm.std"] = self.norm_std
        return out

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.state_arrays())

    @classmethod
    def load(cls, path: str | Path, cfg: ModelConfig, n_mels: int,
             dtype=np.float32) -> "SedModel":
        arrays = load_checkpoint(path)
        if "norm.mean" not in arrays or "norm.std" not in arrays:
            raise CheckpointError(f"missing normalization stats in {path}")
        model = cls(cfg, n_mels, seed=0,
                    norm_mean=arrays["norm.mean"], norm_std=arrays["norm.std"],
                    dtype=dtype)
        expected = set(model._params)
        stored = set(arrays) - {"norm.mean", "norm.std"}
        if expected != stored:
            missing = sorted(expected - stored)
            extra = sorted(stored - expected)
            raise CheckpointError(
                f"checkpoint does not match config: missing {missing}, "
                f"unexpected {extra}")
        for name, p in model._params.items():
            if arrays[name].shape != p.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint "
                    f"{arrays[name].shape}, config wants {p.data.shape}")
            p.data = arrays[name].astype(dtype)
        return model
