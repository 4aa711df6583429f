"""Two-phase training loop.

Phase 1 jointly trains the feature extractor, the two agreement labelers,
the main classifier, and (when enabled) the gradient-reversed domain head on
strong synthetic, weak real, and unlabeled real clips. Between phases the
frozen labelers pseudo-label the weak and unlabeled pools wherever they agree
confidently. Phase 2 retrains the extractor and the main classifier (plus
the domain head) on true and pseudo labels, with undecided entries masked
out of the loss.

Ablation modes disable the domain head, the labeler pair, or both; modes
without the labeler pair train a single phase of equal total length so step
budgets stay comparable.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path
from zlib import crc32

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint, load_checkpoint
from .corpus import (
    DOMAIN_VALUE, SPLIT_STRONG, SPLIT_UNLABELED, SPLIT_WEAK, CorpusManifest,
    EventAnnotation, LabeledClip, clip_spectrogram,
)
from .errors import ConfigError, DomainlessBatchWarning, TrainingDiverged
from .frontend import FrontendConfig
from .losses import LabelTensor, domain_bce, labeler_orthogonality, \
    total_classification_loss
from .model import ADV_NONE, ADV_TIME, ADV_WHOLE, CLASSIFIER, LABELER_A, \
    LABELER_B, ModelConfig, SedModel
from .optim import Adam

PSL_POS = 1
PSL_NEG = 0
PSL_IGNORE = -1

# ablation mode -> (adv_mode, tri_training)
MODES = {
    "baseline": (ADV_NONE, False),
    "adv_whole": (ADV_WHOLE, False),
    "adv_time": (ADV_TIME, False),
    "tri": (ADV_NONE, True),
    "adv_whole_tri": (ADV_WHOLE, True),
    "adv_time_tri": (ADV_TIME, True),
}


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.001
    alpha: float = 1.0
    orth_weight: float = 1.0
    agree_threshold: float = 0.5
    iters_phase1: int = 2000
    iters_phase2: int = 2000
    seed: int = 0
    adv_mode: str = ADV_NONE
    tri_training: bool = False

    def __post_init__(self):
        if self.batch_size < 3:
            raise ConfigError(f"batch_size must be >= 3, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.orth_weight < 0:
            raise ConfigError(
                f"orth_weight must be >= 0, got {self.orth_weight}")
        if not 0.0 < self.agree_threshold < 1.0:
            raise ConfigError(f"agree_threshold must be in (0, 1), "
                              f"got {self.agree_threshold}")
        if self.iters_phase1 < 0 or self.iters_phase2 < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.adv_mode not in (ADV_NONE, ADV_WHOLE, ADV_TIME):
            raise ConfigError(f"unknown adv_mode {self.adv_mode!r}")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        if mode not in MODES:
            raise ConfigError(
                f"unknown mode {mode!r}; expected one of {sorted(MODES)}")
        adv_mode, tri = MODES[mode]
        return cls(adv_mode=adv_mode, tri_training=tri, **overrides)

    @property
    def mode(self) -> str:
        for name, pair in MODES.items():
            if pair == (self.adv_mode, self.tri_training):
                return name
        raise ConfigError("unreachable")  # every pair is a mode

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class PseudoLabelMask:
    """Agreement decisions for one clip: one state per class at clip level
    and per (frame, class). States: 1 decided-present, 0 decided-absent,
    -1 undecided (excluded from the loss)."""

    clip_state: np.ndarray
    frame_state: np.ndarray

    def __post_init__(self):
        self.clip_state = np.asarray(self.clip_state, dtype=np.int8)
        self.frame_state = np.asarray(self.frame_state, dtype=np.int8)
        valid = {PSL_POS, PSL_NEG, PSL_IGNORE}
        if not set(np.unique(self.clip_state)) <= valid or \
                not set(np.unique(self.frame_state)) <= valid:
            raise ConfigError("mask states must be in {1, 0, -1}")
        if self.frame_state.ndim != 2 or \
                self.frame_state.shape[1] != self.clip_state.shape[0]:
            raise ConfigError(
                f"frame state {self.frame_state.shape} does not match "
                f"{self.clip_state.shape[0]} classes")
        bad = (self.frame_state == PSL_POS) & (self.clip_state != PSL_POS)
        if bad.any():
            raise ConfigError("frame-level present requires clip-level present")


@dataclass
class StepLosses:
    loss_y: float
    loss_d: float
    loss_orth: float

    @property
    def total(self) -> float:
        return self.loss_y + self.loss_d + self.loss_orth


@dataclass
class Batch:
    frames: np.ndarray         # (N, T, B)
    clip_targets: np.ndarray   # (N, K)
    clip_mask: np.ndarray      # (N, K)
    frame_targets: np.ndarray  # (N, T', K)
    frame_mask: np.ndarray     # (N, T', K)
    domain_targets: np.ndarray  # (N,)


@dataclass
class RunResult:
    model: SedModel
    out_dir: Path
    final_path: Path
    log_path: Path
    config_path: Path
    phase1_path: Path | None = None
    masks_path: Path | None = None
    masks: dict[str, PseudoLabelMask] | None = None


def events_to_frame_targets(events: list[EventAnnotation], n_classes: int,
                            n_frames: int, hop_s: float) -> np.ndarray:
    """Rasterize events onto the model's frame grid; a frame is active iff
    its interval overlaps the event."""
    out = np.zeros((n_frames, n_classes), dtype=np.float32)
    for e in events:
        first = max(0, int(np.floor(e.onset_s / hop_s)))
        last = min(n_frames, int(np.ceil(e.offset_s / hop_s)))
        out[first:last, e.class_id] = 1.0
    return out


def agreement_states(p1: np.ndarray, p2: np.ndarray,
                     threshold: float) -> np.ndarray:
    """Elementwise two-labeler agreement: both above the threshold ->
    decided-present; both below its complement -> decided-absent; anything
    else (disagreement or low confidence) -> undecided."""
    p1 = np.asarray(p1)
    p2 = np.asarray(p2)
    if p1.shape != p2.shape:
        raise ConfigError(f"probability shapes differ: {p1.shape} vs {p2.shape}")
    out = np.full(p1.shape, PSL_IGNORE, dtype=np.int8)
    out[(p1 < 1.0 - threshold) & (p2 < 1.0 - threshold)] = PSL_NEG
    out[(p1 > threshold) & (p2 > threshold)] = PSL_POS
    return out


def pseudo_label_clip(frame_p1: np.ndarray, frame_p2: np.ndarray,
                      clip_p1: np.ndarray, clip_p2: np.ndarray,
                      threshold: float,
                      weak: tuple[int, ...] | None = None) -> PseudoLabelMask:
    """Build one clip's mask from labeler probabilities.

    Weak clips keep their given clip labels (never undecided) and only get
    frame decisions for their labeled classes; other classes are absent
    everywhere. Frame-level present with a non-present clip state is
    downgraded to undecided so frame activity never contradicts clip truth."""
    frame_state = agreement_states(frame_p1, frame_p2, threshold)
    if weak is not None:
        n_classes = clip_p1.shape[0]
        clip_state = np.full(n_classes, PSL_NEG, dtype=np.int8)
        clip_state[list(weak)] = PSL_POS
        absent = clip_state == PSL_NEG
        frame_state[:, absent] = PSL_NEG
    else:
        clip_state = agreement_states(clip_p1, clip_p2, threshold)
    conflict = (frame_state == PSL_POS) & (clip_state != PSL_POS)[None, :]
    frame_state[conflict] = PSL_IGNORE
    return PseudoLabelMask(clip_state, frame_state)


def mask_statistics(masks: dict[str, PseudoLabelMask],
                    n_classes: int) -> list[dict[str, float]]:
    """Per-class frame-state coverage percentages (sum to 100)."""
    out = []
    states = np.concatenate([m.frame_state for m in masks.values()], axis=0)
    for k in range(n_classes):
        col = states[:, k]
        n = len(col)
        out.append({
            "pos_pct": 100.0 * float(np.sum(col == PSL_POS)) / n,
            "neg_pct": 100.0 * float(np.sum(col == PSL_NEG)) / n,
            "ignore_pct": 100.0 * float(np.sum(col == PSL_IGNORE)) / n,
        })
    return out


@dataclass
class _SplitData:
    clips: list[LabeledClip]
    frames: np.ndarray         # (n, T, B) float32
    clip_targets: np.ndarray   # (n, K)
    clip_mask: np.ndarray
    frame_targets: np.ndarray  # (n, T', K)
    frame_mask: np.ndarray
    domain: np.ndarray         # (n,)

    def __len__(self):
        return len(self.clips)

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(self.frames[idx], self.clip_targets[idx],
                     self.clip_mask[idx], self.frame_targets[idx],
                     self.frame_mask[idx], self.domain[idx])


def _merge_batches(parts: list[Batch]) -> Batch:
    return Batch(*(np.concatenate([getattr(p, f.name) for p in parts], axis=0)
                   for f in fields(Batch)))


class Trainer:
    """Owns the model, the optimizer, the in-memory feature cache, and the
    batch sampler for one training run."""

    def __init__(self, train_cfg: TrainConfig, model_cfg: ModelConfig,
                 frontend_cfg: FrontendConfig, manifest: CorpusManifest,
                 cache_dir: str | Path | None = None):
        if manifest.n_classes != model_cfg.n_classes:
            raise ConfigError(
                f"model has {model_cfg.n_classes} classes but corpus has "
                f"{manifest.n_classes}")
        if frontend_cfg.n_frames % model_cfg.time_pool_factor:
            raise ConfigError("time_pool_factor must divide n_frames")
        self.cfg = train_cfg
        # the training config owns the adversarial settings
        self.model_cfg = replace(model_cfg, adv_mode=train_cfg.adv_mode,
                                 alpha=train_cfg.alpha)
        self.frontend_cfg = frontend_cfg
        self.manifest = manifest
        self.use_domain = train_cfg.adv_mode != ADV_NONE
        self.tri = train_cfg.tri_training
        self.t_out = frontend_cfg.n_frames // model_cfg.time_pool_factor
        self.hop_out = frontend_cfg.frame_hop_s * model_cfg.time_pool_factor

        self.strong = self._load_split(SPLIT_STRONG, cache_dir)
        self.weak = self._load_split(SPLIT_WEAK, cache_dir)
        if not len(self.strong) or not len(self.weak):
            raise ConfigError("training needs nonempty strong and weak splits")
        self.unlabeled = None
        if self.tri or self.use_domain:
            self.unlabeled = self._load_split(SPLIT_UNLABELED, cache_dir)
            if self.tri and not len(self.unlabeled):
                raise ConfigError(
                    f"mode {train_cfg.mode!r} needs unlabeled clips")
            if not len(self.unlabeled):
                self.unlabeled = None

        mean, std = self._norm_stats()
        self.model = SedModel(self.model_cfg, frontend_cfg.n_mels,
                              seed=train_cfg.seed, norm_mean=mean,
                              norm_std=std)
        self._rng = np.random.default_rng(
            np.random.SeedSequence((train_cfg.seed, crc32(b"batches"))))
        self.log: list[dict] = []
        self.masks: dict[str, PseudoLabelMask] | None = None

    # -- data preparation -----------------------------------------------------

    def _load_split(self, split: str, cache_dir) -> _SplitData:
        clips = self.manifest.split(split)
        n, k = len(clips), self.manifest.n_classes
        frames = np.zeros((n, self.frontend_cfg.n_frames,
                           self.frontend_cfg.n_mels), dtype=np.float32)
        clip_targets = np.zeros((n, k), dtype=np.float32)
        clip_mask = np.zeros((n, k), dtype=np.float32)
        frame_targets = np.zeros((n, self.t_out, k), dtype=np.float32)
        frame_mask = np.zeros((n, self.t_out, k), dtype=np.float32)
        domain = np.zeros(n, dtype=np.float32)
        for i, clip in enumerate(clips):
            spec = clip_spectrogram(self.manifest, clip, self.frontend_cfg,
                                    cache_dir)
            frames[i] = spec.frames
            domain[i] = DOMAIN_VALUE[clip.domain]
            if split == SPLIT_STRONG:
                frame_targets[i] = events_to_frame_targets(
                    clip.events, k, self.t_out, self.hop_out)
                clip_targets[i] = frame_targets[i].max(axis=0)
                clip_mask[i] = 1.0
                frame_mask[i] = 1.0
            elif split == SPLIT_WEAK:
                clip_targets[i, list(clip.weak)] = 1.0
                clip_mask[i] = 1.0
        return _SplitData(clips, frames, clip_targets, clip_mask,
                          frame_targets, frame_mask, domain)

    def _norm_stats(self) -> tuple[np.ndarray, np.ndarray]:
        groups = [self.strong, self.weak]
        if self.unlabeled is not None:
            groups.append(self.unlabeled)
        total = sum(g.frames.shape[0] * g.frames.shape[1] for g in groups)
        s = sum(g.frames.sum(axis=(0, 1), dtype=np.float64) for g in groups)
        sq = sum((g.frames.astype(np.float64) ** 2).sum(axis=(0, 1))
                 for g in groups)
        mean = s / total
        var = np.maximum(sq / total - mean ** 2, 0.0)
        return mean.astype(np.float32), np.sqrt(var).astype(np.float32)

    # -- batching -------------------------------------------------------------

    def _groups(self, phase: int) -> list[_SplitData]:
        """Stratified thirds. Unlabeled clips join phase-1 batches only when
        the domain head can consume them, and phase-2 batches only when they
        carry pseudo-labels; otherwise they would be dead rows."""
        groups = [self.strong, self.weak]
        if self.unlabeled is not None and \
                ((phase == 1 and self.use_domain) or (phase == 2 and self.tri)):
            groups.append(self.unlabeled)
        return groups

    def sample_batch(self, phase: int = 1) -> Batch:
        groups = self._groups(phase)
        base = self.cfg.batch_size // len(groups)
        quotas = [base + (1 if r < self.cfg.batch_size % len(groups) else 0)
                  for r in range(len(groups))]
        parts = [g.take(self._rng.integers(0, len(g), size=q))
                 for g, q in zip(groups, quotas)]
        return _merge_batches(parts)

    # -- steps ----------------------------------------------------------------

    def _train_step(self, optimizer: Adam, batch: Batch, heads: list[str],
                    orth_weight: float) -> StepLosses:
        optimizer.zero_grad()
        labels = LabelTensor(batch.clip_targets, batch.frame_targets,
                             batch.frame_mask, batch.clip_mask)
        feats = self.model.extract_features(batch.frames)
        loss_y = None
        for head in heads:
            frame, clip = self.model.classify_head(feats, head)
            term = total_classification_loss(clip, frame, labels)
            loss_y = term if loss_y is None else loss_y + term
        total = loss_y
        orth_value = 0.0
        if orth_weight > 0 and LABELER_A in heads and LABELER_B in heads:
            w1, w2 = self.model.labeler_frame_weights()
            orth = labeler_orthogonality(w1, w2)
            total = total + orth_weight * orth
            orth_value = orth_weight * orth.item()
        domain_value = 0.0
        if self.use_domain:
            if len(np.unique(batch.domain_targets)) < 2:
                warnings.warn("batch holds a single domain; skipping the "
                              "domain loss this step", DomainlessBatchWarning)
            else:
                probs = self.model.classify_domain(feats)
                loss_d = domain_bce(probs, batch.domain_targets)
                total = total + loss_d
                domain_value = loss_d.item()
        losses = StepLosses(loss_y.item(), domain_value, orth_value)
        if not np.isfinite(losses.total):
            raise TrainingDiverged(f"non-finite loss {losses}")
        ad.backward(total)
        optimizer.step()
        return losses

    def phase1_step(self, optimizer: Adam, batch: Batch) -> StepLosses:
        heads = [LABELER_A, LABELER_B, CLASSIFIER] if self.tri else [CLASSIFIER]
        orth = self.cfg.orth_weight if self.tri else 0.0
        return self._train_step(optimizer, batch, heads, orth)

    def phase2_step(self, optimizer: Adam, batch: Batch) -> StepLosses:
        return self._train_step(optimizer, batch, [CLASSIFIER], 0.0)

    # -- pseudo-labeling ------------------------------------------------------

    def _head_probs(self, frames: np.ndarray, head: str,
                    batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        frame_out, clip_out = [], []
        with ad.no_grad():
            for i in range(0, len(frames), batch_size):
                feats = self.model.extract_features(frames[i:i + batch_size])
                frame, clip = self.model.classify_head(feats, head)
                frame_out.append(frame.data)
                clip_out.append(clip.data)
        return np.concatenate(frame_out), np.concatenate(clip_out)

    def pseudo_label(self) -> dict[str, PseudoLabelMask]:
        """Label the weak and unlabeled pools with the frozen labeler pair."""
        masks: dict[str, PseudoLabelMask] = {}
        pools = [(self.weak, True)]
        if self.unlabeled is not None:
            pools.append((self.unlabeled, False))
        for data, is_weak in pools:
            f1, c1 = self._head_probs(data.frames, LABELER_A)
            f2, c2 = self._head_probs(data.frames, LABELER_B)
            for i, clip in enumerate(data.clips):
                masks[clip.id] = pseudo_label_clip(
                    f1[i], f2[i], c1[i], c2[i], self.cfg.agree_threshold,
                    weak=clip.weak if is_weak else None)
        return masks

    def _apply_masks(self, masks: dict[str, PseudoLabelMask]) -> None:
        """Rewrite the weak/unlabeled targets in place for phase 2."""
        pools = [(self.weak, True)]
        if self.unlabeled is not None:
            pools.append((self.unlabeled, False))
        for data, is_weak in pools:
            for i, clip in enumerate(data.clips):
                mask = masks[clip.id]
                data.frame_targets[i] = (mask.frame_state == PSL_POS)
                data.frame_mask[i] = (mask.frame_state != PSL_IGNORE)
                if not is_weak:
                    data.clip_targets[i] = (mask.clip_state == PSL_POS)
                    data.clip_mask[i] = (mask.clip_state != PSL_IGNORE)

    # -- full run -------------------------------------------------------------

    def _phase1_params(self):
        params = self.model.feature_parameters()
        heads = [LABELER_A, LABELER_B, CLASSIFIER] if self.tri else [CLASSIFIER]
        for head in heads:
            params += self.model.head_parameters(head)
        if self.use_domain:
            params += self.model.domain_parameters()
        return params

    def _phase2_params(self):
        params = self.model.feature_parameters() \
            + self.model.head_parameters(CLASSIFIER)
        if self.use_domain:
            params += self.model.domain_parameters()
        return params

    def run(self, out_dir: str | Path) -> RunResult:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        config_path = out / "config.json"
        config_path.write_text(json.dumps({
            "train": self.cfg.to_dict(),
            "model": self.model_cfg.to_dict(),
            "frontend": self.frontend_cfg.to_dict(),
        }, indent=2, sort_keys=True) + "\n")
        log_path = out / "log.jsonl"
        phase1_path = None
        masks_path = None
        step = 0
        iters1 = self.cfg.iters_phase1
        iters2 = self.cfg.iters_phase2
        with open(log_path, "w") as log_file:
            opt = Adam(self._phase1_params(), lr=self.cfg.lr)
            n_phase1 = iters1 if self.tri else iters1 + iters2
            for _ in range(n_phase1):
                step += 1
                losses = self.phase1_step(opt, self.sample_batch(1))
                self._log_step(log_file, step, 1, losses)
            if self.tri:
                phase1_path = out / "phase1.ckpt"
                self.model.save(phase1_path)
                self.masks = self.pseudo_label()
                masks_path = out / "masks.bin"
                save_masks(masks_path, self.masks)
                self._apply_masks(self.masks)
                opt = Adam(self._phase2_params(), lr=self.cfg.lr)
                for _ in range(iters2):
                    step += 1
                    losses = self.phase2_step(opt, self.sample_batch(2))
                    self._log_step(log_file, step, 2, losses)
        final_path = out / "final.ckpt"
        self.model.save(final_path)
        return RunResult(self.model, out, final_path, log_path, config_path,
                         phase1_path, masks_path, self.masks)

    def _log_step(self, log_file, step: int, phase: int,
                  losses: StepLosses) -> None:
        record = {"step": step, "phase": phase, "loss_y": losses.loss_y,
                  "loss_d": losses.loss_d, "loss_orth": losses.loss_orth,
                  "lr": self.cfg.lr}
        self.log.append(record)
        log_file.write(json.dumps(record) + "\n")


def save_masks(path: str | Path, masks: dict[str, PseudoLabelMask]) -> None:
    arrays = {}
    for clip_id, mask in masks.items():
        arrays[f"{clip_id}/clip"] = mask.clip_state.astype(np.float32)
        arrays[f"{clip_id}/frame"] = mask.frame_state.astype(np.float32)
    save_checkpoint(path, arrays)


def load_masks(path: str | Path) -> dict[str, PseudoLabelMask]:
    arrays = load_checkpoint(path)
    masks = {}
    for name, arr in arrays.items():
        if not name.endswith("/clip"):
            continue
        clip_id = name[: -len("/clip")]
        masks[clip_id] = PseudoLabelMask(
            arr.astype(np.int8), arrays[f"{clip_id}/frame"].astype(np.int8))
    return masks


def run(train_cfg: TrainConfig, model_cfg: ModelConfig,
        frontend_cfg: FrontendConfig, manifest: CorpusManifest,
        out_dir: str | Path, cache_dir: str | Path | None = None) -> RunResult:
    """Train one configuration end to end and write the run directory
    (config.json, log.jsonl, final.ckpt, and for labeler-pair modes also
    phase1.ckpt and masks.bin)."""
    trainer = Trainer(train_cfg, model_cfg, frontend_cfg, manifest, cache_dir)
    return trainer.run(out_dir)
