"""Training modes and the step loop.

Three modes share one loop and differ only in the loss:

* ``wam``                 -- translation loss + weighted batchwise MMD
* ``transformer-only``    -- translation loss alone (the MMD ablation)
* ``supervised-landmark`` -- translation loss + mean L2 distance over a
                             per-epoch sample of known word pairs
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import transformer as tfm
from .autodiff import Tensor
from . import autodiff as ad
from .checkpoint import save_checkpoint
from .corpus import Batch, Dictionary, Vocab, make_batches
from .mmd import AlignConfig, KernelConfig, batch_mmd_from_tables
from .optim import Adam, LrSchedule
from .transformer import ModelParams, TransformerConfig

MODES = ("wam", "transformer-only", "supervised-landmark")

LOG_FIELDS = ("step", "L", "L_T", "L_M", "landmark_loss", "lr")


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries a diagnostic snapshot."""

    def __init__(self, step: int, diagnostics: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.diagnostics = diagnostics


@dataclass
class LandmarkSet:
    """Known (source id, target id) anchor pairs with a per-epoch sample
    fraction."""

    pairs: list[tuple[int, int]]
    sample_fraction: float = 0.5

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_dictionary(cls, dictionary: Dictionary, src_vocab: Vocab,
                        tgt_vocab: Vocab, sample_fraction: float = 0.5) -> "LandmarkSet":
        pairs = [
            (src_vocab.id_of(s), tgt_vocab.id_of(t))
            for s, t in dictionary.pairs
            if s in src_vocab and t in tgt_vocab
        ]
        return cls(pairs=pairs, sample_fraction=sample_fraction)


def landmark_l2_loss(params: ModelParams, landmarks: LandmarkSet, seed) -> Tensor:
    """Mean L2 distance between the (unscaled) embeddings of a seeded sample
    of ceil(fraction * len) landmark pairs."""
    if len(landmarks) == 0:
        raise ValueError("landmark loss: empty landmark set")
    rng = np.random.default_rng(seed)
    k = math.ceil(landmarks.sample_fraction * len(landmarks))
    chosen = rng.choice(len(landmarks), size=k, replace=False)
    src_ids = np.array([landmarks.pairs[i][0] for i in chosen], dtype=np.int64)
    tgt_ids = np.array([landmarks.pairs[i][1] for i in chosen], dtype=np.int64)
    e_s = ad.gather(params.source_embedding.weight, src_ids)
    e_t = ad.gather(params.target_embedding.weight, tgt_ids)
    diff = e_s - e_t
    return ad.sqrt((diff * diff).sum(axis=-1)).mean()


def wam_loss(batch: Batch, params: ModelParams, cfg: TransformerConfig,
             kernel_cfg: KernelConfig = KernelConfig(),
             align_cfg: AlignConfig = AlignConfig(),
             train_mode: bool = True, rng=None):
    """Combined objective L = L_T + weight * L_M; returns (L, L_T, L_M)."""
    logits = tfm.forward(batch, params, cfg, train_mode, rng)
    loss_t = tfm.label_smoothed_loss(logits, batch.target[:, 1:], cfg.label_smoothing)
    scale = 1.0 if align_cfg.use_unscaled_embeddings else float(np.sqrt(cfg.d_model))
    loss_m, _ = batch_mmd_from_tables(
        params.source_embedding.weight, params.target_embedding.weight,
        batch, kernel_cfg, align_cfg.exclude_special_tokens, scale)
    return loss_t + loss_m * align_cfg.mmd_weight, loss_t, loss_m


@dataclass
class TrainResult:
    params: ModelParams
    records: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.records[-1]["L"]


def format_log_line(record: dict) -> str:
    return "\t".join(repr(record[f]) if f != "step" else str(record[f])
                     for f in LOG_FIELDS)


def write_metrics_log(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("\t".join(LOG_FIELDS) + "\n")
        for rec in records:
            fh.write(format_log_line(rec) + "\n")


def train_model(pairs, src_vocab: Vocab, tgt_vocab: Vocab,
                cfg: TransformerConfig, mode: str, steps: int, seed: int,
                token_budget: int = 512,
                kernel_cfg: KernelConfig = KernelConfig(),
                align_cfg: AlignConfig = AlignConfig(),
                landmarks: LandmarkSet | None = None,
                warmup_steps: int = 200,
                beta1: float = 0.9, beta2: float = 0.98, epsilon: float = 1e-9,
                checkpoint_dir=None, checkpoint_interval: int = 0) -> TrainResult:
    """Run ``steps`` optimizer steps over encoded training pairs.

    Batches are rebuilt (reshuffled) each epoch from a seed derived from
    (seed, epoch); landmark samples are redrawn per epoch the same way.
    Fully deterministic for a fixed seed.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "supervised-landmark":
        if landmarks is None or len(landmarks) == 0:
            raise ValueError("supervised-landmark mode needs a non-empty landmark set")
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")

    params = tfm.init_params(cfg, len(src_vocab), len(tgt_vocab), seed,
                             src_vocab.language, tgt_vocab.language)
    optimizer = Adam(params.parameters(), beta1=beta1, beta2=beta2, epsilon=epsilon)
    schedule = LrSchedule(cfg.d_model, warmup_steps)
    dropout_rng = np.random.default_rng([seed, 0xD0]) if cfg.dropout > 0 else None

    records: list[dict] = []
    step = 0
    epoch = 0
    diverged_probe = {}
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    while step < steps:
        batches = make_batches(pairs, token_budget, seed=_derive_seed(seed, epoch))
        epoch_seed = _derive_seed(seed, epoch, salt=1)
        for batch in batches:
            if step >= steps:
                break
            step += 1
            lr = schedule.at(step)
            loss_m_val = math.nan
            landmark_val = math.nan
            if mode == "wam":
                loss, loss_t, loss_m = wam_loss(
                    batch, params, cfg, kernel_cfg, align_cfg, True, dropout_rng)
                loss_m_val = float(loss_m.data)
            elif mode == "transformer-only":
                logits = tfm.forward(batch, params, cfg, True, dropout_rng)
                loss_t = tfm.label_smoothed_loss(
                    logits, batch.target[:, 1:], cfg.label_smoothing)
                loss = loss_t
            else:
                logits = tfm.forward(batch, params, cfg, True, dropout_rng)
                loss_t = tfm.label_smoothed_loss(
                    logits, batch.target[:, 1:], cfg.label_smoothing)
                lm = landmark_l2_loss(params, landmarks, epoch_seed)
                landmark_val = float(lm.data)
                loss = loss_t + lm

            loss_val = float(loss.data)
            record = {
                "step": step,
                "L": loss_val,
                "L_T": float(loss_t.data),
                "L_M": loss_m_val,
                "landmark_loss": landmark_val,
                "lr": lr,
            }
            if not math.isfinite(loss_val):
                diverged_probe = {
                    "record": record,
                    "recent": records[-5:],
                    "param_norms": {
                        p.name: float(np.linalg.norm(p.data))
                        for p in params.parameters()
                    },
                }
                raise TrainingDivergedError(step, diverged_probe)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            records.append(record)

            if (checkpoint_dir is not None and checkpoint_interval > 0
                    and step % checkpoint_interval == 0 and step < steps):
                save_checkpoint(checkpoint_dir / f"step_{step:06d}.npz",
                                params, cfg, src_vocab, tgt_vocab)
        epoch += 1

    return TrainResult(params=params, records=records)


def _derive_seed(seed: int, epoch: int, salt: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(epoch, salt))
