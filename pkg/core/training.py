"""Distillation pre-training and multi-similarity fine-tuning drivers."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import torch
from torch import nn

from config.settings import (
    DEFAULT_LOSS,
    DISTILL_BATCH_SIZE,
    DISTILL_OPTIMIZER,
    FINETUNE_OPTIMIZER,
    FINETUNE_PLACES_PER_BATCH,
    FREEZE_FRACTION,
    IMAGES_PER_PLACE,
    LossConfig,
    OptimizerConfig,
)
from core import numerics
from core.backbone import freeze_prefix
from core.errors import ConfigurationError, DataError, DimensionError
from core.losses import ms_loss, mse_distill_loss
from core.model import PlaceModel, TeacherModel

logger = logging.getLogger(__name__)

DISTILL_TARGETS = ("tokens", "descriptor", "both")
ORACLE_MODES = ("in_process_toy", "precomputed_file")


@dataclass
class OptimizerState:
    """A ``torch.optim`` Adam/AdamW instance over named tensors."""

    cfg: OptimizerConfig
    params: dict[str, torch.Tensor]
    optimizer: torch.optim.Optimizer
    step: int = 0

    def _moment(self, key: str) -> dict[str, torch.Tensor]:
        state = self.optimizer.state
        return {name: state[p][key] for name, p in self.params.items() if key in state[p]}

    @property
    def exp_avg(self) -> dict[str, torch.Tensor]:
        return self._moment("exp_avg")

    @property
    def exp_avg_sq(self) -> dict[str, torch.Tensor]:
        return self._moment("exp_avg_sq")


def init_optimizer(cfg: OptimizerConfig, params: dict[str, torch.Tensor]) -> OptimizerState:
    factory = torch.optim.AdamW if cfg.kind == "adamw" else torch.optim.Adam
    optimizer = factory(
        list(params.values()), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )
    return OptimizerState(cfg=cfg, params=dict(params), optimizer=optimizer)


def _library_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: OptimizerState,
    *,
    kind: str,
    mask: dict[str, bool] | None,
) -> None:
    if state.cfg.kind != kind:
        raise ConfigurationError(f"optimizer state was built for {state.cfg.kind}, not {kind}")
    for name, param in params.items():
        if state.params.get(name) is not param:
            raise ConfigurationError(f"tensor '{name}' is not registered with this optimizer")
        grad = grads.get(name)
        if grad is not None and grad.shape != param.shape:
            raise DimensionError(
                f"gradient for '{name}' has shape {tuple(grad.shape)}, parameter {tuple(param.shape)}"
            )
        frozen = mask is not None and not mask.get(name, True)
        param.grad = None if frozen or grad is None else grad.detach().to(param.dtype)
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1


def adam_step(params, grads, state: OptimizerState, *, mask: dict[str, bool] | None = None) -> None:
    """One ``torch.optim.Adam`` update.

    ``mask[name] == False`` or a missing grad leaves that tensor and its moments untouched.
    """
    _library_step(params, grads, state, kind="adam", mask=mask)


def adamw_step(params, grads, state: OptimizerState, *, mask: dict[str, bool] | None = None) -> None:
    """One ``torch.optim.AdamW`` update (decoupled decay ``theta * (1 - lr * wd)``)."""
    _library_step(params, grads, state, kind="adamw", mask=mask)


def optimizer_step(params, grads, state: OptimizerState, *, mask: dict[str, bool] | None = None) -> None:
    step = adamw_step if state.cfg.kind == "adamw" else adam_step
    step(params, grads, state, mask=mask)


class TeacherOracle:
    """Frozen teacher features, computed in process or read from a precomputed table."""

    def __init__(
        self,
        mode: str,
        *,
        model: TeacherModel | None = None,
        table: dict[str, torch.Tensor] | None = None,
    ) -> None:
        if mode not in ORACLE_MODES:
            raise ConfigurationError(f"teacher oracle mode must be one of {ORACLE_MODES}, got '{mode}'")
        if mode == "in_process_toy" and model is None:
            raise ConfigurationError("in-process teacher oracle needs a teacher model")
        if mode == "precomputed_file" and not table:
            raise ConfigurationError("precomputed teacher oracle needs a feature table")
        self.mode = mode
        self.model = model
        self.table = table or {}
        if model is not None:
            model.requires_grad_(False)

    @classmethod
    def in_process(cls, model: TeacherModel) -> TeacherOracle:
        return cls("in_process_toy", model=model)

    @classmethod
    def from_table(cls, table: dict[str, torch.Tensor]) -> TeacherOracle:
        return cls("precomputed_file", table=table)

    def _lookup(self, kind: str, image_ids: list[str]) -> torch.Tensor:
        rows = []
        for image_id in image_ids:
            key = f"{kind}/{image_id}"
            if key not in self.table:
                raise DataError(f"precomputed teacher table has no entry '{key}'")
            rows.append(self.table[key])
        return torch.stack(rows)

    @torch.no_grad()
    def tokens(self, images: torch.Tensor, image_ids: list[str] | None = None) -> torch.Tensor:
        if self.model is not None:
            return self.model.forward_tokens(images)
        return self._lookup("tokens", image_ids or [])

    @torch.no_grad()
    def descriptor(self, images: torch.Tensor, image_ids: list[str] | None = None) -> torch.Tensor:
        if self.model is not None:
            return self.model.describe(images).vector
        return self._lookup("descriptor", image_ids or [])


@dataclass(frozen=True)
class StageResult:
    stage: str
    state: dict[str, torch.Tensor]
    curve: pd.DataFrame

    @property
    def initial_loss(self) -> float:
        return float(self.curve["loss"].iloc[0])

    @property
    def final_loss(self) -> float:
        return float(self.curve["loss"].iloc[-1])


def _named_trainable(model: nn.Module) -> dict[str, torch.Tensor]:
    return {name: p for name, p in model.named_parameters() if p.requires_grad}


def _snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {name: t.detach().clone() for name, t in model.state_dict().items()}


def _apply_grads(loss: torch.Tensor, state: OptimizerState) -> None:
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.step += 1


def _curve(stage: str, losses: list[float]) -> pd.DataFrame:
    return pd.DataFrame({"stage": stage, "step": range(len(losses)), "loss": losses})


def distill_loss(
    student: PlaceModel,
    teacher: TeacherOracle,
    images: torch.Tensor,
    *,
    target: str = "tokens",
    image_ids: list[str] | None = None,
) -> torch.Tensor:
    if target not in DISTILL_TARGETS:
        raise ConfigurationError(f"distill target must be one of {DISTILL_TARGETS}, got '{target}'")
    loss = images.new_zeros(())
    if target in ("tokens", "both"):
        loss = loss + mse_distill_loss(student.forward_tokens(images), teacher.tokens(images, image_ids))
    if target in ("descriptor", "both"):
        loss = loss + mse_distill_loss(student(images), teacher.descriptor(images, image_ids))
    return loss


def distill_stage(
    student: PlaceModel,
    teacher: TeacherOracle,
    images: torch.Tensor,
    *,
    epochs: int = 1,
    batch_size: int = DISTILL_BATCH_SIZE,
    optimizer: OptimizerConfig = DISTILL_OPTIMIZER,
    target: str = "tokens",
    image_ids: list[str] | None = None,
    seed: int = 0,
) -> StageResult:
    """Regress the student onto the teacher with every student parameter trainable."""
    if images.shape[0] == 0:
        raise DataError("distillation needs at least one training image")
    student.requires_grad_(True)
    student.train()
    state = init_optimizer(optimizer, _named_trainable(student))
    generator = torch.Generator().manual_seed(seed)
    losses: list[float] = []
    for epoch in range(epochs):
        order = torch.randperm(images.shape[0], generator=generator)
        for start in range(0, len(order), batch_size):
            index = order[start : start + batch_size]
            ids = [image_ids[i] for i in index.tolist()] if image_ids else None
            loss = distill_loss(student, teacher, images[index], target=target, image_ids=ids)
            numerics.ensure_finite(loss, "distillation loss")
            _apply_grads(loss, state)
            losses.append(float(loss.detach()))
            logger.debug("distill epoch=%d step=%d loss=%.6f", epoch, len(losses) - 1, losses[-1])
        logger.info("Distillation epoch %d/%d: last loss %.6f", epoch + 1, epochs, losses[-1])
    return StageResult("distill", _snapshot(student), _curve("distill", losses))


def place_batches(
    place_ids: list[str],
    *,
    places_per_batch: int,
    images_per_place: int = IMAGES_PER_PLACE,
    generator: torch.Generator,
) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Groups of places, each contributing ``images_per_place`` image indices.

    Places with too few images are resampled with replacement. A trailing
    group with fewer than two places is dropped (no negatives to mine).
    """
    if places_per_batch < 2:
        raise ConfigurationError(f"places_per_batch must be at least 2, got {places_per_batch}")
    members: dict[str, list[int]] = {}
    for index, place in enumerate(place_ids):
        members.setdefault(place, []).append(index)
    places = sorted(members)
    label_of = {place: i for i, place in enumerate(places)}
    order = torch.randperm(len(places), generator=generator).tolist()
    batches = []
    for start in range(0, len(order), places_per_batch):
        group = [places[i] for i in order[start : start + places_per_batch]]
        if len(group) < 2:
            break
        indices, labels = [], []
        for place in group:
            pool = torch.tensor(members[place])
            if len(pool) >= images_per_place:
                pick = pool[torch.randperm(len(pool), generator=generator)[:images_per_place]]
            else:
                logger.info(
                    "Place %s has %d images; sampling %d with replacement", place, len(pool), images_per_place
                )
                pick = pool[torch.randint(len(pool), (images_per_place,), generator=generator)]
            indices.append(pick)
            labels.append(torch.full((images_per_place,), label_of[place]))
        batches.append((torch.cat(indices), torch.cat(labels)))
    return batches


def finetune_stage(
    student: PlaceModel,
    images: torch.Tensor,
    place_ids: list[str],
    *,
    epochs: int = 1,
    places_per_batch: int = FINETUNE_PLACES_PER_BATCH,
    optimizer: OptimizerConfig = FINETUNE_OPTIMIZER,
    loss_cfg: LossConfig = DEFAULT_LOSS,
    freeze_fraction: float = FREEZE_FRACTION,
    use_encoder: bool = True,
    seed: int = 0,
    stage: str = "finetune",
) -> StageResult:
    """Metric-learning fine-tuning with the backbone prefix frozen."""
    if images.shape[0] != len(place_ids):
        raise DimensionError(f"{images.shape[0]} images but {len(place_ids)} place labels")
    student.requires_grad_(True)
    mask = freeze_prefix(student.backbone, freeze_fraction)
    student.train()
    state = init_optimizer(optimizer, _named_trainable(student))
    generator = torch.Generator().manual_seed(seed)
    losses: list[float] = []
    for epoch in range(epochs):
        batches = place_batches(place_ids, places_per_batch=places_per_batch, generator=generator)
        if not batches:
            raise DataError("fine-tuning needs images from at least two places")
        for index, labels in batches:
            descriptors = student(images[index], use_encoder=use_encoder)
            loss = ms_loss(descriptors, labels, loss_cfg)
            numerics.ensure_finite(loss, "multi-similarity loss")
            _apply_grads(loss, state)
            losses.append(float(loss.detach()))
        logger.info("%s epoch %d/%d: last loss %.6f", stage, epoch + 1, epochs, losses[-1])
    logger.debug("fine-tune mask: %d frozen backbone tensors", sum(not v for v in mask.values()))
    return StageResult(stage, _snapshot(student), _curve(stage, losses))


def write_loss_curve(curve: pd.DataFrame, path: str | Path, *, plot: bool = False) -> Path:
    """Write ``(stage, step, loss)`` rows as CSV and optionally a PNG next to it."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    curve.to_csv(out, index=False)
    if plot:
        try:
            import matplotlib

            matplotlib.use("Agg")
            import matplotlib.pyplot as plt
        except ImportError:
            logger.warning("matplotlib not available; skipping loss plot for %s", out)
            return out
        fig, ax = plt.subplots(figsize=(6, 3))
        for stage, rows in curve.groupby("stage"):
            ax.plot(rows["step"], rows["loss"], label=str(stage))
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out.with_suffix(".png"))
        plt.close(fig)
    return out


__all__ = [
    "DISTILL_TARGETS",
    "OptimizerState",
    "StageResult",
    "TeacherOracle",
    "adam_step",
    "adamw_step",
    "distill_loss",
    "distill_stage",
    "finetune_stage",
    "init_optimizer",
    "optimizer_step",
    "place_batches",
    "write_loss_curve",
]
