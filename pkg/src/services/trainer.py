"""
Mini-batch SGD on the weighted joint objective.

One pass per epoch over a seeded permutation of the train split, followed by
an eval-mode validation pass that records the accuracy of every head.
"""

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import DataFormatError, DivergenceError, NonFiniteError
from src.core.logging import get_logger
from src.models.schemas import EpochRecord, TrainConfig, TrainLog
from src.nn.layers import BatchNorm
from src.nn.optim import SGD
from src.services.budget import one_hot_weights, validate_weights, weights_for
from src.services.data import SPLIT_TRAIN, SPLIT_VAL, Dataset
from src.services.network import ImpatientNet
from src.utils.retry import retry_with_backoff

logger = get_logger(__name__)


def _uses_batchnorm(net: ImpatientNet) -> bool:
    layers = list(net.backbone) + [layer for head in net.heads for layer in head.layers]
    return any(isinstance(layer, BatchNorm) for layer in layers)


def validate(net: ImpatientNet, data: Dataset, batch_size: int = 256) -> np.ndarray:
    """
    Accuracy of every head on `data`, computed in eval mode.

    Results do not depend on batch_size since eval mode uses running statistics.

    Raises:
        DataFormatError: empty dataset
    """
    if len(data) == 0:
        raise DataFormatError("cannot validate on an empty dataset")
    probs = net.predict_proba(data.images, batch_size)
    return (probs.argmax(axis=-1) == data.labels[None, :]).mean(axis=1)


def train(
    net: ImpatientNet,
    data: Dataset,
    cfg: TrainConfig,
    weights: Optional[Sequence[float]] = None,
) -> Tuple[ImpatientNet, TrainLog]:
    """
    Train `net` in place on the train split of `data`.

    Args:
        net: network to optimize
        data: dataset tagged with train and (optionally) val splits; without
            a val split the train split is used for validation
        cfg: optimizer and weighting settings
        weights: explicit head weights, overriding cfg.scheme

    Returns:
        The trained network and its per-epoch log

    Raises:
        DivergenceError: loss became non-finite or exceeded
            cfg.divergence_factor times the first batch loss
    """
    train_split = data.split(SPLIT_TRAIN)
    val_split = data.split(SPLIT_VAL)
    if len(train_split) == 0:
        raise DataFormatError("no training examples")
    if len(val_split) == 0:
        val_split = train_split

    w = validate_weights(weights, net.num_heads) if weights is not None else weights_for(cfg.scheme, net.num_heads)
    learning_rate = cfg.effective_learning_rate
    rng = np.random.default_rng([cfg.seed, 1])
    min_batch = 2 if _uses_batchnorm(net) else 1

    if cfg.freeze_backbone:
        parameters = [(p, g) for k in range(net.num_heads) for _, p, g in net.head_parameters(k)]
    else:
        parameters = [(p, g) for _, p, g in net.named_parameters()]
    optimizer = SGD(parameters, learning_rate, cfg.momentum)

    log = TrainLog(num_heads=net.num_heads)
    initial_loss: Optional[float] = None
    n = len(train_split)
    logger.info(
        "Starting training",
        examples=n,
        epochs=cfg.epochs,
        learning_rate=learning_rate,
        weights=[round(float(v), 6) for v in w],
        freeze_backbone=cfg.freeze_backbone,
    )

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        if cfg.freeze_backbone:
            for layer in net.backbone:
                layer.eval()

        order = rng.permutation(n)
        total = 0.0
        head_totals = np.zeros(net.num_heads)
        seen = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < min_batch:
                continue
            optimizer.zero_grad()
            try:
                result = net.joint_loss_backward(
                    train_split.images[idx],
                    train_split.labels[idx],
                    w,
                    weight_decay=cfg.weight_decay,
                    propagate_to_backbone=not cfg.freeze_backbone,
                )
            except NonFiniteError as e:
                logger.error("Training diverged", epoch=epoch, step=step, reason=str(e))
                raise DivergenceError(f"non-finite values at epoch {epoch}, step {step}: {e}",
                                      epoch, step, float("nan"), log) from e

            loss = result.total
            if initial_loss is None:
                initial_loss = loss
            if not np.isfinite(loss) or loss > cfg.divergence_factor * max(initial_loss, 1e-12):
                logger.error("Training diverged", epoch=epoch, step=step, total_loss=loss, initial_loss=initial_loss)
                raise DivergenceError(f"loss {loss:g} at epoch {epoch}, step {step} (initial {initial_loss:g})",
                                      epoch, step, loss, log)
            optimizer.step()

            total += loss * len(idx)
            head_totals += result.head_losses * len(idx)
            seen += len(idx)

        if seen == 0:
            raise DataFormatError(f"batch_size {cfg.batch_size} leaves no usable batch in {n} examples")

        accuracy = validate(net, val_split, cfg.eval_batch_size)
        record = EpochRecord(
            epoch=epoch,
            learning_rate=learning_rate,
            total_loss=total / seen,
            head_losses=(head_totals / seen).tolist(),
            val_accuracy=accuracy.tolist(),
        )
        log.records.append(record)
        logger.info(
            "Epoch finished",
            epoch=epoch,
            total_loss=round(record.total_loss, 6),
            val_accuracy=[round(a, 4) for a in record.val_accuracy],
        )

    return net, log


def train_with_retry(
    build_fn: Callable[[], ImpatientNet],
    data: Dataset,
    cfg: TrainConfig,
) -> Tuple[ImpatientNet, TrainLog]:
    """Train a fresh network, retrying with a halved learning rate after each divergence."""

    def attempt(learning_rate: float) -> Tuple[ImpatientNet, TrainLog]:
        return train(build_fn(), data, cfg.model_copy(update={"learning_rate": learning_rate}))

    return retry_with_backoff(
        attempt,
        initial_value=cfg.effective_learning_rate,
        max_attempts=cfg.retries + 1,
        backoff_factor=0.5,
        retry_on=(DivergenceError,),
    )


def train_heads_independently(
    net: ImpatientNet,
    data: Dataset,
    cfg: TrainConfig,
) -> Tuple[ImpatientNet, List[TrainLog]]:
    """
    Fit each head on its own on top of a frozen backbone.

    Baseline for comparing joint training with per-head training: the
    backbone is left untouched and head k is trained with one-hot weights.
    """
    frozen = cfg.model_copy(update={"freeze_backbone": True})
    logs = []
    for k in range(net.num_heads):
        logger.info("Training head independently", head=k + 1)
        _, log = train(net, data, frozen, weights=one_hot_weights(net.num_heads, k))
        logs.append(log)
    return net, logs
