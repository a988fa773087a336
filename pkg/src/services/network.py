"""
Impatient network: a backbone with K early-prediction heads.

Head k reads the output of backbone layer attach_point(k), so every head
shares the backbone prefix in front of it. A joint forward pass evaluates the
backbone once and every head on the way; the joint backward pass injects each
head's weighted gradient at its attach point and lets the shared layers
accumulate the contributions.
"""

from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import ConfigurationError, ShapeMismatchError
from src.core.logging import get_logger
from src.models.schemas import ArchitectureConfig, HeadKind, HeadSpec, LayerSpec, LayerType
from src.nn.layers import (
    AvgPoolGlobal,
    AvgPoolGrid,
    BatchNorm,
    Conv2D,
    FullyConnected,
    Layer,
    MaxPool2D,
    ReLU,
    Sequential,
    Shape,
)
from src.nn.losses import softmax, softmax_cross_entropy
from src.services.budget import validate_weights

logger = get_logger(__name__)

# parameter names that receive L2 regularization
_DECAYED = ("weight",)


@dataclass(frozen=True)
class StagedPrediction:
    """Class probabilities of every head, shaped (K, N, C), with optional cost stamps."""

    probabilities: np.ndarray
    costs: Optional[Tuple[int, ...]] = None

    @property
    def num_heads(self) -> int:
        return int(self.probabilities.shape[0])

    def predictions(self) -> np.ndarray:
        """(K, N) argmax per head; ties resolve to the lowest class index."""
        return self.probabilities.argmax(axis=-1)


@dataclass(frozen=True)
class JointLoss:
    head_losses: np.ndarray
    weights: np.ndarray
    weighted_loss: float
    regularization: float

    @property
    def total(self) -> float:
        return self.weighted_loss + self.regularization


def _build_layer(spec: LayerSpec, in_shape: Shape, rng: np.random.Generator, dtype) -> Layer:
    if spec.type == LayerType.CONV:
        if len(in_shape) != 3:
            raise ConfigurationError(f"conv layer needs a spatial input, got shape {in_shape}")
        return Conv2D(in_shape[0], spec.out_channels, spec.kernel_size, spec.padding, spec.stride, rng, dtype)
    if spec.type == LayerType.BATCHNORM:
        return BatchNorm(in_shape[0], dtype=dtype)
    if spec.type == LayerType.RELU:
        return ReLU()
    if spec.type == LayerType.MAXPOOL:
        return MaxPool2D(spec.size)
    if spec.type == LayerType.FC:
        return FullyConnected(int(np.prod(in_shape)), spec.out_features, rng, dtype)
    raise ConfigurationError(f"unsupported layer type {spec.type}")


def _build_head(spec: HeadSpec, in_shape: Shape, num_classes: int, rng: np.random.Generator, dtype) -> Sequential:
    layers: List[Layer] = []
    if spec.kind == HeadKind.AVG:
        if len(in_shape) != 3:
            raise ConfigurationError(f"AVG head at layer {spec.attach_point} needs a spatial input")
        layers.append(AvgPoolGlobal())
    elif spec.kind == HeadKind.AVG4X4:
        if len(in_shape) != 3 or min(in_shape[1], in_shape[2]) < 4:
            raise ConfigurationError(
                f"AVG4x4 head at layer {spec.attach_point} needs spatial extent >= 4, got {in_shape}"
            )
        layers.append(AvgPoolGrid(4))
    shape = Sequential(layers).output_shape(in_shape)
    if spec.hidden_units:
        layers.append(FullyConnected(int(np.prod(shape)), spec.hidden_units, rng, dtype))
        layers.append(ReLU())
        shape = (spec.hidden_units,)
    layers.append(FullyConnected(int(np.prod(shape)), num_classes, rng, dtype))
    return Sequential(layers)


class ImpatientNet:
    """Backbone layers plus K heads attached at strictly increasing layer indices."""

    def __init__(
        self,
        architecture: ArchitectureConfig,
        backbone: List[Layer],
        heads: List[Sequential],
        attach_points: List[int],
    ):
        self.architecture = architecture
        self.backbone = backbone
        self.heads = heads
        self.attach_points = attach_points
        self._head_at = {point: k for k, point in enumerate(attach_points)}

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def build(cls, architecture: ArchitectureConfig, seed: int = 0, dtype=np.float32) -> "ImpatientNet":
        """
        Build and initialize a network from its architecture description.

        Raises:
            ConfigurationError: attach point past the backbone end, unordered
                attach points, last head not at the backbone output, or a
                head kind that does not fit the activation at its attach point
        """
        layer_specs = architecture.resolved_layers()
        head_specs = architecture.resolved_heads()
        if not layer_specs:
            raise ConfigurationError("backbone needs at least one layer")
        if not head_specs:
            raise ConfigurationError("at least one head is required")
        points = [h.attach_point for h in head_specs]
        if any(p >= len(layer_specs) for p in points):
            raise ConfigurationError(f"attach point past backbone end ({len(layer_specs)} layers): {points}")
        if any(b <= a for a, b in zip(points, points[1:])):
            raise ConfigurationError(f"attach points must be strictly increasing: {points}")
        if points[-1] != len(layer_specs) - 1:
            raise ConfigurationError("the last head must attach at the backbone output")

        rng = np.random.default_rng(seed)
        shape: Shape = tuple(architecture.input_shape)
        backbone: List[Layer] = []
        shapes: List[Shape] = []
        try:
            for spec in layer_specs:
                layer = _build_layer(spec, shape, rng, dtype)
                shape = layer.output_shape(shape)
                backbone.append(layer)
                shapes.append(shape)
        except ShapeMismatchError as e:
            raise ConfigurationError(f"backbone does not fit input {architecture.input_shape}: {e}") from e

        heads = [_build_head(spec, shapes[spec.attach_point], architecture.num_classes, rng, dtype) for spec in head_specs]
        net = cls(architecture, backbone, heads, points)
        logger.debug("Built impatient network", layers=len(backbone), heads=len(heads), attach_points=points)
        return net

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def input_shape(self) -> Shape:
        return tuple(self.architecture.input_shape)

    @property
    def num_classes(self) -> int:
        return self.architecture.num_classes

    def truncated(self, head: int) -> "ImpatientNet":
        """Network ending at head `head` (0-based), sharing layers with this one."""
        end = self.attach_points[head]
        return ImpatientNet(
            self.architecture.model_copy(
                update={
                    "layers": self.architecture.resolved_layers()[:end + 1],
                    "heads": self.architecture.resolved_heads()[:head + 1],
                }
            ),
            self.backbone[:end + 1],
            self.heads[:head + 1],
            self.attach_points[:head + 1],
        )

    # ------------------------------------------------------------------
    # modes and parameters
    # ------------------------------------------------------------------

    def train(self) -> None:
        for layer in self.backbone:
            layer.train()
        for head in self.heads:
            head.train()

    def eval(self) -> None:
        for layer in self.backbone:
            layer.eval()
        for head in self.heads:
            head.eval()

    def zero_grad(self) -> None:
        for layer in self.backbone:
            layer.zero_grad()
        for head in self.heads:
            head.zero_grad()

    def _named_layers(self) -> Iterator[Tuple[str, Layer]]:
        for i, layer in enumerate(self.backbone):
            yield f"backbone.{i}", layer
        for k, head in enumerate(self.heads):
            for j, layer in enumerate(head.layers):
                yield f"heads.{k}.{j}", layer

    def named_parameters(self) -> List[Tuple[str, np.ndarray, np.ndarray]]:
        """(name, parameter, gradient) in a stable order."""
        return [
            (f"{prefix}.{name}", param, layer.grads[name])
            for prefix, layer in self._named_layers()
            for name, param in layer.params.items()
        ]

    def named_buffers(self) -> List[Tuple[str, np.ndarray]]:
        return [
            (f"{prefix}.{name}", buf)
            for prefix, layer in self._named_layers()
            for name, buf in layer.buffers().items()
        ]

    def head_parameters(self, head: int) -> List[Tuple[str, np.ndarray, np.ndarray]]:
        prefix = f"heads.{head}."
        return [entry for entry in self.named_parameters() if entry[0].startswith(prefix)]

    def backbone_parameters(self) -> List[Tuple[str, np.ndarray, np.ndarray]]:
        return [entry for entry in self.named_parameters() if entry[0].startswith("backbone.")]

    def layer_shapes(self) -> List[Shape]:
        """Per-example output shape of every backbone layer."""
        shapes = []
        shape = self.input_shape
        for layer in self.backbone:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    # ------------------------------------------------------------------
    # forward passes
    # ------------------------------------------------------------------

    def _check_batch(self, batch: np.ndarray) -> None:
        if batch.ndim != 4 or tuple(batch.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(f"expected batch of shape N x {self.input_shape}, got {batch.shape}")

    def iter_head_logits(self, batch: np.ndarray) -> Iterator[np.ndarray]:
        """Lazily yield the logits of heads 1..K; the backbone advances only as far as needed."""
        self._check_batch(batch)
        x = batch
        position = 0
        for k, point in enumerate(self.attach_points):
            while position <= point:
                x = self.backbone[position].forward(x)
                position += 1
            yield self.heads[k].forward(x)

    def forward_logits(self, batch: np.ndarray) -> List[np.ndarray]:
        return list(self.iter_head_logits(batch))

    def forward_all(self, batch: np.ndarray, costs: Optional[Sequence[int]] = None) -> StagedPrediction:
        """Class probabilities of every head, computing the shared backbone once."""
        probs = np.stack([softmax(logits) for logits in self.iter_head_logits(batch)])
        return StagedPrediction(probs, tuple(costs) if costs is not None else None)

    def forward_head(self, batch: np.ndarray, head: int) -> np.ndarray:
        """Probabilities of one head, skipping every other head's computation."""
        self._check_batch(batch)
        x = batch
        for layer in self.backbone[:self.attach_points[head] + 1]:
            x = layer.forward(x)
        return softmax(self.heads[head].forward(x))

    def predict_proba(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """(K, N, C) probabilities in eval mode, evaluated in chunks."""
        self.eval()
        chunks = [
            self.forward_all(images[start:start + batch_size]).probabilities
            for start in range(0, len(images), batch_size)
        ]
        if not chunks:
            return np.zeros((self.num_heads, 0, self.num_classes), dtype=np.float32)
        return np.concatenate(chunks, axis=1)

    # ------------------------------------------------------------------
    # joint objective
    # ------------------------------------------------------------------

    def joint_loss_backward(
        self,
        batch: np.ndarray,
        labels: np.ndarray,
        weights: Sequence[float],
        weight_decay: float = 0.0,
        propagate_to_backbone: bool = True,
    ) -> JointLoss:
        """
        Weighted joint loss sum_k w_k L_k + Omega and its gradients.

        Gradients are accumulated into the layers' gradient buffers. Heads
        with zero weight are not back-propagated and are excluded from the
        L2 term, so their parameters receive exactly zero gradient.

        Args:
            batch: N x C x H x W inputs
            labels: (N,) class indices
            weights: K nonnegative head weights
            weight_decay: L2 coefficient lambda, Omega = lambda / 2 * sum ||W||^2
            propagate_to_backbone: False leaves backbone gradients untouched and
                keeps backbone weights out of Omega

        Returns:
            JointLoss with per-head losses and the total
        """
        w = validate_weights(weights, self.num_heads)
        logits = self.forward_logits(batch)

        head_losses = np.zeros(self.num_heads)
        injected: Dict[int, np.ndarray] = {}
        for k, head_logits in enumerate(logits):
            value = softmax_cross_entropy(head_logits, labels)
            head_losses[k] = value.loss
            if w[k] != 0.0:
                grad = (w[k] * value.grad).astype(head_logits.dtype, copy=False)
                injected[self.attach_points[k]] = self.heads[k].backward(grad)

        if propagate_to_backbone:
            upstream: Optional[np.ndarray] = None
            for i in reversed(range(len(self.backbone))):
                if i in injected:
                    upstream = injected[i] if upstream is None else upstream + injected[i]
                if upstream is not None:
                    upstream = self.backbone[i].backward(upstream)

        regularization = 0.0
        if weight_decay > 0.0:
            active = self.backbone_parameters() if propagate_to_backbone else []
            for k in range(self.num_heads):
                if w[k] != 0.0:
                    active.extend(self.head_parameters(k))
            for name, param, grad in active:
                if name.rsplit(".", 1)[-1] in _DECAYED:
                    regularization += 0.5 * weight_decay * float(np.sum(param.astype(np.float64) ** 2))
                    grad += weight_decay * param

        return JointLoss(
            head_losses=head_losses,
            weights=w,
            weighted_loss=float(np.dot(w, head_losses)),
            regularization=regularization,
        )


def desk_architecture(
    input_shape: Tuple[int, int, int] = (1, 16, 16),
    num_classes: int = 10,
    channels: Sequence[int] = (8, 16, 32, 32),
    batchnorm: bool = True,
    head_kind: HeadKind = HeadKind.AVG,
    hidden_units: Optional[int] = None,
) -> ArchitectureConfig:
    """Conv-BN-ReLU-maxpool blocks with one head after each block."""
    return ArchitectureConfig(
        input_shape=input_shape,
        num_classes=num_classes,
        channels=list(channels),
        batchnorm=batchnorm,
        head_kind=head_kind,
        hidden_units=hidden_units,
    )


def fit_grid_heads(architecture: ArchitectureConfig) -> ArchitectureConfig:
    """
    Make every AVG4x4 head fit its attach point: activations smaller than
    4x4 get AVG instead, flat activations get FC-only heads.
    """
    heads = architecture.resolved_heads()
    flat = architecture.model_copy(
        update={"heads": [h.model_copy(update={"kind": HeadKind.FC_ONLY}) for h in heads]}
    )
    shapes = ImpatientNet.build(flat).layer_shapes()
    fitted = []
    for head in heads:
        shape = shapes[head.attach_point]
        kind = head.kind
        if kind == HeadKind.AVG4X4 and len(shape) != 3:
            kind = HeadKind.FC_ONLY
        elif kind == HeadKind.AVG4X4 and min(shape[1], shape[2]) < 4:
            kind = HeadKind.AVG
        fitted.append(head.model_copy(update={"kind": kind}))
    return architecture.model_copy(update={"heads": fitted})


def alexnet_style_architecture(
    input_shape: Tuple[int, int, int] = (3, 32, 32),
    num_classes: int = 10,
    widths: Tuple[int, int, int] = (16, 32, 48),
    fc_width: int = 64,
) -> ArchitectureConfig:
    """
    Scaled-down AlexNet topology: five conv stages and two FC stages with a
    head after each, seven heads in total. Conv-stage heads use AVG4x4 where
    the activation is at least 4x4 and AVG otherwise; FC-stage heads are FC only.
    """
    c1, c2, c3 = widths

    def conv(width: int, kernel: int) -> List[LayerSpec]:
        return [
            LayerSpec(type=LayerType.CONV, out_channels=width, kernel_size=kernel, padding=kernel // 2),
            LayerSpec(type=LayerType.BATCHNORM),
            LayerSpec(type=LayerType.RELU),
        ]

    pool = [LayerSpec(type=LayerType.MAXPOOL, size=2)]
    stages = [
        conv(c1, 5) + pool,
        conv(c2, 5) + pool,
        conv(c3, 3),
        conv(c3, 3),
        conv(c2, 3) + pool,
        [LayerSpec(type=LayerType.FC, out_features=fc_width), LayerSpec(type=LayerType.RELU)],
        [LayerSpec(type=LayerType.FC, out_features=fc_width), LayerSpec(type=LayerType.RELU)],
    ]
    layers: List[LayerSpec] = []
    ends: List[int] = []
    for stage in stages:
        layers.extend(stage)
        ends.append(len(layers) - 1)

    side = min(input_shape[1], input_shape[2])
    spatial = [side // 2, side // 4, side // 4, side // 4, side // 8]
    heads = [
        HeadSpec(attach_point=end, kind=HeadKind.AVG4X4 if s >= 4 else HeadKind.AVG)
        for end, s in zip(ends[:5], spatial)
    ]
    heads += [HeadSpec(attach_point=end, kind=HeadKind.FC_ONLY) for end in ends[5:]]
    return ArchitectureConfig(input_shape=input_shape, num_classes=num_classes, layers=layers, heads=heads)
