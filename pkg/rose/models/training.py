import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from rose.errors import NumericFault, StructuralError
from rose.models.loss import HeatmapConfig, detection_loss, gaussian_heatmap
from rose.models.network import NetworkConfig, NetworkWeights, backward, forward, init_weights
from rose.models.weights_io import save_weights
from rose.utils.data_loader import Sample

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Adam moments and step counter; "momentum 0.9" is beta1."""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, weights: NetworkWeights, lr: float = 0.01, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> 'AdamState':
        return cls(
            m={name: np.zeros_like(t) for name, t in weights.items()},
            v={name: np.zeros_like(t) for name, t in weights.items()},
            lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(weights: NetworkWeights, grads: NetworkWeights,
              state: AdamState) -> Tuple[NetworkWeights, AdamState]:
    """
    One bias-corrected Adam update.

    Args:
        weights (NetworkWeights): Current parameters (left untouched)
        grads (NetworkWeights): Gradients, same names and shapes
        state (AdamState): Current optimiser state (left untouched)

    Returns:
        Tuple[NetworkWeights, AdamState]: Updated parameters and state
    """
    if list(weights) != list(grads) or list(weights) != list(state.m):
        raise StructuralError("Weights, gradients and optimiser state disagree on tensor names")
    for name, g in grads.items():
        if g.shape != weights[name].shape:
            raise StructuralError(f"Gradient '{name}' has shape {g.shape}, expected {weights[name].shape}")
        if not np.isfinite(g).all():
            logger.error(f"Non-finite gradient for {name}")
            raise NumericFault(name)

    t = state.t + 1
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    params, m, v = {}, {}, {}
    for name, theta in weights.items():
        g = grads[name]
        m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = m[name] / bias1
        v_hat = v[name] / bias2
        params[name] = (theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(theta.dtype, copy=False)
    new_state = AdamState(m=m, v=v, t=t, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    return NetworkWeights(params, weights.config), new_state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    sigma: float = 6.0
    checkpoint_interval: int = 0
    checkpoint_dir: Optional[str] = None
    shuffle: bool = True
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: Optional[int] = None
    workers: int = 1
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise StructuralError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise StructuralError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.checkpoint_interval < 0:
            raise StructuralError(f"checkpoint_interval must be >= 0, got {self.checkpoint_interval}")
        if self.max_steps is not None and self.max_steps < 1:
            raise StructuralError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.workers < 1:
            raise StructuralError(f"workers must be >= 1, got {self.workers}")
        if not self.lr > 0:
            raise StructuralError(f"lr must be positive, got {self.lr}")


class Targets(NamedTuple):
    core: np.ndarray
    delta: np.ndarray


class TrainResult(NamedTuple):
    weights: NetworkWeights
    loss_history: List[Tuple[int, float]]
    steps: int


def make_targets(sample: Sample, heatmap_config: HeatmapConfig) -> Targets:
    _, height, width = sample.image.shape
    return Targets(
        gaussian_heatmap(sample.cores, height, width, heatmap_config),
        gaussian_heatmap(sample.deltas, height, width, heatmap_config),
    )


def image_gradients(weights: NetworkWeights, image: np.ndarray, targets: Targets,
                    heatmap_config: HeatmapConfig) -> Tuple[float, NetworkWeights]:
    """Loss and parameter gradients for a single image."""
    result = forward(image, weights)
    loss = detection_loss(targets.core, targets.delta, result.p_core, result.p_delta, heatmap_config)
    return loss.total, backward(result.cache, loss.grad_core, loss.grad_delta)


def accumulate_gradients(weights: NetworkWeights, images: Sequence[np.ndarray], targets: Sequence[Targets],
                         heatmap_config: HeatmapConfig,
                         executor: Optional[ThreadPoolExecutor] = None) -> Tuple[List[float], NetworkWeights]:
    """
    Sum of per-image gradients over a batch. Per-image passes may run on the executor;
    the sum is always taken in batch order.
    """
    jobs = [(weights, image, target, heatmap_config) for image, target in zip(images, targets)]
    if executor is None:
        results = [image_gradients(*job) for job in jobs]
    else:
        results = list(executor.map(lambda job: image_gradients(*job), jobs))

    losses = []
    total = {name: np.zeros_like(t) for name, t in weights.items()}
    for loss, grads in results:
        losses.append(loss)
        for name in total:
            total[name] += grads[name]
    return losses, NetworkWeights(total, weights.config)


def train(dataset: Sequence[Sample], config: TrainConfig,
          initial_weights: Optional[NetworkWeights] = None) -> TrainResult:
    """
    Train the network with Adam on summed mini-batch gradients.

    Args:
        dataset (Sequence[Sample]): Padded, normalised samples
        config (TrainConfig): Training settings
        initial_weights (Optional[NetworkWeights]): Starting point; seeded init if None

    Returns:
        TrainResult: Final weights, per-batch (step, mean loss) history and step count
    """
    if not dataset:
        raise StructuralError("Cannot train on an empty dataset")
    weights = initial_weights if initial_weights is not None else init_weights(config.network, config.seed)
    state = AdamState.fresh(weights, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    heatmap_config = HeatmapConfig(sigma=config.sigma)
    targets = [make_targets(sample, heatmap_config) for sample in dataset]
    rng = np.random.default_rng(config.seed)

    checkpoint_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None
    if config.checkpoint_interval and checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    logger.info(f"Training on {len(dataset)} images: {config.epochs} epochs, batch {config.batch_size}, "
                f"lr {config.lr}, {weights.parameter_count()} parameters")
    history: List[Tuple[int, float]] = []
    step = 0
    executor = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(dataset)) if config.shuffle else np.arange(len(dataset))
            for start in range(0, len(order), config.batch_size):
                batch = order[start:start + config.batch_size]
                losses, grads = accumulate_gradients(
                    weights, [dataset[i].image for i in batch], [targets[i] for i in batch],
                    heatmap_config, executor,
                )
                step += 1
                batch_loss = float(np.mean(losses))
                if not np.isfinite(batch_loss):
                    logger.error(f"Non-finite loss at batch {step}")
                    raise NumericFault('loss', batch=step)
                weights, state = adam_step(weights, grads, state)
                history.append((step, batch_loss))
                logger.debug(f"epoch {epoch} step {step}: loss {batch_loss:.6f}")

                if config.checkpoint_interval and checkpoint_dir is not None and step % config.checkpoint_interval == 0:
                    save_weights(weights, checkpoint_dir / f'checkpoint_step{step:06d}.rosew')
                if config.max_steps is not None and step >= config.max_steps:
                    break
            logger.info(f"Epoch {epoch}/{config.epochs} done: step {step}, last loss {history[-1][1]:.6f}")
            if config.max_steps is not None and step >= config.max_steps:
                logger.info(f"Reached max_steps={config.max_steps}")
                break
    finally:
        if executor is not None:
            executor.shutdown()

    return TrainResult(weights, history, step)


def save_loss_log(history: Sequence[Tuple[int, float]], path: Union[str, Path]) -> Path:
    """Write the per-batch loss history as a `step,loss` CSV."""
    path = Path(path)
    pd.DataFrame(list(history), columns=['step', 'loss']).to_csv(path, index=False)
    return path
