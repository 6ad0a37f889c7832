"""Toy-scale ISH training.

The forward pass is never shaped. In `ish` mode the gradient of the head
weights is assembled from SCALE-shaped activations, each sample's
contribution multiplied by exp(r_i) with r_i = Q/Q_p of its live
penultimate activations; the head bias and every earlier layer get the
ordinary gradient.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import softmax

from .errors import ConfigError, TrainingError
from .ingest import FeatureSet, LinearHead, load_extractor, load_head, write_extractor, write_head
from .metrics import auroc
from .scoring import ScoringConfig, pipeline_scores
from .shaping import ShapingConfig, activation_sums, batch_scale_factors
from .synth import BlobSpec, gen_blob_dataset

logger = logging.getLogger(__name__)

Mode = Literal["plain", "ish"]
MODES = ("plain", "ish")


@dataclass(frozen=True)
class IshTrainConfig:
    percentile: float = 0.85
    lr: float = 0.003
    epochs: int = 10
    batch_size: int = 64
    weight_decay: float = 5e-6
    momentum: float = 0.9  # torchvision SGD recipe; 0 gives plain SGD
    seed: int = 0

    def __post_init__(self):
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError(f"learning rate must be > 0, got {self.lr}.")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1.")
        if not (0.0 <= self.percentile < 1.0):
            raise ConfigError(f"percentile must lie in [0, 1), got {self.percentile}.")
        if self.weight_decay < 0 or not (0.0 <= self.momentum < 1.0):
            raise ConfigError("weight_decay must be >= 0 and momentum in [0, 1).")


PRETRAIN_CONFIG = IshTrainConfig(lr=0.05, epochs=30)


@dataclass
class TrainingLog:
    mode: str
    config: Dict[str, Any]
    epochs: List[Dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"mode": self.mode, "config": self.config, "epochs": self.epochs}


@dataclass(frozen=True)
class HeadUpdate:
    weights: np.ndarray
    bias: np.ndarray
    n_degenerate: int


class ToyModel(nn.Module):
    """One hidden ReLU layer (the feature extractor) followed by a linear head."""

    def __init__(self, in_dim: int = 32, hidden: int = 128, n_classes: int = 7):
        super().__init__()
        self.extractor = nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU())
        self.head = nn.Linear(hidden, n_classes)
        self.double()

    @property
    def in_dim(self) -> int:
        return self.extractor[0].in_features

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        a = self.extractor(x)
        return a, self.head(a)

    def linear_head(self) -> LinearHead:
        return LinearHead(self.head.weight.detach().cpu().numpy(), self.head.bias.detach().cpu().numpy())


class IshLinear(torch.autograd.Function):
    """F.linear forward; backward reweights only the weight gradient per sample."""

    @staticmethod
    def forward(ctx, a, weight, bias, scale):
        ctx.save_for_backward(a, weight, scale)
        return F.linear(a, weight, bias)

    @staticmethod
    def backward(ctx, grad_z):
        a, weight, scale = ctx.saved_tensors
        grad_a = grad_z @ weight
        grad_w = grad_z.t() @ (a * scale[:, None])
        return grad_a, grad_w, grad_z.sum(0), None


def idness(a, p: float) -> float:
    """ID-ness of one sample: r = Q/Q_p of its penultimate activations."""
    return activation_sums(a, p).factor


def idness_weights(a, p: float) -> Tuple[np.ndarray, int]:
    """exp(r_i) per row; degenerate rows fall back to weight 1."""
    sf = batch_scale_factors(np.asarray(a, dtype=np.float64), p)
    weights = np.exp(np.where(sf.degenerate, 0.0, sf.factors))
    return weights, int(sf.degenerate.sum())


def logit_gradients(logits, labels) -> np.ndarray:
    """Cross-entropy gradient w.r.t. logits: softmax(z) - onehot(y), per sample."""
    z = np.asarray(logits, dtype=np.float64)
    g = softmax(z, axis=1)
    g[np.arange(z.shape[0]), np.asarray(labels)] -= 1.0
    return g


def _head_step(weights, bias, activations, logit_grads, lr, scale) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(logit_grads, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64) - lr * (g.T @ (a * scale[:, None]))
    b = np.asarray(bias, dtype=np.float64) - lr * g.sum(axis=0)
    return w, b


def plain_head_update(weights, bias, activations, logit_grads, lr: float) -> HeadUpdate:
    a = np.asarray(activations, dtype=np.float64)
    w, b = _head_step(weights, bias, a, logit_grads, lr, np.ones(a.shape[0]))
    return HeadUpdate(w, b, 0)


def ish_head_update(weights, bias, activations, logit_grads, lr: float, p: float) -> HeadUpdate:
    """W <- W - lr * sum_i outer(g_i, a_i exp(r_i)); b <- b - lr * sum_i g_i."""
    scale, n_deg = idness_weights(activations, p)
    w, b = _head_step(weights, bias, activations, logit_grads, lr, scale)
    return HeadUpdate(w, b, n_deg)


def forward(model: ToyModel, x) -> Tuple[torch.Tensor, torch.Tensor]:
    """Standard forward pass returning (penultimate activations, logits)."""
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if x.shape[-1] != model.in_dim:
        raise ConfigError(f"dimension mismatch: input has {x.shape[-1]} features, model expects {model.in_dim}.")
    return model(x)


def batch_loss(model: ToyModel, x: torch.Tensor, y: torch.Tensor, mode: Mode, p: float):
    """Mean cross-entropy of one batch, wired for `mode`'s backward pass.

    Returns (loss, logits, n_degenerate). The forward values do not depend on mode.
    """
    a = model.extractor(x)
    if mode == "ish":
        if not torch.isfinite(a).all():
            raise TrainingError("penultimate activations are not finite")
        scale, n_deg = idness_weights(a.detach().cpu().numpy(), p)
        z = IshLinear.apply(a, model.head.weight, model.head.bias, torch.from_numpy(scale))
    else:
        n_deg = 0
        z = model.head(a)
    return F.cross_entropy(z, y), z, n_deg


def _tensors(fs: FeatureSet) -> Tuple[torch.Tensor, torch.Tensor]:
    if fs.labels is None:
        raise ConfigError(f"{fs.tag or 'training set'} has no labels.")
    return torch.tensor(fs.data, dtype=torch.float64), torch.tensor(fs.labels, dtype=torch.long)


def build_model(in_dim: int, hidden: int, n_classes: int, seed: int) -> ToyModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ToyModel(in_dim, hidden, n_classes)


def model_accuracy(model: ToyModel, fs: FeatureSet) -> float:
    x, y = _tensors(fs)
    with torch.no_grad():
        _, z = model(x)
    return float((z.argmax(dim=1) == y).double().mean())


def train(
    model: ToyModel,
    dataset: FeatureSet,
    config: IshTrainConfig,
    mode: Mode = "plain",
    *,
    eval_set: Optional[FeatureSet] = None,
) -> Tuple[ToyModel, TrainingLog]:
    """SGD with per-step cosine annealing from config.lr to 0; updates `model` in place."""
    if mode not in MODES:
        raise ConfigError(f"Unknown training mode '{mode}'. Supported: {', '.join(MODES)}.")
    x, y = _tensors(dataset)
    if x.shape[1] != model.in_dim:
        raise ConfigError(f"dimension mismatch: data has {x.shape[1]} features, model expects {model.in_dim}.")
    n = x.shape[0]
    steps = math.ceil(n / config.batch_size)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs * steps, eta_min=0.0)
    gen = torch.Generator().manual_seed(config.seed)
    log = TrainingLog(mode, asdict(config))

    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        total, correct, n_deg = 0.0, 0, 0
        lr = opt.param_groups[0]["lr"]
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            opt.zero_grad()
            loss, z, deg = batch_loss(model, x[idx], y[idx], mode, config.percentile)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss is not finite at epoch {epoch + 1}", log.epochs)
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss) * len(idx)
            correct += int((z.argmax(dim=1) == y[idx]).sum())
            n_deg += deg
        record = {
            "epoch": epoch + 1,
            "loss": total / n,
            "train_accuracy": correct / n,
            "lr": lr,
            "n_degenerate": n_deg,
        }
        if eval_set is not None:
            record["id_accuracy"] = model_accuracy(model, eval_set)
        log.epochs.append(record)
        logger.info("%s epoch %d: loss=%.4f acc=%.4f", mode, epoch + 1, record["loss"], record["train_accuracy"])
    model.eval()
    return model, log


def pretrain(
    dataset: FeatureSet, n_classes: int, *, hidden: int = 128, config: IshTrainConfig = PRETRAIN_CONFIG,
    eval_set: Optional[FeatureSet] = None,
) -> Tuple[ToyModel, TrainingLog]:
    """Plain training from a freshly seeded model."""
    model = build_model(dataset.dim, hidden, n_classes, config.seed)
    return train(model, dataset, config, "plain", eval_set=eval_set)


def penultimate(model: ToyModel, fs: FeatureSet) -> FeatureSet:
    with torch.no_grad():
        a = model.extractor(torch.tensor(fs.data, dtype=torch.float64)).cpu().numpy()
    return FeatureSet(a, tag=fs.tag, split=fs.split, labels=fs.labels, post_relu=True)


def evaluate_model(model: ToyModel, id_test: FeatureSet, ood_test: FeatureSet, p: float = 0.85) -> Dict[str, float]:
    """ID accuracy and energy AUROC (raw and SCALE-shaped) against held-out classes."""
    head = model.linear_head()
    a_id, a_ood = penultimate(model, id_test), penultimate(model, ood_test)
    out = {"id_accuracy": model_accuracy(model, id_test)}
    for name, shaping in (("auroc_ebo", ShapingConfig("identity", p)), ("auroc_scale_ebo", ShapingConfig("scale", p))):
        s_id, _, d_id = pipeline_scores(a_id, head, shaping, ScoringConfig())
        s_ood, _, d_ood = pipeline_scores(a_ood, head, shaping, ScoringConfig())
        out[name] = auroc(s_id[~d_id], s_ood[~d_ood])
    return out


def compare_modes(
    blob: BlobSpec,
    finetune: IshTrainConfig = IshTrainConfig(),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    *,
    hidden: int = 128,
    pretrain_config: IshTrainConfig = PRETRAIN_CONFIG,
) -> Dict[str, Any]:
    """Fine-tune one pretrained checkpoint per seed both ways and compare."""
    runs = []
    for seed in seeds:
        data = gen_blob_dataset(BlobSpec(**{**asdict(blob), "seed": seed}))
        base, _ = pretrain(
            data.train, len(blob.id_classes), hidden=hidden,
            config=IshTrainConfig(**{**asdict(pretrain_config), "seed": seed}),
        )
        run: Dict[str, Any] = {"seed": seed}
        for mode in MODES:
            model = copy.deepcopy(base)
            cfg = IshTrainConfig(**{**asdict(finetune), "seed": seed})
            train(model, data.train, cfg, mode)
            run[mode] = evaluate_model(model, data.id_test, data.ood_test, finetune.percentile)
        runs.append(run)
    mean = {
        mode: {k: float(np.mean([r[mode][k] for r in runs])) for k in runs[0][mode]}
        for mode in MODES
    }
    return {"runs": runs, "mean": mean}


def save_model(model: ToyModel, extractor_path, head_path) -> None:
    layer = model.extractor[0]
    write_extractor(layer.weight.detach().cpu().numpy(), layer.bias.detach().cpu().numpy(), extractor_path)
    write_head(model.linear_head(), head_path)


def load_model(extractor_path, head_path) -> ToyModel:
    w1, b1 = load_extractor(extractor_path)
    head = load_head(head_path)
    if head.dim != w1.shape[0]:
        raise ConfigError(f"head expects D={head.dim} but extractor produces {w1.shape[0]} features.")
    model = ToyModel(w1.shape[1], w1.shape[0], head.n_classes)
    with torch.no_grad():
        model.extractor[0].weight.copy_(torch.from_numpy(w1))
        model.extractor[0].bias.copy_(torch.from_numpy(b1))
        model.head.weight.copy_(torch.from_numpy(head.weights.copy()))
        model.head.bias.copy_(torch.from_numpy(head.bias.copy()))
    return model
