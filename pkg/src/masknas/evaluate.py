"""Train a discrete architecture from scratch and measure held-out accuracy."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .data import BatchStream, DataConfig, Splits, load_dataset
from .heads import ClassifierHead
from .losses import cross_entropy
from .nn import Module
from .optim import SGD, clip_grad_norm, cosine_lr
from .search import ConfigError
from .space.genotype import Genotype
from .space.supernet import DiscreteNetwork

log = logging.getLogger(__name__)


@dataclass
class EvalConfig(DataConfig):
    channels: int = 16
    layers: int = 3
    stem_multiplier: int = 3
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    augment: bool = True
    seed: int = 0

    def validate(self) -> "EvalConfig":
        errs = self.data_errors()
        for name in ("channels", "layers", "batch_size", "stem_multiplier"):
            if getattr(self, name) < 1:
                errs.append(f"{name}: must be positive")
        if self.epochs < 0:
            errs.append("epochs: must be non-negative")
        if self.lr < 0:
            errs.append("lr: must be non-negative")
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**d)


class Classifier(Module):
    def __init__(self, genotype: Genotype, cfg: EvalConfig, rng: np.random.Generator):
        size = (cfg.image_size, cfg.image_size)
        self.encoder = DiscreteNetwork(genotype, cfg.channels, cfg.layers, cfg.stem_multiplier,
                                       image_size=size, rng=rng)
        self.head = ClassifierHead(self.encoder.out_channels, cfg.num_classes, rng=rng)

    def forward(self, x):
        return self.head(self.encoder(x))


def accuracy(model: Classifier, stream: BatchStream) -> tuple[int, int]:
    model.eval()
    correct = seen = 0
    with ad.no_grad():
        for batch in stream.epoch():
            logits = model(ad.as_tensor(batch.x))
            correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
            seen += len(batch.labels)
    model.train()
    return correct, seen


def evaluate_genotype(genotype: Genotype, cfg: EvalConfig, splits: Splits | None = None) -> dict:
    """Classification-only training on clean images; top-1 accuracy on the test split."""
    cfg.validate()
    genotype.validate()
    splits = splits if splits is not None else load_dataset(cfg)
    rng = np.random.default_rng([cfg.seed, 10])
    model = Classifier(genotype, cfg, rng)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    train = BatchStream("eval_train", splits.eval_train, cfg.batch_size, np.random.default_rng([cfg.seed, 11]),
                        augment=cfg.augment)
    test = BatchStream("eval_test", splits.eval_test, 256, np.random.default_rng([cfg.seed, 12]), shuffle=False)
    losses = []
    model.train()
    for epoch in range(cfg.epochs):
        opt.lr = cosine_lr(cfg.lr, epoch, cfg.epochs, cfg.lr_min)
        total = 0.0
        n = 0
        for batch in train.epoch():
            opt.zero_grad()
            loss = cross_entropy(model(ad.as_tensor(batch.x)), batch.labels)
            loss.backward()
            clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            total += float(loss.data)
            n += 1
        losses.append(total / max(n, 1))
        log.info("eval epoch %d  loss %.4f", epoch + 1, losses[-1])
    correct, seen = accuracy(model, test)
    return {
        "genotype": genotype.to_dict(),
        "accuracy": correct / seen,
        "correct": correct,
        "test_size": seen,
        "epochs": cfg.epochs,
        "train_loss": losses,
    }
