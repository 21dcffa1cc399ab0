"""Joint, non-adversarial optimization of decoder, encoder, heads and codes.

One SGD optimizer drives every trainable tensor. Batch order and negative
augmentations are pure functions of ``(seed, epoch, step)``, so a run is
fully determined by its config and data, and resuming from a checkpoint
replays exactly the same stream.
"""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import losses as L
from .augment import AugmentationPolicy, augment_batch
from .dataset import OneClassSplit, stack_pixels
from .exceptions import ConfigError, DataError, NumericError
from .latent_init import PcaModel, pca_fit, pca_project
from .networks import ArchConfig, DecoderEncoder

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("L_lap", "L_lat", "L_global", "L_local", "L_prior", "total")
CHECKPOINT_VERSION = 1


class ReconLoss(str, enum.Enum):
    LAPLACIAN = "LAPLACIAN"
    MSE = "MSE"
    NONE = "NONE"


class InitMethod(str, enum.Enum):
    PCA = "PCA"
    NORMAL = "NORMAL"
    CONTRASTIVE = "CONTRASTIVE"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 0.005
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    use_local_mi: bool = True
    use_global_mi: bool = True
    use_prior_mi: bool = True
    recon_loss: ReconLoss = ReconLoss.LAPLACIAN
    init: InitMethod = InitMethod.PCA
    drop_zA: bool = False
    drop_z: bool = False
    freeze_codes: bool = False
    shuffle_negatives: bool = False
    decay_codes: bool = False
    pyramid_levels: int = 3
    contrastive_init_epochs: int = 10
    checkpoint_every: int = 10
    arch: ArchConfig = field(default_factory=ArchConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def __post_init__(self):
        object.__setattr__(self, "recon_loss", ReconLoss(self.recon_loss))
        object.__setattr__(self, "init", InitMethod(self.init))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be > 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        if isinstance(d.get("weights"), dict):
            extra = set(d["weights"]) - {f.name for f in fields(L.LossWeights)}
            if extra:
                raise ConfigError(f"unknown loss-weight keys: {sorted(extra)}")
            d["weights"] = L.LossWeights(**d["weights"])
        if isinstance(d.get("arch"), dict):
            extra = set(d["arch"]) - {f.name for f in fields(ArchConfig)}
            if extra:
                raise ConfigError(f"unknown architecture keys: {sorted(extra)}")
            d["arch"] = ArchConfig(**d["arch"])
        if isinstance(d.get("augmentation"), dict):
            d["augmentation"] = AugmentationPolicy.from_dict(d["augmentation"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = asdict(self.weights)
        d["arch"] = self.arch.to_dict()
        d["augmentation"] = self.augmentation.to_dict()
        d["recon_loss"] = self.recon_loss.value
        d["init"] = self.init.value
        return d


# Named ablation presets, keyed like the rows/columns they reproduce.
ABLATIONS = {
    "full": {},
    "no_mi": {"use_local_mi": False, "use_global_mi": False, "use_prior_mi": False},
    "local_only": {"use_global_mi": False, "use_prior_mi": False},
    "global_only": {"use_local_mi": False, "use_prior_mi": False},
    "prior_only": {"use_local_mi": False, "use_global_mi": False},
    "local_prior": {"use_global_mi": False},
    "local_global": {"use_prior_mi": False},
    "global_prior": {"use_local_mi": False},
    "drop_zA": {"drop_zA": True},
    "drop_z": {"drop_z": True},
    "recon_none": {"recon_loss": ReconLoss.NONE},
    "recon_mse": {"recon_loss": ReconLoss.MSE},
    "init_normal": {"init": InitMethod.NORMAL},
    "init_contrastive": {"init": InitMethod.CONTRASTIVE},
    "freeze_codes": {"freeze_codes": True},
    "shuffle_negatives": {"shuffle_negatives": True},
}

MI_TABLE = ("no_mi", "local_only", "global_only", "prior_only", "local_prior", "local_global", "global_prior", "full")
FEATURE_TABLE = ("drop_zA", "drop_z", "full", "recon_none", "recon_mse", "init_normal", "init_contrastive")


def apply_ablation(config: TrainConfig, *names) -> TrainConfig:
    overrides = {}
    for name in names:
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
        overrides.update(ABLATIONS[name])
    return replace(config, **overrides)


class LatentCodes(nn.Module):
    def __init__(self, values):
        super().__init__()
        self.weight = nn.Parameter(torch.as_tensor(values, dtype=torch.float32).clone())

    def forward(self, idx):
        return self.weight[idx]


@dataclass
class TrainState:
    config: TrainConfig
    model: DecoderEncoder
    codes: LatentCodes
    optimizer: torch.optim.Optimizer
    pca: PcaModel | None = None
    sample_ids: list = field(default_factory=list)
    epoch: int = 0
    history: list = field(default_factory=list)

    def parameters(self):
        return list(self.model.parameters()) + list(self.codes.parameters())


# --------------------------------------------------------------------------
# losses on one batch


def compute_losses(model: DecoderEncoder, x, x_neg, codes, config: TrainConfig):
    """Every term of the overall objective for one batch.

    ``x_neg`` may be None when negatives come from shuffling the batch.
    Disabled terms are exact zeros with no graph behind them.
    """
    w = config.weights
    zero = x.new_zeros(())

    if config.recon_loss is ReconLoss.NONE:
        lap = zero
    else:
        x_rec = model.decoder(codes)
        if config.recon_loss is ReconLoss.LAPLACIAN:
            lap = L.laplacian_pyramid_loss(x_rec, x, L.PyramidSpec(config.pyramid_levels))
        else:
            lap = L.mse_loss(x_rec, x)

    b = len(x)
    if config.shuffle_negatives or x_neg is None:
        pack = model.encoder(x)
        A_pos, z, mu, logvar = pack.A, pack.z, pack.mu, pack.logvar
        A_neg = A_pos.roll(1, dims=0)
    else:
        # one forward so batch-norm statistics cannot tell the halves apart
        pack = model.encoder(torch.cat([x, x_neg]))
        A_pos, A_neg = pack.A[:b], pack.A[b:]
        z, mu, logvar = pack.z[:b], pack.mu[:b], pack.logvar[:b]

    lat = L.latent_loss(codes, z)

    if config.use_global_mi:
        g = L.global_mi_loss(
            model.global_head(A_pos, z, drop_z=config.drop_z),
            model.global_head(A_neg, z, drop_z=config.drop_z),
            w.beta,
        )
    else:
        g = zero
    if config.use_local_mi:
        loc = L.local_mi_loss(
            model.local_head(A_pos, z, drop_zA=config.drop_zA),
            model.local_head(A_neg, z, drop_zA=config.drop_zA),
            w.beta,
        )
    else:
        loc = zero
    if config.use_prior_mi:
        p_mu, p_logvar = model.prior_params(mu, logvar)
        prior = L.prior_loss(p_mu, p_logvar, w.gamma)
    else:
        prior = zero

    mie = L.mie_loss(g, loc, prior)
    total = L.total_loss(lap, lat, mie, w)
    return {"L_lap": lap, "L_lat": lat, "L_global": g, "L_local": loc, "L_prior": prior, "total": total}


# --------------------------------------------------------------------------
# state construction


def _make_optimizer(config, model, codes):
    groups = [{"params": list(model.parameters()), "weight_decay": config.weight_decay}]
    if not config.freeze_codes:
        groups.append({"params": list(codes.parameters()), "weight_decay": config.weight_decay if config.decay_codes else 0.0})
    return torch.optim.SGD(groups, lr=config.learning_rate, momentum=config.momentum)


def step_seed(seed, epoch, step, phase=0):
    """32-bit augmentation seed for one optimization step.

    ``phase`` separates the contrastive pre-training stream from training.
    """
    key = [seed, epoch, step] + ([phase] if phase else [])
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def _batches(n, batch_size, seed, epoch, phase=0):
    order = np.random.default_rng([seed, epoch] + ([phase] if phase else [])).permutation(n)
    chunks = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # batch-norm cannot train on a single sample
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


@torch.no_grad()
def encode_images(model, images, batch_size=256):
    """Global latents for (N, C, H, W) images in inference mode."""
    was_training = model.training
    model.eval()
    out = torch.cat([model.encoder(images[i : i + batch_size]).z for i in range(0, len(images), batch_size)])
    model.train(was_training)
    return out


def _contrastive_pretrain(model, images, config):
    """Train encoder and heads on the MI objective alone, then read off z."""
    pre_cfg = replace(config, recon_loss=ReconLoss.NONE, weights=replace(config.weights, lambda_lat=0.0))
    params = [p for name, p in model.named_parameters() if not name.startswith("decoder.")]
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay)
    dummy = torch.zeros(1, config.arch.latent_dim)
    model.train()
    for epoch in range(config.contrastive_init_epochs):
        for step, idx in enumerate(_batches(len(images), config.batch_size, config.seed, epoch, phase=1)):
            x = images[idx]
            x_neg = None if config.shuffle_negatives else augment_batch(x, config.augmentation, step_seed(config.seed, epoch, step, phase=1))
            terms = compute_losses(model, x, x_neg, dummy.expand(len(idx), -1), pre_cfg)
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
    return encode_images(model, images)


def init_state(images, config: TrainConfig, sample_ids=None) -> TrainState:
    """Build networks and latent codes for ``images`` (N, C, H, W) in [-1, 1]."""
    images = torch.as_tensor(images, dtype=torch.float32)
    if images.ndim != 4 or len(images) == 0:
        raise DataError("training needs a non-empty (N, C, H, W) image tensor")
    if tuple(images.shape[1:]) != config.arch.image_shape:
        raise ConfigError(f"images are {tuple(images.shape[1:])} but the architecture expects {config.arch.image_shape}")
    torch.manual_seed(config.seed)
    model = DecoderEncoder(config.arch)
    pca = None
    d = config.arch.latent_dim
    if config.init is InitMethod.PCA:
        pca = pca_fit(images.numpy(), d)
        values = pca_project(pca, images.numpy().reshape(len(images), -1)).reshape(len(images), d)
    elif config.init is InitMethod.NORMAL:
        gen = torch.Generator().manual_seed(config.seed)
        values = torch.randn(len(images), d, generator=gen)
    else:
        values = _contrastive_pretrain(model, images, config)
    codes = LatentCodes(values)
    codes.weight.requires_grad_(not config.freeze_codes)
    state = TrainState(
        config=config,
        model=model,
        codes=codes,
        optimizer=_make_optimizer(config, model, codes),
        pca=pca,
        sample_ids=list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(images))],
    )
    return state


# --------------------------------------------------------------------------
# optimization


def train_step(state: TrainState, idx, x, seed: int):
    """One joint SGD update on the batch ``x`` whose codes are rows ``idx``.

    Returns the step's loss terms as floats. Raises :class:`NumericError`
    (with every term attached) when the total is not finite.
    """
    cfg = state.config
    state.model.train()
    idx = torch.as_tensor(idx)
    x_neg = None if cfg.shuffle_negatives else augment_batch(x, cfg.augmentation, seed)
    terms = compute_losses(state.model, x, x_neg, state.codes(idx), cfg)
    values = {k: float(v.detach()) for k, v in terms.items()}
    if not np.isfinite(values["total"]):
        raise NumericError(
            f"non-finite loss at epoch {state.epoch}: " + ", ".join(f"{k}={v:.6g}" for k, v in values.items()),
            values,
        )
    state.optimizer.zero_grad(set_to_none=False)
    # untouched parameters still need a zero grad, otherwise SGD skips their decay
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
    if terms["total"].requires_grad:
        terms["total"].backward()
    state.optimizer.step()
    return values


def run_epoch(state: TrainState, images):
    cfg = state.config
    sums = dict.fromkeys(METRIC_COLUMNS, 0.0)
    n = 0
    for step, idx in enumerate(_batches(len(images), cfg.batch_size, cfg.seed, state.epoch)):
        values = train_step(state, idx, images[idx], step_seed(cfg.seed, state.epoch, step))
        for k in METRIC_COLUMNS:
            sums[k] += values[k] * len(idx)
        n += len(idx)
    state.epoch += 1
    row = {"epoch": state.epoch, **{k: v / n for k, v in sums.items()}}
    state.history.append(row)
    return row


def fit_state(state: TrainState, images, epochs=None, checkpoint_dir=None, callback=None):
    """Run epochs until ``epochs`` (default: config.epochs) have completed."""
    images = torch.as_tensor(images, dtype=torch.float32)
    target = state.config.epochs if epochs is None else epochs
    every = state.config.checkpoint_every
    while state.epoch < target:
        row = run_epoch(state, images)
        log.info("epoch %d " + " ".join(f"{k}=%.5f" for k in METRIC_COLUMNS), row["epoch"], *(row[k] for k in METRIC_COLUMNS))
        if checkpoint_dir is not None and state.epoch % every == 0:
            save_checkpoint(state, Path(checkpoint_dir) / f"checkpoint_epoch{state.epoch:04d}.pt")
        if callback is not None:
            callback(state, row)
    return state


# --------------------------------------------------------------------------
# persistence


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": CHECKPOINT_VERSION,
            "config": state.config.to_dict(),
            "params": {**state.model.state_dict(), **{f"codes.{k}": v for k, v in state.codes.state_dict().items()}},
            "optimizer": state.optimizer.state_dict(),
            "pca": None if state.pca is None else {k: torch.from_numpy(np.asarray(v)) for k, v in state.pca.to_dict().items()},
            "sample_ids": list(state.sample_ids),
            "epoch": state.epoch,
            "history": [dict(r) for r in state.history],
        }
        torch.save(payload, path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        config = TrainConfig.from_dict(payload["config"])
        params = payload["params"]
        model = DecoderEncoder(config.arch)
        model.load_state_dict({k: v for k, v in params.items() if not k.startswith("codes.")})
        codes = LatentCodes(params["codes.weight"])
    except (KeyError, RuntimeError, ValueError, TypeError, EOFError) as exc:
        raise DataError(f"corrupted checkpoint {path}: {exc}") from exc
    codes.weight.requires_grad_(not config.freeze_codes)
    optimizer = _make_optimizer(config, model, codes)
    optimizer.load_state_dict(payload["optimizer"])
    pca = None
    if payload["pca"] is not None:
        pca = PcaModel(**{k: v.numpy() for k, v in payload["pca"].items()})
    return TrainState(
        config=config,
        model=model,
        codes=codes,
        optimizer=optimizer,
        pca=pca,
        sample_ids=payload["sample_ids"],
        epoch=payload["epoch"],
        history=[dict(r) for r in payload["history"]],
    )


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch",) + METRIC_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in METRIC_COLUMNS])
    return path


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def train(split: OneClassSplit, config: TrainConfig, out_dir, resume_from=None):
    """Train on ``split.train``; returns ``(final checkpoint path, history)``.

    Writes periodic checkpoints, ``checkpoint.pt`` and ``metrics.csv`` to
    ``out_dir``. With ``resume_from`` the run continues from that
    checkpoint up to ``config.epochs``.
    """
    if not split.train:
        raise DataError("split has no training samples")
    out_dir = Path(out_dir)
    images = torch.from_numpy(stack_pixels(split.train))
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.sample_ids != [s.id for s in split.train]:
            raise ConfigError("checkpoint was trained on a different set of samples")
        state.config = replace(state.config, epochs=config.epochs)
    else:
        state = init_state(images, config, [s.id for s in split.train])
    fit_state(state, images, checkpoint_dir=out_dir)
    final = save_checkpoint(state, out_dir / "checkpoint.pt")
    write_metrics_csv(state.history, out_dir / "metrics.csv")
    return final, list(state.history)
