"""Training loop: alternating encoder/decoder and critic updates with an
adaptive weight on the mutual-information penalty."""
from __future__ import annotations

import configparser
import csv
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import BatchIterator, DatasetSplits
from .errors import ConfigurationError, TrainingDivergedError
from .networks import ModelBundle, build_networks, save_checkpoint
from .objectives import (
    dataset_objective,
    dv_mi_loss,
    frozen_params,
    group_elbo,
    sample_pairs,
)

METRICS_HEADER = [
    "iteration", "recon", "style_kl", "content_kl", "elbo",
    "L_psi", "lambda", "wall_time_s",
]


@dataclass
class LambdaState:
    """Adaptive weight on the MI penalty, steered toward a target in nats."""

    value: float = 0.0
    mi_target: float = 0.2
    step_size: float = 0.1

    def __post_init__(self):
        if self.mi_target <= 0:
            raise ConfigurationError(f"mi_target must be > 0, got {self.mi_target}")
        if self.value < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.value}")


def update_lambda(state: LambdaState, current_loss: float) -> LambdaState:
    """One controller step: grow the weight while the MI estimate exceeds the
    target, shrink it otherwise, clamped at zero."""
    new_value = state.value + state.step_size * (current_loss / state.mi_target - 1.0)
    return replace(state, value=max(0.0, new_value))


@dataclass
class RunConfig:
    """All knobs of one training run; serializable to/from INI config files."""

    # latents and grouping
    d_c: int = 2
    d_s: int = 14
    group_size: int = 2
    # optimization
    n_batch_groups: int = 64
    iterations: int = 50000
    critic_steps: int = 5
    learning_rate: float = 1e-4
    critic_learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    # objective
    beta: float = 1.0
    accumulation: str = "product"
    adversarial: bool = True
    lambda_init: float = 0.0
    lambda_step: float = 0.1
    mi_target: float = 0.2
    # networks
    arch: str = "conv"
    hidden_units: int = 512
    # bookkeeping
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 10000
    dataset: str = "mnist"
    data_dir: str = ""
    # evaluation
    classifier: str = "svm"
    svm_c: float = 1.0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.critic_steps < 0:
            raise ConfigurationError("critic_steps must be >= 0")
        if self.accumulation not in ("product", "average"):
            raise ConfigurationError(f"unknown accumulation {self.accumulation!r}")
        if self.arch not in ("conv", "mlp"):
            raise ConfigurationError(f"unknown arch {self.arch!r}")
        if self.beta < 1.0:
            raise ConfigurationError("beta must be >= 1")
        if self.classifier not in ("svm", "logistic"):
            raise ConfigurationError(f"unknown classifier {self.classifier!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigurationError(f"config file not found: {path}")
        values: dict = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                values[key] = raw
        return cls.from_dict(_coerce_fields(values))

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply `key=value` string overrides; values are coerced to the
        declared field types."""
        coerced = _coerce_fields(dict(overrides))
        return replace(self, **coerced)


def _coerce_fields(values: dict[str, str]) -> dict:
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigurationError(f"unknown config field {key!r}")
        if not isinstance(raw, str):
            out[key] = raw
            continue
        ftype = types[key]
        if ftype == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                out[key] = True
            elif lowered in ("0", "false", "no", "off"):
                out[key] = False
            else:
                raise ConfigurationError(f"field {key!r}: cannot parse bool from {raw!r}")
        elif ftype == "int":
            out[key] = int(raw)
        elif ftype == "float":
            out[key] = float(raw)
        else:
            out[key] = raw
    return out


def write_config(config: RunConfig, path):
    parser = configparser.ConfigParser()
    parser["run"] = {k: str(v) for k, v in config.to_dict().items()}
    with open(path, "w") as fh:
        parser.write(fh)


class MetricsWriter:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_HEADER)

    def append(self, row: dict):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([row[k] for k in METRICS_HEADER])


def train(
    config: RunConfig,
    splits: DatasetSplits,
    out_dir,
    progress: bool = False,
) -> ModelBundle:
    """Run the full loop and return the trained bundle.

    Each iteration ascends the encoder/decoder on the penalized bound, updates
    the penalty weight from the current MI estimate, then runs ``critic_steps``
    critic updates on fresh batches. With ``adversarial=False`` only the plain
    grouped ELBO is ascended. Metrics go to ``metrics.csv``; checkpoints are
    written periodically and at completion. A non-finite loss aborts with a
    diagnostic checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    encoder, decoder, critic = build_networks(config)
    model_opt = torch.optim.Adam(
        list(encoder.parameters()) + list(decoder.parameters()),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    critic_opt = torch.optim.Adam(
        critic.parameters(),
        lr=config.critic_learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
    )
    lam = LambdaState(config.lambda_init, config.mi_target, config.lambda_step)
    metrics = MetricsWriter(out_dir / "metrics.csv")
    bundle = ModelBundle(encoder, decoder, critic, lam.value, config)

    batches = iter(BatchIterator(splits.model_train, config.n_batch_groups, config.seed))
    start = time.monotonic()

    for iteration in range(1, config.iterations + 1):
        batch = next(batches)
        terms = group_elbo(
            batch.images, encoder, decoder,
            accumulation=config.accumulation, beta=config.beta,
        )
        elbo = dataset_objective(terms)
        mi_value = 0.0
        if config.adversarial:
            pairs = sample_pairs(batch.images, encoder, rng)
            with frozen_params(critic):
                mi = dv_mi_loss(pairs, critic)
            loss = -(elbo - lam.value * mi)
            mi_value = float(mi.detach())
        else:
            loss = -elbo

        if not torch.isfinite(loss):
            diag = out_dir / "diverged.ckpt"
            save_checkpoint(bundle, diag)
            raise TrainingDivergedError(
                f"non-finite loss at iteration {iteration}", checkpoint_path=diag
            )

        model_opt.zero_grad(set_to_none=True)
        loss.backward()
        model_opt.step()

        if config.adversarial:
            lam = update_lambda(lam, mi_value)
            bundle.lambda_value = lam.value
            for _ in range(config.critic_steps):
                critic_batch = next(batches)
                with frozen_params(encoder):
                    critic_pairs = sample_pairs(critic_batch.images, encoder, rng)
                    critic_loss = -dv_mi_loss(critic_pairs, critic)
                critic_opt.zero_grad(set_to_none=True)
                critic_loss.backward()
                critic_opt.step()

        if iteration % config.log_every == 0 or iteration == config.iterations:
            b, k = batch.images.shape[:2]
            row = {
                "iteration": iteration,
                # per-member negative log-likelihood, same scale as eval L_rec
                "recon": float(-terms.recon.detach().mean() / k),
                "style_kl": float(terms.style_kl.detach().mean() / k),
                "content_kl": float(terms.content_kl.detach().mean()),
                "elbo": float(elbo.detach()),
                "L_psi": mi_value,
                "lambda": lam.value,
                "wall_time_s": round(time.monotonic() - start, 3),
            }
            metrics.append(row)
            if progress:
                print(
                    f"iter {iteration}/{config.iterations} elbo={row['elbo']:.2f} "
                    f"L_psi={row['L_psi']:.4f} lambda={row['lambda']:.3f}",
                    flush=True,
                )
        if config.checkpoint_every and iteration % config.checkpoint_every == 0:
            save_checkpoint(bundle, out_dir / f"checkpoint_{iteration:07d}.ckpt")

    save_checkpoint(bundle, out_dir / "checkpoint_final.ckpt")
    return bundle
