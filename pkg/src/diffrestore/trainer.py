"""Diffusion training: noise regression with L1 loss and Adam.

Each step draws a per-example timestep t and noise eps, forms the noisy
image through the closed-form marginal, predicts eps from (y_t, degraded
condition, t) and takes one Adam step on the unfrozen parameters. Images
live in the signed unit range [-1, 1] inside the diffusion process and are
mapped back to [0, 1] at the I/O boundary.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .dataio import Checkpoint, build_manifest, load_image, sample_patch, save_checkpoint
from .denoiser import DenoiserConfig, PromptDenoiser
from .rng import numpy_generator, torch_generator
from .schedule import NoiseSchedule, forward_marginal


class NumericError(ArithmeticError):
    """Non-finite loss or gradient; the optimizer state was not advanced."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    total_steps: int = 1000
    patch_size: int = 128
    freeze_encoder: bool = False
    seed: int = 0
    checkpoint_every: int = 500
    lr_cosine_decay: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def lr_at(self, step: int) -> float:
        if not self.lr_cosine_decay or self.total_steps <= 1:
            return self.learning_rate
        frac = min(step, self.total_steps) / self.total_steps
        return self.learning_rate * 0.5 * (1.0 + float(np.cos(np.pi * frac)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and the step counter."""

    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            m={n: torch.zeros_like(p) for n, p in params.items()},
            v={n: torch.zeros_like(p) for n, p in params.items()},
            step=0,
        )


def to_signed_unit(img: torch.Tensor) -> torch.Tensor:
    """[0, 1] -> [-1, 1]."""
    return img * 2.0 - 1.0


def from_signed_unit(img: torch.Tensor) -> torch.Tensor:
    """[-1, 1] -> [0, 1]."""
    return (img + 1.0) / 2.0


def l1_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements (resolution-invariant)."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    return torch.mean(torch.abs(eps_hat - eps))


def adam_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    state: AdamState,
    cfg: TrainConfig,
    frozen: frozenset[str] = frozenset(),
    lr: float | None = None,
) -> tuple[dict[str, torch.Tensor], AdamState]:
    """One Adam step with bias correction, in place.

    Parameters whose name is in `frozen` (and parameters without a
    gradient) are left bit-exactly unchanged. A non-finite gradient aborts
    before any state is touched.
    """
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    live = {}
    for name, p in params.items():
        g = grads.get(name)
        if name in frozen or g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {tuple(g.shape)} != {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        live[name] = g
    state.step += 1
    k = state.step
    bc1 = 1.0 - b1**k
    bc2 = 1.0 - b2**k
    with torch.no_grad():
        for name, g in live.items():
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            update = (m / bc1) / (torch.sqrt(v / bc2) + cfg.adam_eps)
            params[name].sub_(lr * update)
    return params, state


def training_step(
    batch: list[tuple[torch.Tensor, torch.Tensor]],
    model: PromptDenoiser,
    opt: AdamState,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: torch.Generator,
    lr: float | None = None,
) -> float:
    """One optimization step over a batch of (clean, degraded) pairs in the
    [0, 1] domain. Returns the pre-update loss."""
    if not batch:
        raise ValueError("batch must be non-empty")
    shapes = {tuple(c.shape) for c, _ in batch} | {tuple(d.shape) for _, d in batch}
    if len(shapes) != 1:
        raise ValueError(f"all batch images must share one shape, got {shapes}")

    clean = torch.stack([to_signed_unit(c) for c, _ in batch])
    cond = torch.stack([to_signed_unit(d) for _, d in batch])
    t = torch.randint(1, sched.T + 1, (len(batch),), generator=rng)
    y_t, eps = forward_marginal(clean, t, sched, rng)

    model.zero_grad(set_to_none=True)
    loss = l1_loss(model(y_t, cond, t), eps)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite training loss: {loss.item()}")
    loss.backward()

    params = model.parameter_tensors()
    grads = {n: p.grad for n, p in params.items()}
    frozen = model.frozen_names(cfg.freeze_encoder)
    adam_update(params, grads, opt, cfg, frozen=frozen, lr=lr)
    return float(loss.detach())


def _as_rgb(img: np.ndarray) -> np.ndarray:
    return img if img.shape[0] == 3 else np.repeat(img, 3, axis=0)


class TrainingRun:
    """Stateful training loop over a paired directory tree, resumable from
    a checkpoint with a bit-identical trajectory."""

    def __init__(
        self,
        data_root,
        dcfg: DenoiserConfig,
        tcfg: TrainConfig,
        sched: NoiseSchedule,
        resume: Checkpoint | None = None,
    ):
        manifest = build_manifest(f"{data_root}/clean", f"{data_root}/degraded")
        self.pairs = [
            (_as_rgb(load_image(c)), _as_rgb(load_image(d)))
            for c, d in manifest.pairs
        ]
        self.dcfg = dcfg
        self.tcfg = tcfg
        self.sched = sched
        self.model = PromptDenoiser(dcfg)
        self.opt = AdamState.for_params(self.model.parameter_tensors())
        self.step = 0
        self.data_rng = numpy_generator(tcfg.seed, 1)
        self.noise_rng = torch_generator(tcfg.seed, 2)
        self.log_rows: list[tuple[int, float, float, float]] = []
        if resume is not None:
            self._restore(resume)

    def _restore(self, ckpt: Checkpoint) -> None:
        if ckpt.denoiser_config != self.dcfg.to_dict():
            raise ValueError("checkpoint denoiser config does not match")
        with torch.no_grad():
            for name, p in self.model.parameter_tensors().items():
                p.copy_(ckpt.params[name])
            for name in self.opt.m:
                self.opt.m[name].copy_(ckpt.adam_m[name])
                self.opt.v[name].copy_(ckpt.adam_v[name])
        self.opt.step = ckpt.adam_step
        self.step = ckpt.step
        if ckpt.numpy_rng_state is not None:
            self.data_rng.bit_generator.state = ckpt.numpy_rng_state
        if ckpt.torch_rng_state is not None:
            self.noise_rng.set_state(
                torch.frombuffer(bytearray(ckpt.torch_rng_state), dtype=torch.uint8).clone()
            )

    def checkpoint(self) -> Checkpoint:
        params = self.model.parameter_tensors()
        return Checkpoint(
            denoiser_config=self.dcfg.to_dict(),
            train_config=self.tcfg.to_dict(),
            params={n: p.detach().clone() for n, p in params.items()},
            adam_m={n: t.clone() for n, t in self.opt.m.items()},
            adam_v={n: t.clone() for n, t in self.opt.v.items()},
            adam_step=self.opt.step,
            step=self.step,
            schedule_betas=[float(b) for b in self.sched.betas],
            numpy_rng_state=self.data_rng.bit_generator.state,
            torch_rng_state=bytes(self.noise_rng.get_state().numpy().tobytes()),
        )

    def _sample_batch(self) -> list[tuple[torch.Tensor, torch.Tensor]]:
        batch = []
        for _ in range(self.tcfg.batch_size):
            idx = int(self.data_rng.integers(0, len(self.pairs)))
            clean, degraded = self.pairs[idx]
            cp, dp = sample_patch(clean, degraded, self.tcfg.patch_size, self.data_rng)
            batch.append(
                (torch.from_numpy(cp).float(), torch.from_numpy(dp).float())
            )
        return batch

    def run_step(self) -> float:
        lr = self.tcfg.lr_at(self.step)
        t0 = time.perf_counter()
        loss = training_step(
            self._sample_batch(), self.model, self.opt, self.sched,
            self.tcfg, self.noise_rng, lr=lr,
        )
        wall_ms = (time.perf_counter() - t0) * 1e3
        self.step += 1
        self.log_rows.append((self.step, loss, lr, wall_ms))
        return loss

    def run(self, out_dir=None, on_step=None) -> None:
        """Run to total_steps, writing periodic and final checkpoints under
        `out_dir` when given."""
        while self.step < self.tcfg.total_steps:
            loss = self.run_step()
            if on_step is not None:
                on_step(self.step, loss)
            if (
                out_dir is not None
                and self.tcfg.checkpoint_every > 0
                and self.step % self.tcfg.checkpoint_every == 0
                and self.step < self.tcfg.total_steps
            ):
                save_checkpoint(self.checkpoint(), f"{out_dir}/step{self.step:07d}.tdir")
        if out_dir is not None:
            save_checkpoint(self.checkpoint(), f"{out_dir}/final.tdir")
