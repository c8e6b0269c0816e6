"""Losses, optimizer, learning-rate schedule, and the three-stage protocol.

Stages:

  flow     - train the flow generator/discriminator pair alone on real flows.
  texture  - train the texture pair on (video, ground-truth flow) pairs; the
             discriminator is conditioned on the ground-truth flow.
  joint    - load both pretrained pairs and fine-tune them together. The
             flow generator's loss gains ``lambda_joint`` times the texture
             generator's loss evaluated on the *generated* flow, so gradients
             from the texture discriminator reach the flow generator. Both
             discriminators keep training, conditioned on generated flow on
             the fake branch.

Each iteration runs one discriminator step and one generator step. Scores
are clamped to [eps, 1 - eps] before every log, so in-range scores can never
produce a non-finite loss. Every random draw comes from a named numpy
stream derived from the config seed: flow-side batches and latents use
streams of their own, which makes a joint run with ``lambda_joint = 0``
reproduce a flow-only run bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import fileio, synthdata
from .networks import (
    ArchConfig, build_network, restore_networks, parameter_gradients,
    state_tensors, to_torch,
)

LOG_EPS = 1e-7

STAGES = ("flow", "texture", "joint")

# Named RNG stream indices (spawn keys off the config seed).
_STREAM_FLOW_DATA, _STREAM_FLOW_Z, _STREAM_TEX_DATA, _STREAM_TEX_Z, _STREAM_INIT = range(5)


class TrainingDiverged(RuntimeError):
    """A loss or gradient went non-finite; the run was aborted."""


class StageMismatchError(ValueError):
    """A checkpoint from one training stage was fed to a different stage."""


@dataclass
class TrainConfig:
    stage: str
    total_iters: int
    seed: int = 0
    lr_initial: float = 2e-4
    lr_flow_joint: float = 1e-7
    lr_texture_joint: float = 1e-6
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    lambda_joint: float = 0.1
    lambda_mask: float = 0.1
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    log_every: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}, expected one of {STAGES}")
        if self.total_iters < 7:
            raise ValueError(f"total_iters must be >= 7 so the schedule fits 6 halvings, got {self.total_iters}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


# ---------------------------------------------------------------------------
# Losses.
# ---------------------------------------------------------------------------

def _as_score(x):
    if torch.is_tensor(x):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _clamped_log(score):
    return torch.log(torch.clamp(_as_score(score), LOG_EPS, 1.0 - LOG_EPS))


def gan_discriminator_loss(d_real, d_fake):
    """-[log d_real + log(1 - d_fake)], averaged over any batch axes."""
    fake = torch.clamp(_as_score(d_fake), LOG_EPS, 1.0 - LOG_EPS)
    return -(_clamped_log(d_real).mean() + torch.log(1.0 - fake).mean())


def gan_generator_loss(d_fake):
    """Non-saturating generator loss -log d_fake, averaged over any batch axes."""
    return -_clamped_log(d_fake).mean()


def mask_l1(mask):
    """Mean absolute mask value; penalizing it pushes pixels to the background."""
    return mask.abs().mean()


def joint_flow_generator_loss(flow_own_loss, texture_through_loss, lambda_joint=0.1):
    """Flow generator loss plus the weighted texture loss routed through its output."""
    return flow_own_loss + lambda_joint * texture_through_loss


# ---------------------------------------------------------------------------
# Learning-rate schedule: six evenly spaced halvings.
# ---------------------------------------------------------------------------

def decay_boundaries(total_iters: int):
    return [round(j * total_iters / 7) for j in range(1, 7)]


def decayed_lr(lr_initial: float, iteration: int, total_iters: int) -> float:
    k = sum(1 for b in decay_boundaries(total_iters) if iteration >= b)
    return lr_initial * 2.0 ** (-k)


def lr_at(iteration: int, config: TrainConfig) -> float:
    if iteration < 0 or iteration >= config.total_iters:
        raise ValueError(f"iteration {iteration} out of range [0, {config.total_iters})")
    return decayed_lr(config.lr_initial, iteration, config.total_iters)


# ---------------------------------------------------------------------------
# Adam with bias correction (beta1 = 0.5 by default).
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict


def adam_state_for(params: dict) -> AdamState:
    return AdamState(
        step=0,
        m={n: torch.zeros_like(p) for n, p in params.items()},
        v={n: torch.zeros_like(p) for n, p in params.items()},
    )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.5, beta2=0.999, eps=1e-8):
    """One in-place Adam update on named parameters."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if not torch.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {name}")
            m, v = state.m[name], state.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))


class AdamOptimizer:
    """Adam bound to one module's named parameters."""

    def __init__(self, module, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = dict(module.named_parameters())
        self.state = adam_state_for(self.params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grads: dict, lr: float):
        adam_step(self.params, grads, self.state, lr, self.beta1, self.beta2, self.eps)


def grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))


def _scalar(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


# ---------------------------------------------------------------------------
# Stage trainer.
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    networks: dict
    log: list
    checkpoint_path: Path | None
    log_path: Path | None


def _stream(seed: int, idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(idx,)))


def _as_checkpoint(ckpt):
    if ckpt is None or isinstance(ckpt, fileio.Checkpoint):
        return ckpt
    return fileio.load_checkpoint(ckpt)


class StageTrainer:
    def __init__(self, dataset, config: TrainConfig, arch: ArchConfig | None = None,
                 out_dir=None, flow_init=None, texture_init=None):
        self.dataset = dataset
        self.config = config
        self.arch = arch or ArchConfig()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.crop_hw = self.arch.video_shape[1:]

        flow_init = _as_checkpoint(flow_init)
        texture_init = _as_checkpoint(texture_init)
        if config.stage == "joint" and (flow_init is None or texture_init is None):
            raise ValueError("joint training requires pretrained flow and texture checkpoints")

        init_seeds = _stream(config.seed, _STREAM_INIT).integers(0, 2 ** 31, size=4)
        self.nets = {}
        if config.stage in ("flow", "joint"):
            self._init_pair(flow_init, ("flow", "joint"), "flow_generator", "flow_discriminator",
                            int(init_seeds[0]), int(init_seeds[1]))
        if config.stage in ("texture", "joint"):
            self._init_pair(texture_init, ("texture", "joint"), "texture_generator",
                            "texture_discriminator", int(init_seeds[2]), int(init_seeds[3]))

        self.opts = {name: AdamOptimizer(net, config.beta1, config.beta2, config.adam_eps)
                     for name, net in self.nets.items()}
        self.rng_flow_data = _stream(config.seed, _STREAM_FLOW_DATA)
        self.rng_flow_z = _stream(config.seed, _STREAM_FLOW_Z)
        self.rng_tex_data = _stream(config.seed, _STREAM_TEX_DATA)
        self.rng_tex_z = _stream(config.seed, _STREAM_TEX_Z)

    def _init_pair(self, ckpt, allowed_stages, gen_name, disc_name, gen_seed, disc_seed):
        if ckpt is None:
            self.nets[gen_name] = build_network(gen_name, self.arch, gen_seed)
            self.nets[disc_name] = build_network(disc_name, self.arch, disc_seed)
            return
        if ckpt.stage not in allowed_stages:
            raise StageMismatchError(
                f"checkpoint stage {ckpt.stage!r} cannot seed {gen_name}/{disc_name} "
                f"(expected one of {allowed_stages})")
        restored = restore_networks(ckpt, names=[gen_name, disc_name])
        self.nets.update(restored)

    # -- batching ----------------------------------------------------------

    def _draw_samples(self, rng):
        n = len(self.dataset)
        idx = rng.integers(0, n, size=self.config.batch_size)
        seeds = rng.integers(0, 2 ** 63, size=self.config.batch_size)
        return [synthdata.augment(self.dataset.sample(int(i)), int(s), self.crop_hw)
                for i, s in zip(idx, seeds)]

    def _flow_batch(self, rng):
        samples = self._draw_samples(rng)
        return torch.stack([to_torch(s.flow) for s in samples])

    def _texture_batch(self, rng):
        samples = self._draw_samples(rng)
        videos = torch.stack([to_torch(s.video) for s in samples])
        flows = torch.stack([to_torch(s.flow) for s in samples])
        return videos, flows

    def _draw_z(self, rng):
        z = rng.standard_normal((self.config.batch_size, self.arch.latent_dim))
        return torch.from_numpy(z.astype(np.float32))

    # -- single steps ------------------------------------------------------

    def _flow_d_step(self, flows_real, z_d, lr):
        gen, disc = self.nets["flow_generator"], self.nets["flow_discriminator"]
        with torch.no_grad():
            fake_flow, _ = gen(z_d)
        s_real, _ = disc(flows_real)
        s_fake, _ = disc(fake_flow)
        loss = gan_discriminator_loss(s_real, s_fake)
        grads = parameter_gradients(loss, disc)
        self.opts["flow_discriminator"].step(grads, lr)
        return _scalar(loss), grad_norm(grads), fake_flow

    def _flow_g_loss(self, z_g):
        gen, disc = self.nets["flow_generator"], self.nets["flow_discriminator"]
        fake_flow, mask = gen(z_g)
        s_fake, _ = disc(fake_flow)
        penalty = mask_l1(mask)
        loss = gan_generator_loss(s_fake) + self.config.lambda_mask * penalty
        return loss, fake_flow, _scalar(penalty)

    def _texture_d_step(self, videos, conds_real, z_d, lr, fake_cond=None):
        gen, disc = self.nets["texture_generator"], self.nets["texture_discriminator"]
        cond = conds_real if fake_cond is None else fake_cond
        with torch.no_grad():
            fake_video, _, _ = gen(z_d, cond)
        s_real, _ = disc(videos, conds_real)
        s_fake, _ = disc(fake_video, cond)
        loss = gan_discriminator_loss(s_real, s_fake)
        grads = parameter_gradients(loss, disc)
        self.opts["texture_discriminator"].step(grads, lr)
        return _scalar(loss), grad_norm(grads)

    def _texture_g_loss(self, z_g, cond):
        gen, disc = self.nets["texture_generator"], self.nets["texture_discriminator"]
        fake_video, mask, _ = gen(z_g, cond)
        s_fake, _ = disc(fake_video, cond)
        penalty = mask_l1(mask)
        loss = gan_generator_loss(s_fake) + self.config.lambda_mask * penalty
        return loss, _scalar(penalty)

    # -- per-stage iterations ----------------------------------------------

    def _iter_flow(self, i):
        lr = decayed_lr(self.config.lr_initial, i, self.config.total_iters)
        flows = self._flow_batch(self.rng_flow_data)
        z_d = self._draw_z(self.rng_flow_z)
        l_d, gn_d, _ = self._flow_d_step(flows, z_d, lr)
        z_g = self._draw_z(self.rng_flow_z)
        loss, _, penalty = self._flow_g_loss(z_g)
        grads = parameter_gradients(loss, self.nets["flow_generator"])
        self.opts["flow_generator"].step(grads, lr)
        return {"L_D": l_d, "L_G": _scalar(loss), "mask_l1": penalty, "lr": lr,
                "grad_norm_D": gn_d, "grad_norm_G": grad_norm(grads)}

    def _iter_texture(self, i):
        lr = decayed_lr(self.config.lr_initial, i, self.config.total_iters)
        videos, conds = self._texture_batch(self.rng_tex_data)
        z_d = self._draw_z(self.rng_tex_z)
        l_d, gn_d = self._texture_d_step(videos, conds, z_d, lr)
        z_g = self._draw_z(self.rng_tex_z)
        loss, penalty = self._texture_g_loss(z_g, conds)
        grads = parameter_gradients(loss, self.nets["texture_generator"])
        self.opts["texture_generator"].step(grads, lr)
        return {"L_D": l_d, "L_G": _scalar(loss), "mask_l1": penalty, "lr": lr,
                "grad_norm_D": gn_d, "grad_norm_G": grad_norm(grads)}

    def _iter_joint(self, i):
        cfg = self.config
        lr_f = decayed_lr(cfg.lr_flow_joint, i, cfg.total_iters)
        lr_t = decayed_lr(cfg.lr_texture_joint, i, cfg.total_iters)

        flows = self._flow_batch(self.rng_flow_data)
        z_d = self._draw_z(self.rng_flow_z)
        l_d_flow, gn_d_flow, fake_cond = self._flow_d_step(flows, z_d, lr_f)

        videos, conds = self._texture_batch(self.rng_tex_data)
        z_tex_d = self._draw_z(self.rng_tex_z)
        l_d_tex, gn_d_tex = self._texture_d_step(videos, conds, z_tex_d, lr_t, fake_cond=fake_cond)

        z_g = self._draw_z(self.rng_flow_z)
        flow_own, fake_flow_g, flow_penalty = self._flow_g_loss(z_g)
        z_tex_g = self._draw_z(self.rng_tex_z)
        tex_loss, tex_penalty = self._texture_g_loss(z_tex_g, fake_flow_g)

        flow_gen, tex_gen = self.nets["flow_generator"], self.nets["texture_generator"]
        g_own = parameter_gradients(flow_own, flow_gen, retain_graph=True)
        flow_names, flow_params = zip(*flow_gen.named_parameters())
        tex_names, tex_params = zip(*tex_gen.named_parameters())
        g_all = torch.autograd.grad(tex_loss, flow_params + tex_params, allow_unused=True)
        g_through = {n: (g if g is not None else torch.zeros_like(p))
                     for n, p, g in zip(flow_names, flow_params, g_all[:len(flow_params)])}
        g_tex = {n: (g if g is not None else torch.zeros_like(p))
                 for n, p, g in zip(tex_names, tex_params, g_all[len(flow_params):])}
        combined = {n: g_own[n] + cfg.lambda_joint * g_through[n] for n in g_own}

        self.opts["flow_generator"].step(combined, lr_f)
        self.opts["texture_generator"].step(g_tex, lr_t)

        joint_loss = joint_flow_generator_loss(_scalar(flow_own), _scalar(tex_loss), cfg.lambda_joint)
        return {"L_D": l_d_flow, "L_G": _scalar(flow_own), "mask_l1": flow_penalty, "lr": lr_f,
                "grad_norm_D": gn_d_flow, "grad_norm_G": grad_norm(combined),
                "L_D_tex": l_d_tex, "L_G_tex": _scalar(tex_loss), "mask_l1_tex": tex_penalty,
                "lr_tex": lr_t, "grad_norm_D_tex": gn_d_tex, "grad_norm_G_tex": grad_norm(g_tex),
                "L_G_joint": joint_loss}

    # -- driver --------------------------------------------------------------

    def run(self, eval_hook=None, eval_every=0) -> TrainResult:
        cfg = self.config
        step_fn = {"flow": self._iter_flow, "texture": self._iter_texture,
                   "joint": self._iter_joint}[cfg.stage]
        log = []
        log_file = None
        log_path = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_path = self.out_dir / "train_log.jsonl"
            log_file = open(log_path, "w")
        try:
            for i in range(cfg.total_iters):
                try:
                    record = step_fn(i)
                except TrainingDiverged as e:
                    bad = {"iter": i, "stage": cfg.stage, "diverged": str(e)}
                    log.append(bad)
                    if log_file:
                        log_file.write(json.dumps(bad, sort_keys=True) + "\n")
                    raise
                record = {"iter": i, "stage": cfg.stage, **record}
                scalars = [v for v in record.values() if isinstance(v, float)]
                if not all(math.isfinite(v) for v in scalars):
                    record["diverged"] = "non-finite loss"
                    log.append(record)
                    if log_file:
                        log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    raise TrainingDiverged(f"non-finite loss at iteration {i}: {record}")
                if eval_hook is not None and eval_every > 0 and (i + 1) % eval_every == 0:
                    record.update(eval_hook(i + 1, self.nets))
                if (i % cfg.log_every == 0) or i == cfg.total_iters - 1:
                    log.append(record)
                    if log_file:
                        log_file.write(json.dumps(record, sort_keys=True) + "\n")
                if (self.out_dir is not None and cfg.checkpoint_every > 0
                        and (i + 1) % cfg.checkpoint_every == 0 and (i + 1) < cfg.total_iters):
                    path = self._save(self.out_dir / f"checkpoint_{i + 1:06d}.ftck", i + 1)
                    pointer = {"iter": i, "stage": cfg.stage, "checkpoint": str(path)}
                    log.append(pointer)
                    if log_file:
                        log_file.write(json.dumps(pointer, sort_keys=True) + "\n")
            ckpt_path = None
            if self.out_dir is not None:
                ckpt_path = self._save(self.out_dir / "checkpoint_final.ftck", cfg.total_iters)
                pointer = {"iter": cfg.total_iters - 1, "stage": cfg.stage,
                           "checkpoint": str(ckpt_path)}
                log.append(pointer)
                if log_file:
                    log_file.write(json.dumps(pointer, sort_keys=True) + "\n")
        finally:
            if log_file:
                log_file.close()
        return TrainResult(networks=self.nets, log=log, checkpoint_path=ckpt_path, log_path=log_path)

    def _save(self, path, iteration):
        tensors = {}
        for name, net in self.nets.items():
            tensors.update(state_tensors(net, name))
        return fileio.save_checkpoint(
            path, tensors, stage=self.config.stage, iteration=iteration,
            seed=self.config.seed, arch=self.arch.to_dict())


def train_stage(stage: str, dataset, config: TrainConfig, arch: ArchConfig | None = None,
                out_dir=None, flow_init=None, texture_init=None,
                eval_hook=None, eval_every=0) -> TrainResult:
    """Run one stage of the protocol. ``config.stage`` must agree with ``stage``."""
    if config.stage != stage:
        raise ValueError(f"config.stage = {config.stage!r} but train_stage called with {stage!r}")
    trainer = StageTrainer(dataset, config, arch=arch, out_dir=out_dir,
                           flow_init=flow_init, texture_init=texture_init)
    return trainer.run(eval_hook=eval_hook, eval_every=eval_every)
