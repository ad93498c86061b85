"""VAE-GAN training loop, early stopping, checkpointing and fine-tuning."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .corpus import Batch, Corpus, CorpusError, batch_iterator
from .embedders import Surrogates, SurrogateError
from .losses import (
    LossBreakdown,
    kl_global,
    kl_local,
    recon_l1,
    total_generator_loss,
    voice_loss,
    wgan_losses,
)
from .models import SIGMA_MIN, Critic, LipToSpeechNet, reparam_sample

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"


class TrainingDivergedError(FloatingPointError):
    """A loss term became non-finite; the message names the term."""


def apply_crop(frames: torch.Tensor, mode: str) -> torch.Tensor:
    """``lower_half`` keeps rows 48..95 and stretches them back to 96 rows."""
    if mode == "full_face":
        return frames
    if mode == "lower_half":
        half = frames.shape[2] // 2
        return torch.repeat_interleave(frames[:, :, half:], 2, dim=2)
    raise ValueError(f"unknown crop mode {mode!r}")


class EarlyStopping:
    """Stop once the monitored value has not dropped by ``min_delta`` below
    the best so far for ``patience`` consecutive epochs."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = None
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, value: float, epoch: int) -> bool:
        """Record an epoch; returns True if this epoch was a new best."""
        if self.best is None or value < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainState:
    config: TrainConfig
    net: LipToSpeechNet
    critic: Critic
    surrogates: Surrogates
    opt_gen: torch.optim.Optimizer
    opt_critic: torch.optim.Optimizer
    np_rng: np.random.Generator
    torch_gen: torch.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def generator_parameters(self):
        return list(self.net.parameters())


def _optimizer(params, config: TrainConfig):
    return torch.optim.RMSprop(params, lr=config.learning_rate, alpha=config.rmsprop_alpha,
                               momentum=config.rmsprop_momentum)


def new_state(config: TrainConfig, surrogates: Surrogates) -> TrainState:
    if surrogates is None:
        raise SurrogateError("training needs pretrained surrogates")
    torch.manual_seed(config.seed)
    net = LipToSpeechNet()
    critic = Critic()
    gen = torch.Generator().manual_seed(config.seed)
    return TrainState(
        config=config,
        net=net,
        critic=critic,
        surrogates=surrogates,
        opt_gen=_optimizer(net.parameters(), config),
        opt_critic=_optimizer(critic.parameters(), config),
        np_rng=np.random.default_rng(config.seed),
        torch_gen=gen,
    )


# --- checkpoint conversion -------------------------------------------------

def _to_numpy(state_dict: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v.detach().cpu().numpy() for k, v in state_dict.items()}


def _from_numpy(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in params.items() if k.startswith(prefix)}


def _optim_to_numpy(opt: torch.optim.Optimizer):
    sd = opt.state_dict()
    arrays = {f"{idx}.{key}": val.detach().cpu().numpy() for idx, st in sd["state"].items() for key, val in st.items()}
    return sd["param_groups"], arrays


def _optim_from_numpy(opt: torch.optim.Optimizer, groups, arrays):
    state = {}
    for name, arr in arrays.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr))
    opt.load_state_dict({"state": state, "param_groups": groups})


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    params = _to_numpy(state.net.state_dict(), "gen.")
    params.update(_to_numpy(state.critic.state_dict(), "critic."))
    params.update({k: v.detach().cpu().numpy() for k, v in state.surrogates.state_dict().items()})
    gen_groups, gen_arrays = _optim_to_numpy(state.opt_gen)
    critic_groups, critic_arrays = _optim_to_numpy(state.opt_critic)
    return Checkpoint(
        config=state.config.to_dict(),
        params=params,
        epoch=state.epoch,
        step=state.step,
        rng_state={
            "numpy": state.np_rng.bit_generator.state,
            "torch": state.torch_gen.get_state().numpy().tobytes().hex(),
        },
        history=list(state.history),
        optimizer={"meta": {"gen": gen_groups, "critic": critic_groups},
                   "arrays": {"gen": gen_arrays, "critic": critic_arrays}},
        extra=dict(state.extra),
    )


def build_networks(params: dict):
    """Instantiate generator, critic and surrogates from checkpoint params."""
    net = LipToSpeechNet()
    net.load_state_dict(_from_numpy(params, "gen."))
    critic = Critic()
    critic.load_state_dict(_from_numpy(params, "critic."))
    surrogates = Surrogates.from_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()
                                             if k.startswith("surrogate.")})
    return net, critic, surrogates


def state_from_checkpoint(ckpt: Checkpoint, config: TrainConfig | None = None,
                          restore_optimizer: bool = True) -> TrainState:
    config = config or TrainConfig.from_dict(ckpt.config)
    net, critic, surrogates = build_networks(ckpt.params)
    state = TrainState(
        config=config,
        net=net,
        critic=critic,
        surrogates=surrogates,
        opt_gen=_optimizer(net.parameters(), config),
        opt_critic=_optimizer(critic.parameters(), config),
        np_rng=np.random.default_rng(config.seed),
        torch_gen=torch.Generator().manual_seed(config.seed),
    )
    if restore_optimizer:
        meta, arrays = ckpt.optimizer.get("meta", {}), ckpt.optimizer.get("arrays", {})
        if "gen" in meta:
            _optim_from_numpy(state.opt_gen, meta["gen"], arrays.get("gen", {}))
            _optim_from_numpy(state.opt_critic, meta["critic"], arrays.get("critic", {}))
        if ckpt.rng_state:
            state.np_rng.bit_generator.state = ckpt.rng_state["numpy"]
            state.torch_gen.set_state(torch.from_numpy(np.frombuffer(bytes.fromhex(ckpt.rng_state["torch"]),
                                                                     dtype=np.uint8).copy()))
        state.epoch, state.step = ckpt.epoch, ckpt.step
        state.history = list(ckpt.history)
    return state


# --- single steps -----------------------------------------------------------

def _batch_tensors(batch: Batch):
    return (torch.as_tensor(batch.lips), torch.as_tensor(batch.mel), torch.as_tensor(batch.ref_mel))


def _source_for_step(config: TrainConfig, step: int) -> str:
    if config.sampling_source != "alternate":
        return config.sampling_source
    # generator steps are numbered from 1: odd -> content, even -> lip
    return "content" if (step + 1) % 2 == 1 else "lip"


def _distributions(state: TrainState, lips, mel):
    content = state.surrogates.content_features(mel)
    mu_c, sig_c = state.net.content_distribution(content)
    mu_l, sig_l = state.net.lip_distribution(apply_crop(lips, state.config.crop_mode))
    if not state.config.variational:
        sig_c = torch.full_like(sig_c, SIGMA_MIN)
        sig_l = torch.full_like(sig_l, SIGMA_MIN)
    return (mu_c, sig_c), (mu_l, sig_l)


def generator_losses(state: TrainState, batch: Batch):
    """Forward pass of one generator update; returns ``(total, parts, fake)``
    with ``parts`` holding the unweighted tensors."""
    cfg = state.config
    lips, mel, ref_mel = _batch_tensors(batch)
    content_dist, lip_dist = _distributions(state, lips, mel)
    source = content_dist if _source_for_step(cfg, state.step) == "content" else lip_dist
    z = reparam_sample(*source, generator=state.torch_gen)
    with torch.no_grad():
        speaker = state.surrogates.speaker_features(ref_mel)
        target_voice = state.surrogates.speaker_features(mel)
    fake = state.net.decode(z, speaker)

    zero = fake.new_zeros(())
    parts = {"l_r": recon_l1(fake, mel)}
    if cfg.variational:
        parts["l_kl_global"] = kl_global(content_dist, lip_dist, order=cfg.kl_order)
        parts["l_kl_local"] = kl_local(content_dist, lip_dist, state.np_rng, cfg.local_segments,
                                       cfg.local_min_len, cfg.local_max_len, order=cfg.kl_order)
        parts["l_align"] = zero
    else:
        parts["l_kl_global"] = zero
        parts["l_kl_local"] = zero
        parts["l_align"] = 0.5 * ((content_dist[0] - lip_dist[0]) ** 2).sum(-1).mean()
    parts["l_voice"] = voice_loss(state.surrogates.speaker_features, fake, target_voice, state.np_rng)
    parts["l_adv_gen"] = -state.critic(fake).mean()
    for name, value in parts.items():
        if not torch.isfinite(value):
            raise TrainingDivergedError(f"non-finite {name} at epoch {state.epoch + 1}, step {state.step + 1}")
    total = total_generator_loss(parts, cfg.weights)
    return total, parts, fake


def generator_step(state: TrainState, batch: Batch) -> dict:
    state.net.train()
    for p in state.critic.parameters():
        p.requires_grad_(False)
    try:
        total, parts, _ = generator_losses(state, batch)
        state.opt_gen.zero_grad(set_to_none=True)
        total.backward()
        state.opt_gen.step()
    finally:
        for p in state.critic.parameters():
            p.requires_grad_(True)
    state.step += 1
    out = {k: v.item() for k, v in parts.items()}
    out["total_gen"] = total.item()
    return out


def critic_step(state: TrainState, batch: Batch) -> dict:
    """``critic_iters_per_gen`` critic updates on this batch, each against a fresh generator draw."""
    cfg = state.config
    lips, mel, ref_mel = _batch_tensors(batch)
    # batch-norm running statistics belong to the generator update, so undo any drift here
    buffers = {k: v.clone() for k, v in state.net.named_buffers()}
    with torch.no_grad():
        content_dist, lip_dist = _distributions(state, lips, mel)
        source = content_dist if _source_for_step(cfg, state.step) == "content" else lip_dist
        speaker = state.surrogates.speaker_features(ref_mel)
    for name, value in state.net.named_buffers():
        value.copy_(buffers[name])
    records = []
    for _ in range(cfg.critic_iters_per_gen):
        with torch.no_grad():
            fake = state.net.decode(reparam_sample(*source, generator=state.torch_gen), speaker)
        try:
            l_critic, _, l_gp = wgan_losses(state.critic, mel, fake, state.torch_gen)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"{exc} at epoch {state.epoch + 1}, step {state.step + 1}") from exc
        for name, value in (("l_adv_critic", l_critic), ("l_gp", l_gp)):
            if not torch.isfinite(value):
                raise TrainingDivergedError(f"non-finite {name} at epoch {state.epoch + 1}, step {state.step + 1}")
        objective = l_critic + cfg.weights.lambda_gp * l_gp
        state.opt_critic.zero_grad(set_to_none=True)
        objective.backward()
        state.opt_critic.step()
        records.append((l_critic.item(), l_gp.item(), objective.item()))
    arr = np.asarray(records)
    return {"l_adv_critic": arr[:, 0].mean(), "l_gp": arr[:, 1].mean(), "critic_objective": arr[:, 2].mean()}


def run_epoch(state: TrainState, corpus: Corpus) -> dict | None:
    """One pass over the corpus; returns the epoch-mean record, or None if no
    step ran because ``max_steps`` was already reached."""
    cfg = state.config
    gen_records, critic_records = [], []
    for batch in batch_iterator(corpus, cfg.batch_size, cfg.seed, state.epoch):
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        critic_records.append(critic_step(state, batch))
        gen_records.append(generator_step(state, batch))
    if not gen_records:
        return None
    state.epoch += 1
    record = {"epoch": state.epoch, "step": state.step}
    breakdown = LossBreakdown()
    for name in ("l_r", "l_kl_global", "l_kl_local", "l_voice", "l_adv_gen", "l_align", "total_gen"):
        setattr(breakdown, name, float(np.mean([r[name] for r in gen_records])))
    for name in ("l_adv_critic", "l_gp"):
        setattr(breakdown, name, float(np.mean([r[name] for r in critic_records])))
    record.update(breakdown.as_dict())
    record["critic_objective"] = float(np.mean([r["critic_objective"] for r in critic_records]))
    record["wasserstein"] = -breakdown.l_adv_critic
    if not np.isfinite(record["wasserstein"]):
        raise TrainingDivergedError(f"non-finite Wasserstein estimate in epoch {state.epoch}")
    return record


@dataclass
class TrainResult:
    state: TrainState
    history: list
    stop_reason: str
    best_epoch: int | None = None
    out_dir: Path | None = None

    @property
    def best_path(self):
        return self.out_dir / "best.ckpt" if self.out_dir else None

    @property
    def last_path(self):
        return self.out_dir / "last.ckpt" if self.out_dir else None

    def checkpoint(self) -> Checkpoint:
        return state_to_checkpoint(self.state)


def _fit(state: TrainState, corpus: Corpus, out_dir) -> TrainResult:
    cfg = state.config
    if len(corpus) < cfg.batch_size:
        raise CorpusError(f"corpus has {len(corpus)} utterances, fewer than batch_size {cfg.batch_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_FILE).write_text("")
    stopper = EarlyStopping(cfg.patience_epochs, cfg.min_improvement)
    reason = "max_epochs"
    if out is not None:
        save_checkpoint(state_to_checkpoint(state), out / "last.ckpt")
    while state.epoch < cfg.max_epochs:
        record = run_epoch(state, corpus)
        if record is None:
            reason = "max_steps"
            break
        state.history.append(record)
        improved = stopper.update(record["critic_objective"], record["epoch"])
        logger.info("epoch %d step %d L_r %.4f KLg %.4f KLl %.4f voice %.4f W %.4f critic %.4f",
                    record["epoch"], record["step"], record["l_r"], record["l_kl_global"],
                    record["l_kl_local"], record["l_voice"], record["wasserstein"], record["critic_objective"])
        if out is not None:
            with open(out / METRICS_FILE, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            ckpt = state_to_checkpoint(state)
            save_checkpoint(ckpt, out / "last.ckpt")
            if improved:
                save_checkpoint(ckpt, out / "best.ckpt")
            if cfg.keep_epoch_checkpoints:
                save_checkpoint(ckpt, out / f"epoch_{record['epoch']:03d}.ckpt")
        if stopper.should_stop:
            reason = "patience"
            break
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            reason = "max_steps"
            break
    if out is not None and not (out / "best.ckpt").exists():
        save_checkpoint(state_to_checkpoint(state), out / "best.ckpt")
    return TrainResult(state, state.history, reason, stopper.best_epoch, out)


def _as_corpus(corpus) -> Corpus:
    return corpus if isinstance(corpus, Corpus) else Corpus(corpus)


def train(corpus, config: TrainConfig, out_dir=None, surrogates: Surrogates | None = None) -> TrainResult:
    """Train from scratch.

    Each outer step runs ``critic_iters_per_gen`` critic updates on a batch,
    then one generator update. Writes ``metrics.jsonl``, ``last.ckpt`` and
    ``best.ckpt`` under ``out_dir`` when given.
    """
    state = new_state(config, surrogates)
    return _fit(state, _as_corpus(corpus), out_dir)


def finetune(base, corpus, config: TrainConfig | None = None, out_dir=None) -> TrainResult:
    """Continue training every trainable network from ``base`` on new data.

    Optimizers and the step counter start fresh; surrogates stay frozen.
    """
    if not isinstance(base, Checkpoint):
        base = load_checkpoint(base)
    corpus = _as_corpus(corpus)
    if len(corpus.speaker_ids) != 1:
        warnings.warn(f"fine-tuning corpus has {len(corpus.speaker_ids)} speakers; expected one", stacklevel=2)
    config = config or TrainConfig.from_dict(base.config)
    try:
        state = state_from_checkpoint(base, config, restore_optimizer=False)
    except (KeyError, RuntimeError) as exc:
        raise CheckpointError(f"base checkpoint does not match this model: {exc}") from exc
    state.extra["finetuned_from_epoch"] = base.epoch
    return _fit(state, corpus, out_dir)
