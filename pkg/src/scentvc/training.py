"""Training loop: batching, Adam, learning-rate schedules, checkpoints, metrics log."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor

from .augment import FragmentSampler, Sample, visit_rng
from .checkpoint import load_checkpoint, save_checkpoint
from .features import UtterancePair
from .model import ModelConfig, Scent, lengths_to_mask, per_sample_losses, spectral_losses
from .multitask import AuxiliaryClassifiers, LossWeights, masked_accuracy, masked_cross_entropy, total_loss

log = logging.getLogger(__name__)

MODES = {
    "baseline": dict(multitask=False, augment=False),
    "mt": dict(multitask=True, augment=False),
    "mt-da": dict(multitask=True, augment=True),
}

CLASSIFIER_PREFIX = "mt."


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    base_lr: float = 1e-3
    warm_epochs: Optional[int] = None  # None -> 20, or 40 with augmentation
    decay: float = 0.95
    extra_epochs: int = 50
    seed: int = 0
    augment: bool = False
    multitask: bool = False
    lambda_phoneme: float = 0.1
    lambda_tone: float = 0.05
    mt_dropout: float = 0.5
    grad_clip: float = 1.0
    stop_pos_weight: float = 1.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    keep_epoch_checkpoints: bool = False
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must be in (0, 1]")
        if self.extra_epochs < 0:
            raise ValueError("extra_epochs must be >= 0")
        self.adam_betas = tuple(self.adam_betas)

    @property
    def warm(self) -> int:
        if self.warm_epochs is not None:
            return self.warm_epochs
        return 40 if self.augment else 20

    @property
    def total_epochs(self) -> int:
        return self.warm + self.extra_epochs

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_phoneme, self.lambda_tone)

    def with_mode(self, mode: str) -> "TrainConfig":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
        d = asdict(self)
        d.update(MODES[mode])
        return TrainConfig(**d)

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


_CONFIG_ALIASES = {
    "mt.lambda_phoneme": "lambda_phoneme",
    "mt.lambda_tone": "lambda_tone",
    "mt.dropout": "mt_dropout",
}


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    if "," in text:
        return [_parse_value(t.strip()) for t in text.split(",") if t.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Read ``key = value`` lines; ``model.<field>`` keys override :class:`ModelConfig` fields."""
    d = (base or TrainConfig()).to_dict()
    known = {f.name for f in fields(TrainConfig)}
    model_known = {f.name for f in fields(ModelConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, value = key.strip(), _parse_value(value.strip())
        key = _CONFIG_ALIASES.get(key, key)
        if key.startswith("model."):
            name = key[len("model."):]
            if name not in model_known:
                raise ValueError(f"config line {lineno}: unknown model key {name!r}")
            d["model"] = dict(d["model"], **{name: value})
        elif key in known and key != "model":
            d[key] = value
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    return TrainConfig(**d)


def lr_schedule(epoch: int, warm_epochs: int, base_lr: float = 1e-3, decay: float = 0.95) -> float:
    """Constant ``base_lr`` for the first ``warm_epochs`` (1-based), then exponential decay."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    if epoch <= warm_epochs:
        return base_lr
    return base_lr * decay ** (epoch - warm_epochs)


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list
    inputs: Tensor  # [B, T, D + D_b]
    src_len: Tensor
    targets: Tensor  # [B, T', D]
    tgt_len: Tensor
    src_labels: Tensor  # [B, T, 2]
    tgt_labels: Tensor  # [B, T', 2]

    @property
    def src_mask(self) -> Tensor:
        return lengths_to_mask(self.src_len, self.inputs.shape[1])

    @property
    def tgt_mask(self) -> Tensor:
        return lengths_to_mask(self.tgt_len, self.targets.shape[1])


def _pad(arrays, dtype) -> Tensor:
    longest = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), longest) + arrays[0].shape[1:], dtype=arrays[0].dtype)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return torch.as_tensor(out, dtype=dtype)


def make_batch(samples: Sequence[Sample], dtype=torch.float32) -> Batch:
    """Zero-pad samples to the longest in the batch; lengths define the masks."""
    if not samples:
        raise ValueError("cannot batch zero samples")
    inputs = [np.concatenate([s.src, s.bn], axis=1) for s in samples]
    return Batch(
        ids=[s.id for s in samples],
        inputs=_pad(inputs, dtype),
        src_len=torch.tensor([s.src.shape[0] for s in samples], dtype=torch.long),
        targets=_pad([s.tgt for s in samples], dtype),
        tgt_len=torch.tensor([s.tgt.shape[0] for s in samples], dtype=torch.long),
        src_labels=_pad([s.src_labels for s in samples], torch.long),
        tgt_labels=_pad([s.tgt_labels for s in samples], torch.long),
    )


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------


def save_model(path, model: Scent, classifiers: Optional[AuxiliaryClassifiers] = None, meta: Optional[dict] = None):
    tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if classifiers is not None:
        tensors.update({f"{CLASSIFIER_PREFIX}{k}": v.detach().cpu().numpy()
                        for k, v in classifiers.state_dict().items()})
    header = dict(meta or {})
    header["model_config"] = model.config.to_dict()
    header["inference_excludes"] = [CLASSIFIER_PREFIX]
    save_checkpoint(path, tensors, header)


def load_model(path, with_classifiers: bool = False):
    """Returns ``(model, classifiers_or_None, meta)``."""
    tensors, meta = load_checkpoint(path)
    config = ModelConfig.from_dict(meta["model_config"])
    model = Scent(config)
    model.load_state_dict({k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items()
                           if k.startswith("model.")})
    model.eval()
    classifiers = None
    mt = {k[len(CLASSIFIER_PREFIX):]: torch.from_numpy(v) for k, v in tensors.items()
          if k.startswith(CLASSIFIER_PREFIX)}
    if with_classifiers and mt:
        classifiers = AuxiliaryClassifiers(config)
        classifiers.load_state_dict(mt)
    return model, classifiers, meta


def strip_classifiers(src_path, dst_path) -> int:
    """Copy a checkpoint without the training-only classifier tensors; returns how many were removed."""
    tensors, meta = load_checkpoint(src_path)
    kept = {k: v for k, v in tensors.items() if not k.startswith(CLASSIFIER_PREFIX)}
    save_checkpoint(dst_path, kept, meta)
    return len(tensors) - len(kept)


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------


def _step_generator(seed: int, step: int, stream: int) -> torch.Generator:
    s = np.random.SeedSequence([seed, step, stream]).generate_state(1, dtype=np.uint64)[0]
    return torch.Generator().manual_seed(int(s) & 0x7FFF_FFFF_FFFF_FFFF)


def normalisation_stats(pairs: Sequence[UtterancePair]):
    src = np.concatenate([p.src.frames for p in pairs]).astype(np.float64)
    tgt = np.concatenate([p.tgt.frames for p in pairs]).astype(np.float64)
    floor = 1e-3
    return src.mean(0), np.maximum(src.std(0), floor), tgt.mean(0), np.maximum(tgt.std(0), floor)


def _normalised(sample: Sample, model: Scent) -> Sample:
    src_mean, src_std = model.src_mean.numpy(), model.src_std.numpy()
    tgt_mean, tgt_std = model.tgt_mean.numpy(), model.tgt_std.numpy()
    return Sample(
        id=sample.id,
        src=((sample.src - src_mean) / src_std).astype(np.float32),
        bn=sample.bn.astype(np.float32),
        tgt=((sample.tgt - tgt_mean) / tgt_std).astype(np.float32),
        src_labels=sample.src_labels,
        tgt_labels=sample.tgt_labels,
    )


def build_model(config: TrainConfig, pairs: Sequence[UtterancePair], num_phonemes: int, num_tones: int):
    first = pairs[0]
    model_cfg = ModelConfig(**{
        **dict(feat_dim=first.src.dim, bottleneck_dim=first.src_bn.frames.shape[1],
               num_phonemes=num_phonemes, num_tones=num_tones, classifier_dropout=config.mt_dropout),
        **config.model,
    })
    torch.manual_seed(config.seed)
    model = Scent(model_cfg)
    model.set_normalisation(*normalisation_stats(pairs))
    # created after the model so that enabling multitask does not shift model init
    classifiers = AuxiliaryClassifiers(model_cfg) if config.multitask else None
    return model, classifiers


class Trainer:
    def __init__(self, config: TrainConfig, train_pairs: Sequence[UtterancePair],
                 valid_pairs: Sequence[UtterancePair] = (), num_phonemes: Optional[int] = None,
                 num_tones: Optional[int] = None):
        if not train_pairs:
            raise ValueError("no training pairs")
        self.config = config
        if num_phonemes is None:
            num_phonemes = max(p.src_lab.inventory_size for p in train_pairs)
        if num_tones is None:
            num_tones = train_pairs[0].src_lab.tone_count
        self.model, self.classifiers = build_model(config, train_pairs, num_phonemes, num_tones)
        norm = lambda s: _normalised(s, self.model)  # noqa: E731
        self.samplers = []
        for pair in train_pairs:
            sampler = FragmentSampler(pair)
            sampler.whole = norm(sampler.whole)
            self.samplers.append(sampler)
        self.valid = [norm(FragmentSampler(p).whole) for p in valid_pairs]
        params = list(self.model.parameters())
        if self.classifiers is not None:
            params += list(self.classifiers.parameters())
        self.params = params
        self.optimizer = torch.optim.Adam(params, lr=config.base_lr, betas=config.adam_betas, eps=config.adam_eps)
        self.epoch = 0
        self.step = 0
        self.best_valid = math.inf
        self.history: list[dict] = []

    # -- losses -------------------------------------------------------------

    def batch_losses(self, batch: Batch, generator=None, cls_generators=(None, None)):
        """All loss components for a batch plus the forward output."""
        out = self.model.forward_teacher_forced(batch.inputs, batch.src_len, batch.targets, batch.tgt_len, generator)
        mel, stop = spectral_losses(out, batch.targets, batch.tgt_len, self.config.stop_pos_weight)
        parts = {"mel": mel, "stop": stop}
        if self.classifiers is not None:
            enc_ph, enc_tone = self.classifiers.encoder_head(out.memory, cls_generators[0])
            dec_ph, dec_tone = self.classifiers.decoder_head(out.dec_taps, cls_generators[1])
            src_mask, tgt_mask = batch.src_mask, batch.tgt_mask
            parts.update(
                enc_ph=masked_cross_entropy(enc_ph, batch.src_labels[..., 0], src_mask),
                enc_tone=masked_cross_entropy(enc_tone, batch.src_labels[..., 1], src_mask),
                dec_ph=masked_cross_entropy(dec_ph, batch.tgt_labels[..., 0], tgt_mask),
                dec_tone=masked_cross_entropy(dec_tone, batch.tgt_labels[..., 1], tgt_mask),
            )
            parts["logits"] = (enc_ph, enc_tone, dec_ph, dec_tone)
            parts["total"] = total_loss(mel, stop, parts["enc_ph"], parts["enc_tone"], parts["dec_ph"],
                                        parts["dec_tone"], self.config.loss_weights)
        else:
            parts["total"] = mel + stop
        return parts, out

    # -- epochs -------------------------------------------------------------

    def epoch_samples(self, epoch: int) -> list[Sample]:
        order = np.random.default_rng([self.config.seed, epoch]).permutation(len(self.samplers))
        if not self.config.augment:
            return [self.samplers[i].whole for i in order]
        return [self.samplers[i].draw(visit_rng(self.config.seed, self.samplers[i].pair.id, epoch)) for i in order]

    def train_epoch(self) -> dict:
        self.epoch += 1
        lr = lr_schedule(self.epoch, self.config.warm, self.config.base_lr, self.config.decay)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        samples = self.epoch_samples(self.epoch)
        bs = self.config.batch_size
        sums = {}
        frames = 0
        for start in range(0, len(samples), bs):
            batch = make_batch(samples[start:start + bs])
            self.step += 1
            gen = _step_generator(self.config.seed, self.step, 0)
            cls_gens = (_step_generator(self.config.seed, self.step, 1), _step_generator(self.config.seed, self.step, 2))
            parts, _ = self.batch_losses(batch, gen, cls_gens)
            loss = parts["total"]
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {self.step} (epoch {self.epoch})")
            self.optimizer.zero_grad(set_to_none=False)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(self.params, self.config.grad_clip)
            self.optimizer.step()
            n = int(batch.tgt_len.sum())
            frames += n
            for key in ("total", "mel", "stop"):
                sums[key] = sums.get(key, 0.0) + parts[key].item() * n
        record = {
            "epoch": self.epoch,
            "step": self.step,
            "lr": lr,
            "train_loss": sums["total"] / frames,
            "train_mel": sums["mel"] / frames,
            "train_stop": sums["stop"] / frames,
        }
        record.update(self.validate())
        if "valid_mel" in record:
            self.best_valid = min(self.best_valid, record["valid_mel"])
        self.history.append(record)
        return record

    @torch.no_grad()
    def validate(self) -> dict:
        if not self.valid:
            return {}
        self.model.eval()
        bs = self.config.batch_size
        mel_sum = stop_sum = 0.0
        frames = 0
        hits = {}
        counts = {}
        for start in range(0, len(self.valid), bs):
            batch = make_batch(self.valid[start:start + bs])
            parts, _ = self.batch_losses(batch)
            n = int(batch.tgt_len.sum())
            mel_sum += parts["mel"].item() * n
            stop_sum += parts["stop"].item() * n
            frames += n
            if "logits" in parts:
                enc_ph, enc_tone, dec_ph, dec_tone = parts["logits"]
                for key, logits, labels, mask in (
                    ("enc_phoneme_acc", enc_ph, batch.src_labels[..., 0], batch.src_mask),
                    ("enc_tone_acc", enc_tone, batch.src_labels[..., 1], batch.src_mask),
                    ("dec_phoneme_acc", dec_ph, batch.tgt_labels[..., 0], batch.tgt_mask),
                    ("dec_tone_acc", dec_tone, batch.tgt_labels[..., 1], batch.tgt_mask),
                ):
                    m = int(mask.sum())
                    hits[key] = hits.get(key, 0.0) + masked_accuracy(logits, labels, mask) * m
                    counts[key] = counts.get(key, 0) + m
        self.model.train()
        out = {"valid_mel": mel_sum / frames, "valid_stop": stop_sum / frames}
        out.update({k: hits[k] / counts[k] for k in hits})
        return out

    # -- persistence --------------------------------------------------------

    def meta(self) -> dict:
        return {"train_config": self.config.to_dict(), "epoch": self.epoch, "step": self.step}

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        ckpt = os.path.join(out_dir, "model.ckpt")
        save_model(ckpt, self.model, self.classifiers, self.meta())
        if self.config.keep_epoch_checkpoints:
            save_model(os.path.join(out_dir, f"epoch_{self.epoch:03d}.ckpt"), self.model, self.classifiers, self.meta())
        opt = self.optimizer.state_dict()
        tensors = {}
        for idx, st in opt["state"].items():
            tensors[f"adam.{idx}.exp_avg"] = st["exp_avg"].numpy()
            tensors[f"adam.{idx}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
            tensors[f"adam.{idx}.step"] = np.array([float(st["step"])], dtype=np.float64)
        meta = self.meta()
        meta["best_valid"] = None if math.isinf(self.best_valid) else self.best_valid
        meta["history"] = self.history
        save_checkpoint(os.path.join(out_dir, "train_state.ckpt"), tensors, meta)

    def restore(self, out_dir):
        model, classifiers, _ = load_model(os.path.join(out_dir, "model.ckpt"), with_classifiers=True)
        self.model.load_state_dict(model.state_dict())
        if self.classifiers is not None:
            if classifiers is None:
                raise ValueError("checkpoint has no classifier parameters but multitask is enabled")
            self.classifiers.load_state_dict(classifiers.state_dict())
        tensors, meta = load_checkpoint(os.path.join(out_dir, "train_state.ckpt"))
        state = {}
        for idx in range(len(self.params)):
            if f"adam.{idx}.exp_avg" in tensors:
                state[idx] = {
                    "step": torch.tensor(float(tensors[f"adam.{idx}.step"][0])),
                    "exp_avg": torch.from_numpy(tensors[f"adam.{idx}.exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(tensors[f"adam.{idx}.exp_avg_sq"]),
                }
        opt = self.optimizer.state_dict()
        opt["state"] = state
        self.optimizer.load_state_dict(opt)
        self.epoch = meta["epoch"]
        self.step = meta["step"]
        self.best_valid = math.inf if meta.get("best_valid") is None else meta["best_valid"]
        self.history = list(meta.get("history", []))


def train(train_pairs: Sequence[UtterancePair], config: TrainConfig, out_dir=None,
          valid_pairs: Sequence[UtterancePair] = (), *, num_phonemes: Optional[int] = None,
          num_tones: Optional[int] = None, resume: bool = False, max_epochs: Optional[int] = None,
          trainer: Optional[Trainer] = None) -> Trainer:
    """Run (or continue) training; writes ``metrics.jsonl`` and checkpoints when ``out_dir`` is given.

    ``max_epochs`` stops early (used to test resumption); the schedule still
    follows ``config``.
    """
    if trainer is None:
        trainer = Trainer(config, train_pairs, valid_pairs, num_phonemes, num_tones)
    if resume and out_dir and os.path.exists(os.path.join(out_dir, "train_state.ckpt")):
        trainer.restore(out_dir)
        log.info("resumed from epoch %d", trainer.epoch)
    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    if metrics_path and not resume:
        os.makedirs(out_dir, exist_ok=True)
        open(metrics_path, "w").close()
    last = config.total_epochs if max_epochs is None else min(config.total_epochs, max_epochs)
    while trainer.epoch < last:
        t0 = time.perf_counter()
        record = trainer.train_epoch()
        log.info("epoch %d lr %.6f train %.4f valid %s (%.1fs)", record["epoch"], record["lr"],
                 record["train_loss"], record.get("valid_mel"), time.perf_counter() - t0)
        if out_dir:
            trainer.save(out_dir)
            with open(metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    return trainer
