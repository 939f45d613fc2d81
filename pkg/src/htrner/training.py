"""Loss, learning scenarios and the deterministic training loop.

Every scenario is compiled to a list of phases; a phase trains on one corpus
(paragraphs, k-line blocks, or all blocks mixed) with or without entity tags.
Batch order and dropout noise are pure functions of ``(seed, phase, step)``,
so a run resumed from a mid-phase checkpoint replays the uninterrupted run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import preprocess
from .checkpoint import Checkpoint, save_checkpoint, snapshot
from .datasynth import all_blocks, extract_block
from .records import GrayImage, Record
from .transformer import HTRNERModel
from .vocab import Vocab, encode_target

log = logging.getLogger(__name__)

SCENARIOS = (
    "one_stage",
    "two_stage",
    "mixed_level",
    "two_stage_mixed",
    "curriculum_sequential",
    "curriculum_dual",
)
PARAGRAPH = "paragraph"
MIXED = "mixed"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ScenarioConfig:
    scenario: str = "one_stage"
    steps: int = 1000
    lr: float = 1e-3
    warmup: int = 100
    clip: float = 1.0
    batch_size: int = 8
    seed: int = 0
    schedule: list = field(default_factory=lambda: [1, 2, PARAGRAPH])
    include_tags: bool = True
    # stop a phase early once the mean loss of the last ``window`` steps drops below this
    stop_loss: float | None = None
    window: int = 20
    checkpoint_every: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {SCENARIOS}")
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.lr <= 0 or self.warmup < 0 or self.clip <= 0:
            raise ValueError("lr and clip must be positive, warmup non-negative")
        if self.scenario.startswith("curriculum"):
            if not self.schedule:
                raise ValueError("curriculum schedule is empty")
            keys = [_level_key(k) for k in self.schedule]
            if any(b <= a for a, b in zip(keys, keys[1:])):
                raise ValueError(f"curriculum schedule {self.schedule} is not increasing")

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _level_key(level) -> float:
    if level == PARAGRAPH:
        return math.inf
    if isinstance(level, int) and not isinstance(level, bool) and level >= 1:
        return float(level)
    raise ValueError(f"invalid curriculum level {level!r}")


@dataclass(frozen=True)
class Phase:
    index: int
    level: object  # int k, PARAGRAPH or MIXED
    include_tags: bool
    steps: int

    def describe(self) -> dict:
        return {"phase": self.index, "level": self.level, "include_tags": self.include_tags, "steps": self.steps}


def plan_phases(cfg: ScenarioConfig) -> list[Phase]:
    cfg.validate()
    s = cfg.scenario
    if s == "one_stage":
        layout = [(PARAGRAPH, cfg.include_tags)]
    elif s == "two_stage":
        layout = [(PARAGRAPH, False), (PARAGRAPH, True)]
    elif s == "mixed_level":
        layout = [(MIXED, True)]
    elif s == "two_stage_mixed":
        layout = [(MIXED, False), (MIXED, True)]
    elif s == "curriculum_sequential":
        layout = [(k, False) for k in cfg.schedule] + [(PARAGRAPH, True)]
    else:
        layout = [(k, tags) for k in cfg.schedule for tags in (False, True)]
    return [Phase(i, level, tags, cfg.steps) for i, (level, tags) in enumerate(layout)]


@dataclass(frozen=True)
class Sample:
    record: Record
    image: GrayImage
    k: int


def level_corpus(items: Sequence[tuple[Record, GrayImage]], level) -> list[Sample]:
    """Training samples for one phase level, in deterministic order."""
    out: list[Sample] = []
    for rec, img in items:
        if level == PARAGRAPH:
            out.append(Sample(rec, img, rec.L))
        elif level == MIXED:
            for start, k in all_blocks(rec.L):
                out.append(Sample(*extract_block(rec, img, start, k), k))
        else:
            for start in range(1, rec.L - level + 2):
                out.append(Sample(*extract_block(rec, img, start, level), level))
    if not out:
        raise ValueError(f"no training samples at level {level!r}")
    return out


def sequence_loss(logits: torch.Tensor, targets: torch.Tensor, pad: int = 0) -> torch.Tensor:
    """Mean next-token cross-entropy; ``logits[:, t]`` is scored against ``targets[:, t+1]``."""
    if logits.dim() == 2:
        logits, targets = logits[None], targets[None]
    if logits.shape[1] != targets.shape[1] - 1:
        raise ValueError(f"{logits.shape[1]} logit rows for a target of length {targets.shape[1]}")
    gold = targets[:, 1:]
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), gold.reshape(-1), ignore_index=pad)


def pad_tokens(seqs: Sequence[Sequence[int]], pad: int = 0) -> torch.Tensor:
    t = max(len(s) for s in seqs)
    out = torch.full((len(seqs), t), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def make_batch(
    samples: Sequence[Sample], vocab: Vocab, include_tags: bool, image_h: int, image_w: int
) -> tuple[torch.Tensor, torch.Tensor]:
    # preprocess yields a fixed target size, so images stack without extra padding
    images = torch.stack([preprocess(s.image, image_h, image_w) for s in samples])
    tokens = pad_tokens([encode_target(s.record, vocab, include_tags) for s in samples], vocab.pad)
    return images, tokens


def lr_at(step: int, base: float, warmup: int) -> float:
    """Linear warmup then inverse-square-root decay; ``step`` is zero-based."""
    t = step + 1
    if warmup <= 0:
        return base
    return base * min(t / warmup, math.sqrt(warmup / t))


def _mix(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1, np.uint64)[0] >> 1)


@lru_cache(maxsize=64)
def _epoch_order(n: int, seed: int, phase: int, epoch: int) -> tuple[int, ...]:
    return tuple(int(i) for i in np.random.default_rng([seed, phase, epoch]).permutation(n))


def batch_indices(n: int, batch: int, seed: int, phase: int, step: int) -> list[int]:
    """Indices for ``step``: consecutive windows over per-epoch permutations."""
    out = []
    for p in range(step * batch, step * batch + batch):
        epoch, pos = divmod(p, n)
        out.append(_epoch_order(n, seed, phase, epoch)[pos])
    return out


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    loss_trace: list[tuple[int, int, float]]
    phase_log: list[dict]


class Trainer:
    def __init__(
        self,
        model: HTRNERModel,
        vocab: Vocab,
        cfg: ScenarioConfig,
        items: Sequence[tuple[Record, GrayImage]],
        out_dir: str | Path | None = None,
        on_phase_end: Callable[[Phase, HTRNERModel], None] | None = None,
    ):
        if not items:
            raise ValueError("empty training set")
        cfg.validate()
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.items = list(items)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.phases = plan_phases(cfg)
        self.loss_trace: list[tuple[int, int, float]] = []
        self.phase_log: list[dict] = []
        self.optimizer: torch.optim.Optimizer | None = None
        self.on_phase_end = on_phase_end

    def _new_optimizer(self) -> torch.optim.Optimizer:
        # reset per phase: fine-tuning restarts warmup with fresh moments
        return torch.optim.Adam(self.model.parameters(), lr=self.cfg.lr, betas=(0.9, 0.98), eps=1e-9)

    def _cursor(self, phase: Phase, step: int) -> dict:
        return {"scenario": self.cfg.scenario, "phase": phase.index, "step": step}

    def snapshot(self, phase: Phase, step: int) -> Checkpoint:
        meta = {"scenario_config": self.cfg.to_dict(), "phase_log": self.phase_log}
        return snapshot(self.model, self.vocab, self.optimizer, self._cursor(phase, step), meta)

    def run(self, resume: Checkpoint | None = None) -> TrainResult:
        torch.set_num_threads(self.cfg.threads)
        start_phase, start_step = 0, 0
        if resume is not None:
            start_phase, start_step = int(resume.cursor["phase"]), int(resume.cursor["step"])
            self.phase_log = list(resume.meta.get("phase_log", []))[:start_phase]
            self.loss_trace = [tuple(r) for r in resume.meta.get("loss_trace", [])]
        ck = None
        for phase in self.phases[start_phase:]:
            first = start_step if phase.index == start_phase else 0
            ck = self._run_phase(phase, first, resume if phase.index == start_phase else None)
        assert ck is not None
        ck.cursor["done"] = True
        if self.out_dir is not None:
            self.write_outputs(ck)
        return TrainResult(ck, self.loss_trace, self.phase_log)

    def _run_phase(self, phase: Phase, first_step: int, resume: Checkpoint | None) -> Checkpoint:
        cfg, model = self.cfg, self.model
        corpus = level_corpus(self.items, phase.level)
        entry = {**phase.describe(), "corpus": len(corpus)}
        log.info("phase %d: level=%s include_tags=%s corpus=%d", phase.index, phase.level, phase.include_tags, len(corpus))
        self.optimizer = self._new_optimizer()
        if resume is not None and first_step > 0:
            resume.restore_optimizer(model, self.optimizer)
        model.train()
        h, w = model.cfg.image_h, model.cfg.image_w
        losses = [l for _, p, l in self.loss_trace if p == phase.index]
        step = first_step
        while step < phase.steps:
            idx = batch_indices(len(corpus), min(cfg.batch_size, len(corpus)), cfg.seed, phase.index, step)
            images, tokens = make_batch([corpus[i] for i in idx], self.vocab, phase.include_tags, h, w)
            images, tokens = images.to(self._dtype()), tokens
            torch.manual_seed(_mix(cfg.seed, phase.index, step, 7))
            for group in self.optimizer.param_groups:
                group["lr"] = lr_at(step, cfg.lr, cfg.warmup)
            loss = sequence_loss(model(images, tokens), tokens, self.vocab.pad)
            value = loss.detach().item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at phase {phase.index} (level {phase.level}), step {step}"
                )
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip)
            self.optimizer.step()
            global_step = len(self.loss_trace)
            self.loss_trace.append((global_step, phase.index, value))
            losses.append(value)
            step += 1
            if cfg.checkpoint_every and self.out_dir is not None and step % cfg.checkpoint_every == 0:
                ck = self.snapshot(phase, step)
                ck.meta["loss_trace"] = [list(r) for r in self.loss_trace]
                save_checkpoint(self.out_dir / f"step-p{phase.index}-{step:06d}.ckpt", ck)
            if cfg.stop_loss is not None and len(losses) >= cfg.window:
                if sum(losses[-cfg.window :]) / cfg.window < cfg.stop_loss:
                    log.info("phase %d reached stop_loss at step %d", phase.index, step)
                    break
        entry["steps_run"] = step
        self.phase_log.append(entry)
        model.eval()
        if self.on_phase_end is not None:
            self.on_phase_end(phase, model)
        next_phase = self.phases[phase.index + 1] if phase.index + 1 < len(self.phases) else None
        cursor_phase = next_phase or phase
        ck = self.snapshot(cursor_phase, 0 if next_phase else step)
        return ck

    def _dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def write_outputs(self, ck: Checkpoint) -> None:
        out = self.out_dir
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "model.ckpt", ck)
        with open(out / "loss.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["step", "phase", "loss"])
            for step, phase, loss in self.loss_trace:
                wr.writerow([step, phase, repr(loss)])
        (out / "phases.json").write_text(json.dumps(self.phase_log, indent=2) + "\n")


def train(
    model: HTRNERModel,
    vocab: Vocab,
    items: Sequence[tuple[Record, GrayImage]],
    cfg: ScenarioConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    on_phase_end: Callable[[Phase, HTRNERModel], None] | None = None,
) -> TrainResult:
    started = time.perf_counter()
    result = Trainer(model, vocab, cfg, items, out_dir, on_phase_end).run(resume)
    log.info("%s finished in %.1fs", cfg.scenario, time.perf_counter() - started)
    return result


def _with(cfg: ScenarioConfig, **changes) -> ScenarioConfig:
    return ScenarioConfig(**{**cfg.to_dict(), **changes})


def run_one_stage(model, vocab, items, cfg: ScenarioConfig, include_tags: bool = True, out_dir=None) -> TrainResult:
    return train(model, vocab, items, _with(cfg, scenario="one_stage", include_tags=include_tags), out_dir)


def run_two_stage(model, vocab, items, cfg: ScenarioConfig, out_dir=None) -> TrainResult:
    return train(model, vocab, items, _with(cfg, scenario="two_stage"), out_dir)


def run_mixed_level(model, vocab, items, cfg: ScenarioConfig, two_stage: bool = False, out_dir=None) -> TrainResult:
    scenario = "two_stage_mixed" if two_stage else "mixed_level"
    return train(model, vocab, items, _with(cfg, scenario=scenario), out_dir)


def run_curriculum(model, vocab, items, cfg: ScenarioConfig, mode: str = "sequential", out_dir=None) -> TrainResult:
    if mode not in ("sequential", "dual"):
        raise ValueError(f"curriculum mode must be 'sequential' or 'dual', not {mode!r}")
    return train(model, vocab, items, _with(cfg, scenario=f"curriculum_{mode}"), out_dir)
