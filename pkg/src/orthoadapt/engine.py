"""Teacher-student continual test-time adaptation.

Per incoming target image the engine

1. lets the teacher predict on the clean image (optionally at several scales,
   probabilities averaged) -- this is both the evaluated prediction and the
   pseudo-label;
2. masks the image for the student;
3. minimises ``seg_loss(teacher, student) + lam * orth_loss`` over the
   adapter factors only, one Adam step;
4. moves the teacher toward the student by exponential moving average.

Evaluation happens before the update triggered by the same image.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .adapters import PlacementSpec, inject_adapters, iter_adapters, total_orth_loss
from .autodiff import Tensor
from .data import DomainStream, SegSample, StreamEntry, materialize
from .errors import ConfigurationError, DimensionError, NonFiniteError, StructuralError, UsageError
from .masking import Fill, MaskSpec, apply_mask, make_mask
from .metrics import RunReport
from .nn import Module
from .optim import Adam

log = logging.getLogger(__name__)

EPS_LOG = 1e-12

LR_PRESETS = {"main-text": 1e-4, "supp-tta": 0.0006 / 8}


@dataclass(frozen=True)
class EngineConfig:
    use_adapters: bool = True
    rank: int = 32
    sigma: float = 0.02
    placement: tuple[str, ...] = ("enc2", "enc3")
    use_orth: bool = True
    lam: float = 1.0
    orth_reduction: str = "mean"
    mask: MaskSpec | None = MaskSpec()
    scales: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0)
    scale_average: str = "probs"
    pseudo_label: str = "soft"
    ema: float = 0.999
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps_log: float = EPS_LOG
    seed: int = 0

    def __post_init__(self):
        if not self.scales:
            raise ConfigurationError("teacher scale list is empty")
        if any(s <= 0 for s in self.scales):
            raise ConfigurationError(f"scales must be positive, got {self.scales}")
        if not 0.0 <= self.ema <= 1.0:
            raise ConfigurationError(f"EMA factor must lie in [0, 1], got {self.ema}")
        if self.scale_average not in ("probs", "logits"):
            raise ConfigurationError(f"scale_average must be probs or logits, got {self.scale_average!r}")
        if self.pseudo_label not in ("soft", "hard"):
            raise ConfigurationError(f"pseudo_label must be soft or hard, got {self.pseudo_label!r}")
        if self.lr < 0 or self.lam < 0:
            raise ConfigurationError("lr and lam must be non-negative")
        if self.mask is not None and not self.use_adapters:
            raise ConfigurationError("image masking without adapters leaves nothing to train")
        if self.use_orth and not self.use_adapters:
            raise ConfigurationError("orthogonality loss requires adapters")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.use_orth else 0.0


@dataclass
class PseudoLabel:
    probs: np.ndarray
    hard: np.ndarray

    def target(self, mode: str) -> np.ndarray:
        if mode == "soft":
            return self.probs
        k = self.probs.shape[0]
        return (np.arange(k)[:, None, None] == self.hard[None]).astype(np.float64)


@dataclass(frozen=True)
class StepReport:
    step: int
    seg_loss: float
    orth_loss: float
    total_loss: float
    prediction: np.ndarray = field(repr=False, compare=False)


def scaled_extent(n: int, scale: float) -> int:
    """Scaled side length, rounded to the nearest even number (SegNet needs even sizes)."""
    return max(2, 2 * int(round(n * scale / 2.0)))


def seg_loss(y_t: PseudoLabel | np.ndarray, y_s: Tensor, eps_log: float = EPS_LOG,
             mode: str = "soft") -> Tensor:
    """Pixel-mean of ``-sum_c y_t(c) log(y_s(c) + eps_log)``; class axis is -3."""
    target = y_t.target(mode) if isinstance(y_t, PseudoLabel) else np.asarray(y_t, dtype=np.float64)
    if target.shape != y_s.shape:
        raise DimensionError(f"teacher {target.shape} and student {y_s.shape} shapes differ")
    logp = ad.log(ad.add(y_s, eps_log))
    per_pixel = ad.tsum(ad.mul(logp, target), axis=-3)
    return ad.mul(ad.mean(per_pixel), -1.0)


def ema_update(teacher: Module | dict, student: Module | dict, beta: float) -> None:
    """``teacher <- beta * teacher + (1 - beta) * student`` for every student-trainable parameter.

    Parameters frozen in the student are shared bitwise with the teacher by
    construction and are left as they are.
    """
    tp = dict(teacher.named_parameters()) if isinstance(teacher, Module) else dict(teacher)
    sp = dict(student.named_parameters()) if isinstance(student, Module) else dict(student)
    if tp.keys() != sp.keys():
        raise StructuralError(
            f"teacher/student topologies differ: {sorted(set(tp) ^ set(sp))}"
        )
    for name, s in sp.items():
        t = tp[name]
        if t.shape != s.shape:
            raise StructuralError(f"{name}: teacher {t.shape} vs student {s.shape}")
        if getattr(s, "trainable", True):
            t.data = beta * t.data + (1.0 - beta) * s.data


class TeacherStudentEngine:
    def __init__(self, source: Module, cfg: EngineConfig = EngineConfig()):
        self.cfg = cfg
        self.student = copy.deepcopy(source)
        self.student.freeze()
        if cfg.use_adapters:
            inject_adapters(self.student, PlacementSpec(list(cfg.placement)), cfg.rank,
                            cfg.sigma, seed=rngmod.derive_seed(cfg.seed, "init"))
        self.teacher = copy.deepcopy(self.student)
        self.teacher.freeze()
        params = self.student.trainable_parameters()
        self.optimizer = Adam(params, lr=cfg.lr, betas=cfg.betas) if params else None
        self.mask_rng = rngmod.stream(cfg.seed, "mask")
        self.step = 0
        self.consumed: set = set()

    @property
    def trainable(self) -> bool:
        return self.optimizer is not None

    @property
    def num_adapters(self) -> int:
        return sum(1 for _ in iter_adapters(self.student))

    # ------------------------------------------------------------ prediction

    def _teacher_logits(self, x: np.ndarray, h: int, w: int) -> np.ndarray:
        xi = Tensor(x) if (h, w) == x.shape[-2:] else ad.resize(x, h, w, "bilinear")
        return self.teacher(xi).data

    def teacher_predict(self, x: np.ndarray) -> tuple[PseudoLabel, np.ndarray]:
        """Multi-scale pseudo-label and the teacher's single-scale hard prediction."""
        x = np.asarray(x, dtype=np.float64)
        H, W = x.shape[-2:]
        acc = None
        native = None
        with ad.no_grad():
            for s in self.cfg.scales:
                h, w = scaled_extent(H, s), scaled_extent(W, s)
                if (h, w) == (H, W):
                    h, w = H, W
                logits = self._teacher_logits(x, h, w)
                if (h, w) == (H, W) and native is None:
                    native = logits
                if self.cfg.scale_average == "probs":
                    term = ad._softmax_np(logits, -3)
                else:
                    term = logits
                if (h, w) != (H, W):
                    term = ad.resize(term, H, W, "bilinear").data
                acc = term if acc is None else acc + term
            acc = acc / len(self.cfg.scales)
            if self.cfg.scale_average == "probs":
                probs = acc / acc.sum(axis=-3, keepdims=True)
            else:
                probs = ad._softmax_np(acc, -3)
            if native is None:
                native = self._teacher_logits(x, H, W)
        return PseudoLabel(probs, probs.argmax(axis=-3)), native.argmax(axis=-3)

    def predict(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.teacher(Tensor(x)).data.argmax(axis=-3)

    # ------------------------------------------------------------ adaptation

    def adapt_step(self, x: np.ndarray, sample_id=None) -> StepReport:
        if not self.trainable:
            raise UsageError("engine has no trainable parameters")
        if sample_id is not None:
            if sample_id in self.consumed:
                raise UsageError(f"sample {sample_id} was already consumed")
            self.consumed.add(sample_id)
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        pseudo, prediction = self.teacher_predict(x)

        if cfg.mask is not None:
            m = make_mask(cfg.mask, x.shape[-2], x.shape[-1], self.mask_rng)
            xs = apply_mask(x, m, cfg.mask.fill, step=self.step)
        else:
            xs = x

        try:
            probs = ad.softmax(self.student(Tensor(xs)), axis=-3)
            l_seg = seg_loss(pseudo, probs, cfg.eps_log, cfg.pseudo_label)
            if cfg.use_adapters:
                l_orth = total_orth_loss(self.student, cfg.orth_reduction)
            else:
                l_orth = Tensor(0.0)
            lam = cfg.effective_lambda
            total = l_seg + lam * l_orth if lam else l_seg
            ad.backward(total)
        except NonFiniteError as exc:
            raise NonFiniteError(f"adaptation step {self.step}: {exc}") from exc
        self.optimizer.step()
        self.optimizer.zero_grad()
        ema_update(self.teacher, self.student, cfg.ema)
        report = StepReport(self.step, l_seg.item(), l_orth.item(), total.item(), prediction)
        self.step += 1
        return report


def run_stream(engine: TeacherStudentEngine, stream: DomainStream,
               loader: Callable[[StreamEntry], SegSample] | None = None,
               label: str = "") -> RunReport:
    """Evaluate-then-adapt over every stream entry once, in order."""
    if len(stream) == 0:
        raise ConfigurationError("empty stream")
    k = engine.teacher.num_classes
    loader = loader or (lambda e: materialize(e, K=k))
    report = RunReport(num_classes=k, label=label)
    for entry in stream:
        sample = loader(entry)
        if engine.trainable:
            step = engine.adapt_step(sample.image, entry.sample_id)
            pred = step.prediction
            report.losses.append((step.seg_loss, step.orth_loss, step.total_loss))
        else:
            if entry.sample_id in engine.consumed:
                raise UsageError(f"sample {entry.sample_id} was already consumed")
            engine.consumed.add(entry.sample_id)
            pred = engine.predict(sample.image)
        report.cell(entry.round, entry.domain).update(pred, sample.label)
        report.samples += 1
    return report


ABLATION_LADDER: tuple[tuple[str, dict], ...] = (
    ("source", dict(use_adapters=False, use_orth=False, ims=None)),
    ("lora", dict(use_adapters=True, use_orth=False, ims=None)),
    ("lora+orth", dict(use_adapters=True, use_orth=True, ims=None)),
    ("lora+ims0", dict(use_adapters=True, use_orth=False, ims=Fill.ZERO)),
    ("lora+orth+ims0", dict(use_adapters=True, use_orth=True, ims=Fill.ZERO)),
    ("lora+orth+ims255", dict(use_adapters=True, use_orth=True, ims=Fill.MAX)),
    ("lora+orth+ims0+ims255", dict(use_adapters=True, use_orth=True, ims=Fill.ALTERNATE)),
)

FULL_METHOD = "lora+orth+ims0"


def ladder_config(base: EngineConfig, use_adapters: bool, use_orth: bool, ims: Fill | None,
                  ) -> EngineConfig:
    """Derive one ladder row from ``base``: toggles only, all other fields shared."""
    if ims is None:
        mask = None
    else:
        template = base.mask if base.mask is not None else MaskSpec()
        mask = replace(template, fill=ims)
    return replace(base, use_adapters=use_adapters, use_orth=use_orth, mask=mask)


def ablation_matrix(source: Module, stream: DomainStream, base: EngineConfig = EngineConfig(),
                    rows: Sequence[str] | None = None, loader=None) -> dict[str, RunReport]:
    """Run the selected component-ablation rows with shared seeds."""
    names = [n for n, _ in ABLATION_LADDER]
    rows = list(rows) if rows is not None else names
    unknown = set(rows) - set(names)
    if unknown:
        raise ConfigurationError(f"unknown ablation rows {sorted(unknown)}")
    toggles = dict(ABLATION_LADDER)
    out = {}
    for name in rows:
        cfg = ladder_config(base, **toggles[name])
        out[name] = run_stream(TeacherStudentEngine(source, cfg), stream, loader, label=name)
        log.info("ablation row %-24s mean mIoU %.4f", name, out[name].mean_miou())
    return out
