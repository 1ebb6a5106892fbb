"""Self-distillation with keyword-privileged teachers, R-Drop and embedding-space FGM."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Example
from .model import Batch, ModelConfig, Params, copy_params, forward, make_batch
from .optim import SGD, NonFiniteError

MODES = ("self", "ema", "joint", "special_token", "codi_l1")


class DistillConfigError(ValueError):
    pass


@dataclass
class DistillConfig:
    tau: float = 1.0
    alpha_kl: float = 0.1
    alpha_r: float = 0.5
    epsilon_fgm: float = 0.6
    focal_alpha: float = 2.0
    focal_gamma: float = 3.0
    mode: str = "self"
    ema_decay: float = 0.99
    codi_weight: float = 1.0
    codi_proj: bool = False
    codi_kl: bool = False

    def validate(self) -> None:
        if self.tau <= 0:
            raise DistillConfigError("tau must be > 0")
        for k in ("alpha_kl", "alpha_r", "epsilon_fgm", "codi_weight"):
            if getattr(self, k) < 0:
                raise DistillConfigError(f"{k} must be >= 0")
        if self.focal_alpha <= 0 or self.focal_gamma < 0:
            raise DistillConfigError("focal_alpha must be > 0 and focal_gamma >= 0")
        if self.mode not in MODES:
            raise DistillConfigError(f"unknown distillation mode {self.mode!r}; expected one of {MODES}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise DistillConfigError("ema_decay must lie in [0, 1]")


# ------------------------------------------------------------------- losses

def kl_distill_loss(teacher_logits, student_logits: Tensor, mask, tau: float) -> Tensor:
    """``tau**2`` times the masked mean of KL(softmax(t/tau) || softmax(s/tau)); teacher is a constant."""
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    return ad.kl_from_logits(Tensor(t), student_logits, mask, tau) * (tau * tau)


def rdrop_loss(logits_1: Tensor, logits_2: Tensor, mask) -> Tensor:
    """Symmetric KL between two dropout passes."""
    return (ad.kl_from_logits(logits_1, logits_2, mask) + ad.kl_from_logits(logits_2, logits_1, mask)) * 0.5


def fgm_perturb(table: Tensor, epsilon: float):
    """Shift ``table`` by ``epsilon * g / ||g||`` using its current gradient.

    Returns ``(r_adv, restore)``; ``r_adv`` is None when nothing was perturbed
    (epsilon 0, or a zero or missing gradient). ``restore()`` puts the
    original array back, so the table is bit-identical afterwards.
    """
    g = table.grad
    if epsilon == 0 or g is None:
        return None, lambda: None
    norm = float(np.linalg.norm(g))
    if norm == 0.0:
        return None, lambda: None
    backup = table.data
    r = epsilon * g / norm
    table.data = backup + r

    def restore():
        table.data = backup

    return r, restore


def hidden_at(h: Tensor, batch: Batch) -> Tensor:
    """Final-layer state at the last prompt token of every row."""
    T = batch.tokens.shape[1]
    idx = T - batch.target_len
    return h[np.arange(batch.size), idx]


def _finite(name: str, t: Tensor) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{name} is not finite")


# ------------------------------------------------------------------ trainer

class Trainer:
    """Owns the student, an optional separate teacher, and their optimizers.

    ``ce_step`` is plain supervised training; ``sdft_step`` is the full
    distillation step. Both draw dropout masks from ``(seed, "drop", step, k)``
    so a degenerate distillation config retraces plain training exactly.
    """

    def __init__(self, params: Params, cfg: ModelConfig, vocab, dcfg: DistillConfig | None = None,
                 lr: float = 0.05, momentum: float = 0.9, clip_norm: float | None = 1.0,
                 seed: int = 0, metrics_path=None, tag: dict | None = None):
        self.params = params
        self.cfg = cfg
        self.vocab = vocab
        self.dcfg = dcfg or DistillConfig()
        self.dcfg.validate()
        self.opt = SGD(lr, momentum, clip_norm)
        self.seed = seed
        self.step_no = 0
        self.teacher: Params | None = None
        self.teacher_opt: SGD | None = None
        if self.dcfg.mode in ("ema", "joint"):
            self.teacher = copy_params(params)
            if self.dcfg.mode == "joint":
                self.teacher_opt = SGD(lr, momentum, clip_norm)
        self.proj: Tensor | None = None
        if self.dcfg.mode == "codi_l1" and self.dcfg.codi_proj:
            self.proj = ad.parameter(np.eye(cfg.d_model), name="codi_proj")
        self.metrics_path = metrics_path
        self.tag = tag or {}

    def _seed(self, k: int):
        return (self.seed, "drop", self.step_no, k)

    def _log(self, row: dict) -> None:
        if self.metrics_path is not None:
            with open(self.metrics_path, "a") as fh:
                fh.write(json.dumps({**self.tag, **row}, sort_keys=True) + "\n")

    def _update(self) -> None:
        if self.proj is not None:
            self.opt.step({**self.params, "codi_proj": self.proj})
        else:
            self.opt.step(self.params)

    # -- plain supervised step
    def ce_step(self, examples: Sequence[Example], focal: bool = False) -> dict:
        d = self.dcfg
        b = make_batch([(e.prompt, e.target) for e in examples], self.vocab, self.cfg.item_dim)
        with Tape() as tape:
            logits = forward(self.params, self.cfg, b, dropout_seed=self._seed(0))
            if focal:
                loss = ad.focal_loss(logits, b.targets, b.target_mask, d.focal_alpha, d.focal_gamma)
            else:
                loss = ad.softmax_cross_entropy(logits, b.targets, b.target_mask)
            _finite("loss", loss)
            tape.backward(loss)
        self._update()
        row = {"step": self.step_no, "L_CE": float(loss.data), "total": float(loss.data)}
        self._log(row)
        self.step_no += 1
        return row

    # -- distillation step
    def teacher_params(self) -> Params:
        return self.teacher if self.teacher is not None else self.params

    def sdft_step(self, examples: Sequence[Example]) -> dict:
        d = self.dcfg
        vocab = self.vocab
        sb = make_batch([(e.prompt, e.target) for e in examples], vocab, self.cfg.item_dim)
        mask = sb.target_mask
        codi = d.mode == "codi_l1"
        use_kl = d.alpha_kl > 0 and (not codi or d.codi_kl)
        need_teacher = use_kl or codi or d.mode == "joint"
        t_logits = t_hidden = None
        tb = None
        if need_teacher:
            if any(e.teacher is None for e in examples):
                raise ValueError("distillation examples need a teacher prompt")
            tb = make_batch([(e.teacher, e.target) for e in examples], vocab, self.cfg.item_dim)
            # no tape is active here, so nothing on the teacher side records gradients
            tl, th = forward(self.teacher_params(), self.cfg, tb, dropout_seed=None, return_hidden=True)
            t_logits = tl.data
            t_hidden = hidden_at(th, tb).data

        two = d.alpha_r > 0
        focal = lambda z: ad.focal_loss(z, sb.targets, mask, d.focal_alpha, d.focal_gamma)
        with Tape() as tape:
            s1, h1 = forward(self.params, self.cfg, sb, dropout_seed=self._seed(0), return_hidden=True)
            ce = focal(s1)
            kl = kl_distill_loss(t_logits, s1, mask, d.tau) if use_kl else None
            rd = None
            if two:
                s2 = forward(self.params, self.cfg, sb, dropout_seed=self._seed(1))
                ce = (ce + focal(s2)) * 0.5
                if use_kl:
                    kl = (kl + kl_distill_loss(t_logits, s2, mask, d.tau)) * 0.5
                rd = rdrop_loss(s1, s2, mask)
            total = ce
            if use_kl:
                total = total + kl * d.alpha_kl
            if rd is not None:
                total = total + rd * d.alpha_r
            l1 = None
            if codi:
                hs = hidden_at(h1, sb)
                if self.proj is not None:
                    hs = hs @ self.proj
                l1 = ad.mean(ad.abs_(hs - Tensor(t_hidden)))
                total = total + l1 * d.codi_weight
            for name, t in (("L_CE", ce), ("L_KL", kl), ("L_RDrop", rd), ("L_CODI", l1), ("total", total)):
                if t is not None:
                    _finite(name, t)
            tape.backward(total)

        adv = None
        r, restore = fgm_perturb(self.params["tok_emb"], d.epsilon_fgm)
        if r is not None:
            try:
                with Tape() as tape:
                    sa = forward(self.params, self.cfg, sb, dropout_seed=self._seed(2))
                    adv = focal(sa)
                    if use_kl:
                        adv = adv + kl_distill_loss(t_logits, sa, mask, d.tau) * d.alpha_kl
                    _finite("L_adv", adv)
                    tape.backward(adv)
            finally:
                restore()

        if d.mode == "joint":
            with Tape() as tape:
                tl = forward(self.teacher, self.cfg, tb, dropout_seed=self._seed(3))
                tloss = focal(tl)
                tape.backward(tloss)
            self.teacher_opt.step(self.teacher)

        self._update()
        if d.mode == "ema":
            a = d.ema_decay
            for k, t in self.teacher.items():
                t.data = a * t.data + (1.0 - a) * self.params[k].data

        row = {"step": self.step_no, "L_CE": float(ce.data),
               "L_KL": float(kl.data) if kl is not None else 0.0,
               "L_RDrop": float(rd.data) if rd is not None else 0.0,
               "L_adv": float(adv.data) if adv is not None else 0.0,
               "total": float(total.data) + (float(adv.data) if adv is not None else 0.0)}
        if l1 is not None:
            row["L_CODI"] = float(l1.data)
        self._log(row)
        self.step_no += 1
        return row


def config_dict(d: DistillConfig) -> dict:
    return asdict(d)
